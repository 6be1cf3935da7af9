use unihd::model::ImageRef;
use unihd::prompt::{render_claim_list, Bindings, TemplateId, TemplateStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let store = TemplateStore::builtin()?;
    let claims = render_claim_list(&[
        "The picture shows five people swimming.",
        "On the beach, there is a chair, a umbrella, and a surfboard.",
    ])?;

    let query = store.render(TemplateId::ObjectQuery, &Bindings::new().with("claims", claims.clone()), &[])?;
    println!("--- {} ---\n{}\n", TemplateId::ObjectQuery.file_name(), query.user);

    let image = ImageRef::from_path(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/images/beach.png"))?;
    let verify = store.render(
        TemplateId::VerifyImageToText,
        &Bindings::new()
            .with("claims", claims)
            .with("object", "people [0.345, 0.424, 0.408, 0.509]\nchair [0.697, 0.56, 0.752, 0.65]")
            .with("attribute", "none information")
            .with("scene_text", "none information")
            .with("fact", "none information"),
        &[image],
    )?;
    println!("--- {} ---\n{}", TemplateId::VerifyImageToText.file_name(), verify.user);

    for (name, digest) in store.digests() {
        println!("{name:<28} {digest}");
    }
    Ok(())
}
