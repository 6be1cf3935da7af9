use std::collections::BTreeMap;

use unihd::bench;
use unihd::metrics::{self, Level};
use unihd::model::{Label, Verdict};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/acceptance.json");
    let bench = bench::load(std::path::Path::new(path))?;

    // A detector that calls every claim hallucinatory.
    let predictions: BTreeMap<String, Vec<Verdict>> = bench
        .pairs
        .iter()
        .map(|p| {
            let v = p.claims.iter().map(|c| Verdict::new(c.index, Label::Hallucinatory, "always")).collect();
            (p.id.clone(), v)
        })
        .collect();

    let eval = bench::evaluate(&bench, &predictions)?;
    println!("{}", metrics::to_table(&eval.reports));

    let preds = [Label::Hallucinatory, Label::NonHallucinatory, Label::Hallucinatory, Label::Hallucinatory];
    let golds = [Label::Hallucinatory, Label::NonHallucinatory, Label::NonHallucinatory, Label::Hallucinatory];
    let r = metrics::report(&preds, &golds, Level::Claim)?;
    println!("acc {} mac.f1 {}", metrics::percent_str(r.accuracy), metrics::percent_str(r.macro_f1));
    Ok(())
}
