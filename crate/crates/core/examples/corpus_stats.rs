use unihd::bench;
use unihd::model::TaskType;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let corpus = bench::synthetic_corpus(
        &[(TaskType::ImageCaptioning, 200), (TaskType::Vqa, 200), (TaskType::TextToImage, 220)],
        7,
    );
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("corpus.json");
    bench::save(&corpus, &path)?;
    let reloaded = bench::load(&path)?;
    print!("{}", bench::stats_text(&bench::stats(&reloaded)));

    let fixture = bench::load(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/acceptance.json")))?;
    println!();
    print!("{}", bench::stats_text(&bench::stats(&fixture)));
    Ok(())
}
