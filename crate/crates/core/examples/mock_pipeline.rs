use std::path::PathBuf;
use std::sync::Arc;

use unihd::bench;
use unihd::executor::Executor;
use unihd::gateway::{Gateway, MockBackend};
use unihd::prompt::TemplateStore;
use unihd::stages::{DetectionMethod, StageContext};
use unihd::tools::{MockTools, ToolBackendSet};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fixtures = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures");
    let bench = bench::load(&fixtures.join("acceptance.json"))?;

    let templates = Arc::new(TemplateStore::builtin()?);
    let backend = MockBackend::from_dir(&fixtures.join("mock/model"))?;
    let tools = MockTools::new(fixtures.join("mock")).with_image_root(&fixtures);
    let ex = Executor::new(
        Arc::new(Gateway::new(Arc::new(backend))),
        ToolBackendSet::mock(tools, templates.clone()),
        StageContext::new(templates),
    );

    for outcome in ex.run_batch(bench.pairs, DetectionMethod::UniHD, 4).await? {
        match outcome {
            Ok(r) => {
                println!("{}", r.pair_id);
                for v in &r.verdicts {
                    println!("  claim{} {:<18} {}", v.claim_index, v.label.as_str(), v.rationale);
                }
            }
            Err(f) => println!("{} failed at {}: {} {}", f.pair_id, f.stage, f.kind, f.message),
        }
    }
    Ok(())
}
