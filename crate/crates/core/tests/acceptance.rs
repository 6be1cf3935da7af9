//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `UNIHD_REGENERATE=1` rewrites the prompt snapshots.

mod support;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use serde::Deserialize;

use unihd::bench;
use unihd::executor::RunManifest;
use unihd::metrics::{self, derive_response_label, derive_segment_label, fleiss_kappa, Level, RatingsMatrix};
use unihd::model::{EvidenceBundle, ImageRef, HallucinationCategory, Label, NormBox, ObjectEvidence, SceneTextEvidence, TaskType};
use unihd::prompt::{render_claim_list, Bindings, TemplateId, TemplateStore};
use unihd::stages::{parse_claim_query_map, parse_verdicts};
use unihd::tools::format_evidence_sections;

use support::{acceptance_bench, fixtures, regenerate};

/// Table values are printed with two decimals, so recomputed values may
/// differ by rounding only.
const TABLE_TOLERANCE: f64 = 0.01;
const TABLE_BUDGET: Duration = Duration::from_secs(1);
const PROPERTY_CASES: u32 = 1000;
const PROPERTY_BUDGET: Duration = Duration::from_secs(10);
const MAX_LABELS: usize = 200;
const PIPELINE_BUDGET: Duration = Duration::from_secs(5);
const KAPPA_TOLERANCE: f64 = 1e-9;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

#[derive(Deserialize)]
struct TableRow {
    task: String,
    mllm: String,
    method: String,
    level: String,
    h_p: f64,
    h_r: f64,
    h_f1: f64,
    nh_p: f64,
    nh_r: f64,
    nh_f1: f64,
    avg_p: f64,
    avg_r: f64,
    macro_f1: f64,
}

fn metric_arithmetic() -> Check {
    let start = Instant::now();
    let rows: Vec<TableRow> =
        serde_json::from_str(&std::fs::read_to_string(fixtures().join("table2.json")).unwrap()).map_err(|e| e.to_string())?;
    ensure(rows.len() == 24, || format!("expected 24 rows, found {}", rows.len()))?;
    let mut worst: f64 = 0.0;
    for r in &rows {
        let h_f1 = metrics::f1_score(r.h_p, r.h_r);
        let nh_f1 = metrics::f1_score(r.nh_p, r.nh_r);
        let checks = [
            ("H.F1", h_f1, r.h_f1),
            ("NH.F1", nh_f1, r.nh_f1),
            ("Avg.P", (r.h_p + r.nh_p) / 2.0, r.avg_p),
            ("Avg.R", (r.h_r + r.nh_r) / 2.0, r.avg_r),
            ("Mac.F1", (r.h_f1 + r.nh_f1) / 2.0, r.macro_f1),
        ];
        for (name, got, printed) in checks {
            let d = (got - printed).abs();
            worst = worst.max(d);
            ensure(d <= TABLE_TOLERANCE + 1e-9, || {
                format!("{}/{}/{}/{} {name}: {got:.4} vs {printed}", r.task, r.mllm, r.method, r.level)
            })?;
        }
    }
    let mac = (83.89 + 79.38) / 2.0 - 81.63f64;
    ensure(mac.abs() <= TABLE_TOLERANCE, || format!("83.89/79.38 averaging off by {mac}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < TABLE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("24 rows, max deviation {worst:.4} pp, {elapsed:?}"))
}

fn label() -> impl Strategy<Value = Label> {
    prop::bool::ANY.prop_map(|h| if h { Label::Hallucinatory } else { Label::NonHallucinatory })
}

fn brute_force(preds: &[Label], golds: &[Label]) -> [f64; 10] {
    let count = |p: Label, g: Label| preds.iter().zip(golds).filter(|(a, b)| **a == p && **b == g).count() as f64;
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let class = |pos: Label, neg: Label| {
        let tp = count(pos, pos);
        let fp = count(pos, neg);
        let fn_ = count(neg, pos);
        let p = div(tp, tp + fp);
        let r = div(tp, tp + fn_);
        (p, r, div(2.0 * p * r, p + r))
    };
    let (hp, hr, hf) = class(Label::Hallucinatory, Label::NonHallucinatory);
    let (np, nr, nf) = class(Label::NonHallucinatory, Label::Hallucinatory);
    let acc = preds.iter().zip(golds).filter(|(a, b)| a == b).count() as f64 / preds.len() as f64;
    [hp, hr, hf, np, nr, nf, acc, (hp + np) / 2.0, (hr + nr) / 2.0, (hf + nf) / 2.0]
}

fn aggregation_laws() -> Check {
    let start = Instant::now();
    let mut runner = TestRunner::new(Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&prop::collection::vec(label(), 1..=MAX_LABELS), |labels| {
            let any = labels.iter().any(|l| *l == Label::Hallucinatory);
            let oracle = if any { Label::Hallucinatory } else { Label::NonHallucinatory };
            prop_assert_eq!(derive_segment_label(&labels).unwrap(), oracle);
            prop_assert_eq!(derive_response_label(&labels).unwrap(), oracle);
            Ok(())
        })
        .map_err(|e| format!("label derivation: {e}"))?;
    let pairs = (1..=MAX_LABELS).prop_flat_map(|n| (prop::collection::vec(label(), n), prop::collection::vec(label(), n)));
    runner
        .run(&pairs, |(preds, golds)| {
            let r = metrics::report(&preds, &golds, Level::Claim).unwrap();
            let got = [
                r.hallucinatory.precision,
                r.hallucinatory.recall,
                r.hallucinatory.f1,
                r.non_hallucinatory.precision,
                r.non_hallucinatory.recall,
                r.non_hallucinatory.f1,
                r.accuracy,
                r.avg_precision,
                r.avg_recall,
                r.macro_f1,
            ];
            let want = brute_force(&preds, &golds);
            for (g, w) in got.iter().zip(want) {
                prop_assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
            Ok(())
        })
        .map_err(|e| format!("report: {e}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < PROPERTY_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{PROPERTY_CASES} cases each for derivation and report, {elapsed:?}"))
}

/// Worked examples from the appendix: the bindings each published template
/// is rendered with.
fn worked_examples() -> Vec<(TemplateId, Bindings)> {
    let list = |c: &[&str]| render_claim_list(c).unwrap();
    let object = |label: &str, b: [f64; 4]| ObjectEvidence {
        label: label.into(),
        bbox: NormBox::from_array(b),
    };
    let beach = EvidenceBundle {
        objects: vec![
            object("people", [0.345, 0.424, 0.408, 0.509]),
            object("people", [0.197, 0.44, 0.28, 0.514]),
            object("people", [0.517, 0.315, 0.561, 0.401]),
            object("people", [0.441, 0.356, 0.47, 0.405]),
            object("chair", [0.398, 0.595, 0.637, 0.901]),
            object("chair", [0.621, 0.592, 0.789, 0.889]),
            object("umbrella", [0.501, 0.334, 0.968, 0.88]),
        ],
        ..Default::default()
    };
    let car = EvidenceBundle {
        objects: vec![
            object("basketball", [0.741, 0.179, 0.848, 0.285]),
            object("boy", [0.773, 0.299, 0.98, 0.828]),
            object("car", [0.001, 0.304, 0.992, 0.854]),
        ],
        scene_text: vec![SceneTextEvidence {
            text: "worlld".into(),
            bbox: NormBox::new(0.405, 0.504, 0.726, 0.7),
        }],
        ..Default::default()
    };
    let verify = |e: &EvidenceBundle, claims: &[&str]| {
        let s = format_evidence_sections(e);
        Bindings::new()
            .with("object_evidence", s.object)
            .with("attribute_evidence", s.attribute)
            .with("scene_text_evidence", s.scene_text)
            .with("fact_evidence", s.fact)
            .with("claims", list(claims))
    };
    vec![
        (
            TemplateId::ObjectQuery,
            Bindings::new().with(
                "claims",
                list(&[
                    "The image depicts a man laying on the ground.",
                    "The man is next to a motorcycle.",
                    "The sun is shining upon the ground.",
                    "The light is very bright.",
                ]),
            ),
        ),
        (
            TemplateId::AttributeQuery,
            Bindings::new().with("objects", "kitchen.man.apron").with(
                "claims",
                list(&[
                    "The image depicts a kitchen.",
                    "There is a man in a white apron.",
                    "The man is standing in the middle of the kitchen.",
                    "The overall atmosphere is very pleasant.",
                ]),
            ),
        ),
        (
            TemplateId::SceneTextQuery,
            Bindings::new().with(
                "claims",
                list(&[
                    "There is a black device in the image.",
                    "The device is a brand of smartphones produced by Samsung Electronics.",
                ]),
            ),
        ),
        (
            TemplateId::FactQuery,
            Bindings::new().with(
                "claims",
                list(&[
                    "The image shows a black phone.",
                    "This black phone is manufactured by Huawei.",
                    "Huawei is a company located in Shenzhen, China.",
                ]),
            ),
        ),
        (
            TemplateId::VerifyImageToText,
            verify(
                &beach,
                &[
                    "The picture shows five people swimming.",
                    "On the beach, there is a chair, a umbrella, and a surfboard.",
                    "The green umbrella is on the right side of the chair.",
                ],
            ),
        ),
        (
            TemplateId::VerifyTextToImage,
            verify(
                &car,
                &[
                    "The side of the car reads 'Hello World'",
                    "A boy is playing a yellow basketball beside a plant.",
                ],
            ),
        ),
    ]
}

/// Independent renderer: plain string substitution over the raw template file.
fn substitute(template_file: &Path, bindings: &Bindings) -> String {
    let mut text = std::fs::read_to_string(template_file).unwrap();
    for (slot, _) in bindings.iter() {
        text = text.replace(&format!("{{{slot}}}"), &format!("\u{0}{slot}\u{0}"));
    }
    text = text.replace("{{", "{").replace("}}", "}");
    for (slot, value) in bindings.iter() {
        text = text.replace(&format!("\u{0}{slot}\u{0}"), value);
    }
    text
}

const TABLE7_INPUT: &str = "<Input>:
Here is the object detection expert model's result:
chair [0.398, 0.595, 0.637, 0.901]
chair [0.621, 0.592, 0.789, 0.889]
people [0.197, 0.44, 0.28, 0.514]
people [0.345, 0.424, 0.408, 0.509]
people [0.441, 0.356, 0.47, 0.405]
people [0.517, 0.315, 0.561, 0.401]
umbrella [0.501, 0.334, 0.968, 0.88]

Here is the attribute detection expert model's result:
none information

Here is the scene text recognition expert model's result:
none information

Here is the external knowledge:
none information

Here is the claim list:
claim1: The picture shows five people swimming.
claim2: On the beach, there is a chair, a umbrella, and a surfboard.
claim3: The green umbrella is on the right side of the chair.

<Output>:
";

const TABLE3_CLAIM_LIST: &str = "claim list:
claim1: The image depicts a man laying on the ground.
claim2: The man is next to a motorcycle.
claim3: The sun is shining upon the ground.
claim4: The light is very bright.
output:
";

fn prompt_fidelity() -> Check {
    let store = TemplateStore::builtin().map_err(|e| e.to_string())?;
    let templates = Path::new(env!("CARGO_MANIFEST_DIR")).join("templates");
    let snapshots = fixtures().join("prompts");
    let examples = worked_examples();
    ensure(examples.len() == TemplateId::PUBLISHED.len(), || "one example per published template".into())?;
    for (id, bindings) in &examples {
        let images = match id {
            TemplateId::VerifyImageToText => vec![ImageRef::from_path(fixtures().join("images/beach.png")).unwrap()],
            TemplateId::VerifyTextToImage => vec![ImageRef::from_path(fixtures().join("images/car.png")).unwrap()],
            _ => vec![],
        };
        let p = store.render(*id, bindings, &images).map_err(|e| format!("{id}: {e}"))?;
        let rendered = format!("SYSTEM:\n{}\n\nUSER:\n{}\n", p.system, p.user);
        let path = snapshots.join(id.file_name());
        if regenerate() {
            std::fs::create_dir_all(&snapshots).unwrap();
            std::fs::write(&path, &rendered).unwrap();
        }
        let pinned = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        ensure(pinned == rendered, || format!("{id}: render differs from pinned snapshot"))?;
        let oracle = substitute(&templates.join(id.file_name()), bindings);
        ensure(oracle == rendered, || format!("{id}: render differs from plain substitution"))?;
    }
    let verify_i2t = std::fs::read_to_string(snapshots.join(TemplateId::VerifyImageToText.file_name())).unwrap();
    ensure(verify_i2t.ends_with(TABLE7_INPUT), || "verify-image-to-text input block".into())?;
    let object = std::fs::read_to_string(snapshots.join(TemplateId::ObjectQuery.file_name())).unwrap();
    ensure(object.ends_with(TABLE3_CLAIM_LIST), || "object-query claim list".into())?;
    ensure(object.contains("Extract object in the singular form."), || "object-query rule text".into())?;
    let fact = std::fs::read_to_string(snapshots.join(TemplateId::FactQuery.file_name())).unwrap();
    ensure(fact.contains("two effective and skeptical search engine questions"), || "fact-query rule text".into())?;
    let verify_t2i = std::fs::read_to_string(snapshots.join(TemplateId::VerifyTextToImage.file_name())).unwrap();
    ensure(
        verify_t2i.contains("scene text recognition expert model's result:\nworlld [0.405, 0.504, 0.726, 0.7]\n\nHere is the external knowledge:\nnone information\n\nHere is the claim list:\nclaim1: The side of the car reads 'Hello World'\nclaim2: A boy"),
        || "verify-text-to-image evidence block".into(),
    )?;
    Ok(format!("{} templates byte-match snapshots and substitution oracle", examples.len()))
}

fn parser_totality() -> Check {
    use HallucinationCategory::*;
    let queries: &[(&str, usize, HallucinationCategory)] = &[
        (r#"{"claim1":"man","claim2":"man.motorcycle","claim3":"none", "claim4":"none"}"#, 4, Object),
        (r#"{"claim1":"device","claim2":"device", "claim3":"none"}"#, 3, Object),
        (r#"{"claim1":"man.shirt","claim2":"man","claim3":"man"}"#, 3, Object),
        (r#"{"claim1":["What color is the dog?", "Is there a dog on the left in the image?"],"claim2":["What color are the cat?", "Are there two cats on the right in the image?"]}"#, 2, Attribute),
        (r#"{"claim1":["What is the man wearing?"], "claim2":["Does the man appear to be smoking?"], "claim3":[What color is the wall?]}"#, 3, Attribute),
        (r#"{"claim1":["none"], "claim2":["What does the man wear?", "What color is the apron?"], "claim3":["Is the man standing in the middle of the kitchen?"], "claim4": ["none"]}"#, 4, Attribute),
        (r#"{"claim1":["none"],"claim2":["What is the brand of the device in the image?"]}"#, 2, SceneText),
        (r#"{"claim1":["none"],"claim2":["What does the stop sign say in the image?"]}"#, 2, SceneText),
        (r#"{"claim1":["What are written on the car?"],"claim2":["none"]}"#, 2, SceneText),
        (r#"{"claim1":["none"],"claim2":["none"],"claim3":["Where is Huawei headquartered?", "Huawei company"]}"#, 3, Fact),
        (r#"{"claim1":["none"],"claim2":["Who is the CEO of twitter?", "CEO Twitter"]}"#, 2, Fact),
        (r#"{"claim1":["none"],"claim2":["none"]}"#, 2, Fact),
    ];
    for (raw, n, kind) in queries {
        parse_claim_query_map(raw, *n, *kind).map_err(|e| format!("{raw}: {e}"))?;
    }
    let first = parse_claim_query_map(queries[0].0, 4, Object).unwrap().queries;
    let want: BTreeMap<u32, Vec<String>> = [
        (1, vec!["man".to_string()]),
        (2, vec!["man".to_string(), "motorcycle".to_string()]),
        (3, vec![]),
        (4, vec![]),
    ]
    .into();
    ensure(first == want, || format!("object split: {first:?}"))?;
    let wall = parse_claim_query_map(queries[4].0, 3, Attribute).unwrap().queries;
    ensure(wall[&3] == ["What color is the wall?"], || format!("bare question: {wall:?}"))?;

    let table7 = r#"[
    {"claim1":"hallucination","reason":"The object detection expert model identified four people, not five people. Based on the image information, they might be swimming. Therefore, there's a hallucination."},
    {"claim2":"hallucination","reason":"According to the results of the object detection expert model and my judgment, there are two chairs and an umbrella in the picture, but there is no surfboard. Therefore, there's a hallucination."},
    {"claim3":"non-hallucination","reason":"Based on the positional information of the bounding boxes and my judgment, the umbrella is to the right of the chairs. The umbrella is green. Therefore, there's no hallucination."}
]"#;
    let table8 = r#"[{"claim1":"hallucination", "reason":"The object detection model has identified a car in the image. However, based on the detection results of the scene text expert model and my judgment, the text in the image is 'hello worlld' not 'hello world'. Therefore, there's a hallucination."},{"claim2":"hallucination", "reason":"The object detection model has identified a boy and a basketball in the image. And the boy is visible in the image playing with a yellow basketball. But according to the detection results of the object detection expert model and my judgment, there's no plant. Therefore, there's a hallucination."}]"#;
    let v7 = parse_verdicts(table7, 3).map_err(|e| format!("table 7 output: {e}"))?;
    let labels: Vec<Label> = v7.iter().map(|v| v.label).collect();
    ensure(
        labels == [Label::Hallucinatory, Label::Hallucinatory, Label::NonHallucinatory] && v7.iter().all(|v| !v.rationale.is_empty()),
        || format!("{v7:?}"),
    )?;
    let v8 = parse_verdicts(table8, 2).map_err(|e| format!("table 8 output: {e}"))?;
    ensure(v8.iter().all(|v| v.label == Label::Hallucinatory), || format!("{v8:?}"))?;

    let malformed = [
        ("this is not json", 1, "UnparseableModelOutput"),
        (r#"[{"claim1":"hallucination","reason":"r"}]"#, 2, "ClaimCountMismatch"),
        (r#"[{"claim1":"maybe","reason":"r"}]"#, 1, "UnknownLabel"),
    ];
    for (raw, n, kind) in malformed {
        match parse_verdicts(raw, n) {
            Err(e) if e.kind() == kind => {}
            other => return Err(format!("{raw}: expected {kind}, got {other:?}")),
        }
    }
    Ok(format!("{} query outputs, 2 verdict outputs, 3 malformed cases", queries.len()))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_unihd"))
}

fn detect(out: &Path, run_id: &str, width: usize, cache: Option<&Path>) -> Result<RunManifest, String> {
    let f = fixtures();
    let mut cmd = bin();
    cmd.args(["detect", "--backend", "mock", "--method", "unihd"])
        .arg("--bench")
        .arg(acceptance_bench())
        .arg("--fixtures")
        .arg(f.join("mock"))
        .arg("--out")
        .arg(out)
        .args(["--run-id", run_id, "--width", &width.to_string()]);
    match cache {
        Some(dir) => cmd.arg("--cache-dir").arg(dir),
        None => cmd.arg("--no-cache"),
    };
    let output = cmd.env_remove("UNIHD_CONFIG").output().map_err(|e| e.to_string())?;
    ensure(output.status.code() == Some(0), || {
        format!("detect exited {:?}: {}", output.status.code(), String::from_utf8_lossy(&output.stderr))
    })?;
    let manifest = std::fs::read_to_string(out.join(run_id).join("manifest.json")).map_err(|e| e.to_string())?;
    serde_json::from_str(&manifest).map_err(|e| e.to_string())
}

#[derive(Deserialize)]
struct PairFile {
    verdicts: Vec<PinnedVerdict>,
}

#[derive(Deserialize)]
struct PinnedVerdict {
    claim_index: u32,
    label: Label,
    rationale: String,
}

fn read_verdicts(run: &Path, pair: &str) -> Result<Vec<PinnedVerdict>, String> {
    let text = std::fs::read_to_string(run.join(format!("{pair}.json"))).map_err(|e| format!("{pair}: {e}"))?;
    Ok(serde_json::from_str::<PairFile>(&text).map_err(|e| e.to_string())?.verdicts)
}

fn mock_pipeline(work: &Path) -> Check {
    use Label::{Hallucinatory as H, NonHallucinatory as N};
    let start = Instant::now();
    let manifest = detect(work, "e2e", 4, None)?;
    let elapsed = start.elapsed();
    ensure(manifest.succeeded == 6 && manifest.failed == 0, || format!("{} ok, {} failed", manifest.succeeded, manifest.failed))?;
    let bench = bench::load(&acceptance_bench()).map_err(|e| e.to_string())?;
    let i2t = bench.pairs.iter().filter(|p| p.task != TaskType::TextToImage).count();
    ensure(i2t == 3 && bench.pairs.len() == 6, || "fixture composition".into())?;
    let pinned: [(&str, &[Label]); 6] = [
        ("ic-beach", &[H, H, N]),
        ("vqa-athletes", &[H, H]),
        ("ic-device", &[N, N, N]),
        ("t2i-car", &[H, H]),
        ("t2i-phone", &[N, N]),
        ("t2i-sunset", &[N]),
    ];
    let run = work.join("e2e");
    for (pair, labels) in pinned {
        let v = read_verdicts(&run, pair)?;
        let got: Vec<Label> = v.iter().map(|v| v.label).collect();
        ensure(got == labels, || format!("{pair}: {got:?}"))?;
        ensure(v.iter().enumerate().all(|(i, v)| v.claim_index == i as u32 + 1), || format!("{pair}: claim order"))?;
    }
    let beach = read_verdicts(&run, "ic-beach")?;
    ensure(beach[0].rationale.contains("identified four people, not five"), || "beach claim1 rationale".into())?;
    let car = read_verdicts(&run, "t2i-car")?;
    ensure(car[0].rationale.contains("'hello worlld' not 'hello world'"), || "car claim1 rationale".into())?;
    ensure(elapsed < PIPELINE_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("6 pairs, verdicts as pinned, {elapsed:?}"))
}

fn run_files(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name != "manifest.json" {
            out.insert(name, std::fs::read(&path).map_err(|e| e.to_string())?);
        }
    }
    Ok(out)
}

fn determinism(work: &Path) -> Check {
    let cache = work.join("cache");
    let cold = detect(work, "cold-w1", 1, Some(&cache))?;
    ensure(cold.cache_hits == 0 && cold.backend_invocations > 0, || "cold run should miss".into())?;
    let reference = run_files(&work.join("cold-w1"))?;
    let mut warm_runs = Vec::new();
    for width in [1, 4, 8] {
        let id = format!("warm-w{width}");
        let m = detect(work, &id, width, Some(&cache))?;
        let traced_misses: usize = m.pairs.iter().flat_map(|p| &p.trace).filter(|t| !t.cache_hit).count();
        let traced_hits: usize = m.pairs.iter().flat_map(|p| &p.trace).filter(|t| t.cache_hit).count();
        ensure(m.backend_invocations == 0 && traced_misses == 0, || {
            format!("{id}: {} backend invocations, {traced_misses} traced misses", m.backend_invocations)
        })?;
        ensure(traced_hits == cold.backend_invocations, || format!("{id}: {traced_hits} hits vs {} cold calls", cold.backend_invocations))?;
        warm_runs.push(id);
    }
    for width in [4, 8] {
        let id = format!("nocache-w{width}");
        detect(work, &id, width, None)?;
        warm_runs.push(id);
    }
    for id in &warm_runs {
        let files = run_files(&work.join(id))?;
        ensure(files == reference, || format!("{id} differs from cold-w1"))?;
    }
    Ok(format!(
        "{} files identical across widths 1/4/8, cold/warm/uncached; warm runs 0 backend calls ({} cached)",
        reference.len(),
        cold.backend_invocations
    ))
}

fn fleiss_formula(rows: &[Vec<u32>]) -> f64 {
    let n_items = rows.len() as f64;
    let n = rows[0].iter().sum::<u32>() as f64;
    let k = rows[0].len();
    let p_j: Vec<f64> = (0..k)
        .map(|j| rows.iter().map(|r| r[j] as f64).sum::<f64>() / (n_items * n))
        .collect();
    let p_i: Vec<f64> = rows
        .iter()
        .map(|r| (r.iter().map(|&c| (c * c) as f64).sum::<f64>() - n) / (n * (n - 1.0)))
        .collect();
    let p_bar = p_i.iter().sum::<f64>() / n_items;
    let p_e = p_j.iter().map(|p| p * p).sum::<f64>();
    (p_bar - p_e) / (1.0 - p_e)
}

fn kappa() -> Check {
    for rows in [vec![vec![3, 0], vec![0, 3], vec![3, 0]], vec![vec![0, 5, 0], vec![5, 0, 0], vec![0, 0, 5]]] {
        let k = fleiss_kappa(&RatingsMatrix::new(rows.clone()).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        ensure(k == 1.0, || format!("unanimous {rows:?} gave {k}"))?;
    }
    let rows = vec![vec![2, 1], vec![2, 1]];
    let k = fleiss_kappa(&RatingsMatrix::new(rows.clone()).unwrap()).map_err(|e| e.to_string())?;
    let oracle = fleiss_formula(&rows);
    ensure((k - -0.5).abs() <= KAPPA_TOLERANCE && (k - oracle).abs() <= KAPPA_TOLERANCE, || format!("{k} vs {oracle}"))?;

    let matrices = (2usize..=20, 2usize..=4, 2u32..=9).prop_flat_map(|(items, cats, raters)| {
        prop::collection::vec(prop::collection::vec(0u32..=raters, cats), items).prop_map(move |rows| {
            rows.into_iter()
                .map(|mut r| {
                    let last = r.len() - 1;
                    let head: u32 = r[..last].iter().sum::<u32>();
                    if head > raters {
                        let mut left = raters;
                        for c in r[..last].iter_mut() {
                            *c = (*c).min(left);
                            left -= *c;
                        }
                        r[last] = left;
                    } else {
                        r[last] = raters - head;
                    }
                    r
                })
                .collect::<Vec<Vec<u32>>>()
        })
    });
    let mut runner = TestRunner::new(Config {
        cases: PROPERTY_CASES,
        failure_persistence: None,
        ..Config::default()
    });
    let degenerate = std::cell::Cell::new(0u32);
    let checked = std::cell::Cell::new(0u32);
    runner
        .run(&matrices, |rows| {
            let m = RatingsMatrix::new(rows.clone()).unwrap();
            match fleiss_kappa(&m) {
                Ok(k) => {
                    prop_assert!((-1.0..=1.0).contains(&k), "{k} out of range for {rows:?}");
                    checked.set(checked.get() + 1);
                }
                Err(_) => degenerate.set(degenerate.get() + 1),
            }
            Ok(())
        })
        .map_err(|e| format!("range: {e}"))?;
    Ok(format!(
        "unanimous = 1.0, [[2,1],[2,1]] = {k}, {} random matrices in range ({} degenerate)",
        checked.get(),
        degenerate.get()
    ))
}

fn corpus_stats(work: &Path) -> Check {
    let composition = [(TaskType::ImageCaptioning, 200), (TaskType::Vqa, 200), (TaskType::TextToImage, 220)];
    let synthetic = bench::synthetic_corpus(&composition, 7);
    let path = work.join("synthetic.json");
    bench::save(&synthetic, &path).map_err(|e| e.to_string())?;
    let reloaded = bench::load(&path).map_err(|e| format!("reload: {e}"))?;
    let s = bench::stats(&reloaded);
    let counts: Vec<u64> = TaskType::ALL.iter().map(|t| s.tasks[t]).collect();
    ensure(counts == [200, 200, 220] && s.pairs == 620, || format!("{counts:?}"))?;
    let output = bin()
        .args(["stats", "--format", "json", "--bench"])
        .arg(&path)
        .output()
        .map_err(|e| e.to_string())?;
    ensure(output.status.success(), || String::from_utf8_lossy(&output.stderr).into_owned())?;
    let json: serde_json::Value = serde_json::from_slice(&output.stdout).map_err(|e| e.to_string())?;
    let tasks = &json["tasks"];
    ensure(
        tasks["image-captioning"] == 200 && tasks["vqa"] == 200 && tasks["text-to-image"] == 220,
        || format!("cli tasks {tasks}"),
    )?;
    Ok("image-captioning 200, vqa 200, text-to-image 220".into())
}

fn main() {
    let work = tempfile::tempdir().expect("work dir");
    let root: PathBuf = work.path().to_path_buf();
    let criteria: Vec<(&str, Box<dyn Fn() -> Check>)> = vec![
        ("1 metric arithmetic fidelity", Box::new(metric_arithmetic)),
        ("2 aggregation laws", Box::new(aggregation_laws)),
        ("3 prompt fidelity", Box::new(prompt_fidelity)),
        ("4 parser totality", Box::new(parser_totality)),
        ("5 end-to-end mock pipeline", Box::new({
            let r = root.join("pipeline");
            move || mock_pipeline(&r)
        })),
        ("6 determinism and cache soundness", Box::new({
            let r = root.join("determinism");
            move || determinism(&r)
        })),
        ("7 fleiss kappa", Box::new(kappa)),
        ("8 corpus stats", Box::new({
            let r = root.clone();
            move || corpus_stats(&r)
        })),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check())) {
            Ok(Ok(detail)) => println!("PASS criterion {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL criterion {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL criterion {name}: panicked");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
