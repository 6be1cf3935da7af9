use unihd::model::HallucinationCategory;
use unihd::stages::{parse_claim_query_map, parse_verdicts};

fn main() {
    let objects = r#"{"claim1": "people", "claim2": "chair.umbrella.surfboard", "claim3": "umbrella.chair"}"#;
    match parse_claim_query_map(objects, 3, HallucinationCategory::Object) {
        Ok(map) => println!("object queries: {:?}", map.queries),
        Err(e) => println!("error: {e}"),
    }

    let fenced = "```json\n[{\"claim1\": \"hallucination\", \"reason\": \"only four people\"},\n {\"claim2\": \"non-hallucination\", \"reason\": \"all present\"},]\n```";
    match parse_verdicts(fenced, 2) {
        Ok(verdicts) => {
            for v in verdicts {
                println!("claim{} {} flags={:?} {}", v.claim_index, v.label.as_str(), v.parse_flags, v.rationale);
            }
        }
        Err(e) => println!("error: {e}"),
    }

    for bad in ["not json at all", r#"[{"claim1": "maybe", "reason": "?"}]"#] {
        match parse_verdicts(bad, 1) {
            Ok(v) => println!("unexpected: {v:?}"),
            Err(e) => println!("{}: {e}", e.kind()),
        }
    }
}
