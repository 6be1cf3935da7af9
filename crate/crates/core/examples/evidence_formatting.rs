use unihd::model::{EvidenceBundle, FactEvidence, NormBox, ObjectEvidence, SceneTextEvidence};
use unihd::tools::format_evidence_sections;

fn main() {
    let evidence = EvidenceBundle {
        objects: vec![
            ObjectEvidence { label: "umbrella".into(), bbox: NormBox::new(0.648, 0.229, 0.8, 0.667) },
            ObjectEvidence { label: "chair".into(), bbox: NormBox::new(0.697, 0.56, 0.752, 0.65) },
            ObjectEvidence { label: "people".into(), bbox: NormBox::new(0.345, 0.4235, 0.4081, 0.509) },
        ],
        scene_text: vec![SceneTextEvidence { text: "worlld".into(), bbox: NormBox::new(0.405, 0.504, 0.726, 0.7) }],
        facts: vec![FactEvidence {
            question: "Where is the Samsung headquarters?".into(),
            snippets: vec!["Samsung is headquartered in Suwon, South Korea.".into()],
        }],
        ..Default::default()
    };
    let s = format_evidence_sections(&evidence);
    println!("object:\n{}\n\nattribute:\n{}\n\nscene text:\n{}\n\nfact:\n{}", s.object, s.attribute, s.scene_text, s.fact);
}
