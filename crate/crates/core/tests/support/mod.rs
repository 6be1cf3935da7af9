//! Shared helpers for integration tests: fixture paths and the scripted
//! model backend that produces the digest-keyed mock replies.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;

use unihd::gateway::{BackendError, Gateway, ModelBackend, ModelRequest};
use unihd::model::ImageTextPair;
use unihd::prompt::{render_claim_list, TemplateId, TemplateStore};
use unihd::stages::{Demonstration, DetectionMethod, StageContext};
use unihd::tools::{MockTools, ToolBackendSet};
use unihd::executor::Executor;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn acceptance_bench() -> PathBuf {
    fixtures().join("acceptance.json")
}

pub fn regenerate() -> bool {
    std::env::var("UNIHD_REGENERATE").is_ok_and(|v| v == "1")
}

/// How a scripted reply is selected.
#[derive(Debug, Clone)]
pub enum Cue {
    /// Claim list bound into the prompt, matched exactly.
    Claims(Vec<&'static str>),
    /// Substring of the user text.
    Contains(&'static str),
}

pub struct Line {
    pub template: TemplateId,
    pub cue: Cue,
    pub reply: &'static str,
}

fn line(template: TemplateId, cue: Cue, reply: &'static str) -> Line {
    Line { template, cue, reply }
}

const BEACH: [&str; 3] = [
    "The picture shows five people swimming.",
    "On the beach, there is a chair, a umbrella, and a surfboard.",
    "The green umbrella is on the right side of the chair.",
];
const ATHLETES: [&str; 2] = [
    "There are three athletes on the field.",
    "The athlete on the right side wears a red uniform.",
];
const DEVICE: [&str; 3] = [
    "There is a black device in the image.",
    "The device has the words \"Samsung\".",
    "Samsung is a Korean company.",
];
const CAR: [&str; 2] = [
    "The side of the car reads 'Hello World'",
    "A boy is playing a yellow basketball beside a plant.",
];
const PHONE: [&str; 2] = ["The image shows a black phone.", "Huawei is a company located in Shenzhen, China."];
const SUNSET: [&str; 1] = ["The overall atmosphere is very pleasant."];
const CAPTION: [&str; 2] = ["Four people are relaxing on the beach.", "The umbrella is green."];

const TABLE7_OUTPUT: &str = r#"[
    {"claim1":"hallucination","reason":"The object detection expert model identified four people, not five people. Based on the image information, they might be swimming. Therefore, there's a hallucination."},
    {"claim2":"hallucination","reason":"According to the results of the object detection expert model and my judgment, there are two chairs and an umbrella in the picture, but there is no surfboard. Therefore, there's a hallucination."},
    {"claim3":"non-hallucination","reason":"Based on the positional information of the bounding boxes and my judgment, the umbrella is to the right of the chairs. The umbrella is green. Therefore, there's no hallucination."}
]"#;

const TABLE8_OUTPUT: &str = r#"[{"claim1":"hallucination", "reason":"The object detection model has identified a car in the image. However, based on the detection results of the scene text expert model and my judgment, the text in the image is 'hello worlld' not 'hello world'. Therefore, there's a hallucination."},{"claim2":"hallucination", "reason":"The object detection model has identified a boy and a basketball in the image. And the boy is visible in the image playing with a yellow basketball. But according to the detection results of the object detection expert model and my judgment, there's no plant. Therefore, there's a hallucination."}]"#;

/// Every model reply the acceptance fixtures need.
pub fn script() -> Vec<Line> {
    use Cue::{Claims, Contains};
    use TemplateId::*;
    let none3 = r#"{"claim1":["none"],"claim2":["none"],"claim3":["none"]}"#;
    let none2 = r#"{"claim1":["none"],"claim2":["none"]}"#;
    vec![
        // beach scene
        line(ObjectQuery, Claims(BEACH.to_vec()), r#"{"claim1":"people","claim2":"chair.umbrella.surfboard","claim3":"umbrella.chair"}"#),
        line(AttributeQuery, Claims(BEACH.to_vec()), r#"{"claim1":["none"],"claim2":["none"],"claim3":["What color is the umbrella?", "Is the umbrella on the right side of the chair?"]}"#),
        line(SceneTextQuery, Claims(BEACH.to_vec()), none3),
        line(FactQuery, Claims(BEACH.to_vec()), none3),
        line(AttributeAnswer, Contains("question: What color is the umbrella?"), "The umbrella is green."),
        line(AttributeAnswer, Contains("question: Is the umbrella on the right side of the chair?"), "Yes, the umbrella is to the right of the chairs."),
        line(VerifyImageToText, Claims(BEACH.to_vec()), TABLE7_OUTPUT),
        line(SelfCheckZeroShot, Claims(BEACH.to_vec()), r#"[{"claim1":"non-hallucination","reason":"Several people are in the water, so five people swimming is plausible."},{"claim2":"hallucination","reason":"There are chairs and an umbrella but no surfboard is visible."},{"claim3":"non-hallucination","reason":"The green umbrella stands to the right of the chairs."}]"#),
        line(SelfCheckTwoShot, Claims(BEACH.to_vec()), r#"[{"claim1":"hallucination","reason":"Only four people can be counted in the image."},{"claim2":"hallucination","reason":"No surfboard is visible."},{"claim3":"non-hallucination","reason":"The umbrella is to the right of the chairs."}]"#),
        // athletes
        line(ObjectQuery, Claims(ATHLETES.to_vec()), r#"{"claim1":"athlete","claim2":"athlete.uniform"}"#),
        line(AttributeQuery, Claims(ATHLETES.to_vec()), r#"{"claim1":["none"],"claim2":["What color is the uniform of the athlete on the right side?"]}"#),
        line(SceneTextQuery, Claims(ATHLETES.to_vec()), none2),
        line(FactQuery, Claims(ATHLETES.to_vec()), none2),
        line(AttributeAnswer, Contains("question: What color is the uniform of the athlete on the right side?"), "The uniform of the athlete on the right side is blue."),
        line(VerifyImageToText, Claims(ATHLETES.to_vec()), "```json\n[{\"claim1\":\"hallucination\",\"reason\":\"The object detection expert model identified two athletes, not three. Therefore, there's a hallucination.\"},{\"claim2\":\"hallucination\",\"reason\":\"The attribute expert reports that the uniform of the athlete on the right side is blue, not red. Therefore, there's a hallucination.\"},]\n```"),
        line(SelfCheckZeroShot, Claims(ATHLETES.to_vec()), r#"[{"claim1":"non-hallucination","reason":"Athletes are standing on the field."},{"claim2":"hallucination","reason":"The uniform on the right looks blue."}]"#),
        line(SelfCheckTwoShot, Claims(ATHLETES.to_vec()), r#"[{"claim1":"non-hallucination","reason":"The athletes are on the field."},{"claim2":"hallucination","reason":"The right uniform is blue rather than red."}]"#),
        // Samsung device
        line(ObjectQuery, Claims(DEVICE.to_vec()), r#"{"claim1":"device","claim2":"device", "claim3":"none"}"#),
        line(AttributeQuery, Claims(DEVICE.to_vec()), r#"{"claim1":["What color is the device?"],"claim2":["none"],"claim3":["none"]}"#),
        line(SceneTextQuery, Claims(DEVICE.to_vec()), r#"{"claim1":["none"],"claim2":["What is the brand of the device in the image?"],"claim3":["none"]}"#),
        line(FactQuery, Claims(DEVICE.to_vec()), r#"{"claim1":["none"],"claim2":["none"],"claim3":["Where is Samsung headquartered?", "Samsung company"]}"#),
        line(AttributeAnswer, Contains("question: What color is the device?"), "The device is black."),
        line(VerifyImageToText, Claims(DEVICE.to_vec()), r#"[{"claim1":"non-hallucination","reason":"A device is detected and the attribute expert reports it is black."},{"claim2":"non-hallucination","reason":"The scene text expert reads SAMSUNG on the device."},{"claim3":"non-hallucination","reason":"The external knowledge states that Samsung is headquartered in South Korea."}]"#),
        line(SelfCheckZeroShot, Claims(DEVICE.to_vec()), r#"[{"claim1":"non-hallucination","reason":"A black device is shown."},{"claim2":"non-hallucination","reason":"The device shows the Samsung logo."},{"claim3":"non-hallucination","reason":"Samsung is a South Korean company."}]"#),
        line(SelfCheckTwoShot, Claims(DEVICE.to_vec()), r#"[{"claim1":"non-hallucination","reason":"The device is black."},{"claim2":"hallucination","reason":"The text on the device is hard to read."},{"claim3":"non-hallucination","reason":"Samsung is Korean."}]"#),
        // car with scene text
        line(ObjectQuery, Claims(CAR.to_vec()), r#"{"claim1":"car","claim2":"boy.basketball.plant"}"#),
        line(AttributeQuery, Claims(CAR.to_vec()), r#"{"claim1":["none"],"claim2":["What color is the basketball?"]}"#),
        line(SceneTextQuery, Claims(CAR.to_vec()), r#"{"claim1":["What is written on the side of the car?"],"claim2":["none"]}"#),
        line(FactQuery, Claims(CAR.to_vec()), none2),
        line(AttributeAnswer, Contains("question: What color is the basketball?"), "The basketball is yellow."),
        line(VerifyTextToImage, Claims(CAR.to_vec()), TABLE8_OUTPUT),
        line(SelfCheckZeroShot, Claims(CAR.to_vec()), r#"[{"claim1":"non-hallucination","reason":"The car has text reading hello world."},{"claim2":"hallucination","reason":"There is no plant beside the boy."}]"#),
        line(SelfCheckTwoShot, Claims(CAR.to_vec()), r#"[{"claim1":"non-hallucination","reason":"Text is written on the car."},{"claim2":"hallucination","reason":"No plant is visible."}]"#),
        // Huawei phone
        line(ObjectQuery, Claims(PHONE.to_vec()), r#"{"claim1":"phone","claim2":"none"}"#),
        line(AttributeQuery, Claims(PHONE.to_vec()), r#"{"claim1":["What color is the phone?"],"claim2":["none"]}"#),
        line(SceneTextQuery, Claims(PHONE.to_vec()), none2),
        line(FactQuery, Claims(PHONE.to_vec()), r#"{"claim1":["none"],"claim2":["Where is Huawei headquartered?", "Huawei company"]}"#),
        line(AttributeAnswer, Contains("question: What color is the phone?"), "The phone is black."),
        line(VerifyTextToImage, Claims(PHONE.to_vec()), r#"[{"claim1":"non-hallucination","reason":"A phone is detected and the attribute expert reports it is black."},{"claim2":"non-hallucination","reason":"The external knowledge confirms that Huawei is headquartered in Shenzhen, China."}]"#),
        line(SelfCheckZeroShot, Claims(PHONE.to_vec()), r#"[{"claim1":"non-hallucination","reason":"A black phone is shown."},{"claim2":"non-hallucination","reason":"Huawei is based in Shenzhen."}]"#),
        line(SelfCheckTwoShot, Claims(PHONE.to_vec()), r#"[{"claim1":"non-hallucination","reason":"The phone is black."},{"claim2":"non-hallucination","reason":"Huawei is headquartered in Shenzhen."}]"#),
        // no tool evidence at all
        line(ObjectQuery, Claims(SUNSET.to_vec()), r#"{"claim1":"none"}"#),
        line(AttributeQuery, Claims(SUNSET.to_vec()), r#"{"claim1":["none"]}"#),
        line(SceneTextQuery, Claims(SUNSET.to_vec()), r#"{"claim1":["none"]}"#),
        line(FactQuery, Claims(SUNSET.to_vec()), r#"{"claim1":["none"]}"#),
        line(VerifyTextToImage, Claims(SUNSET.to_vec()), r#"[{"claim1":"non-hallucination","reason":"The warm evening colors give a pleasant atmosphere and nothing conflicts with the claim."}]"#),
        line(SelfCheckZeroShot, Claims(SUNSET.to_vec()), r#"[{"claim1":"non-hallucination","reason":"The scene looks pleasant."}]"#),
        line(SelfCheckTwoShot, Claims(SUNSET.to_vec()), r#"[{"claim1":"non-hallucination","reason":"The colors are calm and pleasant."}]"#),
        // single pair without annotated claims
        line(ClaimExtraction, Contains("Four people are relaxing on the beach. The umbrella is green."), r#"["Four people are relaxing on the beach.", "The umbrella is green."]"#),
        line(ObjectQuery, Claims(CAPTION.to_vec()), r#"{"claim1":"people","claim2":"umbrella"}"#),
        line(AttributeQuery, Claims(CAPTION.to_vec()), r#"{"claim1":["none"],"claim2":["What color is the umbrella?"]}"#),
        line(SceneTextQuery, Claims(CAPTION.to_vec()), none2),
        line(FactQuery, Claims(CAPTION.to_vec()), none2),
        line(VerifyImageToText, Claims(CAPTION.to_vec()), r#"[{"claim1":"non-hallucination","reason":"The object detection expert model identified four people."},{"claim2":"non-hallucination","reason":"The attribute expert reports that the umbrella is green."}]"#),
    ]
}

/// Returns the user text that holds the pair's claim list: everything after
/// the last "claim list:" heading.
fn claim_region(user: &str) -> Option<&str> {
    user.rfind("claim list:\n").map(|i| &user[i + "claim list:\n".len()..])
}

/// Answers from [`script`] and records every request digest it served.
pub struct ScriptedBackend {
    lines: Vec<Line>,
    pub served: Mutex<BTreeMap<String, String>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        ScriptedBackend {
            lines: script(),
            served: Mutex::new(BTreeMap::new()),
        }
    }

    fn find(&self, req: &ModelRequest) -> Option<&'static str> {
        let user = req.prompt.user.as_str();
        self.lines
            .iter()
            .find(|l| {
                l.template == req.prompt.template
                    && match &l.cue {
                        Cue::Claims(c) => {
                            let list = render_claim_list(c).expect("claim list");
                            claim_region(user).is_some_and(|r| r.starts_with(&format!("{list}\n")))
                        }
                        Cue::Contains(s) => user.contains(s),
                    }
            })
            .map(|l| l.reply)
    }
}

#[async_trait]
impl ModelBackend for ScriptedBackend {
    fn id(&self) -> &str {
        "mock"
    }

    async fn generate(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let reply = self.find(request).ok_or_else(|| {
            BackendError::Rejected(format!("no scripted reply for {} request:\n{}", request.prompt.template, request.prompt.user))
        })?;
        self.served
            .lock()
            .unwrap()
            .insert(request.digest(), reply.to_string());
        Ok(reply.to_string())
    }
}

pub fn demonstrations() -> Vec<Demonstration> {
    unihd::cli::load_demonstrations(&fixtures().join("demos.json")).expect("demos")
}

/// Executor over the scripted backend and the mock tool fixtures.
pub fn scripted_executor(backend: Arc<ScriptedBackend>, image_root: &Path) -> Executor {
    let templates = Arc::new(TemplateStore::builtin().unwrap());
    let tools = MockTools::new(fixtures().join("mock")).with_image_root(image_root);
    Executor::new(
        Arc::new(Gateway::new(backend)),
        ToolBackendSet::mock(tools, templates.clone()),
        StageContext::new(templates),
    )
    .with_demonstrations(demonstrations())
}

pub fn load_pair(path: &Path) -> ImageTextPair {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub const METHODS: [DetectionMethod; 3] = [
    DetectionMethod::UniHD,
    DetectionMethod::SelfCheck0Shot,
    DetectionMethod::SelfCheck2Shot,
];
