//! The four aspect tools (object detection, attribute answering, scene text,
//! fact search) behind async traits, with null, fixture-backed and HTTP
//! implementations, and the evidence formatter for verification prompts.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::gateway::{GatewayError, ModelRequest, ModelService, Purpose, RateLimiter, RetryPolicy};
use crate::model::{
    sniff_image_format, AttributeEvidence, EvidenceBundle, ImageRef, NormBox, ObjectEvidence,
    SceneTextEvidence,
};
use crate::prompt::{Bindings, TemplateId, TemplateStore};

pub const DEFAULT_BOX_THRESHOLD: f64 = 0.35;
pub const DEFAULT_TOP_K: usize = 3;
/// Longest fact block passed to verification, in characters.
pub const FACT_BLOCK_LIMIT: usize = 2000;
pub const NONE_INFORMATION: &str = "none information";

#[derive(Debug, Clone, Error)]
pub enum ToolError {
    #[error("tool backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("search quota exceeded: {0}")]
    QuotaExceeded(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("bad fixture {0}")]
    Fixture(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl ToolError {
    pub fn kind(&self) -> &'static str {
        match self {
            ToolError::BackendUnavailable(_) => "BackendUnavailable",
            ToolError::InvalidImage(_) => "InvalidImage",
            ToolError::QuotaExceeded(_) => "QuotaExceeded",
            ToolError::Precondition(_) => "Precondition",
            ToolError::Fixture(_) => "Fixture",
            ToolError::Gateway(_) => "GatewayError",
        }
    }
}

/// One organic search hit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactSnippet {
    #[serde(default)]
    pub title: String,
    pub snippet: String,
    #[serde(default)]
    pub source_url: String,
}

impl FactSnippet {
    /// Text shown to the verifier.
    pub fn display(&self) -> String {
        if self.title.is_empty() {
            self.snippet.clone()
        } else {
            format!("{}: {}", self.title, self.snippet)
        }
    }
}

#[async_trait]
pub trait ObjectDetector: Send + Sync {
    fn id(&self) -> &str;
    async fn detect(&self, image: &ImageRef, labels: &[String]) -> Result<Vec<ObjectEvidence>, ToolError>;
}

#[async_trait]
pub trait AttributeAnswerer: Send + Sync {
    fn id(&self) -> &str;
    /// `None` means the tool is disabled.
    async fn answer(
        &self,
        image: &ImageRef,
        question: &str,
        svc: &dyn ModelService,
    ) -> Result<Option<AttributeEvidence>, ToolError>;
}

#[async_trait]
pub trait SceneTextReader: Send + Sync {
    fn id(&self) -> &str;
    async fn read(&self, image: &ImageRef) -> Result<Vec<SceneTextEvidence>, ToolError>;
}

#[async_trait]
pub trait FactSearcher: Send + Sync {
    fn id(&self) -> &str;
    async fn search(&self, question: &str, top_k: usize) -> Result<Vec<FactSnippet>, ToolError>;
}

fn label_matches(label: &str, wanted: &[String]) -> bool {
    wanted.iter().any(|w| w.eq_ignore_ascii_case(label))
}

pub fn sort_objects(items: &mut [ObjectEvidence]) {
    items.sort_by(|a, b| {
        a.label
            .cmp(&b.label)
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
            .then(a.bbox.y1.total_cmp(&b.bbox.y1))
            .then(a.bbox.x2.total_cmp(&b.bbox.x2))
            .then(a.bbox.y2.total_cmp(&b.bbox.y2))
    });
}

pub fn sort_scene_text(items: &mut [SceneTextEvidence]) {
    items.sort_by(|a, b| {
        a.bbox
            .y1
            .total_cmp(&b.bbox.y1)
            .then(a.bbox.x1.total_cmp(&b.bbox.x1))
            .then(a.text.cmp(&b.text))
    });
}

fn check_labels(labels: &[String]) -> Result<(), ToolError> {
    if labels.is_empty() {
        return Err(ToolError::Precondition("detector needs at least one label".into()));
    }
    Ok(())
}

fn check_question(question: &str) -> Result<(), ToolError> {
    if question.trim().is_empty() {
        return Err(ToolError::Precondition("empty question".into()));
    }
    Ok(())
}

/// Tool that is switched off: every call returns no evidence.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullTool;

#[async_trait]
impl ObjectDetector for NullTool {
    fn id(&self) -> &str {
        "null"
    }
    async fn detect(&self, _: &ImageRef, labels: &[String]) -> Result<Vec<ObjectEvidence>, ToolError> {
        check_labels(labels)?;
        Ok(Vec::new())
    }
}

#[async_trait]
impl AttributeAnswerer for NullTool {
    fn id(&self) -> &str {
        "null"
    }
    async fn answer(&self, _: &ImageRef, question: &str, _: &dyn ModelService) -> Result<Option<AttributeEvidence>, ToolError> {
        check_question(question)?;
        Ok(None)
    }
}

#[async_trait]
impl SceneTextReader for NullTool {
    fn id(&self) -> &str {
        "null"
    }
    async fn read(&self, _: &ImageRef) -> Result<Vec<SceneTextEvidence>, ToolError> {
        Ok(Vec::new())
    }
}

#[async_trait]
impl FactSearcher for NullTool {
    fn id(&self) -> &str {
        "null"
    }
    async fn search(&self, question: &str, _: usize) -> Result<Vec<FactSnippet>, ToolError> {
        check_question(question)?;
        Ok(Vec::new())
    }
}

/// Asks the multimodal model itself, through the attribute-answer template.
pub struct ModelAttributeAnswerer {
    templates: Arc<TemplateStore>,
}

impl ModelAttributeAnswerer {
    pub fn new(templates: Arc<TemplateStore>) -> Self {
        ModelAttributeAnswerer { templates }
    }

    pub fn request(&self, image: &ImageRef, question: &str) -> Result<ModelRequest, ToolError> {
        check_question(question)?;
        let prompt = self
            .templates
            .render(
                TemplateId::AttributeAnswer,
                &Bindings::new().with("question", question.trim()),
                std::slice::from_ref(image),
            )
            .map_err(|e| ToolError::Precondition(e.to_string()))?;
        Ok(ModelRequest::new(prompt, Purpose::AttributeAnswer, Default::default()))
    }
}

#[async_trait]
impl AttributeAnswerer for ModelAttributeAnswerer {
    fn id(&self) -> &str {
        "model"
    }

    async fn answer(
        &self,
        image: &ImageRef,
        question: &str,
        svc: &dyn ModelService,
    ) -> Result<Option<AttributeEvidence>, ToolError> {
        let request = self.request(image, question)?;
        let reply = svc.complete(request).await?;
        Ok(Some(AttributeEvidence {
            question: question.trim().to_string(),
            answer: reply.text,
        }))
    }
}

/// Digest under which search fixtures are stored for a question.
pub fn question_digest(question: &str) -> String {
    sha256_hex(question.trim())
}

fn read_fixture<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Option<T>, ToolError> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| ToolError::Fixture(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(ToolError::Fixture(format!("{}: {e}", path.display()))),
    }
}

/// Fixture-backed tools. Layout under the root directory:
/// `detector/<image digest>.json` (all detections for the image),
/// `ocr/<image digest>.json` and `search/<question digest>.json`.
/// A missing file means the tool found nothing.
#[derive(Debug, Clone)]
pub struct MockTools {
    root: PathBuf,
    image_root: Option<PathBuf>,
}

impl MockTools {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        MockTools {
            root: root.into(),
            image_root: None,
        }
    }

    /// Lets the OCR mock check image bytes when they are available.
    pub fn with_image_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.image_root = Some(root.into());
        self
    }

    fn check_image(&self, image: &ImageRef) -> Result<(), ToolError> {
        let Some(path) = image.local_path(self.image_root.as_deref()) else {
            return Ok(());
        };
        match std::fs::read(&path) {
            Ok(bytes) if sniff_image_format(&bytes).is_none() => {
                Err(ToolError::InvalidImage(format!("{} is not a recognized image", image.location)))
            }
            _ => Ok(()),
        }
    }
}

#[async_trait]
impl ObjectDetector for MockTools {
    fn id(&self) -> &str {
        "mock"
    }

    async fn detect(&self, image: &ImageRef, labels: &[String]) -> Result<Vec<ObjectEvidence>, ToolError> {
        check_labels(labels)?;
        self.check_image(image)?;
        let path = self.root.join("detector").join(format!("{}.json", image.digest));
        let all: Vec<ObjectEvidence> = read_fixture(&path)?.unwrap_or_default();
        let mut hits: Vec<ObjectEvidence> = all.into_iter().filter(|o| label_matches(&o.label, labels)).collect();
        sort_objects(&mut hits);
        Ok(hits)
    }
}

#[async_trait]
impl SceneTextReader for MockTools {
    fn id(&self) -> &str {
        "mock"
    }

    async fn read(&self, image: &ImageRef) -> Result<Vec<SceneTextEvidence>, ToolError> {
        self.check_image(image)?;
        let path = self.root.join("ocr").join(format!("{}.json", image.digest));
        let mut items: Vec<SceneTextEvidence> = read_fixture(&path)?.unwrap_or_default();
        sort_scene_text(&mut items);
        Ok(items)
    }
}

#[async_trait]
impl FactSearcher for MockTools {
    fn id(&self) -> &str {
        "mock"
    }

    async fn search(&self, question: &str, top_k: usize) -> Result<Vec<FactSnippet>, ToolError> {
        check_question(question)?;
        let path = self.root.join("search").join(format!("{}.json", question_digest(question)));
        let mut hits: Vec<FactSnippet> = read_fixture(&path)?.unwrap_or_default();
        hits.retain(|s| !s.snippet.is_empty());
        hits.truncate(top_k);
        Ok(hits)
    }
}

/// HTTP settings shared by the live tool clients.
#[derive(Debug, Clone)]
pub struct HttpToolConfig {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub image_root: Option<PathBuf>,
    pub timeout: Duration,
    pub requests_per_minute: Option<u32>,
}

impl HttpToolConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        HttpToolConfig {
            endpoint: endpoint.into(),
            api_key: None,
            image_root: None,
            timeout: Duration::from_secs(60),
            requests_per_minute: None,
        }
    }
}

struct HttpClient {
    config: HttpToolConfig,
    client: reqwest::Client,
    limiter: Option<RateLimiter>,
    retry: RetryPolicy,
}

enum Failure {
    Retry(String),
    Fatal(ToolError),
}

impl HttpClient {
    fn new(config: HttpToolConfig) -> Result<Self, ToolError> {
        let client = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| ToolError::Precondition(e.to_string()))?;
        let limiter = config.requests_per_minute.map(RateLimiter::per_minute);
        Ok(HttpClient {
            config,
            client,
            limiter,
            retry: RetryPolicy::default(),
        })
    }

    fn image_payload(&self, image: &ImageRef) -> Result<String, ToolError> {
        if image.is_remote() {
            return Ok(image.location.clone());
        }
        let path = image.local_path(self.config.image_root.as_deref()).expect("local image");
        let bytes = std::fs::read(&path).map_err(|e| ToolError::InvalidImage(format!("{}: {e}", path.display())))?;
        let format = sniff_image_format(&bytes)
            .ok_or_else(|| ToolError::InvalidImage(format!("{} is not a recognized image", path.display())))?;
        let b64 = base64::engine::general_purpose::STANDARD.encode(&bytes);
        Ok(format!("data:{};base64,{b64}", format.mime()))
    }

    async fn post_once(&self, body: &Value, api_key_header: &str) -> Result<Value, Failure> {
        if let Some(limiter) = &self.limiter {
            limiter.acquire().await;
        }
        let mut req = self.client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.header(api_key_header, key);
        }
        let resp = req.send().await.map_err(|e| Failure::Retry(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp.text().await.map_err(|e| Failure::Retry(e.to_string()))?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Failure::Fatal(ToolError::BackendUnavailable(format!("bad response body: {e}")))),
            402 | 429 if api_key_header == "X-API-KEY" => {
                Err(Failure::Fatal(ToolError::QuotaExceeded(format!("{status}: {text}"))))
            }
            408 | 429 | 500..=599 => Err(Failure::Retry(format!("{status}: {text}"))),
            400 | 415 | 422 if body.get("image").is_some() => {
                Err(Failure::Fatal(ToolError::InvalidImage(format!("{status}: {text}"))))
            }
            _ => Err(Failure::Fatal(ToolError::BackendUnavailable(format!("{status}: {text}")))),
        }
    }

    async fn post(&self, body: Value, api_key_header: &str) -> Result<Value, ToolError> {
        let mut last = String::new();
        for attempt in 1..=self.retry.max_attempts {
            match self.post_once(&body, api_key_header).await {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(msg)) => last = msg,
            }
            if attempt < self.retry.max_attempts {
                tokio::time::sleep(self.retry.delay_after(attempt)).await;
            }
        }
        Err(ToolError::BackendUnavailable(last))
    }
}

#[derive(Deserialize)]
struct RawDetection {
    label: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    #[serde(default = "one")]
    score: f64,
}

#[derive(Deserialize)]
struct RawText {
    text: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
}

fn one() -> f64 {
    1.0
}

/// Converts a box to unit coordinates when the service reported the image
/// size, which means the box is in pixels.
fn normalize_box(bbox: [f64; 4], size: Option<(f64, f64)>) -> NormBox {
    match size {
        Some((w, h)) if w > 0.0 && h > 0.0 => NormBox::from_pixels(bbox, w, h),
        _ => NormBox::from_array(bbox),
    }
}

fn image_size(body: &Value) -> Option<(f64, f64)> {
    Some((body.get("width")?.as_f64()?, body.get("height")?.as_f64()?))
}

/// Client for an open-set detection service.
///
/// Request: `{"image": <data URI or URL>, "labels": [...], "box_threshold": t}`.
/// Response: `{"width"?: W, "height"?: H, "detections": [{"label", "box": [x1,y1,x2,y2], "score"?}]}`,
/// boxes in pixels when the size is present and normalized otherwise.
pub struct HttpObjectDetector {
    http: HttpClient,
    threshold: f64,
}

impl HttpObjectDetector {
    pub fn new(config: HttpToolConfig, threshold: f64) -> Result<Self, ToolError> {
        Ok(HttpObjectDetector {
            http: HttpClient::new(config)?,
            threshold,
        })
    }
}

#[async_trait]
impl ObjectDetector for HttpObjectDetector {
    fn id(&self) -> &str {
        "http-detector"
    }

    async fn detect(&self, image: &ImageRef, labels: &[String]) -> Result<Vec<ObjectEvidence>, ToolError> {
        check_labels(labels)?;
        let body = json!({
            "image": self.http.image_payload(image)?,
            "labels": labels,
            "box_threshold": self.threshold,
        });
        let reply = self.http.post(body, "Authorization").await?;
        let size = image_size(&reply);
        let raw: Vec<RawDetection> = serde_json::from_value(reply.get("detections").cloned().unwrap_or(json!([])))
            .map_err(|e| ToolError::BackendUnavailable(format!("bad detections: {e}")))?;
        let mut out: Vec<ObjectEvidence> = raw
            .into_iter()
            .filter(|d| d.score >= self.threshold && label_matches(&d.label, labels))
            .map(|d| ObjectEvidence {
                label: d.label.to_lowercase(),
                bbox: normalize_box(d.bbox, size),
            })
            .filter(|o| crate::model::validate_norm_box(&o.bbox))
            .collect();
        sort_objects(&mut out);
        Ok(out)
    }
}

/// Client for a scene-text recognition service.
///
/// Request: `{"image": ...}`. Response: `{"width"?, "height"?, "texts": [{"text", "box"}]}`.
pub struct HttpSceneTextReader {
    http: HttpClient,
}

impl HttpSceneTextReader {
    pub fn new(config: HttpToolConfig) -> Result<Self, ToolError> {
        Ok(HttpSceneTextReader {
            http: HttpClient::new(config)?,
        })
    }
}

#[async_trait]
impl SceneTextReader for HttpSceneTextReader {
    fn id(&self) -> &str {
        "http-ocr"
    }

    async fn read(&self, image: &ImageRef) -> Result<Vec<SceneTextEvidence>, ToolError> {
        let body = json!({"image": self.http.image_payload(image)?});
        let reply = self.http.post(body, "Authorization").await?;
        let size = image_size(&reply);
        let raw: Vec<RawText> = serde_json::from_value(reply.get("texts").cloned().unwrap_or(json!([])))
            .map_err(|e| ToolError::BackendUnavailable(format!("bad texts: {e}")))?;
        let mut out: Vec<SceneTextEvidence> = raw
            .into_iter()
            .filter(|t| !t.text.trim().is_empty())
            .map(|t| SceneTextEvidence {
                text: t.text,
                bbox: normalize_box(t.bbox, size),
            })
            .filter(|t| crate::model::validate_norm_box(&t.bbox))
            .collect();
        sort_scene_text(&mut out);
        Ok(out)
    }
}

pub const SERPER_ENDPOINT: &str = "https://google.serper.dev/search";

/// Serper web search: `{"q", "num"}` in, `organic[] {title, snippet, link}` out.
pub struct SerperSearch {
    http: HttpClient,
}

impl SerperSearch {
    pub fn new(config: HttpToolConfig) -> Result<Self, ToolError> {
        Ok(SerperSearch {
            http: HttpClient::new(config)?,
        })
    }
}

#[async_trait]
impl FactSearcher for SerperSearch {
    fn id(&self) -> &str {
        "serper"
    }

    async fn search(&self, question: &str, top_k: usize) -> Result<Vec<FactSnippet>, ToolError> {
        check_question(question)?;
        let reply = self.http.post(json!({"q": question.trim(), "num": top_k}), "X-API-KEY").await?;
        let organic = reply.get("organic").and_then(Value::as_array).cloned().unwrap_or_default();
        let text = |v: &Value, k: &str| v.get(k).and_then(Value::as_str).unwrap_or_default().to_string();
        Ok(organic
            .iter()
            .map(|hit| FactSnippet {
                title: text(hit, "title"),
                snippet: text(hit, "snippet"),
                source_url: text(hit, "link"),
            })
            .filter(|s| !s.snippet.is_empty())
            .take(top_k)
            .collect())
    }
}

/// One implementation per tool family. Any slot may be [`NullTool`].
#[derive(Clone)]
pub struct ToolBackendSet {
    pub object_detector: Arc<dyn ObjectDetector>,
    pub attribute_answerer: Arc<dyn AttributeAnswerer>,
    pub scene_text_reader: Arc<dyn SceneTextReader>,
    pub fact_searcher: Arc<dyn FactSearcher>,
}

impl ToolBackendSet {
    pub fn null() -> Self {
        ToolBackendSet {
            object_detector: Arc::new(NullTool),
            attribute_answerer: Arc::new(NullTool),
            scene_text_reader: Arc::new(NullTool),
            fact_searcher: Arc::new(NullTool),
        }
    }

    /// Fixture tools for detection, OCR and search; attributes go to the model.
    pub fn mock(tools: MockTools, templates: Arc<TemplateStore>) -> Self {
        let tools = Arc::new(tools);
        ToolBackendSet {
            object_detector: tools.clone(),
            attribute_answerer: Arc::new(ModelAttributeAnswerer::new(templates)),
            scene_text_reader: tools.clone(),
            fact_searcher: tools,
        }
    }

    pub fn ids(&self) -> [&str; 4] {
        [
            self.object_detector.id(),
            self.attribute_answerer.id(),
            self.scene_text_reader.id(),
            self.fact_searcher.id(),
        ]
    }
}

/// Verification-prompt text for each evidence family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvidenceSections {
    pub object: String,
    pub attribute: String,
    pub scene_text: String,
    pub fact: String,
}

/// Up to three decimals, trailing zeros dropped, at least one decimal kept.
pub fn format_coord(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0');
    if s.ends_with('.') {
        format!("{s}0")
    } else {
        s.to_string()
    }
}

pub fn format_box(b: &NormBox) -> String {
    let [x1, y1, x2, y2] = b.to_array().map(format_coord);
    format!("[{x1}, {y1}, {x2}, {y2}]")
}

fn or_none(lines: Vec<String>) -> String {
    if lines.is_empty() {
        NONE_INFORMATION.to_string()
    } else {
        lines.join("\n")
    }
}

fn truncate_chars(s: &str, limit: usize) -> String {
    match s.char_indices().nth(limit) {
        Some((cut, _)) => format!("{}...", &s[..cut]),
        None => s.to_string(),
    }
}

/// Renders pooled evidence into the four blocks of the verification prompt.
/// Items are re-sorted, so backend return order never shows through.
pub fn format_evidence_sections(evidence: &EvidenceBundle) -> EvidenceSections {
    let mut objects = evidence.objects.clone();
    sort_objects(&mut objects);
    let mut texts = evidence.scene_text.clone();
    sort_scene_text(&mut texts);

    let object = or_none(objects.iter().map(|o| format!("{} {}", o.label, format_box(&o.bbox))).collect());
    let attribute = or_none(
        evidence
            .attributes
            .iter()
            .map(|a| format!("Q: {}\nA: {}", a.question, a.answer))
            .collect(),
    );
    let scene_text = or_none(texts.iter().map(|t| format!("{} {}", t.text, format_box(&t.bbox))).collect());
    let fact = or_none(
        evidence
            .facts
            .iter()
            .filter(|f| !f.snippets.is_empty())
            .map(|f| {
                let body: Vec<String> = f.snippets.iter().enumerate().map(|(i, s)| format!("{}. {s}", i + 1)).collect();
                format!("Q: {}\n{}", f.question, truncate_chars(&body.join("\n"), FACT_BLOCK_LIMIT))
            })
            .collect(),
    );
    EvidenceSections {
        object,
        attribute,
        scene_text,
        fact,
    }
}
