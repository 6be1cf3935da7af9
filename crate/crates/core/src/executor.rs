//! Runs detection over pairs: plan, parallel tool fan-out, verification, with
//! an optional persistent cache and a per-pair trace of every call.

use std::collections::{BTreeMap, HashSet};
use std::future::Future;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use async_trait::async_trait;
use futures::StreamExt;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cache::{CacheError, CacheKey, CacheStore};
use crate::digest::{json_digest, sha256_hex};
use crate::gateway::{GatewayError, ModelRequest, ModelResponse, ModelService};
use crate::model::{
    validate_pair, AttributeEvidence, Claim, EvidenceBundle, FactEvidence, ImageTextPair, ObjectEvidence,
    SceneTextEvidence, Verdict,
};
use crate::stages::{self, Demonstration, DetectionMethod, StageContext, StageError, ToolPlan};
use crate::tools::{FactSnippet, ToolBackendSet, ToolError, DEFAULT_TOP_K};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub stage: String,
    pub input_digest: String,
    pub output_digest: String,
    pub duration_ms: u64,
    pub cache_hit: bool,
}

/// Outcome for one pair. The serialized form is the pair result file and
/// leaves out the trace, which carries timings and cache state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    pub pair_id: String,
    pub method: DetectionMethod,
    /// Present only when claims came from extraction rather than annotation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extracted_claims: Option<Vec<Claim>>,
    pub verdicts: Vec<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan: Option<ToolPlan>,
    pub evidence: EvidenceBundle,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub pair_id: String,
    pub stage: String,
    pub kind: String,
    pub message: String,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
}

#[derive(Debug)]
enum RunError {
    Stage(&'static str, StageError),
    Tool(&'static str, ToolError),
    Cache(&'static str, CacheError),
    Invalid(String),
}

impl RunError {
    fn parts(&self) -> (&str, String, String) {
        match self {
            RunError::Stage(s, e) => (s, e.kind().to_string(), e.to_string()),
            RunError::Tool(s, e) => (s, e.kind().to_string(), e.to_string()),
            RunError::Cache(s, e) => {
                let kind = match e {
                    CacheError::StoreCorrupt { .. } => "StoreCorrupt",
                    _ => "CacheError",
                };
                (s, kind.to_string(), e.to_string())
            }
            RunError::Invalid(m) => ("validate", "InvalidPair".to_string(), m.clone()),
        }
    }
}

/// Detection driver. Cheap to clone; clones share backends and cache.
#[derive(Clone)]
pub struct Executor {
    svc: Arc<dyn ModelService>,
    tools: ToolBackendSet,
    cache: Option<Arc<CacheStore>>,
    ctx: StageContext,
    demonstrations: Arc<Vec<Demonstration>>,
    top_k: usize,
}

impl Executor {
    pub fn new(svc: Arc<dyn ModelService>, tools: ToolBackendSet, ctx: StageContext) -> Self {
        Executor {
            svc,
            tools,
            cache: None,
            ctx,
            demonstrations: Arc::new(Vec::new()),
            top_k: DEFAULT_TOP_K,
        }
    }

    pub fn with_cache(mut self, cache: Arc<CacheStore>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_demonstrations(mut self, demos: Vec<Demonstration>) -> Self {
        self.demonstrations = Arc::new(demos);
        self
    }

    pub fn with_top_k(mut self, top_k: usize) -> Self {
        self.top_k = top_k;
        self
    }

    pub fn cache(&self) -> Option<&Arc<CacheStore>> {
        self.cache.as_ref()
    }

    pub fn tools(&self) -> &ToolBackendSet {
        &self.tools
    }

    pub fn model_backend_id(&self) -> &str {
        self.svc.backend_id()
    }

    pub async fn run_detection(&self, pair: &ImageTextPair, method: DetectionMethod) -> Result<DetectionResult, PairFailure> {
        let run = PairRun {
            ex: self,
            trace: Mutex::new(Vec::new()),
        };
        let outcome = run.execute(pair, method).await;
        let trace = run.trace.into_inner().expect("trace lock");
        match outcome {
            Ok(mut result) => {
                result.trace = trace;
                Ok(result)
            }
            Err(e) => {
                let (stage, kind, message) = e.parts();
                Err(PairFailure {
                    pair_id: pair.id.clone(),
                    stage: stage.to_string(),
                    kind,
                    message,
                    trace,
                })
            }
        }
    }

    /// Runs every pair with at most `width` in flight. Results come back in
    /// input order; a failing pair does not stop the others.
    pub async fn run_batch(
        &self,
        pairs: Vec<ImageTextPair>,
        method: DetectionMethod,
        width: usize,
    ) -> Result<Vec<Result<DetectionResult, PairFailure>>, BatchError> {
        if width == 0 {
            return Err(BatchError::ConfigInvalid("parallelism width must be at least 1".into()));
        }
        let mut seen = HashSet::new();
        for p in &pairs {
            if !seen.insert(p.id.as_str()) {
                return Err(BatchError::ConfigInvalid(format!("duplicate pair id {:?}", p.id)));
            }
        }
        let results = futures::stream::iter(pairs)
            .map(|pair| {
                let ex = self.clone();
                let id = pair.id.clone();
                async move {
                    match tokio::spawn(async move { ex.run_detection(&pair, method).await }).await {
                        Ok(r) => r,
                        Err(e) => Err(PairFailure {
                            pair_id: id,
                            stage: "executor".into(),
                            kind: "Panic".into(),
                            message: e.to_string(),
                            trace: Vec::new(),
                        }),
                    }
                }
            })
            .buffered(width)
            .collect()
            .await;
        Ok(results)
    }
}

struct PairRun<'a> {
    ex: &'a Executor,
    trace: Mutex<Vec<TraceRecord>>,
}

impl PairRun<'_> {
    fn record(&self, stage: String, input_digest: String, output_digest: String, started: Instant, cache_hit: bool) {
        self.trace.lock().expect("trace lock").push(TraceRecord {
            stage,
            input_digest,
            output_digest,
            duration_ms: started.elapsed().as_millis() as u64,
            cache_hit,
        });
    }

    /// Calls a tool through the cache. Null tools are neither cached nor
    /// traced since nothing is invoked.
    async fn tool_call<T, F, Fut>(&self, stage: &'static str, key: CacheKey, call: F) -> Result<T, RunError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce() -> Fut,
        Fut: Future<Output = Result<T, ToolError>>,
    {
        if key.backend_id == "null" {
            return call().await.map_err(|e| RunError::Tool(stage, e));
        }
        let started = Instant::now();
        let key_digest = key.digest();
        if let Some(cache) = &self.ex.cache {
            if let Some(v) = cache.get_json::<T>(&key).map_err(|e| RunError::Cache(stage, e))? {
                self.record(format!("tool:{stage}"), key_digest, json_digest(&v), started, true);
                return Ok(v);
            }
        }
        let v = call().await.map_err(|e| RunError::Tool(stage, e))?;
        if let Some(cache) = &self.ex.cache {
            cache.put_json(&key, &v).map_err(|e| RunError::Cache(stage, e))?;
        }
        self.record(format!("tool:{stage}"), key_digest, json_digest(&v), started, false);
        Ok(v)
    }

    async fn execute(&self, pair: &ImageTextPair, method: DetectionMethod) -> Result<DetectionResult, RunError> {
        let violations = validate_pair(pair);
        if !violations.is_empty() {
            let msgs: Vec<String> = violations.iter().map(ToString::to_string).collect();
            return Err(RunError::Invalid(msgs.join("; ")));
        }
        let ctx = &self.ex.ctx;
        let claims = stages::claims_for(pair, self, ctx).await.map_err(|e| RunError::Stage("extract", e))?;
        let extracted_claims = pair.claims.is_empty().then(|| claims.clone());
        let pair = &ImageTextPair {
            claims,
            ..pair.clone()
        };
        let (plan, evidence, outcome) = match method {
            DetectionMethod::UniHD => {
                let plan = stages::formulate_queries(pair, self, ctx)
                    .await
                    .map_err(|e| RunError::Stage("formulate", e))?;
                let evidence = self.gather(pair, &plan).await?;
                let outcome = stages::verify(pair, &evidence, self, ctx)
                    .await
                    .map_err(|e| RunError::Stage("verify", e))?;
                (Some(plan), evidence, outcome)
            }
            DetectionMethod::SelfCheck0Shot | DetectionMethod::SelfCheck2Shot => {
                let shots = if method == DetectionMethod::SelfCheck0Shot { 0 } else { 2 };
                let outcome = stages::self_check(pair, shots, &self.ex.demonstrations, self, ctx)
                    .await
                    .map_err(|e| RunError::Stage("self-check", e))?;
                (None, EvidenceBundle::default(), outcome)
            }
        };
        Ok(DetectionResult {
            pair_id: pair.id.clone(),
            method,
            extracted_claims,
            verdicts: outcome.verdicts,
            plan,
            evidence,
            degraded: outcome.degraded,
            trace: Vec::new(),
        })
    }

    /// Fans out every planned tool call at once and merges the results in
    /// plan order, whatever order they complete in.
    async fn gather(&self, pair: &ImageTextPair, plan: &ToolPlan) -> Result<EvidenceBundle, RunError> {
        let tools = &self.ex.tools;
        let image = &pair.image;

        let vocabulary = plan.object_vocabulary();
        let objects = async {
            if vocabulary.is_empty() {
                return Ok(Vec::new());
            }
            let key = CacheKey::for_labels("object", &vocabulary, &image.digest, tools.object_detector.id());
            self.tool_call::<Vec<ObjectEvidence>, _, _>("object", key, || {
                tools.object_detector.detect(image, &vocabulary)
            })
            .await
        };

        let attributes = futures::future::try_join_all(plan.attribute_jobs().into_iter().map(|(_, _, q)| async move {
            tools
                .attribute_answerer
                .answer(image, q, self)
                .await
                .map_err(|e| RunError::Tool("attribute", e))
        }));

        let scene_text = async {
            if !plan.needs_scene_text() {
                return Ok(Vec::new());
            }
            let key = CacheKey::new("scene-text", "*", &image.digest, tools.scene_text_reader.id());
            self.tool_call::<Vec<SceneTextEvidence>, _, _>("scene-text", key, || tools.scene_text_reader.read(image))
                .await
        };

        let mut questions: Vec<&str> = Vec::new();
        for (_, _, q) in plan.fact_jobs() {
            if !questions.contains(&q) {
                questions.push(q);
            }
        }
        let top_k = self.ex.top_k;
        let facts = futures::future::try_join_all(questions.iter().map(|q| async move {
            let key = CacheKey::new("fact", &format!("{q}\ntop_k={top_k}"), "", tools.fact_searcher.id());
            let hits = self
                .tool_call::<Vec<FactSnippet>, _, _>("fact", key, || tools.fact_searcher.search(q, top_k))
                .await?;
            Ok::<_, RunError>(FactEvidence {
                question: q.to_string(),
                snippets: hits.iter().map(FactSnippet::display).collect(),
            })
        }));

        let (objects, attributes, scene_text, facts) = futures::try_join!(objects, attributes, scene_text, facts)?;
        Ok(EvidenceBundle {
            objects,
            attributes: attributes.into_iter().flatten().collect::<Vec<AttributeEvidence>>(),
            scene_text,
            facts,
        })
    }
}

/// Model access for one pair: caches deterministic replies and traces every
/// call.
#[async_trait]
impl ModelService for PairRun<'_> {
    async fn complete(&self, request: ModelRequest) -> Result<ModelResponse, GatewayError> {
        let started = Instant::now();
        let stage = format!("model:{}", request.prompt.template);
        let digest = request.digest();
        let images: Vec<&str> = request.prompt.attachments.iter().map(|i| i.digest.as_str()).collect();
        let cache = self.ex.cache.as_ref().filter(|_| request.is_deterministic());
        let key = CacheKey::new("model", &digest, images.join(","), self.ex.svc.backend_id());
        if let Some(cache) = cache {
            if let Some(resp) = cache
                .get_json::<ModelResponse>(&key)
                .map_err(|e| GatewayError::Cache(e.to_string()))?
            {
                self.record(stage, digest, sha256_hex(&resp.text), started, true);
                return Ok(resp);
            }
        }
        let resp = self.ex.svc.complete(request).await?;
        if let Some(cache) = cache {
            cache.put_json(&key, &resp).map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        self.record(stage, digest, sha256_hex(&resp.text), started, false);
        Ok(resp)
    }

    fn backend_id(&self) -> &str {
        self.ex.svc.backend_id()
    }
}

/// File name used for a pair's result.
pub fn pair_file_name(pair_id: &str) -> String {
    let safe: String = pair_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    format!("{safe}.json")
}

/// Run-level settings recorded in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunInfo {
    pub method: DetectionMethod,
    pub width: usize,
    pub backends: BTreeMap<String, String>,
    pub cache_enabled: bool,
    pub settings: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestPair {
    pub pair_id: String,
    pub status: String,
    #[serde(default)]
    pub degraded: bool,
    pub trace: Vec<TraceRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    #[serde(flatten)]
    pub info: RunInfo,
    pub pairs: Vec<ManifestPair>,
    pub succeeded: usize,
    pub failed: usize,
    /// Calls that reached a backend, i.e. trace records that missed the cache.
    pub backend_invocations: usize,
    pub cache_hits: usize,
}

fn pretty<T: Serialize>(v: &T) -> std::io::Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes `<out_dir>/<run_id>/` with one file per successful pair,
/// `errors.json` and `manifest.json`. Fails if the run directory exists.
pub fn write_run(
    out_dir: &Path,
    run_id: &str,
    results: &[Result<DetectionResult, PairFailure>],
    info: RunInfo,
) -> std::io::Result<(PathBuf, RunManifest)> {
    std::fs::create_dir_all(out_dir)?;
    let dir = out_dir.join(run_id);
    std::fs::create_dir(&dir)?;
    let mut errors = Vec::new();
    let mut pairs = Vec::new();
    for r in results {
        match r {
            Ok(res) => {
                std::fs::write(dir.join(pair_file_name(&res.pair_id)), pretty(res)?)?;
                pairs.push(ManifestPair {
                    pair_id: res.pair_id.clone(),
                    status: "ok".into(),
                    degraded: res.degraded,
                    trace: res.trace.clone(),
                });
            }
            Err(f) => {
                errors.push(f);
                pairs.push(ManifestPair {
                    pair_id: f.pair_id.clone(),
                    status: "error".into(),
                    degraded: false,
                    trace: f.trace.clone(),
                });
            }
        }
    }
    std::fs::write(dir.join("errors.json"), pretty(&errors)?)?;
    let records = pairs.iter().flat_map(|p| &p.trace);
    let cache_hits = records.clone().filter(|t| t.cache_hit).count();
    let manifest = RunManifest {
        run_id: run_id.to_string(),
        created_at: chrono::Utc::now().to_rfc3339(),
        info,
        succeeded: results.iter().filter(|r| r.is_ok()).count(),
        failed: errors.len(),
        backend_invocations: records.count() - cache_hits,
        cache_hits,
        pairs,
    };
    std::fs::write(dir.join("manifest.json"), pretty(&manifest)?)?;
    Ok((dir, manifest))
}

/// Reads one pair result back from a run directory; `None` if absent.
pub fn read_pair_result(run_dir: &Path, pair_id: &str) -> std::io::Result<Option<DetectionResult>> {
    match std::fs::read(run_dir.join(pair_file_name(pair_id))) {
        Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e),
    }
}

/// A fresh run id from the current UTC time.
pub fn default_run_id() -> String {
    chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ").to_string()
}
