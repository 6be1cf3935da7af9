//! The model-mediated stages: claim extraction, query formulation, and
//! verification, plus the Self-Check baselines that skip tools entirely.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::gateway::{DecodeParams, GatewayError, ModelRequest, ModelResponse, ModelService, Purpose};
use crate::model::{
    claim_key, parse_claim_key, Claim, Direction, EvidenceBundle, HallucinationCategory, ImageTextPair, Label,
    ParseFlag, TaskType, Verdict,
};
use crate::prompt::{render_claim_list, Bindings, PromptError, TemplateId, TemplateStore};
use crate::repair::parse_lenient;
use crate::tools::format_evidence_sections;

/// Canonical wire labels used in verdict replies.
pub const HALLUCINATION: &str = "hallucination";
pub const NON_HALLUCINATION: &str = "non-hallucination";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectionMethod {
    #[serde(rename = "unihd")]
    UniHD,
    #[serde(rename = "selfcheck0")]
    SelfCheck0Shot,
    #[serde(rename = "selfcheck2")]
    SelfCheck2Shot,
}

impl DetectionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectionMethod::UniHD => "unihd",
            DetectionMethod::SelfCheck0Shot => "selfcheck0",
            DetectionMethod::SelfCheck2Shot => "selfcheck2",
        }
    }
}

impl fmt::Display for DetectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DetectionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "unihd" => Ok(DetectionMethod::UniHD),
            "selfcheck0" => Ok(DetectionMethod::SelfCheck0Shot),
            "selfcheck2" => Ok(DetectionMethod::SelfCheck2Shot),
            other => Err(format!("unknown method {other:?} (expected unihd, selfcheck0, selfcheck2)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimQueries {
    pub claim_index: u32,
    pub object_labels: Vec<String>,
    pub attribute_questions: Vec<String>,
    pub scene_text_questions: Vec<String>,
    pub fact_questions: Vec<String>,
}

impl ClaimQueries {
    pub fn is_empty(&self) -> bool {
        self.object_labels.is_empty()
            && self.attribute_questions.is_empty()
            && self.scene_text_questions.is_empty()
            && self.fact_questions.is_empty()
    }
}

/// Per-claim routing decision. Entries are ordered by claim index and cover
/// every claim exactly once.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolPlan {
    pub claims: Vec<ClaimQueries>,
}

impl ToolPlan {
    pub fn empty(n_claims: u32) -> Self {
        ToolPlan {
            claims: (1..=n_claims)
                .map(|i| ClaimQueries {
                    claim_index: i,
                    ..Default::default()
                })
                .collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.claims.iter().all(ClaimQueries::is_empty)
    }

    /// Object labels across all claims, first occurrence order, no repeats.
    pub fn object_vocabulary(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.claims {
            for l in &c.object_labels {
                if !out.contains(l) {
                    out.push(l.clone());
                }
            }
        }
        out
    }

    pub fn needs_scene_text(&self) -> bool {
        self.claims.iter().any(|c| !c.scene_text_questions.is_empty())
    }

    /// `(claim index, question index, question)` in merge order.
    pub fn attribute_jobs(&self) -> Vec<(u32, usize, &str)> {
        self.claims
            .iter()
            .flat_map(|c| c.attribute_questions.iter().enumerate().map(move |(q, s)| (c.claim_index, q, s.as_str())))
            .collect()
    }

    pub fn fact_jobs(&self) -> Vec<(u32, usize, &str)> {
        self.claims
            .iter()
            .flat_map(|c| c.fact_questions.iter().enumerate().map(move |(q, s)| (c.claim_index, q, s.as_str())))
            .collect()
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error("unparseable model output: {0}")]
    UnparseableModelOutput(String),
    #[error("claim count mismatch: expected {expected}, got {got}")]
    ClaimCountMismatch { expected: usize, got: usize },
    #[error("unknown verdict label {0:?}")]
    UnknownLabel(String),
    #[error("extraction produced no claims")]
    EmptyExtraction,
    #[error("two-shot self-check needs two demonstrations, {0} configured")]
    MissingDemonstrations(usize),
    #[error("pair has no claims")]
    NoClaims,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{template}: {source}")]
    AtTemplate {
        template: TemplateId,
        #[source]
        source: Box<StageError>,
    },
}

impl StageError {
    fn at(self, template: TemplateId) -> StageError {
        StageError::AtTemplate {
            template,
            source: Box::new(self),
        }
    }

    /// The underlying error with template tags removed.
    pub fn root(&self) -> &StageError {
        match self {
            StageError::AtTemplate { source, .. } => source.root(),
            other => other,
        }
    }

    /// Short machine-readable name.
    pub fn kind(&self) -> &'static str {
        match self.root() {
            StageError::UnparseableModelOutput(_) => "UnparseableModelOutput",
            StageError::ClaimCountMismatch { .. } => "ClaimCountMismatch",
            StageError::UnknownLabel(_) => "UnknownLabel",
            StageError::EmptyExtraction => "EmptyExtraction",
            StageError::MissingDemonstrations(_) => "MissingDemonstrations",
            StageError::NoClaims => "NoClaims",
            StageError::Prompt(_) => "PromptError",
            StageError::Gateway(GatewayError::BackendUnavailable { .. }) => "BackendUnavailable",
            StageError::Gateway(GatewayError::AuthFailure(_)) => "AuthFailure",
            StageError::Gateway(GatewayError::PayloadTooLarge(_)) => "PayloadTooLarge",
            StageError::Gateway(_) => "GatewayError",
            StageError::AtTemplate { .. } => unreachable!("root strips tags"),
        }
    }
}

/// Per-claim query lists decoded from one formulation reply.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QueryMap {
    pub queries: BTreeMap<u32, Vec<String>>,
    pub repaired: bool,
}

fn is_none_marker(s: &str) -> bool {
    s.trim().eq_ignore_ascii_case("none")
}

fn claim_entries(value: Value) -> Result<Vec<(String, Value)>, StageError> {
    match value {
        Value::Object(map) => Ok(map.into_iter().collect()),
        // Some replies split the mapping into a list of one-key objects.
        Value::Array(items) => {
            let mut out = Vec::new();
            for item in items {
                match item {
                    Value::Object(map) => out.extend(map),
                    other => {
                        return Err(StageError::UnparseableModelOutput(format!(
                            "expected a claim mapping, found {other}"
                        )))
                    }
                }
            }
            Ok(out)
        }
        other => Err(StageError::UnparseableModelOutput(format!(
            "expected a claim mapping, found {other}"
        ))),
    }
}

fn string_items(value: Value, key: &str) -> Result<Vec<String>, StageError> {
    match value {
        Value::Null => Ok(Vec::new()),
        Value::String(s) => Ok(vec![s]),
        Value::Array(items) => items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(StageError::UnparseableModelOutput(format!("{key}: non-string entry {other}"))),
            })
            .collect(),
        other => Err(StageError::UnparseableModelOutput(format!("{key}: unexpected value {other}"))),
    }
}

/// Decodes a `{"claim1": ..., "claimN": ...}` reply from a formulation prompt.
///
/// Object replies carry period-separated labels per claim, which are split,
/// lowercased and deduplicated. Question replies carry lists of strings.
/// `"none"` in either shape becomes an empty list.
pub fn parse_claim_query_map(raw: &str, n_claims: usize, kind: HallucinationCategory) -> Result<QueryMap, StageError> {
    let parsed = parse_lenient(raw).map_err(StageError::UnparseableModelOutput)?;
    let entries = claim_entries(parsed.value)?;
    let mut queries = BTreeMap::new();
    for (key, value) in entries {
        let index = parse_claim_key(key.trim())
            .ok_or_else(|| StageError::UnparseableModelOutput(format!("unexpected key {key:?}")))?;
        let items = string_items(value, &key)?;
        let list: Vec<String> = match kind {
            HallucinationCategory::Object => {
                let mut labels: Vec<String> = Vec::new();
                for label in items.iter().flat_map(|s| s.split('.')) {
                    let label = label.trim().to_lowercase();
                    if !label.is_empty() && !is_none_marker(&label) && !labels.contains(&label) {
                        labels.push(label);
                    }
                }
                labels
            }
            _ => items
                .into_iter()
                .map(|q| q.trim().to_string())
                .filter(|q| !q.is_empty() && !is_none_marker(q))
                .collect(),
        };
        if queries.insert(index, list).is_some() {
            return Err(StageError::UnparseableModelOutput(format!("duplicate key {key:?}")));
        }
    }
    let in_range = queries.keys().all(|&i| i >= 1 && i as usize <= n_claims);
    if queries.len() != n_claims || !in_range {
        return Err(StageError::ClaimCountMismatch {
            expected: n_claims,
            got: queries.len(),
        });
    }
    Ok(QueryMap {
        queries,
        repaired: parsed.repaired,
    })
}

/// Verdicts decoded from a reply, before the count is checked.
#[derive(Debug, Clone)]
struct VerdictEntries {
    verdicts: BTreeMap<u32, Verdict>,
}

fn parse_label(value: &str) -> Result<Label, StageError> {
    match value.trim().to_ascii_lowercase().as_str() {
        HALLUCINATION => Ok(Label::Hallucinatory),
        NON_HALLUCINATION => Ok(Label::NonHallucinatory),
        _ => Err(StageError::UnknownLabel(value.to_string())),
    }
}

fn parse_verdict_entries(raw: &str) -> Result<VerdictEntries, StageError> {
    let parsed = parse_lenient(raw).map_err(StageError::UnparseableModelOutput)?;
    let items = match parsed.value {
        Value::Array(items) => items,
        other => {
            return Err(StageError::UnparseableModelOutput(format!(
                "expected a list of verdicts, found {other}"
            )))
        }
    };
    let mut verdicts = BTreeMap::new();
    for item in items {
        let Value::Object(map) = item else {
            return Err(StageError::UnparseableModelOutput(format!("verdict entry is not an object: {item}")));
        };
        let mut claim: Option<(u32, Label)> = None;
        let mut reason = String::new();
        for (key, value) in &map {
            if key.trim() == "reason" {
                reason = value.as_str().unwrap_or_default().trim().to_string();
            } else if let Some(index) = parse_claim_key(key.trim()) {
                let label = value
                    .as_str()
                    .ok_or_else(|| StageError::UnknownLabel(value.to_string()))
                    .and_then(parse_label)?;
                if claim.replace((index, label)).is_some() {
                    return Err(StageError::UnparseableModelOutput("verdict entry names two claims".into()));
                }
            }
        }
        let (index, label) =
            claim.ok_or_else(|| StageError::UnparseableModelOutput("verdict entry without a claim key".into()))?;
        if reason.is_empty() {
            return Err(StageError::UnparseableModelOutput(format!("{} has no reason", claim_key(index))));
        }
        let mut verdict = Verdict::new(index, label, reason);
        if parsed.repaired {
            verdict.parse_flags.insert(ParseFlag::Repaired);
        }
        if verdicts.insert(index, verdict).is_some() {
            return Err(StageError::UnparseableModelOutput(format!("{} judged twice", claim_key(index))));
        }
    }
    Ok(VerdictEntries { verdicts })
}

fn check_count(entries: &VerdictEntries, n_claims: usize) -> Result<(), StageError> {
    let in_range = entries.verdicts.keys().all(|&i| i >= 1 && i as usize <= n_claims);
    if entries.verdicts.len() != n_claims || !in_range {
        return Err(StageError::ClaimCountMismatch {
            expected: n_claims,
            got: entries.verdicts.len(),
        });
    }
    Ok(())
}

/// Decodes a verdict list (`[{"claim1":"hallucination","reason":...}, ...]`)
/// into one verdict per claim in index order.
pub fn parse_verdicts(raw: &str, n_claims: usize) -> Result<Vec<Verdict>, StageError> {
    let entries = parse_verdict_entries(raw)?;
    check_count(&entries, n_claims)?;
    Ok(entries.verdicts.into_values().collect())
}

/// Inverse of [`parse_verdicts`]: the reply shape the verification prompt
/// asks for.
pub fn verdicts_to_reply(verdicts: &[Verdict]) -> String {
    let items: Vec<Value> = verdicts
        .iter()
        .map(|v| {
            let label = match v.label {
                Label::Hallucinatory => HALLUCINATION,
                Label::NonHallucinatory => NON_HALLUCINATION,
            };
            let mut map = serde_json::Map::new();
            map.insert(claim_key(v.claim_index), Value::String(label.into()));
            map.insert("reason".into(), Value::String(v.rationale.clone()));
            Value::Object(map)
        })
        .collect();
    Value::Array(items).to_string()
}

/// Shared configuration for stage calls.
#[derive(Debug, Clone)]
pub struct StageContext {
    pub templates: Arc<TemplateStore>,
    pub decode: DecodeParams,
}

impl StageContext {
    pub fn new(templates: Arc<TemplateStore>) -> Self {
        StageContext {
            templates,
            decode: DecodeParams::default(),
        }
    }

    fn request(
        &self,
        template: TemplateId,
        bindings: &Bindings,
        images: &[crate::model::ImageRef],
        purpose: Purpose,
    ) -> Result<ModelRequest, StageError> {
        let prompt = self
            .templates
            .render(template, bindings, images)
            .map_err(|e| StageError::from(e).at(template))?;
        Ok(ModelRequest::new(prompt, purpose, self.decode))
    }
}

async fn call(svc: &dyn ModelService, request: ModelRequest) -> Result<ModelResponse, StageError> {
    let template = request.prompt.template;
    svc.complete(request).await.map_err(|e| StageError::from(e).at(template))
}

/// Asks once and, if the reply covers the wrong number of claims, once more
/// with a bumped retry round.
async fn ask_counted<T>(
    svc: &dyn ModelService,
    request: ModelRequest,
    parse: impl Fn(&str) -> Result<T, StageError>,
) -> Result<T, StageError> {
    let template = request.prompt.template;
    let first = call(svc, request.clone()).await?;
    match parse(&first.text) {
        Err(StageError::ClaimCountMismatch { .. }) => {
            let mut again = request;
            again.retry_round += 1;
            let second = call(svc, again).await?;
            parse(&second.text).map_err(|e| e.at(template))
        }
        other => other.map_err(|e| e.at(template)),
    }
}

/// Splits free text into claims with the model. `text` is a model response
/// for image-to-text tasks and the user query for text-to-image.
pub async fn extract_claims(
    text: &str,
    task: TaskType,
    svc: &dyn ModelService,
    ctx: &StageContext,
) -> Result<Vec<Claim>, StageError> {
    if text.trim().is_empty() {
        return Err(StageError::EmptyExtraction);
    }
    let source_kind = match task.direction() {
        Direction::ImageToText => "response",
        Direction::TextToImage => "user query",
    };
    let bindings = Bindings::new().with("source_kind", source_kind).with("text", text);
    let request = ctx.request(TemplateId::ClaimExtraction, &bindings, &[], Purpose::Extract)?;
    let reply = call(svc, request).await?;
    let parsed = parse_lenient(&reply.text)
        .map_err(|e| StageError::UnparseableModelOutput(e).at(TemplateId::ClaimExtraction))?;
    let items = string_items(parsed.value, "claims").map_err(|e| e.at(TemplateId::ClaimExtraction))?;
    let claims: Vec<Claim> = items
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .enumerate()
        .map(|(i, s)| Claim::new(i as u32 + 1, s))
        .collect();
    if claims.is_empty() {
        return Err(StageError::EmptyExtraction);
    }
    Ok(claims)
}

/// Claims to check for a pair: the annotated ones when present, extracted
/// ones otherwise.
pub async fn claims_for(pair: &ImageTextPair, svc: &dyn ModelService, ctx: &StageContext) -> Result<Vec<Claim>, StageError> {
    if !pair.claims.is_empty() {
        return Ok(pair.claims.clone());
    }
    extract_claims(&pair.text, pair.task, svc, ctx).await
}

fn claim_list(pair: &ImageTextPair) -> Result<String, StageError> {
    if pair.claims.is_empty() {
        return Err(StageError::NoClaims);
    }
    Ok(render_claim_list(&pair.claim_texts())?)
}

/// Runs the four formulation prompts and merges them into one plan. Object,
/// scene-text and fact prompts run concurrently; the attribute prompt waits
/// for the object labels it binds.
pub async fn formulate_queries(
    pair: &ImageTextPair,
    svc: &dyn ModelService,
    ctx: &StageContext,
) -> Result<ToolPlan, StageError> {
    let claims = claim_list(pair)?;
    let n = pair.claims.len();
    let ask = |template: TemplateId, kind: HallucinationCategory, bindings: Bindings| async move {
        let request = ctx.request(template, &bindings, &[], Purpose::QueryFormulate)?;
        ask_counted(svc, request, |raw| parse_claim_query_map(raw, n, kind)).await
    };
    let just_claims = Bindings::new().with("claims", claims.clone());
    let (objects, scene, facts) = futures::try_join!(
        ask(TemplateId::ObjectQuery, HallucinationCategory::Object, just_claims.clone()),
        ask(TemplateId::SceneTextQuery, HallucinationCategory::SceneText, just_claims.clone()),
        ask(TemplateId::FactQuery, HallucinationCategory::Fact, just_claims),
    )?;

    let mut plan = ToolPlan::empty(n as u32);
    for entry in &mut plan.claims {
        entry.object_labels = objects.queries[&entry.claim_index].clone();
    }
    let vocabulary = plan.object_vocabulary();
    let objects_binding = if vocabulary.is_empty() {
        "none".to_string()
    } else {
        vocabulary.join(".")
    };
    let attributes = ask(
        TemplateId::AttributeQuery,
        HallucinationCategory::Attribute,
        Bindings::new().with("objects", objects_binding).with("claims", claims),
    )
    .await?;
    for entry in &mut plan.claims {
        let i = entry.claim_index;
        entry.attribute_questions = attributes.queries[&i].clone();
        entry.scene_text_questions = scene.queries[&i].clone();
        entry.fact_questions = facts.queries[&i].clone();
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerifyOutcome {
    pub verdicts: Vec<Verdict>,
    /// Set when some claims fell back to an unverified label.
    pub degraded: bool,
}

/// Sends one verdict-producing request; on a claim-count mismatch asks once
/// more, then fills the unanswered claims with unverified fallbacks.
async fn judge(svc: &dyn ModelService, request: ModelRequest, n: usize) -> Result<VerifyOutcome, StageError> {
    let template = request.prompt.template;
    let mut request = request;
    let mut last = None;
    for _ in 0..2 {
        let reply = call(svc, request.clone()).await?;
        let entries = parse_verdict_entries(&reply.text).map_err(|e| e.at(template))?;
        if check_count(&entries, n).is_ok() {
            return Ok(VerifyOutcome {
                verdicts: entries.verdicts.into_values().collect(),
                degraded: false,
            });
        }
        last = Some(entries);
        request.retry_round += 1;
    }
    let mut partial = last.expect("loop ran").verdicts;
    let verdicts = (1..=n as u32)
        .map(|i| partial.remove(&i).unwrap_or_else(|| Verdict::unverified(i)))
        .collect();
    Ok(VerifyOutcome { verdicts, degraded: true })
}

/// Judges every claim of the pair in one call, given the pooled evidence.
pub async fn verify(
    pair: &ImageTextPair,
    evidence: &EvidenceBundle,
    svc: &dyn ModelService,
    ctx: &StageContext,
) -> Result<VerifyOutcome, StageError> {
    let claims = claim_list(pair)?;
    let template = match pair.task.direction() {
        Direction::ImageToText => TemplateId::VerifyImageToText,
        Direction::TextToImage => TemplateId::VerifyTextToImage,
    };
    let sections = format_evidence_sections(evidence);
    let bindings = Bindings::new()
        .with("object_evidence", sections.object)
        .with("attribute_evidence", sections.attribute)
        .with("scene_text_evidence", sections.scene_text)
        .with("fact_evidence", sections.fact)
        .with("claims", claims);
    let request = ctx.request(template, &bindings, std::slice::from_ref(&pair.image), Purpose::Verify)?;
    judge(svc, request, pair.claims.len()).await
}

/// A worked example shown to the two-shot baseline: a complete pair with its
/// reference verdicts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub pair: ImageTextPair,
    pub verdicts: Vec<Verdict>,
}

fn render_demonstrations(demos: &[Demonstration]) -> Result<String, StageError> {
    let mut blocks = Vec::new();
    for (i, demo) in demos.iter().enumerate() {
        blocks.push(format!(
            "Example {}:\nclaim list:\n{}\noutput: {}",
            i + 1,
            claim_list(&demo.pair)?,
            verdicts_to_reply(&demo.verdicts)
        ));
    }
    Ok(blocks.join("\n\n"))
}

/// Judges the claims with the model alone. `shots` is 0 or 2; two-shot uses
/// the first two demonstrations.
pub async fn self_check(
    pair: &ImageTextPair,
    shots: usize,
    demonstrations: &[Demonstration],
    svc: &dyn ModelService,
    ctx: &StageContext,
) -> Result<VerifyOutcome, StageError> {
    let claims = claim_list(pair)?;
    let request = if shots == 0 {
        let bindings = Bindings::new().with("claims", claims);
        ctx.request(
            TemplateId::SelfCheckZeroShot,
            &bindings,
            std::slice::from_ref(&pair.image),
            Purpose::SelfCheck,
        )?
    } else {
        if demonstrations.len() < 2 {
            return Err(StageError::MissingDemonstrations(demonstrations.len()));
        }
        let demos = &demonstrations[..2];
        let mut images: Vec<_> = demos.iter().map(|d| d.pair.image.clone()).collect();
        images.push(pair.image.clone());
        let bindings = Bindings::new()
            .with("demonstrations", render_demonstrations(demos)?)
            .with("claims", claims);
        ctx.request(TemplateId::SelfCheckTwoShot, &bindings, &images, Purpose::SelfCheck)?
    };
    judge(svc, request, pair.claims.len()).await
}
