//! Benchmark files (`mhalubench.v1`): loading with path-precise errors,
//! canonical saving, corpus statistics, and aligning detection output with
//! gold labels for scoring.
//!
//! Concept mapping: a response is a pair's `text`; a segment ("S1") is an
//! entry of `segments`; a claim ("S1.1") is an entry of `claims` whose
//! `segment_id` names its segment. Labels and categories are closed
//! vocabularies.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::metrics::{self, CategoryRecall, Level, MetricsError, MetricsReport};
use crate::model::{
    validate_pair, Claim, HallucinationCategory, ImageRef, ImageTextPair, Label, Segment, TaskType, Verdict,
};

pub const VERSION: &str = "mhalubench.v1";
pub const SCHEMA: &str = include_str!("../schema/mhalubench.v1.schema.json");

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("schema violation at {path}: {message}")]
    SchemaViolation { path: String, message: String },
    #[error("unsupported benchmark version {0:?} (expected {VERSION})")]
    UnsupportedVersion(String),
    #[error("image digest mismatch for pair {pair_id}: file {actual}, declared {expected}")]
    ImageDigestMismatch {
        pair_id: String,
        expected: String,
        actual: String,
    },
    #[error("no prediction for pair {0}")]
    MissingPrediction(String),
    #[error("pair {pair_id}: prediction for claim {index} does not exist in the benchmark")]
    IndexMismatch { pair_id: String, index: u32 },
    #[error("pair {pair_id}: {got} predictions for {expected} claims")]
    LengthMismatch {
        pair_id: String,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl BenchError {
    pub fn kind(&self) -> &'static str {
        match self {
            BenchError::SchemaViolation { .. } => "SchemaViolation",
            BenchError::UnsupportedVersion(_) => "UnsupportedVersion",
            BenchError::ImageDigestMismatch { .. } => "ImageDigestMismatch",
            BenchError::MissingPrediction(_) => "MissingPrediction",
            BenchError::IndexMismatch { .. } => "IndexMismatch",
            BenchError::LengthMismatch { .. } => "LengthMismatch",
            BenchError::Metrics(MetricsError::LengthMismatch { .. }) => "LengthMismatch",
            BenchError::Metrics(_) => "MetricsError",
            BenchError::Io { .. } => "Io",
        }
    }
}

fn violation(path: impl Into<String>, message: impl Into<String>) -> BenchError {
    BenchError::SchemaViolation {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkFile {
    pub version: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub provenance: BTreeMap<String, Value>,
    pub pairs: Vec<ImageTextPair>,
}

// Strict mirror of the on-disk layout: gold labels are mandatory here.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    version: String,
    #[serde(default)]
    provenance: BTreeMap<String, Value>,
    pairs: Vec<RawPair>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPair {
    id: String,
    task: TaskType,
    image: RawImage,
    text: String,
    claims: Vec<RawClaim>,
    #[serde(default)]
    segments: Option<Vec<RawSegment>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    location: String,
    digest: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClaim {
    index: u32,
    text: String,
    gold_label: Label,
    #[serde(default)]
    gold_categories: Option<BTreeSet<HallucinationCategory>>,
    #[serde(default)]
    segment_id: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    id: String,
    text: String,
    claim_indices: Vec<u32>,
}

impl From<RawPair> for ImageTextPair {
    fn from(p: RawPair) -> Self {
        ImageTextPair {
            id: p.id,
            task: p.task,
            image: ImageRef {
                location: p.image.location,
                digest: p.image.digest,
            },
            text: p.text,
            claims: p
                .claims
                .into_iter()
                .map(|c| Claim {
                    index: c.index,
                    text: c.text,
                    gold_label: Some(c.gold_label),
                    gold_categories: c.gold_categories.filter(|s| !s.is_empty()),
                    segment_id: c.segment_id,
                })
                .collect(),
            segments: p.segments.map(|segs| {
                segs.into_iter()
                    .map(|s| Segment {
                        id: s.id,
                        text: s.text,
                        claim_indices: s.claim_indices,
                    })
                    .collect()
            }),
        }
    }
}

fn pointer(path: &serde_path_to_error::Path, message: &str) -> String {
    use serde_path_to_error::Segment as S;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            S::Seq { index } => {
                let _ = write!(out, "/{index}");
            }
            S::Map { key } => {
                let _ = write!(out, "/{}", key.replace('~', "~0").replace('/', "~1"));
            }
            S::Enum { variant } => {
                let _ = write!(out, "/{variant}");
            }
            S::Unknown => out.push_str("/?"),
        }
    }
    // Missing fields are reported against the enclosing object.
    if let Some(field) = message.strip_prefix("missing field `").and_then(|m| m.split('`').next()) {
        let _ = write!(out, "/{field}");
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Parses and validates a benchmark document. Image digests are not checked
/// here; see [`load`].
pub fn parse(text: &str) -> Result<BenchmarkFile, BenchError> {
    let value: Value = serde_json::from_str(text).map_err(|e| violation("/", e.to_string()))?;
    match value.get("version") {
        Some(Value::String(v)) if v == VERSION => {}
        Some(Value::String(v)) => return Err(BenchError::UnsupportedVersion(v.clone())),
        Some(_) => return Err(violation("/version", "version must be a string")),
        None => return Err(violation("/version", "missing field `version`")),
    }
    let raw: RawFile = serde_path_to_error::deserialize(value).map_err(|e| {
        let message = e.inner().to_string();
        violation(pointer(e.path(), &message), message)
    })?;

    let mut ids = HashSet::new();
    for (i, p) in raw.pairs.iter().enumerate() {
        if !ids.insert(p.id.as_str()) {
            return Err(violation(format!("/pairs/{i}/id"), format!("duplicate pair id {:?}", p.id)));
        }
        if p.claims.is_empty() {
            return Err(violation(format!("/pairs/{i}/claims"), "benchmark pairs need at least one claim"));
        }
        let d = &p.image.digest;
        if d.len() != 64 || !d.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return Err(violation(format!("/pairs/{i}/image/digest"), "expected 64 lowercase hex digits"));
        }
    }
    let bench = BenchmarkFile {
        version: raw.version,
        provenance: raw.provenance,
        pairs: raw.pairs.into_iter().map(ImageTextPair::from).collect(),
    };
    for (i, p) in bench.pairs.iter().enumerate() {
        let problems = validate_pair(p);
        if !problems.is_empty() {
            let msgs: Vec<String> = problems.iter().map(ToString::to_string).collect();
            return Err(violation(format!("/pairs/{i}"), msgs.join("; ")));
        }
    }
    check_declared_counts(&bench)?;
    Ok(bench)
}

/// When provenance declares `task_counts`, it must agree with the pairs.
fn check_declared_counts(bench: &BenchmarkFile) -> Result<(), BenchError> {
    let Some(declared) = bench.provenance.get("task_counts") else {
        return Ok(());
    };
    let actual = stats(bench).tasks;
    let expected: BTreeMap<TaskType, u64> = serde_json::from_value(declared.clone())
        .map_err(|e| violation("/provenance/task_counts", e.to_string()))?;
    for task in TaskType::ALL {
        let want = expected.get(&task).copied().unwrap_or(0);
        if actual[&task] != want {
            return Err(violation(
                format!("/provenance/task_counts/{task}"),
                format!("declares {want} pairs, file has {}", actual[&task]),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ImageCheck {
    pub verified: usize,
    /// Images not found locally (or remote), checked by digest only.
    pub digest_only: usize,
}

/// Verifies the digest of every image file that exists under `base`.
pub fn verify_images(bench: &BenchmarkFile, base: &Path) -> Result<ImageCheck, BenchError> {
    let mut check = ImageCheck::default();
    for p in &bench.pairs {
        let Some(path) = p.image.local_path(Some(base)).filter(|p| p.is_file()) else {
            check.digest_only += 1;
            continue;
        };
        let bytes = std::fs::read(&path).map_err(|source| BenchError::Io { path, source })?;
        let actual = sha256_hex(&bytes);
        if actual != p.image.digest {
            return Err(BenchError::ImageDigestMismatch {
                pair_id: p.id.clone(),
                expected: p.image.digest.clone(),
                actual,
            });
        }
        check.verified += 1;
    }
    Ok(check)
}

/// Reads, validates and checks image digests relative to the file's folder.
pub fn load(path: &Path) -> Result<BenchmarkFile, BenchError> {
    let text = std::fs::read_to_string(path).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let bench = parse(&text)?;
    verify_images(&bench, path.parent().unwrap_or(Path::new(".")))?;
    Ok(bench)
}

/// Canonical encoding: pretty JSON, declared field order, trailing newline.
pub fn to_canonical_string(bench: &BenchmarkFile) -> String {
    let mut s = serde_json::to_string_pretty(bench).expect("benchmark serializes");
    s.push('\n');
    s
}

pub fn save(bench: &BenchmarkFile, path: &Path) -> Result<(), BenchError> {
    std::fs::write(path, to_canonical_string(bench)).map_err(|source| BenchError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ClaimsPerPair {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    /// claim count → number of pairs
    pub histogram: BTreeMap<usize, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorpusStats {
    pub pairs: u64,
    pub tasks: BTreeMap<TaskType, u64>,
    pub claims: u64,
    pub segments: u64,
    pub claims_per_pair: ClaimsPerPair,
    pub labels: BTreeMap<Label, u64>,
    /// Over gold-hallucinatory claims; a claim counts once per tag.
    pub categories: BTreeMap<HallucinationCategory, u64>,
}

pub fn stats(bench: &BenchmarkFile) -> CorpusStats {
    let mut tasks: BTreeMap<TaskType, u64> = TaskType::ALL.iter().map(|&t| (t, 0)).collect();
    let mut labels: BTreeMap<Label, u64> = [(Label::Hallucinatory, 0), (Label::NonHallucinatory, 0)].into();
    let mut categories: BTreeMap<HallucinationCategory, u64> =
        HallucinationCategory::ALL.iter().map(|&c| (c, 0)).collect();
    let mut per_pair = ClaimsPerPair::default();
    let mut claims = 0u64;
    let mut segments = 0u64;
    for p in &bench.pairs {
        *tasks.entry(p.task).or_default() += 1;
        let n = p.claims.len();
        claims += n as u64;
        segments += p.effective_segments().len() as u64;
        *per_pair.histogram.entry(n).or_default() += 1;
        for c in &p.claims {
            if let Some(l) = c.gold_label {
                *labels.entry(l).or_default() += 1;
            }
            if c.gold_label == Some(Label::Hallucinatory) {
                for &cat in c.gold_categories.iter().flatten() {
                    *categories.entry(cat).or_default() += 1;
                }
            }
        }
    }
    if !bench.pairs.is_empty() {
        per_pair.min = *per_pair.histogram.keys().next().expect("non-empty");
        per_pair.max = *per_pair.histogram.keys().last().expect("non-empty");
        per_pair.mean = claims as f64 / bench.pairs.len() as f64;
    }
    CorpusStats {
        pairs: bench.pairs.len() as u64,
        tasks,
        claims,
        segments,
        claims_per_pair: per_pair,
        labels,
        categories,
    }
}

pub fn stats_text(s: &CorpusStats) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "pairs      {}", s.pairs);
    for (t, n) in &s.tasks {
        let _ = writeln!(out, "  {:<18} {n}", t.as_str());
    }
    let _ = writeln!(out, "claims     {}", s.claims);
    let _ = writeln!(out, "segments   {}", s.segments);
    let c = &s.claims_per_pair;
    let _ = writeln!(out, "claims/pair min {} max {} mean {:.2}", c.min, c.max, c.mean);
    for (l, n) in &s.labels {
        let _ = writeln!(out, "  {:<18} {n}", l.as_str());
    }
    let _ = writeln!(out, "categories (hallucinatory claims)");
    for (cat, n) in &s.categories {
        let _ = writeln!(out, "  {} {:<15} {n}", cat.code(), cat.as_str());
    }
    out
}

/// Predicted and gold labels at one level, in benchmark order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LevelLabels {
    pub preds: Vec<Label>,
    pub golds: Vec<Label>,
    pub unverified: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AlignedLabels {
    pub claim: LevelLabels,
    pub segment: LevelLabels,
    pub response: LevelLabels,
}

impl AlignedLabels {
    pub fn level(&self, level: Level) -> &LevelLabels {
        match level {
            Level::Claim => &self.claim,
            Level::Segment => &self.segment,
            Level::Response => &self.response,
        }
    }
}

/// Lines predictions up with gold labels by (pair id, claim index) and
/// derives segment and response labels for both sides.
pub fn convert_predictions(
    bench: &BenchmarkFile,
    predictions: &BTreeMap<String, Vec<Verdict>>,
) -> Result<AlignedLabels, BenchError> {
    let mut out = AlignedLabels::default();
    for p in &bench.pairs {
        let verdicts = predictions
            .get(&p.id)
            .ok_or_else(|| BenchError::MissingPrediction(p.id.clone()))?;
        let n = p.claims.len();
        let mut by_index: BTreeMap<u32, &Verdict> = BTreeMap::new();
        for v in verdicts {
            if v.claim_index == 0 || v.claim_index as usize > n || by_index.insert(v.claim_index, v).is_some() {
                return Err(BenchError::IndexMismatch {
                    pair_id: p.id.clone(),
                    index: v.claim_index,
                });
            }
        }
        if by_index.len() != n {
            return Err(BenchError::LengthMismatch {
                pair_id: p.id.clone(),
                expected: n,
                got: verdicts.len(),
            });
        }
        let gold = |i: u32| p.claims[i as usize - 1].gold_label.expect("loaded claims carry gold labels");
        for c in &p.claims {
            let v = by_index[&c.index];
            out.claim.preds.push(v.label);
            out.claim.golds.push(gold(c.index));
            out.claim.unverified += v.is_unverified() as u64;
        }
        let mut seg_preds = Vec::new();
        let mut seg_golds = Vec::new();
        let mut pair_unverified = false;
        for seg in p.effective_segments() {
            let preds: Vec<Label> = seg.iter().map(|i| by_index[i].label).collect();
            let golds: Vec<Label> = seg.iter().map(|&i| gold(i)).collect();
            let unverified = seg.iter().any(|i| by_index[i].is_unverified());
            seg_preds.push(metrics::derive_segment_label(&preds)?);
            seg_golds.push(metrics::derive_segment_label(&golds)?);
            out.segment.unverified += unverified as u64;
            pair_unverified |= unverified;
        }
        out.response.preds.push(metrics::derive_response_label(&seg_preds)?);
        out.response.golds.push(metrics::derive_response_label(&seg_golds)?);
        out.response.unverified += pair_unverified as u64;
        out.segment.preds.extend(seg_preds);
        out.segment.golds.extend(seg_golds);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub reports: Vec<MetricsReport>,
    pub categories: Option<BTreeMap<HallucinationCategory, CategoryRecall>>,
}

/// Reports at all three levels, plus per-category recall when the benchmark
/// carries category tags.
pub fn evaluate(bench: &BenchmarkFile, predictions: &BTreeMap<String, Vec<Verdict>>) -> Result<Evaluation, BenchError> {
    let aligned = convert_predictions(bench, predictions)?;
    let mut reports = Vec::new();
    for level in Level::ALL {
        let l = aligned.level(level);
        let mut r = metrics::report(&l.preds, &l.golds, level)?;
        r.unverified = l.unverified;
        reports.push(r);
    }
    let claims: Vec<&Claim> = bench.pairs.iter().flat_map(|p| &p.claims).collect();
    let tagged = claims.iter().any(|c| c.gold_categories.is_some());
    let categories = if tagged {
        Some(metrics::per_category_recall(&aligned.claim.preds, &claims)?)
    } else {
        None
    };
    Ok(Evaluation { reports, categories })
}

/// A schema-complete corpus with the given number of pairs per task and
/// random claims, labels and tags. Image digests are derived from the pair
/// id; no files are written.
pub fn synthetic_corpus(composition: &[(TaskType, usize)], seed: u64) -> BenchmarkFile {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for &(task, count) in composition {
        for i in 0..count {
            let id = format!("{}-{:04}", task.as_str(), i + 1);
            let n_segments = rng.random_range(1..=3u32);
            let mut claims = Vec::new();
            let mut segments = Vec::new();
            for s in 1..=n_segments {
                let seg_id = format!("S{s}");
                let mut members = Vec::new();
                for _ in 0..rng.random_range(1..=3u32) {
                    let index = claims.len() as u32 + 1;
                    let hallucinated = rng.random_bool(0.4);
                    let claim = Claim::new(index, format!("Synthetic claim {index} of {id}."));
                    let claim = if hallucinated {
                        let cat = HallucinationCategory::ALL[rng.random_range(0..4)];
                        claim.with_gold(Label::Hallucinatory, &[cat])
                    } else {
                        claim.with_gold(Label::NonHallucinatory, &[])
                    };
                    claims.push(claim.in_segment(seg_id.clone()));
                    members.push(index);
                }
                segments.push(Segment {
                    id: seg_id,
                    text: format!("Segment {s}."),
                    claim_indices: members,
                });
            }
            pairs.push(ImageTextPair {
                image: ImageRef {
                    location: format!("images/{id}.png"),
                    digest: sha256_hex(id.as_bytes()),
                },
                id,
                task,
                text: segments.iter().map(|s| s.text.as_str()).collect::<Vec<_>>().join(" "),
                claims,
                segments: Some(segments),
            });
        }
    }
    BenchmarkFile {
        version: VERSION.to_string(),
        provenance: [("source".to_string(), Value::String("synthetic".into()))].into(),
        pairs,
    }
}
