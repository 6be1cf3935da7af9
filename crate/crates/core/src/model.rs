//! Domain types shared by every stage of the pipeline.
//!
//! All values here are plain data: immutable once built, `Send + Sync`, and
//! serialized with a canonical JSON encoding (field names as declared, enum
//! variants as lowercase kebab strings).

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;

/// Which generation task produced the pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    ImageCaptioning,
    Vqa,
    TextToImage,
}

impl TaskType {
    pub const ALL: [TaskType; 3] = [TaskType::ImageCaptioning, TaskType::Vqa, TaskType::TextToImage];

    pub fn direction(self) -> Direction {
        match self {
            TaskType::ImageCaptioning | TaskType::Vqa => Direction::ImageToText,
            TaskType::TextToImage => Direction::TextToImage,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskType::ImageCaptioning => "image-captioning",
            TaskType::Vqa => "vqa",
            TaskType::TextToImage => "text-to-image",
        }
    }
}

impl fmt::Display for TaskType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Hallucination taxonomy used for gold tags and per-category analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HallucinationCategory {
    Object,
    Attribute,
    SceneText,
    Fact,
}

impl HallucinationCategory {
    pub const ALL: [HallucinationCategory; 4] = [
        HallucinationCategory::Object,
        HallucinationCategory::Attribute,
        HallucinationCategory::SceneText,
        HallucinationCategory::Fact,
    ];

    /// One-letter code used in the per-category charts ("O", "A", "S", "F").
    pub fn code(self) -> &'static str {
        match self {
            HallucinationCategory::Object => "O",
            HallucinationCategory::Attribute => "A",
            HallucinationCategory::SceneText => "S",
            HallucinationCategory::Fact => "F",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            HallucinationCategory::Object => "object",
            HallucinationCategory::Attribute => "attribute",
            HallucinationCategory::SceneText => "scene-text",
            HallucinationCategory::Fact => "fact",
        }
    }
}

impl fmt::Display for HallucinationCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Hallucinatory,
    NonHallucinatory,
}

impl Label {
    pub fn is_hallucinatory(self) -> bool {
        self == Label::Hallucinatory
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Hallucinatory => "hallucinatory",
            Label::NonHallucinatory => "non-hallucinatory",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Canonical key the prompts use to address a claim: `claim1`, `claim2`, ...
pub fn claim_key(index: u32) -> String {
    format!("claim{index}")
}

/// Inverse of [`claim_key`]. Leading zeros and signs are rejected.
pub fn parse_claim_key(key: &str) -> Option<u32> {
    let digits = key.strip_prefix("claim")?;
    if digits.is_empty() || digits.starts_with('0') || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

/// An image addressed by content. `location` is a path or URL and only used
/// to find the bytes; identity is the SHA-256 `digest` of those bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageRef {
    pub location: String,
    pub digest: String,
}

impl ImageRef {
    pub fn from_bytes(location: impl Into<String>, bytes: &[u8]) -> Self {
        ImageRef {
            location: location.into(),
            digest: sha256_hex(bytes),
        }
    }

    /// Reads the file and records its digest. The stored location is the
    /// path as given.
    pub fn from_path(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Ok(Self::from_bytes(path.to_string_lossy(), &bytes))
    }

    pub fn is_remote(&self) -> bool {
        self.location.starts_with("http://") || self.location.starts_with("https://")
    }

    /// Resolves a local location against `root`. Returns `None` for URLs.
    pub fn local_path(&self, root: Option<&Path>) -> Option<PathBuf> {
        if self.is_remote() {
            return None;
        }
        let p = Path::new(&self.location);
        Some(match root {
            Some(root) if p.is_relative() => root.join(p),
            _ => p.to_path_buf(),
        })
    }
}

/// Container formats recognized by [`sniff_image_format`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    Png,
    Jpeg,
    Gif,
    Webp,
    Bmp,
}

impl ImageFormat {
    pub fn mime(self) -> &'static str {
        match self {
            ImageFormat::Png => "image/png",
            ImageFormat::Jpeg => "image/jpeg",
            ImageFormat::Gif => "image/gif",
            ImageFormat::Webp => "image/webp",
            ImageFormat::Bmp => "image/bmp",
        }
    }
}

/// Magic-number check only; pixels are never decoded.
pub fn sniff_image_format(bytes: &[u8]) -> Option<ImageFormat> {
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        Some(ImageFormat::Png)
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        Some(ImageFormat::Jpeg)
    } else if bytes.starts_with(b"GIF87a") || bytes.starts_with(b"GIF89a") {
        Some(ImageFormat::Gif)
    } else if bytes.len() >= 12 && &bytes[0..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
        Some(ImageFormat::Webp)
    } else if bytes.starts_with(b"BM") && bytes.len() > 14 {
        Some(ImageFormat::Bmp)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub index: u32,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<Label>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_categories: Option<BTreeSet<HallucinationCategory>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segment_id: Option<String>,
}

impl Claim {
    pub fn new(index: u32, text: impl Into<String>) -> Self {
        Claim {
            index,
            text: text.into(),
            gold_label: None,
            gold_categories: None,
            segment_id: None,
        }
    }

    pub fn with_gold(mut self, label: Label, categories: &[HallucinationCategory]) -> Self {
        self.gold_label = Some(label);
        self.gold_categories = if categories.is_empty() {
            None
        } else {
            Some(categories.iter().copied().collect())
        };
        self
    }

    pub fn in_segment(mut self, segment_id: impl Into<String>) -> Self {
        self.segment_id = Some(segment_id.into());
        self
    }

    pub fn key(&self) -> String {
        claim_key(self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub id: String,
    pub text: String,
    pub claim_indices: Vec<u32>,
}

/// The unit under test: an image plus the text that goes with it. For
/// image-to-text tasks `text` is the model response; for text-to-image it is
/// the user query that produced the image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTextPair {
    pub id: String,
    pub task: TaskType,
    pub image: ImageRef,
    pub text: String,
    #[serde(default)]
    pub claims: Vec<Claim>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segments: Option<Vec<Segment>>,
}

impl ImageTextPair {
    pub fn claim_texts(&self) -> Vec<&str> {
        self.claims.iter().map(|c| c.text.as_str()).collect()
    }

    /// Segments as used for aggregation. Pairs without explicit segments treat
    /// every claim as its own segment.
    pub fn effective_segments(&self) -> Vec<Vec<u32>> {
        match &self.segments {
            Some(segs) => segs.iter().map(|s| s.claim_indices.clone()).collect(),
            None => self.claims.iter().map(|c| vec![c.index]).collect(),
        }
    }
}

/// Normalized bounding box, every coordinate a fraction of the image size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl NormBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        NormBox { x1, y1, x2, y2 }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        NormBox::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Scales a pixel-space box into the unit square. Coordinates are clamped
    /// to the image.
    pub fn from_pixels(px: [f64; 4], width: f64, height: f64) -> Self {
        let cx = |v: f64| (v / width).clamp(0.0, 1.0);
        let cy = |v: f64| (v / height).clamp(0.0, 1.0);
        NormBox::new(cx(px[0]), cy(px[1]), cx(px[2]), cy(px[3]))
    }
}

pub fn validate_norm_box(b: &NormBox) -> bool {
    let unit = |v: f64| (0.0..=1.0).contains(&v);
    unit(b.x1) && unit(b.y1) && unit(b.x2) && unit(b.y2) && b.x1 < b.x2 && b.y1 < b.y2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEvidence {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: NormBox,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeEvidence {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTextEvidence {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: NormBox,
}

/// Search snippets gathered for one fact question. An empty list records a
/// search miss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactEvidence {
    pub question: String,
    pub snippets: Vec<String>,
}

/// One item of tool output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Evidence {
    Object(ObjectEvidence),
    Attribute(AttributeEvidence),
    SceneText(SceneTextEvidence),
    Fact(FactEvidence),
}

impl Evidence {
    /// Returns true when all required string fields are non-empty and boxes
    /// are valid.
    pub fn is_well_formed(&self) -> bool {
        match self {
            Evidence::Object(o) => !o.label.is_empty() && validate_norm_box(&o.bbox),
            Evidence::Attribute(a) => !a.question.is_empty() && !a.answer.is_empty(),
            Evidence::SceneText(s) => !s.text.is_empty() && validate_norm_box(&s.bbox),
            Evidence::Fact(f) => !f.question.is_empty(),
        }
    }
}

/// Evidence pooled for one pair, one ordered list per tool family.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvidenceBundle {
    pub objects: Vec<ObjectEvidence>,
    pub attributes: Vec<AttributeEvidence>,
    pub scene_text: Vec<SceneTextEvidence>,
    pub facts: Vec<FactEvidence>,
}

impl EvidenceBundle {
    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
            && self.attributes.is_empty()
            && self.scene_text.is_empty()
            && self.facts.is_empty()
    }

    pub fn items(&self) -> Vec<Evidence> {
        let mut out = Vec::new();
        out.extend(self.objects.iter().cloned().map(Evidence::Object));
        out.extend(self.attributes.iter().cloned().map(Evidence::Attribute));
        out.extend(self.scene_text.iter().cloned().map(Evidence::SceneText));
        out.extend(self.facts.iter().cloned().map(Evidence::Fact));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseFlag {
    /// The model output needed repair (code fences, trailing commas, ...).
    Repaired,
    /// No usable verdict was produced; the label is a fallback.
    Unverified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub claim_index: u32,
    pub label: Label,
    pub rationale: String,
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub parse_flags: BTreeSet<ParseFlag>,
}

impl Verdict {
    pub fn new(claim_index: u32, label: Label, rationale: impl Into<String>) -> Self {
        Verdict {
            claim_index,
            label,
            rationale: rationale.into(),
            parse_flags: BTreeSet::new(),
        }
    }

    /// Fallback verdict for a claim the verifier never answered.
    pub fn unverified(claim_index: u32) -> Self {
        let mut v = Verdict::new(claim_index, Label::NonHallucinatory, "");
        v.parse_flags.insert(ParseFlag::Unverified);
        v
    }

    pub fn is_unverified(&self) -> bool {
        self.parse_flags.contains(&ParseFlag::Unverified)
    }
}

/// A single invariant violation found by [`validate_pair`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    EmptyText,
    NoClaims,
    NonContiguousClaimIndices,
    EmptyClaimText(u32),
    CategoriesOnNonHallucinatory(u32),
    EmptySegment(String),
    DuplicateSegmentId(String),
    DanglingClaimReference { segment: String, index: u32 },
    ClaimInMultipleSegments(u32),
    ClaimWithoutSegment(u32),
    SegmentIdMismatch(u32),
    EmptyImageDigest,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "empty pair id"),
            Violation::EmptyText => write!(f, "empty text"),
            Violation::NoClaims => write!(f, "pair has no claims"),
            Violation::NonContiguousClaimIndices => write!(f, "non-contiguous claim indices"),
            Violation::EmptyClaimText(i) => write!(f, "claim {i} has empty text"),
            Violation::CategoriesOnNonHallucinatory(i) => {
                write!(f, "claim {i} carries categories without a hallucinatory gold label")
            }
            Violation::EmptySegment(s) => write!(f, "segment {s} has no claims"),
            Violation::DuplicateSegmentId(s) => write!(f, "duplicate segment id {s}"),
            Violation::DanglingClaimReference { segment, index } => {
                write!(f, "dangling claim reference: segment {segment} references claim {index}")
            }
            Violation::ClaimInMultipleSegments(i) => write!(f, "claim {i} belongs to several segments"),
            Violation::ClaimWithoutSegment(i) => write!(f, "claim {i} belongs to no segment"),
            Violation::SegmentIdMismatch(i) => {
                write!(f, "claim {i} segment_id disagrees with the segment listing it")
            }
            Violation::EmptyImageDigest => write!(f, "image digest is empty"),
        }
    }
}

/// Checks every pair invariant and returns all violations (empty means ok).
///
/// Pairs with zero claims are accepted only when `text` is present; the
/// claims are then expected to come from extraction.
pub fn validate_pair(pair: &ImageTextPair) -> Vec<Violation> {
    let mut out = Vec::new();
    if pair.id.is_empty() {
        out.push(Violation::EmptyId);
    }
    if pair.text.trim().is_empty() {
        out.push(Violation::EmptyText);
    }
    if pair.image.digest.is_empty() {
        out.push(Violation::EmptyImageDigest);
    }
    let n = pair.claims.len() as u32;
    if pair.claims.iter().enumerate().any(|(i, c)| c.index != i as u32 + 1) {
        out.push(Violation::NonContiguousClaimIndices);
    }
    for c in &pair.claims {
        if c.text.trim().is_empty() {
            out.push(Violation::EmptyClaimText(c.index));
        }
        let tagged = c.gold_categories.as_ref().is_some_and(|s| !s.is_empty());
        if tagged && c.gold_label != Some(Label::Hallucinatory) {
            out.push(Violation::CategoriesOnNonHallucinatory(c.index));
        }
    }

    let Some(segments) = &pair.segments else {
        return out;
    };
    let valid: HashSet<u32> = pair.claims.iter().map(|c| c.index).collect();
    let mut seen_ids = HashSet::new();
    let mut owner: std::collections::HashMap<u32, &str> = std::collections::HashMap::new();
    for seg in segments {
        if !seen_ids.insert(seg.id.as_str()) {
            out.push(Violation::DuplicateSegmentId(seg.id.clone()));
        }
        if seg.claim_indices.is_empty() {
            out.push(Violation::EmptySegment(seg.id.clone()));
        }
        for &idx in &seg.claim_indices {
            if !valid.contains(&idx) {
                out.push(Violation::DanglingClaimReference {
                    segment: seg.id.clone(),
                    index: idx,
                });
                continue;
            }
            if owner.insert(idx, seg.id.as_str()).is_some() {
                out.push(Violation::ClaimInMultipleSegments(idx));
            }
        }
    }
    for idx in 1..=n {
        if valid.contains(&idx) && !owner.contains_key(&idx) {
            out.push(Violation::ClaimWithoutSegment(idx));
        }
    }
    for c in &pair.claims {
        if let (Some(sid), Some(owner_id)) = (&c.segment_id, owner.get(&c.index)) {
            if sid != owner_id {
                out.push(Violation::SegmentIdMismatch(c.index));
            }
        }
    }
    out
}
