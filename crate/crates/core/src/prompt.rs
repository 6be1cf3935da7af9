//! Prompt templates and their rendering.
//!
//! Templates are UTF-8 text fixtures under `templates/`, one per
//! [`TemplateId`], with a `manifest.json` pinning the SHA-256 of every file.
//! A fixture has the layout
//!
//! ```text
//! SYSTEM:
//! <system text>
//!
//! USER:
//! <user text>
//! ```
//!
//! `{name}` marks a slot, `{{` and `}}` are literal braces. Nothing else is
//! interpreted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::sha256_hex;
use crate::model::{claim_key, ImageRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateId {
    ObjectQuery,
    AttributeQuery,
    SceneTextQuery,
    FactQuery,
    VerifyImageToText,
    VerifyTextToImage,
    ClaimExtraction,
    AttributeAnswer,
    SelfCheckZeroShot,
    SelfCheckTwoShot,
}

impl TemplateId {
    pub const ALL: [TemplateId; 10] = [
        TemplateId::ObjectQuery,
        TemplateId::AttributeQuery,
        TemplateId::SceneTextQuery,
        TemplateId::FactQuery,
        TemplateId::VerifyImageToText,
        TemplateId::VerifyTextToImage,
        TemplateId::ClaimExtraction,
        TemplateId::AttributeAnswer,
        TemplateId::SelfCheckZeroShot,
        TemplateId::SelfCheckTwoShot,
    ];

    /// The six templates transcribed from the published appendix.
    pub const PUBLISHED: [TemplateId; 6] = [
        TemplateId::ObjectQuery,
        TemplateId::AttributeQuery,
        TemplateId::SceneTextQuery,
        TemplateId::FactQuery,
        TemplateId::VerifyImageToText,
        TemplateId::VerifyTextToImage,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            TemplateId::ObjectQuery => "object_query.txt",
            TemplateId::AttributeQuery => "attribute_query.txt",
            TemplateId::SceneTextQuery => "scene_text_query.txt",
            TemplateId::FactQuery => "fact_query.txt",
            TemplateId::VerifyImageToText => "verify_image_to_text.txt",
            TemplateId::VerifyTextToImage => "verify_text_to_image.txt",
            TemplateId::ClaimExtraction => "claim_extraction.txt",
            TemplateId::AttributeAnswer => "attribute_answer.txt",
            TemplateId::SelfCheckZeroShot => "self_check_zero_shot.txt",
            TemplateId::SelfCheckTwoShot => "self_check_two_shot.txt",
        }
    }

    pub fn is_published(self) -> bool {
        Self::PUBLISHED.contains(&self)
    }

    /// Whether the rendered prompt carries images.
    pub fn takes_images(self) -> bool {
        matches!(
            self,
            TemplateId::VerifyImageToText
                | TemplateId::VerifyTextToImage
                | TemplateId::AttributeAnswer
                | TemplateId::SelfCheckZeroShot
                | TemplateId::SelfCheckTwoShot
        )
    }

    fn builtin_source(self) -> &'static str {
        match self {
            TemplateId::ObjectQuery => include_str!("../templates/object_query.txt"),
            TemplateId::AttributeQuery => include_str!("../templates/attribute_query.txt"),
            TemplateId::SceneTextQuery => include_str!("../templates/scene_text_query.txt"),
            TemplateId::FactQuery => include_str!("../templates/fact_query.txt"),
            TemplateId::VerifyImageToText => include_str!("../templates/verify_image_to_text.txt"),
            TemplateId::VerifyTextToImage => include_str!("../templates/verify_text_to_image.txt"),
            TemplateId::ClaimExtraction => include_str!("../templates/claim_extraction.txt"),
            TemplateId::AttributeAnswer => include_str!("../templates/attribute_answer.txt"),
            TemplateId::SelfCheckZeroShot => include_str!("../templates/self_check_zero_shot.txt"),
            TemplateId::SelfCheckTwoShot => include_str!("../templates/self_check_two_shot.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.file_name().trim_end_matches(".txt"))
    }
}

const BUILTIN_MANIFEST: &str = include_str!("../templates/manifest.json");

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("claim list is empty")]
    EmptyClaims,
    #[error("missing slot {{{0}}}")]
    MissingSlot(String),
    #[error("unknown slot {{{0}}}")]
    UnknownSlot(String),
    #[error("template {template} expects {expected} images, got {got}")]
    AttachmentMismatch {
        template: TemplateId,
        expected: &'static str,
        got: usize,
    },
    #[error("template {file} is malformed: {reason}")]
    Malformed { file: String, reason: String },
    #[error("template {file} digest mismatch: manifest {expected}, file {actual}")]
    DigestMismatch {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("template {0} is not listed in the manifest")]
    NotInManifest(String),
    #[error("reading templates: {0}")]
    Io(#[from] std::io::Error),
    #[error("reading template manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemplateManifest {
    pub templates: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    /// `appendix` for published templates, `authored` for the rest.
    pub origin: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone)]
pub struct Template {
    id: TemplateId,
    digest: String,
    system: Vec<Piece>,
    user: Vec<Piece>,
    slots: BTreeSet<String>,
}

impl Template {
    pub fn parse(id: TemplateId, source: &str) -> Result<Self, PromptError> {
        let malformed = |reason: &str| PromptError::Malformed {
            file: id.file_name().to_string(),
            reason: reason.to_string(),
        };
        let body = source
            .strip_prefix("SYSTEM:\n")
            .ok_or_else(|| malformed("missing SYSTEM: header"))?;
        let (system, user) = body
            .split_once("\n\nUSER:\n")
            .ok_or_else(|| malformed("missing USER: section"))?;
        let user = user.strip_suffix('\n').unwrap_or(user);
        let system = parse_pieces(system).map_err(|r| malformed(&r))?;
        let user = parse_pieces(user).map_err(|r| malformed(&r))?;
        let slots = system
            .iter()
            .chain(&user)
            .filter_map(|p| match p {
                Piece::Slot(s) => Some(s.clone()),
                Piece::Text(_) => None,
            })
            .collect();
        Ok(Template {
            id,
            digest: sha256_hex(source),
            system,
            user,
            slots,
        })
    }

    pub fn id(&self) -> TemplateId {
        self.id
    }

    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn slots(&self) -> &BTreeSet<String> {
        &self.slots
    }

    /// The literal text fragments of the user section, in order, with slots
    /// removed. Used to check that rendering leaves template bytes intact.
    pub fn user_literals(&self) -> Vec<&str> {
        self.user
            .iter()
            .filter_map(|p| match p {
                Piece::Text(t) => Some(t.as_str()),
                Piece::Slot(_) => None,
            })
            .collect()
    }

    pub fn render(&self, bindings: &Bindings, images: &[ImageRef]) -> Result<RenderedPrompt, PromptError> {
        for slot in &self.slots {
            if !bindings.0.contains_key(slot) {
                return Err(PromptError::MissingSlot(slot.clone()));
            }
        }
        if let Some(extra) = bindings.0.keys().find(|k| !self.slots.contains(*k)) {
            return Err(PromptError::UnknownSlot(extra.clone()));
        }
        match (self.id.takes_images(), images.len()) {
            (true, 0) => {
                return Err(PromptError::AttachmentMismatch {
                    template: self.id,
                    expected: "at least one",
                    got: 0,
                })
            }
            (false, n) if n > 0 => {
                return Err(PromptError::AttachmentMismatch {
                    template: self.id,
                    expected: "no",
                    got: n,
                })
            }
            _ => {}
        }
        let fill = |pieces: &[Piece]| {
            let mut out = String::new();
            for p in pieces {
                match p {
                    Piece::Text(t) => out.push_str(t),
                    Piece::Slot(s) => out.push_str(&bindings.0[s]),
                }
            }
            out
        };
        Ok(RenderedPrompt {
            template: self.id,
            system: fill(&self.system),
            user: fill(&self.user),
            attachments: images.to_vec(),
        })
    }
}

fn parse_pieces(src: &str) -> Result<Vec<Piece>, String> {
    let mut pieces = Vec::new();
    let mut text = String::new();
    let mut chars = src.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                text.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                text.push('}');
            }
            '{' => {
                let mut name = String::new();
                loop {
                    match chars.next() {
                        Some('}') => break,
                        Some(ch) if ch.is_ascii_lowercase() || ch == '_' => name.push(ch),
                        _ => return Err(format!("unterminated or invalid slot after {{{name}")),
                    }
                }
                if name.is_empty() {
                    return Err("empty slot name".into());
                }
                if !text.is_empty() {
                    pieces.push(Piece::Text(std::mem::take(&mut text)));
                }
                pieces.push(Piece::Slot(name));
            }
            '}' => return Err("unmatched '}'".into()),
            _ => text.push(c),
        }
    }
    if !text.is_empty() {
        pieces.push(Piece::Text(text));
    }
    Ok(pieces)
}

/// Slot values for one rendering.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bindings(BTreeMap<String, String>);

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, slot: &str, value: impl Into<String>) -> Self {
        self.0.insert(slot.to_string(), value.into());
        self
    }

    pub fn insert(&mut self, slot: &str, value: impl Into<String>) {
        self.0.insert(slot.to_string(), value.into());
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template: TemplateId,
    pub system: String,
    pub user: String,
    pub attachments: Vec<ImageRef>,
}

/// Formats claims as `claimK: <text>` lines, K counting from 1.
pub fn render_claim_list<S: AsRef<str>>(claims: &[S]) -> Result<String, PromptError> {
    if claims.is_empty() {
        return Err(PromptError::EmptyClaims);
    }
    Ok(claims
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}: {}", claim_key(i as u32 + 1), c.as_ref()))
        .collect::<Vec<_>>()
        .join("\n"))
}

/// All templates, parsed and checked against their pinned digests.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    templates: BTreeMap<TemplateId, Template>,
}

impl TemplateStore {
    /// The fixtures compiled into the crate.
    pub fn builtin() -> Result<Self, PromptError> {
        let manifest: TemplateManifest = serde_json::from_str(BUILTIN_MANIFEST)?;
        Self::assemble(&manifest, |id| Ok(id.builtin_source().to_string()))
    }

    /// Loads fixtures and manifest from a directory laid out like `templates/`.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let manifest: TemplateManifest =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
        Self::assemble(&manifest, |id| Ok(std::fs::read_to_string(dir.join(id.file_name()))?))
    }

    fn assemble(
        manifest: &TemplateManifest,
        mut source: impl FnMut(TemplateId) -> Result<String, PromptError>,
    ) -> Result<Self, PromptError> {
        let mut templates = BTreeMap::new();
        for id in TemplateId::ALL {
            let entry = manifest
                .templates
                .iter()
                .find(|e| e.file == id.file_name())
                .ok_or_else(|| PromptError::NotInManifest(id.file_name().to_string()))?;
            let text = source(id)?;
            let actual = sha256_hex(&text);
            if actual != entry.sha256 {
                return Err(PromptError::DigestMismatch {
                    file: entry.file.clone(),
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
            templates.insert(id, Template::parse(id, &text)?);
        }
        Ok(TemplateStore { templates })
    }

    pub fn get(&self, id: TemplateId) -> &Template {
        &self.templates[&id]
    }

    pub fn render(&self, id: TemplateId, bindings: &Bindings, images: &[ImageRef]) -> Result<RenderedPrompt, PromptError> {
        self.get(id).render(bindings, images)
    }

    /// File name to digest, for run manifests.
    pub fn digests(&self) -> BTreeMap<String, String> {
        self.templates
            .values()
            .map(|t| (t.id.file_name().to_string(), t.digest.clone()))
            .collect()
    }
}
