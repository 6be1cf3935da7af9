//! Content-addressed on-disk store for tool results and model replies.
//!
//! Layout under the root:
//! `index/<kk>/<key digest>.json` holds the key and the content hash,
//! `content/<cc>/<content hash>` holds the value bytes. Reads re-hash the
//! value and report [`CacheError::StoreCorrupt`] on mismatch.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{json_digest, sha256_hex};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub tool_kind: String,
    pub canonical_query: String,
    /// Empty for text-only calls.
    pub image_digest: String,
    pub backend_id: String,
}

impl CacheKey {
    pub fn new(
        tool_kind: impl Into<String>,
        query: &str,
        image_digest: impl Into<String>,
        backend_id: impl Into<String>,
    ) -> Self {
        CacheKey {
            tool_kind: tool_kind.into(),
            canonical_query: query.trim().to_string(),
            image_digest: image_digest.into(),
            backend_id: backend_id.into(),
        }
    }

    /// Key for a label-vocabulary query: labels are trimmed, lowercased,
    /// sorted and deduplicated, so order and case do not matter.
    pub fn for_labels(
        tool_kind: impl Into<String>,
        labels: &[String],
        image_digest: impl Into<String>,
        backend_id: impl Into<String>,
    ) -> Self {
        let mut labels: Vec<String> = labels.iter().map(|l| l.trim().to_lowercase()).collect();
        labels.sort();
        labels.dedup();
        CacheKey::new(tool_kind, &labels.join("."), image_digest, backend_id)
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }

    fn validate(&self) -> Result<(), CacheError> {
        if self.tool_kind.is_empty() || self.canonical_query.is_empty() || self.backend_id.is_empty() {
            return Err(CacheError::InvalidKey(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache entry {key} is corrupt: content hash {expected}, found {actual}")]
    StoreCorrupt {
        key: String,
        expected: String,
        actual: String,
    },
    #[error("invalid cache key {0}")]
    InvalidKey(String),
    #[error("cache I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("cache entry decoding: {0}")]
    Decode(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    key: CacheKey,
    content: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub entries: u64,
    pub bytes: u64,
    pub hits: u64,
    pub misses: u64,
}

#[derive(Debug)]
pub struct CacheStore {
    root: PathBuf,
    hits: AtomicU64,
    misses: AtomicU64,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().expect("cache paths have parents");
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)
}

fn sharded(dir: &Path, digest: &str, ext: &str) -> PathBuf {
    dir.join(&digest[..2]).join(format!("{digest}{ext}"))
}

fn files_under(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    for shard in std::fs::read_dir(dir)? {
        let shard = shard?.path();
        if !shard.is_dir() {
            continue;
        }
        for f in std::fs::read_dir(&shard)? {
            let f = f?.path();
            let hidden = f.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with('.'));
            if f.is_file() && !hidden {
                out.push(f);
            }
        }
    }
    out.sort();
    Ok(out)
}

impl CacheStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CacheError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("index"))?;
        std::fs::create_dir_all(root.join("content"))?;
        Ok(CacheStore {
            root,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn index_path(&self, key_digest: &str) -> PathBuf {
        sharded(&self.root.join("index"), key_digest, ".json")
    }

    fn content_path(&self, hash: &str) -> PathBuf {
        sharded(&self.root.join("content"), hash, "")
    }

    pub fn get(&self, key: &CacheKey) -> Result<Option<Vec<u8>>, CacheError> {
        key.validate()?;
        let digest = key.digest();
        let entry: IndexEntry = match std::fs::read(self.index_path(&digest)) {
            Ok(bytes) => serde_json::from_slice(&bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                return Ok(None);
            }
            Err(e) => return Err(e.into()),
        };
        let bytes = match std::fs::read(self.content_path(&entry.content)) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CacheError::StoreCorrupt {
                    key: digest,
                    expected: entry.content,
                    actual: "missing".into(),
                })
            }
            Err(e) => return Err(e.into()),
        };
        let actual = sha256_hex(&bytes);
        if actual != entry.content {
            return Err(CacheError::StoreCorrupt {
                key: digest,
                expected: entry.content,
                actual,
            });
        }
        self.hits.fetch_add(1, Ordering::Relaxed);
        Ok(Some(bytes))
    }

    pub fn put(&self, key: &CacheKey, value: &[u8]) -> Result<(), CacheError> {
        key.validate()?;
        let hash = sha256_hex(value);
        let content = self.content_path(&hash);
        if !content.exists() {
            write_atomic(&content, value)?;
        }
        let entry = IndexEntry {
            key: key.clone(),
            content: hash,
        };
        write_atomic(&self.index_path(&key.digest()), &serde_json::to_vec(&entry)?)?;
        Ok(())
    }

    pub fn get_json<T: DeserializeOwned>(&self, key: &CacheKey) -> Result<Option<T>, CacheError> {
        match self.get(key)? {
            Some(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            None => Ok(None),
        }
    }

    pub fn put_json<T: Serialize + ?Sized>(&self, key: &CacheKey, value: &T) -> Result<(), CacheError> {
        self.put(key, &serde_json::to_vec(value)?)
    }

    fn saved_counters(&self) -> Result<(u64, u64), CacheError> {
        match std::fs::read(self.root.join("counters.json")) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok((0, 0)),
            Err(e) => Err(e.into()),
        }
    }

    /// Adds this session's hit and miss counts to the persisted totals.
    pub fn flush_counters(&self) -> Result<(), CacheError> {
        let (hits, misses) = self.saved_counters()?;
        let hits = hits + self.hits.swap(0, Ordering::Relaxed);
        let misses = misses + self.misses.swap(0, Ordering::Relaxed);
        write_atomic(&self.root.join("counters.json"), &serde_json::to_vec(&(hits, misses))?)?;
        Ok(())
    }

    /// Entry and byte counts from disk; hit and miss counts persisted by
    /// earlier sessions plus this one.
    pub fn stats(&self) -> Result<CacheStats, CacheError> {
        let entries = files_under(&self.root.join("index"))?.len() as u64;
        let mut bytes = 0;
        for f in files_under(&self.root.join("content"))? {
            bytes += std::fs::metadata(f)?.len();
        }
        let (hits, misses) = self.saved_counters()?;
        Ok(CacheStats {
            entries,
            bytes,
            hits: hits + self.hits.load(Ordering::Relaxed),
            misses: misses + self.misses.load(Ordering::Relaxed),
        })
    }

    /// Entry counts grouped by tool kind.
    pub fn entries_by_kind(&self) -> Result<std::collections::BTreeMap<String, u64>, CacheError> {
        let mut out = std::collections::BTreeMap::new();
        for f in files_under(&self.root.join("index"))? {
            let entry: IndexEntry = serde_json::from_slice(&std::fs::read(f)?)?;
            *out.entry(entry.key.tool_kind).or_insert(0) += 1;
        }
        Ok(out)
    }

    /// Removes every entry. Returns how many index entries were dropped.
    pub fn clear(&self) -> Result<u64, CacheError> {
        let n = files_under(&self.root.join("index"))?.len() as u64;
        for sub in ["index", "content"] {
            let dir = self.root.join(sub);
            if dir.exists() {
                std::fs::remove_dir_all(&dir)?;
            }
            std::fs::create_dir_all(&dir)?;
        }
        let counters = self.root.join("counters.json");
        if counters.exists() {
            std::fs::remove_file(counters)?;
        }
        self.hits.store(0, Ordering::Relaxed);
        self.misses.store(0, Ordering::Relaxed);
        Ok(n)
    }
}
