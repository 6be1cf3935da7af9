use unihd::cache::{CacheKey, CacheStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let store = CacheStore::open(dir.path())?;

    let labels = vec!["Umbrella".to_string(), "chair".to_string(), "umbrella".to_string()];
    let key = CacheKey::for_labels("object", &labels, "567295d5e1fa6a33127cd9e1394bb634d20bc7b3cd669a765b310628da4fe445", "mock");
    println!("key {} -> {}", key.canonical_query, key.digest());

    println!("first lookup: {:?}", store.get(&key)?);
    store.put_json(&key, &serde_json::json!([{"label": "chair", "bbox": [0.697, 0.56, 0.752, 0.65]}]))?;
    let hit: Option<serde_json::Value> = store.get_json(&key)?;
    println!("second lookup: {}", hit.map(|v| v.to_string()).unwrap_or_default());

    store.flush_counters()?;
    let stats = CacheStore::open(dir.path())?.stats()?;
    println!("entries {} bytes {} hits {} misses {}", stats.entries, stats.bytes, stats.hits, stats.misses);
    println!("cleared {}", store.clear()?);
    Ok(())
}
