//! Response cache keyed by endpoint, decoding parameters, and prompt bytes.
//! Hits never re-issue endpoint calls; entries are never replaced within a
//! run. An optional directory layer persists entries across processes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use crate::modelclient::{DecodingParams, ModelResponse};

pub struct ResponseCache {
    mem: Mutex<BTreeMap<String, ModelResponse>>,
    dir: Option<PathBuf>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            mem: Mutex::new(BTreeMap::new()),
            dir: None,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Cache backed by one JSON file per key under `dir`.
    pub fn at_dir(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut cache = Self::in_memory();
        cache.dir = Some(dir.to_path_buf());
        Ok(cache)
    }

    /// Stable content key: a digest over endpoint id, decoding parameters,
    /// and the exact prompt text, so any change to what the endpoint would
    /// see produces a different key.
    pub fn key(endpoint_id: &str, decoding: &DecodingParams, prompt_text: &str) -> String {
        let canonical = serde_json::to_string(&(endpoint_id, decoding, prompt_text))
            .expect("key parts serialize");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn get(&self, key: &str) -> Option<ModelResponse> {
        if let Some(found) = self.mem.lock().unwrap().get(key) {
            return Some(found.clone());
        }
        let dir = self.dir.as_ref()?;
        let text = fs::read_to_string(dir.join(format!("{key}.json"))).ok()?;
        let resp: ModelResponse = serde_json::from_str(&text).ok()?;
        self.mem.lock().unwrap().entry(key.to_owned()).or_insert_with(|| resp.clone());
        Some(resp)
    }

    /// First write wins; a second insert under the same key is ignored.
    pub fn insert(&self, key: &str, resp: &ModelResponse) {
        let mut mem = self.mem.lock().unwrap();
        if mem.contains_key(key) {
            return;
        }
        mem.insert(key.to_owned(), resp.clone());
        drop(mem);
        if let Some(dir) = &self.dir {
            let text = serde_json::to_string(resp).expect("response serializes");
            let _ = fs::write(dir.join(format!("{key}.json")), text);
        }
    }

    /// Returns the cached response, or runs `fetch` and stores its result.
    /// The boolean reports whether this was a hit.
    pub fn get_or_insert_with<E>(
        &self,
        key: &str,
        fetch: impl FnOnce() -> Result<ModelResponse, E>,
    ) -> Result<(ModelResponse, bool), E> {
        if let Some(found) = self.get(key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok((found, true));
        }
        let resp = fetch()?;
        self.misses.fetch_add(1, Ordering::SeqCst);
        self.insert(key, &resp);
        Ok((resp, false))
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.mem.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(text: &str) -> ModelResponse {
        ModelResponse {
            raw_text: text.to_owned(),
            latency_ms: 5,
            endpoint_id: "ep".to_owned(),
            attempt_count: 1,
        }
    }

    #[test]
    fn key_separates_endpoint_decoding_and_prompt() {
        let d = DecodingParams::default();
        let warm = DecodingParams { temperature: 0.7, ..Default::default() };
        let base = ResponseCache::key("ep1", &d, "prompt");
        assert_eq!(base, ResponseCache::key("ep1", &d, "prompt"));
        assert_ne!(base, ResponseCache::key("ep2", &d, "prompt"));
        assert_ne!(base, ResponseCache::key("ep1", &warm, "prompt"));
        assert_ne!(base, ResponseCache::key("ep1", &d, "prompt!"));
    }

    #[test]
    fn get_or_insert_counts_hits() {
        let cache = ResponseCache::in_memory();
        let (first, hit) = cache
            .get_or_insert_with::<()>("k", || Ok(resp("a")))
            .unwrap();
        assert!(!hit);
        assert_eq!(first.raw_text, "a");
        let (second, hit) = cache
            .get_or_insert_with::<()>("k", || panic!("hit must not fetch"))
            .unwrap();
        assert!(hit);
        assert_eq!(second.raw_text, "a");
        assert_eq!((cache.hits(), cache.misses()), (1, 1));
    }

    #[test]
    fn insert_is_first_write_wins() {
        let cache = ResponseCache::in_memory();
        cache.insert("k", &resp("first"));
        cache.insert("k", &resp("second"));
        assert_eq!(cache.get("k").unwrap().raw_text, "first");
        assert_eq!(cache.len(), 1);
    }

    #[test]
    fn failed_fetch_is_not_cached() {
        let cache = ResponseCache::in_memory();
        let err: Result<_, String> = cache.get_or_insert_with("k", || Err("boom".to_owned()));
        assert!(err.is_err());
        assert!(cache.get("k").is_none());
    }

    #[test]
    fn directory_layer_survives_process_restart() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cache = ResponseCache::at_dir(dir.path()).unwrap();
            cache.insert("key1", &resp("persisted"));
        }
        let reopened = ResponseCache::at_dir(dir.path()).unwrap();
        assert_eq!(reopened.get("key1").unwrap().raw_text, "persisted");
        let (got, hit) = reopened
            .get_or_insert_with::<()>("key1", || panic!("disk hit must not fetch"))
            .unwrap();
        assert!(hit);
        assert_eq!(got.raw_text, "persisted");
    }
}
