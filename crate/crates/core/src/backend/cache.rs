use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{image_digest, CacheKey, ChatParams, ChatRequest};

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// One cached response, stored as `<dir>/<key>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedEntry {
    pub key: CacheKey,
    pub model_id: String,
    pub text: String,
    /// Human-readable summary of the request; images appear as digests.
    pub request: CachedRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedRequest {
    pub messages: Vec<CachedMessage>,
    pub params: ChatParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CachedMessage {
    pub role: String,
    pub text: String,
    pub image_digests: Vec<String>,
}

impl CachedEntry {
    pub fn new(key: &CacheKey, req: &ChatRequest, text: &str) -> Self {
        Self {
            key: key.clone(),
            model_id: req.model_id.clone(),
            text: text.to_string(),
            request: CachedRequest {
                messages: req
                    .messages
                    .iter()
                    .map(|m| CachedMessage {
                        role: m.role.as_str().to_string(),
                        text: m.text.clone(),
                        image_digests: m.images.iter().map(|i| image_digest(i)).collect(),
                    })
                    .collect(),
                params: req.params,
            },
        }
    }
}

/// Directory of JSON files, one per cache key. Writes go to a temp file in
/// the same directory and are renamed into place.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn open(dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.as_str()))
    }

    pub fn get(&self, key: &CacheKey) -> std::io::Result<Option<CachedEntry>> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e),
        };
        match serde_json::from_slice::<CachedEntry>(&bytes) {
            Ok(entry) if &entry.key == key => Ok(Some(entry)),
            Ok(_) | Err(_) => {
                log::warn!("ignoring corrupt cache entry {}", path.display());
                Ok(None)
            }
        }
    }

    pub fn put(&self, key: &CacheKey, entry: &CachedEntry) -> std::io::Result<()> {
        let tmp = self.dir.join(format!(
            ".{}.{}.{}.tmp",
            key.as_str(),
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            serde_json::to_writer_pretty(&mut f, entry)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.path_for(key))
    }

    /// Keys currently stored, sorted.
    pub fn keys(&self) -> std::io::Result<Vec<CacheKey>> {
        let mut keys = Vec::new();
        for entry in fs::read_dir(&self.dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".json") {
                if !stem.starts_with('.') {
                    keys.push(CacheKey(stem.to_string()));
                }
            }
        }
        keys.sort();
        Ok(keys)
    }

    pub fn len(&self) -> std::io::Result<usize> {
        self.keys().map(|k| k.len())
    }

    pub fn is_empty(&self) -> std::io::Result<bool> {
        self.len().map(|n| n == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::Message;

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path().join("c")).unwrap();
        let req = ChatRequest::new("m", vec![Message::user("hello")], ChatParams::default());
        let key = req.cache_key();
        assert!(cache.get(&key).unwrap().is_none());
        cache.put(&key, &CachedEntry::new(&key, &req, "Yes.")).unwrap();
        assert_eq!(cache.get(&key).unwrap().unwrap().text, "Yes.");
        assert_eq!(cache.keys().unwrap(), vec![key]);
    }

    #[test]
    fn corrupt_entry_is_a_miss() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::open(dir.path()).unwrap();
        let key = CacheKey("abc".into());
        fs::write(dir.path().join("abc.json"), "{not json").unwrap();
        assert!(cache.get(&key).unwrap().is_none());
    }
}
