use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{CompletionRequest, LlmError};

/// One stored completion, `<key>.json` under the cache directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub model_name: String,
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub stop: Vec<String>,
    pub raw_text: String,
}

#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn io_err(e: impl std::fmt::Display) -> LlmError {
    LlmError::Cache(e.to_string())
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err)?;
        Ok(ResponseCache { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Result<Option<CacheEntry>, LlmError> {
        match fs::read_to_string(self.path(key)) {
            Ok(s) => serde_json::from_str(&s).map(Some).map_err(io_err),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(e)),
        }
    }

    /// Writes via a temporary file and rename so readers never see a
    /// partial entry.
    pub fn put(&self, key: &str, request: &CompletionRequest, raw_text: &str) -> Result<(), LlmError> {
        let entry = CacheEntry {
            key: key.to_string(),
            model_name: request.model_name.clone(),
            prompt: request.prompt.clone(),
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            stop: request.stop.clone(),
            raw_text: raw_text.to_string(),
        };
        let body = serde_json::to_vec_pretty(&entry).map_err(io_err)?;
        let n = TMP_COUNTER.fetch_add(1, Ordering::SeqCst);
        let tmp = self
            .dir
            .join(format!(".{key}.{}.{n}.tmp", std::process::id()));
        let mut f = fs::File::create(&tmp).map_err(io_err)?;
        f.write_all(&body).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        drop(f);
        fs::rename(&tmp, self.path(key)).map_err(io_err)
    }

    /// All entries, sorted by key.
    pub fn entries(&self) -> Result<Vec<CacheEntry>, LlmError> {
        let mut out = Vec::new();
        for item in fs::read_dir(&self.dir).map_err(io_err)? {
            let path = item.map_err(io_err)?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.starts_with('.') || !name.ends_with(".json") {
                continue;
            }
            let s = fs::read_to_string(&path).map_err(io_err)?;
            out.push(serde_json::from_str::<CacheEntry>(&s).map_err(io_err)?);
        }
        out.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(out)
    }

    pub fn len(&self) -> Result<usize, LlmError> {
        Ok(self.entries()?.len())
    }

    pub fn is_empty(&self) -> Result<bool, LlmError> {
        Ok(self.len()? == 0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llmclient::cache_key;

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path().join("c")).unwrap();
        let req = CompletionRequest::new("m", "p");
        let key = cache_key(&req);
        assert_eq!(cache.get(&key).unwrap(), None);
        cache.put(&key, &req, "A: Yes").unwrap();
        let e = cache.get(&key).unwrap().unwrap();
        assert_eq!(e.raw_text, "A: Yes");
        assert_eq!(e.prompt, "p");
        assert_eq!(cache.len().unwrap(), 1);
        // no temp files left behind
        let names: Vec<_> = fs::read_dir(cache.dir()).unwrap().collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn corrupt_entry_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ResponseCache::new(dir.path()).unwrap();
        fs::write(dir.path().join("abc.json"), "{not json").unwrap();
        assert!(matches!(cache.get("abc"), Err(LlmError::Cache(_))));
    }
}
