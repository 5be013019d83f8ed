use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    value: String,
}

/// Response cache keyed by request hash, optionally persisted as JSONL.
pub struct ResponseCache {
    entries: Mutex<HashMap<String, String>>,
    file: Option<(PathBuf, Mutex<File>)>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache { entries: Mutex::new(HashMap::new()), file: None }
    }

    /// Open (or create) a cache file and load the entries already in it.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                // a torn final line from an interrupted run is ignored
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert(entry.key, entry.value);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ResponseCache { entries: Mutex::new(entries), file: Some((path.to_path_buf(), Mutex::new(file))) })
    }

    pub fn get(&self, key: &str) -> Option<String> {
        self.entries.lock().expect("cache lock").get(key).cloned()
    }

    pub fn put(&self, key: &str, value: &str) -> std::io::Result<()> {
        self.entries.lock().expect("cache lock").insert(key.to_string(), value.to_string());
        if let Some((_, file)) = &self.file {
            let line = serde_json::to_string(&CacheLine { key: key.to_string(), value: value.to_string() })?;
            let mut file = file.lock().expect("cache file lock");
            writeln!(file, "{line}")?;
            file.flush()?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let cache = ResponseCache::open(&path).unwrap();
            cache.put("k1", "v1\nmultiline").unwrap();
            cache.put("k2", "v2").unwrap();
        }
        let cache = ResponseCache::open(&path).unwrap();
        assert_eq!(cache.get("k1").as_deref(), Some("v1\nmultiline"));
        assert_eq!(cache.len(), 2);
    }
}
