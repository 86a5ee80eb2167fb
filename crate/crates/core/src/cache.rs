//! Content-addressed artifact cache. Each entry is a directory of named
//! files under `root/<stage>/<key>`, published atomically by renaming a
//! fully written temporary directory into place.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::Mode;
use crate::stage::Stage;

pub const RECORD_FILE: &str = "record.json";

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("cache io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("cache entry {0} is corrupt: {1}")]
    Corrupt(String, String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CacheError + '_ {
    move |source| CacheError::Io { path: path.display().to_string(), source }
}

/// 256-bit digest over a canonical JSON rendering of the key fields.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey(pub String);

impl std::fmt::Display for CacheKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// `input_hashes` order matters; `mode` is `None` for stages whose output
/// does not depend on it.
pub fn cache_key(stage: Stage, input_hashes: &[&str], config_hash: &str, mode: Option<Mode>, seed: u64) -> CacheKey {
    let canonical = json!({
        "stage": stage.as_str(),
        "inputs": input_hashes,
        "config": config_hash,
        "mode": mode.map(Mode::as_str),
        "seed": seed,
    });
    CacheKey(hex::encode(Sha256::digest(canonical.to_string().as_bytes())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub input_hash: String,
    pub config_hash: String,
    pub artifact_path: String,
    pub provider_id: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub status: String,
}

#[derive(Debug, Clone)]
pub struct Cache {
    root: PathBuf,
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl Cache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entry_dir(&self, stage: Stage, key: &CacheKey) -> PathBuf {
        self.root.join(stage.as_str()).join(&key.0)
    }

    pub fn contains(&self, stage: Stage, key: &CacheKey) -> bool {
        self.entry_dir(stage, key).join(RECORD_FILE).is_file()
    }

    /// All files of a published entry, or `None` when absent.
    pub fn get(&self, stage: Stage, key: &CacheKey, names: &[&str]) -> Result<Option<Vec<Vec<u8>>>, CacheError> {
        if !self.contains(stage, key) {
            return Ok(None);
        }
        let dir = self.entry_dir(stage, key);
        let mut out = Vec::with_capacity(names.len());
        for name in names {
            let path = dir.join(name);
            match fs::read(&path) {
                Ok(b) => out.push(b),
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    return Err(CacheError::Corrupt(key.0.clone(), format!("missing {name}")))
                }
                Err(e) => return Err(io_err(&path)(e)),
            }
        }
        Ok(Some(out))
    }

    /// Publishes an entry. If another writer got there first, its entry is kept.
    pub fn put(
        &self,
        stage: Stage,
        key: &CacheKey,
        files: &[(&str, &[u8])],
        record: &StageRecord,
    ) -> Result<PathBuf, CacheError> {
        let final_dir = self.entry_dir(stage, key);
        let parent = final_dir.parent().expect("entry has a parent");
        fs::create_dir_all(parent).map_err(io_err(parent))?;
        let tmp = parent.join(format!(
            ".tmp-{}-{}-{}",
            key.0,
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        fs::create_dir_all(&tmp).map_err(io_err(&tmp))?;
        for (name, bytes) in files {
            let p = tmp.join(name);
            fs::write(&p, bytes).map_err(io_err(&p))?;
        }
        let rec = serde_json::to_vec_pretty(record).expect("record serializes");
        let p = tmp.join(RECORD_FILE);
        fs::write(&p, rec).map_err(io_err(&p))?;
        if let Err(e) = fs::rename(&tmp, &final_dir) {
            let _ = fs::remove_dir_all(&tmp);
            if !self.contains(stage, key) {
                return Err(io_err(&final_dir)(e));
            }
        }
        Ok(final_dir)
    }
}

pub fn now_secs() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> StageRecord {
        StageRecord {
            stage: Stage::Reason,
            input_hash: "in".into(),
            config_hash: "cfg".into(),
            artifact_path: "description.txt".into(),
            provider_id: "p".into(),
            timestamp: 0,
            status: "ok".into(),
        }
    }

    #[test]
    fn key_sensitivity() {
        let k = |mode, seed| cache_key(Stage::To3d, &["a", "b"], "c", mode, seed);
        assert_eq!(k(Some(Mode::Full), 1), k(Some(Mode::Full), 1));
        assert_ne!(k(Some(Mode::Full), 1), k(Some(Mode::Direct), 1));
        assert_ne!(k(Some(Mode::Full), 1), k(Some(Mode::Full), 2));
        assert_ne!(k(None, 1), k(Some(Mode::Full), 1));
        assert_ne!(
            cache_key(Stage::To3d, &["a", "b"], "c", None, 0),
            cache_key(Stage::To3d, &["b", "a"], "c", None, 0)
        );
        assert_ne!(cache_key(Stage::To3d, &["a"], "c", None, 0), cache_key(Stage::Render, &["a"], "c", None, 0));
        assert_eq!(k(None, 0).0.len(), 64);
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Cache::new(dir.path());
        let key = cache_key(Stage::Reason, &["x"], "y", None, 0);
        assert!(cache.get(Stage::Reason, &key, &["a"]).unwrap().is_none());
        cache.put(Stage::Reason, &key, &[("a", b"hello"), ("b", b"")], &record()).unwrap();
        let got = cache.get(Stage::Reason, &key, &["a", "b"]).unwrap().unwrap();
        assert_eq!(got, vec![b"hello".to_vec(), vec![]]);
        // a second publish keeps the first entry
        cache.put(Stage::Reason, &key, &[("a", b"other")], &record()).unwrap();
        assert_eq!(cache.get(Stage::Reason, &key, &["a"]).unwrap().unwrap()[0], b"hello");
        assert!(matches!(cache.get(Stage::Reason, &key, &["zzz"]), Err(CacheError::Corrupt(..))));
        let leftovers = fs::read_dir(dir.path().join("reason")).unwrap().count();
        assert_eq!(leftovers, 1);
    }
}
