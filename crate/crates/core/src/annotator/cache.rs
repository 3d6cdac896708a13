use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::PromptKind;
use crate::error::{Result, SfbcError};
use crate::io;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CacheKey {
    pub dataset: String,
    pub traj_id: u32,
    pub i: usize,
    pub segment_length: usize,
    pub kind: PromptKind,
    pub backend: String,
    pub stride: usize,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    #[serde(flatten)]
    key: CacheKey,
    p_no: f64,
}

/// Append-only store of backend answers. Writes are serialized; reads go to an
/// in-memory index loaded at open.
#[derive(Debug)]
pub struct AnnotationCache {
    entries: Mutex<HashMap<CacheKey, f64>>,
    sink: Option<(PathBuf, Mutex<BufWriter<File>>)>,
}

impl AnnotationCache {
    pub fn in_memory() -> Self {
        AnnotationCache {
            entries: Mutex::new(HashMap::new()),
            sink: None,
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            for line in io::read_jsonl::<CacheLine>(path)? {
                entries.insert(line.key, line.p_no);
            }
        } else if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| SfbcError::io(parent, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| SfbcError::io(path, e))?;
        Ok(AnnotationCache {
            entries: Mutex::new(entries),
            sink: Some((path.to_path_buf(), Mutex::new(BufWriter::new(file)))),
        })
    }

    pub fn get(&self, key: &CacheKey) -> Option<f64> {
        self.entries.lock().expect("cache lock").get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a value, flushing it to disk before returning.
    pub fn insert(&self, key: CacheKey, p_no: f64) -> Result<()> {
        if let Some((path, sink)) = &self.sink {
            let mut line = serde_json::to_vec(&CacheLine {
                key: key.clone(),
                p_no,
            })?;
            line.push(b'\n');
            let mut w = sink.lock().expect("cache sink lock");
            w.write_all(&line).map_err(|e| SfbcError::io(path, e))?;
            w.flush().map_err(|e| SfbcError::io(path, e))?;
        }
        self.entries.lock().expect("cache lock").insert(key, p_no);
        Ok(())
    }
}
