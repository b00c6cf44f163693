//! Durable label store: one JSON object per line, fsynced before a write is
//! acknowledged. The file is readable by the dataset label loader.

use std::collections::HashSet;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tightbox_core::dataset::LabelSource;
use tightbox_core::geometry::BBox;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("label store {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("label store {path} line {line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredLabel {
    pub id: String,
    pub image: String,
    pub class: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub source: LabelSource,
    pub visible: bool,
    /// Nanoseconds since the Unix epoch at insertion.
    pub timestamp: u128,
}

#[derive(Debug)]
struct Inner {
    file: File,
    labels: Vec<StoredLabel>,
    ids: HashSet<String>,
}

#[derive(Debug)]
pub struct LabelStore {
    path: PathBuf,
    inner: Mutex<Inner>,
}

fn label_id(image: &str, bbox: &BBox, class: &str, timestamp: u128, nonce: u32) -> String {
    let mut h = Sha256::new();
    h.update(image.as_bytes());
    h.update([0]);
    for v in bbox.to_array() {
        h.update(v.to_le_bytes());
    }
    h.update(class.as_bytes());
    h.update([0]);
    h.update(timestamp.to_le_bytes());
    h.update(nonce.to_le_bytes());
    hex::encode(&h.finalize()[..8])
}

impl LabelStore {
    /// Opens (creating if needed) the store at `path` and replays it.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let io = |source| StoreError::Io {
            path: path.to_path_buf(),
            source,
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io)?;
        }
        let file = OpenOptions::new().create(true).append(true).read(true).open(path).map_err(io)?;
        let mut labels = Vec::new();
        let mut ids = HashSet::new();
        for (i, line) in BufReader::new(&file).lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let label: StoredLabel = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            ids.insert(label.id.clone());
            labels.push(label);
        }
        Ok(Self {
            path: path.to_path_buf(),
            inner: Mutex::new(Inner { file, labels, ids }),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends a label; returns it once it is on disk.
    pub fn insert(&self, image: String, class: String, bbox: BBox, source: LabelSource) -> Result<StoredLabel, StoreError> {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or_default();
        let mut inner = self.inner.lock().expect("store lock");
        let mut nonce = 0;
        let mut id = label_id(&image, &bbox, &class, timestamp, nonce);
        while inner.ids.contains(&id) {
            nonce += 1;
            id = label_id(&image, &bbox, &class, timestamp, nonce);
        }
        let label = StoredLabel {
            id,
            image,
            class,
            bbox,
            source,
            visible: true,
            timestamp,
        };
        let line = serde_json::to_string(&label).expect("labels serialize") + "\n";
        let io = |source| StoreError::Io {
            path: self.path.clone(),
            source,
        };
        inner.file.write_all(line.as_bytes()).map_err(io)?;
        inner.file.sync_data().map_err(io)?;
        inner.ids.insert(label.id.clone());
        inner.labels.push(label.clone());
        Ok(label)
    }

    /// Labels in insertion order, optionally only those on `image`.
    pub fn list(&self, image: Option<&str>) -> Vec<StoredLabel> {
        let inner = self.inner.lock().expect("store lock");
        inner
            .labels
            .iter()
            .filter(|l| image.is_none_or(|i| l.image == i))
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("store lock").labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Removes a label and atomically rewrites the file. Returns whether the
    /// id existed.
    pub fn delete(&self, id: &str) -> Result<bool, StoreError> {
        let mut inner = self.inner.lock().expect("store lock");
        if !inner.ids.contains(id) {
            return Ok(false);
        }
        let io = |source| StoreError::Io {
            path: self.path.clone(),
            source,
        };
        let remaining: Vec<StoredLabel> = inner.labels.iter().filter(|l| l.id != id).cloned().collect();
        let tmp = self.path.with_extension("jsonl.tmp");
        {
            let mut f = File::create(&tmp).map_err(io)?;
            for l in &remaining {
                f.write_all((serde_json::to_string(l).expect("labels serialize") + "\n").as_bytes())
                    .map_err(io)?;
            }
            f.sync_all().map_err(io)?;
        }
        std::fs::rename(&tmp, &self.path).map_err(io)?;
        inner.file = OpenOptions::new().append(true).read(true).open(&self.path).map_err(io)?;
        inner.ids.remove(id);
        inner.labels = remaining;
        Ok(true)
    }
}
