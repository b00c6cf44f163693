use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use tightbox_core::dataset::{load_image, scan_images, DatasetError, SourceImage};

const CACHE_CAPACITY: usize = 64;

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct ImageEntry {
    pub id: String,
    pub width: u32,
    pub height: u32,
    #[serde(skip)]
    pub path: PathBuf,
}

/// Images under the dataset root, keyed by their '/'-separated relative path.
#[derive(Debug)]
pub struct ImageCatalog {
    entries: BTreeMap<String, ImageEntry>,
    cache: Mutex<HashMap<String, Arc<SourceImage>>>,
}

impl ImageCatalog {
    pub fn scan(root: &Path) -> Result<Self, DatasetError> {
        let mut entries = BTreeMap::new();
        for (id, path) in scan_images(root)? {
            let (width, height) = image::image_dimensions(&path).map_err(|source| DatasetError::Image {
                path: path.clone(),
                source,
            })?;
            entries.insert(id.clone(), ImageEntry { id, width, height, path });
        }
        Ok(Self {
            entries,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ImageEntry> {
        self.entries.get(id)
    }

    /// One page (1-based) of entries in id order.
    pub fn page(&self, page: usize, per_page: usize) -> Vec<&ImageEntry> {
        self.entries
            .values()
            .skip(page.saturating_sub(1) * per_page)
            .take(per_page)
            .collect()
    }

    /// Decoded pixels of `id`, cached for repeat requests.
    pub fn load(&self, id: &str) -> Result<Option<Arc<SourceImage>>, DatasetError> {
        let Some(entry) = self.entries.get(id) else {
            return Ok(None);
        };
        if let Some(img) = self.cache.lock().expect("cache lock").get(id) {
            return Ok(Some(img.clone()));
        }
        let img = Arc::new(load_image(id, &entry.path)?);
        let mut cache = self.cache.lock().expect("cache lock");
        if cache.len() >= CACHE_CAPACITY {
            cache.clear();
        }
        cache.insert(id.to_string(), img.clone());
        Ok(Some(img))
    }
}
