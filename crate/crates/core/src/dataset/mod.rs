//! Label ingestion, pre-label matching, error statistics and patch sampling.

mod labels;
mod mask;
mod matching;
mod sampler;
mod stats;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, EdgeErrorModel, GeometryError};

pub use labels::{load_labels, parse_labels, save_labels, write_labels};
pub use mask::{cityscapes_class_name, mask_to_instances, InstanceMask};
pub use matching::match_prelabels;
pub use sampler::{
    crop_patch, item_rng, make_inference_patch, sample_training_patch, training_window, ImagePatch,
};
pub use stats::{edge_error_ratios, fit_error_model};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("need at least {needed} pairs, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("instance on image {0} has no true box")]
    MissingTrueBox(String),
    #[error("unknown image id {0}")]
    MissingImage(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("mask is {mask_w}x{mask_h} but image is {image_w}x{image_h}")]
    DimensionMismatch {
        mask_w: u32,
        mask_h: u32,
        image_w: u32,
        image_h: u32,
    },
}

impl DatasetError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    GroundTruth,
    Detector,
    Tracker,
    Human,
    Model,
}

impl LabelSource {
    /// Ground-truth and human labels are treated as precise.
    pub fn is_reference(self) -> bool {
        matches!(self, LabelSource::GroundTruth | LabelSource::Human)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LabelSource::GroundTruth => "ground_truth",
            LabelSource::Detector => "detector",
            LabelSource::Tracker => "tracker",
            LabelSource::Human => "human",
            LabelSource::Model => "model",
        }
    }
}

impl std::str::FromStr for LabelSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "ground_truth" => LabelSource::GroundTruth,
            "detector" => LabelSource::Detector,
            "tracker" => LabelSource::Tracker,
            "human" => LabelSource::Human,
            "model" => LabelSource::Model,
            other => return Err(format!("unknown label source {other:?}")),
        })
    }
}

/// One object on one image, carrying its true box, its pre-label, or both.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledInstance {
    pub image_id: String,
    pub true_box: Option<BBox>,
    pub prelabel_box: Option<BBox>,
    pub class_tag: String,
    pub source: LabelSource,
    pub visible: bool,
}

impl LabeledInstance {
    pub fn ground_truth(image_id: impl Into<String>, class_tag: impl Into<String>, b: BBox) -> Self {
        Self {
            image_id: image_id.into(),
            true_box: Some(b),
            prelabel_box: None,
            class_tag: class_tag.into(),
            source: LabelSource::GroundTruth,
            visible: true,
        }
    }

    pub fn prelabel(
        image_id: impl Into<String>,
        class_tag: impl Into<String>,
        b: BBox,
        source: LabelSource,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            true_box: None,
            prelabel_box: Some(b),
            class_tag: class_tag.into(),
            source,
            visible: true,
        }
    }

    pub fn with_prelabel(mut self, b: BBox) -> Self {
        self.prelabel_box = Some(b);
        self
    }

    pub fn require_true_box(&self) -> Result<BBox, DatasetError> {
        self.true_box
            .ok_or_else(|| DatasetError::MissingTrueBox(self.image_id.clone()))
    }
}

/// How training and inference crops are produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub expand_ratio: f64,
    pub error_model: EdgeErrorModel,
    pub patch_size: usize,
    /// Value of padded pixels after normalization (raw 0 → -1).
    pub pad_value: f32,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            expand_ratio: 0.15,
            error_model: EdgeErrorModel::default(),
            patch_size: 256,
            pad_value: -1.0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if !(self.expand_ratio >= 0.0 && self.expand_ratio.is_finite()) {
            return Err(DatasetError::InvalidConfig("expand_ratio must be >= 0".into()));
        }
        if self.patch_size < 8 {
            return Err(DatasetError::InvalidConfig("patch_size must be >= 8".into()));
        }
        if !(-1.0..=1.0).contains(&self.pad_value) {
            return Err(DatasetError::InvalidConfig("pad_value must lie in [-1, 1]".into()));
        }
        self.error_model.validate()?;
        Ok(())
    }
}

/// An 8-bit RGB image and the id labels refer to it by.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceImage {
    pub id: String,
    pub rgb: RgbImage,
}

impl SourceImage {
    pub fn new(id: impl Into<String>, rgb: RgbImage) -> Self {
        Self { id: id.into(), rgb }
    }

    pub fn width(&self) -> u32 {
        self.rgb.width()
    }

    pub fn height(&self) -> u32 {
        self.rgb.height()
    }
}

pub(crate) fn is_image_path(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Recursively lists image files under `root` as (relative id, path), sorted.
pub fn scan_images(root: &Path) -> Result<Vec<(String, PathBuf)>, DatasetError> {
    fn walk(dir: &Path, root: &Path, out: &mut Vec<(String, PathBuf)>) -> Result<(), DatasetError> {
        let entries = std::fs::read_dir(dir).map_err(|e| DatasetError::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| DatasetError::io(dir, e))?.path();
            if path.is_dir() {
                walk(&path, root, out)?;
            } else if is_image_path(&path) {
                let rel = path.strip_prefix(root).unwrap_or(&path);
                let id = rel
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                out.push((id, path));
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

pub fn load_image(id: impl Into<String>, path: &Path) -> Result<SourceImage, DatasetError> {
    let img = image::open(path).map_err(|source| DatasetError::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(SourceImage::new(id, img.to_rgb8()))
}

/// In-memory images keyed by id.
#[derive(Debug, Clone, Default)]
pub struct ImageSet {
    images: BTreeMap<String, SourceImage>,
}

impl ImageSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image: SourceImage) {
        self.images.insert(image.id.clone(), image);
    }

    pub fn get(&self, id: &str) -> Result<&SourceImage, DatasetError> {
        self.images
            .get(id)
            .ok_or_else(|| DatasetError::MissingImage(id.to_string()))
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SourceImage> {
        self.images.values()
    }

    /// Loads every PNG/JPEG under `root`; ids are `/`-separated relative paths.
    pub fn load_dir(root: &Path) -> Result<Self, DatasetError> {
        let mut set = Self::new();
        for (id, path) in scan_images(root)? {
            set.insert(load_image(id, &path)?);
        }
        Ok(set)
    }

    /// Loads only the images that `instances` reference.
    pub fn load_for(root: &Path, instances: &[LabeledInstance]) -> Result<Self, DatasetError> {
        let mut set = Self::new();
        for inst in instances {
            if !set.images.contains_key(&inst.image_id) {
                let path = root.join(&inst.image_id);
                if !path.exists() {
                    return Err(DatasetError::MissingImage(inst.image_id.clone()));
                }
                set.insert(load_image(inst.image_id.clone(), &path)?);
            }
        }
        Ok(set)
    }

    /// Writes every image as PNG at `root/<id>`.
    pub fn save_dir(&self, root: &Path) -> Result<(), DatasetError> {
        for img in self.images.values() {
            let path = root.join(&img.id);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| DatasetError::io(parent, e))?;
            }
            img.rgb.save(&path).map_err(|source| DatasetError::Image {
                path: path.clone(),
                source,
            })?;
        }
        Ok(())
    }
}

impl FromIterator<SourceImage> for ImageSet {
    fn from_iter<T: IntoIterator<Item = SourceImage>>(iter: T) -> Self {
        let mut set = Self::new();
        iter.into_iter().for_each(|i| set.insert(i));
        set
    }
}
