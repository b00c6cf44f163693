//! The refinement network: a convolutional feature extractor followed by a
//! three-layer coordinate head that regresses `(x_min, y_min, x_max, y_max)`
//! of the main object in patch-normalized units.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{make_inference_patch, DatasetError, ImagePatch, SampleConfig, SourceImage};
use crate::geometry::{clip, iou, BBox, EdgeErrorModel, GeometryError};
use crate::nn::{Conv2d, Layer, Linear, Network, Residual, Shape, Tensor};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const WEIGHTS_MAGIC: &[u8; 4] = b"TBXW";
/// Sidecar backbone name of the ground-truth echo used for upper-bound runs.
pub const TRUTH_ECHO_BACKBONE: &str = "truth-echo";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unsupported backbone {0:?}")]
    UnsupportedBackbone(String),
    #[error("input size {0} is too small for this backbone (minimum 32)")]
    UnsupportedInputSize(usize),
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ModelError {
    fn checkpoint(path: &Path, message: impl Into<String>) -> Self {
        Self::Checkpoint {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum BackboneKind {
    #[default]
    #[serde(rename = "tiny")]
    Tiny,
    #[serde(rename = "vgg16-style")]
    Vgg16Style,
    #[serde(rename = "resnet50-style")]
    Resnet50Style,
    #[serde(rename = "mobilenet-style")]
    MobilenetStyle,
}

impl BackboneKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::Tiny => "tiny",
            BackboneKind::Vgg16Style => "vgg16-style",
            BackboneKind::Resnet50Style => "resnet50-style",
            BackboneKind::MobilenetStyle => "mobilenet-style",
        }
    }

    pub fn default_head(self) -> [usize; 3] {
        match self {
            BackboneKind::Tiny => [256, 64, 4],
            _ => [512, 128, 4],
        }
    }
}

impl std::str::FromStr for BackboneKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "vgg16-style" => Ok(Self::Vgg16Style),
            "resnet50-style" => Ok(Self::Resnet50Style),
            "mobilenet-style" => Ok(Self::MobilenetStyle),
            other => Err(ModelError::UnsupportedBackbone(other.to_string())),
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize) -> Layer {
    Layer::Conv(Conv2d::new(cin, cout, k, stride, k / 2, 1))
}

/// Five (3×3 conv, ReLU, 2× max-pool) blocks, widths 16-32-64-128-128.
fn tiny_backbone() -> (Vec<Layer>, usize) {
    let mut layers = Vec::new();
    let mut cin = 3;
    for w in [16, 32, 64, 128, 128] {
        layers.extend([conv(cin, w, 3, 1), Layer::Relu, Layer::MaxPool2]);
        cin = w;
    }
    layers.push(Layer::GlobalAvgPool);
    (layers, cin)
}

/// The 13 convolutional layers of VGG16 with their pooling stages.
fn vgg16_backbone() -> (Vec<Layer>, usize) {
    let mut layers = Vec::new();
    let mut cin = 3;
    for (reps, w) in [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)] {
        for _ in 0..reps {
            layers.extend([conv(cin, w, 3, 1), Layer::Relu]);
            cin = w;
        }
        layers.push(Layer::MaxPool2);
    }
    layers.push(Layer::GlobalAvgPool);
    (layers, cin)
}

/// Stem plus 16 bottleneck blocks (3-4-6-3): 49 convolutions on the main path.
fn resnet50_backbone() -> (Vec<Layer>, usize) {
    let mut layers = vec![
        Layer::Conv(Conv2d::new(3, 64, 7, 2, 3, 1)),
        Layer::Relu,
        Layer::MaxPool2,
    ];
    let mut cin = 64;
    for (stage, (blocks, mid)) in [(3, 64), (4, 128), (6, 256), (3, 512)].into_iter().enumerate() {
        let cout = mid * 4;
        for b in 0..blocks {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let shortcut = (b == 0).then(|| Conv2d::new(cin, cout, 1, stride, 0, 1));
            layers.push(Layer::Residual(Box::new(Residual {
                body: vec![
                    conv(cin, mid, 1, 1),
                    Layer::Relu,
                    conv(mid, mid, 3, stride),
                    Layer::Relu,
                    conv(mid, cout, 1, 1),
                ],
                shortcut,
            })));
            layers.push(Layer::Relu);
            cin = cout;
        }
    }
    layers.push(Layer::GlobalAvgPool);
    (layers, cin)
}

/// Strided stem, eight depthwise-separable pairs and a final pointwise
/// projection: 18 convolutions.
fn mobilenet_backbone() -> (Vec<Layer>, usize) {
    let mut layers = vec![conv(3, 32, 3, 2), Layer::Relu];
    let mut cin = 32;
    let pairs = [
        (1, 64),
        (2, 128),
        (1, 128),
        (2, 256),
        (1, 256),
        (2, 512),
        (1, 512),
        (2, 512),
    ];
    for (stride, cout) in pairs {
        layers.extend([
            Layer::Conv(Conv2d::new(cin, cin, 3, stride, 1, cin)),
            Layer::Relu,
            conv(cin, cout, 1, 1),
            Layer::Relu,
        ]);
        cin = cout;
    }
    layers.extend([conv(cin, 512, 1, 1), Layer::Relu, Layer::GlobalAvgPool]);
    (layers, 512)
}

fn head_layers(features: usize, head: &[usize]) -> Vec<Layer> {
    let mut layers = Vec::new();
    let mut cin = features;
    for (i, &w) in head.iter().enumerate() {
        layers.push(Layer::Linear(Linear::new(cin, w)));
        if i + 1 < head.len() {
            layers.push(Layer::Relu);
        }
        cin = w;
    }
    layers
}

/// Anything that maps patches to four patch-normalized coordinates.
///
/// Implemented by [`RefinementModel`] and by test doubles with known answers.
pub trait Regressor: Send + Sync {
    fn input_size(&self) -> usize;

    fn predict(&self, patches: &[ImagePatch]) -> Result<Vec<[f64; 4]>, ModelError>;
}

/// Feature extractor + coordinate head.
#[derive(Debug, Clone)]
pub struct RefinementModel {
    backbone: BackboneKind,
    input_size: usize,
    head: Vec<usize>,
    init: String,
    network: Network,
}

impl RefinementModel {
    pub fn build(backbone: BackboneKind, input_size: usize, seed: u64) -> Result<Self, ModelError> {
        Self::build_with_head(backbone, input_size, &backbone.default_head(), seed)
    }

    pub fn build_with_head(
        backbone: BackboneKind,
        input_size: usize,
        head: &[usize],
        seed: u64,
    ) -> Result<Self, ModelError> {
        if input_size < 32 {
            return Err(ModelError::UnsupportedInputSize(input_size));
        }
        if head.len() != 3 || head[2] != 4 {
            return Err(ModelError::ShapeMismatch {
                expected: "three head layers ending in width 4".into(),
                got: format!("{head:?}"),
            });
        }
        let (mut layers, features) = match backbone {
            BackboneKind::Tiny => tiny_backbone(),
            BackboneKind::Vgg16Style => vgg16_backbone(),
            BackboneKind::Resnet50Style => resnet50_backbone(),
            BackboneKind::MobilenetStyle => mobilenet_backbone(),
        };
        layers.extend(head_layers(features, head));
        let mut network = Network::new(layers);
        network.initialize(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            backbone,
            input_size,
            head: head.to_vec(),
            init: "random".into(),
            network,
        })
    }

    pub fn backbone(&self) -> BackboneKind {
        self.backbone
    }

    pub fn head(&self) -> &[usize] {
        &self.head
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.network
    }

    /// Converts a patch into the network's input tensor.
    pub fn patch_tensor(&self, patch: &ImagePatch) -> Result<Tensor, ModelError> {
        let n = self.input_size;
        if patch.size != n || patch.pixels.len() != 3 * n * n {
            return Err(ModelError::ShapeMismatch {
                expected: format!("3x{n}x{n}"),
                got: format!("3x{0}x{0} ({1} values)", patch.size, patch.pixels.len()),
            });
        }
        Ok(Tensor::new(Shape::new(3, n, n), patch.pixels.clone()))
    }

    /// Raw head output per patch; coordinate order is not enforced.
    pub fn forward(&self, patches: &[ImagePatch]) -> Result<Vec<[f32; 4]>, ModelError> {
        patches
            .iter()
            .map(|p| {
                let out = self.network.forward(&self.patch_tensor(p)?);
                Ok([out.data[0], out.data[1], out.data[2], out.data[3]])
            })
            .collect()
    }

    pub fn sidecar(&self, sample: &SampleConfig) -> CheckpointMeta {
        CheckpointMeta {
            backbone: self.backbone.as_str().to_string(),
            input_size: self.input_size,
            head: self.head.clone(),
            expand_ratio: sample.expand_ratio,
            error_model: sample.error_model,
            pad_value: sample.pad_value,
            init: self.init.clone(),
            format_version: CHECKPOINT_FORMAT_VERSION,
        }
    }

    fn write_weights(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        };
        let params = self.network.params();
        let mut buf = Vec::with_capacity(16 + 4 * self.network.parameter_count() + 8 * params.len());
        buf.extend_from_slice(WEIGHTS_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for p in params {
            buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
            for v in p {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(&buf).map_err(io)?;
        f.sync_all().map_err(io)
    }

    fn read_weights(&mut self, path: &Path) -> Result<(), ModelError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|source| ModelError::Io {
                path: path.to_path_buf(),
                source,
            })?;
        let bad = |m: &str| ModelError::checkpoint(path, m);
        let mut cursor = bytes.as_slice();
        let mut take = |n: usize| -> Result<&[u8], ModelError> {
            if cursor.len() < n {
                return Err(bad("truncated weight blob"));
            }
            let (head, rest) = cursor.split_at(n);
            cursor = rest;
            Ok(head)
        };
        if take(4)? != WEIGHTS_MAGIC {
            return Err(bad("not a weight blob"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != CHECKPOINT_FORMAT_VERSION {
            return Err(bad("unsupported weight format version"));
        }
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut params = self.network.params_mut();
        if count != params.len() {
            return Err(bad("tensor count does not match the architecture"));
        }
        for p in params.iter_mut() {
            let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
            if len != p.len() {
                return Err(bad("tensor size does not match the architecture"));
            }
            let raw = take(4 * len)?;
            for (dst, chunk) in p.iter_mut().zip(raw.chunks_exact(4)) {
                *dst = f32::from_le_bytes(chunk.try_into().unwrap());
            }
        }
        Ok(())
    }
}

impl Regressor for RefinementModel {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn predict(&self, patches: &[ImagePatch]) -> Result<Vec<[f64; 4]>, ModelError> {
        Ok(self
            .forward(patches)?
            .into_iter()
            .map(|o| o.map(f64::from))
            .collect())
    }
}

/// Loss settings; `huber_delta` applies to patch-normalized residuals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub huber_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { huber_delta: 1.0 }
    }
}

pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_derivative(r: f64, delta: f64) -> f64 {
    r.clamp(-delta, delta)
}

fn check_pairs(pred: &[[f64; 4]], target: &[[f64; 4]]) -> Result<(), ModelError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(ModelError::ShapeMismatch {
            expected: format!("{}x4 predictions", target.len()),
            got: format!("{}x4", pred.len()),
        });
    }
    Ok(())
}

/// Mean Huber loss over every coordinate of the batch.
pub fn huber_loss(pred: &[[f64; 4]], target: &[[f64; 4]], cfg: &LossConfig) -> Result<f64, ModelError> {
    check_pairs(pred, target)?;
    let sum: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| huber(a - b, cfg.huber_delta)))
        .sum();
    Ok(sum / (4 * pred.len()) as f64)
}

/// Gradient of [`huber_loss`] with respect to `pred`.
pub fn huber_loss_grad(
    pred: &[[f64; 4]],
    target: &[[f64; 4]],
    cfg: &LossConfig,
) -> Result<Vec<[f64; 4]>, ModelError> {
    check_pairs(pred, target)?;
    let norm = 1.0 / (4 * pred.len()) as f64;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(p, t)| std::array::from_fn(|i| norm * huber_derivative(p[i] - t[i], cfg.huber_delta)))
        .collect())
}

/// Orders a raw prediction so that `x_min ≤ x_max` and `y_min ≤ y_max`.
pub fn order_coords(mut c: [f64; 4]) -> [f64; 4] {
    if c[0] > c[2] {
        c.swap(0, 2);
    }
    if c[1] > c[3] {
        c.swap(1, 3);
    }
    c
}

fn finish_refinement(
    patch: &ImagePatch,
    coords: [f64; 4],
    image: &SourceImage,
) -> Result<BBox, ModelError> {
    let c = order_coords(coords);
    let degenerate = |b: [f64; 4]| GeometryError::DegenerateBox {
        x_min: b[0],
        y_min: b[1],
        x_max: b[2],
        y_max: b[3],
    };
    let unmapped = patch
        .transform
        .from_patch_coords(c)
        .map_err(ModelError::Geometry)?;
    let clipped = clip(&unmapped, image.width() as f64, image.height() as f64)?;
    if clipped.width() < 1.0 || clipped.height() < 1.0 {
        return Err(degenerate(clipped.to_array()).into());
    }
    Ok(clipped)
}

/// Tightens `rough_box` on `image`: expand and crop, predict, reorder
/// inverted coordinates, map back to image space and clip to the image.
pub fn refine(
    model: &dyn Regressor,
    image: &SourceImage,
    rough_box: &BBox,
    cfg: &SampleConfig,
) -> Result<BBox, ModelError> {
    check_input_size(model, cfg)?;
    let patch = make_inference_patch(image, rough_box, cfg)?;
    let coords = model.predict(std::slice::from_ref(&patch))?[0];
    finish_refinement(&patch, coords, image)
}

/// Refines many boxes with batched prediction; results keep input order.
pub fn refine_many(
    model: &dyn Regressor,
    items: &[(&SourceImage, BBox)],
    cfg: &SampleConfig,
    batch_size: usize,
) -> Result<Vec<Result<BBox, ModelError>>, ModelError> {
    check_input_size(model, cfg)?;
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch_size.max(1)) {
        let patches = chunk
            .iter()
            .map(|(img, b)| make_inference_patch(img, b, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        let preds = model.predict(&patches)?;
        for ((patch, coords), (img, _)) in patches.iter().zip(preds).zip(chunk) {
            out.push(finish_refinement(patch, coords, img));
        }
    }
    Ok(out)
}

fn check_input_size(model: &dyn Regressor, cfg: &SampleConfig) -> Result<(), ModelError> {
    if model.input_size() != cfg.patch_size {
        return Err(ModelError::ShapeMismatch {
            expected: format!("patch size {}", model.input_size()),
            got: format!("patch size {}", cfg.patch_size),
        });
    }
    Ok(())
}

/// Diagnostic regressor that answers with the known true box on the patch's
/// image (the one overlapping the crop window most). Gives the zero-error
/// upper bound of the pipeline.
#[derive(Debug, Clone)]
pub struct TruthEcho {
    input_size: usize,
    truths: HashMap<String, Vec<BBox>>,
}

impl TruthEcho {
    pub fn new(input_size: usize) -> Self {
        Self {
            input_size,
            truths: HashMap::new(),
        }
    }

    pub fn insert(&mut self, image_id: impl Into<String>, truth: BBox) {
        self.truths.entry(image_id.into()).or_default().push(truth);
    }
}

impl Regressor for TruthEcho {
    fn input_size(&self) -> usize {
        self.input_size
    }

    fn predict(&self, patches: &[ImagePatch]) -> Result<Vec<[f64; 4]>, ModelError> {
        Ok(patches
            .iter()
            .map(|p| {
                let best = self.truths.get(&p.image_id).and_then(|boxes| {
                    boxes
                        .iter()
                        .max_by(|a, b| iou(a, &p.transform.window).total_cmp(&iou(b, &p.transform.window)))
                });
                match best {
                    Some(b) => p.transform.to_patch_coords(b),
                    None => p.transform.to_patch_coords(&p.transform.window),
                }
            })
            .collect())
    }
}

/// JSON sidecar stored next to the weight blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub backbone: String,
    pub input_size: usize,
    pub head: Vec<usize>,
    pub expand_ratio: f64,
    pub error_model: EdgeErrorModel,
    #[serde(default = "default_pad")]
    pub pad_value: f32,
    /// "random" for weights trained from scratch, "external" otherwise.
    #[serde(default = "default_init")]
    pub init: String,
    pub format_version: u32,
}

fn default_pad() -> f32 {
    -1.0
}

fn default_init() -> String {
    "random".into()
}

impl CheckpointMeta {
    /// The crop settings refinement must use with this checkpoint.
    pub fn sample_config(&self) -> SampleConfig {
        SampleConfig {
            expand_ratio: self.expand_ratio,
            error_model: self.error_model,
            patch_size: self.input_size,
            pad_value: self.pad_value,
        }
    }

    pub fn is_truth_echo(&self) -> bool {
        self.backbone == TRUTH_ECHO_BACKBONE
    }
}

/// A loaded checkpoint. `model` is `None` for truth-echo checkpoints, which
/// carry no weights.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Option<RefinementModel>,
}

/// Paths of the sidecar and weight blob for a checkpoint directory.
pub fn checkpoint_paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join("checkpoint.json"), dir.join("checkpoint.bin"))
}

pub fn save_checkpoint(
    dir: &Path,
    model: &RefinementModel,
    sample: &SampleConfig,
) -> Result<CheckpointMeta, ModelError> {
    std::fs::create_dir_all(dir).map_err(|source| ModelError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let (json_path, bin_path) = checkpoint_paths(dir);
    model.write_weights(&bin_path)?;
    let meta = model.sidecar(sample);
    write_sidecar(&json_path, &meta)?;
    Ok(meta)
}

/// Writes a weightless checkpoint whose refiner echoes the known truth.
pub fn save_truth_echo_checkpoint(dir: &Path, sample: &SampleConfig) -> Result<CheckpointMeta, ModelError> {
    std::fs::create_dir_all(dir).map_err(|source| ModelError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let meta = CheckpointMeta {
        backbone: TRUTH_ECHO_BACKBONE.into(),
        input_size: sample.patch_size,
        head: vec![],
        expand_ratio: sample.expand_ratio,
        error_model: sample.error_model,
        pad_value: sample.pad_value,
        init: "external".into(),
        format_version: CHECKPOINT_FORMAT_VERSION,
    };
    write_sidecar(&checkpoint_paths(dir).0, &meta)?;
    Ok(meta)
}

fn write_sidecar(path: &Path, meta: &CheckpointMeta) -> Result<(), ModelError> {
    let text = serde_json::to_string_pretty(meta).expect("sidecar serializes");
    std::fs::write(path, text + "\n").map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a checkpoint from its directory or from its `checkpoint.json`.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let dir = if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    };
    let (json_path, bin_path) = checkpoint_paths(&dir);
    let text = std::fs::read_to_string(&json_path).map_err(|source| ModelError::Io {
        path: json_path.clone(),
        source,
    })?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|e| ModelError::checkpoint(&json_path, e.to_string()))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(ModelError::checkpoint(&json_path, "unsupported format_version"));
    }
    if meta.is_truth_echo() {
        return Ok(Checkpoint { meta, model: None });
    }
    let backbone: BackboneKind = meta.backbone.parse()?;
    let mut model = RefinementModel::build_with_head(backbone, meta.input_size, &meta.head, 0)?;
    model.init = meta.init.clone();
    model.read_weights(&bin_path)?;
    Ok(Checkpoint {
        meta,
        model: Some(model),
    })
}
