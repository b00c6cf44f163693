//! Training and fine-tuning with on-the-fly perturbed patches.
//!
//! Every epoch each selected instance yields one freshly perturbed crop, so
//! the window around a given object differs between epochs.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    item_rng, sample_training_patch, DatasetError, ImagePatch, ImageSet, LabeledInstance, SampleConfig,
    SourceImage,
};
use crate::evaluation::{evaluate, EvalConfig, EvalError};
use crate::geometry::BBox;
use crate::model::{huber_loss, huber_loss_grad, BackboneKind, LossConfig, ModelError, RefinementModel, Regressor};
use crate::nn::{Gradients, Tensor};

/// Per-sample retries before a failing draw is skipped for the epoch.
pub const MAX_SAMPLE_RETRIES: usize = 16;
const SPLIT_STREAM: u64 = (1 << 40) - 1;
const ORDER_STREAM: u64 = (1 << 40) - 2;
const FLIP_STREAM_BIT: u64 = 1 << 39;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no instances to train on")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model input size {model} does not match patch size {patch}")]
    SizeMismatch { model: usize, patch: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum OptimizerKind {
    #[default]
    #[serde(rename = "adaptive-moment")]
    AdaptiveMoment,
    #[serde(rename = "plain-gradient")]
    PlainGradient,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AdaptiveMoment => "adaptive-moment",
            Self::PlainGradient => "plain-gradient",
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adaptive-moment" => Ok(Self::AdaptiveMoment),
            "plain-gradient" => Ok(Self::PlainGradient),
            other => Err(TrainError::InvalidConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub sample: SampleConfig,
    pub loss: LossConfig,
    /// Fraction of the non-validation instances used for training.
    pub data_fraction: f64,
    /// Multiplier on the error model's sigmas at train time.
    pub error_scale: f64,
    /// Fraction of instances held out for the per-epoch validation curve.
    pub validation_fraction: f64,
    pub backbone: BackboneKind,
    pub horizontal_flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::AdaptiveMoment,
            seed: 0,
            sample: SampleConfig::default(),
            loss: LossConfig::default(),
            data_fraction: 1.0,
            error_scale: 1.0,
            validation_fraction: 0.1,
            backbone: BackboneKind::Tiny,
            horizontal_flip: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(self.data_fraction > 0.0 && self.data_fraction <= 1.0) {
            return bad("data_fraction must lie in (0, 1]");
        }
        if !(self.error_scale >= 0.0 && self.error_scale.is_finite()) {
            return bad("error_scale must be >= 0");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if !(self.loss.huber_delta > 0.0) {
            return bad("huber_delta must be > 0");
        }
        self.sample.validate()?;
        Ok(())
    }

    /// Crop settings with the train-time error scale applied.
    pub fn train_sample_config(&self) -> SampleConfig {
        let mut s = self.sample;
        s.error_model = s.error_model.with_scale(s.error_model.scale * self.error_scale);
        s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    /// `None` when no validation instances are held out.
    pub val_mae_le: Vec<Option<f64>>,
    pub seconds: Vec<f64>,
}

impl TrainHistory {
    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string_pretty(self).expect("history serializes") + "\n";
        std::fs::write(path, text).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Instance indices used for training and for validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Seeded split: one permutation, validation taken from its tail and the
/// training subset as a prefix of the rest, so smaller fractions are subsets
/// of larger ones.
pub fn split_instances(n: usize, cfg: &TrainConfig) -> DataSplit {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut item_rng(cfg.seed, 0, SPLIT_STREAM));
    let mut n_val = (n as f64 * cfg.validation_fraction).round() as usize;
    if n_val >= n {
        n_val = n.saturating_sub(1);
    }
    let validation = perm.split_off(n - n_val);
    let n_train = ((perm.len() as f64 * cfg.data_fraction).round() as usize).clamp(1.min(perm.len()), perm.len());
    perm.truncate(n_train);
    DataSplit {
        train: perm,
        validation,
    }
}

fn mirror(image: &SourceImage, truth: &BBox) -> (SourceImage, BBox) {
    let w = image.width() as f64;
    let flipped = image::imageops::flip_horizontal(&image.rgb);
    let b = BBox::new(w - truth.x_max(), truth.y_min(), w - truth.x_min(), truth.y_max())
        .expect("mirroring keeps a valid box");
    (SourceImage::new(image.id.clone(), flipped), b)
}

/// The training sample instance `index` yields in `epoch`, or `None` when
/// every retry failed. Depends only on (seed, epoch, index).
pub fn draw_training_sample(
    images: &ImageSet,
    instance: &LabeledInstance,
    index: usize,
    epoch: usize,
    cfg: &TrainConfig,
) -> Result<Option<(ImagePatch, [f64; 4])>, TrainError> {
    let sample_cfg = cfg.train_sample_config();
    let image = images.get(&instance.image_id)?;
    let mut rng = item_rng(cfg.seed, epoch as u64, index as u64);
    let flipped;
    let (image, instance) = if cfg.horizontal_flip
        && item_rng(cfg.seed, epoch as u64, index as u64 | FLIP_STREAM_BIT).random_bool(0.5)
    {
        let (img, b) = mirror(image, &instance.require_true_box()?);
        let mut inst = instance.clone();
        inst.true_box = Some(b);
        flipped = (img, inst);
        (&flipped.0, &flipped.1)
    } else {
        (image, instance)
    };
    for _ in 0..MAX_SAMPLE_RETRIES {
        match sample_training_patch(image, instance, &sample_cfg, &mut rng) {
            Ok(s) => return Ok(Some(s)),
            Err(DatasetError::Geometry(_)) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(None)
}

/// First- and second-moment optimizer state, or plain gradient steps.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    steps: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f32>>, grads: &Gradients) {
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::PlainGradient => {
                for (p, g) in params.into_iter().zip(&grads.0) {
                    for (w, d) in p.iter_mut().zip(g) {
                        *w -= (lr * *d as f64) as f32;
                    }
                }
            }
            OptimizerKind::AdaptiveMoment => {
                if self.m.is_empty() {
                    self.m = grads.0.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.v = self.m.clone();
                }
                self.steps += 1;
                let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
                let c1 = 1.0 - self.beta1.powi(self.steps);
                let c2 = 1.0 - self.beta2.powi(self.steps);
                let step = (lr * c2.sqrt() / c1) as f32;
                let eps = (self.epsilon * c2.sqrt()) as f32;
                for (((p, g), m), v) in params.into_iter().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
                    for i in 0..p.len() {
                        let d = g[i];
                        m[i] = b1 * m[i] + (1.0 - b1) * d;
                        v[i] = b2 * v[i] + (1.0 - b2) * d * d;
                        p[i] -= step * m[i] / (v[i].sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Mean Huber loss of `model` on a fixed batch.
pub fn batch_loss(
    model: &RefinementModel,
    batch: &[(ImagePatch, [f64; 4])],
    loss: &LossConfig,
) -> Result<f64, TrainError> {
    let patches: Vec<ImagePatch> = batch.iter().map(|(p, _)| p.clone()).collect();
    let targets: Vec<[f64; 4]> = batch.iter().map(|(_, t)| *t).collect();
    Ok(huber_loss(&model.predict(&patches)?, &targets, loss)?)
}

/// One optimizer step on `batch`; returns the batch loss before the step.
pub fn train_step(
    model: &mut RefinementModel,
    optimizer: &mut Optimizer,
    batch: &[(ImagePatch, [f64; 4])],
    loss: &LossConfig,
) -> Result<f64, TrainError> {
    let net = model.network();
    let mut grads = net.zero_gradients();
    let mut preds = Vec::with_capacity(batch.len());
    let mut tapes = Vec::with_capacity(batch.len());
    for (patch, _) in batch {
        let (out, tape) = net.forward_train(&model.patch_tensor(patch)?);
        preds.push(std::array::from_fn::<f64, 4, _>(|i| out.data[i] as f64));
        tapes.push(tape);
    }
    let targets: Vec<[f64; 4]> = batch.iter().map(|(_, t)| *t).collect();
    let value = huber_loss(&preds, &targets, loss)?;
    let dpred = huber_loss_grad(&preds, &targets, loss)?;
    for (tape, g) in tapes.into_iter().zip(dpred) {
        net.backward(tape, Tensor::vector(g.map(|v| v as f32).to_vec()), &mut grads);
    }
    optimizer.step(model.network_mut().params_mut(), &grads);
    Ok(value)
}

fn check_instances(instances: &[LabeledInstance], images: &ImageSet) -> Result<(), TrainError> {
    if instances.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for inst in instances {
        inst.require_true_box()?;
        images.get(&inst.image_id)?;
    }
    Ok(())
}

/// Trains a freshly initialized model of `cfg.backbone`.
pub fn train(
    instances: &[LabeledInstance],
    images: &ImageSet,
    cfg: &TrainConfig,
) -> Result<(RefinementModel, TrainHistory), TrainError> {
    cfg.validate()?;
    check_instances(instances, images)?;
    let model = RefinementModel::build(cfg.backbone, cfg.sample.patch_size, cfg.seed)?;
    run(model, instances, images, cfg)
}

/// Continues training from `model`'s current parameters.
pub fn finetune(
    model: RefinementModel,
    instances: &[LabeledInstance],
    images: &ImageSet,
    cfg: &TrainConfig,
) -> Result<(RefinementModel, TrainHistory), TrainError> {
    cfg.validate()?;
    if model.input_size() != cfg.sample.patch_size {
        return Err(TrainError::SizeMismatch {
            model: model.input_size(),
            patch: cfg.sample.patch_size,
        });
    }
    check_instances(instances, images)?;
    run(model, instances, images, cfg)
}

fn run(
    mut model: RefinementModel,
    instances: &[LabeledInstance],
    images: &ImageSet,
    cfg: &TrainConfig,
) -> Result<(RefinementModel, TrainHistory), TrainError> {
    let split = split_instances(instances.len(), cfg);
    let validation: Vec<LabeledInstance> = split.validation.iter().map(|&i| instances[i].clone()).collect();
    let val_cfg = EvalConfig {
        error_model: cfg.sample.error_model,
        seed: cfg.seed,
        ..EvalConfig::default()
    };
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut order = split.train.clone();
        order.shuffle(&mut item_rng(cfg.seed, epoch as u64, ORDER_STREAM));
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &i in chunk {
                if let Some(s) = draw_training_sample(images, &instances[i], i, epoch, cfg)? {
                    batch.push(s);
                }
            }
            if batch.is_empty() {
                continue;
            }
            let l = train_step(&mut model, &mut optimizer, &batch, &cfg.loss)?;
            loss_sum += l * batch.len() as f64;
            seen += batch.len();
        }
        history.loss.push(if seen > 0 { loss_sum / seen as f64 } else { f64::NAN });
        history.val_mae_le.push(if validation.is_empty() {
            None
        } else {
            Some(evaluate(&model, &validation, images, &cfg.sample, &val_cfg)?.mae_le.after)
        });
        history.seconds.push(started.elapsed().as_secs_f64());
    }
    Ok((model, history))
}
