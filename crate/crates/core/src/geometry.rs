//! Box algebra and the crop-window ↔ network-input transform.
//!
//! Coordinates are continuous and pixel-boundary based: pixel `(r, c)` covers
//! `[c, c + 1) × [r, r + 1)`, so the tight box of a pixel set touches the
//! outer boundaries of its extreme pixels.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Smallest side length, in pixels, that a perturbed window may have.
pub const MIN_PERTURBED_SIDE: f64 = 4.0;
/// Edge-shift draws are truncated to this many standard deviations.
pub const TRUNCATION_SIGMAS: f64 = 3.0;
/// Attempts before `perturb` gives up and returns the input box.
pub const MAX_PERTURB_ATTEMPTS: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box ({x_min}, {y_min}, {x_max}, {y_max})")]
    DegenerateBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("invalid error model: {0}")]
    InvalidErrorModel(&'static str),
    #[error("patch output size {0} is below the minimum of 8")]
    OutputTooSmall(usize),
}

/// Axis-aligned box with strictly positive width and height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(GeometryError::DegenerateBox {
                x_min,
                y_min,
                x_max,
                y_max,
            });
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self, GeometryError> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// `max(width, height)`, the normalizer used by the precision metrics.
    pub fn longest_edge(&self) -> f64 {
        self.width().max(self.height())
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self, GeometryError> {
        Self::new(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)
    }

    /// Multiplies every coordinate by `factor` (> 0).
    pub fn scale(&self, factor: f64) -> Result<Self, GeometryError> {
        Self::new(
            self.x_min * factor,
            self.y_min * factor,
            self.x_max * factor,
            self.y_max * factor,
        )
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = GeometryError;

    fn try_from(v: [f64; 4]) -> Result<Self, Self::Error> {
        Self::from_array(v)
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Per-edge Gaussian model of pre-label error, as ratios of the true box size.
///
/// Vertical edges (left/right) are measured against width, horizontal edges
/// (top/bottom) against height. `scale` multiplies every drawn shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeErrorModel {
    pub mean_vertical: f64,
    pub sigma_vertical: f64,
    pub mean_horizontal: f64,
    pub sigma_horizontal: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for EdgeErrorModel {
    /// Zero-mean fit of detector edge error: variance 0.0064 for vertical
    /// edges and 0.0196 for horizontal edges.
    fn default() -> Self {
        Self {
            mean_vertical: 0.0,
            sigma_vertical: 0.08,
            mean_horizontal: 0.0,
            sigma_horizontal: 0.14,
            scale: 1.0,
        }
    }
}

impl EdgeErrorModel {
    /// A model that never moves an edge.
    pub fn zero() -> Self {
        Self {
            mean_vertical: 0.0,
            sigma_vertical: 0.0,
            mean_horizontal: 0.0,
            sigma_horizontal: 0.0,
            scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let all = [
            self.mean_vertical,
            self.sigma_vertical,
            self.mean_horizontal,
            self.sigma_horizontal,
            self.scale,
        ];
        if !all.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::InvalidErrorModel("non-finite parameter"));
        }
        if self.sigma_vertical < 0.0 || self.sigma_horizontal < 0.0 {
            return Err(GeometryError::InvalidErrorModel("negative sigma"));
        }
        if self.scale <= 0.0 {
            return Err(GeometryError::InvalidErrorModel("scale must be positive"));
        }
        Ok(())
    }

    /// Draws one (left, right, top, bottom) set of signed edge ratios, each
    /// truncated to ±3σ around its mean. Scale is not applied.
    pub fn draw_ratios<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 4] {
        let mut draw = |mean: f64, sigma: f64| mean + sigma * truncated_standard_normal(rng);
        [
            draw(self.mean_vertical, self.sigma_vertical),
            draw(self.mean_vertical, self.sigma_vertical),
            draw(self.mean_horizontal, self.sigma_horizontal),
            draw(self.mean_horizontal, self.sigma_horizontal),
        ]
    }
}

/// Standard normal conditioned on `|z| <= TRUNCATION_SIGMAS` (rejection sampling).
pub fn truncated_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= TRUNCATION_SIGMAS {
            return z;
        }
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Moves left/right outward by `ratio·width` and top/bottom by `ratio·height`.
pub fn expand(b: &BBox, ratio: f64) -> BBox {
    debug_assert!(ratio >= 0.0);
    let dx = ratio * b.width();
    let dy = ratio * b.height();
    BBox {
        x_min: b.x_min - dx,
        y_min: b.y_min - dy,
        x_max: b.x_max + dx,
        y_max: b.y_max + dy,
    }
}

/// Applies signed (left, right, top, bottom) ratios: x-edges move by
/// `ratio·scale·width`, y-edges by `ratio·scale·height`.
///
/// Returns `None` when the result inverts or a side drops below
/// [`MIN_PERTURBED_SIDE`].
pub fn shift_edges(b: &BBox, ratios: [f64; 4], scale: f64) -> Option<BBox> {
    let (w, h) = (b.width(), b.height());
    let x_min = b.x_min + ratios[0] * scale * w;
    let x_max = b.x_max + ratios[1] * scale * w;
    let y_min = b.y_min + ratios[2] * scale * h;
    let y_max = b.y_max + ratios[3] * scale * h;
    if x_max - x_min < MIN_PERTURBED_SIDE || y_max - y_min < MIN_PERTURBED_SIDE {
        return None;
    }
    BBox::new(x_min, y_min, x_max, y_max).ok()
}

/// Randomly moves each edge of `b` inward or outward according to `model`.
///
/// Whole draws are redrawn when the result would be invalid; after
/// [`MAX_PERTURB_ATTEMPTS`] failures the box is returned unchanged.
pub fn perturb<R: Rng + ?Sized>(b: &BBox, model: &EdgeErrorModel, rng: &mut R) -> BBox {
    for _ in 0..MAX_PERTURB_ATTEMPTS {
        let ratios = model.draw_ratios(rng);
        if let Some(out) = shift_edges(b, ratios, model.scale) {
            return out;
        }
    }
    *b
}

/// Intersects `b` with `[0, image_w] × [0, image_h]`.
pub fn clip(b: &BBox, image_w: f64, image_h: f64) -> Result<BBox, GeometryError> {
    BBox::new(
        b.x_min.max(0.0),
        b.y_min.max(0.0),
        b.x_max.min(image_w),
        b.y_max.min(image_h),
    )
}

/// Absolute (left, right, top, bottom) edge displacements in pixels.
pub fn edge_errors(pred: &BBox, truth: &BBox) -> [f64; 4] {
    [
        (pred.x_min - truth.x_min).abs(),
        (pred.x_max - truth.x_max).abs(),
        (pred.y_min - truth.y_min).abs(),
        (pred.y_max - truth.y_max).abs(),
    ]
}

/// Maps an image-space crop window onto a square, top-left anchored,
/// aspect-preserving network input of `output_size` pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchTransform {
    pub window: BBox,
    pub output_size: usize,
    pub scale: f64,
    pub pad_right: f64,
    pub pad_bottom: f64,
}

impl PatchTransform {
    pub fn new(window: BBox, output_size: usize) -> Result<Self, GeometryError> {
        if output_size < 8 {
            return Err(GeometryError::OutputTooSmall(output_size));
        }
        let out = output_size as f64;
        let scale = out / window.longest_edge();
        // The longer side fills the output exactly.
        let (pad_right, pad_bottom) = if window.width() >= window.height() {
            (0.0, out - window.height() * scale)
        } else {
            (out - window.width() * scale, 0.0)
        };
        Ok(Self {
            window,
            output_size,
            scale,
            pad_right,
            pad_bottom,
        })
    }

    /// Width and height of the scaled content region in output pixels.
    pub fn content_size(&self) -> (f64, f64) {
        (
            self.window.width() * self.scale,
            self.window.height() * self.scale,
        )
    }

    /// Image-space point → output-space pixel coordinates.
    pub fn image_to_patch(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.window.x_min) * self.scale,
            (y - self.window.y_min) * self.scale,
        )
    }

    /// Output-space pixel coordinates → image-space point.
    pub fn patch_to_image(&self, u: f64, v: f64) -> (f64, f64) {
        (
            u / self.scale + self.window.x_min,
            v / self.scale + self.window.y_min,
        )
    }

    /// Box → coordinates normalized by the output size. Values may fall
    /// outside `[0, 1]` when the box extends past the window.
    pub fn to_patch_coords(&self, b: &BBox) -> [f64; 4] {
        let out = self.output_size as f64;
        let (x0, y0) = self.image_to_patch(b.x_min, b.y_min);
        let (x1, y1) = self.image_to_patch(b.x_max, b.y_max);
        [x0 / out, y0 / out, x1 / out, y1 / out]
    }

    /// Inverse of [`to_patch_coords`](Self::to_patch_coords).
    pub fn from_patch_coords(&self, coords: [f64; 4]) -> Result<BBox, GeometryError> {
        let out = self.output_size as f64;
        let (x0, y0) = self.patch_to_image(coords[0] * out, coords[1] * out);
        let (x1, y1) = self.patch_to_image(coords[2] * out, coords[3] * out);
        BBox::new(x0, y0, x1, y1)
    }
}

pub fn make_patch_transform(window: &BBox, output_size: usize) -> Result<PatchTransform, GeometryError> {
    PatchTransform::new(*window, output_size)
}
