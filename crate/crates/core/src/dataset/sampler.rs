use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetError, LabeledInstance, SampleConfig, SourceImage};
use crate::geometry::{expand, perturb, BBox, PatchTransform};

/// Letterboxed, normalized network input cut from one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    /// Channel-major `3 × size × size` values in `[-1, 1]`.
    pub pixels: Vec<f32>,
    pub size: usize,
    pub transform: PatchTransform,
    pub image_id: String,
}

impl ImagePatch {
    pub fn pixel(&self, channel: usize, x: usize, y: usize) -> f32 {
        self.pixels[(channel * self.size + y) * self.size + x]
    }
}

/// Independent random stream for one (epoch, item) draw under `seed`.
///
/// Streams depend only on these three numbers, so a sample is the same no
/// matter which worker produces it or in which order.
pub fn item_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch << 40) ^ index);
    rng
}

fn normalize(raw: f32) -> f32 {
    raw / 127.5 - 1.0
}

/// Bilinear sample of one channel at continuous image point `(x, y)`;
/// neighbours outside the image read as `outside`.
fn bilinear(img: &image::RgbImage, channel: usize, x: f64, y: f64, outside: f32) -> f32 {
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = (fx - x0) as f32;
    let ty = (fy - y0) as f32;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let fetch = |xi: i64, yi: i64| -> f32 {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            outside
        } else {
            img.get_pixel(xi as u32, yi as u32)[channel] as f32
        }
    };
    let (xi, yi) = (x0 as i64, y0 as i64);
    let top = fetch(xi, yi) * (1.0 - tx) + fetch(xi + 1, yi) * tx;
    let bottom = fetch(xi, yi + 1) * (1.0 - tx) + fetch(xi + 1, yi + 1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Crops `window` (which may extend past the image) and letterboxes it into a
/// `patch_size` square, top-left anchored. Out-of-image area and padding take
/// `cfg.pad_value`.
pub fn crop_patch(
    image: &SourceImage,
    window: &BBox,
    cfg: &SampleConfig,
) -> Result<ImagePatch, DatasetError> {
    let size = cfg.patch_size;
    let transform = PatchTransform::new(*window, size)?;
    let (content_w, content_h) = transform.content_size();
    let outside_raw = (cfg.pad_value + 1.0) * 127.5;
    // Supersample when shrinking so thin structures are not skipped.
    let ss = (1.0 / transform.scale).ceil().clamp(1.0, 4.0) as usize;
    let inv_ss = 1.0 / ss as f64;
    let norm = 1.0 / (ss * ss) as f32;
    let mut pixels = vec![cfg.pad_value; 3 * size * size];
    for v in 0..size {
        if v as f64 + 0.5 > content_h {
            break;
        }
        for u in 0..size {
            if u as f64 + 0.5 > content_w {
                break;
            }
            let mut acc = [0.0f32; 3];
            for sy in 0..ss {
                for sx in 0..ss {
                    let pu = u as f64 + (sx as f64 + 0.5) * inv_ss;
                    let pv = v as f64 + (sy as f64 + 0.5) * inv_ss;
                    let (x, y) = transform.patch_to_image(pu, pv);
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += bilinear(&image.rgb, c, x, y, outside_raw);
                    }
                }
            }
            for (c, a) in acc.iter().enumerate() {
                pixels[(c * size + v) * size + u] = normalize(a * norm).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(ImagePatch {
        pixels,
        size,
        transform,
        image_id: image.id.clone(),
    })
}

/// The randomly perturbed crop window a training draw uses for `true_box`.
pub fn training_window<R: Rng + ?Sized>(true_box: &BBox, cfg: &SampleConfig, rng: &mut R) -> BBox {
    perturb(&expand(true_box, cfg.expand_ratio), &cfg.error_model, rng)
}

/// Expand → perturb → crop → letterbox → normalize, with the true box mapped
/// into patch coordinates as the regression target.
pub fn sample_training_patch<R: Rng + ?Sized>(
    image: &SourceImage,
    instance: &LabeledInstance,
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<(ImagePatch, [f64; 4]), DatasetError> {
    let truth = instance.require_true_box()?;
    let window = training_window(&truth, cfg, rng);
    let patch = crop_patch(image, &window, cfg)?;
    let targets = patch.transform.to_patch_coords(&truth);
    Ok((patch, targets))
}

/// Deterministic crop around a rough box: expansion only, no perturbation.
pub fn make_inference_patch(
    image: &SourceImage,
    rough_box: &BBox,
    cfg: &SampleConfig,
) -> Result<ImagePatch, DatasetError> {
    crop_patch(image, &expand(rough_box, cfg.expand_ratio), cfg)
}
