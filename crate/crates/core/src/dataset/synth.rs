//! Synthetic single-object scenes with exact tight boxes.
//!
//! Each image holds one filled, high-contrast silhouette (ellipse, capsule or
//! irregular polygon), usually taller than wide. Pixels are filled when their
//! center lies inside the shape, with no anti-aliasing, so the true box is the
//! tight box of the filled pixel set.

use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledInstance, SourceImage};
use crate::geometry::BBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Background {
    Flat,
    #[default]
    Noise,
    Texture,
}

impl std::str::FromStr for Background {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "flat" => Ok(Self::Flat),
            "noise" => Ok(Self::Noise),
            "texture" => Ok(Self::Texture),
            other => Err(format!("unknown background {other:?} (flat|noise|texture)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Silhouette {
    Ellipse {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        angle: f64,
    },
    /// Segment of half-length `half_length` swept by a disc of `radius`;
    /// vertical at angle 0.
    Capsule {
        cx: f64,
        cy: f64,
        half_length: f64,
        radius: f64,
        angle: f64,
    },
    /// Simple polygon, absolute vertex coordinates.
    Polygon { vertices: Vec<(f64, f64)> },
}

impl Silhouette {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self {
            Silhouette::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                let (s, c) = angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Silhouette::Capsule {
                cx,
                cy,
                half_length,
                radius,
                angle,
            } => {
                let (dx, dy) = (angle.sin(), angle.cos());
                let t = ((x - cx) * dx + (y - cy) * dy).clamp(-half_length, *half_length);
                let (px, py) = (cx + t * dx, cy + t * dy);
                (x - px).powi(2) + (y - py).powi(2) <= radius * radius
            }
            Silhouette::Polygon { vertices } => {
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (xi, yi) = vertices[i];
                    let (xj, yj) = vertices[(i + n - 1) % n];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                }
                inside
            }
        }
    }

    /// Axis-aligned region guaranteed to contain the shape.
    pub fn extent(&self) -> [f64; 4] {
        match self {
            Silhouette::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => {
                let (s, c) = angle.sin_cos();
                let ex = ((rx * c).powi(2) + (ry * s).powi(2)).sqrt();
                let ey = ((rx * s).powi(2) + (ry * c).powi(2)).sqrt();
                [cx - ex, cy - ey, cx + ex, cy + ey]
            }
            Silhouette::Capsule {
                cx,
                cy,
                half_length,
                radius,
                angle,
            } => {
                let ex = half_length * angle.sin().abs() + radius;
                let ey = half_length * angle.cos().abs() + radius;
                [cx - ex, cy - ey, cx + ex, cy + ey]
            }
            Silhouette::Polygon { vertices } => vertices.iter().fold(
                [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY],
                |e, &(x, y)| [e[0].min(x), e[1].min(y), e[2].max(x), e[3].max(y)],
            ),
        }
    }

    /// Moves and uniformly scales the shape about its own center.
    pub fn transformed(&self, dx: f64, dy: f64, scale: f64) -> Silhouette {
        match self {
            Silhouette::Ellipse {
                cx,
                cy,
                rx,
                ry,
                angle,
            } => Silhouette::Ellipse {
                cx: cx + dx,
                cy: cy + dy,
                rx: rx * scale,
                ry: ry * scale,
                angle: *angle,
            },
            Silhouette::Capsule {
                cx,
                cy,
                half_length,
                radius,
                angle,
            } => Silhouette::Capsule {
                cx: cx + dx,
                cy: cy + dy,
                half_length: half_length * scale,
                radius: radius * scale,
                angle: *angle,
            },
            Silhouette::Polygon { vertices } => {
                let e = self.extent();
                let (mx, my) = ((e[0] + e[2]) / 2.0, (e[1] + e[3]) / 2.0);
                Silhouette::Polygon {
                    vertices: vertices
                        .iter()
                        .map(|&(x, y)| (mx + dx + (x - mx) * scale, my + dy + (y - my) * scale))
                        .collect(),
                }
            }
        }
    }

    /// Row-major coverage of a `width × height` raster (pixel-center test).
    pub fn rasterize(&self, width: u32, height: u32) -> Vec<bool> {
        let mut out = vec![false; (width * height) as usize];
        let e = self.extent();
        let r0 = e[1].floor().max(0.0) as u32;
        let r1 = (e[3].ceil().max(0.0) as u32).min(height);
        let c0 = e[0].floor().max(0.0) as u32;
        let c1 = (e[2].ceil().max(0.0) as u32).min(width);
        for r in r0..r1 {
            for c in c0..c1 {
                if self.contains(c as f64 + 0.5, r as f64 + 0.5) {
                    out[(r * width + c) as usize] = true;
                }
            }
        }
        out
    }
}

/// Tight box of the set pixels of a row-major coverage grid.
pub fn coverage_box(coverage: &[bool], width: u32) -> Option<BBox> {
    let mut ext: Option<[u32; 4]> = None;
    for (idx, _) in coverage.iter().enumerate().filter(|(_, v)| **v) {
        let (c, r) = (idx as u32 % width, idx as u32 / width);
        ext = Some(match ext {
            None => [c, r, c, r],
            Some(e) => [e[0].min(c), e[1].min(r), e[2].max(c), e[3].max(r)],
        });
    }
    ext.map(|e| {
        BBox::new(e[0] as f64, e[1] as f64, (e[2] + 1) as f64, (e[3] + 1) as f64)
            .expect("non-empty coverage")
    })
}

/// Random shape, taller than wide on average, fully inside the image.
pub fn random_silhouette<R: Rng + ?Sized>(rng: &mut R, width: u32, height: u32) -> Silhouette {
    let (w, h) = (width as f64, height as f64);
    let obj_h = rng.random_range(0.3..0.65) * h.min(w * 1.6);
    let obj_w = obj_h * rng.random_range(0.3..0.75);
    let angle = rng.random_range(-0.25..0.25);
    let local = match rng.random_range(0..3) {
        0 => Silhouette::Ellipse {
            cx: 0.0,
            cy: 0.0,
            rx: obj_w / 2.0,
            ry: obj_h / 2.0,
            angle,
        },
        1 => {
            let radius = obj_w / 2.0;
            Silhouette::Capsule {
                cx: 0.0,
                cy: 0.0,
                half_length: (obj_h / 2.0 - radius).max(1.0),
                radius,
                angle,
            }
        }
        _ => {
            let k = rng.random_range(7..14);
            let (s, c) = f64::sin_cos(angle);
            let vertices = (0..k)
                .map(|i| {
                    let phi = 2.0 * PI * (i as f64 + rng.random_range(-0.3..0.3)) / k as f64;
                    let r = rng.random_range(0.7..1.0);
                    let (x, y) = (r * obj_w / 2.0 * phi.cos(), r * obj_h / 2.0 * phi.sin());
                    (x * c - y * s, x * s + y * c)
                })
                .collect();
            Silhouette::Polygon { vertices }
        }
    };
    let e = local.extent();
    let margin = 1.0;
    let lo_x = margin - e[0];
    let hi_x = (w - margin - e[2]).max(lo_x + 1e-6);
    let lo_y = margin - e[1];
    let hi_y = (h - margin - e[3]).max(lo_y + 1e-6);
    local.transformed(rng.random_range(lo_x..hi_x), rng.random_range(lo_y..hi_y), 1.0)
}

/// Colors and background pattern of one scene.
#[derive(Debug, Clone)]
pub struct SceneStyle {
    pub background: Background,
    pub bg: [f64; 3],
    pub fg: [f64; 3],
    pub stripe_angle: f64,
    pub stripe_period: f64,
}

impl SceneStyle {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, background: Background) -> Self {
        let level = rng.random_range(40.0..215.0);
        let contrast = rng.random_range(75.0..120.0);
        let up_ok = level + contrast <= 255.0;
        let down_ok = level - contrast >= 0.0;
        let fg_level: f64 = if up_ok && (!down_ok || rng.random_bool(0.5)) {
            level + contrast
        } else {
            level - contrast
        };
        let tint = |rng: &mut R, base: f64| {
            let t = rng.random_range(-20.0..20.0);
            [(base + t).clamp(0.0, 255.0), base, (base - t).clamp(0.0, 255.0)]
        };
        Self {
            background,
            bg: tint(rng, level),
            fg: tint(rng, fg_level),
            stripe_angle: rng.random_range(0.0..PI),
            stripe_period: rng.random_range(6.0..20.0),
        }
    }
}

/// Renders `shape` over a background; returns the image and the tight box.
pub fn render_scene<R: Rng + ?Sized>(
    shape: &Silhouette,
    style: &SceneStyle,
    width: u32,
    height: u32,
    rng: &mut R,
) -> (RgbImage, Option<BBox>) {
    let coverage = shape.rasterize(width, height);
    let (noise_bg, noise_fg) = match style.background {
        Background::Flat => (0.0, 0.0),
        Background::Noise => (30.0, 8.0),
        Background::Texture => (6.0, 8.0),
    };
    let (sa, ca) = style.stripe_angle.sin_cos();
    let mut img = RgbImage::new(width, height);
    for (idx, px) in img.pixels_mut().enumerate() {
        let (x, y) = ((idx as u32 % width) as f64, (idx as u32 / width) as f64);
        let inside = coverage[idx];
        let (base, amp) = if inside { (style.fg, noise_fg) } else { (style.bg, noise_bg) };
        let stripe = if !inside && style.background == Background::Texture {
            35.0 * (2.0 * PI * (x * ca + y * sa) / style.stripe_period).sin()
        } else {
            0.0
        };
        let mut rgb = [0u8; 3];
        for (c, v) in rgb.iter_mut().enumerate() {
            let n = if amp > 0.0 { rng.random_range(-amp..amp) } else { 0.0 };
            *v = (base[c] + stripe + n).round().clamp(0.0, 255.0) as u8;
        }
        *px = Rgb(rgb);
    }
    (img, coverage_box(&coverage, width))
}

/// `n` single-object scenes, reproducible from `seed`.
pub fn synth_generate(
    n: usize,
    seed: u64,
    width: u32,
    height: u32,
    background: Background,
) -> Vec<(SourceImage, LabeledInstance)> {
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64 + 1);
            let style = SceneStyle::random(&mut rng, background);
            loop {
                let shape = random_silhouette(&mut rng, width, height);
                let (img, tight) = render_scene(&shape, &style, width, height, &mut rng);
                if let Some(b) = tight.filter(|b| b.width() >= 4.0 && b.height() >= 4.0) {
                    let id = format!("synth_{i:05}.png");
                    let inst = LabeledInstance::ground_truth(id.clone(), "person", b);
                    return (SourceImage::new(id, img), inst);
                }
            }
        })
        .collect()
}

/// A clip of one shape moving on a sinusoidal path while its size breathes,
/// so velocity is never constant. Returns each frame with its true box.
pub fn synth_sequence(
    seed: u64,
    frames: usize,
    width: u32,
    height: u32,
    background: Background,
) -> Vec<(SourceImage, BBox)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let style = SceneStyle::random(&mut rng, background);
    let base_h = 0.45 * height as f64;
    let shape = Silhouette::Capsule {
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        half_length: base_h * 0.32,
        radius: base_h * 0.18,
        angle: rng.random_range(-0.1..0.1),
    };
    let amp_x = 0.22 * width as f64;
    let amp_y = 0.08 * height as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    (0..frames)
        .map(|t| {
            let tf = t as f64;
            let dx = amp_x * (2.0 * PI * tf / 18.0 + phase).sin();
            let dy = amp_y * (2.0 * PI * tf / 11.0).sin();
            let scale = 1.0 + 0.2 * (2.0 * PI * tf / 14.0).sin();
            let s = shape.transformed(dx, dy, scale);
            let (img, tight) = render_scene(&s, &style, width, height, &mut rng);
            let id = format!("frame_{t:04}.png");
            (SourceImage::new(id, img), tight.expect("shape stays in frame"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{mask_to_instances, InstanceMask};

    #[test]
    fn ellipse_tight_box_is_analytic() {
        let e = Silhouette::Ellipse {
            cx: 50.0,
            cy: 50.0,
            rx: 10.0,
            ry: 20.0,
            angle: 0.0,
        };
        let cov = e.rasterize(100, 100);
        assert_eq!(coverage_box(&cov, 100), Some(BBox::new(40.0, 30.0, 60.0, 70.0).unwrap()));
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = synth_generate(5, 9, 64, 64, Background::Texture);
        let b = synth_generate(5, 9, 64, 64, Background::Texture);
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1, y.1);
        }
        let c = synth_generate(5, 10, 64, 64, Background::Texture);
        assert_ne!(a[0].1, c[0].1);
    }

    #[test]
    fn prefix_of_larger_dataset_is_stable() {
        let small = synth_generate(3, 4, 64, 64, Background::Flat);
        let large = synth_generate(6, 4, 64, 64, Background::Flat);
        assert_eq!(small[2].1, large[2].1);
    }

    #[test]
    fn boxes_agree_with_mask_extraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..100 {
            let shape = random_silhouette(&mut rng, 96, 80);
            let cov = shape.rasterize(96, 80);
            let expected = coverage_box(&cov, 96).expect("shape visible");
            let mask = InstanceMask::new(96, 80, cov.iter().map(|&v| v as u32).collect()).unwrap();
            let found = mask_to_instances(&mask, 1);
            assert_eq!(found.len(), 1);
            assert_eq!(found[0].1, expected);
            // fully visible and tall on average
            let e = shape.extent();
            assert!(e[0] >= 0.0 && e[1] >= 0.0 && e[2] <= 96.0 && e[3] <= 80.0);
        }
    }

    #[test]
    fn shapes_are_mostly_tall() {
        let data = synth_generate(60, 3, 128, 128, Background::Noise);
        let tall = data.iter().filter(|(_, i)| {
            let b = i.true_box.unwrap();
            b.height() > b.width()
        });
        assert!(tall.count() > 45);
    }

    #[test]
    fn sequence_boxes_move_nonlinearly() {
        let seq = synth_sequence(1, 11, 160, 128, Background::Flat);
        assert_eq!(seq.len(), 11);
        let xs: Vec<f64> = seq.iter().map(|(_, b)| b.x_min()).collect();
        let second_diff: f64 = xs.windows(3).map(|w| (w[0] - 2.0 * w[1] + w[2]).abs()).sum();
        assert!(second_diff > 2.0);
        for (img, b) in &seq {
            assert!(b.x_min() >= 0.0 && b.x_max() <= img.width() as f64);
        }
    }
}
