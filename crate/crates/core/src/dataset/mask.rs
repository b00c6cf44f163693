use std::collections::BTreeMap;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use super::DatasetError;
use crate::geometry::BBox;

/// Per-pixel instance ids, row-major; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMask {
    width: usize,
    height: usize,
    ids: Vec<u32>,
}

impl InstanceMask {
    pub fn new(width: usize, height: usize, ids: Vec<u32>) -> Result<Self, DatasetError> {
        if ids.len() != width * height {
            return Err(DatasetError::InvalidConfig(format!(
                "mask has {} ids for {width}x{height}",
                ids.len()
            )));
        }
        Ok(Self { width, height, ids })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            ids: vec![0; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, id: u32) {
        self.ids[y * self.width + x] = id;
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Reads a single-channel 8- or 16-bit PNG id map.
    pub fn load_png(path: &Path) -> Result<Self, DatasetError> {
        let img = image::open(path).map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let ids = match img {
            DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
            DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(u32::from).collect(),
            other => {
                return Err(DatasetError::InvalidConfig(format!(
                    "{}: instance masks must be single-channel, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        Self::new(w, h, ids)
    }

    /// Writes a 16-bit grayscale PNG; ids above 65535 are rejected.
    pub fn save_png(&self, path: &Path) -> Result<(), DatasetError> {
        let raw = self
            .ids
            .iter()
            .map(|&id| u16::try_from(id))
            .collect::<Result<Vec<u16>, _>>()
            .map_err(|_| DatasetError::InvalidConfig("instance id exceeds 16 bits".into()))?;
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer sized from mask");
        buf.save(path).map_err(|source| DatasetError::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Human-readable class for a Cityscapes-style id (`class * 1000 + index`).
pub fn cityscapes_class_name(id: u32) -> String {
    let class = if id >= 1000 { id / 1000 } else { id };
    match class {
        24 => "person".into(),
        25 => "rider".into(),
        26 => "car".into(),
        27 => "truck".into(),
        28 => "bus".into(),
        31 => "train".into(),
        32 => "motorcycle".into(),
        33 => "bicycle".into(),
        other => format!("class_{other}"),
    }
}

/// Tight boxes of every instance id.
///
/// Pixels are grouped into 4-connected components of equal id; components
/// smaller than `min_pixels` are dropped and the survivors of each id are
/// merged into one box. Output is sorted by id.
pub fn mask_to_instances(mask: &InstanceMask, min_pixels: usize) -> Vec<(u32, BBox)> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut boxes: BTreeMap<u32, [usize; 4]> = BTreeMap::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        let id = mask.ids[start];
        if id == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut count = 0usize;
        let mut ext = [usize::MAX, usize::MAX, 0, 0];
        while let Some(idx) = stack.pop() {
            count += 1;
            let (x, y) = (idx % w, idx / w);
            ext[0] = ext[0].min(x);
            ext[1] = ext[1].min(y);
            ext[2] = ext[2].max(x);
            ext[3] = ext[3].max(y);
            let mut visit = |n: usize| {
                if !seen[n] && mask.ids[n] == id {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if x > 0 {
                visit(idx - 1);
            }
            if x + 1 < w {
                visit(idx + 1);
            }
            if y > 0 {
                visit(idx - w);
            }
            if y + 1 < h {
                visit(idx + w);
            }
        }
        if count < min_pixels {
            continue;
        }
        boxes
            .entry(id)
            .and_modify(|b| {
                b[0] = b[0].min(ext[0]);
                b[1] = b[1].min(ext[1]);
                b[2] = b[2].max(ext[2]);
                b[3] = b[3].max(ext[3]);
            })
            .or_insert(ext);
    }
    boxes
        .into_iter()
        .map(|(id, e)| {
            let b = BBox::new(e[0] as f64, e[1] as f64, (e[2] + 1) as f64, (e[3] + 1) as f64)
                .expect("non-empty component");
            (id, b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_block() {
        let mut m = InstanceMask::zeros(10, 8);
        for y in 2..=4 {
            for x in 3..=7 {
                m.set(x, y, 7);
            }
        }
        let out = mask_to_instances(&m, 1);
        assert_eq!(out, vec![(7, BBox::new(3.0, 2.0, 8.0, 5.0).unwrap())]);
    }

    #[test]
    fn empty_mask() {
        assert!(mask_to_instances(&InstanceMask::zeros(5, 5), 1).is_empty());
    }

    #[test]
    fn slivers_below_threshold_are_dropped() {
        let mut m = InstanceMask::zeros(20, 20);
        for y in 0..10 {
            for x in 0..10 {
                m.set(x, y, 3);
            }
        }
        // Diagonal neighbour is not 4-connected.
        m.set(15, 15, 3);
        m.set(19, 19, 4);
        let out = mask_to_instances(&m, 2);
        assert_eq!(out, vec![(3, BBox::new(0.0, 0.0, 10.0, 10.0).unwrap())]);
        let all = mask_to_instances(&m, 1);
        assert_eq!(all[0], (3, BBox::new(0.0, 0.0, 16.0, 16.0).unwrap()));
        assert_eq!(all[1], (4, BBox::new(19.0, 19.0, 20.0, 20.0).unwrap()));
    }

    #[test]
    fn matches_pixel_scan_on_two_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut m = InstanceMask::zeros(64, 64);
        for y in 0..64 {
            for x in 0..64 {
                let r: f64 = rng.random();
                m.set(x, y, if r < 0.02 { 24001 } else if r < 0.03 { 26002 } else { 0 });
            }
        }
        let out = mask_to_instances(&m, 1);
        for (id, b) in out {
            let (mut x0, mut y0, mut x1, mut y1) = (64, 64, 0, 0);
            for y in 0..64 {
                for x in 0..64 {
                    if m.get(x, y) == id {
                        x0 = x0.min(x);
                        y0 = y0.min(y);
                        x1 = x1.max(x + 1);
                        y1 = y1.max(y + 1);
                    }
                }
            }
            assert_eq!(b.to_array(), [x0 as f64, y0 as f64, x1 as f64, y1 as f64]);
        }
    }

    #[test]
    fn png_round_trip_keeps_16_bit_ids() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        let mut m = InstanceMask::zeros(6, 4);
        m.set(1, 1, 24003);
        m.set(5, 3, 65535);
        m.save_png(&path).unwrap();
        assert_eq!(InstanceMask::load_png(&path).unwrap(), m);
    }

    #[test]
    fn class_names() {
        assert_eq!(cityscapes_class_name(24001), "person");
        assert_eq!(cityscapes_class_name(26), "car");
        assert_eq!(cityscapes_class_name(7), "class_7");
    }
}
