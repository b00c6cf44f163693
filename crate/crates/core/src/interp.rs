//! Keyframe tracks: linear interpolation between human-labeled key frames
//! and model refinement of the in-between pre-labels.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{LabelSource, SampleConfig, SourceImage};
use crate::geometry::BBox;
use crate::model::{refine_many, ModelError, Regressor};

#[derive(Debug, Error)]
pub enum InterpError {
    #[error("invalid track: {0}")]
    InvalidTrack(String),
    #[error("no image for frame {0}")]
    MissingFrame(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("track file {path}: {message}")]
    Parse { path: std::path::PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTrack")]
pub struct TrackSequence {
    pub track_id: String,
    pub key_interval: usize,
    keyframes: Vec<Keyframe>,
}

#[derive(Deserialize)]
struct RawTrack {
    track_id: String,
    key_interval: usize,
    keyframes: Vec<Keyframe>,
}

impl TryFrom<RawTrack> for TrackSequence {
    type Error = InterpError;

    fn try_from(r: RawTrack) -> Result<Self, Self::Error> {
        Self::new(r.track_id, r.key_interval, r.keyframes)
    }
}

impl TrackSequence {
    pub fn new(track_id: impl Into<String>, key_interval: usize, keyframes: Vec<Keyframe>) -> Result<Self, InterpError> {
        if keyframes.len() < 2 {
            return Err(InterpError::InvalidTrack("at least two keyframes are required".into()));
        }
        if keyframes.windows(2).any(|w| w[0].frame >= w[1].frame) {
            return Err(InterpError::InvalidTrack("keyframe indices must be strictly increasing".into()));
        }
        if key_interval == 0 {
            return Err(InterpError::InvalidTrack("key_interval must be >= 1".into()));
        }
        Ok(Self {
            track_id: track_id.into(),
            key_interval,
            keyframes,
        })
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn first_frame(&self) -> usize {
        self.keyframes[0].frame
    }

    pub fn last_frame(&self) -> usize {
        self.keyframes[self.keyframes.len() - 1].frame
    }

    pub fn is_keyframe(&self, frame: usize) -> bool {
        self.keyframes.binary_search_by_key(&frame, |k| k.frame).is_ok()
    }

    pub fn load(path: &Path) -> Result<Self, InterpError> {
        let text = std::fs::read_to_string(path).map_err(|source| InterpError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| InterpError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), InterpError> {
        let text = serde_json::to_string_pretty(self).expect("track serializes") + "\n";
        std::fs::write(path, text).map_err(|source| InterpError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn lerp_box(a: &BBox, b: &BBox, t: f64) -> BBox {
    let (pa, pb) = (a.to_array(), b.to_array());
    let c: [f64; 4] = std::array::from_fn(|i| pa[i] + t * (pb[i] - pa[i]));
    BBox::from_array(c).expect("a blend of two valid boxes is valid")
}

/// One box per frame from the first to the last keyframe; keyframes are
/// reproduced exactly and nothing outside the span is extrapolated.
pub fn interpolate_track(seq: &TrackSequence) -> Vec<(usize, BBox)> {
    let mut out = Vec::with_capacity(seq.last_frame() - seq.first_frame() + 1);
    for w in seq.keyframes.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let gap = (b.frame - a.frame) as f64;
        out.push((a.frame, a.bbox));
        for f in a.frame + 1..b.frame {
            out.push((f, lerp_box(&a.bbox, &b.bbox, (f - a.frame) as f64 / gap)));
        }
    }
    let last = seq.keyframes[seq.keyframes.len() - 1];
    out.push((last.frame, last.bbox));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackBox {
    pub frame: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub source: LabelSource,
}

/// Keyframes pass through as `human`; interpolated boxes are refined and
/// marked `model`. A frame the refiner cannot handle keeps its interpolated
/// box, marked `tracker`.
pub fn refine_track(
    model: &dyn Regressor,
    images: &BTreeMap<usize, SourceImage>,
    seq: &TrackSequence,
    sample_cfg: &SampleConfig,
) -> Result<Vec<TrackBox>, InterpError> {
    let interpolated = interpolate_track(seq);
    let mut pending = Vec::new();
    for &(frame, b) in &interpolated {
        if !seq.is_keyframe(frame) {
            let img = images.get(&frame).ok_or(InterpError::MissingFrame(frame))?;
            pending.push((img, b));
        }
    }
    let mut refined = refine_many(model, &pending, sample_cfg, 32)?.into_iter();
    Ok(interpolated
        .into_iter()
        .map(|(frame, b)| {
            if seq.is_keyframe(frame) {
                return TrackBox {
                    frame,
                    bbox: b,
                    source: LabelSource::Human,
                };
            }
            match refined.next().expect("one result per interpolated frame") {
                Ok(r) => TrackBox {
                    frame,
                    bbox: r,
                    source: LabelSource::Model,
                },
                Err(_) => TrackBox {
                    frame,
                    bbox: b,
                    source: LabelSource::Tracker,
                },
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{synth_sequence, Background};
    use crate::model::TruthEcho;
    use proptest::prelude::*;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    fn two_keys() -> TrackSequence {
        TrackSequence::new(
            "t",
            5,
            vec![
                Keyframe { frame: 0, bbox: bb(0.0, 0.0, 10.0, 10.0) },
                Keyframe { frame: 5, bbox: bb(10.0, 10.0, 20.0, 20.0) },
            ],
        )
        .unwrap()
    }

    #[test]
    fn linear_blend() {
        let out = interpolate_track(&two_keys());
        assert_eq!(out.len(), 6);
        let (f, b) = out[2];
        assert_eq!(f, 2);
        for (a, e) in b.to_array().iter().zip([4.0, 4.0, 14.0, 14.0]) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(out[0].1, bb(0.0, 0.0, 10.0, 10.0));
        assert_eq!(out[5].1, bb(10.0, 10.0, 20.0, 20.0));
    }

    #[test]
    fn constant_track() {
        let b = bb(3.0, 4.0, 30.0, 50.0);
        let seq = TrackSequence::new("c", 4, vec![Keyframe { frame: 2, bbox: b }, Keyframe { frame: 9, bbox: b }]).unwrap();
        let out = interpolate_track(&seq);
        assert_eq!(out.iter().map(|x| x.0).collect::<Vec<_>>(), (2..=9).collect::<Vec<_>>());
        assert!(out.iter().all(|(_, x)| *x == b));
    }

    #[test]
    fn invalid_tracks() {
        let k = Keyframe { frame: 3, bbox: bb(0.0, 0.0, 1.0, 1.0) };
        assert!(TrackSequence::new("x", 5, vec![k]).is_err());
        assert!(TrackSequence::new("x", 5, vec![k, k]).is_err());
        let bad = r#"{"track_id":"a","key_interval":5,"keyframes":[{"frame":4,"box":[0,0,1,1]},{"frame":2,"box":[0,0,1,1]}]}"#;
        assert!(serde_json::from_str::<TrackSequence>(bad).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("track.json");
        let seq = two_keys();
        seq.save(&path).unwrap();
        assert_eq!(TrackSequence::load(&path).unwrap(), seq);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["keyframes"][1]["frame"], 5);
        assert_eq!(v["keyframes"][1]["box"][2], 20.0);
    }

    fn arb_track() -> impl Strategy<Value = TrackSequence> {
        proptest::collection::vec(
            (1usize..8, -100.0..100.0f64, -100.0..100.0f64, 1.0..50.0f64, 1.0..50.0f64),
            2..6,
        )
        .prop_map(|keys| {
            let mut frame = 0;
            let kf = keys
                .into_iter()
                .map(|(gap, x, y, w, h)| {
                    frame += gap;
                    Keyframe { frame, bbox: bb(x, y, x + w, y + h) }
                })
                .collect();
            TrackSequence::new("p", 5, kf).unwrap()
        })
    }

    proptest! {
        #[test]
        fn covers_span_and_is_affine(seq in arb_track()) {
            let out = interpolate_track(&seq);
            let frames: Vec<usize> = out.iter().map(|x| x.0).collect();
            prop_assert_eq!(frames, (seq.first_frame()..=seq.last_frame()).collect::<Vec<_>>());
            for k in seq.keyframes() {
                prop_assert_eq!(out[k.frame - seq.first_frame()].1, k.bbox);
            }
            for w in seq.keyframes().windows(2) {
                let s = w[0].frame - seq.first_frame();
                let e = w[1].frame - seq.first_frame();
                for i in s + 1..e {
                    let (a, b, c) = (out[i - 1].1.to_array(), out[i].1.to_array(), out[i + 1].1.to_array());
                    for j in 0..4 {
                        prop_assert!((a[j] - 2.0 * b[j] + c[j]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn truth_echo_recovers_sequence_truth() {
        let frames = synth_sequence(4, 21, 160, 120, Background::Noise);
        let cfg = SampleConfig { patch_size: 64, ..SampleConfig::default() };
        let mut echo = TruthEcho::new(64);
        let mut images = BTreeMap::new();
        for (t, (img, truth)) in frames.iter().enumerate() {
            echo.insert(img.id.clone(), *truth);
            images.insert(t, img.clone());
        }
        let keys = (0..frames.len())
            .step_by(5)
            .map(|f| Keyframe { frame: f, bbox: frames[f].1 })
            .collect();
        let seq = TrackSequence::new("s", 5, keys).unwrap();
        let out = refine_track(&echo, &images, &seq, &cfg).unwrap();
        assert_eq!(out, refine_track(&echo, &images, &seq, &cfg).unwrap());
        for tb in &out {
            let truth = frames[tb.frame].1.to_array();
            for (a, b) in tb.bbox.to_array().iter().zip(truth) {
                assert!((a - b).abs() < 1e-6, "frame {}", tb.frame);
            }
            let expected = if seq.is_keyframe(tb.frame) { LabelSource::Human } else { LabelSource::Model };
            assert_eq!(tb.source, expected);
        }
        for k in seq.keyframes() {
            assert_eq!(out[k.frame].bbox.to_array().map(f64::to_bits), k.bbox.to_array().map(f64::to_bits));
        }
    }

    #[test]
    fn missing_frame() {
        let seq = two_keys();
        let echo = TruthEcho::new(64);
        let cfg = SampleConfig { patch_size: 64, ..SampleConfig::default() };
        assert!(matches!(
            refine_track(&echo, &BTreeMap::new(), &seq, &cfg),
            Err(InterpError::MissingFrame(1))
        ));
    }
}
