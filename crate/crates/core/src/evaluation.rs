//! Edge-precision metrics: MAE/LE (mean absolute edge error as a percentage
//! of the true box's longest edge) and tolerance tables, before and after
//! refinement.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::dataset::{item_rng, DatasetError, ImageSet, LabeledInstance, SampleConfig};
use crate::geometry::{edge_errors, perturb, BBox, EdgeErrorModel};
use crate::model::{refine_many, ModelError, Regressor};

/// Epoch slot of the random streams used for perturbed_gt rough boxes, far
/// from any training epoch.
pub const EVAL_EPOCH: u64 = 0xE_FA11;

const ASSUMPTION_MATCHED: &str =
    "tolerance and MAE/LE statistics count edges of matched (pre-label, truth) pairs only";
const ASSUMPTION_INCLUSIVE: &str = "an edge is within tolerance t when its error is <= t% of the true longest edge";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metric input is empty")]
    EmptyInput,
    #[error("no instances to evaluate")]
    EmptyDataset,
    #[error("{count} instance(s) lack a pre-label box, first on image {first}")]
    MissingPrelabels { count: usize, first: String },
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Rough boxes are the instances' stored pre-labels.
    Prelabel,
    /// Rough boxes are seeded perturbations of the true boxes.
    #[default]
    PerturbedGt,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Prelabel => "prelabel",
            Scenario::PerturbedGt => "perturbed_gt",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "prelabel" => Ok(Self::Prelabel),
            "perturbed_gt" => Ok(Self::PerturbedGt),
            other => Err(EvalError::InvalidConfig(format!("unknown scenario {other:?}"))),
        }
    }
}

/// How edge errors are normalized before averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Each edge error divided by its own box's longest edge, then averaged.
    #[default]
    PerBox,
    /// Total edge error divided by total longest-edge length.
    Pooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tolerances: Vec<f64>,
    pub scenario: Scenario,
    pub error_model: EdgeErrorModel,
    pub seed: u64,
    pub normalization: Normalization,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tolerances: vec![1.0, 2.0, 3.0, 4.0, 5.0],
            scenario: Scenario::PerturbedGt,
            error_model: EdgeErrorModel::default(),
            seed: 0,
            normalization: Normalization::PerBox,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        validate_tolerances(&self.tolerances)?;
        self.error_model
            .validate()
            .map_err(|e| EvalError::InvalidConfig(e.to_string()))
    }
}

fn validate_tolerances(t: &[f64]) -> Result<(), EvalError> {
    if t.is_empty() {
        return Err(EvalError::InvalidConfig("tolerances must not be empty".into()));
    }
    if !t.iter().all(|v| v.is_finite() && *v > 0.0) {
        return Err(EvalError::InvalidConfig("tolerances must be positive".into()));
    }
    if t.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::InvalidConfig("tolerances must be strictly increasing".into()));
    }
    Ok(())
}

/// MAE/LE in percent over `(pred, truth)` pairs, per-box normalization.
pub fn mae_le(pairs: &[(BBox, BBox)]) -> Result<f64, EvalError> {
    mae_le_with(pairs, Normalization::PerBox)
}

pub fn mae_le_with(pairs: &[(BBox, BBox)], normalization: Normalization) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    match normalization {
        Normalization::PerBox => {
            let sum: f64 = pairs
                .iter()
                .map(|(p, t)| edge_errors(p, t).iter().sum::<f64>() / t.longest_edge())
                .sum();
            Ok(100.0 * sum / (4 * pairs.len()) as f64)
        }
        Normalization::Pooled => {
            let (err, le) = pairs.iter().fold((0.0, 0.0), |(e, l), (p, t)| {
                (e + edge_errors(p, t).iter().sum::<f64>(), l + 4.0 * t.longest_edge())
            });
            Ok(100.0 * err / le)
        }
    }
}

/// MAE/LE of each edge type separately, ordered (left, right, top, bottom).
pub fn mae_le_per_edge(pairs: &[(BBox, BBox)]) -> Result<[f64; 4], EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut acc = [0.0; 4];
    for (p, t) in pairs {
        let le = t.longest_edge();
        for (a, e) in acc.iter_mut().zip(edge_errors(p, t)) {
            *a += e / le;
        }
    }
    Ok(acc.map(|a| 100.0 * a / pairs.len() as f64))
}

/// Fraction of edges with error ≤ t% of the true longest edge, per tolerance.
pub fn tolerance_table(pairs: &[(BBox, BBox)], tolerances: &[f64]) -> Result<Vec<(f64, f64)>, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    validate_tolerances(tolerances)?;
    let ratios: Vec<f64> = pairs
        .iter()
        .flat_map(|(p, t)| {
            let le = t.longest_edge();
            edge_errors(p, t).map(|e| e / le)
        })
        .collect();
    let n = ratios.len() as f64;
    Ok(tolerances
        .iter()
        .map(|&t| {
            let cutoff = t / 100.0;
            (t, ratios.iter().filter(|&&r| r <= cutoff).count() as f64 / n)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeforeAfter {
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeBreakdown {
    pub left: BeforeAfter,
    pub right: BeforeAfter,
    pub top: BeforeAfter,
    pub bottom: BeforeAfter,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToleranceRow {
    pub tolerance: f64,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_boxes: usize,
    pub n_edges: usize,
    pub scenario: Scenario,
    pub seed: u64,
    pub normalization: Normalization,
    pub mae_le: BeforeAfter,
    /// Ascending by tolerance.
    #[serde(serialize_with = "ser_tolerance", deserialize_with = "de_tolerance")]
    pub tolerance: Vec<ToleranceRow>,
    pub edges: EdgeBreakdown,
    /// Boxes the refiner could not produce; their rough box stands in.
    pub refine_failures: usize,
    pub assumptions: Vec<String>,
}

fn ser_tolerance<S: Serializer>(rows: &[ToleranceRow], s: S) -> Result<S::Ok, S::Error> {
    use serde::ser::SerializeMap;
    let mut map = s.serialize_map(Some(rows.len()))?;
    for r in rows {
        map.serialize_entry(
            &r.tolerance.to_string(),
            &BeforeAfter {
                before: r.before,
                after: r.after,
            },
        )?;
    }
    map.end()
}

fn de_tolerance<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<ToleranceRow>, D::Error> {
    let raw = BTreeMap::<String, BeforeAfter>::deserialize(d)?;
    let mut rows = raw
        .into_iter()
        .map(|(k, v)| {
            let tolerance: f64 = k
                .parse()
                .map_err(|_| D::Error::custom(format!("tolerance key {k:?} is not a number")))?;
            Ok(ToleranceRow {
                tolerance,
                before: v.before,
                after: v.after,
            })
        })
        .collect::<Result<Vec<_>, D::Error>>()?;
    rows.sort_by(|a, b| a.tolerance.total_cmp(&b.tolerance));
    Ok(rows)
}

impl EvalReport {
    /// Builds a report from paired before/after boxes over the same truths.
    pub fn from_pairs(
        before: &[(BBox, BBox)],
        after: &[(BBox, BBox)],
        cfg: &EvalConfig,
        refine_failures: usize,
    ) -> Result<Self, EvalError> {
        if before.len() != after.len() {
            return Err(EvalError::InvalidConfig("before and after pair counts differ".into()));
        }
        let tb = tolerance_table(before, &cfg.tolerances)?;
        let ta = tolerance_table(after, &cfg.tolerances)?;
        let eb = mae_le_per_edge(before)?;
        let ea = mae_le_per_edge(after)?;
        let edge = |i: usize| BeforeAfter {
            before: eb[i],
            after: ea[i],
        };
        Ok(Self {
            n_boxes: before.len(),
            n_edges: 4 * before.len(),
            scenario: cfg.scenario,
            seed: cfg.seed,
            normalization: cfg.normalization,
            mae_le: BeforeAfter {
                before: mae_le_with(before, cfg.normalization)?,
                after: mae_le_with(after, cfg.normalization)?,
            },
            tolerance: tb
                .iter()
                .zip(&ta)
                .map(|(&(t, b), &(_, a))| ToleranceRow {
                    tolerance: t,
                    before: b,
                    after: a,
                })
                .collect(),
            edges: EdgeBreakdown {
                left: edge(0),
                right: edge(1),
                top: edge(2),
                bottom: edge(3),
            },
            refine_failures,
            assumptions: vec![ASSUMPTION_MATCHED.into(), ASSUMPTION_INCLUSIVE.into()],
        })
    }

    pub fn tolerance_at(&self, t: f64) -> Option<&ToleranceRow> {
        self.tolerance.iter().find(|r| r.tolerance == t)
    }
}

/// Rough boxes the chosen scenario feeds to the refiner, in instance order.
pub fn rough_boxes(instances: &[LabeledInstance], cfg: &EvalConfig) -> Result<Vec<BBox>, EvalError> {
    match cfg.scenario {
        Scenario::Prelabel => {
            let missing: Vec<&LabeledInstance> = instances.iter().filter(|i| i.prelabel_box.is_none()).collect();
            if let Some(first) = missing.first() {
                return Err(EvalError::MissingPrelabels {
                    count: missing.len(),
                    first: first.image_id.clone(),
                });
            }
            Ok(instances.iter().filter_map(|i| i.prelabel_box).collect())
        }
        Scenario::PerturbedGt => instances
            .iter()
            .enumerate()
            .map(|(i, inst)| {
                let truth = inst.require_true_box()?;
                let mut rng = item_rng(cfg.seed, EVAL_EPOCH, i as u64);
                Ok(perturb(&truth, &cfg.error_model, &mut rng))
            })
            .collect(),
    }
}

/// Refines every instance's rough box and reports metrics before and after.
pub fn evaluate(
    model: &dyn Regressor,
    instances: &[LabeledInstance],
    images: &ImageSet,
    sample_cfg: &SampleConfig,
    eval_cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    eval_cfg.validate()?;
    if instances.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let truths = instances
        .iter()
        .map(LabeledInstance::require_true_box)
        .collect::<Result<Vec<_>, _>>()?;
    let rough = rough_boxes(instances, eval_cfg)?;
    let items = instances
        .iter()
        .zip(&rough)
        .map(|(inst, b)| Ok((images.get(&inst.image_id)?, *b)))
        .collect::<Result<Vec<_>, DatasetError>>()?;
    let refined = refine_many(model, &items, sample_cfg, 32)?;
    let mut failures = 0;
    let after: Vec<(BBox, BBox)> = refined
        .into_iter()
        .zip(&rough)
        .zip(&truths)
        .map(|((r, rough), truth)| match r {
            Ok(b) => (b, *truth),
            Err(_) => {
                failures += 1;
                (*rough, *truth)
            }
        })
        .collect();
    let before: Vec<(BBox, BBox)> = rough.into_iter().zip(truths).collect();
    EvalReport::from_pairs(&before, &after, eval_cfg, failures)
}

/// Deterministic text table plus pretty JSON for a report.
pub fn report_render(report: &EvalReport) -> (String, String) {
    let mut text = String::new();
    let _ = writeln!(
        text,
        "scenario {}  seed {}  boxes {}  edges {}  normalization {}",
        report.scenario.as_str(),
        report.seed,
        report.n_boxes,
        report.n_edges,
        match report.normalization {
            Normalization::PerBox => "per_box",
            Normalization::Pooled => "pooled",
        }
    );
    let _ = writeln!(text, "{:<16}{:>10}{:>10}", "MAE/LE (%)", "before", "after");
    let _ = writeln!(text, "{:<16}{:>10.3}{:>10.3}", "all edges", report.mae_le.before, report.mae_le.after);
    for (name, ba) in [
        ("left", report.edges.left),
        ("right", report.edges.right),
        ("top", report.edges.top),
        ("bottom", report.edges.bottom),
    ] {
        let _ = writeln!(text, "{:<16}{:>10.3}{:>10.3}", name, ba.before, ba.after);
    }
    let _ = writeln!(text, "{:<16}{:>10}{:>10}", "within (%)", "before", "after");
    for row in &report.tolerance {
        let _ = writeln!(
            text,
            "{:<16}{:>10.1}{:>10.1}",
            format!("<= {}%", row.tolerance),
            100.0 * row.before,
            100.0 * row.after
        );
    }
    if report.refine_failures > 0 {
        let _ = writeln!(text, "refine failures: {}", report.refine_failures);
    }
    let json = serde_json::to_string_pretty(report).expect("report serializes") + "\n";
    (text, json)
}
