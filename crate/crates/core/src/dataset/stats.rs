use super::DatasetError;
use crate::geometry::{BBox, EdgeErrorModel};

/// Signed (left, right, top, bottom) displacement of `pre` from `truth`,
/// divided by the true width (x-edges) or height (y-edges).
pub fn edge_error_ratios(truth: &BBox, pre: &BBox) -> [f64; 4] {
    let (w, h) = (truth.width(), truth.height());
    [
        (pre.x_min() - truth.x_min()) / w,
        (pre.x_max() - truth.x_max()) / w,
        (pre.y_min() - truth.y_min()) / h,
        (pre.y_max() - truth.y_max()) / h,
    ]
}

fn mean_and_sample_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Fits per-group Gaussian edge statistics from `(true_box, prelabel_box)`
/// pairs. Left and right ratios pool into the vertical group; top and
/// bottom into the horizontal group.
pub fn fit_error_model(pairs: &[(BBox, BBox)]) -> Result<EdgeErrorModel, DatasetError> {
    if pairs.len() < 2 {
        return Err(DatasetError::InsufficientData {
            needed: 2,
            got: pairs.len(),
        });
    }
    let mut vertical = Vec::with_capacity(2 * pairs.len());
    let mut horizontal = Vec::with_capacity(2 * pairs.len());
    for (truth, pre) in pairs {
        let r = edge_error_ratios(truth, pre);
        vertical.extend([r[0], r[1]]);
        horizontal.extend([r[2], r[3]]);
    }
    let (mean_vertical, sigma_vertical) = mean_and_sample_std(&vertical);
    let (mean_horizontal, sigma_horizontal) = mean_and_sample_std(&horizontal);
    Ok(EdgeErrorModel {
        mean_vertical,
        sigma_vertical,
        mean_horizontal,
        sigma_horizontal,
        scale: 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::perturb;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_prelabels_fit_zero() {
        let b = BBox::new(0.0, 0.0, 10.0, 20.0).unwrap();
        let m = fit_error_model(&[(b, b), (b, b), (b, b)]).unwrap();
        assert_eq!(m, EdgeErrorModel::zero());
    }

    #[test]
    fn too_few_pairs() {
        let b = BBox::new(0.0, 0.0, 10.0, 20.0).unwrap();
        assert!(matches!(
            fit_error_model(&[(b, b)]),
            Err(DatasetError::InsufficientData { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn symmetric_vertical_errors() {
        let truth = BBox::new(0.0, 0.0, 100.0, 100.0).unwrap();
        let pre = BBox::new(10.0, 0.0, 90.0, 100.0).unwrap();
        let m = fit_error_model(&[(truth, pre), (truth, pre)]).unwrap();
        assert!(m.mean_vertical.abs() < 1e-15);
        // sample std of {+0.1, -0.1, +0.1, -0.1}
        let expected = (4.0 * 0.01 / 3.0f64).sqrt();
        assert!((m.sigma_vertical - expected).abs() < 1e-12);
        assert_eq!(m.sigma_horizontal, 0.0);
    }

    #[test]
    fn recovers_generating_sigmas() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let model = EdgeErrorModel::default();
        let pairs: Vec<(BBox, BBox)> = (0..10_000)
            .map(|_| {
                let x = rng.random_range(0.0..500.0);
                let y = rng.random_range(0.0..500.0);
                let w = rng.random_range(20.0..200.0);
                let h = rng.random_range(40.0..300.0);
                let truth = BBox::new(x, y, x + w, y + h).unwrap();
                (truth, perturb(&truth, &model, &mut rng))
            })
            .collect();
        let fit = fit_error_model(&pairs).unwrap();
        assert!((fit.sigma_vertical - 0.08).abs() / 0.08 < 0.05, "{fit:?}");
        assert!((fit.sigma_horizontal - 0.14).abs() / 0.14 < 0.05, "{fit:?}");
        assert!(fit.mean_vertical.abs() < 0.01 && fit.mean_horizontal.abs() < 0.01);
    }
}
