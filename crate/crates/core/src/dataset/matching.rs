use crate::geometry::{iou, BBox};

/// Greedy one-to-one matching of pre-labels to ground truth.
///
/// Candidate pairs with IoU ≥ `iou_threshold` are taken in descending IoU
/// order (ties broken by ground-truth then pre-label index); a pair is kept
/// when neither side is already matched. Returns `(gt index, pre index)`
/// sorted by ground-truth index.
pub fn match_prelabels(gt: &[BBox], pre: &[BBox], iou_threshold: f64) -> Vec<(usize, usize)> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pre.iter().enumerate() {
            let v = iou(g, p);
            if v >= iou_threshold {
                candidates.push((v, i, j));
            }
        }
    }
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_used = vec![false; gt.len()];
    let mut pre_used = vec![false; pre.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !gt_used[i] && !pre_used[j] {
            gt_used[i] = true;
            pre_used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(a: f64, b: f64, c: f64, d: f64) -> BBox {
        BBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn keeps_only_pairs_above_threshold() {
        let gt = [bb(0.0, 0.0, 10.0, 10.0)];
        // IoU 0.6 and 0.4 with the ground truth
        let pre = [bb(0.0, 0.0, 10.0, 6.0), bb(0.0, 0.0, 4.0, 10.0)];
        assert!((iou(&gt[0], &pre[0]) - 0.6).abs() < 1e-12);
        assert!((iou(&gt[0], &pre[1]) - 0.4).abs() < 1e-12);
        assert_eq!(match_prelabels(&gt, &pre, 0.5), vec![(0, 0)]);
    }

    #[test]
    fn identical_lists_pair_up() {
        let boxes = [
            bb(0.0, 0.0, 10.0, 10.0),
            bb(20.0, 0.0, 30.0, 10.0),
            bb(40.0, 40.0, 45.0, 60.0),
        ];
        assert_eq!(match_prelabels(&boxes, &boxes, 0.5), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn each_prelabel_used_once() {
        let gt = [bb(0.0, 0.0, 10.0, 10.0), bb(1.0, 0.0, 11.0, 10.0)];
        let pre = [bb(0.5, 0.0, 10.5, 10.0)];
        let pairs = match_prelabels(&gt, &pre, 0.5);
        assert_eq!(pairs.len(), 1);
    }

    #[test]
    fn empty_inputs() {
        assert!(match_prelabels(&[], &[bb(0.0, 0.0, 1.0, 1.0)], 0.5).is_empty());
        assert!(match_prelabels(&[bb(0.0, 0.0, 1.0, 1.0)], &[], 0.5).is_empty());
    }
}
