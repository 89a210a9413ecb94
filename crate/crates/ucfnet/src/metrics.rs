//! Segmentation metrics for small-object detection: pixel-level IoU and
//! normalized IoU, object-level detection probability and false-alarm
//! rate with centroid matching, plus pooled ROC / precision-recall curves
//! with trapezoid AUC and the pixel F-score.
//!
//! Conventions that matter and are frozen by tests:
//! - IoU pools counts over the dataset (ratio of sums); nIoU averages the
//!   per-image ratios. The two coincide on single-image datasets.
//! - Components use 8-connectivity; centroids are unweighted coordinate
//!   means (row, col).
//! - A predicted component matches a ground-truth component iff their
//!   centroid distance is strictly less than the gate (default 4.0), with
//!   greedy nearest-first one-to-one assignment.
//! - Fa divides unmatched predicted pixels by total image pixels and is
//!   reported in units of 1e-6.
//! - Curves pool pixels across the dataset; binarization is p >= t; AUC
//!   uses the trapezoid rule, on the PR curve by default (ROC available).

use crate::nn::check_binary;
use crate::tensor::{Scalar, Tensor4};
use crate::{Error, Result};

use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Pixelwise counts for one image (or one pooled set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg + self.true_neg
    }

    /// Union of prediction and ground truth in pixels.
    pub fn union(&self) -> u64 {
        self.true_pos + self.false_pos + self.false_neg
    }
}

/// Pixelwise confusion between two binary masks of equal shape.
/// Thresholding is the caller's job; non-binary input is an error.
pub fn confusion<S: Scalar>(pred: &Tensor4<S>, gt: &Tensor4<S>) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "confusion: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    check_binary(pred, "confusion pred")?;
    check_binary(gt, "confusion gt")?;
    let mut c = ConfusionCounts::default();
    for (p, g) in pred.iter().zip(gt.iter()) {
        match (*p == S::one(), *g == S::one()) {
            (true, true) => c.true_pos += 1,
            (true, false) => c.false_pos += 1,
            (false, true) => c.false_neg += 1,
            (false, false) => c.true_neg += 1,
        }
    }
    Ok(c)
}

/// Dataset IoU: sum(tp) / sum(tp + fp + fn) over all images. A dataset
/// with no foreground and no predictions anywhere is degenerate and
/// defined as 1.0 (logged).
pub fn iou_dataset(counts: &[ConfusionCounts]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::data("iou_dataset: empty dataset"));
    }
    let tp: u64 = counts.iter().map(|c| c.true_pos).sum();
    let union: u64 = counts.iter().map(|c| c.union()).sum();
    if union == 0 {
        log::warn!("iou_dataset: no foreground and no predictions; defining IoU = 1.0");
        return Ok(1.0);
    }
    Ok(tp as f64 / union as f64)
}

/// Normalized IoU: the mean of per-image tp/union ratios. Images with an
/// empty union (nothing to find, nothing predicted) contribute 1.0.
pub fn niou_dataset(counts: &[ConfusionCounts]) -> Result<f64> {
    if counts.is_empty() {
        return Err(Error::data("niou_dataset: empty dataset"));
    }
    let sum: f64 = counts
        .iter()
        .map(|c| {
            if c.union() == 0 {
                1.0
            } else {
                c.true_pos as f64 / c.union() as f64
            }
        })
        .sum();
    Ok(sum / counts.len() as f64)
}

/// One 8-connected foreground component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// (row, col) coordinates of every member pixel.
    pub pixels: Vec<(usize, usize)>,
    /// Unweighted mean of member coordinates, (row, col).
    pub centroid: (f64, f64),
}

impl Component {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct LabeledComponents {
    pub components: Vec<Component>,
}

impl LabeledComponents {
    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }
}

/// 8-connected component labeling of a single-image binary mask
/// (shape [1, 1, h, w]).
pub fn connected_components<S: Scalar>(mask: &Tensor4<S>) -> Result<LabeledComponents> {
    let [n, c, h, w] = mask.shape();
    if n != 1 || c != 1 {
        return Err(Error::shape(format!(
            "connected_components: expected a single [1,1,h,w] mask, got {:?}",
            mask.shape()
        )));
    }
    check_binary(mask, "connected_components mask")?;
    let plane = mask.plane(0, 0);
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || plane[start] != S::one() {
            continue;
        }
        let mut pixels = Vec::new();
        seen[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (y, x) = (idx / w, idx % w);
            pixels.push((y, x));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let nidx = ny as usize * w + nx as usize;
                    if !seen[nidx] && plane[nidx] == S::one() {
                        seen[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        let inv = 1.0 / pixels.len() as f64;
        let cy = pixels.iter().map(|&(y, _)| y as f64).sum::<f64>() * inv;
        let cx = pixels.iter().map(|&(_, x)| x as f64).sum::<f64>() * inv;
        components.push(Component {
            pixels,
            centroid: (cy, cx),
        });
    }
    Ok(LabeledComponents { components })
}

/// Result of matching predicted components against ground-truth
/// components: index pairs plus leftovers on each side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub matched: Vec<(usize, usize)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// Default centroid-distance gate for object matching.
pub const MATCH_DISTANCE: f64 = 4.0;

/// Greedy one-to-one matching by ascending centroid distance; a pair is
/// admissible iff its Euclidean distance is strictly below `dist`. Ties
/// break on (pred index, gt index) so results are deterministic.
pub fn match_detections(
    pred: &LabeledComponents,
    gt: &LabeledComponents,
    dist: f64,
) -> MatchResult {
    let mut pairs = Vec::new();
    for (i, p) in pred.components.iter().enumerate() {
        for (j, g) in gt.components.iter().enumerate() {
            let d = ((p.centroid.0 - g.centroid.0).powi(2)
                + (p.centroid.1 - g.centroid.1).powi(2))
            .sqrt();
            if d < dist {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let mut pred_used = vec![false; pred.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut matched = Vec::new();
    for (_, i, j) in pairs {
        if !pred_used[i] && !gt_used[j] {
            pred_used[i] = true;
            gt_used[j] = true;
            matched.push((i, j));
        }
    }
    MatchResult {
        matched,
        unmatched_pred: (0..pred.len()).filter(|&i| !pred_used[i]).collect(),
        unmatched_gt: (0..gt.len()).filter(|&j| !gt_used[j]).collect(),
    }
}

/// Per-image object-detection tallies feeding Pd/Fa.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDetection {
    pub matched: usize,
    pub gt_total: usize,
    /// Pixels belonging to predicted components that matched nothing.
    pub false_pixels: u64,
    pub image_pixels: u64,
}

/// Components + matching + tallies for one (pred mask, gt mask) pair.
pub fn detect_image<S: Scalar>(
    pred: &Tensor4<S>,
    gt: &Tensor4<S>,
    dist: f64,
) -> Result<ImageDetection> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "detect_image: pred {:?} vs gt {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    let pred_cc = connected_components(pred)?;
    let gt_cc = connected_components(gt)?;
    let m = match_detections(&pred_cc, &gt_cc, dist);
    let false_pixels = m
        .unmatched_pred
        .iter()
        .map(|&i| pred_cc.components[i].len() as u64)
        .sum();
    Ok(ImageDetection {
        matched: m.matched.len(),
        gt_total: gt_cc.len(),
        false_pixels,
        image_pixels: pred.numel() as u64,
    })
}

/// Detection probability and false-alarm rate over a dataset.
///
/// Pd is the mean of matched/gt_total over images that contain at least
/// one ground-truth object (others are excluded); Fa is the mean of
/// false-alarm pixels over image pixels across ALL images, returned as a
/// raw fraction (callers scale by 1e6 for reporting).
pub fn pd_fa(items: &[ImageDetection]) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(Error::data("pd_fa: empty dataset"));
    }
    let (mut pd_sum, mut pd_n) = (0.0f64, 0usize);
    let mut fa_sum = 0.0f64;
    for it in items {
        if it.gt_total > 0 {
            pd_sum += it.matched as f64 / it.gt_total as f64;
            pd_n += 1;
        }
        fa_sum += it.false_pixels as f64 / it.image_pixels as f64;
    }
    if pd_n == 0 {
        return Err(Error::data("pd_fa: no ground-truth objects in the dataset"));
    }
    Ok((pd_sum / pd_n as f64, fa_sum / items.len() as f64))
}

/// One operating point of the pooled threshold sweep. `tpr` equals recall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub precision: f64,
}

/// Threshold sweep output: the point set plus both AUC readings and the
/// fixed-threshold F-score.
#[derive(Debug, Clone, PartialEq)]
pub struct Curves {
    /// Points in descending threshold order.
    pub points: Vec<RocPoint>,
    /// Trapezoid area under precision-vs-recall (the default AUC).
    pub pr_auc: f64,
    /// Trapezoid area under TPR-vs-FPR.
    pub roc_auc: f64,
    /// Pixel F1 at threshold 0.5.
    pub f_score: f64,
}

/// `count` evenly spaced thresholds from 1.0 down to 0.0, inclusive.
pub fn descending_thresholds(count: usize) -> Vec<f64> {
    assert!(count >= 2, "a sweep needs both endpoints");
    let last = (count - 1) as f64;
    (0..count).map(|i| 1.0 - i as f64 / last).collect()
}

/// 201 evenly spaced thresholds from 1.0 down to 0.0.
pub fn default_thresholds() -> Vec<f64> {
    descending_thresholds(201)
}

/// Pooled-pixel threshold sweep over a dataset of probability maps.
/// Binarization is p >= t. Requires at least one positive ground-truth
/// pixel (recall is undefined otherwise) and probabilities in [0, 1].
pub fn curve_and_auc<S: Scalar>(
    probs: &[Tensor4<S>],
    gts: &[Tensor4<S>],
    thresholds: &[f64],
) -> Result<Curves> {
    if probs.len() != gts.len() || probs.is_empty() {
        return Err(Error::data(format!(
            "curve_and_auc: {} prob maps vs {} masks",
            probs.len(),
            gts.len()
        )));
    }
    if thresholds.is_empty() {
        return Err(Error::data("curve_and_auc: empty threshold grid"));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (p, g) in probs.iter().zip(gts) {
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "curve_and_auc: prob {:?} vs gt {:?}",
                p.shape(),
                g.shape()
            )));
        }
        check_binary(g, "curve gt")?;
        for (pv, gv) in p.iter().zip(g.iter()) {
            let pf = pv.as_f64();
            if !(0.0..=1.0).contains(&pf) {
                return Err(Error::Numeric(format!(
                    "curve_and_auc: probability {pf} outside [0, 1]"
                )));
            }
            if *gv == S::one() {
                pos.push(pf);
            } else {
                neg.push(pf);
            }
        }
    }
    if pos.is_empty() {
        return Err(Error::data(
            "curve_and_auc: no positive pixels in ground truth; recall undefined",
        ));
    }
    pos.sort_by(|a, b| a.partial_cmp(b).expect("probabilities are finite"));
    neg.sort_by(|a, b| a.partial_cmp(b).expect("probabilities are finite"));
    let (np, nn) = (pos.len() as f64, neg.len() as f64);

    let count_ge = |sorted: &[f64], t: f64| -> u64 {
        (sorted.len() - sorted.partition_point(|&v| v < t)) as u64
    };

    let mut order: Vec<f64> = thresholds.to_vec();
    order.sort_by(|a, b| b.partial_cmp(a).expect("finite thresholds"));
    let points: Vec<RocPoint> = order
        .iter()
        .map(|&t| {
            let tp = count_ge(&pos, t) as f64;
            let fp = count_ge(&neg, t) as f64;
            RocPoint {
                threshold: t,
                tpr: tp / np,
                fpr: if nn == 0.0 { 0.0 } else { fp / nn },
                // No predictions at all is perfect precision by convention
                // (it anchors the PR curve at recall 0).
                precision: if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) },
            }
        })
        .collect();

    // Both curves are integrated along the sweep's own parametric order:
    // descending threshold makes recall and FPR non-decreasing, and ties
    // in the x coordinate become zero-width segments. Anchors add the
    // empty-prediction operating point (recall 0 at precision 1; the ROC
    // origin) when the grid never reaches it.
    let mut pr: Vec<(f64, f64)> = points.iter().map(|p| (p.tpr, p.precision)).collect();
    if pr.first().map(|&(r, _)| r > 0.0) == Some(true) {
        pr.insert(0, (0.0, 1.0));
    }
    let pr_auc = trapezoid(&pr);

    let mut roc: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
    if roc.first().map(|&(f, t)| (f, t) != (0.0, 0.0)) == Some(true) {
        roc.insert(0, (0.0, 0.0));
    }
    let roc_auc = trapezoid(&roc);

    let tp = count_ge(&pos, 0.5) as f64;
    let fp = count_ge(&neg, 0.5) as f64;
    let fneg = np - tp;
    let denom = 2.0 * tp + fp + fneg;
    let f_score = if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };

    Ok(Curves {
        points,
        pr_auc,
        roc_auc,
        f_score,
    })
}

fn trapezoid(xy: &[(f64, f64)]) -> f64 {
    xy.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5)
        .sum()
}

/// Per-image entries of a [`MetricReport`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerImageMetrics {
    pub iou: f64,
    pub gt_objects: usize,
    pub detected: usize,
    pub false_alarm_pixels: u64,
}

/// Dataset-level evaluation summary. Ratios are fractions in [0, 1]
/// except `fa`, which is already scaled to units of 1e-6.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub iou: f64,
    pub niou: f64,
    pub pd: f64,
    pub fa: f64,
    pub auc: f64,
    pub f_score: f64,
    pub per_image: Vec<PerImageMetrics>,
}

/// Assembles the full report from binarized predictions (threshold 0.5
/// applied by the caller to `pred_masks`) and raw probability maps.
pub fn metric_report<S: Scalar>(
    pred_masks: &[Tensor4<S>],
    prob_maps: &[Tensor4<S>],
    gt_masks: &[Tensor4<S>],
    match_dist: f64,
    thresholds: &[f64],
) -> Result<MetricReport> {
    if pred_masks.len() != gt_masks.len() || pred_masks.is_empty() {
        return Err(Error::data(format!(
            "metric_report: {} predictions vs {} masks",
            pred_masks.len(),
            gt_masks.len()
        )));
    }
    let mut counts = Vec::with_capacity(pred_masks.len());
    let mut detections = Vec::with_capacity(pred_masks.len());
    let mut per_image = Vec::with_capacity(pred_masks.len());
    for (p, g) in pred_masks.iter().zip(gt_masks) {
        let c = confusion(p, g)?;
        let d = detect_image(p, g, match_dist)?;
        per_image.push(PerImageMetrics {
            iou: if c.union() == 0 {
                1.0
            } else {
                c.true_pos as f64 / c.union() as f64
            },
            gt_objects: d.gt_total,
            detected: d.matched,
            false_alarm_pixels: d.false_pixels,
        });
        counts.push(c);
        detections.push(d);
    }
    let (pd, fa) = pd_fa(&detections)?;
    let curves = curve_and_auc(prob_maps, gt_masks, thresholds)?;
    Ok(MetricReport {
        iou: iou_dataset(&counts)?,
        niou: niou_dataset(&counts)?,
        pd,
        fa: fa * 1e6,
        auc: curves.pr_auc,
        f_score: curves.f_score,
        per_image,
    })
}

/// Writes a threshold-sweep point set as CSV:
/// threshold, precision, recall, tpr, fpr.
pub fn write_curves_csv(path: &Path, points: &[RocPoint]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "threshold,precision,recall,tpr,fpr")?;
    for p in points {
        writeln!(
            f,
            "{},{},{},{},{}",
            p.threshold, p.precision, p.tpr, p.tpr, p.fpr
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, ones: &[(usize, usize)]) -> Tensor4<f64> {
        let mut t = Tensor4::zeros([1, 1, h, w]);
        for &(y, x) in ones {
            *t.at_mut(0, 0, y, x) = 1.0;
        }
        t
    }

    fn block(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Tensor4<f64> {
        let coords: Vec<(usize, usize)> = (y0..y0 + side)
            .flat_map(|y| (x0..x0 + side).map(move |x| (y, x)))
            .collect();
        mask(h, w, &coords)
    }

    #[test]
    fn confusion_hand_counted_block_overlap() {
        // 2x2 pred at (0,0), 2x2 gt at (1,1): they share exactly (1,1).
        let pred = block(4, 4, 0, 0, 2);
        let gt = block(4, 4, 1, 1, 2);
        let c = confusion(&pred, &gt).unwrap();
        assert_eq!(
            (c.true_pos, c.false_pos, c.false_neg, c.true_neg),
            (1, 3, 3, 9)
        );
        assert_eq!(c.total(), 16, "counts must partition the image");

        let perfect = confusion(&gt, &gt).unwrap();
        assert_eq!((perfect.true_pos, perfect.false_pos, perfect.false_neg), (4, 0, 0));

        let none = confusion(&Tensor4::zeros([1, 1, 4, 4]), &gt).unwrap();
        assert_eq!((none.true_pos, none.false_pos, none.false_neg), (0, 0, 4));

        let soft = Tensor4::full([1, 1, 4, 4], 0.5);
        assert!(confusion(&soft, &gt).is_err(), "thresholding is the caller's job");
    }

    #[test]
    fn iou_pools_counts_while_niou_averages_ratios() {
        let one = ConfusionCounts { true_pos: 1, false_pos: 3, false_neg: 3, true_neg: 9 };
        let got = iou_dataset(&[one]).unwrap();
        assert!((got - 1.0 / 7.0).abs() < 1e-15, "1/(1+3+3), got {got}");

        // Two images 0.5 and 0.75: pooled 4/6, averaged 0.625. This is the
        // case that tells the two definitions apart.
        let a = ConfusionCounts { true_pos: 1, false_pos: 0, false_neg: 1, true_neg: 14 };
        let b = ConfusionCounts { true_pos: 3, false_pos: 1, false_neg: 0, true_neg: 12 };
        let iou = iou_dataset(&[a, b]).unwrap();
        let niou = niou_dataset(&[a, b]).unwrap();
        assert!((iou - 4.0 / 6.0).abs() < 1e-15, "ratio of sums, got {iou}");
        assert!((niou - 0.625).abs() < 1e-15, "mean of ratios, got {niou}");

        // They coincide on a single image.
        assert_eq!(iou_dataset(&[a]).unwrap(), niou_dataset(&[a]).unwrap());
    }

    #[test]
    fn degenerate_iou_cases() {
        let empty = ConfusionCounts { true_neg: 16, ..Default::default() };
        assert_eq!(iou_dataset(&[empty]).unwrap(), 1.0);
        assert_eq!(niou_dataset(&[empty]).unwrap(), 1.0);

        // Empty-union image pulls the nIoU mean toward 1.
        let half = ConfusionCounts { true_pos: 1, false_pos: 0, false_neg: 1, true_neg: 14 };
        assert!((niou_dataset(&[empty, half]).unwrap() - 0.75).abs() < 1e-15);

        let missed = ConfusionCounts { false_neg: 4, true_neg: 12, ..Default::default() };
        assert_eq!(niou_dataset(&[missed]).unwrap(), 0.0);
        assert!(iou_dataset(&[]).is_err());
    }

    #[test]
    fn components_follow_eight_connectivity() {
        let empty = connected_components(&Tensor4::<f64>::zeros([1, 1, 4, 4])).unwrap();
        assert!(empty.is_empty());

        // Diagonal neighbors join under 8-connectivity.
        let diag = connected_components(&mask(4, 4, &[(0, 0), (1, 1)])).unwrap();
        assert_eq!(diag.len(), 1);
        assert_eq!(diag.components[0].len(), 2);

        // L-shaped blob: centroid is the plain coordinate mean.
        let l = connected_components(&mask(4, 4, &[(0, 0), (1, 0), (1, 1)])).unwrap();
        assert_eq!(l.len(), 1);
        let (cy, cx) = l.components[0].centroid;
        assert!((cy - 2.0 / 3.0).abs() < 1e-15 && (cx - 1.0 / 3.0).abs() < 1e-15);

        // Two blobs separated by more than one step stay distinct, are
        // disjoint, and cover every foreground pixel.
        let two = connected_components(&mask(6, 6, &[(0, 0), (0, 1), (4, 4), (5, 5)])).unwrap();
        assert_eq!(two.len(), 2);
        let mut all: Vec<(usize, usize)> =
            two.components.iter().flat_map(|c| c.pixels.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, vec![(0, 0), (0, 1), (4, 4), (5, 5)]);
    }

    #[test]
    fn matching_uses_a_strict_distance_gate() {
        // Centroid distance sqrt(13) ~ 3.606 < 4: matched.
        let pred = connected_components(&mask(20, 20, &[(12, 13)])).unwrap();
        let gt = connected_components(&mask(20, 20, &[(10, 10)])).unwrap();
        let m = match_detections(&pred, &gt, MATCH_DISTANCE);
        assert_eq!(m.matched, vec![(0, 0)]);

        // Distance exactly 4.0 fails the strict inequality.
        let pred = connected_components(&mask(20, 20, &[(10, 14)])).unwrap();
        let m = match_detections(&pred, &gt, MATCH_DISTANCE);
        assert!(m.matched.is_empty());
        assert_eq!(m.unmatched_pred, vec![0]);
        assert_eq!(m.unmatched_gt, vec![0]);
    }

    #[test]
    fn greedy_matching_is_one_to_one_nearest_first() {
        // Two predictions near one target: only the nearer one matches.
        let pred = connected_components(&mask(20, 20, &[(10, 11), (10, 13)])).unwrap();
        let gt = connected_components(&mask(20, 20, &[(10, 10)])).unwrap();
        let m = match_detections(&pred, &gt, MATCH_DISTANCE);
        assert_eq!(m.matched, vec![(0, 0)], "nearest pred wins");
        assert_eq!(m.unmatched_pred, vec![1], "the loser is a false alarm");
        assert!(m.matched.len() <= pred.len().min(gt.len()));
    }

    #[test]
    fn pd_counts_objects_and_fa_counts_stray_pixels() {
        let all_found = [
            ImageDetection { matched: 2, gt_total: 2, false_pixels: 0, image_pixels: 4096 },
            ImageDetection { matched: 1, gt_total: 1, false_pixels: 0, image_pixels: 4096 },
        ];
        let (pd, fa) = pd_fa(&all_found).unwrap();
        assert_eq!((pd, fa), (1.0, 0.0));

        let half = [
            ImageDetection { matched: 1, gt_total: 2, false_pixels: 0, image_pixels: 4096 },
            ImageDetection { matched: 1, gt_total: 2, false_pixels: 0, image_pixels: 4096 },
        ];
        assert_eq!(pd_fa(&half).unwrap().0, 0.5);

        // One stray 5-pixel component in a single 256x256 image.
        let stray = [ImageDetection {
            matched: 1,
            gt_total: 1,
            false_pixels: 5,
            image_pixels: 65536,
        }];
        let (_, fa) = pd_fa(&stray).unwrap();
        assert!((fa - 7.62939453125e-5).abs() < 1e-18, "5/65536, got {fa}");
        assert!((fa * 1e6 - 76.2939453125).abs() < 1e-9);

        // Zero-object images are excluded from Pd but still dilute Fa.
        let mixed = [
            ImageDetection { matched: 0, gt_total: 0, false_pixels: 10, image_pixels: 100 },
            ImageDetection { matched: 1, gt_total: 1, false_pixels: 0, image_pixels: 100 },
        ];
        let (pd, fa) = pd_fa(&mixed).unwrap();
        assert_eq!(pd, 1.0);
        assert!((fa - 0.05).abs() < 1e-15);

        let none = [ImageDetection { matched: 0, gt_total: 0, false_pixels: 0, image_pixels: 4 }];
        assert!(pd_fa(&none).is_err(), "Pd needs at least one object");
    }

    #[test]
    fn extra_false_component_moves_fa_not_pd() {
        let base = ImageDetection { matched: 1, gt_total: 1, false_pixels: 0, image_pixels: 256 };
        let (pd0, fa0) = pd_fa(&[base]).unwrap();
        let noisy = ImageDetection { false_pixels: 7, ..base };
        let (pd1, fa1) = pd_fa(&[noisy]).unwrap();
        assert_eq!(pd0, pd1);
        assert!(fa1 > fa0);
    }

    #[test]
    fn perfect_predictor_sweeps_to_unit_area() {
        let gt = mask(8, 8, &[(2, 2), (2, 3), (5, 5)]);
        let curves = curve_and_auc(&[gt.clone()], &[gt.clone()], &default_thresholds()).unwrap();
        assert_eq!(curves.pr_auc, 1.0);
        assert_eq!(curves.f_score, 1.0);
        assert!(curves.roc_auc >= 1.0 - 1e-12);

        // Reversed predictor: confidently wrong at every pixel.
        let mut rev = gt.clone();
        for v in rev.data_mut() {
            *v = 1.0 - *v;
        }
        let curves = curve_and_auc(&[rev], &[gt], &default_thresholds()).unwrap();
        assert_eq!(curves.f_score, 0.0);
    }

    #[test]
    fn constant_half_probability_gives_the_pooled_f1() {
        // 4 positives among 16 pixels: p = 1/4, F1 = 2p/(1+p) = 0.4.
        let gt = mask(4, 4, &[(0, 0), (1, 1), (2, 2), (3, 3)]);
        let half = Tensor4::full([1, 1, 4, 4], 0.5);
        let curves = curve_and_auc(&[half], &[gt], &default_thresholds()).unwrap();
        assert!((curves.f_score - 0.4).abs() < 1e-15, "got {}", curves.f_score);
    }

    #[test]
    fn curve_preconditions_are_enforced() {
        let gt = mask(4, 4, &[(0, 0)]);
        let over = Tensor4::full([1, 1, 4, 4], 1.5);
        assert!(curve_and_auc(&[over], &[gt.clone()], &default_thresholds()).is_err());

        let empty_gt = Tensor4::zeros([1, 1, 4, 4]);
        let p = Tensor4::full([1, 1, 4, 4], 0.3);
        assert!(
            curve_and_auc(&[p], &[empty_gt], &default_thresholds()).is_err(),
            "recall undefined without positives"
        );
    }

    #[test]
    fn recall_never_rises_with_the_threshold() {
        // Deterministic pseudo-random probabilities.
        let vals: Vec<f64> = (0..64).map(|i| ((i * 37 + 11) % 101) as f64 / 100.0).collect();
        let probs = Tensor4::from_vec([1, 1, 8, 8], vals).unwrap();
        let gt = mask(8, 8, &[(0, 1), (3, 4), (6, 2), (7, 7)]);
        let curves = curve_and_auc(&[probs], &[gt], &default_thresholds()).unwrap();
        for w in curves.points.windows(2) {
            assert!(w[0].threshold > w[1].threshold, "descending threshold order");
            assert!(w[0].tpr <= w[1].tpr, "recall must grow as the threshold drops");
        }
        assert!((0.0..=1.0).contains(&curves.pr_auc));
        assert!((0.0..=1.0).contains(&curves.roc_auc));
    }

    #[test]
    fn report_assembles_all_fields() {
        let gt = mask(8, 8, &[(2, 2), (2, 3), (6, 6)]);
        let pred = mask(8, 8, &[(2, 2), (2, 3), (6, 6)]);
        let probs = pred.clone();
        let report =
            metric_report(&[pred], &[probs], &[gt], MATCH_DISTANCE, &default_thresholds()).unwrap();
        assert_eq!(report.iou, 1.0);
        assert_eq!(report.niou, 1.0);
        assert_eq!(report.pd, 1.0);
        assert_eq!(report.fa, 0.0);
        assert_eq!(report.f_score, 1.0);
        assert_eq!(report.per_image.len(), 1);
        assert_eq!(report.per_image[0].gt_objects, 2);
        assert_eq!(report.per_image[0].detected, 2);
    }

    #[test]
    fn csv_output_has_the_documented_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.csv");
        let points = vec![RocPoint { threshold: 0.5, tpr: 0.25, fpr: 0.1, precision: 0.8 }];
        write_curves_csv(&path, &points).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("threshold,precision,recall,tpr,fpr"));
        assert_eq!(lines.next(), Some("0.5,0.8,0.25,0.25,0.1"));
    }
}
