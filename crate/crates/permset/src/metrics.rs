//! Detection evaluation: greedy IoU matching, precision/recall curves,
//! average precision, log-average miss rate, occlusion-binned F1, puzzle
//! instance grading and slot-identity accuracy.

pub use crate::geom::{iou, Rect};
use crate::assignment::{hungarian, Assignment, CostMatrix};
use std::collections::BTreeMap;

/// A scored detection box.
#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub rect: Rect,
    pub score: f64,
}

/// Outcome of matching one image's detections against its ground truth.
#[derive(Clone, Debug)]
pub struct MatchResult {
    /// Per detection (input order): true positive or not.
    pub tp_flags: Vec<bool>,
    /// Per detection: index of the matched ground truth, when any.
    pub matched_gt: Vec<Option<usize>>,
    /// Per ground truth: whether some detection claimed it.
    pub gt_matched: Vec<bool>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.tp_flags.iter().filter(|&&t| t).count()
    }

    pub fn false_positives(&self) -> usize {
        self.tp_flags.len() - self.true_positives()
    }
}

/// Greedy matching protocol: walking detections in descending score order,
/// each detection claims the unmatched ground truth with the highest IoU,
/// provided that IoU reaches the threshold. Each ground truth is matched at
/// most once; every unmatched detection is a false positive.
///
/// Detections must already be sorted by descending score.
pub fn match_detections(dets: &[Detection], gts: &[Rect], iou_thresh: f64) -> MatchResult {
    debug_assert!(
        dets.windows(2).all(|w| w[0].score >= w[1].score),
        "detections must be sorted by descending score"
    );
    let mut tp_flags = vec![false; dets.len()];
    let mut matched_gt = vec![None; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for (d, det) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if gt_matched[g] {
                continue;
            }
            let overlap = iou(&det.rect, gt);
            if overlap >= iou_thresh && best.map_or(true, |(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        if let Some((g, _)) = best {
            tp_flags[d] = true;
            matched_gt[d] = Some(g);
            gt_matched[g] = true;
        }
    }
    MatchResult { tp_flags, matched_gt, gt_matched }
}

/// One operating point of a score sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    /// Score threshold: detections with score >= tau are kept.
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
    /// False positives per image.
    pub fppi: f64,
}

/// Precision/recall/FPPI at every distinct detection score, over a whole
/// dataset. Points come out in descending tau order (increasing recall).
pub fn pr_curve(
    dets_by_image: &[Vec<Detection>],
    gts_by_image: &[Vec<Rect>],
    iou_thresh: f64,
) -> Vec<CurvePoint> {
    assert_eq!(dets_by_image.len(), gts_by_image.len());
    let n_images = dets_by_image.len().max(1) as f64;
    let total_gt: usize = gts_by_image.iter().map(|g| g.len()).sum();

    // flag every detection once; flags do not depend on the sweep threshold
    let mut flagged: Vec<(f64, bool)> = Vec::new();
    for (dets, gts) in dets_by_image.iter().zip(gts_by_image.iter()) {
        let mut sorted: Vec<Detection> = dets.clone();
        sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let result = match_detections(&sorted, gts, iou_thresh);
        for (det, &tp) in sorted.iter().zip(result.tp_flags.iter()) {
            flagged.push((det.score, tp));
        }
    }
    flagged.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, &(score, is_tp)) in flagged.iter().enumerate() {
        if is_tp {
            tp += 1;
        } else {
            fp += 1;
        }
        // emit a point only at the last detection of each distinct score
        if i + 1 < flagged.len() && flagged[i + 1].0 == score {
            continue;
        }
        points.push(CurvePoint {
            tau: score,
            precision: tp as f64 / (tp + fp) as f64,
            recall: if total_gt == 0 { 0.0 } else { tp as f64 / total_gt as f64 },
            fppi: fp as f64 / n_images,
        });
    }
    points
}

/// Area under the precision-recall curve by trapezoidal integration over
/// recall, anchored at (recall 0, precision of the first point).
pub fn average_precision(curve: &[CurvePoint]) -> f64 {
    if curve.is_empty() {
        return 0.0;
    }
    let mut ap = curve[0].precision * curve[0].recall;
    for pair in curve.windows(2) {
        ap += (pair[1].recall - pair[0].recall) * (pair[1].precision + pair[0].precision) / 2.0;
    }
    ap
}

fn f1_of(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Best F1 along the curve and the threshold that attains it.
pub fn best_f1(curve: &[CurvePoint]) -> (f64, f64) {
    let mut best = (0.0, 1.0);
    for p in curve {
        let f1 = f1_of(p.precision, p.recall);
        if f1 > best.0 {
            best = (f1, p.tau);
        }
    }
    best
}

/// Micro-averaged precision/recall/F1 of already-selected prediction sets
/// (one operating point, no scores involved).
#[derive(Clone, Copy, Debug, Default)]
pub struct PointMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub total_gt: usize,
}

pub fn point_f1(dets_by_image: &[Vec<Rect>], gts_by_image: &[Vec<Rect>], iou_thresh: f64) -> PointMetrics {
    assert_eq!(dets_by_image.len(), gts_by_image.len());
    let (mut tp, mut fp, mut total_gt) = (0usize, 0usize, 0usize);
    for (dets, gts) in dets_by_image.iter().zip(gts_by_image.iter()) {
        let scored: Vec<Detection> = dets.iter().map(|&rect| Detection { rect, score: 1.0 }).collect();
        let result = match_detections(&scored, gts, iou_thresh);
        tp += result.true_positives();
        fp += result.false_positives();
        total_gt += gts.len();
    }
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if total_gt == 0 { 1.0 } else { tp as f64 / total_gt as f64 };
    PointMetrics {
        precision,
        recall,
        f1: f1_of(precision, recall),
        true_positives: tp,
        false_positives: fp,
        total_gt,
    }
}

/// Floor applied to miss rates before taking logs.
pub const MISS_RATE_FLOOR: f64 = 1e-10;

/// Geometric mean of the miss rate sampled at nine FPPI values evenly
/// log-spaced over [0.01, 1]. At each sample the curve point with the
/// largest FPPI not exceeding the sample is used; if none exists the miss
/// rate counts as 1.
pub fn log_average_miss_rate(curve: &[CurvePoint]) -> f64 {
    let mut log_sum = 0.0;
    for k in 0..9 {
        let fppi_sample = 10f64.powf(-2.0 + k as f64 * 0.25);
        let miss = curve
            .iter()
            .filter(|p| p.fppi <= fppi_sample)
            .max_by(|a, b| a.fppi.partial_cmp(&b.fppi).unwrap().then(a.recall.partial_cmp(&b.recall).unwrap()))
            .map_or(1.0, |p| 1.0 - p.recall);
        log_sum += miss.max(MISS_RATE_FLOOR).ln();
    }
    (log_sum / 9.0).exp()
}

/// Upper edges of the occlusion bins; a ground truth falls into the first
/// bin whose edge exceeds its maximum IoU with any other ground truth in
/// the same image (last bin is open-ended).
pub const OCCLUSION_BIN_EDGES: [f64; 7] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7];

fn occlusion_bin(max_iou: f64) -> usize {
    OCCLUSION_BIN_EDGES.iter().position(|&e| max_iou < e).unwrap_or(OCCLUSION_BIN_EDGES.len())
}

/// F1 per occlusion bin. Ground truths are binned by their maximum overlap
/// with any other ground truth in the same image; true positives inherit
/// the bin of their matched ground truth and false positives the bin of
/// their highest-IoU ground truth (bin 0 when the image has none).
pub fn occlusion_binned_f1(
    dets_by_image: &[Vec<Rect>],
    gts_by_image: &[Vec<Rect>],
    iou_thresh: f64,
) -> BTreeMap<usize, f64> {
    assert_eq!(dets_by_image.len(), gts_by_image.len());
    let n_bins = OCCLUSION_BIN_EDGES.len() + 1;
    let mut tp = vec![0usize; n_bins];
    let mut fp = vec![0usize; n_bins];
    let mut gt_count = vec![0usize; n_bins];

    for (dets, gts) in dets_by_image.iter().zip(gts_by_image.iter()) {
        let gt_bins: Vec<usize> = (0..gts.len())
            .map(|g| {
                let max_iou = gts
                    .iter()
                    .enumerate()
                    .filter(|&(other, _)| other != g)
                    .map(|(_, r)| iou(&gts[g], r))
                    .fold(0.0, f64::max);
                occlusion_bin(max_iou)
            })
            .collect();
        for &b in &gt_bins {
            gt_count[b] += 1;
        }
        let scored: Vec<Detection> = dets.iter().map(|&rect| Detection { rect, score: 1.0 }).collect();
        let result = match_detections(&scored, gts, iou_thresh);
        for (d, &is_tp) in result.tp_flags.iter().enumerate() {
            if is_tp {
                tp[gt_bins[result.matched_gt[d].unwrap()]] += 1;
            } else {
                let bin = gts
                    .iter()
                    .enumerate()
                    .max_by(|(_, a), (_, b)| {
                        iou(&dets[d], a).partial_cmp(&iou(&dets[d], b)).unwrap()
                    })
                    .map_or(0, |(g, _)| gt_bins[g]);
                fp[bin] += 1;
            }
        }
    }

    let mut out = BTreeMap::new();
    for b in 0..n_bins {
        if gt_count[b] == 0 {
            continue;
        }
        let precision = if tp[b] + fp[b] == 0 { 1.0 } else { tp[b] as f64 / (tp[b] + fp[b]) as f64 };
        let recall = tp[b] as f64 / gt_count[b] as f64;
        out.insert(b, f1_of(precision, recall));
    }
    out
}

/// Instance-level grading for the digit puzzle: a prediction is correct iff
/// it has exactly as many boxes as the solution and a perfect one-to-one
/// matching exists in which every pair overlaps with IoU > 0.5. An empty
/// solution requires an empty prediction.
pub fn captcha_instance_correct(predicted: &[Rect], solution: &[Rect]) -> bool {
    if predicted.len() != solution.len() {
        return false;
    }
    let n = predicted.len();
    if n == 0 {
        return true;
    }
    // large finite penalty for infeasible pairs; any feasible perfect
    // matching beats a single penalty edge
    const INFEASIBLE: f64 = 1e6;
    let mut costs = Vec::with_capacity(n * n);
    for p in predicted {
        for s in solution {
            let overlap = iou(p, s);
            costs.push(if overlap > 0.5 { 1.0 - overlap } else { INFEASIBLE });
        }
    }
    let matrix = CostMatrix::new(n, costs).expect("finite square matrix");
    let (_, total) = hungarian(&matrix);
    total < INFEASIBLE
}

pub fn captcha_accuracy(predictions: &[Vec<Rect>], solutions: &[Vec<Rect>]) -> f64 {
    assert_eq!(predictions.len(), solutions.len());
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(solutions.iter())
        .filter(|(p, s)| captcha_instance_correct(p, s))
        .count();
    correct as f64 / predictions.len() as f64
}

/// One image's prediction with ordering information: selected boxes, the
/// slot each box came from, and the predicted ordering over all slots.
#[derive(Clone, Debug)]
pub struct IdentifiedSet {
    pub boxes: Vec<Rect>,
    pub slots: Vec<usize>,
    pub ordering: Assignment,
}

/// Identity accuracy through the ordering head. Each true-positive box gets
/// a canonical position (the position its slot occupies under the predicted
/// ordering); a majority vote over the test set fixes one canonical
/// position per identity, and accuracy is the fraction of true positives
/// landing on their identity's position. Undetected ground truths do not
/// count against the score.
pub fn identification_accuracy(
    predictions: &[IdentifiedSet],
    gts_by_image: &[Vec<(Rect, String)>],
    iou_thresh: f64,
) -> f64 {
    assert_eq!(predictions.len(), gts_by_image.len());
    // (identity, canonical position) per true positive
    let mut observations: Vec<(String, usize)> = Vec::new();
    for (pred, gts) in predictions.iter().zip(gts_by_image.iter()) {
        let rects: Vec<Rect> = gts.iter().map(|(r, _)| *r).collect();
        let scored: Vec<Detection> = pred.boxes.iter().map(|&rect| Detection { rect, score: 1.0 }).collect();
        let result = match_detections(&scored, &rects, iou_thresh);
        for (d, matched) in result.matched_gt.iter().enumerate() {
            if let Some(g) = matched {
                let slot = pred.slots[d];
                let canonical = pred.ordering.row_of(slot);
                observations.push((gts[*g].1.clone(), canonical));
            }
        }
    }
    if observations.is_empty() {
        return 0.0;
    }
    // majority vote: identity -> most frequent canonical position
    let mut votes: BTreeMap<&str, BTreeMap<usize, usize>> = BTreeMap::new();
    for (identity, pos) in &observations {
        *votes.entry(identity).or_default().entry(*pos).or_insert(0) += 1;
    }
    let majority: BTreeMap<&str, usize> = votes
        .iter()
        .map(|(&id, counts)| {
            let best = counts.iter().max_by_key(|&(_, &c)| c).map(|(&p, _)| p).unwrap();
            (id, best)
        })
        .collect();
    let hits = observations
        .iter()
        .filter(|(id, pos)| majority[id.as_str()] == *pos)
        .count();
    hits as f64 / observations.len() as f64
}

/// Delimiter-separated rendering of a curve for external plotting.
pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from("tau,precision,recall,fppi\n");
    for p in curve {
        out.push_str(&format!("{},{},{},{}\n", p.tau, p.precision, p.recall, p.fppi));
    }
    out
}
