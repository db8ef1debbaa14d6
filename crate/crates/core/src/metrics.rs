//! Detection evaluation: greedy center-distance matching, average precision
//! over the recall interval [0.1, 1], true-positive errors (translation,
//! scale, orientation), the SPNDS summary score, and range-binned reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{wrap_angle, Box3D, Detection};

/// Center-distance thresholds (meters) used for AP averaging.
pub const AP_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Matching threshold (meters) for true-positive error computation.
pub const TP_THRESHOLD: f64 = 2.0;
/// Minimum recall / precision excluded from the AP integral.
const MIN_RECALL: f64 = 0.1;
const MIN_PRECISION: f64 = 0.1;

fn bev_distance(a: &Box3D, b: &Box3D) -> f64 {
    ((a.center[0] - b.center[0]).powi(2) + (a.center[1] - b.center[1]).powi(2)).sqrt()
}

/// Outcome of greedy matching for one (category, threshold) instance.
#[derive(Debug, Clone, Default)]
pub struct MatchResult {
    /// (prediction index, ground-truth index) pairs, in descending score order.
    pub tp_pairs: Vec<(usize, usize)>,
    /// Unmatched prediction indices.
    pub fp: Vec<usize>,
    /// Ground truths left unmatched.
    pub fn_count: usize,
}

/// Greedy matching: predictions in descending score order each take the
/// nearest unmatched ground truth of the same category within `threshold`
/// (BEV center distance). Each ground truth matches at most once.
pub fn match_detections(
    preds: &[Detection],
    gts: &[Box3D],
    category: u32,
    threshold: f64,
) -> Result<MatchResult> {
    if threshold <= 0.0 {
        return Err(Error::config("matching threshold must be positive"));
    }
    let gt_idx: Vec<usize> =
        (0..gts.len()).filter(|&i| gts[i].category == category).collect();
    let mut pred_idx: Vec<usize> =
        (0..preds.len()).filter(|&i| preds[i].boxed.category == category).collect();
    // Descending score; ties break on the original index for determinism.
    pred_idx.sort_by(|&a, &b| {
        preds[b]
            .boxed
            .score
            .partial_cmp(&preds[a].boxed.score)
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for &pi in &pred_idx {
        let mut best: Option<(usize, f64)> = None;
        for &gi in &gt_idx {
            if taken[gi] {
                continue;
            }
            let d = bev_distance(&preds[pi].boxed, &gts[gi]);
            if d <= threshold {
                let better = match best {
                    None => true,
                    Some((_, bd)) => d < bd,
                };
                if better {
                    best = Some((gi, d));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                result.tp_pairs.push((pi, gi));
            }
            None => result.fp.push(pi),
        }
    }
    result.fn_count = gt_idx.iter().filter(|&&gi| !taken[gi]).count();
    Ok(result)
}

/// AP from an already-matched, score-sorted TP/FP sequence.
///
/// The precision/recall curve is the right-continuous step function through
/// the points visited as predictions are consumed in score order: the t-th
/// true positive fixes precision `t / k_t` on the recall interval
/// `((t-1)/G, t/G]`. The integral runs over recall in `[0.1, 1]` with
/// precision shifted down by 0.1 and clamped at zero, and is normalized so a
/// perfect detector scores exactly 1.
fn ap_from_sequence(is_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return f64::NAN;
    }
    if is_tp.is_empty() {
        return 0.0;
    }
    let g = n_gt as f64;
    let mut tp = 0usize;
    let mut integral = 0.0;
    for (k, &hit) in is_tp.iter().enumerate() {
        if !hit {
            continue;
        }
        tp += 1;
        let recall_lo = (tp - 1) as f64 / g;
        let recall_hi = tp as f64 / g;
        let precision = tp as f64 / (k + 1) as f64;
        let span = (recall_hi - recall_lo.max(MIN_RECALL)).max(0.0);
        integral += span * (precision - MIN_PRECISION).max(0.0);
    }
    integral / (1.0 - MIN_RECALL) / (1.0 - MIN_PRECISION)
}

/// Per-scene prediction/ground-truth pairs: matching never crosses scenes.
pub type EvalScene<'a> = (&'a [Detection], &'a [Box3D]);

/// Merges per-scene matchings of one category at one threshold into the
/// globally score-sorted TP/FP sequence plus the total ground-truth count.
fn merged_sequence(
    scenes: &[EvalScene<'_>],
    category: u32,
    threshold: f64,
) -> Result<(Vec<(f64, bool)>, usize)> {
    let mut seq: Vec<(f64, bool)> = Vec::new();
    let mut n_gt = 0usize;
    for (preds, gts) in scenes {
        n_gt += gts.iter().filter(|g| g.category == category).count();
        let m = match_detections(preds, gts, category, threshold)?;
        for &(pi, _) in &m.tp_pairs {
            seq.push((preds[pi].boxed.score, true));
        }
        for &pi in &m.fp {
            seq.push((preds[pi].boxed.score, false));
        }
    }
    seq.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    Ok((seq, n_gt))
}

/// Average precision for one category at one threshold across scenes.
/// Returns `None` when the category has no ground truth (excluded from mAP).
pub fn average_precision(
    scenes: &[EvalScene<'_>],
    category: u32,
    threshold: f64,
) -> Result<Option<f64>> {
    let (seq, n_gt) = merged_sequence(scenes, category, threshold)?;
    if n_gt == 0 {
        return Ok(None);
    }
    let flags: Vec<bool> = seq.iter().map(|s| s.1).collect();
    Ok(Some(ap_from_sequence(&flags, n_gt)))
}

/// Mean translation / scale / orientation errors over matched pairs.
/// With no pairs each error saturates at 1.0.
pub fn compute_tp_errors(pairs: &[(&Box3D, &Box3D)]) -> (f64, f64, f64) {
    if pairs.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let n = pairs.len() as f64;
    let mut ate = 0.0;
    let mut ase = 0.0;
    let mut aoe = 0.0;
    for (pred, gt) in pairs {
        ate += bev_distance(pred, gt);
        let mut iou = 1.0;
        for i in 0..3 {
            let lo = pred.dims[i].min(gt.dims[i]);
            let hi = pred.dims[i].max(gt.dims[i]);
            iou *= lo / hi;
        }
        ase += 1.0 - iou;
        aoe += wrap_angle(pred.yaw - gt.yaw).abs();
    }
    (ate / n, ase / n, aoe / n)
}

/// SPNDS: `(1/8) * (5*mAP + sum over {ATE, ASE, AOE} of (1 - min(1, err)))`.
pub fn spnds(map: f64, mate: f64, mase: f64, maoe: f64) -> f64 {
    let tp_sum: f64 = [mate, mase, maoe].iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp_sum) / 8.0
}

/// Per-class AP at one threshold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassAp {
    pub category: u32,
    pub threshold: f64,
    pub ap: f64,
}

/// Evaluation summary. `spnds` is always recomputable from the other fields.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: Vec<ClassAp>,
    pub map: f64,
    pub mate: f64,
    pub mase: f64,
    pub maoe: f64,
    pub spnds: f64,
    pub n_gt: usize,
    pub n_pred: usize,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub bins: Vec<RangeBinReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RangeBinReport {
    pub range_min: f64,
    /// `null` encodes an unbounded upper edge.
    pub range_max: Option<f64>,
    pub n_gt: usize,
    pub report: Option<Box<MetricsReport>>,
}

/// Categories present in the ground truth, ascending.
fn gt_categories(scenes: &[EvalScene<'_>]) -> Vec<u32> {
    let mut cats: Vec<u32> = scenes
        .iter()
        .flat_map(|(_, gts)| gts.iter().map(|g| g.category))
        .collect();
    cats.sort_unstable();
    cats.dedup();
    cats
}

/// Full evaluation over scenes: mAP over `AP_THRESHOLDS` x categories with
/// ground truth, TP errors at [`TP_THRESHOLD`], and SPNDS.
pub fn evaluate(scenes: &[EvalScene<'_>]) -> Result<MetricsReport> {
    let cats = gt_categories(scenes);
    let mut ap_entries = Vec::new();
    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    for &cat in &cats {
        for &th in &AP_THRESHOLDS {
            if let Some(ap) = average_precision(scenes, cat, th)? {
                ap_entries.push(ClassAp { category: cat, threshold: th, ap });
                ap_sum += ap;
                ap_count += 1;
            }
        }
    }
    let map = if ap_count > 0 { ap_sum / ap_count as f64 } else { 0.0 };

    // TP errors: per class at the TP threshold, averaged over classes.
    let (mut mate, mut mase, mut maoe) = (0.0, 0.0, 0.0);
    for &cat in &cats {
        let mut pairs: Vec<(&Box3D, &Box3D)> = Vec::new();
        for (preds, gts) in scenes {
            let m = match_detections(preds, gts, cat, TP_THRESHOLD)?;
            for &(pi, gi) in &m.tp_pairs {
                pairs.push((&preds[pi].boxed, &gts[gi]));
            }
        }
        let (ate, ase, aoe) = compute_tp_errors(&pairs);
        mate += ate;
        mase += ase;
        maoe += aoe;
    }
    let nc = cats.len().max(1) as f64;
    let (mate, mase, maoe) = (mate / nc, mase / nc, maoe / nc);

    let n_gt = scenes.iter().map(|(_, g)| g.len()).sum();
    let n_pred = scenes.iter().map(|(p, _)| p.len()).sum();
    Ok(MetricsReport {
        ap: ap_entries,
        map,
        mate,
        mase,
        maoe,
        spnds: spnds(map, mate, mase, maoe),
        n_gt,
        n_pred,
        bins: Vec::new(),
    })
}

/// Half-open range bins `[min, max)`; `None` max means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeBin {
    pub min: f64,
    pub max: Option<f64>,
}

impl RangeBin {
    fn contains(&self, r: f64) -> bool {
        r >= self.min && self.max.map_or(true, |m| r < m)
    }
}

/// Default bins matching the far-field analysis: [0,20), [20,30), [30,40), [40, inf).
pub fn default_range_bins() -> Vec<RangeBin> {
    vec![
        RangeBin { min: 0.0, max: Some(20.0) },
        RangeBin { min: 20.0, max: Some(30.0) },
        RangeBin { min: 30.0, max: Some(40.0) },
        RangeBin { min: 40.0, max: None },
    ]
}

fn validate_bins(bins: &[RangeBin]) -> Result<()> {
    if bins.is_empty() {
        return Err(Error::config("at least one range bin required"));
    }
    for (i, a) in bins.iter().enumerate() {
        if let Some(amax) = a.max {
            if amax <= a.min {
                return Err(Error::config("range bin with non-positive width"));
            }
        }
        for b in bins.iter().skip(i + 1) {
            // Overlap when each bin's start precedes the other's end.
            let a_end = a.max.unwrap_or(f64::INFINITY);
            let b_end = b.max.unwrap_or(f64::INFINITY);
            if a.min < b_end && b.min < a_end {
                return Err(Error::config(format!(
                    "range bins overlap: [{}, {:?}) and [{}, {:?})",
                    a.min, a.max, b.min, b.max
                )));
            }
        }
    }
    Ok(())
}

/// Range-binned evaluation. Ground truths are partitioned by ego distance.
/// Matched predictions follow their ground truth's bin (matching at the TP
/// threshold); unmatched predictions fall in the bin of their own center.
/// Empty bins carry no sub-report and are excluded from aggregates.
pub fn range_binned_eval(
    scenes: &[EvalScene<'_>],
    bins: &[RangeBin],
) -> Result<Vec<RangeBinReport>> {
    validate_bins(bins)?;
    // Per scene, assign each prediction to a bin via its match (union over
    // categories at the TP threshold), then evaluate each bin independently.
    let mut per_bin: Vec<Vec<(Vec<Detection>, Vec<Box3D>)>> = vec![Vec::new(); bins.len()];
    for (preds, gts) in scenes {
        let cats = gt_categories(&[(*preds, *gts)]);
        let mut pred_bin: Vec<Option<usize>> = vec![None; preds.len()];
        for &cat in &cats {
            let m = match_detections(preds, gts, cat, TP_THRESHOLD)?;
            for &(pi, gi) in &m.tp_pairs {
                let r = gts[gi].bev_range();
                pred_bin[pi] = bins.iter().position(|b| b.contains(r));
            }
        }
        for (pi, pb) in pred_bin.iter_mut().enumerate() {
            if pb.is_none() {
                let r = preds[pi].boxed.bev_range();
                *pb = bins.iter().position(|b| b.contains(r));
            }
        }
        for (bi, bin) in bins.iter().enumerate() {
            let bin_preds: Vec<Detection> = preds
                .iter()
                .enumerate()
                .filter(|(pi, _)| pred_bin[*pi] == Some(bi))
                .map(|(_, d)| d.clone())
                .collect();
            let bin_gts: Vec<Box3D> =
                gts.iter().filter(|g| bin.contains(g.bev_range())).cloned().collect();
            per_bin[bi].push((bin_preds, bin_gts));
        }
    }
    let mut out = Vec::with_capacity(bins.len());
    for (bi, bin) in bins.iter().enumerate() {
        let n_gt: usize = per_bin[bi].iter().map(|(_, g)| g.len()).sum();
        let report = if n_gt == 0 {
            None
        } else {
            let views: Vec<EvalScene<'_>> =
                per_bin[bi].iter().map(|(p, g)| (p.as_slice(), g.as_slice())).collect();
            Some(Box::new(evaluate(&views)?))
        };
        out.push(RangeBinReport { range_min: bin.min, range_max: bin.max, n_gt, report });
    }
    Ok(out)
}

/// [`evaluate`] plus attached range-bin sub-reports.
pub fn evaluate_with_bins(scenes: &[EvalScene<'_>], bins: &[RangeBin]) -> Result<MetricsReport> {
    let mut report = evaluate(scenes)?;
    report.bins = range_binned_eval(scenes, bins)?;
    Ok(report)
}

#[cfg(test)]
pub mod oracle {
    //! Brute-force AP oracle: re-derives the precision/recall curve by
    //! sweeping every score threshold and integrating the step curve. Kept
    //! independent of the incremental implementation above.

    use super::*;

    /// Greedy matching re-implemented directly from the rule statement.
    fn brute_match(preds: &[Detection], gts: &[Box3D], category: u32, threshold: f64) -> Vec<bool> {
        let mut order: Vec<usize> =
            (0..preds.len()).filter(|&i| preds[i].boxed.category == category).collect();
        order.sort_by(|&a, &b| {
            preds[b]
                .boxed
                .score
                .partial_cmp(&preds[a].boxed.score)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut used = vec![false; gts.len()];
        let mut tp_flag = Vec::new();
        for &pi in &order {
            let mut best_d = f64::INFINITY;
            let mut best_g = None;
            for (gi, gt) in gts.iter().enumerate() {
                if gt.category != category || used[gi] {
                    continue;
                }
                let d = ((preds[pi].boxed.center[0] - gt.center[0]).powi(2)
                    + (preds[pi].boxed.center[1] - gt.center[1]).powi(2))
                .sqrt();
                if d <= threshold && d < best_d {
                    best_d = d;
                    best_g = Some(gi);
                }
            }
            if let Some(gi) = best_g {
                used[gi] = true;
                tp_flag.push(true);
            } else {
                tp_flag.push(false);
            }
        }
        tp_flag
    }

    /// AP by exhaustive threshold sweep: every prefix of the score-sorted
    /// list is a threshold; each recall-increasing prefix contributes a
    /// step-curve segment.
    pub fn brute_force_ap(
        scenes: &[(Vec<Detection>, Vec<Box3D>)],
        category: u32,
        threshold: f64,
    ) -> Option<f64> {
        let mut seq: Vec<(f64, bool)> = Vec::new();
        let mut n_gt = 0usize;
        for (preds, gts) in scenes {
            n_gt += gts.iter().filter(|g| g.category == category).count();
            let order: Vec<usize> =
                {
                    let mut o: Vec<usize> = (0..preds.len())
                        .filter(|&i| preds[i].boxed.category == category)
                        .collect();
                    o.sort_by(|&a, &b| {
                        preds[b]
                            .boxed
                            .score
                            .partial_cmp(&preds[a].boxed.score)
                            .unwrap()
                            .then(a.cmp(&b))
                    });
                    o
                };
            let flags = brute_match(preds, gts, category, threshold);
            for (k, &pi) in order.iter().enumerate() {
                seq.push((preds[pi].boxed.score, flags[k]));
            }
        }
        if n_gt == 0 {
            return None;
        }
        seq.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

        // Sweep every prefix; record PR points where recall increased.
        let g = n_gt as f64;
        let mut points: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
        let mut tp = 0usize;
        for (k, &(_, hit)) in seq.iter().enumerate() {
            if hit {
                tp += 1;
                points.push((tp as f64 / g, tp as f64 / (k + 1) as f64));
            }
        }
        // Integrate the right-continuous step curve over [0.1, 1], with
        // precision shifted by 0.1 and clamped, normalized to 1 for a
        // perfect detector.
        let mut integral = 0.0;
        let mut prev_recall = 0.0f64;
        for &(recall, precision) in &points {
            let lo = prev_recall.max(MIN_RECALL);
            if recall > lo {
                integral += (recall - lo) * (precision - MIN_PRECISION).max(0.0);
            }
            prev_recall = recall;
        }
        Some(integral / (1.0 - MIN_RECALL) / (1.0 - MIN_PRECISION))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x: f64, y: f64, cat: u32, score: f64) -> Detection {
        Detection::new(
            Box3D::new([x, y, 0.5], [1.0, 1.0, 1.0], 0.0, cat, score).unwrap(),
        )
    }

    fn gt(x: f64, y: f64, cat: u32) -> Box3D {
        Box3D::ground_truth([x, y, 0.5], [1.0, 1.0, 1.0], 0.0, cat).unwrap()
    }

    #[test]
    fn matching_basics() {
        let gts = vec![gt(0.0, 0.0, 0)];
        // Exact hit.
        let preds = vec![det(0.0, 0.0, 0, 0.9)];
        let m = match_detections(&preds, &gts, 0, 2.0).unwrap();
        assert_eq!((m.tp_pairs.len(), m.fp.len(), m.fn_count), (1, 0, 0));

        // Two predictions near one GT: higher score wins, other is FP.
        let preds = vec![det(0.2, 0.0, 0, 0.5), det(0.1, 0.0, 0, 0.8)];
        let m = match_detections(&preds, &gts, 0, 2.0).unwrap();
        assert_eq!(m.tp_pairs, vec![(1, 0)]);
        assert_eq!(m.fp, vec![0]);

        // Distance beyond threshold: FP plus FN.
        let preds = vec![det(2.5, 0.0, 0, 0.9)];
        let m = match_detections(&preds, &gts, 0, 2.0).unwrap();
        assert_eq!((m.tp_pairs.len(), m.fp.len(), m.fn_count), (0, 1, 1));

        assert!(match_detections(&preds, &gts, 0, 0.0).is_err());
    }

    #[test]
    fn matching_ignores_other_categories() {
        let gts = vec![gt(0.0, 0.0, 1)];
        let preds = vec![det(0.0, 0.0, 0, 0.9)];
        let m = match_detections(&preds, &gts, 0, 2.0).unwrap();
        assert_eq!((m.tp_pairs.len(), m.fp.len(), m.fn_count), (0, 1, 0));
        let m1 = match_detections(&preds, &gts, 1, 2.0).unwrap();
        assert_eq!((m1.tp_pairs.len(), m1.fp.len(), m1.fn_count), (0, 0, 1));
    }

    #[test]
    fn ap_perfect_and_empty() {
        let gts = vec![gt(0.0, 0.0, 0), gt(5.0, 5.0, 0)];
        let preds = vec![det(0.0, 0.0, 0, 0.9), det(5.0, 5.0, 0, 0.8)];
        let scenes = [(preds.as_slice(), gts.as_slice())];
        let ap = average_precision(&scenes, 0, 2.0).unwrap().unwrap();
        assert!((ap - 1.0).abs() < 1e-12, "perfect detector AP = 1, got {ap}");

        let no_preds: Vec<Detection> = vec![];
        let scenes = [(no_preds.as_slice(), gts.as_slice())];
        let ap = average_precision(&scenes, 0, 2.0).unwrap().unwrap();
        assert_eq!(ap, 0.0);

        // No ground truth of the category: AP undefined.
        let scenes = [(preds.as_slice(), &[] as &[Box3D])];
        assert!(average_precision(&scenes, 0, 2.0).unwrap().is_none());
    }

    #[test]
    fn ap_matches_oracle_on_crafted_case() {
        // 10 GTs; 5 TPs at top scores, then FPs only.
        let gts: Vec<Box3D> = (0..10).map(|i| gt(i as f64 * 10.0, 0.0, 0)).collect();
        let mut preds: Vec<Detection> = (0..5)
            .map(|i| det(i as f64 * 10.0, 0.1, 0, 0.9 - 0.01 * i as f64))
            .collect();
        for i in 0..5 {
            preds.push(det(500.0 + i as f64 * 10.0, 0.0, 0, 0.5 - 0.01 * i as f64));
        }
        let scenes_owned = vec![(preds.clone(), gts.clone())];
        let scenes = [(preds.as_slice(), gts.as_slice())];
        let ap = average_precision(&scenes, 0, 2.0).unwrap().unwrap();
        let oracle_ap = oracle::brute_force_ap(&scenes_owned, 0, 2.0).unwrap();
        assert_eq!(ap, oracle_ap, "implementation must equal the sweep oracle exactly");
        // Hand value: TPs t=2..5 contribute 0.1 * 0.9 each; t=1 is below min recall.
        assert!((ap - 4.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn ap_matches_oracle_on_random_micro_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..300 {
            let n_gt = rng.gen_range(0..=5);
            let n_pred = rng.gen_range(0..=10);
            let gts: Vec<Box3D> = (0..n_gt)
                .map(|_| gt(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(0..2)))
                .collect();
            let preds: Vec<Detection> = (0..n_pred)
                .map(|_| {
                    det(
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(-10.0..10.0),
                        rng.gen_range(0..2),
                        rng.gen_range(0.0..1.0),
                    )
                })
                .collect();
            let scenes_owned = vec![(preds.clone(), gts.clone())];
            let scenes = [(preds.as_slice(), gts.as_slice())];
            for cat in 0..2 {
                for th in [0.5, 2.0] {
                    let got = average_precision(&scenes, cat, th).unwrap();
                    let want = oracle::brute_force_ap(&scenes_owned, cat, th);
                    match (got, want) {
                        (None, None) => {}
                        (Some(a), Some(b)) => assert_eq!(a, b, "cat {cat} th {th}"),
                        other => panic!("definedness mismatch {other:?}"),
                    }
                }
            }
        }
    }

    #[test]
    fn matching_invariant_to_tie_free_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gts: Vec<Box3D> =
            (0..4).map(|i| gt(i as f64 * 3.0, rng.gen_range(-1.0..1.0), 0)).collect();
        let preds: Vec<Detection> = (0..6)
            .map(|i| det(rng.gen_range(-2.0..12.0), rng.gen_range(-1.0..1.0), 0, 0.1 * i as f64 + 0.05))
            .collect();
        let scenes = [(preds.as_slice(), gts.as_slice())];
        let base = average_precision(&scenes, 0, 2.0).unwrap();
        let mut shuffled = preds.clone();
        shuffled.reverse();
        let scenes2 = [(shuffled.as_slice(), gts.as_slice())];
        let perm = average_precision(&scenes2, 0, 2.0).unwrap();
        assert_eq!(base, perm);
    }

    #[test]
    fn tp_errors_values() {
        let a = gt(0.0, 0.0, 0);
        let b = gt(0.0, 0.0, 0);
        let (ate, ase, aoe) = compute_tp_errors(&[(&a, &b)]);
        assert_eq!((ate, ase, aoe), (0.0, 0.0, 0.0));

        let big = Box3D::ground_truth([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0.0, 0).unwrap();
        let small = Box3D::ground_truth([0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 0.0, 0).unwrap();
        let (_, ase, _) = compute_tp_errors(&[(&big, &small)]);
        assert!((ase - 0.875).abs() < 1e-12, "1 - (1/2)^3");

        let yaw_pi = Box3D::ground_truth([0.0; 3], [1.0; 3], std::f64::consts::PI - 1e-12, 0).unwrap();
        let yaw_neg = Box3D::ground_truth([0.0; 3], [1.0; 3], -std::f64::consts::PI, 0).unwrap();
        let (_, _, aoe) = compute_tp_errors(&[(&yaw_pi, &yaw_neg)]);
        assert!(aoe < 1e-9, "pi and -pi are the same heading");

        assert_eq!(compute_tp_errors(&[]), (1.0, 1.0, 1.0));
    }

    #[test]
    fn spnds_values_and_saturation() {
        assert_eq!(spnds(1.0, 0.0, 0.0, 0.0), 1.0);
        assert_eq!(spnds(0.0, 1.0, 1.0, 1.0), 0.0);
        let v = spnds(0.8746, 0.3, 0.2, 0.4);
        let expect = (5.0 * 0.8746 + 0.7 + 0.8 + 0.6) / 8.0;
        assert!((v - expect).abs() < 1e-12);
        // Saturation: any error >= 1 contributes exactly zero.
        for e in [1.0, 5.0, 100.0] {
            assert_eq!(spnds(0.5, e, 0.2, 0.1), spnds(0.5, 1.0, 0.2, 0.1));
        }
        // Monotonicity.
        assert!(spnds(0.9, 0.1, 0.1, 0.1) > spnds(0.8, 0.1, 0.1, 0.1));
        assert!(spnds(0.9, 0.2, 0.1, 0.1) < spnds(0.9, 0.1, 0.1, 0.1));
        // Bounds on random inputs.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let v = spnds(
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
                rng.gen_range(0.0..3.0),
            );
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn range_bins_partition_and_degenerate_cases() {
        let bins = default_range_bins();
        assert_eq!(bins.len(), 4);
        // All objects in one bin: that bin's report equals the global report.
        let gts = vec![gt(5.0, 0.0, 0), gt(8.0, 3.0, 0)];
        let preds = vec![det(5.1, 0.0, 0, 0.9), det(8.0, 3.2, 0, 0.7)];
        let scenes = [(preds.as_slice(), gts.as_slice())];
        let global = evaluate(&scenes).unwrap();
        let binned = range_binned_eval(&scenes, &bins).unwrap();
        let first = binned[0].report.as_ref().unwrap();
        assert_eq!(first.map, global.map);
        assert_eq!(first.spnds, global.spnds);
        for empty in &binned[1..] {
            assert_eq!(empty.n_gt, 0);
            assert!(empty.report.is_none(), "empty bin carries no report");
        }
        // Overlapping bins rejected.
        let bad = vec![
            RangeBin { min: 0.0, max: Some(25.0) },
            RangeBin { min: 20.0, max: None },
        ];
        assert!(range_binned_eval(&scenes, &bad).is_err());
    }

    #[test]
    fn binned_prediction_follows_matched_gt() {
        // GT at 19.9 m, pred at 20.1 m: matched, so the pred follows its GT
        // into the [0,20) bin and scores a TP there.
        let gts = vec![gt(19.9, 0.0, 0)];
        let preds = vec![det(20.1, 0.0, 0, 0.9)];
        let scenes = [(preds.as_slice(), gts.as_slice())];
        let binned = range_binned_eval(&scenes, &default_range_bins()).unwrap();
        assert_eq!(binned[0].n_gt, 1);
        let r = binned[0].report.as_ref().unwrap();
        assert!(r.map > 0.0);
        assert!(binned[1].report.is_none());
    }

    #[test]
    fn report_spnds_recomputable() {
        let gts = vec![gt(4.0, 2.0, 0), gt(-7.0, 3.0, 1)];
        let preds = vec![det(4.2, 2.0, 0, 0.8), det(-7.0, 3.4, 1, 0.6)];
        let scenes = [(preds.as_slice(), gts.as_slice())];
        let r = evaluate(&scenes).unwrap();
        assert_eq!(r.spnds, spnds(r.map, r.mate, r.mase, r.maoe));
        assert!(r.map > 0.0);
        assert_eq!(r.n_gt, 2);
        assert_eq!(r.n_pred, 2);
    }
}
