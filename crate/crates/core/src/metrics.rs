//! Detection metrics: greedy matching, precision/recall, all-points AP,
//! mAP@0.5 and a latency benchmark.

use std::cmp::Ordering;
use std::time::Instant;

use crate::boxes::{iou, BBox};
use crate::model::Detection;

pub const MATCH_IOU: f64 = 0.5;

/// A labeled box on one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub class_id: usize,
    pub bbox: BBox,
}

/// P = TP / (TP + FP) and R = TP / (TP + FN), each 0 on an empty denominator.
pub fn precision_recall(tp: usize, fp: usize, fn_: usize) -> (f64, f64) {
    let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
    (ratio(tp, fp), ratio(tp, fn_))
}

/// Detections of one class across a dataset, flagged TP/FP and ordered by confidence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// (confidence, is_tp), confidence descending.
    pub records: Vec<(f64, bool)>,
    pub num_gt: usize,
}

impl MatchResult {
    pub fn false_negatives(&self) -> usize {
        self.num_gt - self.records.iter().filter(|r| r.1).count()
    }
}

fn desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Greedy matching for `class_id`: per image, detections in confidence order
/// take the unmatched ground truth of highest IoU (lowest index on ties) if
/// that IoU reaches `iou_thresh`.
pub fn match_class(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], class_id: usize, iou_thresh: f64) -> MatchResult {
    let mut records = Vec::new();
    let mut num_gt = 0;
    for (d, g) in dets.iter().zip(gts) {
        let g: Vec<&GroundTruth> = g.iter().filter(|t| t.class_id == class_id).collect();
        num_gt += g.len();
        let mut d: Vec<&Detection> = d.iter().filter(|t| t.class_id == class_id).collect();
        d.sort_by(|a, b| desc(a.confidence, b.confidence));
        let mut used = vec![false; g.len()];
        for det in d {
            let mut best: Option<(usize, f64)> = None;
            for (j, t) in g.iter().enumerate() {
                let v = iou(&det.bbox, &t.bbox);
                if !used[j] && v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            if let Some((j, _)) = best {
                used[j] = true;
            }
            records.push((det.confidence, best.is_some()));
        }
    }
    records.sort_by(|a, b| desc(a.0, b.0));
    MatchResult { records, num_gt }
}

/// Precision-recall points after each ranked detection, plus the AP.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub ap: f64,
}

/// All-points interpolated AP: area under the monotone precision envelope.
/// `None` when there is neither ground truth nor a detection.
pub fn average_precision(m: &MatchResult) -> Option<PrCurve> {
    if m.num_gt == 0 && m.records.is_empty() {
        return None;
    }
    let (mut tp, mut fp) = (0, 0);
    let mut recall = Vec::with_capacity(m.records.len());
    let mut precision = Vec::with_capacity(m.records.len());
    for &(_, hit) in &m.records {
        if hit {
            tp += 1;
        } else {
            fp += 1;
        }
        let (p, r) = precision_recall(tp, fp, m.num_gt - tp);
        precision.push(p);
        recall.push(r);
    }
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(PrCurve { recall, precision, ap })
}

/// Per-class summary; precision and recall are taken at the best-F1 cut.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub ap: f64,
    pub precision: f64,
    pub recall: f64,
    pub num_gt: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `None` for classes with neither labels nor detections.
    pub classes: Vec<Option<ClassMetrics>>,
    pub map50: f64,
}

/// Unweighted mean of the defined class APs (0 when none is defined).
pub fn map50(aps: &[Option<f64>]) -> f64 {
    let v: Vec<f64> = aps.iter().flatten().copied().collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], nc: usize, iou_thresh: f64) -> EvalReport {
    let classes: Vec<Option<ClassMetrics>> = (0..nc)
        .map(|c| {
            let m = match_class(dets, gts, c, iou_thresh);
            let curve = average_precision(&m)?;
            let (precision, recall) = curve
                .precision
                .iter()
                .zip(&curve.recall)
                .map(|(&p, &r)| (p, r))
                .fold((0.0, 0.0), |best, (p, r)| {
                    let f1 = |(p, r): (f64, f64)| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
                    if f1((p, r)) > f1(best) {
                        (p, r)
                    } else {
                        best
                    }
                });
            Some(ClassMetrics {
                class_id: c,
                ap: curve.ap,
                precision,
                recall,
                num_gt: m.num_gt,
            })
        })
        .collect();
    let aps: Vec<Option<f64>> = classes.iter().map(|c| c.as_ref().map(|c| c.ap)).collect();
    EvalReport {
        map50: map50(&aps),
        classes,
    }
}

/// Latency statistics of repeated single-image runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchReport {
    pub runs: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub fps: f64,
}

/// Times `n` calls of `f` after `warmup` untimed ones.
pub fn fps_bench<E>(n: usize, warmup: usize, mut f: impl FnMut() -> Result<(), E>) -> Result<BenchReport, E> {
    let n = n.max(1);
    for _ in 0..warmup {
        f()?;
    }
    let mut ms = Vec::with_capacity(n);
    for _ in 0..n {
        let t = Instant::now();
        f()?;
        ms.push(t.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mean_ms = ms.iter().sum::<f64>() / n as f64;
    let p95_ms = ms[((n as f64 * 0.95).ceil() as usize).clamp(1, n) - 1];
    Ok(BenchReport {
        runs: n,
        mean_ms,
        p95_ms,
        // Guard against a timer too coarse to see the call.
        fps: 1e3 / mean_ms.max(1e-6),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rec(list: &[(f64, bool)], num_gt: usize) -> MatchResult {
        MatchResult {
            records: list.to_vec(),
            num_gt,
        }
    }

    #[test]
    fn precision_recall_cases() {
        assert_eq!(precision_recall(8, 2, 0).0, 0.8);
        assert_eq!(precision_recall(0, 0, 0), (0.0, 0.0));
        assert_eq!(precision_recall(3, 0, 1).1, 0.75);
    }

    #[test]
    fn hand_cases() {
        assert_eq!(average_precision(&rec(&[(0.9, true)], 1)).unwrap().ap, 1.0);
        let ap = average_precision(&rec(&[(0.9, true), (0.8, false), (0.7, true)], 2)).unwrap().ap;
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&rec(&[(0.9, false), (0.2, false)], 3)).unwrap().ap, 0.0);
        assert!(average_precision(&rec(&[], 0)).is_none());
        assert_eq!(average_precision(&rec(&[], 4)).unwrap().ap, 0.0);
    }

    #[test]
    fn map_is_plain_mean() {
        assert_eq!(map50(&[Some(0.4)]), 0.4);
        assert_eq!(map50(&[Some(1.0), Some(0.5), None]), 0.75);
    }

    fn det(x: f64, y: f64, s: f64, c: usize, conf: f64) -> Detection {
        Detection {
            bbox: BBox::new(x, y, s, s),
            class_id: c,
            confidence: conf,
        }
    }

    #[test]
    fn matching_prefers_highest_iou_and_counts_duplicates_as_fp() {
        let gts = vec![vec![
            GroundTruth { class_id: 0, bbox: BBox::new(10.0, 10.0, 10.0, 10.0) },
            GroundTruth { class_id: 0, bbox: BBox::new(12.0, 10.0, 10.0, 10.0) },
        ]];
        // Overlaps both; the second truth fits better.
        let dets = vec![vec![det(12.5, 10.0, 10.0, 0, 0.9), det(12.0, 10.0, 10.0, 0, 0.8), det(10.0, 10.0, 10.0, 1, 0.7)]];
        let m = match_class(&dets, &gts, 0, MATCH_IOU);
        assert_eq!(m.records, vec![(0.9, true), (0.8, true)]);
        let m = match_class(&[vec![det(10.0, 10.0, 10.0, 0, 0.9), det(10.0, 10.0, 10.0, 0, 0.8)]], &gts[..1], 0, MATCH_IOU);
        assert_eq!(m.records, vec![(0.9, true), (0.8, true)]);
        let one = vec![vec![gts[0][0]]];
        let m = match_class(&[vec![det(10.0, 10.0, 10.0, 0, 0.9), det(10.0, 10.0, 10.0, 0, 0.8)]], &one, 0, MATCH_IOU);
        assert_eq!(m.records, vec![(0.9, true), (0.8, false)]);
        assert_eq!(m.false_negatives(), 0);
    }

    /// Area under the envelope from an explicit sweep over every threshold.
    fn sweep_ap(m: &MatchResult) -> f64 {
        let mut pts = Vec::new();
        for &(t, _) in &m.records {
            let kept: Vec<bool> = m.records.iter().filter(|r| r.0 >= t).map(|r| r.1).collect();
            let tp = kept.iter().filter(|&&h| h).count();
            let (p, r) = precision_recall(tp, kept.len() - tp, m.num_gt - tp);
            pts.push((r, p));
        }
        let mut levels: Vec<f64> = pts.iter().map(|p| p.0).collect();
        levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
        levels.dedup();
        let mut ap = 0.0;
        let mut prev = 0.0;
        for r in levels {
            let p = pts.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
        ap
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> MatchResult {
        let n = rng.gen_range(1..=20);
        let mut records: Vec<(f64, bool)> = (0..n).map(|_| (rng.gen_range(0.0..1.0), rng.gen_bool(0.5))).collect();
        records.sort_by(|a, b| desc(a.0, b.0));
        let tp = records.iter().filter(|r| r.1).count();
        MatchResult {
            records,
            num_gt: tp + rng.gen_range(0..4),
        }
    }

    #[test]
    fn matches_threshold_sweep() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m = random_instance(&mut rng);
            if m.num_gt == 0 {
                continue;
            }
            let ap = average_precision(&m).unwrap().ap;
            assert!((ap - sweep_ap(&m)).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&ap));
        }
    }

    #[test]
    fn ap_depends_only_on_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let m = random_instance(&mut rng);
            let scaled = MatchResult {
                records: m.records.iter().map(|&(c, h)| (c * 0.37, h)).collect(),
                num_gt: m.num_gt,
            };
            assert_eq!(average_precision(&m).map(|c| c.ap), average_precision(&scaled).map(|c| c.ap));
        }
    }

    #[test]
    fn duplicate_detection_never_helps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let gts: Vec<Vec<GroundTruth>> = vec![(0..4)
                .map(|i| GroundTruth {
                    class_id: 0,
                    bbox: BBox::new(20.0 * i as f64 + 10.0, 10.0, 8.0, 8.0),
                })
                .collect()];
            let mut dets: Vec<Detection> = (0..6)
                .map(|_| det(rng.gen_range(5.0..80.0), 10.0, 8.0, 0, rng.gen_range(0.0..1.0)))
                .collect();
            let before = evaluate(&[dets.clone()], &gts, 1, MATCH_IOU).map50;
            // A second, lower-ranked copy of an existing detection.
            let orig = dets[rng.gen_range(0..dets.len())];
            let copy = Detection {
                confidence: orig.confidence * rng.gen_range(0.0..1.0),
                ..orig
            };
            dets.push(copy);
            let after = evaluate(&[dets], &gts, 1, MATCH_IOU).map50;
            assert!(after <= before + 1e-12, "{before} -> {after}");
        }
    }

    #[test]
    fn bench_reports_positive_rate() {
        let r = fps_bench::<()>(5, 1, || {
            std::hint::black_box((0..1000).sum::<u64>());
            Ok(())
        })
        .unwrap();
        assert!(r.fps > 0.0 && r.p95_ms >= 0.0 && r.runs == 5);
    }
}
