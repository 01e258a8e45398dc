//! Evaluation metrics for segmentation and tracking.
//!
//! Boundary detection is scored by precision/recall/F1 under a frame
//! tolerance, with one-to-one greedy matching ordered by distance (ties by
//! ground-truth index, then prediction index). That ordering is part of the
//! metric's definition, and it makes the true-positive count monotone in
//! the tolerance: raising the tolerance only appends candidate pairs after
//! all existing ones, so previous matches are preserved.

use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::events::Segment;

/// Tolerances (in frames) for the strict evaluation regime.
pub const STRICT_TOLERANCES: [usize; 4] = [2, 5, 10, 15];
/// Tolerances (in frames) for the relaxed evaluation regime.
pub const RELAXED_TOLERANCES: [usize; 3] = [15, 30, 45];

/// Precision/recall/F1 of predicted boundary frames against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfResult {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    /// Set when either boundary list was empty, in which case the scores
    /// are zero by convention rather than by measurement.
    pub degenerate: bool,
}

/// Scores predicted boundaries against ground truth at one tolerance.
///
/// Matching is greedy and one-to-one over all pairs with `|pred - gt| <=
/// tol`, processed in ascending order of `(distance, gt index, pred
/// index)`. Empty inputs score zero and set the `degenerate` flag.
pub fn boundary_prf(pred: &[usize], gt: &[usize], tol: usize) -> PrfResult {
    if pred.is_empty() || gt.is_empty() {
        return PrfResult {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            true_positives: 0,
            degenerate: true,
        };
    }
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (gi, &g) in gt.iter().enumerate() {
        for (pi, &p) in pred.iter().enumerate() {
            let dist = p.abs_diff(g);
            if dist <= tol {
                pairs.push((dist, gi, pi));
            }
        }
    }
    pairs.sort_unstable();
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut tp = 0;
    for (_, gi, pi) in pairs {
        if !gt_used[gi] && !pred_used[pi] {
            gt_used[gi] = true;
            pred_used[pi] = true;
            tp += 1;
        }
    }
    let precision = tp as f64 / pred.len() as f64;
    let recall = tp as f64 / gt.len() as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    PrfResult { precision, recall, f1, true_positives: tp, degenerate: false }
}

/// Intersection-over-union of two half-open frame spans.
pub fn interval_iou(a: Segment, b: Segment) -> f64 {
    let inter_lo = a.start.max(b.start);
    let inter_hi = a.end.min(b.end);
    let inter = inter_hi.saturating_sub(inter_lo);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Checks that `segs` tiles `[0, total_len)` exactly: starts at zero, no
/// gaps, no overlaps, no empty pieces, ends at `total_len`.
fn validate_partition(which: &str, segs: &[Segment], total_len: usize) -> Result<()> {
    if total_len == 0 {
        return Err(Error::Usage(format!("{which} segmentation over an empty stream")));
    }
    if segs.is_empty() {
        return Err(Error::Usage(format!("{which} segmentation has no segments")));
    }
    if segs[0].start != 0 {
        return Err(Error::Usage(format!(
            "{which} segmentation starts at {} instead of 0",
            segs[0].start
        )));
    }
    for (i, s) in segs.iter().enumerate() {
        if s.is_empty() {
            return Err(Error::Usage(format!(
                "{which} segment {i} [{}, {}) is empty",
                s.start, s.end
            )));
        }
        if i + 1 < segs.len() && s.end != segs[i + 1].start {
            return Err(Error::Usage(format!(
                "{which} segments {i} and {} do not meet: [{}, {}) then [{}, {})",
                i + 1,
                s.start,
                s.end,
                segs[i + 1].start,
                segs[i + 1].end
            )));
        }
    }
    let end = segs.last().unwrap().end;
    if end != total_len {
        return Err(Error::Usage(format!(
            "{which} segmentation covers {end} frames but the stream has {total_len}"
        )));
    }
    Ok(())
}

/// Mean, over ground-truth segments, of the best IoU any predicted segment
/// achieves against it. Both inputs must partition the same span.
pub fn segment_iou(pred: &[Segment], gt: &[Segment], total_len: usize) -> Result<f64> {
    validate_partition("predicted", pred, total_len)?;
    validate_partition("ground-truth", gt, total_len)?;
    let mut acc = 0.0;
    for g in gt {
        let best = pred.iter().map(|p| interval_iou(*p, *g)).fold(0.0, f64::max);
        acc += best;
    }
    Ok(acc / gt.len() as f64)
}

/// Fraction of frames whose predicted segment's label matches the
/// ground-truth frame label. Each predicted segment is labelled by the
/// majority ground-truth label within it; ties go to the tied label whose
/// first occurrence inside the segment is earliest.
pub fn frame_accuracy<L: PartialEq + Copy>(pred: &[Segment], gt_labels: &[L]) -> Result<f64> {
    validate_partition("predicted", pred, gt_labels.len())?;
    let mut correct = 0usize;
    for seg in pred {
        let span = &gt_labels[seg.start..seg.end];
        // Distinct labels in order of first occurrence.
        let mut distinct: Vec<L> = Vec::new();
        for l in span {
            if !distinct.iter().any(|d| d == l) {
                distinct.push(*l);
            }
        }
        let mut best = distinct[0];
        let mut best_count = 0usize;
        for cand in &distinct {
            let count = span.iter().filter(|l| *l == cand).count();
            // Strict improvement only: first-occurrence order wins ties.
            if count > best_count {
                best_count = count;
                best = *cand;
            }
        }
        correct += span.iter().filter(|l| **l == best).count();
    }
    Ok(correct as f64 / gt_labels.len() as f64)
}

/// Aggregate tracking quality over evaluation episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingMetrics {
    /// Mean over episodes of the summed per-step reward.
    pub avg_return: f64,
    /// Mean episode length in steps.
    pub avg_length: f64,
    /// Set when no episodes were supplied; the means are zero by convention.
    pub degenerate: bool,
}

pub fn tracking_metrics(per_episode_rewards: &[Vec<f64>]) -> TrackingMetrics {
    if per_episode_rewards.is_empty() {
        return TrackingMetrics { avg_return: 0.0, avg_length: 0.0, degenerate: true };
    }
    let n = per_episode_rewards.len() as f64;
    let avg_return = per_episode_rewards.iter().map(|r| r.iter().sum::<f64>()).sum::<f64>() / n;
    let avg_length = per_episode_rewards.iter().map(|r| r.len() as f64).sum::<f64>() / n;
    TrackingMetrics { avg_return, avg_length, degenerate: false }
}

/// One row of the metrics table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub label: String,
    pub mode: String,
    pub tol_frames: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub frame_acc: f64,
    pub avg_return: f64,
    pub avg_length: f64,
}

pub const METRICS_CSV_HEADER: &str =
    "label,mode,tol_frames,precision,recall,f1,iou,frame_acc,ar,al";

/// Renders metrics rows as CSV with a fixed header and six-decimal values.
pub fn metrics_csv_string(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.label,
            r.mode,
            r.tol_frames,
            r.precision,
            r.recall,
            r.f1,
            r.iou,
            r.frame_acc,
            r.avg_return,
            r.avg_length
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(metrics_csv_string(rows).as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}
