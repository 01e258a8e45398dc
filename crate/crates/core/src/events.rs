//! Streaming event segmentation over scalar surprise signals.
//!
//! A trailing window of the signal is normalised into a probability
//! distribution and scored by Shannon entropy. Sustained bursts of surprise
//! spread mass over many frames and drive the window entropy up; the
//! detector reports an event boundary at the start of the window whose
//! entropy is a sufficiently prominent strict local maximum. Suppression of
//! nearby candidates falls out of the strictness requirement: two strict
//! maxima cannot lie within one radius of each other.
//!
//! Two signals feed this machinery: the perception stack's per-frame
//! prediction error, and the squared step-to-step change of the
//! controller's aggregation vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which surprise signal a segmentation run consumed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    /// Per-frame prediction-error totals.
    PredictionError,
    /// Squared deltas of the controller's aggregation vector.
    HiddenDelta,
}

impl SegmentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentMode::PredictionError => "prediction_error",
            SegmentMode::HiddenDelta => "hidden_delta",
        }
    }

    /// Accepts the numeric shorthand ("1"/"2") or the full name.
    pub fn parse(s: &str) -> Result<SegmentMode> {
        match s.trim() {
            "1" | "prediction_error" => Ok(SegmentMode::PredictionError),
            "2" | "hidden_delta" => Ok(SegmentMode::HiddenDelta),
            other => Err(Error::Usage(format!(
                "unknown segmentation mode `{other}` (expected 1, 2, prediction_error, or hidden_delta)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterConfig {
    /// Trailing window length, in frames.
    pub window_n: usize,
    /// Half-width of the strict-local-maximum / prominence neighbourhood.
    pub nms_radius: usize,
    /// Minimum required drop (in nats) from a peak to the lowest entropy on
    /// each side of it within the neighbourhood.
    pub min_prominence: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        let window_n = 30;
        SegmenterConfig {
            window_n,
            nms_radius: 15,
            // Two percent of the maximum achievable window entropy.
            min_prominence: 0.02 * (window_n as f64).ln(),
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_n < 2 {
            return Err(Error::config("window_n", "must be >= 2"));
        }
        if self.nms_radius < 1 {
            return Err(Error::config("nms_radius", "must be >= 1"));
        }
        if !(self.min_prominence >= 0.0) || !self.min_prominence.is_finite() {
            return Err(Error::config("min_prominence", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Normalises a window of non-negative values into a distribution.
/// An all-zero window becomes the uniform distribution; negative or
/// non-finite values are data errors; windows need at least two entries.
pub fn normalize_window(xs: &[f64]) -> Result<Vec<f64>> {
    if xs.len() < 2 {
        return Err(Error::Usage(format!(
            "window of {} values cannot be normalised (need >= 2)",
            xs.len()
        )));
    }
    let mut sum = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        if !x.is_finite() {
            return Err(Error::Data(format!("non-finite value {x} at window offset {i}")));
        }
        if x < 0.0 {
            return Err(Error::Data(format!("negative value {x} at window offset {i}")));
        }
        sum += x;
    }
    if sum == 0.0 {
        return Ok(vec![1.0 / xs.len() as f64; xs.len()]);
    }
    Ok(xs.iter().map(|x| x / sum).collect())
}

/// Shannon entropy in nats, with the `0 ln 0 = 0` convention.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter().map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 }).sum()
}

/// Entropy of every trailing window: element `k` scores the window
/// `stream[k .. k + n]`, so it is indexed by window start. Streams shorter
/// than one window yield an empty series.
pub fn window_entropy_series(stream: &[f64], window_n: usize) -> Result<Vec<f64>> {
    if window_n < 2 {
        return Err(Error::config("window_n", "must be >= 2"));
    }
    if stream.len() < window_n {
        return Ok(Vec::new());
    }
    (0..=stream.len() - window_n)
        .map(|k| Ok(entropy(&normalize_window(&stream[k..k + window_n])?)))
        .collect()
}

/// A detected event boundary: the first frame of the window whose entropy
/// peaked, together with that peak entropy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Boundary {
    pub t: usize,
    pub entropy: f64,
}

/// Scans the signal for prominent strict local maxima of trailing-window
/// entropy and reports each as a boundary at its window's start frame.
///
/// A candidate window must (a) have strictly greater entropy than every
/// other window within `nms_radius` of it (the left side clamps at the
/// first window; on the right a full radius of successor windows must
/// exist), and (b) drop by at least `min_prominence` from the peak to the
/// minimum entropy on each non-empty side of the neighbourhood.
pub fn detect_boundaries(stream: &[f64], cfg: &SegmenterConfig) -> Result<Vec<Boundary>> {
    cfg.validate()?;
    let h = window_entropy_series(stream, cfg.window_n)?;
    let k_count = h.len();
    let r = cfg.nms_radius;
    let mut out = Vec::new();
    for k in 0..k_count {
        // The full right neighbourhood must exist; otherwise a rising edge
        // at the end of the stream would masquerade as a peak.
        if k + r > k_count - 1 {
            break;
        }
        let lo = k.saturating_sub(r);
        let hi = k + r;
        let mut strict_max = true;
        for j in lo..=hi {
            if j != k && h[j] >= h[k] {
                strict_max = false;
                break;
            }
        }
        if !strict_max {
            continue;
        }
        let left_min = h[lo..k].iter().cloned().fold(f64::INFINITY, f64::min);
        let right_min = h[k + 1..=hi].iter().cloned().fold(f64::INFINITY, f64::min);
        let prominence = (h[k] - left_min).min(h[k] - right_min);
        if prominence >= cfg.min_prominence {
            out.push(Boundary { t: k, entropy: h[k] });
        }
    }
    Ok(out)
}

/// Half-open frame span `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Cuts `[0, total_len)` at the given boundary frames. Boundaries must be
/// strictly increasing and lie inside the span; a leading boundary at
/// frame 0 is redundant and ignored.
pub fn segments_from_boundaries(total_len: usize, boundaries: &[usize]) -> Result<Vec<Segment>> {
    if total_len == 0 {
        return Ok(Vec::new());
    }
    let mut cuts = Vec::with_capacity(boundaries.len() + 2);
    cuts.push(0);
    for &b in boundaries {
        if b == 0 {
            continue;
        }
        if b >= total_len {
            return Err(Error::Usage(format!(
                "boundary {b} outside the stream of {total_len} frames"
            )));
        }
        if b <= *cuts.last().unwrap() && cuts.len() > 1 {
            return Err(Error::Usage(format!("boundaries not strictly increasing at {b}")));
        }
        cuts.push(b);
    }
    cuts.push(total_len);
    Ok(cuts.windows(2).map(|w| Segment { start: w[0], end: w[1] }).collect())
}

/// One summarised segment: the frame inside it with the smallest surprise,
/// i.e. the frame the model understood best.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Keyframe {
    /// Index of the segment within the run.
    pub segment: usize,
    /// Absolute frame index of the chosen keyframe.
    pub keyframe: usize,
    /// Surprise value at that frame.
    pub le: f64,
}

/// Picks the minimum-surprise frame of every segment (earliest on ties).
pub fn summarize(segments: &[Segment], surprise: &[f64]) -> Result<Vec<Keyframe>> {
    let mut out = Vec::with_capacity(segments.len());
    for (idx, seg) in segments.iter().enumerate() {
        if seg.is_empty() {
            return Err(Error::Usage(format!(
                "segment {idx} [{}, {}) is empty",
                seg.start, seg.end
            )));
        }
        if seg.end > surprise.len() {
            return Err(Error::Usage(format!(
                "segment {idx} ends at {} but the signal has {} frames",
                seg.end,
                surprise.len()
            )));
        }
        let mut best = seg.start;
        for t in seg.start..seg.end {
            if surprise[t] < surprise[best] {
                best = t;
            }
        }
        out.push(Keyframe { segment: idx, keyframe: best, le: surprise[best] });
    }
    Ok(out)
}

/// Squared Euclidean distance between consecutive vectors: the behaviour
/// change signal. `n` inputs yield `n - 1` outputs; all vectors must share
/// one dimension.
pub fn hidden_delta_signal(hiddens: &[Vec<f64>]) -> Result<Vec<f64>> {
    if hiddens.len() < 2 {
        return Ok(Vec::new());
    }
    let dim = hiddens[0].len();
    let mut out = Vec::with_capacity(hiddens.len() - 1);
    for (i, pair) in hiddens.windows(2).enumerate() {
        if pair[0].len() != dim || pair[1].len() != dim {
            return Err(Error::shape(
                format!("vectors of dimension {dim}"),
                format!("dimension {} at index {}", pair[1].len().max(pair[0].len()), i + 1),
            ));
        }
        let d2: f64 = pair[0].iter().zip(&pair[1]).map(|(a, b)| (a - b) * (a - b)).sum();
        out.push(d2);
    }
    Ok(out)
}

/// Serialisable record of one segmentation run, written by the CLI.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryReport {
    pub mode: SegmentMode,
    pub window_n: usize,
    pub nms_radius: usize,
    pub min_prominence: f64,
    pub boundaries: Vec<Boundary>,
}

/// Reference surprise stream with one unambiguous sustained event.
///
/// The background is a low plateau with an exactly periodic glitch whose
/// period divides the window length, so every plateau window holds the same
/// value multiset and the entropy series is flat there. One window-length
/// burst of large, slightly drifting values starts at `event_at`; the
/// trailing window that exactly covers it maximises entropy, so the
/// detector must report precisely one boundary at `event_at`.
#[cfg(test)]
pub(crate) fn synthetic_event_stream(
    total: usize,
    event_at: usize,
    window_n: usize,
) -> Vec<f64> {
    let mut s = Vec::with_capacity(total);
    for i in 0..total {
        if i >= event_at && i < event_at + window_n {
            let k = (i - event_at) as f64;
            s.push(5e-2 * (1.0 + 0.01 * k));
        } else if i % 10 == 0 {
            s.push(3e-3);
        } else {
            s.push(1e-5);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_matches_frozen_value() {
        let h = entropy(&[0.125, 0.125, 0.25, 0.5]);
        assert!((h - 1.21301).abs() < 1e-5, "got {h}");
    }

    #[test]
    fn entropy_limits_are_exact() {
        assert_eq!(entropy(&[1.0, 0.0, 0.0]), 0.0, "point mass must score zero");
        let n = 16;
        let uniform = vec![1.0 / n as f64; n];
        assert!((entropy(&uniform) - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn normalize_window_contract() {
        let p = normalize_window(&[1.0, 3.0]).unwrap();
        assert_eq!(p, vec![0.25, 0.75]);
        let z = normalize_window(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(z, vec![0.25; 4]);
        assert!(matches!(normalize_window(&[1.0]), Err(Error::Usage(_))));
        assert!(matches!(normalize_window(&[0.5, -0.1]), Err(Error::Data(_))));
        assert!(matches!(normalize_window(&[0.5, f64::NAN]), Err(Error::Data(_))));
        let sum: f64 = normalize_window(&[0.3, 0.5, 0.9, 2.2]).unwrap().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn window_series_is_indexed_by_window_start() {
        let stream = vec![1.0, 1.0, 1.0, 9.0, 1.0];
        let h = window_entropy_series(&stream, 3).unwrap();
        assert_eq!(h.len(), 3);
        // Window 0 is uniform [1,1,1]: entropy ln 3 exactly.
        assert!((h[0] - 3f64.ln()).abs() < 1e-12);
        // Later windows contain the 9 and are less uniform.
        assert!(h[1] < h[0]);
        assert!(window_entropy_series(&stream, 6).unwrap().is_empty());
    }

    #[test]
    fn detector_reports_one_boundary_at_the_event_start() {
        let cfg = SegmenterConfig::default();
        let stream = synthetic_event_stream(300, 100, cfg.window_n);
        let found = detect_boundaries(&stream, &cfg).unwrap();
        assert_eq!(found.len(), 1, "expected exactly one boundary, got {found:?}");
        assert_eq!(found[0].t, 100);
        // The peak window covers the whole near-uniform burst.
        let max_h = (cfg.window_n as f64).ln();
        assert!(found[0].entropy > 3.2 && found[0].entropy <= max_h, "peak entropy {}", found[0].entropy);
    }

    #[test]
    fn detector_finds_two_separated_events() {
        let cfg = SegmenterConfig::default();
        let mut stream = synthetic_event_stream(320, 80, cfg.window_n);
        let second = synthetic_event_stream(320, 200, cfg.window_n);
        for i in 200..200 + cfg.window_n {
            stream[i] = second[i];
        }
        let found = detect_boundaries(&stream, &cfg).unwrap();
        let ts: Vec<usize> = found.iter().map(|b| b.t).collect();
        assert_eq!(ts, vec![80, 200]);
        // Suppression invariant: reported peaks are farther apart than the radius.
        for pair in ts.windows(2) {
            assert!(pair[1] - pair[0] > cfg.nms_radius);
        }
    }

    #[test]
    fn constant_streams_produce_no_boundaries() {
        let cfg = SegmenterConfig::default();
        for v in [0.0, 1.0, 3.7] {
            let stream = vec![v; 200];
            assert!(detect_boundaries(&stream, &cfg).unwrap().is_empty(), "value {v}");
        }
    }

    #[test]
    fn short_streams_yield_no_boundaries() {
        let cfg = SegmenterConfig::default();
        assert!(detect_boundaries(&[1.0; 10], &cfg).unwrap().is_empty());
        assert!(detect_boundaries(&[], &cfg).unwrap().is_empty());
    }

    #[test]
    fn detection_is_scale_invariant() {
        let cfg = SegmenterConfig::default();
        let stream = synthetic_event_stream(300, 100, cfg.window_n);
        let scaled: Vec<f64> = stream.iter().map(|v| v * 7.3).collect();
        let a = detect_boundaries(&stream, &cfg).unwrap();
        let b = detect_boundaries(&scaled, &cfg).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.t, y.t);
            assert!((x.entropy - y.entropy).abs() < 1e-9);
        }
    }

    #[test]
    fn rising_tail_at_stream_end_is_not_a_peak() {
        let cfg = SegmenterConfig::default();
        // Event too close to the end: no full right neighbourhood exists.
        let total = 100 + cfg.window_n + 5;
        let stream = synthetic_event_stream(total, 100, cfg.window_n);
        assert!(detect_boundaries(&stream, &cfg).unwrap().is_empty());
    }

    #[test]
    fn negative_signal_values_are_data_errors() {
        let cfg = SegmenterConfig::default();
        let mut stream = vec![1.0; 100];
        stream[40] = -2.0;
        assert!(matches!(detect_boundaries(&stream, &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn segmenter_config_violations_name_fields() {
        SegmenterConfig::default().validate().unwrap();
        let bad = SegmenterConfig { window_n: 1, ..SegmenterConfig::default() };
        match bad.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "window_n"),
            other => panic!("expected window_n error, got {other:?}"),
        }
        assert!(SegmenterConfig { nms_radius: 0, ..SegmenterConfig::default() }.validate().is_err());
        assert!(
            SegmenterConfig { min_prominence: -1.0, ..SegmenterConfig::default() }
                .validate()
                .is_err()
        );
    }

    #[test]
    fn default_prominence_is_two_percent_of_max_entropy() {
        let cfg = SegmenterConfig::default();
        assert!((cfg.min_prominence - 0.02 * 30f64.ln()).abs() < 1e-12);
        assert!((30f64.ln() - 3.4012).abs() < 1e-4);
    }

    #[test]
    fn segments_partition_the_stream() {
        let segs = segments_from_boundaries(10, &[3, 7]).unwrap();
        assert_eq!(
            segs,
            vec![
                Segment { start: 0, end: 3 },
                Segment { start: 3, end: 7 },
                Segment { start: 7, end: 10 }
            ]
        );
        assert_eq!(segments_from_boundaries(10, &[]).unwrap(), vec![Segment { start: 0, end: 10 }]);
        // Leading zero is redundant, not an error.
        assert_eq!(segments_from_boundaries(10, &[0, 4]).unwrap().len(), 2);
        assert!(segments_from_boundaries(10, &[5, 5]).is_err());
        assert!(segments_from_boundaries(10, &[12]).is_err());
        assert!(segments_from_boundaries(0, &[]).unwrap().is_empty());
        // Coverage invariant: consecutive segments tile [0, T).
        let segs = segments_from_boundaries(57, &[9, 23, 24, 56]).unwrap();
        assert_eq!(segs.first().unwrap().start, 0);
        assert_eq!(segs.last().unwrap().end, 57);
        for pair in segs.windows(2) {
            assert_eq!(pair[0].end, pair[1].start);
        }
    }

    #[test]
    fn summarize_picks_minimum_surprise_earliest_on_ties() {
        let segs = vec![Segment { start: 0, end: 3 }, Segment { start: 3, end: 6 }];
        let le = vec![5.0, 2.0, 9.0, 1.0, 8.0, 1.0];
        let kf = summarize(&segs, &le).unwrap();
        assert_eq!(kf.len(), 2);
        assert_eq!((kf[0].segment, kf[0].keyframe, kf[0].le), (0, 1, 2.0));
        assert_eq!((kf[1].segment, kf[1].keyframe, kf[1].le), (1, 3, 1.0));
        // Errors: signal too short, empty segment.
        assert!(summarize(&segs, &le[..4]).is_err());
        assert!(summarize(&[Segment { start: 2, end: 2 }], &le).is_err());
    }

    #[test]
    fn hidden_delta_signal_is_squared_step_distance() {
        let hs = vec![vec![0.0, 0.0], vec![3.0, 4.0], vec![3.0, 4.0]];
        assert_eq!(hidden_delta_signal(&hs).unwrap(), vec![25.0, 0.0]);
        assert!(hidden_delta_signal(&[]).unwrap().is_empty());
        assert!(hidden_delta_signal(&[vec![1.0]]).unwrap().is_empty());
        let bad = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(matches!(hidden_delta_signal(&bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in [SegmentMode::PredictionError, SegmentMode::HiddenDelta] {
            assert_eq!(SegmentMode::parse(mode.as_str()).unwrap(), mode);
        }
        assert_eq!(SegmentMode::parse("1").unwrap(), SegmentMode::PredictionError);
        assert_eq!(SegmentMode::parse("2").unwrap(), SegmentMode::HiddenDelta);
        assert!(SegmentMode::parse("3").is_err());
    }

    #[test]
    fn boundary_report_serialises_with_stable_field_names() {
        let report = BoundaryReport {
            mode: SegmentMode::PredictionError,
            window_n: 30,
            nms_radius: 15,
            min_prominence: 0.068,
            boundaries: vec![Boundary { t: 100, entropy: 3.4 }],
        };
        let json = serde_json::to_string(&report).unwrap();
        for needle in [
            "\"mode\":\"prediction_error\"",
            "\"window_n\"",
            "\"nms_radius\"",
            "\"min_prominence\"",
            "\"boundaries\"",
            "\"t\":100",
            "\"entropy\":3.4",
        ] {
            assert!(json.contains(needle), "missing {needle} in {json}");
        }
        let back: BoundaryReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.boundaries, report.boundaries);
    }
}
