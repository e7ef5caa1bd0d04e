//! Knee-point detection on validation traces, checkpoint selection for
//! fine-tuning, and a two-run stability comparison.
//!
//! # Knee detection
//!
//! Given a trace `y` (folded so that higher is better) and window `W` with
//! half-width `h = W / 2`:
//!
//! 1. The trace is cut at the first NaN marker.
//! 2. `s` is a centered moving average whose half-width shrinks to
//!    `min(h, i, n − 1 − i)` at the edges, so affine traces stay affine.
//! 3. The improving prefix ends at the first `i ≥ W` with
//!    `s[i] − s[i − W] < δ · (max_{j ≤ i} s[j] − s[0])`, or at the last point.
//! 4. With signed second differences `d[i] = y[i + 1] − 2y[i] + y[i − 1]`
//!    and `σ(·)` the median absolute deviation from the median, a center `c`
//!    is unstable when `σ(d[c − W ..= c + W])² > ρ · σ(d[1 .. c − W])²`.
//!    Oscillation starts at the first of 2W consecutive unstable centers.
//!    Scanning begins once 2W differences precede the window.
//! 5. On `[0, min(end, oscillation_start)]`, iterations and `s` are rescaled to
//!    `[0, 1]` and the knee is the point furthest above the chord joining the
//!    two ends. Near-ties go to the latest point.
//!
//! Step 3 only looks at `s[i]` for `i ≤ n − 1 − h`, whose window is complete
//! on the right, and step 4 only at centers whose windows lie inside the
//! trace. Appending points after the oscillation start
//! therefore never moves the knee.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Orientation {
    HigherBetter,
    LowerBetter,
}

impl Orientation {
    /// Lower-better for names containing "loss" or "lpips", else higher-better.
    pub fn infer(metric_name: &str) -> Self {
        let n = metric_name.to_ascii_lowercase();
        if n.contains("loss") || n.contains("lpips") {
            Orientation::LowerBetter
        } else {
            Orientation::HigherBetter
        }
    }

    fn sign(self) -> f64 {
        match self {
            Orientation::HigherBetter => 1.0,
            Orientation::LowerBetter => -1.0,
        }
    }
}

/// Scalar metric sampled at strictly increasing iterations. NaN values are
/// divergence markers; infinities are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTrace {
    pub name: String,
    pub orientation: Orientation,
    points: Vec<(u64, f64)>,
}

impl MetricTrace {
    pub fn new(name: impl Into<String>, orientation: Orientation, points: Vec<(u64, f64)>) -> Result<Self> {
        let name = name.into();
        for w in points.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Domain(format!(
                    "trace `{name}`: iterations not strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some(&(it, v)) = points.iter().find(|(_, v)| v.is_infinite()) {
            return Err(Error::NonFinite(format!("trace `{name}` has {v} at iteration {it}")));
        }
        Ok(MetricTrace { name, orientation, points })
    }

    pub fn empty(name: impl Into<String>, orientation: Orientation) -> Self {
        MetricTrace { name: name.into(), orientation, points: Vec::new() }
    }

    /// Appends a point; the iteration must exceed the last one.
    pub fn push(&mut self, iteration: u64, value: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if iteration <= last {
                return Err(Error::Domain(format!("trace `{}`: iteration {iteration} after {last}", self.name)));
            }
        }
        if value.is_infinite() {
            return Err(Error::NonFinite(format!("trace `{}` value {value} at {iteration}", self.name)));
        }
        self.points.push((iteration, value));
        Ok(())
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first_nan(&self) -> Option<u64> {
        self.points.iter().find(|(_, v)| v.is_nan()).map(|&(i, _)| i)
    }

    pub fn has_divergence(&self) -> bool {
        self.first_nan().is_some()
    }

    /// Prefix before the first NaN marker.
    pub fn finite_prefix(&self) -> &[(u64, f64)] {
        let end = self.points.iter().position(|(_, v)| v.is_nan()).unwrap_or(self.points.len());
        &self.points[..end]
    }
}

pub const TRACE_CSV_HEADER: &str = "iteration,metric_name,value";

#[derive(Serialize, Deserialize)]
struct TraceRow {
    iteration: u64,
    metric_name: String,
    value: f64,
}

/// Writes rows in the given order, one header.
pub fn write_traces_csv<W: Write>(out: W, traces: &[MetricTrace]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in traces {
        for &(iteration, value) in &t.points {
            w.serialize(TraceRow { iteration, metric_name: t.name.clone(), value })
                .map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    if traces.iter().all(MetricTrace::is_empty) {
        w.write_record(["iteration", "metric_name", "value"]).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

/// Parses a trace CSV, grouping rows by metric name (sorted by name).
/// Orientation is inferred from each name.
pub fn read_traces_csv<R: BufRead>(input: R) -> Result<Vec<MetricTrace>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["iteration", "metric_name", "value"] {
        return Err(Error::Format(format!("expected header `{TRACE_CSV_HEADER}`, got `{}`", headers.iter().collect::<Vec<_>>().join(","))));
    }
    let mut groups: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for (line, row) in r.deserialize::<TraceRow>().enumerate() {
        let row = row.map_err(|e| Error::Format(format!("row {}: {e}", line + 2)))?;
        groups.entry(row.metric_name).or_default().push((row.iteration, row.value));
    }
    groups.into_iter().map(|(name, pts)| MetricTrace::new(name.clone(), Orientation::infer(&name), pts)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KneeConfig {
    pub window: usize,
    pub min_gain: f64,
    pub osc_ratio: f64,
}

impl Default for KneeConfig {
    fn default() -> Self {
        KneeConfig { window: 9, min_gain: 0.005, osc_ratio: 4.0 }
    }
}

impl KneeConfig {
    fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(Error::Domain("knee window must be positive".into()));
        }
        if !(self.min_gain > 0.0 && self.min_gain < 1.0) {
            return Err(Error::Domain(format!("min_gain must be in (0, 1), got {}", self.min_gain)));
        }
        if !(self.osc_ratio > 1.0 && self.osc_ratio.is_finite()) {
            return Err(Error::Domain(format!("osc_ratio must be finite and > 1, got {}", self.osc_ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneeDiagnostics {
    pub window: usize,
    pub min_gain: f64,
    pub osc_ratio: f64,
    /// Points analysed after cutting at the first NaN.
    pub points_used: usize,
    pub truncated_at_nan: Option<u64>,
    /// `max s − s[0]` over the knee domain, in folded units.
    pub total_gain: f64,
    /// Squared second-difference scale before and inside the first window of
    /// the oscillation run, if one was found.
    pub baseline_variance: Option<f64>,
    pub window_variance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KneeReport {
    pub metric: String,
    pub knee_iteration: u64,
    pub improve_end: u64,
    pub oscillation_start: Option<u64>,
    pub smoothed_trace: MetricTrace,
    pub diagnostics: KneeDiagnostics,
}

/// Moving average with a shrinking symmetric window at the edges.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let n = values.len();
    let h = window / 2;
    (0..n)
        .map(|i| {
            let r = h.min(i).min(n - 1 - i);
            let s: f64 = values[i - r..=i + r].iter().sum();
            s / (2 * r + 1) as f64
        })
        .collect()
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        0.5 * (xs[m - 1] + xs[m])
    }
}

/// Median absolute deviation from the median.
fn mad(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    let m = median(&mut v);
    v.iter_mut().for_each(|x| *x = (*x - m).abs());
    median(&mut v)
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

pub fn detect_knee(trace: &MetricTrace, cfg: &KneeConfig) -> Result<KneeReport> {
    cfg.validate()?;
    let pts = trace.finite_prefix();
    let n = pts.len();
    let w = cfg.window;
    if n < 3 * w || n < 3 {
        return Err(Error::TooShort { needed: (3 * w).max(3), got: n });
    }
    let h = w / 2;
    let sign = trace.orientation.sign();
    let y: Vec<f64> = pts.iter().map(|&(_, v)| sign * v).collect();
    let s = smooth(&y, w);
    // Highest index whose smoothing window is complete on the right.
    let stable = n - 1 - h;

    let mut end = n - 1;
    let mut running_max = s[0];
    for i in 1..=stable {
        running_max = running_max.max(s[i]);
        if i >= w && s[i] - s[i - w] < cfg.min_gain * (running_max - s[0]) {
            end = i;
            break;
        }
    }

    // Oscillation: the local noise scale, taken as the median absolute
    // deviation of signed second differences over a window, rises by √ρ over
    // the same scale of everything before the window and stays there for 2W
    // consecutive centres. Straight segments give zero second differences and
    // a smooth corner shifts them all one way, which centring on the median
    // removes; noise and oscillation alternate in sign.
    let d2: Vec<f64> = (0..n).map(|i| if i == 0 || i == n - 1 { 0.0 } else { y[i + 1] - 2.0 * y[i] + y[i - 1] }).collect();
    let ratio = cfg.osc_ratio.sqrt();
    let (mut lo, mut hi) = (y[0], y[0]);
    let mut seen = 0;
    let mut osc = None;
    let mut baseline_variance = None;
    let mut window_variance = None;
    let mut run = 0;
    // Scale windows span 2W + 1 second differences and the baseline needs at
    // least 2W before the window. Centre c reads y up to c + w + 1.
    let last = n.saturating_sub((2 * h + 1).max(w + 2));
    for c in (3 * w + 1)..last {
        for &v in &y[seen..=c + w + 1] {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        seen = c + w + 2;
        let base = mad(&d2[1..c - w]).max(1e-6 * (hi - lo));
        let win = mad(&d2[c - w..=c + w]);
        if win <= ratio * base {
            run = 0;
            continue;
        }
        if run == 0 {
            baseline_variance = Some(base * base);
            window_variance = Some(win * win);
        }
        run += 1;
        if run >= 2 * w {
            osc = Some(c + 1 - 2 * w);
            break;
        }
    }

    let m = osc.map_or(end, |o| end.min(o));
    let dom = &s[..=m];
    let total_gain = dom.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - s[0];
    let s_min = dom.iter().cloned().fold(f64::INFINITY, f64::min);
    let s_max = s[0] + total_gain;
    let range = s_max - s_min;
    if m < 2 || !(range > 0.0) || total_gain < cfg.min_gain * range || total_gain <= 0.0 {
        return Err(Error::AllFlat { gain: total_gain.max(0.0), threshold: cfg.min_gain * range });
    }

    let x0 = pts[0].0 as f64;
    let xspan = pts[m].0 as f64 - x0;
    let yn = |i: usize| (s[i] - s_min) / range;
    let (y0, ym) = (yn(0), yn(m));
    let mut best = (0usize, f64::NEG_INFINITY);
    for i in 0..=m {
        let xn = (pts[i].0 as f64 - x0) / xspan;
        let dist = yn(i) - (y0 + (ym - y0) * xn);
        if dist >= best.1 - 1e-12 {
            best = (i, dist.max(best.1));
        }
    }

    let smoothed_points = pts.iter().zip(&s).map(|(&(it, _), &v)| (it, sign * v)).collect();
    Ok(KneeReport {
        metric: trace.name.clone(),
        knee_iteration: pts[best.0].0,
        improve_end: pts[end].0,
        oscillation_start: osc.map(|o| pts[o].0),
        smoothed_trace: MetricTrace {
            name: format!("{}_smoothed", trace.name),
            orientation: trace.orientation,
            points: smoothed_points,
        },
        diagnostics: KneeDiagnostics {
            window: w,
            min_gain: cfg.min_gain,
            osc_ratio: cfg.osc_ratio,
            points_used: n,
            truncated_at_nan: trace.first_nan(),
            total_gain,
            baseline_variance,
            window_variance,
        },
    })
}

/// Anything that sits at a training iteration.
pub trait AtIteration {
    fn iteration(&self) -> u64;
}

impl AtIteration for u64 {
    fn iteration(&self) -> u64 {
        *self
    }
}

/// Median knee over `traces` (mean of the middle two for an even count).
pub fn median_knee(traces: &[MetricTrace], cfg: &KneeConfig) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::InsufficientData("no traces to select a checkpoint from".into()));
    }
    let mut knees = traces.iter().map(|t| detect_knee(t, cfg).map(|r| r.knee_iteration)).collect::<Result<Vec<_>>>()?;
    knees.sort_unstable();
    let k = knees.len();
    Ok(if k % 2 == 1 { knees[k / 2] as f64 } else { (knees[k / 2 - 1] as f64 + knees[k / 2] as f64) / 2.0 })
}

/// Latest checkpoint at or before the median knee.
pub fn select_finetune_checkpoint<'c, C: AtIteration>(
    traces: &[MetricTrace],
    checkpoints: &'c [C],
    cfg: &KneeConfig,
) -> Result<&'c C> {
    let knee = median_knee(traces, cfg)?;
    checkpoints
        .iter()
        .filter(|c| c.iteration() as f64 <= knee)
        .max_by_key(|c| c.iteration())
        .ok_or(Error::NoCheckpoint(knee))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StabilityLabel {
    Stable,
    Collapse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub label: StabilityLabel,
    /// Mean of the last `window` finite values, in the trace's own units.
    pub final_smoothed: Option<f64>,
    pub divergence_events: usize,
    pub first_divergence: Option<u64>,
    /// Standard deviation of residuals from the moving average.
    pub oscillation_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub run_a: RunSummary,
    pub run_b: RunSummary,
    /// `b − a` of the final smoothed value, in trace units.
    pub final_delta: Option<f64>,
    pub amplitude_delta: f64,
    /// Which run ends better, folding orientation; `None` on a tie or if either lacks a value.
    pub better: Option<String>,
}

fn summarize_run(trace: &MetricTrace, window: usize) -> RunSummary {
    let finite: Vec<f64> = trace.points.iter().map(|&(_, v)| v).filter(|v| v.is_finite()).collect();
    let divergence_events = trace.points.iter().filter(|(_, v)| v.is_nan()).count();
    let final_smoothed = (!finite.is_empty()).then(|| {
        let tail = &finite[finite.len().saturating_sub(window.max(1))..];
        tail.iter().sum::<f64>() / tail.len() as f64
    });
    let oscillation_amplitude = if finite.is_empty() {
        0.0
    } else {
        let s = smooth(&finite, window.max(1));
        let r: Vec<f64> = finite.iter().zip(&s).map(|(a, b)| a - b).collect();
        variance(&r).sqrt()
    };
    RunSummary {
        name: trace.name.clone(),
        label: if divergence_events > 0 { StabilityLabel::Collapse } else { StabilityLabel::Stable },
        final_smoothed,
        divergence_events,
        first_divergence: trace.first_nan(),
        oscillation_amplitude,
    }
}

pub fn compare_stability(run_a: &MetricTrace, run_b: &MetricTrace) -> StabilityReport {
    compare_stability_with(run_a, run_b, KneeConfig::default().window)
}

pub fn compare_stability_with(run_a: &MetricTrace, run_b: &MetricTrace, window: usize) -> StabilityReport {
    let a = summarize_run(run_a, window);
    let b = summarize_run(run_b, window);
    let final_delta = a.final_smoothed.zip(b.final_smoothed).map(|(x, y)| y - x);
    let better = final_delta.and_then(|d| {
        let folded = d * run_a.orientation.sign();
        if folded > 0.0 {
            Some(b.name.clone())
        } else if folded < 0.0 {
            Some(a.name.clone())
        } else {
            None
        }
    });
    let amplitude_delta = b.oscillation_amplitude - a.oscillation_amplitude;
    StabilityReport { run_a: a, run_b: b, final_delta, amplitude_delta, better }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn trace(values: &[f64]) -> MetricTrace {
        let pts = values.iter().enumerate().map(|(i, &v)| (i as u64 * 10, v)).collect();
        MetricTrace::new("psnr", Orientation::HigherBetter, pts).unwrap()
    }

    fn saturating(n: usize, noise_from: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::SeededRng::new(seed);
        (0..n)
            .map(|i| {
                let base = 1.0 - (-(i as f64) / 6.0).exp();
                if i >= noise_from {
                    base + 0.2 * (2.0 * rng.uniform() - 1.0)
                } else {
                    base
                }
            })
            .collect()
    }

    #[test]
    fn smoothing_keeps_lines_and_constants() {
        let line: Vec<f64> = (0..20).map(|i| 3.0 + 0.5 * i as f64).collect();
        for (a, b) in smooth(&line, 9).iter().zip(&line) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(smooth(&[2.5; 7], 5), vec![2.5; 7]);
    }

    #[test]
    fn too_short_and_flat() {
        assert!(matches!(detect_knee(&trace(&[1.0; 10]), &KneeConfig::default()), Err(Error::TooShort { needed: 27, got: 10 })));
        assert!(matches!(detect_knee(&trace(&[1.0; 40]), &KneeConfig::default()), Err(Error::AllFlat { .. })));
        let falling: Vec<f64> = (0..40).map(|i| -(i as f64)).collect();
        assert!(matches!(detect_knee(&trace(&falling), &KneeConfig::default()), Err(Error::AllFlat { .. })));
    }

    #[test]
    fn linear_trace_knee_is_last_point() {
        let v: Vec<f64> = (0..40).map(|i| 0.1 * i as f64).collect();
        let r = detect_knee(&trace(&v), &KneeConfig::default()).unwrap();
        assert_eq!(r.knee_iteration, 390);
        assert_eq!(r.oscillation_start, None);
    }

    #[test]
    fn saturating_curve_with_noise() {
        let r = detect_knee(&trace(&saturating(80, 30, 1)), &KneeConfig::default()).unwrap();
        let osc = r.oscillation_start.expect("noise detected") / 10;
        assert!(osc + 9 >= 30, "osc at {osc}");
        assert!(r.knee_iteration <= osc * 10);
        assert!(r.knee_iteration > 0);
    }

    #[test]
    fn nan_truncates() {
        let mut v = saturating(60, 1000, 0);
        v[50] = f64::NAN;
        let r = detect_knee(&trace(&v), &KneeConfig::default()).unwrap();
        assert_eq!(r.diagnostics.points_used, 50);
        assert_eq!(r.diagnostics.truncated_at_nan, Some(500));
        assert!(r.smoothed_trace.points().last().unwrap().0 < 500);
    }

    #[test]
    fn checkpoint_floor_and_median() {
        let ckpts: Vec<u64> = (0..=20).map(|i| i * 100).collect();
        let pick = |k: f64| ckpts.iter().filter(|&&c| c as f64 <= k).max().copied();
        assert_eq!(pick(730.0), Some(700));
        // Traces scaled so each knee lands on a chosen iteration.
        let knees_for = |scale: u64| {
            let v = saturating(60, 1000, 0);
            let pts = v.iter().enumerate().map(|(i, &x)| (i as u64 * scale, x)).collect();
            MetricTrace::new(format!("m{scale}"), Orientation::HigherBetter, pts).unwrap()
        };
        let traces = [knees_for(10), knees_for(20), knees_for(30)];
        let ks: Vec<u64> = traces.iter().map(|t| detect_knee(t, &KneeConfig::default()).unwrap().knee_iteration).collect();
        let mut sorted = ks.clone();
        sorted.sort();
        let chosen = select_finetune_checkpoint(&traces, &ckpts, &KneeConfig::default()).unwrap();
        assert_eq!(*chosen, sorted[1] / 100 * 100);
        let late: Vec<u64> = vec![100_000];
        assert!(matches!(select_finetune_checkpoint(&traces, &late, &KneeConfig::default()), Err(Error::NoCheckpoint(_))));
    }

    #[test]
    fn stability_labels() {
        let a = trace(&saturating(40, 20, 3));
        let same = compare_stability(&a, &a);
        assert_eq!(same.final_delta, Some(0.0));
        assert_eq!(same.amplitude_delta, 0.0);
        assert_eq!(same.better, None);
        let mut v = saturating(40, 20, 3);
        v[35] = f64::NAN;
        let b = trace(&v);
        let r = compare_stability(&a, &b);
        assert_eq!(r.run_a.label, StabilityLabel::Stable);
        assert_eq!(r.run_b.label, StabilityLabel::Collapse);
        assert_eq!(r.run_b.first_divergence, Some(350));
    }

    #[test]
    fn csv_roundtrip() {
        let a = MetricTrace::new("train_loss", Orientation::LowerBetter, vec![(1, 0.5), (2, f64::NAN)]).unwrap();
        let b = MetricTrace::new("psnr", Orientation::HigherBetter, vec![(1, 20.0)]).unwrap();
        let mut buf = Vec::new();
        write_traces_csv(&mut buf, &[a.clone(), b.clone()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(TRACE_CSV_HEADER));
        let back = read_traces_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0], b);
        assert_eq!(back[1].name, "train_loss");
        assert_eq!(back[1].orientation, Orientation::LowerBetter);
        assert!(back[1].points()[1].1.is_nan());
        assert!(read_traces_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn rejects_bad_traces() {
        assert!(MetricTrace::new("x", Orientation::HigherBetter, vec![(2, 1.0), (2, 1.0)]).is_err());
        assert!(MetricTrace::new("x", Orientation::HigherBetter, vec![(1, f64::INFINITY)]).is_err());
    }

    fn noisy_trace() -> impl Strategy<Value = Vec<f64>> {
        (30usize..90, 0u64..1000, 5usize..60).prop_map(|(n, seed, onset)| saturating(n, onset.min(n), seed))
    }

    proptest! {
        #[test]
        fn affine_invariance(v in noisy_trace(), a in 0.1f64..10.0, b in -10.0f64..10.0) {
            let base = detect_knee(&trace(&v), &KneeConfig::default());
            let scaled: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let other = detect_knee(&trace(&scaled), &KneeConfig::default());
            match (base, other) {
                (Ok(r1), Ok(r2)) => prop_assert_eq!(r1.knee_iteration, r2.knee_iteration),
                (Err(_), Err(_)) => {}
                (x, y) => prop_assert!(false, "{:?} vs {:?}", x.map(|r| r.knee_iteration), y.map(|r| r.knee_iteration)),
            }
        }

        #[test]
        fn orientation_folding(v in noisy_trace()) {
            let hb = detect_knee(&trace(&v), &KneeConfig::default());
            let neg: Vec<(u64, f64)> = v.iter().enumerate().map(|(i, &x)| (i as u64 * 10, -x)).collect();
            let lb = detect_knee(&MetricTrace::new("psnr", Orientation::LowerBetter, neg).unwrap(), &KneeConfig::default());
            match (hb, lb) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(a.knee_iteration, b.knee_iteration);
                    prop_assert_eq!(a.improve_end, b.improve_end);
                    prop_assert_eq!(a.oscillation_start, b.oscillation_start);
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false),
            }
        }

        #[test]
        fn deterministic(v in noisy_trace()) {
            let a = detect_knee(&trace(&v), &KneeConfig::default()).ok();
            let b = detect_knee(&trace(&v), &KneeConfig::default()).ok();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn monotone_refinement(v in noisy_trace(), extra in prop::collection::vec(-5.0f64..5.0, 1..40)) {
            if let Ok(r) = detect_knee(&trace(&v), &KneeConfig::default()) {
                if r.oscillation_start.is_some() {
                    let mut longer = v.clone();
                    longer.extend(extra);
                    let r2 = detect_knee(&trace(&longer), &KneeConfig::default()).unwrap();
                    prop_assert_eq!(r.knee_iteration, r2.knee_iteration);
                    prop_assert_eq!(r.oscillation_start, r2.oscillation_start);
                }
            }
        }

        #[test]
        fn knee_before_oscillation(v in noisy_trace()) {
            if let Ok(r) = detect_knee(&trace(&v), &KneeConfig::default()) {
                if let Some(o) = r.oscillation_start {
                    prop_assert!(r.knee_iteration <= o);
                }
                prop_assert!(r.knee_iteration <= r.improve_end);
            }
        }
    }
}
