//! Wall-clock scaling of attention forward passes and log-log exponent fits.
//!
//! Inputs are f32 (accumulation inside the kernels is f64). Before any timing
//! at a given `N`, the linear and naive outputs are compared on the same input;
//! the sweep aborts if `max|lin − naive| / max|naive|` exceeds the gate.

use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{linear_attention_forward, naive_attention_forward_with_budget, AttentionConfig, DEFAULT_EPSILON, DEFAULT_NAIVE_BUDGET};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const GATE_TOLERANCE: f64 = 1e-6;
pub const BENCH_CSV_HEADER: &str = "impl,n,d,heads,rep,seconds";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Impl {
    Linear,
    Naive,
    /// Touches the inputs and returns; measures harness overhead.
    Noop,
}

impl Impl {
    pub fn name(self) -> &'static str {
        match self {
            Impl::Linear => "linear",
            Impl::Naive => "naive",
            Impl::Noop => "noop",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub head_dim: usize,
    pub heads: usize,
    pub reps: usize,
    pub warmup: usize,
    pub naive_budget_bytes: usize,
    /// Set from the run-level seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_list: vec![256, 512, 1024, 2048, 4096, 8192],
            head_dim: 32,
            heads: 4,
            reps: 5,
            warmup: 1,
            naive_budget_bytes: DEFAULT_NAIVE_BUDGET,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_list.len() < 4 || self.n_list.windows(2).any(|w| w[1] <= w[0]) || self.n_list[0] == 0 {
            return Err(Error::Config("n_list needs at least 4 strictly ascending positive sizes".into()));
        }
        if self.reps < 5 || self.warmup < 1 {
            return Err(Error::Config(format!("need reps ≥ 5 and warmup ≥ 1, got {} and {}", self.reps, self.warmup)));
        }
        AttentionConfig::new(self.heads, self.head_dim, DEFAULT_EPSILON).map(|_| ())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum PointStatus {
    Ok,
    OutOfMemory(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchPoint {
    #[serde(rename = "impl")]
    pub implementation: Impl,
    pub n_tokens: usize,
    pub d: usize,
    pub heads: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub samples: Vec<f64>,
    pub status: PointStatus,
}

impl BenchPoint {
    pub fn ok(&self) -> bool {
        self.status == PointStatus::Ok
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub exponent: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points_used: usize,
}

type Inputs = (Tensor<f32>, Tensor<f32>, Tensor<f32>);

fn inputs(n: usize, width: usize, seed: u64) -> Inputs {
    let mut rng = SeededRng::with_stream(seed, n as u64);
    let mut draw = || Tensor::from_fn(&[n, width], |_| rng.normal() as f32).expect("positive shape");
    (draw(), draw(), draw())
}

/// Relative max deviation between the two kernels on one input.
pub fn gate_deviation(q: &Tensor<f32>, k: &Tensor<f32>, v: &Tensor<f32>, cfg: &AttentionConfig, budget: usize) -> Result<f64> {
    let lin = linear_attention_forward(q, k, v, cfg)?;
    let naive = naive_attention_forward_with_budget(q, k, v, cfg, budget)?;
    let scale = naive.data().iter().fold(0.0f64, |m, x| m.max(x.abs() as f64));
    let dev = lin.data().iter().zip(naive.data()).fold(0.0f64, |m, (a, b)| m.max((*a as f64 - *b as f64).abs()));
    Ok(if scale > 0.0 { dev / scale } else { dev })
}

fn run_once(imp: Impl, x: &Inputs, cfg: &AttentionConfig, budget: usize) -> Result<()> {
    match imp {
        Impl::Linear => {
            black_box(linear_attention_forward(&x.0, &x.1, &x.2, cfg)?);
        }
        Impl::Naive => {
            black_box(naive_attention_forward_with_budget(&x.0, &x.1, &x.2, cfg, budget)?);
        }
        Impl::Noop => {
            black_box((&x.0, &x.1, &x.2));
        }
    }
    Ok(())
}

/// Times `imp` at every `N`. Out-of-memory points are recorded and skipped.
pub fn run_sweep(imp: Impl, cfg: &BenchConfig) -> Result<Vec<BenchPoint>> {
    sweep(imp, cfg, imp != Impl::Noop)
}

fn sweep(imp: Impl, cfg: &BenchConfig, gate: bool) -> Result<Vec<BenchPoint>> {
    cfg.validate()?;
    let acfg = AttentionConfig::new(cfg.heads, cfg.head_dim, DEFAULT_EPSILON)?;
    let mut points = Vec::with_capacity(cfg.n_list.len());
    for &n in &cfg.n_list {
        let x = inputs(n, acfg.model_dim(), cfg.seed);
        let point = |status, samples: Vec<f64>| {
            let (mean, std) = mean_std(&samples);
            BenchPoint { implementation: imp, n_tokens: n, d: cfg.head_dim, heads: cfg.heads, mean_seconds: mean, std_seconds: std, samples, status }
        };
        if gate {
            match gate_deviation(&x.0, &x.1, &x.2, &acfg, cfg.naive_budget_bytes) {
                Ok(dev) if dev < GATE_TOLERANCE => {}
                Ok(dev) => {
                    return Err(Error::Domain(format!("linear and naive outputs differ by {dev:e} (relative) at N={n}")))
                }
                Err(Error::OutOfMemory(msg)) if imp == Impl::Naive => {
                    points.push(point(PointStatus::OutOfMemory(msg), Vec::new()));
                    continue;
                }
                // The linear kernel can still be timed when only the reference is too large.
                Err(Error::OutOfMemory(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let mut samples = Vec::with_capacity(cfg.reps);
        let mut status = PointStatus::Ok;
        for r in 0..cfg.warmup + cfg.reps {
            let start = Instant::now();
            if let Err(e) = run_once(imp, &x, &acfg, cfg.naive_budget_bytes) {
                match e {
                    Error::OutOfMemory(msg) => {
                        status = PointStatus::OutOfMemory(msg);
                        break;
                    }
                    e => return Err(e),
                }
            }
            let dt = start.elapsed().as_secs_f64();
            if r >= cfg.warmup {
                samples.push(dt);
            }
        }
        if status != PointStatus::Ok {
            samples.clear();
        }
        points.push(point(status, samples));
    }
    Ok(points)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Least squares of `ln t` on `ln N` over successful points.
pub fn fit_scaling(points: &[BenchPoint]) -> Result<ScalingFit> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.ok() && p.mean_seconds > 0.0 && p.mean_seconds.is_finite())
        .map(|p| ((p.n_tokens as f64).ln(), p.mean_seconds.ln()))
        .collect();
    fit_log_log(&pts)
}

/// Least squares on already-logged `(ln N, ln t)` pairs.
pub fn fit_log_log(pts: &[(f64, f64)]) -> Result<ScalingFit> {
    let mut xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 4 {
        return Err(Error::InsufficientData(format!("need 4 distinct sizes, have {}", xs.len())));
    }
    if xs[xs.len() - 1] - xs[0] < 8f64.ln() - 1e-12 {
        return Err(Error::InsufficientData("sizes must span at least 8×".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let r_squared = if syy > 0.0 { (sxy * sxy) / (sxx * syy) } else { 1.0 };
    Ok(ScalingFit { exponent, intercept, r_squared, points_used: pts.len() })
}

pub fn write_csv<W: std::io::Write>(out: W, points: &[BenchPoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(BENCH_CSV_HEADER.split(',')).map_err(fmt)?;
    for p in points {
        for (rep, s) in p.samples.iter().enumerate() {
            w.write_record([p.implementation.name().to_string(), p.n_tokens.to_string(), p.d.to_string(), p.heads.to_string(), rep.to_string(), s.to_string()])
                .map_err(fmt)?;
        }
    }
    w.flush().map_err(|e| Error::Format(e.to_string()))
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchSummary {
    pub config: BenchConfig,
    pub points: Vec<BenchPoint>,
    pub linear_fit: Option<ScalingFit>,
    pub naive_fit: Option<ScalingFit>,
    /// Mean no-op time over all sizes.
    pub baseline_seconds: f64,
}

/// Runs all three implementations and fits exponents where enough points
/// succeeded. Inputs are the same across implementations, so each size is
/// gated once, during the linear sweep.
pub fn run_all(cfg: &BenchConfig) -> Result<BenchSummary> {
    let noop = sweep(Impl::Noop, cfg, false)?;
    let linear = sweep(Impl::Linear, cfg, true)?;
    let naive = sweep(Impl::Naive, cfg, false)?;
    summarize(cfg, noop, linear, naive)
}

/// As [`run_all`] with the three sweeps on separate threads. Each timed call
/// stays on one thread, but the sweeps compete for cores, so timings are
/// noisier than the sequential mode.
pub fn run_all_parallel(cfg: &BenchConfig) -> Result<BenchSummary> {
    let (noop, linear, naive) = std::thread::scope(|s| {
        let noop = s.spawn(|| sweep(Impl::Noop, cfg, false));
        let linear = s.spawn(|| sweep(Impl::Linear, cfg, true));
        let naive = s.spawn(|| sweep(Impl::Naive, cfg, false));
        let join = |h: std::thread::ScopedJoinHandle<'_, Result<Vec<BenchPoint>>>| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p));
        (join(noop), join(linear), join(naive))
    });
    summarize(cfg, noop?, linear?, naive?)
}

fn summarize(cfg: &BenchConfig, noop: Vec<BenchPoint>, linear: Vec<BenchPoint>, naive: Vec<BenchPoint>) -> Result<BenchSummary> {
    let baseline_seconds = mean_std(&noop.iter().map(|p| p.mean_seconds).collect::<Vec<_>>()).0;
    let linear_fit = fit_scaling(&linear).ok();
    let naive_fit = fit_scaling(&naive).ok();
    let mut points = noop;
    points.extend(linear);
    points.extend(naive);
    Ok(BenchSummary { config: cfg.clone(), points, linear_fit, naive_fit, baseline_seconds })
}
