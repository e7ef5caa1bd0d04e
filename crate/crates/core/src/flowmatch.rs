//! Conditional flow matching: training objective, Euler sampler, trainer and
//! toy datasets.
//!
//! Time runs from noise to data: `z_t = (1 − t)·z0 + t·z1` with
//! `z0 ~ N(0, I)`, and the regression target is `z1 − z0`. Sampling integrates
//! `dz/dt = v(z, t)` from `t = 0` to `t = 1`. Expert routing works on the
//! opposite axis, see [`crate::snrmoe::routing_time_from_flow`].

use serde::{Deserialize, Serialize};

use crate::blocks::{Conditioning, Dit, DitParams};
use crate::error::{shape_err, Error, Result};
use crate::esgf::{MetricTrace, Orientation};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{normal_tensor, RngState, SeededRng};
use crate::snrmoe::ExpertPartition;
use crate::tensor::Tensor;

/// A velocity field `v(z, t, c)`.
pub trait VelocityField {
    fn velocity(&self, z: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64, &Conditioning) -> Result<Tensor>,
{
    fn velocity(&self, z: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor> {
        self(z, t, cond)
    }
}

/// A model with an optional routing table. Without one, expert 0 is used.
#[derive(Clone, Copy, Debug)]
pub struct RoutedModel<'a> {
    pub model: &'a Dit,
    pub partition: Option<&'a ExpertPartition>,
}

impl<'a> RoutedModel<'a> {
    pub fn new(model: &'a Dit, partition: Option<&'a ExpertPartition>) -> Result<Self> {
        if let Some(p) = partition {
            if p.num_experts() != model.num_experts() {
                return Err(Error::Config(format!(
                    "partition has {} experts, model has {}",
                    p.num_experts(),
                    model.num_experts()
                )));
            }
        }
        Ok(RoutedModel { model, partition })
    }

    pub fn expert_for(&self, t_flow: f64) -> Result<usize> {
        match self.partition {
            Some(p) => Ok(p.route_flow_time(t_flow)?.expert_index),
            None => Ok(0),
        }
    }
}

impl VelocityField for RoutedModel<'_> {
    fn velocity(&self, z: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor> {
        self.model.forward(z, t, cond, self.expert_for(t)?)
    }
}

impl VelocityField for Dit {
    fn velocity(&self, z: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor> {
        self.forward(z, t, cond, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub z0: Tensor,
    pub z1: Tensor,
    pub t: f64,
    pub z_t: Tensor,
    pub target: Tensor,
}

impl FlowSample {
    pub fn new(z0: Tensor, z1: Tensor, t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("interpolation time {t} outside [0, 1]")));
        }
        if z0.shape() != z1.shape() {
            return Err(shape_err!("z0 {:?} vs z1 {:?}", z0.shape(), z1.shape()));
        }
        let z_t = Tensor::new(
            z0.shape().to_vec(),
            z0.data().iter().zip(z1.data()).map(|(a, b)| (1.0 - t) * a + t * b).collect(),
        )?;
        let target = z1.sub(&z0)?;
        Ok(FlowSample { z0, z1, t, z_t, target })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    Uniform,
    /// Every sample uses this `t`; for controlled experiments.
    Fixed(f64),
}

impl TimeSampling {
    pub fn draw(&self, rng: &mut SeededRng) -> f64 {
        match *self {
            TimeSampling::Uniform => rng.uniform(),
            TimeSampling::Fixed(t) => t,
        }
    }
}

/// One training pair: data latent and its conditioning.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub z1: Tensor,
    pub cond: Conditioning,
}

impl Example {
    pub fn unconditional(z1: Tensor) -> Self {
        Example { z1, cond: Conditioning::default() }
    }
}

pub fn draw_flow_sample(z1: &Tensor, times: &TimeSampling, rng: &mut SeededRng) -> Result<FlowSample> {
    let t = times.draw(rng);
    let z0 = normal_tensor(z1.shape(), 1.0, rng);
    FlowSample::new(z0, z1.clone(), t)
}

fn squared_error(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(shape_err!("prediction {:?} vs target {:?}", pred.shape(), target.shape()));
    }
    Ok(pred.data().iter().zip(target.data()).map(|(p, q)| (p - q) * (p - q)).sum())
}

/// Mean over samples of `‖target − v(z_t, t, c)‖²`.
pub fn cfm_loss_on_samples<V: VelocityField + ?Sized>(
    model: &V,
    samples: &[(FlowSample, Conditioning)],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let mut total = 0.0;
    for (s, c) in samples {
        total += squared_error(&model.velocity(&s.z_t, s.t, c)?, &s.target)?;
    }
    let loss = total / samples.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("flow-matching loss is {loss}")));
    }
    Ok(loss)
}

/// CFM loss with `t ~ U[0, 1]` and fresh prior draws.
pub fn cfm_loss<V: VelocityField + ?Sized>(model: &V, batch: &[Example], rng: &mut SeededRng) -> Result<f64> {
    let samples = batch
        .iter()
        .map(|e| Ok((draw_flow_sample(&e.z1, &TimeSampling::Uniform, rng)?, e.cond.clone())))
        .collect::<Result<Vec<_>>>()?;
    cfm_loss_on_samples(model, &samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub num_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { num_steps: 20 }
    }
}

/// Forward Euler on the uniform grid `t_k = k / steps`.
pub fn euler_sample<V: VelocityField + ?Sized>(
    model: &V,
    z_init: &Tensor,
    cond: &Conditioning,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    if cfg.num_steps == 0 {
        return Err(Error::Config("sampler needs at least one step".into()));
    }
    let dt = 1.0 / cfg.num_steps as f64;
    let mut z = z_init.clone();
    for k in 0..cfg.num_steps {
        let v = model.velocity(&z, k as f64 * dt, cond)?;
        if v.shape() != z.shape() {
            return Err(shape_err!("velocity {:?} vs state {:?}", v.shape(), z.shape()));
        }
        for (a, b) in z.data_mut().iter_mut().zip(v.data()) {
            *a += dt * b;
        }
        z.ensure_finite("sampler state")?;
    }
    Ok(z)
}

// --- datasets ---------------------------------------------------------------------------

pub trait Dataset {
    fn name(&self) -> &str;
    fn latent_shape(&self) -> [usize; 3];
    fn draw(&self, rng: &mut SeededRng) -> Example;
    /// Held-out examples, fixed at construction.
    fn validation(&self) -> &[Example];
    /// Maps a latent to image space for PSNR, for image datasets.
    fn decode(&self, _z: &Tensor) -> Option<Tensor> {
        None
    }
}

/// Mixture of two isotropic Gaussians in the plane, stored as `[2, 1, 1]` latents.
#[derive(Clone, Debug)]
pub struct TwoGaussians {
    pub centers: [[f64; 2]; 2],
    pub std: f64,
    validation: Vec<Example>,
}

impl TwoGaussians {
    pub fn new(num_validation: usize, seed: u64) -> Self {
        let mut d = TwoGaussians { centers: [[-2.0, 0.0], [2.0, 0.0]], std: 0.5, validation: Vec::new() };
        let mut rng = SeededRng::with_stream(seed, 7);
        d.validation = (0..num_validation).map(|_| d.draw(&mut rng)).collect();
        d
    }

    pub fn draw_point(&self, rng: &mut SeededRng) -> [f64; 2] {
        let c = self.centers[rng.below(2)];
        [c[0] + self.std * rng.normal(), c[1] + self.std * rng.normal()]
    }
}

impl Dataset for TwoGaussians {
    fn name(&self) -> &str {
        "two-gaussians"
    }

    fn latent_shape(&self) -> [usize; 3] {
        [2, 1, 1]
    }

    fn draw(&self, rng: &mut SeededRng) -> Example {
        let p = self.draw_point(rng);
        Example::unconditional(Tensor::new(vec![2, 1, 1], p.to_vec()).expect("fixed shape"))
    }

    fn validation(&self) -> &[Example] {
        &self.validation
    }
}

/// `[C, H, W] → [C·r², H/r, W/r]`; output channel `c·r² + dy·r + dx`.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let &[c, h, w] = x.shape() else { return Err(shape_err!("pixel_unshuffle needs [C,H,W], got {:?}", x.shape())) };
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(shape_err!("factor {r} does not divide {h}×{w}"));
    }
    let (ho, wo) = (h / r, w / r);
    let src = x.data();
    Tensor::from_fn(&[c * r * r, ho, wo], |i| {
        let (oc, rem) = (i / (ho * wo), i % (ho * wo));
        let (oy, ox) = (rem / wo, rem % wo);
        let (ch, sub) = (oc / (r * r), oc % (r * r));
        let (dy, dx) = (sub / r, sub % r);
        src[(ch * h + oy * r + dy) * w + ox * r + dx]
    })
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let &[cr, ho, wo] = x.shape() else { return Err(shape_err!("pixel_shuffle needs [C,H,W], got {:?}", x.shape())) };
    if r == 0 || cr % (r * r) != 0 {
        return Err(shape_err!("{cr} channels not divisible by {r}²"));
    }
    let (c, h, w) = (cr / (r * r), ho * r, wo * r);
    let src = x.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, rem) = (i / (h * w), i % (h * w));
        let (y, xx) = (rem / w, rem % w);
        let oc = ch * r * r + (y % r) * r + xx % r;
        src[(oc * ho + y / r) * wo + xx / r]
    })
}

/// Box downsample by `factor`, then add `N(0, sigma_n²)` noise.
pub fn toy_degrade(hr: &Tensor, factor: usize, sigma_n: f64, rng: &mut SeededRng) -> Result<Tensor> {
    let &[c, h, w] = hr.shape() else { return Err(shape_err!("toy_degrade needs [C,H,W], got {:?}", hr.shape())) };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(shape_err!("factor {factor} does not divide {h}×{w}"));
    }
    if !(sigma_n >= 0.0) {
        return Err(Error::Domain(format!("noise level {sigma_n}")));
    }
    let (ho, wo) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let src = hr.data();
    let mut out = Tensor::from_fn(&[c, ho, wo], |i| {
        let (ch, rem) = (i / (ho * wo), i % (ho * wo));
        let (oy, ox) = (rem / wo, rem % wo);
        let mut s = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                s += src[(ch * h + oy * factor + dy) * w + ox * factor + dx];
            }
        }
        s / norm
    })?;
    if sigma_n > 0.0 {
        for v in out.data_mut() {
            *v += sigma_n * rng.normal();
        }
    }
    Ok(out)
}

/// `10·log10(peak² / MSE)`; infinite for identical inputs.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let mse = squared_error(a, b)? / a.numel() as f64;
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Smooth random grayscale images (sums of Gaussian blobs in `[0, 1]`),
/// super-resolved from a box-downsampled, noisy copy. Latents are the HR image
/// mapped to `[−1, 1]` and pixel-unshuffled.
#[derive(Clone, Debug)]
pub struct ToySr {
    pub hr_size: usize,
    pub unshuffle: usize,
    pub degrade_factor: usize,
    pub noise_sigma: f64,
    validation: Vec<Example>,
}

impl ToySr {
    pub fn new(hr_size: usize, unshuffle: usize, degrade_factor: usize, noise_sigma: f64, num_validation: usize, seed: u64) -> Result<Self> {
        if hr_size == 0 || unshuffle == 0 || degrade_factor == 0 || !hr_size.is_multiple_of(unshuffle) || !hr_size.is_multiple_of(degrade_factor) {
            return Err(Error::Config(format!(
                "HR size {hr_size} must be divisible by unshuffle {unshuffle} and degrade factor {degrade_factor}"
            )));
        }
        let mut d = ToySr { hr_size, unshuffle, degrade_factor, noise_sigma, validation: Vec::new() };
        let mut rng = SeededRng::with_stream(seed, 7);
        d.validation = (0..num_validation).map(|_| d.draw(&mut rng)).collect();
        Ok(d)
    }

    /// 16×16 HR, 4× unshuffle (16×4×4 latent), 8×8 LR input.
    pub fn default_toy(seed: u64) -> Self {
        Self::new(16, 4, 2, 0.02, 8, seed).expect("valid defaults")
    }

    pub fn random_image(&self, rng: &mut SeededRng) -> Tensor {
        let n = self.hr_size;
        let blobs: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                let s = n as f64;
                [rng.uniform() * s, rng.uniform() * s, 0.1 * s + 0.2 * s * rng.uniform(), 0.3 + 0.7 * rng.uniform()]
            })
            .collect();
        Tensor::from_fn(&[1, n, n], |i| {
            let (y, x) = ((i / n) as f64 + 0.5, (i % n) as f64 + 0.5);
            let v: f64 = blobs
                .iter()
                .map(|[cy, cx, r, a]| a * (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp())
                .sum();
            v.clamp(0.0, 1.0)
        })
        .expect("fixed shape")
    }

    pub fn encode(&self, hr: &Tensor) -> Result<Tensor> {
        pixel_unshuffle(&hr.map(|v| 2.0 * v - 1.0), self.unshuffle)
    }

    pub fn lr_size(&self) -> usize {
        self.hr_size / self.degrade_factor
    }
}

impl Dataset for ToySr {
    fn name(&self) -> &str {
        "toy-sr"
    }

    fn latent_shape(&self) -> [usize; 3] {
        let g = self.hr_size / self.unshuffle;
        [self.unshuffle * self.unshuffle, g, g]
    }

    fn draw(&self, rng: &mut SeededRng) -> Example {
        let hr = self.random_image(rng);
        let x_lr = toy_degrade(&hr, self.degrade_factor, self.noise_sigma, rng).expect("validated factor");
        Example { z1: self.encode(&hr).expect("validated factor"), cond: Conditioning { vector: None, x_lr: Some(x_lr) } }
    }

    fn validation(&self) -> &[Example] {
        &self.validation
    }

    fn decode(&self, z: &Tensor) -> Option<Tensor> {
        pixel_shuffle(z, self.unshuffle).ok().map(|x| x.map(|v| (0.5 * (v + 1.0)).clamp(0.0, 1.0)))
    }
}

/// Energy distance `2E‖X−Y‖ − E‖X−X'‖ − E‖Y−Y'‖` with unbiased within-sample terms.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData("energy distance needs at least two points per sample".into()));
    }
    let dist = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
    let within = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                t += dist(&s[i], &s[j]);
            }
        }
        2.0 * t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += dist(x, y);
        }
    }
    Ok(2.0 * cross / (a.len() * b.len()) as f64 - within(a) - within(b))
}

// --- training ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub eval_interval: u64,
    /// Set from the run-level seed; not read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub time_sampling: TimeSampling,
    pub sampler: SamplerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1500,
            batch_size: 128,
            eval_interval: 50,
            seed: 0,
            optimizer: AdamConfig::default(),
            time_sampling: TimeSampling::Uniform,
            sampler: SamplerConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.eval_interval == 0 || self.sampler.num_steps == 0 {
            return Err(Error::Config("batch_size, eval_interval and sampler steps must be positive".into()));
        }
        if let TimeSampling::Fixed(t) = self.time_sampling {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("fixed time {t} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// What the trainer reports at each evaluation.
pub struct EvalEvent<'a> {
    pub iteration: u64,
    pub model: &'a Dit,
    pub metrics: &'a [(String, f64)],
    pub rng: RngState,
}

/// Receives metric rows and evaluation snapshots. One writer per sink.
pub trait TrainSink {
    fn record(&mut self, iteration: u64, metric: &str, value: f64) -> Result<()>;

    /// Called after each evaluation's metrics are recorded; returns an id for
    /// the checkpoint written, if any.
    fn checkpoint(&mut self, _event: &EvalEvent<'_>) -> Result<Option<u64>> {
        Ok(None)
    }
}

/// Sink that only keeps rows in memory.
#[derive(Default)]
pub struct NullSink;

impl TrainSink for NullSink {
    fn record(&mut self, _: u64, _: &str, _: f64) -> Result<()> {
        Ok(())
    }
}

/// Streams rows as `iteration,metric_name,value`, flushing after each one so a
/// halted run leaves a complete file.
pub struct CsvTraceSink<W: std::io::Write> {
    out: W,
}

impl<W: std::io::Write> CsvTraceSink<W> {
    pub fn new(mut out: W) -> Result<Self> {
        writeln!(out, "{}", crate::esgf::TRACE_CSV_HEADER).map_err(|e| Error::Format(e.to_string()))?;
        Ok(CsvTraceSink { out })
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: std::io::Write> TrainSink for CsvTraceSink<W> {
    fn record(&mut self, iteration: u64, metric: &str, value: f64) -> Result<()> {
        writeln!(self.out, "{iteration},{metric},{value}")
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::Format(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub iteration: u64,
    pub detail: String,
    /// Iteration of the last checkpoint the sink reported before divergence.
    pub last_good_checkpoint: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub traces: Vec<MetricTrace>,
    pub iterations_completed: u64,
    /// Set when a non-finite loss halted the run; traces end with NaN markers.
    pub divergence: Option<Divergence>,
    pub optimizer: Adam,
}

/// Fixed `(z0, t)` draws for each validation example, so the validation loss
/// is a deterministic function of the parameters.
fn validation_plan(data: &dyn Dataset, seed: u64) -> Result<Vec<(FlowSample, Conditioning)>> {
    let mut rng = SeededRng::with_stream(seed, 2);
    data.validation()
        .iter()
        .map(|e| Ok((draw_flow_sample(&e.z1, &TimeSampling::Uniform, &mut rng)?, e.cond.clone())))
        .collect()
}

fn evaluate(
    model: &RoutedModel<'_>,
    data: &dyn Dataset,
    plan: &[(FlowSample, Conditioning)],
    sampler: &SamplerConfig,
) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::new();
    if plan.is_empty() {
        return Ok(out);
    }
    out.push(("val_loss".to_string(), cfm_loss_on_samples(model, plan)?));
    if data.decode(&plan[0].0.z1).is_some() {
        let mut total = 0.0;
        for (s, c) in plan {
            let z = euler_sample(model, &s.z0, c, sampler)?;
            let (img, truth) = (data.decode(&z).expect("image dataset"), data.decode(&s.z1).expect("image dataset"));
            total += psnr(&img, &truth, 1.0)?.min(100.0);
        }
        out.push(("val_psnr".to_string(), total / plan.len() as f64));
    }
    Ok(out)
}

/// Whether a parameter belongs to the shared trunk or to one of `active` experts.
pub fn expert_mask(active: &[bool]) -> impl Fn(&str) -> bool + '_ {
    move |name: &str| match name.strip_prefix("experts.") {
        Some(rest) => {
            let k: usize = rest.split('.').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
            active.get(k).copied().unwrap_or(false)
        }
        None => true,
    }
}

/// One optimizer step on a batch. Returns the batch loss and which experts
/// received gradient.
pub fn train_step(
    model: &mut Dit,
    opt: &mut Adam,
    batch: &[Example],
    partition: Option<&ExpertPartition>,
    times: &TimeSampling,
    rng: &mut SeededRng,
) -> Result<(f64, Vec<bool>)> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty batch".into()));
    }
    let routed = RoutedModel::new(model, partition)?;
    let mut grads: DitParams = model.zero_grads();
    let mut active = vec![false; model.num_experts()];
    let mut total = 0.0;
    let scale = 2.0 / batch.len() as f64;
    for ex in batch {
        let s = draw_flow_sample(&ex.z1, times, rng)?;
        let expert = routed.expert_for(s.t)?;
        active[expert] = true;
        let (pred, cache) = model.forward_cached(&s.z_t, s.t, &ex.cond, expert)?;
        let diff = pred.sub(&s.target)?;
        total += diff.data().iter().map(|d| d * d).sum::<f64>();
        model.backward(&cache, &diff.scale(scale), &mut grads)?;
    }
    let loss = total / batch.len() as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss is {loss}")));
    }
    opt.step(&mut model.params, &grads, expert_mask(&active));
    Ok((loss, active))
}

fn mark_divergence(
    it: u64,
    detail: String,
    traces: &mut [MetricTrace],
    sink: &mut dyn TrainSink,
    last_good_checkpoint: Option<u64>,
) -> Result<Divergence> {
    for t in traces.iter_mut() {
        t.push(it, f64::NAN)?;
        sink.record(it, &t.name, f64::NAN)?;
    }
    Ok(Divergence { iteration: it, detail, last_good_checkpoint })
}

/// Minibatch CFM training with evaluation every `eval_interval` iterations.
///
/// Metrics recorded at each evaluation: `train_loss` (mean batch loss since
/// the previous evaluation), `val_loss`, and `val_psnr` for image datasets.
/// A non-finite loss stops the run without applying that step; NaN markers
/// are written for every metric and the outcome carries a [`Divergence`].
pub fn train_loop(
    model: &mut Dit,
    data: &dyn Dataset,
    cfg: &TrainConfig,
    partition: Option<&ExpertPartition>,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    RoutedModel::new(model, partition)?;
    let mut rng = SeededRng::with_stream(cfg.seed, 1);
    let mut opt = Adam::new(&model.params, cfg.optimizer);
    let plan = validation_plan(data, cfg.seed)?;
    let mut names = vec!["train_loss".to_string()];
    if !plan.is_empty() {
        names.push("val_loss".to_string());
        if data.decode(&plan[0].0.z1).is_some() {
            names.push("val_psnr".to_string());
        }
    }
    let mut traces: Vec<MetricTrace> = names.iter().map(|n| MetricTrace::empty(n.clone(), Orientation::infer(n))).collect();
    let mut last_ckpt = None;
    let (mut loss_acc, mut loss_count) = (0.0, 0u64);

    for it in 1..=cfg.iterations {
        let batch: Vec<Example> = (0..cfg.batch_size).map(|_| data.draw(&mut rng)).collect();
        match train_step(model, &mut opt, &batch, partition, &cfg.time_sampling, &mut rng) {
            Ok((loss, _)) => {
                loss_acc += loss;
                loss_count += 1;
            }
            Err(Error::NonFinite(detail)) => {
                let d = mark_divergence(it, detail, &mut traces, sink, last_ckpt)?;
                return Ok(TrainOutcome { traces, iterations_completed: it - 1, divergence: Some(d), optimizer: opt });
            }
            Err(e) => return Err(e),
        }
        if it % cfg.eval_interval == 0 {
            let routed = RoutedModel::new(model, partition)?;
            let mut metrics = vec![("train_loss".to_string(), loss_acc / loss_count as f64)];
            match evaluate(&routed, data, &plan, &cfg.sampler) {
                Ok(m) => metrics.extend(m),
                Err(Error::NonFinite(detail)) => {
                    let d = mark_divergence(it, detail, &mut traces, sink, last_ckpt)?;
                    return Ok(TrainOutcome { traces, iterations_completed: it, divergence: Some(d), optimizer: opt });
                }
                Err(e) => return Err(e),
            }
            for ((name, v), trace) in metrics.iter().zip(traces.iter_mut()) {
                trace.push(it, *v)?;
                sink.record(it, name, *v)?;
            }
            let event = EvalEvent { iteration: it, model, metrics: &metrics, rng: rng.state() };
            if let Some(id) = sink.checkpoint(&event)? {
                last_ckpt = Some(id);
            }
            loss_acc = 0.0;
            loss_count = 0;
        }
    }
    Ok(TrainOutcome { traces, iterations_completed: cfg.iterations, divergence: None, optimizer: opt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamTree;
    use crate::blocks::DitConfig;

    fn zero_field(z: &Tensor, _: f64, _: &Conditioning) -> Result<Tensor> {
        Ok(Tensor::zeros(z.shape()).unwrap())
    }

    #[test]
    fn interpolant_endpoints() {
        let mut rng = SeededRng::new(0);
        let z0 = normal_tensor(&[3, 2, 2], 1.0, &mut rng);
        let z1 = normal_tensor(&[3, 2, 2], 1.0, &mut rng);
        assert_eq!(FlowSample::new(z0.clone(), z1.clone(), 0.0).unwrap().z_t, z0);
        assert_eq!(FlowSample::new(z0.clone(), z1.clone(), 1.0).unwrap().z_t, z1);
        let a = FlowSample::new(z0.clone(), z1.clone(), 0.3).unwrap();
        let b = FlowSample::new(z0, z1, 0.8).unwrap();
        assert_eq!(a.target, b.target);
    }

    #[test]
    fn oracle_and_zero_models() {
        let mut rng = SeededRng::new(1);
        let samples: Vec<(FlowSample, Conditioning)> = (0..50)
            .map(|_| {
                let z1 = normal_tensor(&[2, 1, 1], 1.0, &mut rng);
                (draw_flow_sample(&z1, &TimeSampling::Uniform, &mut rng).unwrap(), Conditioning::default())
            })
            .collect();
        // The oracle recovers z1 − z0 from z_t and t only when it can see the pair;
        // here it looks the sample up by z_t.
        let lookup = samples.clone();
        let oracle = move |z: &Tensor, _t: f64, _c: &Conditioning| -> Result<Tensor> {
            Ok(lookup.iter().find(|(s, _)| &s.z_t == z).unwrap().0.target.clone())
        };
        assert_eq!(cfm_loss_on_samples(&oracle, &samples).unwrap(), 0.0);
        assert!(cfm_loss_on_samples(&zero_field, &samples).unwrap() > 0.0);
        let mut rev = samples.clone();
        rev.reverse();
        let (a, b) = (cfm_loss_on_samples(&zero_field, &samples).unwrap(), cfm_loss_on_samples(&zero_field, &rev).unwrap());
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let nan_field = |z: &Tensor, _: f64, _: &Conditioning| Ok(z.map(|_| f64::NAN));
        let batch = vec![Example::unconditional(Tensor::zeros(&[1, 1, 1]).unwrap())];
        assert!(matches!(cfm_loss(&nan_field, &batch, &mut SeededRng::new(0)), Err(Error::NonFinite(_))));
        assert!(cfm_loss(&zero_field, &[], &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn euler_constant_and_single_step() {
        let u = Tensor::new(vec![2, 1, 1], vec![0.7, -1.3]).unwrap();
        let uc = u.clone();
        let constant = move |_: &Tensor, _: f64, _: &Conditioning| Ok(uc.clone());
        let z = Tensor::new(vec![2, 1, 1], vec![0.25, 2.0]).unwrap();
        let out = euler_sample(&constant, &z, &Conditioning::default(), &SamplerConfig::default()).unwrap();
        for (o, (a, b)) in out.data().iter().zip(z.data().iter().zip(u.data())) {
            assert!((o - (a + b)).abs() < 1e-12);
        }
        let lin = |z: &Tensor, t: f64, _: &Conditioning| Ok(z.scale(1.0 + t));
        let one = euler_sample(&lin, &z, &Conditioning::default(), &SamplerConfig { num_steps: 1 }).unwrap();
        assert_eq!(one, z.scale(2.0));
        assert!(euler_sample(&lin, &z, &Conditioning::default(), &SamplerConfig { num_steps: 0 }).is_err());
    }

    #[test]
    fn euler_first_order_on_linear_field() {
        let ident = |z: &Tensor, _: f64, _: &Conditioning| Ok(z.clone());
        let z = Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap();
        let err = |n| {
            let out = euler_sample(&ident, &z, &Conditioning::default(), &SamplerConfig { num_steps: n }).unwrap();
            (out.data()[0] - std::f64::consts::E).abs()
        };
        for n in [20, 40, 80] {
            let ratio = err(n) / err(2 * n);
            assert!((ratio - 2.0).abs() < 0.4, "ratio {ratio} at {n}");
        }
    }

    #[test]
    fn unshuffle_roundtrip_and_layout() {
        let x = Tensor::from_fn(&[2, 8, 8], |i| i as f64).unwrap();
        let u = pixel_unshuffle(&x, 4).unwrap();
        assert_eq!(u.shape(), &[32, 2, 2]);
        assert_eq!(pixel_shuffle(&u, 4).unwrap(), x);
        // Channel 1 of the first input channel is pixel (0, 1).
        assert_eq!(u.get(&[1, 0, 0]).unwrap(), x.get(&[0, 0, 1]).unwrap());
        assert_eq!(u.get(&[4, 0, 1]).unwrap(), x.get(&[0, 1, 4]).unwrap());
        assert!(pixel_unshuffle(&x, 3).is_err());
    }

    #[test]
    fn degrade_cases() {
        let mut rng = SeededRng::new(0);
        let c = Tensor::full(&[1, 8, 8], 0.4).unwrap();
        assert_eq!(toy_degrade(&c, 2, 0.0, &mut rng).unwrap(), Tensor::full(&[1, 4, 4], 0.4).unwrap());
        let x = normal_tensor(&[2, 6, 6], 1.0, &mut rng);
        assert_eq!(toy_degrade(&x, 1, 0.0, &mut rng).unwrap(), x);
        assert!(toy_degrade(&x, 4, 0.0, &mut rng).is_err());
        let big = Tensor::full(&[1, 64, 64], 0.5).unwrap();
        let sigma = 0.1;
        let d = toy_degrade(&big, 1, sigma, &mut rng).unwrap();
        assert!((d.mean() - 0.5).abs() < 3.0 * sigma / 64.0);
    }

    #[test]
    fn psnr_values() {
        let a = Tensor::zeros(&[1, 2, 2]).unwrap();
        let b = Tensor::full(&[1, 2, 2], 0.1).unwrap();
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn energy_distance_properties() {
        let mut rng = SeededRng::new(3);
        let s = |rng: &mut SeededRng, shift: f64| -> Vec<Vec<f64>> { (0..200).map(|_| vec![rng.normal() + shift, rng.normal()]).collect() };
        let a = s(&mut rng, 0.0);
        let b = s(&mut rng, 0.0);
        let c = s(&mut rng, 3.0);
        let same = energy_distance(&a, &b).unwrap();
        let far = energy_distance(&a, &c).unwrap();
        assert!(same.abs() < 0.1 && far > 2.0, "{same} {far}");
        assert!((far - energy_distance(&c, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn toy_sr_shapes() {
        let d = ToySr::default_toy(0);
        assert_eq!(d.latent_shape(), [16, 4, 4]);
        let e = d.draw(&mut SeededRng::new(0));
        assert_eq!(e.z1.shape(), &[16, 4, 4]);
        assert_eq!(e.cond.x_lr.as_ref().unwrap().shape(), &[1, 8, 8]);
        let img = d.decode(&e.z1).unwrap();
        assert!(d.encode(&img).unwrap().sub(&e.z1).unwrap().max_abs() < 1e-12);
    }

    fn tiny_gauss_model(seed: u64, experts: usize) -> Dit {
        let cfg = DitConfig {
            latent_channels: 2,
            grid: (1, 1),
            model_dim: 8,
            num_heads: 2,
            mlp_ratio: 2,
            num_blocks: 1,
            time_freq_dim: 4,
            cond_dim: 0,
            stem: None,
            num_experts: experts,
            epsilon: 1e-6,
        };
        Dit::init(cfg, false, &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut m = tiny_gauss_model(0, 1);
        let before = m.params.clone();
        let cfg = TrainConfig {
            iterations: 5,
            batch_size: 4,
            eval_interval: 2,
            optimizer: AdamConfig { lr: 0.0, ..Default::default() },
            ..Default::default()
        };
        let out = train_loop(&mut m, &TwoGaussians::new(4, 0), &cfg, None, &mut NullSink).unwrap();
        assert_eq!(m.params, before);
        assert!(out.traces.iter().all(|t| t.len() == 2));
    }

    #[test]
    fn training_is_deterministic_and_csv_sink_writes() {
        let cfg = TrainConfig { iterations: 6, batch_size: 8, eval_interval: 3, ..Default::default() };
        let data = TwoGaussians::new(8, 1);
        let mut a = tiny_gauss_model(1, 1);
        let mut b = tiny_gauss_model(1, 1);
        let mut sink = CsvTraceSink::new(Vec::new()).unwrap();
        let oa = train_loop(&mut a, &data, &cfg, None, &mut sink).unwrap();
        let ob = train_loop(&mut b, &data, &cfg, None, &mut NullSink).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(oa.traces, ob.traces);
        let text = String::from_utf8(sink.into_inner()).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 2);
        let parsed = crate::esgf::read_traces_csv(text.as_bytes()).unwrap();
        assert_eq!(parsed.len(), 2);
    }

    #[test]
    fn moe_step_touches_only_routed_expert() {
        let partition = ExpertPartition::default_with_depth(1).unwrap();
        let mut m = tiny_gauss_model(2, 2);
        let data = TwoGaussians::new(0, 0);
        let mut rng = SeededRng::new(0);
        let batch: Vec<Example> = (0..4).map(|_| data.draw(&mut rng)).collect();
        let mut opt = Adam::new(&m.params, AdamConfig::default());
        let before = m.params.clone();
        // Flow time 0.05 is near noise, so it routes to expert 0.
        let (_, active) = train_step(&mut m, &mut opt, &batch, Some(&partition), &TimeSampling::Fixed(0.05), &mut rng).unwrap();
        assert_eq!(active, vec![true, false]);
        assert_ne!(m.params.experts[0], before.experts[0]);
        assert_eq!(m.params.experts[1], before.experts[1]);
        assert_ne!(m.params.time1, before.time1);
    }

    #[test]
    fn divergence_halts_with_markers() {
        let mut m = tiny_gauss_model(0, 1);
        for t in m.params.tensors_mut() {
            t.data_mut().fill(1e300);
        }
        let cfg = TrainConfig { iterations: 5, batch_size: 2, eval_interval: 1, ..Default::default() };
        let out = train_loop(&mut m, &TwoGaussians::new(2, 0), &cfg, None, &mut NullSink).unwrap();
        let d = out.divergence.expect("diverged");
        assert_eq!(d.iteration, 1);
        assert!(out.traces.iter().all(|t| t.has_divergence()));
    }
}
