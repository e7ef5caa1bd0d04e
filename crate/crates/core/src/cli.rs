//! Command-line front end. The `linflow` binary calls [`main_with`].
//!
//! Machine-readable results (JSON or CSV) go to stdout; diagnostics go to
//! stderr. Exit codes: 0 success, 1 runtime failure, 2 configuration or
//! domain error, 3 numerical divergence.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::bench::{self, Impl};
use crate::blocks::{Conditioning, Dit, DitParams};
use crate::config::{MoeConfig, RunConfig};
use crate::error::{Error, Result};
use crate::esgf::{self, KneeConfig, KneeReport, MetricTrace, Orientation};
use crate::flowmatch::{self, CsvTraceSink, Dataset, EvalEvent, RoutedModel, SamplerConfig, TrainConfig, TrainOutcome, TrainSink};
use crate::persist::{self, Checkpoint, CheckpointMeta};
use crate::rng::{normal_tensor, SeededRng};
use crate::snrmoe::{self, LogSnrSchedule};
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "linflow",
    version,
    about = "Linear-attention diffusion transformer toolkit: flow-matching training, sampling, expert planning, knee detection and attention benchmarks"
)]
pub struct Cli {
    /// TOML run configuration; omitted keys take their defaults
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Seed for all random draws; overrides the config file
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,

    /// Directory in which per-run directories are created
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    pub out_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model with flow matching, writing traces and checkpoints
    Train(TrainArgs),
    /// Draw samples from a checkpoint with the Euler sampler
    Sample(SampleArgs),
    /// Print the expert partition of the log-SNR range
    PlanMoe(PlanMoeArgs),
    /// Find the knee of each metric in a trace CSV
    DetectKnee(DetectKneeArgs),
    /// Time linear and quadratic attention and fit scaling exponents
    Bench(BenchArgs),
    /// Two-stage run: fine-tune from the knee and from the latest checkpoint
    EsgfDemo(EsgfDemoArgs),
    /// Check a checkpoint file's structure and values
    ValidateCkpt(ValidateArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Number of optimizer steps (overrides train.iterations)
    #[arg(long, value_name = "N")]
    pub iterations: Option<u64>,
    /// Route training through 2^DEPTH experts (overrides [moe])
    #[arg(long, value_name = "DEPTH")]
    pub moe_depth: Option<u32>,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    /// Checkpoint to sample from
    #[arg(long, value_name = "PATH")]
    pub checkpoint: PathBuf,
    /// Number of samples
    #[arg(long, value_name = "N", default_value_t = 16)]
    pub count: usize,
    /// Euler steps (overrides train.sampler.num_steps)
    #[arg(long, value_name = "N")]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PlanMoeArgs {
    /// Lower effective noise level
    #[arg(long, value_name = "SIGMA")]
    pub sigma_min: Option<f64>,
    /// Upper effective noise level
    #[arg(long, value_name = "SIGMA")]
    pub sigma_max: Option<f64>,
    /// Time of the first split (t = 1 is pure noise)
    #[arg(long, value_name = "T")]
    pub anchor_t: Option<f64>,
    /// Bisection depth; gives 2^DEPTH experts
    #[arg(long, value_name = "N")]
    pub depth: Option<u32>,
    /// Output format
    #[arg(long, value_enum, default_value_t = TableFormat::Json)]
    pub format: TableFormat,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TableFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum OrientationArg {
    /// Lower is better for names containing "loss" or "lpips"
    Auto,
    Higher,
    Lower,
}

#[derive(Args, Debug)]
pub struct DetectKneeArgs {
    /// Trace CSV with columns iteration,metric_name,value
    #[arg(long, value_name = "PATH")]
    pub trace: PathBuf,
    /// Analyse only this metric
    #[arg(long, value_name = "NAME")]
    pub metric: Option<String>,
    /// Moving-average window in points
    #[arg(long, value_name = "W")]
    pub window: Option<usize>,
    /// Fraction of accumulated gain below which improvement has stopped
    #[arg(long, value_name = "DELTA")]
    pub min_gain: Option<f64>,
    /// Variance ratio that marks the start of oscillation
    #[arg(long, value_name = "RHO")]
    pub osc_ratio: Option<f64>,
    /// Whether larger metric values are better
    #[arg(long, value_enum, default_value_t = OrientationArg::Auto)]
    pub orientation: OrientationArg,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Comma-separated token counts (overrides bench.n_list)
    #[arg(long, value_name = "N,N,...", value_delimiter = ',')]
    pub n_list: Option<Vec<usize>>,
    /// Timed repetitions per size
    #[arg(long, value_name = "N")]
    pub reps: Option<usize>,
    /// Untimed repetitions per size
    #[arg(long, value_name = "N")]
    pub warmup: Option<usize>,
    /// What to print on stdout; the other form is written to the run directory
    #[arg(long, value_enum, default_value_t = TableFormat::Json)]
    pub format: TableFormat,
    /// Run the three implementations concurrently (faster, noisier timings)
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Args, Debug)]
pub struct EsgfDemoArgs {
    /// Stage-2 learning rate (overrides esgf.stage2_lr)
    #[arg(long, value_name = "LR")]
    pub stage2_lr: Option<f64>,
    /// Stage-2 steps (overrides esgf.stage2_iterations)
    #[arg(long, value_name = "N")]
    pub stage2_iterations: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Checkpoint file
    pub path: PathBuf,
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => EXIT_DIVERGED,
        Error::Shape(_)
        | Error::Domain(_)
        | Error::TooShort { .. }
        | Error::AllFlat { .. }
        | Error::NoCheckpoint(_)
        | Error::InsufficientData(_)
        | Error::Config(_) => EXIT_CONFIG,
        Error::OutOfMemory(_) | Error::Format(_) | Error::Truncation { .. } | Error::Io { .. } => EXIT_RUNTIME,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with<I, S>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { stderr.write_all(text.as_bytes()) } else { stdout.write_all(text.as_bytes()) };
            return code;
        }
    };
    match run(&cli, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

fn emit_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| Error::io("<stdout>", e))
}

/// Creates `<out_dir>/run-<unix seconds>-s<seed>`, with a numeric suffix on collision.
pub fn create_run_dir(out_dir: &Path, seed: u64) -> Result<PathBuf> {
    let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let base = format!("run-{secs}-s{seed}");
    for k in 0.. {
        let name = if k == 0 { base.clone() } else { format!("{base}-{k}") };
        let dir = out_dir.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(Error::io(&dir, e)),
        }
    }
    unreachable!("unbounded suffix search")
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    match &cli.command {
        Command::Train(a) => cmd_train(cli, a, stdout, stderr),
        Command::Sample(a) => cmd_sample(cli, a, stdout),
        Command::PlanMoe(a) => cmd_plan_moe(cli, a, stdout),
        Command::DetectKnee(a) => cmd_detect_knee(cli, a, stdout),
        Command::Bench(a) => cmd_bench(cli, a, stdout, stderr),
        Command::EsgfDemo(a) => cmd_esgf_demo(cli, a, stdout, stderr),
        Command::ValidateCkpt(a) => {
            emit_json(stdout, &persist::validate_checkpoint(&a.path)?)?;
            Ok(EXIT_OK)
        }
    }
}

// --- train ------------------------------------------------------------------------------

/// Writes the trace CSV and a checkpoint at every evaluation.
struct RunSink {
    csv: CsvTraceSink<BufWriter<File>>,
    ckpt_dir: PathBuf,
    stage: String,
    written: Vec<(u64, PathBuf)>,
}

impl RunSink {
    fn create(dir: &Path, stage: &str) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt_dir = dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
        let trace = dir.join("trace.csv");
        let file = File::create(&trace).map_err(|e| Error::io(&trace, e))?;
        Ok(RunSink { csv: CsvTraceSink::new(BufWriter::new(file))?, ckpt_dir, stage: stage.to_string(), written: Vec::new() })
    }

    fn save(&mut self, iteration: u64, params: &DitParams, metrics: &[(String, f64)], rng: Option<crate::rng::RngState>) -> Result<PathBuf> {
        let mut meta = CheckpointMeta::new(self.stage.clone(), iteration);
        meta.metrics = metrics.iter().cloned().collect();
        meta.rng_state = rng;
        let path = self.ckpt_dir.join(format!("ckpt-{iteration:08}.lsr"));
        persist::save_checkpoint(&path, &Checkpoint::from_params(meta, params))?;
        self.written.push((iteration, path.clone()));
        Ok(path)
    }
}

impl TrainSink for RunSink {
    fn record(&mut self, iteration: u64, metric: &str, value: f64) -> Result<()> {
        self.csv.record(iteration, metric, value)
    }

    fn checkpoint(&mut self, event: &EvalEvent<'_>) -> Result<Option<u64>> {
        self.save(event.iteration, &event.model.params, event.metrics, Some(event.rng.clone()))?;
        Ok(Some(event.iteration))
    }
}

#[derive(Serialize)]
struct TrainSummary {
    run_dir: PathBuf,
    stage: String,
    iterations_completed: u64,
    num_parameters: usize,
    num_experts: usize,
    final_metrics: std::collections::BTreeMap<String, f64>,
    checkpoints: Vec<PathBuf>,
    divergence: Option<flowmatch::Divergence>,
}

fn init_model(cfg: &RunConfig) -> Result<Dit> {
    Dit::init(cfg.model.clone(), true, &mut SeededRng::with_stream(cfg.seed, 0))
}

/// Trains `model` in `dir`, saving the starting point as a checkpoint first.
fn train_stage(model: &mut Dit, data: &dyn Dataset, cfg: &RunConfig, train: &TrainConfig, dir: &Path, stage: &str) -> Result<(TrainOutcome, TrainSummary)> {
    let partition = cfg.partition()?;
    let mut sink = RunSink::create(dir, stage)?;
    sink.save(0, &model.params, &[], None)?;
    let outcome = flowmatch::train_loop(model, data, train, partition.as_ref(), &mut sink)?;
    if outcome.divergence.is_none() && outcome.iterations_completed % train.eval_interval != 0 {
        sink.save(outcome.iterations_completed, &model.params, &[], None)?;
    }
    let final_metrics = outcome
        .traces
        .iter()
        .filter_map(|t| t.points().last().filter(|p| p.1.is_finite()).map(|p| (t.name.clone(), p.1)))
        .collect();
    let summary = TrainSummary {
        run_dir: dir.to_path_buf(),
        stage: stage.to_string(),
        iterations_completed: outcome.iterations_completed,
        num_parameters: crate::nn::ParamTree::num_params(&model.params),
        num_experts: model.num_experts(),
        final_metrics,
        checkpoints: sink.written.iter().map(|(_, p)| p.clone()).collect(),
        divergence: outcome.divergence.clone(),
    };
    Ok((outcome, summary))
}

fn cmd_train(cli: &Cli, a: &TrainArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let mut cfg = load_config(cli)?;
    if let Some(n) = a.iterations {
        cfg.train.iterations = n;
    }
    if let Some(depth) = a.moe_depth {
        cfg.moe = Some(MoeConfig { depth, ..cfg.moe.unwrap_or_default() });
        cfg.model.num_experts = 1 << depth;
    }
    cfg.validate()?;
    let data = cfg.data.build(cfg.seed)?;
    let dir = create_run_dir(&cli.out_dir, cfg.seed)?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    let mut model = init_model(&cfg)?;
    let train = cfg.train.clone();
    let (outcome, summary) = train_stage(&mut model, data.as_ref(), &cfg, &train, &dir, "train")?;
    emit_json(stdout, &summary)?;
    if let Some(d) = &outcome.divergence {
        let _ = writeln!(stderr, "diverged at iteration {}: {}", d.iteration, d.detail);
        return Ok(EXIT_DIVERGED);
    }
    Ok(EXIT_OK)
}

// --- sample -----------------------------------------------------------------------------

fn config_for_checkpoint(cli: &Cli, ckpt: &Path) -> Result<RunConfig> {
    if cli.config.is_some() {
        return load_config(cli);
    }
    let beside = ckpt.parent().and_then(Path::parent).map(|d| d.join("config.toml"));
    let mut cfg = match beside {
        Some(p) if p.exists() => RunConfig::load(&p)?,
        _ => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.set_seed(s);
    }
    Ok(cfg)
}

/// Plain PGM (P2), values clamped to `[0, 1]` and scaled to 0–255.
pub fn write_pgm(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    let mut s = format!("P2\n{w} {h}\n255\n");
    for r in rows {
        let line: Vec<String> = r.iter().map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    write_file(path, s.as_bytes())
}

/// Lays out `[1, H, W]` images left to right, upscaling each to `size` by pixel repetition.
fn image_strip(images: &[&Tensor], size: usize, gap: usize) -> Vec<Vec<f64>> {
    let width = images.len() * size + gap * images.len().saturating_sub(1);
    let mut rows = vec![vec![1.0; width]; size];
    for (k, img) in images.iter().enumerate() {
        let (h, w) = (img.shape()[1], img.shape()[2]);
        for (y, row) in rows.iter_mut().enumerate() {
            for x in 0..size {
                row[k * (size + gap) + x] = img.data()[(y * h / size) * w + x * w / size];
            }
        }
    }
    rows
}

fn cmd_sample(cli: &Cli, a: &SampleArgs, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = config_for_checkpoint(cli, &a.checkpoint)?;
    cfg.validate()?;
    if a.count == 0 {
        return Err(Error::Config("--count must be positive".into()));
    }
    let ckpt = persist::load_checkpoint(&a.checkpoint)?;
    let mut model = init_model(&cfg)?;
    ckpt.load_into(&mut model.params)?;
    let partition = cfg.partition()?;
    let routed = RoutedModel::new(&model, partition.as_ref())?;
    let sampler = SamplerConfig { num_steps: a.steps.unwrap_or(cfg.train.sampler.num_steps) };
    let data = cfg.data.build(cfg.seed)?;
    let mut rng = SeededRng::with_stream(cfg.seed, 3);
    let dir = create_run_dir(&cli.out_dir, cfg.seed)?;
    let shape = data.latent_shape();

    let mut report = json!({
        "run_dir": dir,
        "checkpoint": a.checkpoint,
        "iteration": ckpt.meta.iteration,
        "count": a.count,
        "steps": sampler.num_steps,
    });
    if data.decode(&Tensor::zeros(&shape)?).is_some() {
        // Conditional: super-resolve fresh low-resolution inputs.
        let mut rows = Vec::new();
        let mut psnr_total = 0.0;
        for _ in 0..a.count {
            let ex = data.draw(&mut rng);
            let z0 = normal_tensor(&shape, 1.0, &mut rng);
            let z = flowmatch::euler_sample(&routed, &z0, &ex.cond, &sampler)?;
            let (img, truth) = (data.decode(&z).expect("image data"), data.decode(&ex.z1).expect("image data"));
            psnr_total += flowmatch::psnr(&img, &truth, 1.0)?.min(100.0);
            let lr = ex.cond.x_lr.as_ref().expect("image data has x_lr");
            let size = truth.shape()[1];
            rows.extend(image_strip(&[lr, &img, &truth], size, 2));
            rows.push(vec![1.0; rows.last().map_or(0, Vec::len)]);
        }
        let pgm = dir.join("samples.pgm");
        write_pgm(&pgm, &rows)?;
        report["image_grid"] = json!(pgm);
        report["layout"] = json!("each row: low-resolution input, sample, ground truth");
        report["mean_psnr"] = json!(psnr_total / a.count as f64);
    } else {
        let mut csv = String::from("index");
        for c in 0..shape.iter().product::<usize>() {
            csv.push_str(&format!(",x{c}"));
        }
        csv.push('\n');
        let cond = Conditioning::default();
        for i in 0..a.count {
            let z0 = normal_tensor(&shape, 1.0, &mut rng);
            let z = flowmatch::euler_sample(&routed, &z0, &cond, &sampler)?;
            let vals: Vec<String> = z.data().iter().map(|v| v.to_string()).collect();
            csv.push_str(&format!("{i},{}\n", vals.join(",")));
        }
        let path = dir.join("samples.csv");
        write_file(&path, csv.as_bytes())?;
        report["samples_csv"] = json!(path);
    }
    emit_json(stdout, &report)?;
    Ok(EXIT_OK)
}

// --- plan-moe ---------------------------------------------------------------------------

fn cmd_plan_moe(cli: &Cli, a: &PlanMoeArgs, stdout: &mut dyn Write) -> Result<i32> {
    let base = match &cli.config {
        Some(_) => load_config(cli)?.moe.unwrap_or_default(),
        None => MoeConfig::default(),
    };
    let schedule = LogSnrSchedule::from_sigmas(a.sigma_min.unwrap_or(base.sigma_min), a.sigma_max.unwrap_or(base.sigma_max))?;
    let partition = snrmoe::derive_partition(&schedule, a.anchor_t.unwrap_or(base.anchor_t), a.depth.unwrap_or(base.depth))?;
    let table = snrmoe::emit_routing_table(&partition);
    let text = match a.format {
        TableFormat::Json => table.to_json() + "\n",
        TableFormat::Csv => table.to_csv(),
    };
    stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
    Ok(EXIT_OK)
}

// --- detect-knee ------------------------------------------------------------------------

fn cmd_detect_knee(cli: &Cli, a: &DetectKneeArgs, stdout: &mut dyn Write) -> Result<i32> {
    let base = match &cli.config {
        Some(_) => load_config(cli)?.knee,
        None => KneeConfig::default(),
    };
    let cfg = KneeConfig {
        window: a.window.unwrap_or(base.window),
        min_gain: a.min_gain.unwrap_or(base.min_gain),
        osc_ratio: a.osc_ratio.unwrap_or(base.osc_ratio),
    };
    let file = File::open(&a.trace).map_err(|e| Error::io(&a.trace, e))?;
    let mut traces = esgf::read_traces_csv(BufReader::new(file))?;
    if let Some(m) = &a.metric {
        traces.retain(|t| &t.name == m);
        if traces.is_empty() {
            return Err(Error::Config(format!("metric `{m}` not found in {}", a.trace.display())));
        }
    }
    for t in &mut traces {
        t.orientation = match a.orientation {
            OrientationArg::Auto => Orientation::infer(&t.name),
            OrientationArg::Higher => Orientation::HigherBetter,
            OrientationArg::Lower => Orientation::LowerBetter,
        };
    }
    let reports = traces.iter().map(|t| esgf::detect_knee(t, &cfg)).collect::<Result<Vec<KneeReport>>>()?;
    match (a.metric.is_some(), reports.as_slice()) {
        (true, [one]) => emit_json(stdout, one)?,
        _ => emit_json(stdout, &reports)?,
    }
    Ok(EXIT_OK)
}

// --- bench ------------------------------------------------------------------------------

fn cmd_bench(cli: &Cli, a: &BenchArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let mut cfg = load_config(cli)?;
    if let Some(n) = &a.n_list {
        cfg.bench.n_list = n.clone();
    }
    if let Some(r) = a.reps {
        cfg.bench.reps = r;
    }
    if let Some(w) = a.warmup {
        cfg.bench.warmup = w;
    }
    cfg.bench.validate()?;
    let summary = if a.parallel { bench::run_all_parallel(&cfg.bench)? } else { bench::run_all(&cfg.bench)? };
    let dir = create_run_dir(&cli.out_dir, cfg.seed)?;
    let mut csv = Vec::new();
    bench::write_csv(&mut csv, &summary.points)?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join("bench.csv"), &csv)?;
    write_file(&dir.join("bench_summary.json"), json.as_bytes())?;
    for (imp, fit) in [(Impl::Linear, &summary.linear_fit), (Impl::Naive, &summary.naive_fit)] {
        match fit {
            Some(f) => {
                let _ = writeln!(stderr, "{}: exponent {:.3}, R² {:.4}", imp.name(), f.exponent, f.r_squared);
            }
            None => {
                let _ = writeln!(stderr, "{}: not enough successful sizes to fit", imp.name());
            }
        }
    }
    let out = match a.format {
        TableFormat::Json => json.into_bytes(),
        TableFormat::Csv => csv,
    };
    stdout.write_all(&out).map_err(|e| Error::io("<stdout>", e))?;
    if matches!(a.format, TableFormat::Json) {
        let _ = writeln!(stdout);
    }
    Ok(EXIT_OK)
}

// --- esgf-demo --------------------------------------------------------------------------

fn renamed(trace: &MetricTrace, name: &str) -> Result<MetricTrace> {
    MetricTrace::new(name, trace.orientation, trace.points().to_vec())
}

fn cmd_esgf_demo(cli: &Cli, a: &EsgfDemoArgs, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32> {
    let mut cfg = load_config(cli)?;
    if let Some(lr) = a.stage2_lr {
        cfg.esgf.stage2_lr = lr;
    }
    if let Some(n) = a.stage2_iterations {
        cfg.esgf.stage2_iterations = n;
    }
    cfg.validate()?;
    let data = cfg.data.build(cfg.seed)?;
    let dir = create_run_dir(&cli.out_dir, cfg.seed)?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;

    let mut model = init_model(&cfg)?;
    let stage1_cfg = cfg.train.clone();
    let (s1, s1_summary) = train_stage(&mut model, data.as_ref(), &cfg, &stage1_cfg, &dir.join("stage1"), "stage1")?;
    if let Some(d) = &s1.divergence {
        emit_json(stdout, &json!({ "run_dir": dir, "stage1": s1_summary }))?;
        let _ = writeln!(stderr, "stage 1 diverged at iteration {}", d.iteration);
        return Ok(EXIT_DIVERGED);
    }
    let val: Vec<MetricTrace> = s1.traces.iter().filter(|t| t.name.starts_with("val_")).cloned().collect();
    let reports = val.iter().map(|t| esgf::detect_knee(t, &cfg.knee)).collect::<Result<Vec<_>>>()?;
    let metas: Vec<CheckpointMeta> = s1_summary
        .checkpoints
        .iter()
        .map(|p| persist::validate_checkpoint(p).map(|r| r.meta))
        .collect::<Result<_>>()?;
    let knee_ckpt = esgf::select_finetune_checkpoint(&val, &metas, &cfg.knee)?.iteration;
    let latest_ckpt = metas.iter().map(|m| m.iteration).max().expect("at least the initial checkpoint");
    let path_of = |it: u64| s1_summary.checkpoints.iter().find(|p| p.ends_with(format!("ckpt-{it:08}.lsr"))).cloned().expect("listed");

    let stage2_cfg = TrainConfig {
        iterations: cfg.esgf.stage2_iterations,
        optimizer: crate::optim::AdamConfig { lr: cfg.esgf.stage2_lr, ..cfg.train.optimizer },
        ..cfg.train.clone()
    };
    let mut runs = Vec::new();
    for (label, it) in [("knee-start", knee_ckpt), ("latest-start", latest_ckpt)] {
        let mut m = init_model(&cfg)?;
        persist::load_checkpoint(&path_of(it))?.load_into(&mut m.params)?;
        let (out, summary) = train_stage(&mut m, data.as_ref(), &cfg, &stage2_cfg, &dir.join(format!("stage2-{label}")), label)?;
        let trace = out.traces.iter().find(|t| t.name == "val_loss").unwrap_or(&out.traces[0]);
        runs.push((label, it, renamed(trace, label)?, summary));
    }
    let stability = esgf::compare_stability(&runs[0].2, &runs[1].2);
    let median = esgf::median_knee(&val, &cfg.knee)?;
    let report = json!({
        "run_dir": dir,
        "stage1": s1_summary,
        "knee_reports": reports.iter().map(|r| json!({
            "metric": r.metric,
            "knee_iteration": r.knee_iteration,
            "improve_end": r.improve_end,
            "oscillation_start": r.oscillation_start,
        })).collect::<Vec<_>>(),
        "median_knee": median,
        "knee_checkpoint": knee_ckpt,
        "latest_checkpoint": latest_ckpt,
        "stage2": runs.iter().map(|(label, it, _, s)| json!({ "start": label, "from_iteration": it, "summary": s })).collect::<Vec<_>>(),
        "stability": stability,
    });
    emit_json(stdout, &report)?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String, String) {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let code = main_with(args.iter().copied(), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn plan_moe_default_table() {
        let (code, out, _) = run_args(&["linflow", "plan-moe", "--format", "csv"]);
        assert_eq!(code, 0);
        assert_eq!(out.lines().count(), 5);
        assert!(out.contains("Initial Denoising"));
    }

    #[test]
    fn usage_and_domain_errors_exit_2() {
        assert_eq!(run_args(&["linflow", "no-such-command"]).0, EXIT_CONFIG);
        let (code, _, err) = run_args(&["linflow", "plan-moe", "--anchor-t", "1.5"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(err.contains("error"));
    }

    #[test]
    fn missing_checkpoint_is_runtime_error() {
        let (code, out, _) = run_args(&["linflow", "validate-ckpt", "/nonexistent/file.lsr"]);
        assert_eq!(code, EXIT_RUNTIME);
        assert!(out.is_empty());
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        write_pgm(&p, &[vec![0.0, 1.0], vec![0.5, 2.0]]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "P2\n2 2\n255\n0 255\n128 255\n");
    }
}
