//! Command-line front end: `blockflow train|sample|curvature|sweep|report|gen-data`.

use crate::analysis::{curvature_network, sliced_w2, CurvatureReport, DEFAULT_EULER_STEPS, DEFAULT_TRAJECTORIES};
use crate::checkpoint;
use crate::config::{unix_now, write_atomic, DatasetSpec, RunConfig, RunManifest};
use crate::datasets::{csv_err, gen_gaussian_grid, gen_two_blocks, load_idx, LabeledDataset};
use crate::error::{Error, Result};
use crate::prior::VarianceReport;
use crate::solvers::{sample, sample_with_labels, SampleOutput, SolverConfig};
use crate::velocity::{train, BlockFlowModel, TraceRow};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_FILE: &str = "checkpoint.bfc";
pub const TRACE_FILE: &str = "loss_trace.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
/// XOR-ed into a dataset seed to draw the held-out evaluation set.
pub const HOLDOUT_SALT: u64 = 0x4e1d_0000;

#[derive(Debug, Parser)]
#[command(name = "blockflow", version, about = "Block-matching flow models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train without label conditioning.
        #[arg(long)]
        no_label_conditioning: bool,
    },
    /// Generate samples from a checkpoint.
    Sample(SampleArgs),
    /// Network-substituted trajectory curvature.
    Curvature(CurvatureArgs),
    /// One train and analyze cycle per beta.
    Sweep(SweepArgs),
    /// Per-label prior dump and variance summary.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a dataset as CSV.
    GenData(GenDataArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SolverKind {
    Euler,
    Rk45,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SolverKind::Euler)]
    pub solver: SolverKind,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub atol: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub rtol: f64,
    #[arg(long, default_value_t = 10_000)]
    pub max_steps: usize,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long)]
    pub label: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also record each path as (sample_id, t, x_1..).
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CurvatureArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TRAJECTORIES)]
    pub k: usize,
    #[arg(long = "n-steps", default_value_t = DEFAULT_EULER_STEPS)]
    pub n_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub per_t: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub betas: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub curvature_k: usize,
    #[arg(long, default_value_t = 2000)]
    pub eval_samples: usize,
    /// Run legs on separate threads.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_parser = ["two-blocks", "gaussian-grid", "mnist"])]
    pub dataset: String,
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    #[arg(long, default_value_t = 0.3)]
    pub spread: f64,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 3.0)]
    pub box_half: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs one parsed command; output paths and the mean NFE go to stdout.
pub fn run(cli: Cli) -> Result<()> {
    let mut so = std::io::stdout().lock();
    match cli.command {
        Command::Train {
            config,
            no_label_conditioning,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if no_label_conditioning {
                cfg.model.label_conditioning = false;
            }
            let m = cmd_train(&cfg)?;
            writeln!(so, "checkpoint: {}", m.checkpoint.display())?;
            writeln!(so, "checkpoint_hash: {}", m.checkpoint_hash)?;
            Ok(())
        }
        Command::Sample(a) => {
            let out = cmd_sample(&a)?;
            writeln!(so, "mean_nfe: {}", out.mean_nfe)?;
            Ok(())
        }
        Command::Curvature(a) => {
            let rep = cmd_curvature(&a)?;
            if a.out.is_none() {
                writeln!(so, "{}", serde_json::to_string_pretty(&rep)?)?;
            }
            Ok(())
        }
        Command::Sweep(a) => {
            let base = RunConfig::load(&a.config)?;
            let opts = SweepOptions {
                curvature_k: a.curvature_k,
                eval_samples: a.eval_samples,
                parallel: a.parallel,
            };
            let rows = cmd_sweep(&base, &a.betas, &opts, &a.out)?;
            writeln!(so, "{} legs written to {}", rows.len(), a.out.display())?;
            Ok(())
        }
        Command::Report { checkpoint, out } => {
            let (model, _) = checkpoint::load(&checkpoint)?;
            let text = cmd_report(&model, out.as_deref())?;
            write!(so, "{text}")?;
            Ok(())
        }
        Command::GenData(a) => {
            let d = cmd_gen_data(&a)?;
            writeln!(so, "{} samples, dim {}, {} labels", d.len(), d.dim, d.num_labels)?;
            Ok(())
        }
    }
}

/// Trains per `cfg`, writing checkpoint, loss trace and manifest into `cfg.output_dir`.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunManifest> {
    cfg.validate()?;
    let started_at = unix_now();
    let strategy = cfg.reg_strategy()?;
    let data = cfg.dataset.build()?;
    let (model, trace) = train_model(cfg, &data, strategy)?;

    std::fs::create_dir_all(&cfg.output_dir)?;
    let ckpt = cfg.output_dir.join(CHECKPOINT_FILE);
    let bytes = checkpoint::to_bytes(&model, cfg.checkpoint_echo()?)?;
    write_atomic(&ckpt, &bytes)?;
    let trace_path = cfg.output_dir.join(TRACE_FILE);
    write_atomic(&trace_path, &trace_csv(&trace)?)?;

    let manifest = RunManifest {
        config: cfg.clone(),
        started_at,
        finished_at: unix_now(),
        checkpoint: ckpt,
        checkpoint_hash: checkpoint::content_hash(&bytes),
        metrics: vec![trace_path],
    };
    write_atomic(&cfg.output_dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Builds and trains the model described by `cfg` on `data` without touching disk.
pub fn train_model(
    cfg: &RunConfig,
    data: &LabeledDataset,
    strategy: crate::regularizers::RegStrategy,
) -> Result<(BlockFlowModel, Vec<TraceRow>)> {
    let mut model = BlockFlowModel::new(data.dim, data.label_frequencies(), &cfg.model, strategy, cfg.train.seed)?;
    let trace = train(data, &mut model, &cfg.train)?;
    Ok((model, trace))
}

pub fn trace_csv(trace: &[TraceRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "data", "reg", "total"]).map_err(csv_err)?;
    for r in trace {
        w.write_record([r.step.to_string(), r.data.to_string(), r.reg.to_string(), r.total.to_string()])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn cmd_sample(a: &SampleArgs) -> Result<SampleOutput> {
    let solver = match a.solver {
        SolverKind::Euler => SolverConfig::Euler { n_steps: a.steps },
        SolverKind::Rk45 => SolverConfig::Rk45 {
            atol: a.atol,
            rtol: a.rtol,
            max_steps: a.max_steps,
        },
    };
    solver.validate()?;
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    if let Some(y) = a.label {
        if y >= model.prior.num_labels {
            return Err(Error::Argument(format!("label {y} outside [0, {})", model.prior.num_labels)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let out = sample(&model, &solver, a.n, a.label, a.trajectory.is_some(), &mut rng)?;
    write_atomic(&a.out, &samples_csv(&out, model.dim())?)?;
    if let Some(p) = &a.trajectory {
        write_atomic(p, &trajectory_csv(&out, model.dim())?)?;
    }
    Ok(out)
}

fn x_header(first: [&str; 2], d: usize) -> Vec<String> {
    first
        .iter()
        .map(|s| s.to_string())
        .chain((1..=d).map(|i| format!("x_{i}")))
        .collect()
}

pub fn samples_csv(out: &SampleOutput, d: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(x_header(["sample_id", "label"], d)).map_err(csv_err)?;
    for (i, s) in out.samples.iter().enumerate() {
        let row = [i.to_string(), s.label.to_string()]
            .into_iter()
            .chain(s.x.iter().map(|v| v.to_string()));
        w.write_record(row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn trajectory_csv(out: &SampleOutput, d: usize) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(x_header(["sample_id", "t"], d)).map_err(csv_err)?;
    for (i, s) in out.samples.iter().enumerate() {
        for (t, x) in s.trajectory.iter().flatten() {
            let row = [i.to_string(), t.to_string()]
                .into_iter()
                .chain(x.iter().map(|v| v.to_string()));
            w.write_record(row).map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn cmd_curvature(a: &CurvatureArgs) -> Result<CurvatureReport> {
    let (model, _) = checkpoint::load(&a.checkpoint)?;
    let rep = curvature_network(&model, a.k, a.n_steps, a.seed)?;
    if let Some(p) = &a.out {
        write_atomic(p, &serde_json::to_vec_pretty(&rep)?)?;
    }
    if let Some(p) = &a.per_t {
        let mut buf = Vec::new();
        rep.write_per_t_csv(&mut buf)?;
        write_atomic(p, &buf)?;
    }
    Ok(rep)
}

/// Writes the per-label CSV (when `out` is set) and returns the text summary.
pub fn cmd_report(model: &BlockFlowModel, out: Option<&Path>) -> Result<String> {
    if let Some(p) = out {
        write_atomic(p, &per_label_csv(model)?)?;
    }
    Ok(report_summary(&model.prior.variance_decomposition()))
}

pub fn per_label_csv(model: &BlockFlowModel) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["label", "mu_mean", "log_sigma_mean"]).map_err(csv_err)?;
    for (y, m, l) in model.prior.per_label_summary() {
        w.write_record([y.to_string(), m.to_string(), l.to_string()]).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn report_summary(r: &VarianceReport) -> String {
    format!(
        "total_variance: {}\nwithin_variance: {}\nbetween_variance: {}\nbetween_ratio: {}\ndegenerate: {}\ncollapsed: {}\n",
        r.total, r.within, r.between, r.ratio, r.degenerate, r.collapsed
    )
}

#[derive(Clone, Debug)]
pub struct SweepOptions {
    pub curvature_k: usize,
    pub eval_samples: usize,
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub beta: f64,
    pub total_var: f64,
    pub within: f64,
    pub between: f64,
    pub ratio: f64,
    pub curvature: f64,
    pub sliced_w2: f64,
}

/// Held-out copy of the training distribution.
pub fn holdout(spec: &DatasetSpec) -> Result<LabeledDataset> {
    match spec {
        DatasetSpec::TwoBlocks { seed, .. } | DatasetSpec::GaussianGrid { seed, .. } => {
            spec.with_seed(seed ^ HOLDOUT_SALT).build()
        }
        DatasetSpec::Mnist { .. } => spec.build(),
    }
}

/// Sliced W2 between model samples and `reference`, with samples drawn per label in
/// the reference's label proportions so label imbalance does not enter the distance.
pub fn eval_sliced_w2(model: &BlockFlowModel, solver: &SolverConfig, reference: &LabeledDataset, seed: u64) -> Result<f64> {
    let labels: Vec<usize> = reference.labels().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = sample_with_labels(model, &model.prior, solver, &labels, false, &mut rng)?;
    let gen: Vec<f64> = out.samples.iter().flat_map(|s| s.x.iter().copied()).collect();
    sliced_w2(&gen, reference.samples_flat(), reference.dim, 64, seed)
}

/// Trains and analyzes one leg of a sweep in memory.
pub fn sweep_leg(base: &RunConfig, beta: f64, opts: &SweepOptions) -> Result<(SweepRow, BlockFlowModel)> {
    let mut cfg = base.clone();
    cfg.beta = beta;
    cfg.validate()?;
    let data = cfg.dataset.build()?;
    let (model, _) = train_model(&cfg, &data, cfg.reg_strategy()?)?;
    let v = model.prior.variance_decomposition();
    let curv = curvature_network(&model, opts.curvature_k, DEFAULT_EULER_STEPS, cfg.train.seed)?;
    let mut reference = holdout(&cfg.dataset)?;
    if reference.len() > opts.eval_samples {
        reference = subset(&reference, opts.eval_samples)?;
    }
    let w2 = eval_sliced_w2(&model, &cfg.solver, &reference, cfg.train.seed)?;
    Ok((
        SweepRow {
            beta,
            total_var: v.total,
            within: v.within,
            between: v.between,
            ratio: v.ratio,
            curvature: curv.v_estimate,
            sliced_w2: w2,
        },
        model,
    ))
}

/// Every `len / n`-th sample, keeping label proportions for interleaved or blocked layouts.
fn subset(d: &LabeledDataset, n: usize) -> Result<LabeledDataset> {
    let idx: Vec<usize> = (0..n).map(|i| i * d.len() / n).collect();
    let mut xs = Vec::with_capacity(n * d.dim);
    idx.iter().for_each(|&i| xs.extend_from_slice(d.sample(i)));
    LabeledDataset::new(d.name.clone(), d.dim, xs, idx.iter().map(|&i| d.label(i)).collect(), d.num_labels)
}

/// Runs every leg, writes the completed legs sorted by beta, then reports the first failure.
pub fn cmd_sweep(base: &RunConfig, betas: &[f64], opts: &SweepOptions, out: &Path) -> Result<Vec<SweepRow>> {
    if betas.len() < 2 {
        return Err(Error::Config("betas: a sweep needs at least two values".into()));
    }
    if let Some(b) = betas.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
        return Err(Error::Config(format!("betas: {b} is not a finite non-negative value")));
    }
    base.validate()?;
    let results: Vec<Result<SweepRow>> = if opts.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = betas
                .iter()
                .map(|&b| s.spawn(move || sweep_leg(base, b, opts).map(|r| r.0)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(Error::Analysis("sweep leg panicked".into()))))
                .collect()
        })
    } else {
        betas.iter().map(|&b| sweep_leg(base, b, opts).map(|r| r.0)).collect()
    };
    let mut rows = Vec::new();
    let mut first_err = None;
    for (r, b) in results.into_iter().zip(betas) {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => {
                log::error!("sweep leg beta={b} failed: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    rows.sort_by(|a, b| a.beta.total_cmp(&b.beta));
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let mut bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    if rows.is_empty() {
        bytes = b"beta,total_var,within,between,ratio,curvature,sliced_w2\n".to_vec();
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(out, &bytes)?;
    match first_err {
        Some(e) => Err(e),
        None => Ok(rows),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<LabeledDataset> {
    let d = match a.dataset.as_str() {
        "two-blocks" => gen_two_blocks(a.n, [[-3.0, 0.0], [3.0, 0.0]], a.spread, a.seed)?,
        "gaussian-grid" => gen_gaussian_grid(a.k, a.n, a.box_half, a.spread, a.seed)?,
        _ => match (&a.images, &a.labels) {
            (Some(i), Some(l)) => load_idx(i, l)?,
            _ => return Err(Error::Argument("mnist needs --images and --labels".into())),
        },
    };
    let mut buf = Vec::new();
    d.write_csv(&mut buf)?;
    write_atomic(&a.out, &buf)?;
    Ok(d)
}
