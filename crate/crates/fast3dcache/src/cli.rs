//! Command-line front end: simulate, replay, schedule, and flops.
//!
//! Outputs are deterministic for a given argument list. Report files are
//! written atomically.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flops::{BlockDims, FlopsError, FlopsReport};
use crate::grid::{DecoderSpec, Dims, GridError, LatentGrid};
use crate::pipeline::{
    check_invariants, pcsc_curve, CachePolicy, ConfigError, PipelineError, RunReport, Sampler, SamplerConfig,
    VelocityOracle,
};
use crate::simkit::{
    caching_phase_fit, compare, gaussian_noise, record_trace, LogLinearFit, SyntheticField, SyntheticFieldSpec,
    TraceError, TraceOracle,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Flops(#[from] FlopsError),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("report encoding failed: {0}")]
    Encoding(String),
}

impl CliError {
    /// Stable machine-readable name of the error.
    pub fn class(&self) -> &'static str {
        match self {
            CliError::Config(e) => e.class(),
            CliError::Pipeline(e) => e.class(),
            CliError::Trace(e) => e.class(),
            CliError::Grid(e) => e.class(),
            CliError::Flops(e) => e.class(),
            CliError::Usage(_) => "Usage",
            CliError::Io(_) => "Io",
            CliError::Invariant(_) => "InvariantViolation",
            CliError::Encoding(_) => "Encoding",
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Encoding(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Encoding(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "fast3d", about = "Token caching for flow-matching samplers on 3D latent grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run full and cached sampling on a synthetic field and compare them.
    Simulate(SimulateArgs),
    /// Run the caching policy against a recorded velocity trace.
    Replay(ReplayArgs),
    /// Print the predicted budget curve without sampling.
    Schedule(ScheduleArgs),
    /// Print per-component FLOPs of one transformer block.
    Flops(FlopsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SamplerArgs {
    #[arg(long, default_value_t = 25)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.2)]
    pub rho_a: f64,
    #[arg(long, default_value_t = 0.75)]
    pub rho_cfg_off: f64,
    #[arg(long, default_value_t = -0.07, allow_hyphen_values = true)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.7)]
    pub omega: f64,
    /// Consecutive cached steps before a full refresh; 0 disables.
    #[arg(long, default_value_t = 3)]
    pub tau: u32,
    #[arg(long, default_value_t = 0.7)]
    pub xi: f64,
    /// Full correction period after guidance ends; 0 disables.
    #[arg(long, default_value_t = 3)]
    pub f_corr: u32,
    #[arg(long, default_value_t = 3.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 8.0)]
    pub gamma_up: f64,
    #[arg(long, default_value_t = 3.0)]
    pub cfg_scale: f64,
    #[arg(long, default_value_t = 0.5)]
    pub cfg_lo: f64,
    #[arg(long, default_value_t = 1.0)]
    pub cfg_hi: f64,
    #[arg(long, default_value_t = 2)]
    pub cfg_flops_factor: u32,
    /// pcsc, full, or fixed:<active ratio>.
    #[arg(long, default_value = "pcsc", value_parser = parse_policy)]
    pub policy: CachePolicy,
}

fn parse_policy(s: &str) -> Result<CachePolicy, String> {
    s.parse()
}

impl SamplerArgs {
    pub fn config(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            rho_a: self.rho_a,
            rho_cfg_off: self.rho_cfg_off,
            mu: self.mu,
            omega: self.omega,
            tau: self.tau,
            xi: self.xi,
            f_corr: self.f_corr,
            eta: self.eta,
            cfg_interval: (self.cfg_lo, self.cfg_hi),
            cfg_scale: self.cfg_scale,
            gamma_up: self.gamma_up,
            cfg_flops_factor: self.cfg_flops_factor,
            policy: self.policy,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 1024)]
    pub d_model: u64,
    #[arg(long, default_value_t = 16)]
    pub heads: u64,
    #[arg(long, default_value_t = 1374)]
    pub cond_tokens: u64,
    #[arg(long, default_value_t = 1024)]
    pub d_cond: u64,
    #[arg(long, default_value_t = 24)]
    pub layers: u64,
}

impl ModelArgs {
    pub fn dims(&self, batch: u64, tokens: u64) -> BlockDims {
        BlockDims {
            batch,
            tokens,
            d_model: self.d_model,
            heads: self.heads,
            cond_tokens: self.cond_tokens,
            d_cond: self.d_cond,
            layers: self.layers,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub grid_d: usize,
    #[arg(long, default_value_t = 16)]
    pub grid_h: usize,
    #[arg(long, default_value_t = 16)]
    pub grid_w: usize,
    #[arg(long, default_value_t = 8)]
    pub channels: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
}

impl GridArgs {
    pub fn dims(&self) -> Dims {
        Dims::new(self.batch, self.channels, self.grid_d, self.grid_h, self.grid_w)
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Directory for steps.csv and summary.json; the summary goes to stdout
    /// when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write pcsc_curve.csv using the measured anchor value.
    #[arg(long)]
    pub pcsc_curve: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub grid: GridArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Write the full run's velocities to this trace file.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Vary one parameter from the base config, e.g. `omega=0,1`. Repeat
    /// to add axes; each value is one run.
    #[arg(long)]
    pub sweep: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    pub trace: PathBuf,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub output: OutputArgs,
    /// Seed of the initial noise the trace was recorded from.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Dynamic voxels measured at the anchor.
    #[arg(long, default_value_t = 1000)]
    pub sigma: u64,
    /// Token count `D·H·W`.
    #[arg(long, default_value_t = 4096)]
    pub tokens: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 1)]
    pub batch: u64,
    /// Active token count.
    #[arg(long, default_value_t = 4096)]
    pub tokens: u64,
}

/// One row of steps.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub t: f64,
    pub phase: String,
    pub quota: usize,
    pub active: usize,
    pub flops: u128,
    pub delta_s: Option<u64>,
}

/// Contents of summary.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub command: String,
    pub config: SamplerConfig,
    pub dims: Dims,
    pub model: BlockDims,
    pub seed: u64,
    pub field: Option<SyntheticFieldSpec>,
    pub trace: Option<String>,
    pub total_flops: u128,
    pub full_flops: u128,
    pub flops_reduction: f64,
    pub relative_l2: f64,
    pub iou: f64,
    pub oracle_token_evaluations: u64,
    pub policy_measurements: u32,
    pub sigma: Vec<f64>,
    /// Log-linear fit of the full run's occupancy change over the caching phase.
    pub full_run_fit: Option<LogLinearFit>,
}

/// Everything one run emits.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputBundle {
    pub steps: Vec<StepRow>,
    pub summary: Summary,
    pub curve_csv: Option<String>,
}

impl OutputBundle {
    pub fn steps_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.steps {
            w.serialize(row)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Encoding(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| CliError::Encoding(e.to_string()))
    }

    pub fn summary_json(&self) -> Result<String, CliError> {
        Ok(serde_json::to_string_pretty(&self.summary)? + "\n")
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir)?;
        crate::simkit::write_atomic(&dir.join("steps.csv"), self.steps_csv()?.as_bytes())?;
        crate::simkit::write_atomic(&dir.join("summary.json"), self.summary_json()?.as_bytes())?;
        if let Some(curve) = &self.curve_csv {
            crate::simkit::write_atomic(&dir.join("pcsc_curve.csv"), curve.as_bytes())?;
        }
        Ok(())
    }
}

fn step_rows(report: &RunReport) -> Vec<StepRow> {
    report
        .steps
        .iter()
        .map(|r| StepRow {
            step: r.step,
            t: r.t,
            phase: r.phase.name().to_string(),
            quota: r.quota,
            active: r.active,
            flops: r.flops,
            delta_s: r.delta_s,
        })
        .collect()
}

/// Budget curve as CSV.
pub fn curve_csv(config: &SamplerConfig, sigma: u64, tokens: usize) -> Result<String, CliError> {
    #[derive(Serialize)]
    struct Row {
        step: usize,
        t: f64,
        phase: &'static str,
        predicted_dynamic_voxels: Option<f64>,
        pcsc_quota: usize,
        budget: usize,
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in pcsc_curve(config, sigma, tokens)? {
        w.serialize(Row {
            step: r.step,
            t: r.t,
            phase: r.phase.name(),
            predicted_dynamic_voxels: r.predicted_dynamic_voxels,
            pcsc_quota: r.pcsc_quota,
            budget: r.budget,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Encoding(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Encoding(e.to_string()))
}

struct Evaluation<'a> {
    command: &'a str,
    config: SamplerConfig,
    model: BlockDims,
    seed: u64,
    field: Option<SyntheticFieldSpec>,
    trace: Option<String>,
    want_curve: bool,
}

fn evaluate(
    ev: Evaluation<'_>,
    oracle: &dyn VelocityOracle,
    noise: &LatentGrid,
) -> Result<OutputBundle, CliError> {
    let config = ev.config;
    let dims = noise.dims();
    let full_cfg = SamplerConfig { policy: CachePolicy::Disabled, ..config };
    let (full_state, full) = Sampler::new(full_cfg).with_model(ev.model).run(oracle, noise)?;
    let (state, report) = Sampler::new(config).with_model(ev.model).run(oracle, noise)?;
    let violations = check_invariants(&report, &config, dims);
    if let Some(first) = violations.first() {
        return Err(CliError::Invariant(first.clone()));
    }
    let quality = compare(&state, &full_state, &DecoderSpec::new(config.gamma_up))?;
    let reduction = 1.0 - report.total_flops as f64 / full.total_flops as f64;
    let sigma: Vec<f64> = report.calibration.iter().map(|c| c.sigma).collect();
    let curve_csv = match (ev.want_curve, sigma.first()) {
        (true, Some(s)) => Some(curve_csv(&config, *s as u64, dims.tokens())?),
        _ => None,
    };
    let summary = Summary {
        command: ev.command.to_string(),
        config,
        dims,
        model: ev.model,
        seed: ev.seed,
        field: ev.field,
        trace: ev.trace,
        total_flops: report.total_flops,
        full_flops: full.total_flops,
        flops_reduction: reduction,
        relative_l2: quality.relative_l2,
        iou: quality.iou,
        oracle_token_evaluations: report.oracle_token_evaluations,
        policy_measurements: report.policy_measurements,
        sigma,
        full_run_fit: caching_phase_fit(&full, &config),
    };
    Ok(OutputBundle { steps: step_rows(&report), summary, curve_csv })
}

/// Full and cached runs of the synthetic field described by `args`.
pub fn cmd_simulate(args: &SimulateArgs) -> Result<OutputBundle, CliError> {
    simulate_with(args, args.sampler.config())
}

fn simulate_with(args: &SimulateArgs, config: SamplerConfig) -> Result<OutputBundle, CliError> {
    config.validate()?;
    let dims = args.grid.dims();
    let spec = SyntheticFieldSpec::for_config(&config, args.grid.seed);
    let field = SyntheticField::new(spec.clone(), dims)?;
    let noise = field.initial_noise();
    let model = args.model.dims(1, dims.tokens() as u64);
    model.validate()?;
    evaluate(
        Evaluation {
            command: "simulate",
            config,
            model,
            seed: args.grid.seed,
            field: Some(spec),
            trace: None,
            want_curve: args.output.pcsc_curve,
        },
        &field,
        &noise,
    )
}

/// Evaluate the policy on a recorded trace, starting from seeded noise.
pub fn cmd_replay(args: &ReplayArgs) -> Result<OutputBundle, CliError> {
    let config = args.sampler.config();
    config.validate()?;
    let oracle = TraceOracle::open(&args.trace)?;
    let trace = oracle.trace();
    if trace.steps != config.steps {
        return Err(CliError::Usage(format!("trace has {} steps but --steps is {}", trace.steps, config.steps)));
    }
    let noise = gaussian_noise(trace.dims, args.seed)?;
    let model = args.model.dims(1, trace.dims.tokens() as u64);
    model.validate()?;
    evaluate(
        Evaluation {
            command: "replay",
            config,
            model,
            seed: args.seed,
            field: None,
            trace: Some(args.trace.display().to_string()),
            want_curve: args.output.pcsc_curve,
        },
        &oracle,
        &noise,
    )
}

pub fn cmd_schedule(args: &ScheduleArgs) -> Result<String, CliError> {
    curve_csv(&args.sampler.config(), args.sigma, args.tokens)
}

pub fn cmd_flops(args: &FlopsArgs) -> Result<String, CliError> {
    let dims = args.model.dims(args.batch, args.tokens);
    dims.validate()?;
    Ok(serde_json::to_string_pretty(&FlopsReport::new(&dims))? + "\n")
}

/// Apply `key=value` to a config.
pub fn set_param(config: &mut SamplerConfig, key: &str, value: &str) -> Result<(), CliError> {
    let bad = || CliError::Usage(format!("bad value '{value}' for {key}"));
    let real = || value.parse::<f64>().map_err(|_| bad());
    let int = || value.parse::<u32>().map_err(|_| bad());
    match key {
        "tau" => config.tau = int()?,
        "f_corr" | "f-corr" => config.f_corr = int()?,
        "steps" => config.steps = int()? as usize,
        "omega" => config.omega = real()?,
        "xi" => config.xi = real()?,
        "mu" => config.mu = real()?,
        "eta" => config.eta = real()?,
        "rho_a" | "rho-a" => config.rho_a = real()?,
        "rho_cfg_off" | "rho-cfg-off" => config.rho_cfg_off = real()?,
        "gamma_up" | "gamma-up" => config.gamma_up = real()?,
        "cfg_scale" | "cfg-scale" => config.cfg_scale = real()?,
        "policy" => config.policy = value.parse().map_err(CliError::Usage)?,
        _ => return Err(CliError::Usage(format!("unknown sweep parameter '{key}'"))),
    }
    Ok(())
}

/// One-factor-at-a-time sweep points: `(label, config)`.
pub fn sweep_points(base: &SamplerConfig, axes: &[String]) -> Result<Vec<(String, SamplerConfig)>, CliError> {
    let mut points = Vec::new();
    for axis in axes {
        let (key, values) = axis.split_once('=').ok_or_else(|| CliError::Usage(format!("sweep axis '{axis}' needs key=v1,v2")))?;
        for value in values.split(',') {
            let mut cfg = *base;
            set_param(&mut cfg, key, value)?;
            points.push((format!("{key}={value}"), cfg));
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub tau: u32,
    pub omega: f64,
    pub f_corr: u32,
    pub xi: f64,
    pub policy: String,
    pub flops_reduction: f64,
    pub relative_l2: f64,
    pub iou: f64,
}

/// Run every sweep point; results keep the order of `points`.
pub fn run_sweep(args: &SimulateArgs, points: &[(String, SamplerConfig)]) -> Result<Vec<(String, OutputBundle)>, CliError> {
    points
        .par_iter()
        .map(|(label, cfg)| simulate_with(args, *cfg).map(|b| (label.clone(), b)))
        .collect()
}

pub fn sweep_csv(results: &[(String, OutputBundle)]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for (label, b) in results {
        let c = &b.summary.config;
        w.serialize(SweepRow {
            label: label.clone(),
            tau: c.tau,
            omega: c.omega,
            f_corr: c.f_corr,
            xi: c.xi,
            policy: c.policy.to_string(),
            flops_reduction: b.summary.flops_reduction,
            relative_l2: b.summary.relative_l2,
            iou: b.summary.iou,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Encoding(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Encoding(e.to_string()))
}

fn emit(bundle: &OutputBundle, output: &OutputArgs, out: &mut dyn Write) -> Result<(), CliError> {
    match &output.out {
        Some(dir) => bundle.write_dir(dir),
        None => Ok(out.write_all(bundle.summary_json()?.as_bytes())?),
    }
}

/// Parse `args` (including the program name) and run the command.
pub fn run_cli<I, T>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            write!(out, "{}", e.render())?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.render().to_string())),
    };
    execute(&cli.command, out)
}

pub fn execute(command: &Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Simulate(args) => {
            if let Some(path) = &args.record {
                let config = args.sampler.config();
                config.validate()?;
                let field = SyntheticField::new(SyntheticFieldSpec::for_config(&config, args.grid.seed), args.grid.dims())?;
                let (trace, _) = record_trace(&config, &field, &field.initial_noise())?;
                trace.write(path)?;
            }
            if args.sweep.is_empty() {
                return emit(&cmd_simulate(args)?, &args.output, out);
            }
            let points = sweep_points(&args.sampler.config(), &args.sweep)?;
            let results = run_sweep(args, &points)?;
            let table = sweep_csv(&results)?;
            match &args.output.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    for (label, bundle) in &results {
                        bundle.write_dir(&dir.join(label))?;
                    }
                    crate::simkit::write_atomic(&dir.join("sweep.csv"), table.as_bytes())?;
                }
                None => out.write_all(table.as_bytes())?,
            }
            Ok(())
        }
        Command::Replay(args) => emit(&cmd_replay(args)?, &args.output, out),
        Command::Schedule(args) => {
            let csv = cmd_schedule(args)?;
            match &args.out {
                Some(path) => crate::simkit::write_atomic(path, csv.as_bytes())?,
                None => out.write_all(csv.as_bytes())?,
            }
            Ok(())
        }
        Command::Flops(args) => Ok(out.write_all(cmd_flops(args)?.as_bytes())?),
    }
}
