//! Command-line front end: argument types, run configuration and the
//! simulate / train / eval / synth / report drivers.
//!
//! Exit codes: 0 on success, 2 for usage or configuration errors, 3 when a
//! run aborts at runtime.

use crate::data::{load_scenario, synthesize, validate_feasibility, ScenarioBundle, SynthesisSpec};
use crate::encoder::EncoderKind;
use crate::env::{EpisodeTrace, EvcsEnv, Normalization};
use crate::learner::{
    eval_seeds, evaluate, load_model, train, Baseline, EvalReport, EvalSummary, LearnerConfig, LearnerError, LogRow,
    Model, PolicyRef, TrainOptions, LOG_FILE,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINAL_MANIFEST_FILE: &str = "manifest.final.json";
pub const LOG_ENV: &str = "VOLTGRID_LOG";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn learner_error(e: LearnerError) -> CliError {
    match e {
        LearnerError::Config(_) | LearnerError::Dimension(_) | LearnerError::Checkpoint(_) | LearnerError::Data(_) => {
            usage(e)
        }
        other => runtime(other),
    }
}

#[derive(Debug, Parser)]
#[command(name = "voltgrid", version, about = "Safe multi-agent EV charging coordination on radial feeders")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out a fixed or learned policy and write per-step traces.
    Simulate(SimulateArgs),
    /// Train agents and write the log, checkpoints and run manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint or baseline over seeded episodes.
    Eval(EvalArgs),
    /// Generate a synthetic scenario directory.
    Synth(SynthArgs),
    /// Merge training logs of several runs and draw static plots.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    Zero,
    Greedy,
    Random,
    Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncoderArg {
    Passthrough,
    Recurrent,
    Attention,
}

impl From<EncoderArg> for EncoderKind {
    fn from(e: EncoderArg) -> Self {
        match e {
            EncoderArg::Passthrough => EncoderKind::Passthrough,
            EncoderArg::Recurrent => EncoderKind::Recurrent,
            EncoderArg::Attention => EncoderKind::Attention,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Desk,
    Paper,
}

impl PresetArg {
    fn name(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthPreset {
    Desk,
    Smoke,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scenario directory or bundled scenario name.
    #[arg(long, default_value = "desk_33bus")]
    pub scenario: String,
    #[arg(long, value_enum, default_value = "zero")]
    pub policy: PolicyArg,
    /// Checkpoint file, required with `--policy checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; keys override the chosen preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Continue the run in `--out` from its latest checkpoint.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderArg>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Write 0 in the `wall_time_s` column so logs compare bit for bit.
    #[arg(long)]
    pub no_wall_clock: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate a baseline instead of a checkpoint.
    #[arg(long, value_enum)]
    pub policy: Option<PolicyArg>,
    #[arg(long, default_value = "desk_33bus")]
    pub scenario: String,
    #[arg(long, default_value_t = 100)]
    pub episodes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for `episodes.csv` and `summary.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON synthesis settings; keys override the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    pub preset: SynthPreset,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories holding `train_log.csv` and optional simulation traces.
    #[arg(required = true)]
    pub run_dirs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Synth(a) => cmd_synth(&a),
        Command::Report(a) => cmd_report(&a).map(|_| ()),
    }
}

/// Directory of the scenarios shipped with the crate.
pub fn bundled_scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

/// Resolves a scenario argument: an existing path (relative to `base` when
/// given) wins, then a bundled scenario of that name.
pub fn resolve_scenario(name: &str, base: Option<&Path>) -> PathBuf {
    let given = Path::new(name);
    let candidate = match base {
        Some(b) if given.is_relative() => b.join(given),
        _ => given.to_path_buf(),
    };
    if candidate.exists() {
        return candidate;
    }
    let bundled = bundled_scenarios_dir().join(name);
    if bundled.exists() {
        bundled
    } else {
        candidate
    }
}

fn open_scenario(path: &Path) -> Result<ScenarioBundle, CliError> {
    load_scenario(path).map_err(|e| usage(format!("scenario {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// Configuration

/// Everything a training run needs besides the scenario data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    /// Scenario directory or bundled scenario name.
    pub scenario: String,
    pub iterations: usize,
    pub workers: usize,
    pub checkpoint_every: usize,
    pub learner: LearnerConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Option<Self> {
        Some(Self {
            preset: name.to_string(),
            scenario: "desk_33bus".into(),
            iterations: 500,
            workers: 1,
            checkpoint_every: 10,
            learner: LearnerConfig::preset(name)?,
        })
    }
}

fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}

/// Lists keys of `given` that do not survive a round trip through the typed form.
fn unknown_keys(given: &Value, typed: &Value, path: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(t)) = (given, typed) {
        for (k, v) in g {
            let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
            match t.get(k) {
                None => out.push(p),
                Some(tv) => unknown_keys(v, tv, &p, out),
            }
        }
    }
}

/// Overlays a partial JSON document on `base` and rejects unknown keys.
pub fn overlay<T: Serialize + serde::de::DeserializeOwned>(base: &T, patch: &Value) -> Result<T, CliError> {
    let mut merged = serde_json::to_value(base).map_err(usage)?;
    merge(&mut merged, patch);
    let typed: T = serde_json::from_value(merged.clone()).map_err(|e| usage(format!("config: {e}")))?;
    let mut unknown = Vec::new();
    unknown_keys(&merged, &serde_json::to_value(&typed).map_err(usage)?, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(usage(format!("unknown config keys: {}", unknown.join(", "))));
    }
    Ok(typed)
}

fn read_json(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(usage(format!("{}: expected a JSON object", path.display())));
    }
    Ok(v)
}

/// Resolves the run configuration: preset, then the config document, then flags.
/// Returns the config and the directory relative scenario paths resolve against.
pub fn resolve_run_config(args: &TrainArgs) -> Result<(RunConfig, Option<PathBuf>), CliError> {
    let doc = args.config.as_deref().map(read_json).transpose()?;
    let preset = match (args.preset, doc.as_ref().and_then(|d| d.get("preset"))) {
        (Some(p), _) => p.name().to_string(),
        (None, Some(Value::String(s))) => s.clone(),
        (None, Some(other)) => return Err(usage(format!("preset must be a string, got {other}"))),
        (None, None) => "desk".into(),
    };
    let base = RunConfig::preset(&preset).ok_or_else(|| usage(format!("unknown preset {preset:?} (desk, paper)")))?;
    let mut cfg = match &doc {
        Some(d) => {
            let mut d = d.clone();
            if let Value::Object(m) = &mut d {
                m.remove("preset");
            }
            overlay(&base, &d)?
        }
        None => base,
    };
    if let Some(s) = &args.scenario {
        cfg.scenario = s.clone();
    }
    if let Some(s) = args.seed {
        cfg.learner.seed = s;
    }
    if let Some(n) = args.iters {
        cfg.iterations = n;
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(e) = args.encoder {
        cfg.learner.model.encoder.kind = e.into();
    }
    if let Some(c) = args.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    cfg.learner.validate().map_err(usage)?;
    if cfg.workers == 0 {
        return Err(usage("workers must be positive"));
    }
    let base_dir = if args.scenario.is_some() {
        None
    } else {
        args.config.as_ref().and_then(|p| p.parent().map(Path::to_path_buf))
    };
    Ok((cfg, base_dir))
}

// ---------------------------------------------------------------------------
// Run manifest

/// Pins what a training run was started with; written before the first iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    /// Base seed every rollout, shuffle and initialization stream derives from.
    pub seed: u64,
    pub code_version: String,
    /// Resolved scenario directory.
    pub scenario_path: PathBuf,
    pub scenario_hash: String,
    /// Observation scaling constants derived from the scenario.
    pub normalization: Normalization,
    pub started_unix_s: u64,
    pub finished_unix_s: Option<u64>,
}

impl RunManifest {
    /// Hash over everything except the timestamps; stored in checkpoints.
    pub fn content_hash(&self) -> String {
        let doc = serde_json::json!({
            "config": self.config,
            "seed": self.seed,
            "code_version": self.code_version,
            "scenario_hash": self.scenario_hash,
        });
        let digest = Sha256::digest(doc.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let body = serde_json::to_string_pretty(value).map_err(runtime)?;
    std::fs::write(path, body + "\n").map_err(|e| runtime(format!("{}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub manifest: RunManifest,
    pub log: Vec<LogRow>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainSummary, CliError> {
    let manifest_path = args.out.join(MANIFEST_FILE);
    let mut manifest = if args.resume {
        if !manifest_path.exists() {
            return Err(usage(format!("nothing to resume: {} is missing", manifest_path.display())));
        }
        let text = std::fs::read_to_string(&manifest_path).map_err(runtime)?;
        let mut m: RunManifest = serde_json::from_str(&text).map_err(|e| usage(format!("manifest: {e}")))?;
        if let Some(n) = args.iters {
            m.config.iterations = n;
        }
        if let Some(w) = args.workers {
            m.config.workers = w.max(1);
        }
        m
    } else {
        if manifest_path.exists() {
            return Err(usage(format!(
                "{} already holds a run; pass --resume or choose another --out",
                args.out.display()
            )));
        }
        let (config, base) = resolve_run_config(args)?;
        let scenario_path = resolve_scenario(&config.scenario, base.as_deref());
        let bundle = open_scenario(&scenario_path)?;
        let normalization = EvcsEnv::new(&bundle).map_err(usage)?.normalization();
        RunManifest {
            normalization,
            seed: config.learner.seed,
            config,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            scenario_hash: bundle.content_hash(),
            scenario_path,
            started_unix_s: unix_now(),
            finished_unix_s: None,
        }
    };
    let bundle = open_scenario(&manifest.scenario_path)?;
    if bundle.content_hash() != manifest.scenario_hash {
        return Err(usage(format!("scenario {} changed since the run started", manifest.scenario_path.display())));
    }
    if !args.resume {
        std::fs::create_dir_all(&args.out).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
        write_json(&manifest_path, &manifest)?;
    }
    let opts = TrainOptions {
        iterations: manifest.config.iterations,
        workers: manifest.config.workers,
        out_dir: Some(args.out.clone()),
        resume: args.resume,
        checkpoint_every: manifest.config.checkpoint_every,
        manifest_hash: manifest.content_hash(),
        wall_clock: !args.no_wall_clock,
    };
    let outcome = train(&bundle, manifest.config.learner, &opts).map_err(learner_error)?;
    manifest.finished_unix_s = Some(unix_now());
    write_json(&args.out.join(FINAL_MANIFEST_FILE), &manifest)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "iteration {}: reward {:.2} cost {:.2} lambda {:.4} voltage violation {:.3e} dissatisfaction {:.3}",
            last.iteration, last.mean_reward, last.mean_cost, last.lambda, last.volt_violation, last.dissatisfaction
        );
    }
    Ok(TrainSummary { manifest, log: outcome.log })
}

// ---------------------------------------------------------------------------
// simulate / eval

/// One row of a per-episode metrics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub episode: usize,
    pub env_seed: u64,
    pub policy_seed: u64,
    pub energy_cost: f64,
    /// Empty when nothing was delivered.
    pub cycling_overhead: Option<f64>,
    pub avg_voltage_violation: f64,
    pub avg_dissatisfaction: f64,
    pub objective: f64,
    pub total_reward: f64,
    pub total_cost: f64,
    pub departed: usize,
}

/// Mean and sample standard deviation of every reported metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub policy: String,
    pub episodes: usize,
    pub energy_cost_mean: f64,
    pub energy_cost_std: f64,
    pub cycling_overhead_mean: f64,
    pub cycling_overhead_std: f64,
    pub avg_voltage_violation_mean: f64,
    pub avg_voltage_violation_std: f64,
    pub avg_dissatisfaction_mean: f64,
    pub avg_dissatisfaction_std: f64,
    pub objective_mean: f64,
    pub objective_std: f64,
}

impl SummaryRow {
    pub fn of(policy: &str, s: &EvalSummary, episodes: usize) -> Self {
        Self {
            policy: policy.to_string(),
            episodes,
            energy_cost_mean: s.energy_cost.mean,
            energy_cost_std: s.energy_cost.std,
            cycling_overhead_mean: s.cycling_overhead.mean,
            cycling_overhead_std: s.cycling_overhead.std,
            avg_voltage_violation_mean: s.avg_voltage_violation.mean,
            avg_voltage_violation_std: s.avg_voltage_violation.std,
            avg_dissatisfaction_mean: s.avg_dissatisfaction.mean,
            avg_dissatisfaction_std: s.avg_dissatisfaction.std,
            objective_mean: s.objective.mean,
            objective_std: s.objective.std,
        }
    }

    /// Console table in the layout of a results table: one metric per column.
    pub fn table(&self) -> String {
        format!(
            "{:<12} {:>22} {:>22} {:>26} {:>24}\n{:<12} {:>22} {:>22} {:>26} {:>24}",
            "policy",
            "energy cost ($)",
            "cycling overhead (%)",
            "voltage violation (p.u.)",
            "dissatisfaction (kWh/EV)",
            self.policy,
            format!("{:.2} ± {:.2}", self.energy_cost_mean, self.energy_cost_std),
            format!("{:.1} ± {:.1}", self.cycling_overhead_mean, self.cycling_overhead_std),
            format!("{:.3e} ± {:.1e}", self.avg_voltage_violation_mean, self.avg_voltage_violation_std),
            format!("{:.3} ± {:.3}", self.avg_dissatisfaction_mean, self.avg_dissatisfaction_std),
        )
    }
}

fn episode_rows(report: &EvalReport) -> Vec<EpisodeRow> {
    report
        .episodes
        .iter()
        .enumerate()
        .map(|(i, e)| EpisodeRow {
            episode: i,
            env_seed: e.seeds.env,
            policy_seed: e.seeds.policy,
            energy_cost: e.metrics.energy_cost,
            cycling_overhead: e.metrics.cycling_overhead,
            avg_voltage_violation: e.metrics.avg_voltage_violation,
            avg_dissatisfaction: e.metrics.avg_dissatisfaction,
            objective: e.metrics.objective,
            total_reward: e.metrics.total_reward,
            total_cost: e.metrics.total_cost,
            departed: e.metrics.departed,
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let err = |e: &dyn std::fmt::Display| runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(|e| err(&e))?;
    for r in rows {
        w.serialize(r).map_err(|e| err(&e))?;
    }
    w.flush().map_err(|e| err(&e))
}

enum Policy {
    Baseline(Baseline),
    Model(Box<Model>, String),
}

impl Policy {
    fn as_ref(&self) -> PolicyRef<'_> {
        match self {
            Self::Baseline(b) => PolicyRef::Baseline(*b),
            Self::Model(m, _) => PolicyRef::Model(m),
        }
    }

    fn label(&self) -> String {
        match self {
            Self::Baseline(b) => format!("{b:?}").to_lowercase(),
            Self::Model(_, l) => l.clone(),
        }
    }
}

fn pick_policy(policy: Option<PolicyArg>, checkpoint: Option<&Path>, bundle: &ScenarioBundle) -> Result<Policy, CliError> {
    match (policy, checkpoint) {
        (Some(PolicyArg::Zero), None) => Ok(Policy::Baseline(Baseline::Zero)),
        (Some(PolicyArg::Greedy), None) => Ok(Policy::Baseline(Baseline::Greedy)),
        (Some(PolicyArg::Random), None) => Ok(Policy::Baseline(Baseline::Random)),
        (Some(PolicyArg::Checkpoint) | None, Some(path)) => {
            if !path.exists() {
                return Err(usage(format!("checkpoint {} not found", path.display())));
            }
            let model = load_model(bundle, path).map_err(|e| usage(format!("checkpoint {}: {e}", path.display())))?;
            Ok(Policy::Model(Box::new(model), "checkpoint".into()))
        }
        (Some(PolicyArg::Checkpoint) | None, None) => Err(usage("a checkpoint policy needs --checkpoint")),
        (Some(_), Some(_)) => Err(usage("--checkpoint only goes with --policy checkpoint")),
    }
}

fn run_eval(
    env: &EvcsEnv,
    policy: &Policy,
    seed: u64,
    episodes: usize,
    workers: usize,
    traces: bool,
) -> Result<EvalReport, CliError> {
    if episodes == 0 {
        return Err(usage("episodes must be positive"));
    }
    evaluate(env, policy.as_ref(), &eval_seeds(seed, episodes), workers, traces).map_err(learner_error)
}

#[derive(Serialize)]
struct VoltageRow {
    step: usize,
    bus: u32,
    voltage_pu: f64,
}

#[derive(Serialize)]
struct StationRow {
    step: usize,
    evcs: usize,
    p_trade_kw: f64,
    f_td: f64,
    f_dg: f64,
    f_ds: f64,
    f_vt: f64,
}

/// Writes `voltages.csv` and `stations.csv` of one episode into `dir`.
pub fn write_trace(dir: &Path, env: &EvcsEnv, trace: &EpisodeTrace) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let net = env.network();
    let mut volts = Vec::new();
    let mut stations = Vec::new();
    for (t, s) in trace.steps.iter().enumerate() {
        for (i, &v) in s.voltages.iter().enumerate() {
            volts.push(VoltageRow { step: t, bus: net.bus_id(i).0, voltage_pu: v });
        }
        for (k, &p) in s.p_trade_kw.iter().enumerate() {
            let b = &s.breakdown;
            stations.push(StationRow { step: t, evcs: k, p_trade_kw: p, f_td: b.f_td[k], f_dg: b.f_dg[k], f_ds: b.f_ds[k], f_vt: b.f_vt });
        }
    }
    write_csv(&dir.join("voltages.csv"), &volts)?;
    write_csv(&dir.join("stations.csv"), &stations)
}

pub fn episode_dir(out: &Path, episode: usize) -> PathBuf {
    out.join("traces").join(format!("episode_{episode:03}"))
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<(), CliError> {
    let bundle = open_scenario(&resolve_scenario(&args.scenario, None))?;
    let policy = pick_policy(Some(args.policy), args.checkpoint.as_deref(), &bundle)?;
    let mut env = EvcsEnv::new(&bundle).map_err(usage)?;
    env.set_record_voltages(true);
    let report = run_eval(&env, &policy, args.seed, args.episodes, args.workers, true)?;
    std::fs::create_dir_all(&args.out).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
    write_csv(&args.out.join("metrics.csv"), &episode_rows(&report))?;
    for (i, ep) in report.episodes.iter().enumerate() {
        write_trace(&episode_dir(&args.out, i), &env, ep.trace.as_ref().expect("traces requested"))?;
    }
    println!("{}", SummaryRow::of(&policy.label(), &report.summary, args.episodes).table());
    Ok(())
}

pub fn cmd_eval(args: &EvalArgs) -> Result<SummaryRow, CliError> {
    let bundle = open_scenario(&resolve_scenario(&args.scenario, None))?;
    let policy = pick_policy(args.policy, args.checkpoint.as_deref(), &bundle)?;
    let env = EvcsEnv::new(&bundle).map_err(usage)?;
    let report = run_eval(&env, &policy, args.seed, args.episodes, args.workers, false)?;
    let summary = SummaryRow::of(&policy.label(), &report.summary, args.episodes);
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
        write_csv(&out.join("episodes.csv"), &episode_rows(&report))?;
        write_csv(&out.join("summary.csv"), std::slice::from_ref(&summary))?;
    }
    println!("{}", summary.table());
    Ok(summary)
}

// ---------------------------------------------------------------------------
// synth

pub fn cmd_synth(args: &SynthArgs) -> Result<(), CliError> {
    let base = match args.preset {
        SynthPreset::Desk => SynthesisSpec::default(),
        SynthPreset::Smoke => SynthesisSpec::smoke(),
    };
    let mut spec = match &args.config {
        Some(p) => overlay(&base, &read_json(p)?)?,
        None => base,
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let bundle = synthesize(&spec).map_err(usage)?;
    let report = validate_feasibility(&bundle);
    if !report.flagged.is_empty() {
        log::warn!("{} sessions cannot reach their target energy", report.flagged.len());
    }
    bundle.write(&args.out).map_err(runtime)?;
    println!("{} sessions written to {} (sha256 {})", bundle.sessions.len(), args.out.display(), bundle.content_hash());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

pub const CURVES_FILE: &str = "learning_curves.csv";
const CURVE_COLUMNS: [&str; 8] =
    ["mean_reward", "mean_cost", "lambda", "actor_loss", "critic_r_loss", "critic_c_loss", "volt_violation", "dissatisfaction"];

fn curve_value(r: &LogRow, col: &str) -> f64 {
    match col {
        "mean_reward" => r.mean_reward,
        "mean_cost" => r.mean_cost,
        "lambda" => r.lambda,
        "actor_loss" => r.actor_loss,
        "critic_r_loss" => r.critic_r_loss,
        "critic_c_loss" => r.critic_c_loss,
        "volt_violation" => r.volt_violation,
        "dissatisfaction" => r.dissatisfaction,
        _ => unreachable!("unknown curve column {col}"),
    }
}

/// What happened to each run directory while building a report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportOutcome {
    /// Labels of runs whose logs were merged.
    pub runs: Vec<String>,
    /// Missing or unreadable logs.
    pub problems: Vec<String>,
    /// Rows dropped for holding non-finite values, per run label.
    pub dropped_rows: BTreeMap<String, usize>,
    pub files: Vec<PathBuf>,
}

/// Reads a training log row by row; unparsable rows count as corrupt.
fn read_log_lenient(path: &Path) -> Result<(Vec<LogRow>, usize), String> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| e.to_string())?;
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    if !headers.iter().any(|h| h == "iteration") {
        return Err("no iteration column".into());
    }
    let mut rows = Vec::new();
    let mut bad = 0;
    for rec in rdr.records() {
        match rec.map_err(|e| e.to_string()).and_then(|r| r.deserialize::<LogRow>(Some(&headers)).map_err(|e| e.to_string())) {
            Ok(r) => rows.push(r),
            Err(_) => bad += 1,
        }
    }
    Ok((rows, bad))
}

fn run_label(dir: &Path, taken: &BTreeSet<String>) -> String {
    let stem = dir
        .canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| dir.display().to_string());
    let mut label = stem.clone();
    let mut i = 2;
    while taken.contains(&label) {
        label = format!("{stem}_{i}");
        i += 1;
    }
    label
}

pub fn cmd_report(args: &ReportArgs) -> Result<ReportOutcome, CliError> {
    if args.run_dirs.is_empty() {
        return Err(usage("report needs at least one run directory"));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
    let mut outcome = ReportOutcome::default();
    let mut taken = BTreeSet::new();
    let mut runs: Vec<(String, Vec<LogRow>)> = Vec::new();
    let mut voltage_runs: Vec<(String, PathBuf)> = Vec::new();
    for dir in &args.run_dirs {
        let label = run_label(dir, &taken);
        taken.insert(label.clone());
        if dir.join("traces").is_dir() {
            voltage_runs.push((label.clone(), dir.join("traces")));
        }
        let path = dir.join(LOG_FILE);
        if !path.exists() {
            if !voltage_runs.iter().any(|(l, _)| *l == label) {
                log::warn!("{}: no training log", dir.display());
                outcome.problems.push(format!("{}: missing {LOG_FILE}", dir.display()));
            }
            continue;
        }
        match read_log_lenient(&path) {
            Err(e) => {
                log::warn!("{}: unreadable log: {e}", path.display());
                outcome.problems.push(format!("{}: {e}", path.display()));
            }
            Ok((rows, corrupt)) => {
                if corrupt > 0 {
                    log::warn!("{}: {corrupt} unparsable rows skipped", path.display());
                    outcome.problems.push(format!("{}: {corrupt} unparsable rows", path.display()));
                }
                let total = rows.len();
                let rows: Vec<LogRow> = rows.into_iter().filter(LogRow::is_finite).collect();
                if rows.len() < total {
                    log::warn!("{}: {} rows with non-finite values excluded", path.display(), total - rows.len());
                    outcome.dropped_rows.insert(label.clone(), total - rows.len());
                }
                runs.push((label, rows));
            }
        }
    }
    for p in &outcome.problems {
        eprintln!("warning: {p}");
    }
    for (label, n) in &outcome.dropped_rows {
        eprintln!("warning: {label}: {n} rows with non-finite values excluded");
    }

    let merged = merged_curves(&runs);
    let curves_path = args.out.join(CURVES_FILE);
    std::fs::write(&curves_path, merged).map_err(runtime)?;
    outcome.files.push(curves_path);
    for col in ["mean_reward", "mean_cost", "lambda", "volt_violation", "dissatisfaction"] {
        let series: Vec<(String, Vec<(f64, f64)>)> = runs
            .iter()
            .map(|(l, rows)| (l.clone(), rows.iter().map(|r| (r.iteration as f64, curve_value(r, col))).collect()))
            .collect();
        let path = args.out.join(format!("curve_{col}.svg"));
        std::fs::write(&path, crate::plot::line_chart(col, "iteration", col, &series)).map_err(runtime)?;
        outcome.files.push(path);
    }
    for (label, traces) in &voltage_runs {
        match voltage_profile(traces) {
            Ok(stats) if !stats.is_empty() => {
                let pick = |f: fn(&(u32, f64, f64, f64)) -> f64| stats.iter().map(|s| (s.0 as f64, f(s))).collect::<Vec<_>>();
                let series =
                    vec![("min".to_string(), pick(|s| s.1)), ("mean".to_string(), pick(|s| s.2)), ("max".to_string(), pick(|s| s.3))];
                let path = args.out.join(format!("voltage_{label}.svg"));
                let title = format!("bus voltage, {label}");
                std::fs::write(&path, crate::plot::line_chart(&title, "bus", "voltage (p.u.)", &series)).map_err(runtime)?;
                outcome.files.push(path);
            }
            Ok(_) => {}
            Err(e) => {
                eprintln!("warning: {label}: voltage traces unreadable: {e}");
                outcome.problems.push(format!("{label}: {e}"));
            }
        }
    }
    outcome.runs = runs.into_iter().map(|(l, _)| l).collect();
    if outcome.runs.is_empty() && voltage_runs.is_empty() {
        return Err(runtime("no readable run in the given directories"));
    }
    Ok(outcome)
}

fn merged_curves(runs: &[(String, Vec<LogRow>)]) -> String {
    let iterations: BTreeSet<usize> = runs.iter().flat_map(|(_, rows)| rows.iter().map(|r| r.iteration)).collect();
    let mut out = String::from("iteration");
    for (label, _) in runs {
        for col in CURVE_COLUMNS {
            out.push_str(&format!(",{label}.{col}"));
        }
    }
    out.push('\n');
    let index: Vec<BTreeMap<usize, &LogRow>> =
        runs.iter().map(|(_, rows)| rows.iter().map(|r| (r.iteration, r)).collect()).collect();
    for it in iterations {
        out.push_str(&it.to_string());
        for rows in &index {
            for col in CURVE_COLUMNS {
                out.push(',');
                if let Some(r) = rows.get(&it) {
                    out.push_str(&curve_value(r, col).to_string());
                }
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Deserialize)]
struct VoltageIn {
    #[allow(dead_code)]
    step: usize,
    bus: u32,
    voltage_pu: f64,
}

/// Per-bus (min, mean, max) voltage over every episode under `traces`.
fn voltage_profile(traces: &Path) -> Result<Vec<(u32, f64, f64, f64)>, String> {
    let mut acc: BTreeMap<u32, (f64, f64, f64, usize)> = BTreeMap::new();
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(traces)
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("voltages.csv").exists())
        .collect();
    dirs.sort();
    for d in dirs {
        let mut rdr = csv::Reader::from_path(d.join("voltages.csv")).map_err(|e| e.to_string())?;
        for row in rdr.deserialize::<VoltageIn>() {
            let r = row.map_err(|e| e.to_string())?;
            let e = acc.entry(r.bus).or_insert((f64::INFINITY, 0.0, f64::NEG_INFINITY, 0));
            e.0 = e.0.min(r.voltage_pu);
            e.1 += r.voltage_pu;
            e.2 = e.2.max(r.voltage_pu);
            e.3 += 1;
        }
    }
    Ok(acc.into_iter().map(|(b, (lo, sum, hi, n))| (b, lo, sum / n as f64, hi)).collect())
}

/// Initializes logging from `VOLTGRID_LOG` (default `info`).
pub fn init_logging() {
    let env = env_logger::Env::new().filter_or(LOG_ENV, "info");
    let _ = env_logger::Builder::from_env(env).format_timestamp(None).try_init();
}
