//! Command-line front end. Every subcommand accepts the same flat set of
//! options; a TOML file given with `--config` supplies defaults and explicit
//! flags override it. Results go to CSV files with a `#` header echoing the
//! configuration, plus one metadata file per run.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::analysis::{
    fit_points, monte_carlo_variance, phom_plateau, Accounting, EstimatorSpec, Metric, MonteCarloConfig, PlateauPoint,
    VariancePoint, DEFAULT_BUDGETS,
};
use crate::error::Error;
use crate::estimators::{
    bayes_direct_cc, bayes_single_checkpoints, default_warmup, phom, ramsey_data, BayesConfig, DirectBayesConfig,
    DirectSchedule, EstimateResult, MarginalBayes, PhomConfig, PhomVariant, RamseyConfig, Selection,
};
use crate::models::{build_model, oracle_deviation, ModelKind, ModelSpec};
use crate::phase::PosteriorGrid1D;
use crate::sim::{spawn_rng, HiddenTruth, Lab, SamplingMode, PRNG_ALGORITHM};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "STABPHASE_OUT_DIR";
const DEFAULT_OUT_DIR: &str = "stabphase-out";
const ORACLE_TOLERANCE: f64 = 1e-10;
const REDUCTION: &str = "per-trial scores collected in trial order, summed sequentially";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Run(#[from] Error),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Run(Error::InvalidArgument(_)) => 2,
            CliError::Io { .. } => 3,
            CliError::Run(_) | CliError::Check(_) => 1,
        }
    }
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

#[derive(Debug, Parser)]
#[command(name = "stabphase", version, about = "Phase estimation on stabilizer code states")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
}

#[derive(Debug, Subcommand)]
pub enum CliCommand {
    /// Single-qubit Ramsey scan with a cosine fit.
    Ramsey(Settings),
    /// Single-qubit adaptive Bayes.
    Bayes1q(Settings),
    /// Iterative PHOM.
    Phom(Settings),
    /// Constant-cosine PHOM.
    Ccphom(Settings),
    /// Two-plaquette Bayes over the joint (φ, h) posterior.
    BayesDirect(Settings),
    /// Marginal-likelihood Bayes.
    BayesMarginal(Settings),
    /// Variance curves of several methods on one model.
    Compare(Settings),
    /// Statevector against likelihood tables.
    OracleCheck(Settings),
}

impl CliCommand {
    fn split(self) -> (Command, Settings) {
        match self {
            CliCommand::Ramsey(s) => (Command::Ramsey, s),
            CliCommand::Bayes1q(s) => (Command::Bayes1q, s),
            CliCommand::Phom(s) => (Command::Phom, s),
            CliCommand::Ccphom(s) => (Command::Ccphom, s),
            CliCommand::BayesDirect(s) => (Command::BayesDirect, s),
            CliCommand::BayesMarginal(s) => (Command::BayesMarginal, s),
            CliCommand::Compare(s) => (Command::Compare, s),
            CliCommand::OracleCheck(s) => (Command::OracleCheck, s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Ramsey,
    Bayes1q,
    Phom,
    Ccphom,
    BayesDirect,
    BayesMarginal,
    Compare,
    OracleCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ramsey => "ramsey",
            Command::Bayes1q => "bayes1q",
            Command::Phom => "phom",
            Command::Ccphom => "ccphom",
            Command::BayesDirect => "bayes-direct",
            Command::BayesMarginal => "bayes-marginal",
            Command::Compare => "compare",
            Command::OracleCheck => "oracle-check",
        }
    }

    fn is_method(self) -> bool {
        !matches!(self, Command::Compare | Command::OracleCheck)
    }

    fn single_qubit(self) -> bool {
        matches!(self, Command::Ramsey | Command::Bayes1q)
    }
}

impl FromStr for Command {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        [
            Command::Ramsey,
            Command::Bayes1q,
            Command::Phom,
            Command::Ccphom,
            Command::BayesDirect,
            Command::BayesMarginal,
            Command::Compare,
            Command::OracleCheck,
        ]
        .into_iter()
        .find(|c| c.name() == s)
        .ok_or_else(|| format!("unknown method `{s}`"))
    }
}

/// Options shared by all subcommands. Config-file keys are the field names
/// (`grid_bins`), flags the kebab-case forms (`--grid-bins`).
#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    /// Flat TOML file with defaults for any option below.
    #[arg(long, value_name = "FILE")]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// single_qubit, two_plaquette or three_plaquette.
    #[arg(long)]
    pub model: Option<String>,
    /// Master seed; trial i uses stream i.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Monte Carlo trials per budget.
    #[arg(long)]
    pub trials: Option<u64>,
    /// Budgets n of a variance curve, increasing.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Option<Vec<u64>>,
    /// Preparations of a single run.
    #[arg(long)]
    pub budget: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
    /// joint or independent.
    #[arg(long)]
    pub sampling: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// True phases of a single run.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub phi: Option<Vec<f64>>,
    #[arg(long)]
    pub grid_bins: Option<usize>,
    /// Leading preparations with random settings.
    #[arg(long)]
    pub warmup: Option<u64>,
    /// adaptive or random.
    #[arg(long)]
    pub selection: Option<String>,
    /// Points per scan (M).
    #[arg(long)]
    pub scan_points: Option<usize>,
    /// PHOM iteration counts.
    #[arg(long, value_delimiter = ',')]
    pub iterations: Option<Vec<usize>>,
    /// Fixed measurements per scan point; switches phom to the iteration study.
    #[arg(long)]
    pub mpp: Option<u64>,
    #[arg(long)]
    pub phase_bins: Option<usize>,
    #[arg(long)]
    pub offset_bins: Option<usize>,
    /// scan or adaptive.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Steps at which a single run writes its posterior.
    #[arg(long, value_delimiter = ',')]
    pub dump_posterior: Option<Vec<u64>>,
    /// Methods run by compare.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    /// Random (φ, θ) draws for oracle-check.
    #[arg(long)]
    pub samples: Option<usize>,
}

macro_rules! overlay {
    ($top:ident, $base:ident; $($f:ident),*) => {
        Settings { config: $top.config, $($f: $top.$f.or($base.$f)),* }
    };
}

impl Settings {
    /// Values set here win; unset ones fall back to `base`.
    pub fn over(self, base: Settings) -> Settings {
        overlay!(self, base; model, seed, trials, budgets, budget, workers, sampling, out, phi, grid_bins,
            warmup, selection, scan_points, iterations, mpp, phase_bins, offset_bins, schedule,
            dump_posterior, methods, samples)
    }
}

/// A validated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub model: ModelKind,
    pub master_seed: u64,
    pub trials: u64,
    pub budgets: Vec<u64>,
    pub budget: u64,
    pub workers: usize,
    pub sampling: SamplingMode,
    pub out_dir: PathBuf,
    pub phi: Option<Vec<f64>>,
    pub grid_bins: usize,
    pub warmup: u64,
    pub selection: Selection,
    /// Explicit M; each method has its own default otherwise.
    pub scan_points: Option<usize>,
    pub iterations: Vec<usize>,
    pub mpp: Option<u64>,
    pub direct: DirectBayesConfig,
    pub dump_posterior: Vec<u64>,
    pub methods: Vec<Command>,
    pub samples: usize,
}

/// What a run wrote.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
    pub metadata: PathBuf,
    pub summary: Vec<String>,
}

#[derive(Debug, Serialize)]
struct RunMetadata {
    command: String,
    software_version: String,
    prng: String,
    reduction: String,
    wall_clock_seconds: f64,
    config: Table,
    outputs: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    fits: Vec<FitRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    oracle: Vec<OracleRecord>,
    /// Qubit whose angle plain phom scans, per combination.
    #[serde(skip_serializing_if = "Option::is_none")]
    phom_scan_angles: Option<Table>,
}

#[derive(Debug, Clone, Serialize)]
struct FitRecord {
    method: String,
    fitted_c: f64,
    fitted_c_per_phase: f64,
    fit_residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    fitted_c_reported: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
struct OracleRecord {
    model: String,
    samples: usize,
    max_deviation: f64,
}

fn parse_field<T: FromStr>(field: &str, raw: Option<&str>, default: T) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    raw.map_or(Ok(default), |s| s.parse().map_err(|e| config_err(field, e)))
}

fn default_model(command: Command) -> ModelKind {
    if command.single_qubit() {
        ModelKind::SingleQubit
    } else {
        ModelKind::TwoPlaquette
    }
}

fn default_methods(model: ModelKind) -> Vec<Command> {
    match model {
        ModelKind::SingleQubit => vec![Command::Ramsey, Command::Bayes1q],
        ModelKind::TwoPlaquette => vec![Command::Ccphom, Command::BayesDirect, Command::BayesMarginal],
        ModelKind::ThreePlaquette => vec![Command::Ccphom, Command::BayesMarginal],
    }
}

fn check_method_model(field: &str, method: Command, model: ModelKind) -> Result<(), CliError> {
    let ok = match method {
        Command::Ramsey | Command::Bayes1q => model == ModelKind::SingleQubit,
        Command::BayesDirect => model == ModelKind::TwoPlaquette,
        Command::Phom | Command::Ccphom | Command::BayesMarginal => model.is_plaquette(),
        Command::Compare | Command::OracleCheck => true,
    };
    if ok {
        Ok(())
    } else {
        Err(config_err(field, format!("{} does not apply to {model}", method.name())))
    }
}

fn positive<T: PartialOrd + Default + std::fmt::Display>(field: &str, v: T) -> Result<T, CliError> {
    if v > T::default() {
        Ok(v)
    } else {
        Err(config_err(field, format!("must be positive, got {v}")))
    }
}

fn increasing(field: &str, v: &[u64]) -> Result<(), CliError> {
    if v.is_empty() || v[0] == 0 || v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_err(field, "must be positive and strictly increasing"));
    }
    Ok(())
}

/// Reads the optional config file under `flags` and fills defaults.
pub fn parse_config(command: Command, flags: Settings) -> Result<RunConfig, CliError> {
    let merged = match &flags.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| CliError::Io {
                path: path.clone(),
                source,
            })?;
            let file: Settings =
                toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            flags.over(file)
        }
        None => flags,
    };
    resolve(command, merged)
}

/// Applies defaults and validates a merged settings block.
pub fn resolve(command: Command, s: Settings) -> Result<RunConfig, CliError> {
    let model = parse_field("model", s.model.as_deref(), default_model(command))?;
    if command.is_method() {
        check_method_model("model", command, model)?;
    }
    let methods = match &s.methods {
        Some(list) => list
            .iter()
            .map(|m| m.parse::<Command>().map_err(|e| config_err("methods", e)))
            .collect::<Result<Vec<_>, _>>()?,
        None => default_methods(model),
    };
    if command == Command::Compare {
        if methods.is_empty() {
            return Err(config_err("methods", "empty list"));
        }
        for &m in &methods {
            if !m.is_method() {
                return Err(config_err("methods", format!("{} is not an estimator", m.name())));
            }
            check_method_model("methods", m, model)?;
        }
    }
    let budgets = s.budgets.clone().unwrap_or_else(|| DEFAULT_BUDGETS.to_vec());
    increasing("budgets", &budgets)?;
    let budget = positive("budget", s.budget.unwrap_or(1000))?;
    let trials = positive("trials", s.trials.unwrap_or(1000))?;
    let grid_bins = s.grid_bins.unwrap_or(2048);
    if grid_bins < 8 {
        return Err(config_err("grid_bins", format!("needs at least 8 bins, got {grid_bins}")));
    }
    let warmup = s.warmup.unwrap_or_else(|| default_warmup(model));
    let selection = parse_field("selection", s.selection.as_deref(), Selection::Adaptive)?;
    let sampling = parse_field("sampling", s.sampling.as_deref(), SamplingMode::Joint)?;
    let scan_points = s.scan_points.map(|m| positive("scan_points", m)).transpose()?;
    let mpp = s.mpp.map(|m| positive("mpp", m)).transpose()?;
    let iterations = match (&s.iterations, mpp) {
        (Some(i), _) => i.clone(),
        (None, Some(_)) => vec![1, 2, 3, 4],
        (None, None) => vec![4],
    };
    if iterations.is_empty() || iterations.contains(&0) {
        return Err(config_err("iterations", "must be positive counts"));
    }
    if mpp.is_none() && iterations.len() > 1 && (command == Command::Phom || methods.contains(&Command::Phom)) {
        return Err(config_err("iterations", "several counts need --mpp (the iteration study)"));
    }
    let defaults = DirectBayesConfig::default();
    let direct = DirectBayesConfig {
        phase_bins: s.phase_bins.unwrap_or(defaults.phase_bins),
        offset_bins: s.offset_bins.unwrap_or(defaults.offset_bins),
        schedule: parse_field("schedule", s.schedule.as_deref(), DirectSchedule::Scan)?,
        scan_points: scan_points.unwrap_or(defaults.scan_points),
        warmup: s.warmup.unwrap_or(defaults.warmup),
        ..defaults
    };
    if direct.phase_bins < 8 || direct.offset_bins < 2 {
        return Err(config_err("phase_bins", "direct grid needs at least 8 phase and 2 offset bins"));
    }
    let dump_posterior = s.dump_posterior.clone().unwrap_or_default();
    if !dump_posterior.is_empty() {
        increasing("dump_posterior", &dump_posterior)?;
        if *dump_posterior.last().expect("non-empty") > budget {
            return Err(config_err("dump_posterior", format!("steps must not exceed budget {budget}")));
        }
    }
    let phi = s.phi.clone();
    if let Some(p) = &phi {
        let want = build_model(model)?.num_phases;
        if p.len() != want {
            return Err(config_err("phi", format!("{model} has {want} phases, got {}", p.len())));
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(config_err("phi", "values must be finite"));
        }
    }
    let is_bayes = |c: &Command| matches!(c, Command::Bayes1q | Command::BayesMarginal);
    let uses_bayes = is_bayes(&command) || (command == Command::Compare && methods.iter().any(is_bayes));
    let single = command != Command::Compare && (phi.is_some() || !dump_posterior.is_empty());
    let limit = if single { budget } else { *budgets.last().expect("non-empty") };
    if uses_bayes && warmup > limit {
        return Err(config_err("warmup", format!("{warmup} exceeds budget {limit}")));
    }
    let out_dir = s
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    Ok(RunConfig {
        command,
        model,
        master_seed: s.seed.unwrap_or(1),
        trials,
        budgets,
        budget,
        workers: s.workers.unwrap_or(0),
        sampling,
        out_dir,
        phi,
        grid_bins,
        warmup,
        selection,
        scan_points,
        iterations,
        mpp,
        direct,
        dump_posterior,
        methods,
        samples: positive("samples", s.samples.unwrap_or(100))?,
    })
}

impl RunConfig {
    /// Single run with a fixed truth instead of a variance curve.
    pub fn single_run(&self) -> bool {
        self.phi.is_some() || !self.dump_posterior.is_empty()
    }

    fn methods_run(&self) -> Vec<Command> {
        if self.command == Command::Compare {
            self.methods.clone()
        } else {
            vec![self.command]
        }
    }

    fn scan_points_for(&self, method: Command) -> usize {
        self.scan_points.unwrap_or(match method {
            Command::Ramsey | Command::BayesDirect => 16,
            _ if self.model == ModelKind::ThreePlaquette => 10,
            _ => 16,
        })
    }

    fn phom_iterations(&self, method: Command) -> usize {
        if method == Command::Ccphom {
            1
        } else {
            self.iterations[0]
        }
    }

    fn bayes(&self, budget: u64) -> BayesConfig {
        BayesConfig {
            grid_bins: self.grid_bins,
            budget,
            selection: self.selection,
            warmup: self.warmup,
        }
    }

    pub fn spec(&self, method: Command) -> Result<EstimatorSpec, CliError> {
        let m = self.scan_points_for(method);
        Ok(match method {
            Command::Ramsey => EstimatorSpec::Ramsey { scan_points: m },
            Command::Bayes1q => EstimatorSpec::BayesSingle(self.bayes(self.budget)),
            Command::BayesMarginal => EstimatorSpec::BayesMarginal(self.bayes(self.budget)),
            Command::Phom | Command::Ccphom => EstimatorSpec::Phom {
                variant: if method == Command::Phom {
                    PhomVariant::Plain
                } else {
                    PhomVariant::ConstantCosine
                },
                iterations: self.phom_iterations(method),
                scan_points: m,
            },
            Command::BayesDirect => EstimatorSpec::BayesDirect(self.direct.clone()),
            Command::Compare | Command::OracleCheck => {
                return Err(config_err("methods", format!("{} is not an estimator", method.name())))
            }
        })
    }

    /// The settings that determine the results, for headers and metadata.
    pub fn echo(&self) -> Table {
        let mut t = Table::new();
        let mut put = |k: &str, v: Value| {
            t.insert(k.to_string(), v);
        };
        let ints = |v: &[u64]| Value::Array(v.iter().map(|&x| Value::Integer(x as i64)).collect());
        put("command", self.command.name().into());
        put("seed", Value::Integer(self.master_seed as i64));
        if self.command == Command::OracleCheck {
            put("samples", Value::Integer(self.samples as i64));
            return t;
        }
        put("model", self.model.name().into());
        if self.model.is_plaquette() {
            put("sampling", self.sampling.name().into());
        }
        if self.single_run() && self.command != Command::Compare {
            put("budget", Value::Integer(self.budget as i64));
            if let Some(p) = &self.phi {
                put("phi", Value::Array(p.iter().map(|&x| Value::Float(x)).collect()));
            }
            if !self.dump_posterior.is_empty() {
                put("dump_posterior", ints(&self.dump_posterior));
            }
        } else {
            put("trials", Value::Integer(self.trials as i64));
            if !self.plateau_mode() {
                put("budgets", ints(&self.budgets));
            }
        }
        let methods = self.methods_run();
        if self.command == Command::Compare {
            put("methods", Value::Array(methods.iter().map(|m| m.name().into()).collect()));
        }
        for &m in &methods {
            match m {
                Command::Bayes1q | Command::BayesMarginal => {
                    put("grid_bins", Value::Integer(self.grid_bins as i64));
                    put("warmup", Value::Integer(self.warmup as i64));
                    put("selection", self.selection.name().into());
                }
                Command::BayesDirect => {
                    put("phase_bins", Value::Integer(self.direct.phase_bins as i64));
                    put("offset_bins", Value::Integer(self.direct.offset_bins as i64));
                    put("schedule", self.direct.schedule.name().into());
                    put("direct_warmup", Value::Integer(self.direct.warmup as i64));
                }
                Command::Phom => {
                    put("iterations", Value::Array(self.iterations.iter().map(|&i| Value::Integer(i as i64)).collect()));
                    if let Some(mpp) = self.mpp {
                        put("mpp", Value::Integer(mpp as i64));
                    }
                }
                _ => {}
            }
            if matches!(m, Command::Ramsey | Command::Phom | Command::Ccphom | Command::BayesDirect) {
                put(&format!("{}_scan_points", m.name().replace('-', "_")), Value::Integer(self.scan_points_for(m) as i64));
            }
        }
        t
    }

    fn plateau_mode(&self) -> bool {
        self.mpp.is_some() && self.methods_run().contains(&Command::Phom)
    }
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let (command, flags) = cli.command.split();
    let result = parse_config(command, flags).and_then(|cfg| run(&cfg));
    match result {
        Ok(out) => {
            for line in &out.summary {
                println!("{line}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Executes a validated run and writes its outputs.
pub fn run(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let started = Instant::now();
    fs::create_dir_all(&cfg.out_dir).map_err(|source| CliError::Io {
        path: cfg.out_dir.clone(),
        source,
    })?;
    let model = build_model(cfg.model)?;
    let mut out = Outputs::new(cfg);
    if cfg.command == Command::OracleCheck {
        oracle_check(cfg, &mut out)?;
    } else if cfg.single_run() && cfg.command != Command::Compare {
        single_run(cfg, &model, &mut out)?;
    } else {
        for method in cfg.methods_run() {
            if method == Command::Phom && cfg.mpp.is_some() {
                plateau(cfg, &model, &mut out)?;
            } else {
                curve(cfg, &model, method, &mut out)?;
            }
        }
    }
    out.finish(cfg, started.elapsed().as_secs_f64())
}

fn scan_angle_table(cfg: &RunConfig) -> Result<Option<Table>, CliError> {
    if !cfg.methods_run().contains(&Command::Phom) {
        return Ok(None);
    }
    let model = build_model(cfg.model).map_err(CliError::Run)?;
    let table = model
        .combos
        .iter()
        .map(|c| (c.name.to_string(), toml::Value::String(format!("qubit {}", c.scan_qubit))))
        .collect();
    Ok(Some(table))
}

struct Outputs {
    header: String,
    files: Vec<PathBuf>,
    fits: Vec<FitRecord>,
    oracle: Vec<OracleRecord>,
    summary: Vec<String>,
}

impl Outputs {
    fn new(cfg: &RunConfig) -> Self {
        let mut header = String::new();
        let _ = writeln!(header, "# stabphase {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(header, "# prng = {PRNG_ALGORITHM}");
        let echo = toml::to_string(&cfg.echo()).unwrap_or_default();
        for line in echo.lines() {
            let _ = writeln!(header, "# {line}");
        }
        Outputs {
            header,
            files: Vec::new(),
            fits: Vec::new(),
            oracle: Vec::new(),
            summary: Vec::new(),
        }
    }

    fn csv(&mut self, cfg: &RunConfig, name: &str, extra: &str, columns: &str, rows: &[String]) -> Result<(), CliError> {
        let mut text = self.header.clone();
        text.push_str(extra);
        text.push_str(columns);
        text.push('\n');
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        let path = cfg.out_dir.join(name);
        write_file(&path, &text)?;
        self.summary.push(format!("wrote {}", path.display()));
        self.files.push(path);
        Ok(())
    }

    fn finish(mut self, cfg: &RunConfig, seconds: f64) -> Result<RunOutput, CliError> {
        let meta = RunMetadata {
            command: cfg.command.name().into(),
            software_version: env!("CARGO_PKG_VERSION").into(),
            prng: PRNG_ALGORITHM.into(),
            reduction: REDUCTION.into(),
            wall_clock_seconds: seconds,
            config: cfg.echo(),
            outputs: self
                .files
                .iter()
                .filter_map(|p| p.file_name().map(|f| f.to_string_lossy().into_owned()))
                .collect(),
            fits: self.fits,
            oracle: self.oracle,
            phom_scan_angles: scan_angle_table(cfg)?,
        };
        let text = toml::to_string(&meta).map_err(|e| CliError::Check(format!("metadata: {e}")))?;
        let path = cfg.out_dir.join(format!("{}_metadata.toml", cfg.command.name()));
        write_file(&path, &text)?;
        self.summary.push(format!("wrote {}", path.display()));
        Ok(RunOutput {
            files: self.files,
            metadata: path,
            summary: self.summary,
        })
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn mc(cfg: &RunConfig) -> MonteCarloConfig {
    MonteCarloConfig {
        trials: cfg.trials,
        master_seed: cfg.master_seed,
        workers: cfg.workers,
        sampling: cfg.sampling,
    }
}

fn curve_row(p: &VariancePoint) -> String {
    format!("{},{},{},{},{}", p.n, p.sigma2, p.stderr, p.trials, p.diffuse_count)
}

fn curve(cfg: &RunConfig, model: &ModelSpec, method: Command, out: &mut Outputs) -> Result<(), CliError> {
    let spec = cfg.spec(method)?;
    let points = monte_carlo_variance(&spec, model, &cfg.budgets, &mc(cfg))?;
    let rows: Vec<String> = points.iter().map(curve_row).collect();
    let name = format!("{}_{}.csv", method.name(), cfg.model.name());
    out.csv(cfg, &name, &format!("# method = {}\n", method.name()), "n,sigma2,stderr,trials,diffuse_count", &rows)?;
    if points.len() >= 4 {
        let total = fit_points(&points, Accounting::Total, Metric::SquaredError)?;
        let per_phase = fit_points(&points, Accounting::PerPhase, Metric::SquaredError)?;
        let reported = if points.iter().all(|p| p.reported_sigma2.is_finite() && p.reported_sigma2 > 0.0) {
            Some(fit_points(&points, Accounting::Total, Metric::Reported)?.fitted_c)
        } else {
            None
        };
        out.summary.push(format!(
            "{}: sigma2 ~ {:.3}/n (per-phase accounting {:.3}/n)",
            method.name(),
            total.fitted_c,
            per_phase.fitted_c
        ));
        out.fits.push(FitRecord {
            method: method.name().into(),
            fitted_c: total.fitted_c,
            fitted_c_per_phase: per_phase.fitted_c,
            fit_residual: total.fit_residual,
            fitted_c_reported: reported,
        });
    }
    Ok(())
}

fn plateau(cfg: &RunConfig, model: &ModelSpec, out: &mut Outputs) -> Result<(), CliError> {
    let mpp = cfg.mpp.expect("plateau needs mpp");
    let points: Vec<PlateauPoint> =
        phom_plateau(model, &cfg.iterations, cfg.scan_points_for(Command::Phom), mpp, &mc(cfg))?;
    let rows: Vec<String> = points
        .iter()
        .map(|p| format!("{},{}", p.iterations, curve_row(&p.point)))
        .collect();
    let name = format!("phom_plateau_{}.csv", cfg.model.name());
    out.csv(
        cfg,
        &name,
        "# method = phom\n",
        "iterations,n,sigma2,stderr,trials,diffuse_count",
        &rows,
    )
}

fn single_lab<'m>(cfg: &RunConfig, model: &'m ModelSpec) -> Result<Lab<'m>, CliError> {
    let mut rng = spawn_rng(cfg.master_seed, 0);
    let truth = match &cfg.phi {
        Some(p) => HiddenTruth::new(model, p)?,
        None => HiddenTruth::draw_uniform(model, &mut rng),
    };
    Ok(Lab::new(model, truth, rng).with_sampling(cfg.sampling))
}

fn density_rows(grid: &PosteriorGrid1D) -> Vec<String> {
    grid.points()
        .iter()
        .zip(grid.density())
        .map(|(x, d)| format!("{x},{d}"))
        .collect()
}

fn single_run(cfg: &RunConfig, model: &ModelSpec, out: &mut Outputs) -> Result<(), CliError> {
    let mut lab = single_lab(cfg, model)?;
    let truth: Vec<f64> = lab.reveal_truth().values();
    let method = cfg.command;
    match method {
        Command::Ramsey => {
            let rc = RamseyConfig::for_budget(cfg.scan_points_for(method), cfg.budget);
            let (scan, ys) = ramsey_data(&mut lab, &rc)?;
            let shots = rc.shots_per_point as f64;
            let rows: Vec<String> = scan
                .iter()
                .zip(&ys)
                .map(|(t, y)| format!("{t},{y},{}", ((1.0 - y * y).max(0.0) / shots).sqrt()))
                .collect();
            out.csv(cfg, "ramsey_scan.csv", "", "theta,expectation,stderr", &rows)?;
        }
        Command::Bayes1q => {
            let steps = if cfg.dump_posterior.is_empty() {
                vec![cfg.budget]
            } else {
                cfg.dump_posterior.clone()
            };
            let mut dumps: Vec<(u64, Vec<String>)> = Vec::new();
            let results = bayes_single_checkpoints(&mut lab, &cfg.bayes(cfg.budget), &[cfg.budget], |step, grid| {
                if steps.contains(&step) {
                    dumps.push((step, density_rows(grid)));
                }
            })?;
            for (step, rows) in dumps {
                out.csv(cfg, &format!("bayes1q_posterior_step{step}.csv"), "", "phi_bin,density", &rows)?;
            }
            estimate_csv(cfg, out, &truth, &results[0])?;
        }
        Command::BayesMarginal => {
            let mut state = MarginalBayes::new(model, &cfg.bayes(cfg.budget))?;
            let start = lab.preparations();
            while state.steps() < cfg.budget {
                state.step(&mut lab)?;
                if cfg.dump_posterior.contains(&state.steps()) {
                    for (p, grid) in state.grids().iter().enumerate() {
                        let name = format!("bayes-marginal_posterior_phi{}_step{}.csv", p + 1, state.steps());
                        out.csv(cfg, &name, "", "phi_bin,density", &density_rows(grid))?;
                    }
                }
            }
            let result = state.result(lab.preparations() - start);
            estimate_csv(cfg, out, &truth, &result)?;
        }
        Command::Phom | Command::Ccphom => {
            let variant = if method == Command::Phom {
                PhomVariant::Plain
            } else {
                PhomVariant::ConstantCosine
            };
            let pc = match cfg.mpp {
                Some(mpp) => PhomConfig {
                    iterations: cfg.phom_iterations(method),
                    scan_points: cfg.scan_points_for(method),
                    shots_per_point: mpp,
                    initial_angles: None,
                    variant,
                },
                None => PhomConfig::for_budget(model, variant, cfg.phom_iterations(method), cfg.scan_points_for(method), cfg.budget),
            };
            let result = phom(&mut lab, &pc)?;
            estimate_csv(cfg, out, &truth, &result)?;
        }
        Command::BayesDirect => {
            let dc = cfg.direct.clone().with_budget(model, cfg.budget);
            let result = bayes_direct_cc(&mut lab, &dc)?;
            estimate_csv(cfg, out, &truth, &result)?;
        }
        Command::Compare | Command::OracleCheck => unreachable!("not a single-run command"),
    }
    Ok(())
}

fn estimate_csv(cfg: &RunConfig, out: &mut Outputs, truth: &[f64], r: &EstimateResult) -> Result<(), CliError> {
    let rows: Vec<String> = truth
        .iter()
        .zip(&r.phases_est)
        .zip(&r.variances)
        .enumerate()
        .map(|(p, ((t, e), v))| format!("{},{t},{},{v}", p + 1, e.value()))
        .collect();
    let extra = format!("# preparations = {}\n", r.preparations_used);
    out.csv(cfg, &format!("{}_estimate.csv", cfg.command.name()), &extra, "phase,truth,estimate,variance", &rows)
}

fn oracle_check(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let mut worst = 0.0f64;
    for (i, kind) in [ModelKind::TwoPlaquette, ModelKind::ThreePlaquette].into_iter().enumerate() {
        let model = build_model(kind)?;
        let dev = oracle_deviation(&model, cfg.samples, &mut spawn_rng(cfg.master_seed, i as u64))?;
        worst = worst.max(dev);
        out.summary
            .push(format!("{kind}: max |statevector - analytic| = {dev:.3e} over {} draws", cfg.samples));
        rows.push(format!("{kind},{dev}"));
        out.oracle.push(OracleRecord {
            model: kind.name().into(),
            samples: cfg.samples,
            max_deviation: dev,
        });
    }
    out.csv(cfg, "oracle_check.csv", "", "model,max_deviation", &rows)?;
    if worst > ORACLE_TOLERANCE {
        return Err(CliError::Check(format!(
            "oracle deviation {worst:.3e} exceeds {ORACLE_TOLERANCE:e}"
        )));
    }
    Ok(())
}
