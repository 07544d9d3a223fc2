//! `feynkac` command line: argument and config-file parsing, experiment
//! drivers and report writing.
//!
//! A config file holds `key = value` lines whose keys are the long flag
//! names of the chosen subcommand. Its entries are placed before the command
//! line flags, and later flags override earlier ones, so flags win.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use exmex::prelude::*;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::colehopf::{self, DriftMode};
use crate::continuum::{self, LatticeField, RefinementLadder};
use crate::dnls::{self, HierarchyLevel, Route};
use crate::error::Error;
use crate::feynman_kac::{self, BridgeOptions, EnsembleOptions, FKProblem, Quadrature, SpaceGrid};
use crate::lamperti::{induced_drift, DiffusionModel, FiniteDiff, TransformedModel};
use crate::paths::{BrownianPath, FourierBridge, SheetSample, TimeGrid};
use crate::sde::{gbm_exact, log2_ratios, simulate, NoiseMode, Trajectory};
use crate::stats::summarize;

pub const EXIT_NUMERIC: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: i32,
    pub kind: String,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "usage".into(),
            message: message.into(),
        }
    }

    fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        Self {
            code: EXIT_IO,
            kind: "io".into(),
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": self.kind, "message": self.message, "exit_code": self.code }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Input(_) | Error::Capability(_) => EXIT_USAGE,
            _ => EXIT_NUMERIC,
        };
        Self {
            code,
            kind: e.kind().into(),
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug, Clone, PartialEq, Serialize)]
#[command(
    name = "feynkac",
    version,
    about = "Feynman-Kac path integrals and lattice hierarchy SDE experiments"
)]
#[command(args_override_self = true)]
pub struct ExperimentConfig {
    /// Worker threads (falls back to FEYNKAC_THREADS, then all cores)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// key = value file with defaults for the subcommand's flags
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum Command {
    /// Brownian increments, pinned bridges or sheet samples
    SamplePath(SamplePathArgs),
    /// Induced drift of a built-in model against its closed form
    LampertiCheck(LampertiArgs),
    /// Euler-Maruyama trajectories or a strong-order ladder
    Simulate(SimulateArgs),
    /// Feynman-Kac estimates: pointwise, bridge propagator or expectation ratio
    Propagate(PropagateArgs),
    /// DNLS hierarchy lattice SDEs
    Dnls(DnlsArgs),
    /// Cole-Hopf consistency between heat, Hamilton-Jacobi and Burgers lattices
    Burgers(BurgersArgs),
    /// Grid-refinement study of the continuum limit
    Converge(ConvergeArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SamplePath(_) => "sample-path",
            Command::LampertiCheck(_) => "lamperti-check",
            Command::Simulate(_) => "simulate",
            Command::Propagate(_) => "propagate",
            Command::Dnls(_) => "dnls",
            Command::Burgers(_) => "burgers",
            Command::Converge(_) => "converge",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PathKind {
    Increments,
    Bridge,
    Sheet,
}

#[derive(clap::Args, Debug, Clone, PartialEq, Serialize)]
pub struct SamplePathArgs {
    #[arg(long, value_enum, default_value = "increments")]
    pub kind: PathKind,
    /// Number of sites (increments, bridge)
    #[arg(long, default_value_t = 1, value_parser = positive_usize)]
    pub dim: usize,
    #[arg(long, default_value_t = 100, value_parser = positive_usize)]
    pub steps: usize,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub horizon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Bridges or sheets to sample
    #[arg(long, default_value_t = 1000, value_parser = positive_usize)]
    pub samples: usize,
    /// Fourier modes (bridge default 256, sheet default 500)
    #[arg(long, value_parser = positive_usize)]
    pub modes: Option<usize>,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub half_period: f64,
    /// Sheet evaluation point
    #[arg(long, default_value_t = 0.3, allow_hyphen_values = true)]
    pub position: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelName {
    Gbm,
    Const,
    CirLike,
}

#[derive(clap::Args, Debug, Clone, PartialEq, Serialize)]
pub struct LampertiArgs {
    #[arg(long, value_enum, default_value = "gbm")]
    pub model: ModelName,
    /// Drift parameters μ (gbm, const) as a comma list
    #[arg(long, default_value = "-1,0.5,1,2", allow_hyphen_values = true)]
    pub mu: String,
    /// Evaluation points as a comma list
    #[arg(long, default_value = "0.5,1,2", allow_hyphen_values = true)]
    pub x: String,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub kappa: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub theta: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseArg {
    Multiplicative,
    Additive,
}

#[derive(clap::Args, Debug, Clone, PartialEq, Serialize)]
pub struct SimulateArgs {
    #[arg(long, value_enum, default_value = "gbm")]
    pub model: ModelName,
    /// multiplicative: x-frame `x + δb + s·x Δw` (gbm only); additive: unit-diffusion frame
    #[arg(long, value_enum, default_value = "multiplicative")]
    pub noise: NoiseArg,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub mu: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub kappa: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub theta: f64,
    #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
    pub x0: f64,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub horizon: f64,
    #[arg(long, default_value_t = 64, value_parser = positive_usize)]
    pub steps: usize,
    #[arg(long, default_value_t = 10, value_parser = positive_usize)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Strong-order study of dx = x dw against the exact solution over δ = 2^-6 … 2^-10
    #[arg(long)]
    pub ladder: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionArg {
    Backward,
    Forward,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    /// Path ensemble from the evaluation point (density estimate when forward)
    Pointwise,
    /// Drift-free propagator K(eval-point, start | t) from pinned bridges
    Bridge,
    /// <x_1(observe-time)> under the weight e^{∫u}, paths from eval-point
    Ratio,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureArg {
    Left,
    Trapezoid,
}

#[derive(clap::Args, Debug, Clone, PartialEq, Serialize)]
pub struct PropagateArgs {
    #[arg(long, value_enum, default_value = "backward")]
    pub direction: DirectionArg,
    #[arg(long, value_enum, default_value = "pointwise")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 1, value_parser = positive_usize)]
    pub dim: usize,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub horizon: f64,
    /// zero, harmonic (−|x|²/2), linear (Σx) or an expression in x / x1 … xM
    #[arg(long, default_value = "zero", allow_hyphen_values = true)]
    pub potential: String,
    /// ou (−x) or comma-separated expressions, one per coordinate
    #[arg(long, allow_hyphen_values = true)]
    pub drift: Option<String>,
    /// gaussian (standard normal density), one, or an expression
    #[arg(long, default_value = "gaussian", allow_hyphen_values = true)]
    pub condition: String,
    #[arg(long, default_value_t = 10_000, value_parser = positive_usize)]
    pub paths: usize,
    #[arg(long, default_value_t = 100, value_parser = positive_usize)]
    pub steps: usize,
    #[arg(long, default_value = "0", allow_hyphen_values = true)]
    pub eval_point: String,
    /// Bridge start point y_i
    #[arg(long, default_value = "0", allow_hyphen_values = true)]
    pub start: String,
    /// Observation time for the ratio method (default: horizon)
    #[arg(long)]
    pub observe_time: Option<f64>,
    #[arg(long, default_value_t = 256, value_parser = positive_usize)]
    pub modes: usize,
    #[arg(long, value_enum, default_value = "left")]
    pub quadrature: QuadratureArg,
    /// Also solve the one-dimensional problem with the Crank-Nicolson reference
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RouteArg {
    Direct,
    Integrator,
}

#[derive(clap::Args, Debug, Clone, PartialEq, Serialize)]
pub struct DnlsArgs {
    #[arg(long, default_value_t = 2, value_parser = hierarchy_k)]
    pub k: u8,
    #[arg(long, value_enum, default_value = "direct")]
    pub route: RouteArg,
    #[arg(long, default_value_t = 16, value_parser = positive_usize)]
    pub sites: usize,
    #[arg(long, default_value_t = 1000, value_parser = positive_usize)]
    pub steps: usize,
    #[arg(long, default_value_t = 1000, value_parser = positive_usize)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.25, value_parser = positive_f64)]
    pub horizon: f64,
    /// Initial state 1 + a·sin(2πj/M)
    #[arg(long, default_value_t = 0.2, allow_hyphen_values = true)]
    pub amplitude: f64,
    /// Use ν₃ = 1/3 instead of absorbing ν into time
    #[arg(long)]
    pub explicit_nu: bool,
    #[arg(long)]
    pub zero_noise: bool,
    /// Pathwise RMS difference between the two routes over a δ ladder
    #[arg(long)]
    pub compare_routes: bool,
    /// Ladder levels for --compare-routes (finest = --steps)
    #[arg(long, default_value_t = 4, value_parser = positive_usize)]
    pub levels: usize,
    /// Rows are written every this many steps (default: initial and terminal only)
    #[arg(long, value_parser = positive_usize)]
    pub record_every: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    Paper,
    Ito,
}

#[derive(clap::Args, Debug, Clone, PartialEq, Serialize)]
pub struct BurgersArgs {
    #[arg(long, value_enum, default_value = "ito")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 8, value_parser = positive_usize)]
    pub sites: usize,
    /// Steps on the finest level
    #[arg(long, default_value_t = 512, value_parser = positive_usize)]
    pub steps: usize,
    #[arg(long, default_value_t = 5, value_parser = positive_usize)]
    pub levels: usize,
    #[arg(long, default_value_t = 0.1, value_parser = positive_f64)]
    pub horizon: f64,
    #[arg(long, default_value_t = 64, value_parser = positive_usize)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2, allow_hyphen_values = true)]
    pub amplitude: f64,
    #[arg(long, alias = "report")]
    pub json: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservableArg {
    /// δ Σ φ_j
    Mass,
    /// δ Σ φ_j sin(πx_j/L)
    Sine,
}

#[derive(clap::Args, Debug, Clone, PartialEq, Serialize)]
pub struct ConvergeArgs {
    #[arg(long, default_value_t = 2, value_parser = hierarchy_k)]
    pub k: u8,
    #[arg(long, default_value_t = 3, value_parser = positive_usize)]
    pub levels: usize,
    #[arg(long, default_value_t = 8, value_parser = positive_usize)]
    pub base_sites: usize,
    #[arg(long, default_value_t = 16, value_parser = positive_usize)]
    pub base_steps: usize,
    #[arg(long, default_value_t = 0.1, value_parser = positive_f64)]
    pub horizon: f64,
    #[arg(long, default_value_t = 1000, value_parser = positive_usize)]
    pub paths: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32, value_parser = positive_usize)]
    pub modes: usize,
    #[arg(long, default_value_t = 1.0, value_parser = positive_f64)]
    pub half_period: f64,
    /// Initial profile 1 + a·sin(πx/L)
    #[arg(long, default_value_t = 0.5, allow_hyphen_values = true)]
    pub amplitude: f64,
    #[arg(long, value_enum, default_value = "sine")]
    pub observable: ObservableArg,
    #[arg(long)]
    pub zero_noise: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

fn positive_usize(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got '{s}'")),
    }
}

fn positive_f64(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got '{s}'")),
    }
}

fn hierarchy_k(s: &str) -> std::result::Result<u8, String> {
    match s.parse::<u8>() {
        Ok(k @ (2 | 3)) => Ok(k),
        _ => Err("k must be 2 or 3".into()),
    }
}

fn long_names(sub: &str) -> Option<Vec<String>> {
    let cmd = ExperimentConfig::command();
    let mut names: Vec<String> = cmd
        .get_arguments()
        .filter_map(|a| a.get_long().map(String::from))
        .collect();
    let sc = cmd.find_subcommand(sub)?;
    names.extend(sc.get_arguments().filter_map(|a| a.get_long().map(String::from)));
    for a in sc.get_arguments() {
        if let Some(aliases) = a.get_all_aliases() {
            names.extend(aliases.into_iter().map(String::from));
        }
    }
    Some(names)
}

fn is_flag(sub: &str, long: &str) -> bool {
    let cmd = ExperimentConfig::command();
    cmd.find_subcommand(sub)
        .and_then(|sc| sc.get_arguments().find(|a| a.get_long() == Some(long)).cloned())
        .map(|a| !a.get_action().takes_values())
        .unwrap_or(false)
}

/// Turns `key = value` lines into flags for subcommand `sub`. Blank lines and
/// `#` comments are skipped; boolean keys take `true` or `false`.
pub fn config_to_flags(sub: &str, text: &str) -> CliResult<Vec<String>> {
    let names = long_names(sub).ok_or_else(|| CliError::usage(format!("unknown subcommand '{sub}'")))?;
    let mut flags = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("config line {}: expected key = value", lineno + 1)))?;
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"');
        if key == "config" || !names.contains(&key) {
            return Err(CliError::usage(format!("unknown config key '{key}' for {sub}")));
        }
        if is_flag(sub, &key) {
            match value {
                "true" => flags.push(format!("--{key}")),
                "false" => {}
                _ => return Err(CliError::usage(format!("config key '{key}' takes true or false"))),
            }
        } else {
            flags.push(format!("--{key}"));
            flags.push(value.to_string());
        }
    }
    Ok(flags)
}

/// Resolves a subcommand from config text plus flags (flags win).
pub fn parse_config(sub: &str, text: &str, flags: &[&str]) -> CliResult<ExperimentConfig> {
    let mut argv = vec!["feynkac".to_string(), sub.to_string()];
    argv.extend(config_to_flags(sub, text)?);
    argv.extend(flags.iter().map(|s| s.to_string()));
    let cfg = ExperimentConfig::try_parse_from(argv).map_err(|e| CliError::usage(e.render().to_string()))?;
    check_conflicts(&cfg)?;
    Ok(cfg)
}

/// Parses a full argument vector, reading `--config` if present.
pub fn parse_args(argv: &[String]) -> std::result::Result<ExperimentConfig, clap::Error> {
    ExperimentConfig::try_parse_from(argv)
}

fn splice_config(argv: &[String]) -> CliResult<Vec<String>> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = argv.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else {
        return Ok(argv.to_vec());
    };
    let cmd = ExperimentConfig::command();
    let pos = argv
        .iter()
        .position(|a| cmd.find_subcommand(a).is_some())
        .ok_or_else(|| CliError::usage("--config needs a subcommand"))?;
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(Path::new(&path), e))?;
    let mut out = argv[..=pos].to_vec();
    out.extend(config_to_flags(&argv[pos], &text)?);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn check_conflicts(cfg: &ExperimentConfig) -> CliResult<()> {
    if let Command::Propagate(p) = &cfg.command {
        if p.method == MethodArg::Bridge && p.drift.is_some() {
            return Err(CliError::usage(
                "conflicting flags: --method bridge and --drift (bridges handle the drift-free case only)",
            ));
        }
        if p.method == MethodArg::Ratio && p.direction == DirectionArg::Forward {
            return Err(CliError::usage(
                "conflicting flags: --method ratio and --direction forward",
            ));
        }
        if p.method == MethodArg::Bridge && p.direction == DirectionArg::Forward {
            return Err(CliError::usage(
                "conflicting flags: --method bridge and --direction forward",
            ));
        }
    }
    if let Command::Dnls(d) = &cfg.command {
        if d.route == RouteArg::Integrator && d.zero_noise {
            return Err(CliError::usage(
                "conflicting flags: --route integrator and --zero-noise (the integrator factor assumes Itô noise)",
            ));
        }
        if d.compare_routes && d.zero_noise {
            return Err(CliError::usage(
                "conflicting flags: --compare-routes and --zero-noise (the routes differ by design without noise)",
            ));
        }
    }
    Ok(())
}

type Field = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Compiles an expression over `x` (one dimension) or `x1 … xM`.
fn expression(text: &str, dim: usize) -> CliResult<Field> {
    let ex = exmex::parse::<f64>(text).map_err(|e| CliError::usage(format!("cannot parse '{text}': {e}")))?;
    let idx = ex
        .var_names()
        .iter()
        .map(|name| {
            if name == "x" && dim == 1 {
                return Ok(0);
            }
            name.strip_prefix('x')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|n| (1..=dim).contains(n))
                .map(|n| n - 1)
                .ok_or_else(|| CliError::usage(format!("unknown variable '{name}' in '{text}' (dimension {dim})")))
        })
        .collect::<CliResult<Vec<usize>>>()?;
    Ok(Arc::new(move |x: &[f64]| {
        let vars: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        ex.eval(&vars).unwrap_or(f64::NAN)
    }))
}

fn potential_field(text: &str, dim: usize) -> CliResult<Field> {
    Ok(match text {
        "zero" => Arc::new(|_| 0.0),
        "harmonic" => Arc::new(|x| -0.5 * x.iter().map(|v| v * v).sum::<f64>()),
        "linear" => Arc::new(|x| x.iter().sum()),
        _ => expression(text, dim)?,
    })
}

fn condition_field(text: &str, dim: usize) -> CliResult<Field> {
    Ok(match text {
        "one" => Arc::new(|_| 1.0),
        "gaussian" => Arc::new(|x| x.iter().map(|v| (-0.5 * v * v).exp() / (2.0 * PI).sqrt()).product()),
        _ => expression(text, dim)?,
    })
}

type VecField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

fn drift_field(text: &str, dim: usize) -> CliResult<VecField> {
    if text == "ou" {
        return Ok(Arc::new(|x, out| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = -v;
            }
        }));
    }
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != dim {
        return Err(CliError::usage(format!(
            "--drift needs {dim} comma-separated components, got {}",
            parts.len()
        )));
    }
    let comps = parts
        .iter()
        .map(|p| expression(p.trim(), dim))
        .collect::<CliResult<Vec<_>>>()?;
    Ok(Arc::new(move |x, out| {
        for (o, c) in out.iter_mut().zip(&comps) {
            *o = c(x);
        }
    }))
}

fn parse_list(text: &str, what: &str) -> CliResult<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::usage(format!("--{what}: '{s}' is not a number")))
        })
        .collect()
}

fn point(text: &str, dim: usize, what: &str) -> CliResult<Vec<f64>> {
    let v = parse_list(text, what)?;
    match v.len() {
        1 => Ok(vec![v[0]; dim]),
        n if n == dim => Ok(v),
        n => Err(CliError::usage(format!(
            "--{what} has {n} coordinates, dimension is {dim}"
        ))),
    }
}

/// 17 significant digits, enough to round-trip.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

struct Table {
    header: Vec<&'static str>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn new(header: &[&'static str]) -> Self {
        Self {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        self.rows.push(row);
    }

    fn write(&self, path: &Path) -> CliResult<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
        w.write_record(&self.header).map_err(|e| CliError::io(path, e))?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| CliError::io(path, e))?;
        }
        w.flush().map_err(|e| CliError::io(path, e))
    }

    fn to_stdout(&self) {
        emit(&format!("{}\n", self.header.join(",")));
        for r in &self.rows {
            emit(&format!("{}\n", r.join(",")));
        }
    }
}

/// Result of one experiment: JSON report plus optional table.
pub struct Outcome {
    pub report: Value,
    table: Option<Table>,
}

fn check_parent(path: &Option<PathBuf>) -> CliResult<()> {
    if let Some(p) = path {
        let parent = p
            .parent()
            .filter(|d| !d.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        if !parent.is_dir() {
            return Err(CliError::io(p, "output directory does not exist"));
        }
    }
    Ok(())
}

fn outputs(cmd: &Command) -> (Option<PathBuf>, Option<PathBuf>) {
    match cmd {
        Command::SamplePath(a) => (a.out.clone(), a.json.clone()),
        Command::LampertiCheck(a) => (a.out.clone(), a.json.clone()),
        Command::Simulate(a) => (a.out.clone(), a.json.clone()),
        Command::Propagate(a) => (None, a.json.clone()),
        Command::Dnls(a) => (a.out.clone(), a.json.clone()),
        Command::Burgers(a) => (a.out.clone(), a.json.clone()),
        Command::Converge(a) => (a.out.clone(), a.json.clone()),
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().write_all(text.as_bytes());
}

fn warn(msg: &str) {
    eprintln!("warning: {msg}");
}

fn thread_count(cfg: &ExperimentConfig) -> CliResult<Option<usize>> {
    if let Some(n) = cfg.threads {
        return if n == 0 {
            Err(CliError::usage("--threads must be positive"))
        } else {
            Ok(Some(n))
        };
    }
    match std::env::var("FEYNKAC_THREADS") {
        Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::usage(format!(
                "FEYNKAC_THREADS must be a positive integer, got '{v}'"
            ))),
        },
        _ => Ok(None),
    }
}

/// Runs the configured experiment on its own thread pool and writes outputs.
pub fn run_experiment(cfg: &ExperimentConfig) -> CliResult<Value> {
    check_conflicts(cfg)?;
    let (csv_path, json_path) = outputs(&cfg.command);
    check_parent(&csv_path)?;
    check_parent(&json_path)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_count(cfg)? {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    let started = Instant::now();
    let outcome = pool.install(|| dispatch(&cfg.command))?;
    let mut report = json!({
        "command": cfg.command.name(),
        "resolved_config": cfg,
        "seed": seed_of(&cfg.command),
    });
    if let (Value::Object(r), Value::Object(extra)) = (&mut report, outcome.report) {
        r.extend(extra);
        r.insert("wall_time_s".into(), json!(started.elapsed().as_secs_f64()));
    }
    if let Some(t) = &outcome.table {
        match &csv_path {
            Some(p) => t.write(p)?,
            None if json_path.is_some() => t.to_stdout(),
            None => {}
        }
    }
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    match &json_path {
        Some(p) => fs::write(p, text + "\n").map_err(|e| CliError::io(p, e))?,
        None => emit(&(text + "\n")),
    }
    Ok(report)
}

fn seed_of(cmd: &Command) -> Option<u64> {
    match cmd {
        Command::SamplePath(a) => Some(a.seed),
        Command::LampertiCheck(_) => None,
        Command::Simulate(a) => Some(a.seed),
        Command::Propagate(a) => Some(a.seed),
        Command::Dnls(a) => Some(a.seed),
        Command::Burgers(a) => Some(a.seed),
        Command::Converge(a) => Some(a.seed),
    }
}

fn dispatch(cmd: &Command) -> CliResult<Outcome> {
    match cmd {
        Command::SamplePath(a) => sample_path(a),
        Command::LampertiCheck(a) => lamperti_check(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Propagate(a) => propagate(a),
        Command::Dnls(a) => dnls_cmd(a),
        Command::Burgers(a) => burgers(a),
        Command::Converge(a) => converge(a),
    }
}

fn sample_variance(xs: &[f64]) -> CliResult<f64> {
    let s = summarize(xs)?;
    Ok(s.std_error * s.std_error * xs.len() as f64)
}

fn sample_path(a: &SamplePathArgs) -> CliResult<Outcome> {
    let grid = TimeGrid::uniform(a.horizon, a.steps)?;
    match a.kind {
        PathKind::Increments => {
            let path = BrownianPath::sample(a.dim, grid, a.seed)?;
            let mut t = Table::new(&["site", "step", "time", "increment"]);
            let mut all = Vec::with_capacity(a.dim * a.steps);
            for site in 0..a.dim {
                for (n, dw) in path.site_increments(site).iter().enumerate() {
                    t.push(vec![site.to_string(), n.to_string(), fmt(grid.time(n)), fmt(*dw)]);
                    all.push(*dw);
                }
            }
            let s = summarize(&all)?;
            let var = sample_variance(&all)?;
            Ok(Outcome {
                report: json!({
                    "kind": "increments",
                    "n_increments": all.len(),
                    "mean": s.mean,
                    "variance_over_step": var / grid.step(),
                }),
                table: Some(t),
            })
        }
        PathKind::Bridge => {
            let k = a.modes.unwrap_or(crate::paths::DEFAULT_BRIDGE_MODES);
            let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..a.samples as u64)
                .into_par_iter()
                .map(|i| {
                    let b = FourierBridge::free(a.dim, a.horizon, k, a.seed, i)?;
                    let end = b.eval(a.horizon)?;
                    let err = end
                        .iter()
                        .zip(b.endpoint())
                        .map(|(p, q)| (p - q).abs())
                        .fold(0.0, f64::max);
                    // bridge part at the midpoint: the linear term removed
                    let mid: Vec<f64> = b
                        .eval(0.5 * a.horizon)?
                        .iter()
                        .zip(b.endpoint())
                        .map(|(w, e)| w - 0.5 * e)
                        .collect();
                    Ok((b.endpoint().to_vec(), mid, err))
                })
                .collect::<crate::Result<Vec<_>>>()?;
            let mut t = Table::new(&["member", "site", "endpoint", "midpoint_bridge"]);
            let mut mids = Vec::new();
            for (i, (end, mid, _)) in rows.iter().enumerate() {
                for j in 0..a.dim {
                    t.push(vec![i.to_string(), j.to_string(), fmt(end[j]), fmt(mid[j])]);
                    mids.push(mid[j]);
                }
            }
            let max_err = rows.iter().map(|r| r.2).fold(0.0, f64::max);
            Ok(Outcome {
                report: json!({
                    "kind": "bridge",
                    "samples": a.samples,
                    "modes": k,
                    "max_pinning_error": max_err,
                    "midpoint_variance": sample_variance(&mids)?,
                    "expected_midpoint_variance": a.horizon / 4.0,
                }),
                table: Some(t),
            })
        }
        PathKind::Sheet => {
            let k = a.modes.unwrap_or(500);
            let values: Vec<f64> = (0..a.samples as u64)
                .into_par_iter()
                .map(|i| SheetSample::sample(a.half_period, k, grid, a.seed, i)?.eval(a.position, a.steps))
                .collect::<crate::Result<Vec<_>>>()?;
            let mut t = Table::new(&["member", "position", "time", "value"]);
            for (i, v) in values.iter().enumerate() {
                t.push(vec![i.to_string(), fmt(a.position), fmt(a.horizon), fmt(*v)]);
            }
            Ok(Outcome {
                report: json!({
                    "kind": "sheet",
                    "samples": a.samples,
                    "modes": k,
                    "variance": sample_variance(&values)?,
                    "expected_variance": a.half_period * a.horizon / 6.0,
                }),
                table: Some(t),
            })
        }
    }
}

fn builtin_model(name: ModelName, mu: f64, sigma: f64, kappa: f64, theta: f64) -> DiffusionModel {
    match name {
        ModelName::Gbm => DiffusionModel::gbm(mu, sigma),
        ModelName::Const => DiffusionModel::constant(mu, sigma),
        ModelName::CirLike => DiffusionModel::cir_like(kappa, theta, sigma),
    }
}

fn closed_form_drift(name: ModelName, mu: f64, s: f64, kappa: f64, theta: f64, x: f64) -> f64 {
    match name {
        ModelName::Gbm => mu / s - 0.5 * s,
        ModelName::Const => mu / s,
        ModelName::CirLike => kappa * (theta - x) / (s * x.sqrt()) - s / (4.0 * x.sqrt()),
    }
}

fn lamperti_check(a: &LampertiArgs) -> CliResult<Outcome> {
    let mus = if a.model == ModelName::CirLike {
        vec![0.0]
    } else {
        parse_list(&a.mu, "mu")?
    };
    let xs = parse_list(&a.x, "x")?;
    let mut t = Table::new(&[
        "model",
        "mu",
        "x",
        "closed_form",
        "analytic",
        "finite_difference",
        "err_analytic",
        "err_fd",
    ]);
    let (mut worst_a, mut worst_fd) = (0.0f64, 0.0f64);
    for &mu in &mus {
        let model = builtin_model(a.model, mu, a.sigma, a.kappa, a.theta);
        let fd_model = model
            .clone()
            .without_sigma_grad()
            .with_finite_differences(Some(FiniteDiff::default()));
        for &x in &xs {
            let exact = closed_form_drift(a.model, mu, a.sigma, a.kappa, a.theta, x);
            let an = induced_drift(&model, &[x])?[0];
            let fd = induced_drift(&fd_model, &[x])?[0];
            worst_a = worst_a.max((an - exact).abs());
            worst_fd = worst_fd.max((fd - exact).abs());
            let name = serde_json::to_value(a.model).expect("enum serializes");
            t.push(vec![
                name.as_str().unwrap_or("").to_string(),
                fmt(mu),
                fmt(x),
                fmt(exact),
                fmt(an),
                fmt(fd),
                fmt((an - exact).abs()),
                fmt((fd - exact).abs()),
            ]);
        }
    }
    Ok(Outcome {
        report: json!({ "max_error_analytic": worst_a, "max_error_finite_difference": worst_fd }),
        table: Some(t),
    })
}

fn additive_frame(a: &SimulateArgs) -> TransformedModel {
    let s = a.sigma;
    let model = builtin_model(a.model, a.mu, s, a.kappa, a.theta);
    match a.model {
        ModelName::Gbm => TransformedModel::from_maps(
            model,
            move |x| Ok(vec![x[0].ln() / s]),
            move |y| Ok(vec![(s * y[0]).exp()]),
        ),
        ModelName::Const => {
            TransformedModel::from_maps(model, move |x| Ok(vec![x[0] / s]), move |y| Ok(vec![s * y[0]]))
        }
        ModelName::CirLike => TransformedModel::from_maps(
            model,
            move |x| Ok(vec![2.0 * x[0].sqrt() / s]),
            move |y| Ok(vec![(0.5 * s * y[0]).powi(2)]),
        ),
    }
}

fn simulate_cmd(a: &SimulateArgs) -> CliResult<Outcome> {
    if a.ladder {
        return strong_order_ladder(a);
    }
    let grid = TimeGrid::uniform(a.horizon, a.steps)?;
    let trajectories: Vec<Trajectory> = match a.noise {
        NoiseArg::Multiplicative => {
            if a.model != ModelName::Gbm {
                return Err(CliError::usage(
                    "multiplicative noise is available for --model gbm only; use --noise additive",
                ));
            }
            let (mu, s) = (a.mu, a.sigma);
            (0..a.paths as u64)
                .into_par_iter()
                .map(|i| {
                    let p = BrownianPath::sample_member(1, grid, a.seed, i)?;
                    let scaled =
                        BrownianPath::from_increments(1, grid, p.site_increments(0).iter().map(|w| s * w).collect())?;
                    simulate(
                        &[a.x0],
                        &move |x: &[f64], o: &mut [f64]| o[0] = mu * x[0],
                        NoiseMode::Multiplicative,
                        &scaled,
                    )
                })
                .collect::<crate::Result<_>>()?
        }
        NoiseArg::Additive => {
            let frame = additive_frame(a);
            let y0 = frame.to_y(&[a.x0])?;
            if !y0[0].is_finite() {
                return Err(CliError::usage(format!("x0 = {} is outside the model's domain", a.x0)));
            }
            let drift = |y: &[f64], o: &mut [f64]| match frame.drift(y) {
                Ok(v) => o.copy_from_slice(&v),
                Err(_) => o.fill(f64::NAN),
            };
            (0..a.paths as u64)
                .into_par_iter()
                .map(|i| {
                    simulate(
                        &y0,
                        &drift,
                        NoiseMode::Additive,
                        &BrownianPath::sample_member(1, grid, a.seed, i)?,
                    )
                })
                .collect::<crate::Result<_>>()?
        }
    };
    let mut t = Table::new(&["path_id", "step", "time", "site", "value"]);
    for (i, tr) in trajectories.iter().enumerate() {
        for (n, s) in tr.states().enumerate() {
            for (j, v) in s.iter().enumerate() {
                t.push(vec![
                    i.to_string(),
                    n.to_string(),
                    fmt(grid.time(n)),
                    j.to_string(),
                    fmt(*v),
                ]);
            }
        }
    }
    let terminal: Vec<f64> = trajectories.iter().map(|t| t.terminal()[0]).collect();
    let s = summarize(&terminal)?;
    Ok(Outcome {
        report: json!({
            "frame": if a.noise == NoiseArg::Additive { "y" } else { "x" },
            "terminal_mean": s.mean,
            "terminal_std_error": s.std_error,
        }),
        table: Some(t),
    })
}

/// RMS terminal error of Euler-Maruyama for `dx = x dw` at δ = 2^-6 … 2^-10.
fn strong_order_ladder(a: &SimulateArgs) -> CliResult<Outcome> {
    if a.model != ModelName::Gbm || a.mu != 0.0 || a.sigma != 1.0 || a.horizon != 1.0 {
        warn("the ladder always uses dx = x dw on [0, 1]; model parameters are ignored");
    }
    let fine = TimeGrid::uniform(1.0, 1024)?;
    let factors = [16usize, 8, 4, 2, 1];
    let sq: Vec<Vec<f64>> = (0..a.paths as u64)
        .into_par_iter()
        .map(|i| {
            let p = BrownianPath::sample_member(1, fine, a.seed, i)?;
            let exact = gbm_exact(a.x0, p.values_at(1024)?[0], 1.0);
            factors
                .iter()
                .map(|&f| {
                    let tr = simulate(
                        &[a.x0],
                        &|_: &[f64], o: &mut [f64]| o[0] = 0.0,
                        NoiseMode::Multiplicative,
                        &p.coarsen(f)?,
                    )?;
                    Ok((tr.terminal()[0] - exact).powi(2))
                })
                .collect::<crate::Result<Vec<f64>>>()
        })
        .collect::<crate::Result<_>>()?;
    let rms: Vec<f64> = (0..factors.len())
        .map(|l| (sq.iter().map(|v| v[l]).sum::<f64>() / a.paths as f64).sqrt())
        .collect();
    let mut t = Table::new(&["dt", "rms_error"]);
    for (f, e) in factors.iter().zip(&rms) {
        t.push(vec![fmt(*f as f64 / 1024.0), fmt(*e)]);
    }
    Ok(Outcome {
        report: json!({
            "dt": factors.iter().map(|f| *f as f64 / 1024.0).collect::<Vec<_>>(),
            "rms_error": rms,
            "log2_ratios": log2_ratios(&rms),
        }),
        table: Some(t),
    })
}

fn propagate(a: &PropagateArgs) -> CliResult<Outcome> {
    let dim = a.dim;
    let direction = match a.direction {
        DirectionArg::Backward => feynman_kac::Direction::Backward,
        DirectionArg::Forward => feynman_kac::Direction::Forward,
    };
    let cond = condition_field(&a.condition, dim)?;
    let pot = potential_field(&a.potential, dim)?;
    let mut problem = FKProblem::new(dim, a.horizon, direction, move |x| cond(x))?.with_potential(move |x| pot(x));
    if let Some(d) = &a.drift {
        let f = drift_field(d, dim)?;
        problem = problem.with_drift(move |x, o| f(x, o));
    }
    let eval = point(&a.eval_point, dim, "eval-point")?;
    let quadrature = match a.quadrature {
        QuadratureArg::Left => Quadrature::LeftEndpoint,
        QuadratureArg::Trapezoid => Quadrature::Trapezoid,
    };
    let opts = EnsembleOptions::new(a.paths, a.steps, a.seed).with_quadrature(quadrature);
    let est = match a.method {
        MethodArg::Pointwise => feynman_kac::solve_pointwise(&problem, &eval, &opts)?,
        MethodArg::Bridge => {
            let start = point(&a.start, dim, "start")?;
            let mut b = BridgeOptions::new(a.paths, a.steps, a.modes, a.seed);
            b.quadrature = quadrature;
            feynman_kac::propagator_free(&problem, &start, &eval, &b)?
        }
        MethodArg::Ratio => {
            let s = a.observe_time.unwrap_or(a.horizon);
            feynman_kac::expectation_ratio(&problem, &eval, s, &|x: &[f64]| x[0], &opts)?
        }
    };
    let mut report = json!({
        "estimate": est.value,
        "std_error": est.std_error,
        "n_paths": est.n_paths,
        "n_steps": est.n_steps,
        "divergent_paths": est.divergent_paths,
    });
    if a.oracle {
        if dim != 1 {
            return Err(CliError::usage("--oracle needs --dim 1"));
        }
        let space = SpaceGrid::symmetric(10.0, 1.0 / 512.0)?;
        let value = match a.method {
            MethodArg::Pointwise => feynman_kac::pde_oracle_1d(&problem, &space, 2000)?.value_at(eval[0])?,
            MethodArg::Bridge => {
                let start = point(&a.start, dim, "start")?;
                feynman_kac::pde_propagator_1d(&problem, start[0], eval[0], &space, 2000, 0.05)?
            }
            MethodArg::Ratio => return Err(CliError::usage("--oracle is not available for --method ratio")),
        };
        report["oracle"] = json!(value);
        report["oracle_z_score"] = json!((est.value - value) / est.std_error);
    }
    Ok(Outcome { report, table: None })
}

fn dnls_cmd(a: &DnlsArgs) -> CliResult<Outcome> {
    let level = HierarchyLevel::new(a.k)?.with_rescale_time(!a.explicit_nu);
    let grid = TimeGrid::uniform(a.horizon, a.steps)?;
    if a.k == 3 && (a.horizon > 0.25 || a.sites > 32 || grid.step() > 1e-3) {
        warn("k = 3 has growing modes; results beyond t ≤ 0.25, M ≤ 32, δ ≤ 1e-3 are not meaningful");
    }
    let m = a.sites;
    let x0: Vec<f64> = (0..m)
        .map(|j| 1.0 + a.amplitude * (2.0 * PI * j as f64 / m as f64).sin())
        .collect();
    if a.compare_routes {
        return compare_routes(a, level, &x0, grid);
    }
    let route = match a.route {
        RouteArg::Direct => Route::Direct,
        RouteArg::Integrator => Route::Integrator,
    };
    let trajs = dnls::ensemble(route, level, &x0, grid, a.paths, a.seed, a.zero_noise)?;
    let every = a.record_every.unwrap_or(a.steps);
    let mut t = Table::new(&["path_id", "step", "time", "site", "value"]);
    for (i, tr) in trajs.iter().enumerate() {
        for (n, s) in tr.states().enumerate() {
            if n % every == 0 || n == a.steps {
                for (j, v) in s.iter().enumerate() {
                    t.push(vec![
                        i.to_string(),
                        n.to_string(),
                        fmt(grid.time(n)),
                        j.to_string(),
                        fmt(*v),
                    ]);
                }
            }
        }
    }
    let mass0: f64 = x0.iter().sum();
    let masses: Vec<f64> = trajs.iter().map(|t| t.terminal().iter().sum()).collect();
    let s = summarize(&masses)?;
    let drift = masses.iter().map(|v| (v - mass0).abs()).fold(0.0, f64::max);
    Ok(Outcome {
        report: json!({
            "initial_sum": mass0,
            "terminal_sum_mean": s.mean,
            "terminal_sum_std_error": s.std_error,
            "z_score": (s.mean - mass0) / s.std_error,
            "max_sum_deviation": drift,
        }),
        table: Some(t),
    })
}

fn compare_routes(a: &DnlsArgs, level: HierarchyLevel, x0: &[f64], fine: TimeGrid) -> CliResult<Outcome> {
    let factors: Vec<usize> = (0..a.levels).rev().map(|l| 1usize << l).collect();
    if !a.steps.is_multiple_of(factors[0]) {
        return Err(CliError::usage(format!("--steps must be divisible by {}", factors[0])));
    }
    let m = x0.len();
    let sq: Vec<Vec<f64>> = (0..a.paths as u64)
        .into_par_iter()
        .map(|i| {
            let p = BrownianPath::sample_member(m, fine, a.seed, i)?;
            factors
                .iter()
                .map(|&f| {
                    let c = p.coarsen(f)?;
                    let d = dnls::direct_solve(level, x0, &c)?;
                    let g = dnls::path_ordered_solve(level, x0, &c)?;
                    Ok(d.terminal()
                        .iter()
                        .zip(g.terminal())
                        .map(|(u, v)| (u - v).powi(2))
                        .sum::<f64>()
                        / m as f64)
                })
                .collect::<crate::Result<Vec<f64>>>()
        })
        .collect::<crate::Result<_>>()?;
    let rms: Vec<f64> = (0..factors.len())
        .map(|l| (sq.iter().map(|v| v[l]).sum::<f64>() / a.paths as f64).sqrt())
        .collect();
    let dts: Vec<f64> = factors.iter().map(|f| fine.step() * *f as f64).collect();
    let mut t = Table::new(&["dt", "rms_route_difference"]);
    for (d, e) in dts.iter().zip(&rms) {
        t.push(vec![fmt(*d), fmt(*e)]);
    }
    let ratios: Vec<f64> = rms.windows(2).map(|w| w[0] / w[1]).collect();
    Ok(Outcome {
        report: json!({ "dt": dts, "rms_route_difference": rms, "ratios": ratios }),
        table: Some(t),
    })
}

fn burgers(a: &BurgersArgs) -> CliResult<Outcome> {
    let mode = match a.mode {
        ModeArg::Paper => DriftMode::PaperLiteral,
        ModeArg::Ito => DriftMode::ItoDerived,
    };
    let m = a.sites;
    let x0 = dnls::LatticeState::new(
        (0..m)
            .map(|j| 1.0 + a.amplitude * (2.0 * PI * j as f64 / m as f64).sin())
            .collect(),
    )?;
    let factors: Vec<usize> = (0..a.levels).rev().map(|l| 1usize << l).collect();
    if !a.steps.is_multiple_of(factors[0]) {
        return Err(CliError::usage(format!("--steps must be divisible by {}", factors[0])));
    }
    let fine = TimeGrid::uniform(a.horizon, a.steps)?;
    let r = colehopf::consistency_ensemble(&x0, fine, &factors, a.paths, a.seed, mode)?;
    let zero = dnls::LatticeState::constant(m, 0.0)?;
    let p = colehopf::hj_drift(&zero, DriftMode::PaperLiteral)?;
    let i = colehopf::hj_drift(&zero, DriftMode::ItoDerived)?;
    let offset: Vec<f64> = p.iter().zip(&i).map(|(a, b)| a - b).collect();
    let mut t = Table::new(&[
        "dt",
        "n_steps",
        "y_discrepancy",
        "y_std_error",
        "u_discrepancy",
        "u_std_error",
    ]);
    for l in &r.levels {
        t.push(vec![
            fmt(l.dt),
            l.n_steps.to_string(),
            fmt(l.y_discrepancy),
            fmt(l.y_std_error),
            fmt(l.u_discrepancy),
            fmt(l.u_std_error),
        ]);
    }
    Ok(Outcome {
        report: json!({ "consistency": r, "mode_offset_at_zero": offset }),
        table: Some(t),
    })
}

fn converge(a: &ConvergeArgs) -> CliResult<Outcome> {
    let ladder = RefinementLadder::new(a.base_sites, a.base_steps, a.levels, a.horizon)?
        .with_half_period(a.half_period)?
        .with_sheet_modes(a.modes)?;
    if a.k == 3 {
        warn("k = 3 is a backward-heat problem in the limit; only short horizons are meaningful");
    }
    let init = continuum::sine_profile(a.amplitude, a.half_period);
    let l = a.half_period;
    let obs: Box<dyn Fn(&LatticeField) -> f64 + Sync> = match a.observable {
        ObservableArg::Mass => Box::new(|f: &LatticeField| f.mass()),
        ObservableArg::Sine => Box::new(move |f: &LatticeField| {
            f.spacing
                * f.xs
                    .iter()
                    .zip(&f.values)
                    .map(|(x, v)| v * (PI * x / l).sin())
                    .sum::<f64>()
        }),
    };
    let r = continuum::refine_experiment(a.k, &ladder, &init, &*obs, a.paths, a.seed, a.zero_noise)?;
    let mut t = Table::new(&[
        "level",
        "sites",
        "n_steps",
        "spacing",
        "dt",
        "estimate",
        "std_error",
        "difference",
        "difference_std_error",
    ]);
    for (i, lv) in r.levels.iter().enumerate() {
        let (d, de) = match i.checked_sub(1).map(|j| &r.differences[j]) {
            Some(d) => (fmt(d.value), fmt(d.std_error)),
            None => (String::new(), String::new()),
        };
        t.push(vec![
            i.to_string(),
            lv.sites.to_string(),
            lv.n_steps.to_string(),
            fmt(lv.spacing),
            fmt(lv.dt),
            fmt(lv.estimate),
            fmt(lv.std_error),
            d,
            de,
        ]);
    }
    let monotone = r.differences.windows(2).all(|w| w[1].value.abs() < w[0].value.abs());
    Ok(Outcome {
        report: json!({ "report": r, "differences_decrease": monotone }),
        table: Some(t),
    })
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args(argv: Vec<String>) -> i32 {
    let argv = match splice_config(&argv) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{}", e.to_json());
            return e.code;
        }
    };
    let cfg = match parse_args(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                emit(&e.to_string());
                return 0;
            }
            let err = CliError::usage(e.render().to_string().trim_end());
            eprintln!("{}", err.to_json());
            return err.code;
        }
    };
    match run_experiment(&cfg) {
        Ok(_) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.code
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dnls_defaults() {
        let c = parse_config("dnls", "", &[]).unwrap();
        match c.command {
            Command::Dnls(d) => {
                assert_eq!((d.k, d.sites, d.steps, d.paths, d.seed), (2, 16, 1000, 1000, 0));
                assert_eq!(d.route, RouteArg::Direct);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_k_is_named() {
        let e = parse_config("dnls", "", &["--k", "5"]).unwrap_err();
        assert_eq!(e.code, EXIT_USAGE);
        assert!(e.message.contains("k must be 2 or 3"), "{}", e.message);
    }

    #[test]
    fn parsing_is_deterministic() {
        let text = "sites = 8\nsteps=200 # comment\nzero_noise = true\n";
        let a = parse_config("dnls", text, &["--seed", "4"]).unwrap();
        let b = parse_config("dnls", text, &["--seed", "4"]).unwrap();
        assert_eq!(a, b);
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn flags_override_config() {
        let c = parse_config("dnls", "sites = 8\nk = 3", &["--sites", "12"]).unwrap();
        match c.command {
            Command::Dnls(d) => assert_eq!((d.sites, d.k), (12, 3)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse_config("dnls", "sitez = 8", &[]).unwrap_err();
        assert!(e.message.contains("sitez"), "{}", e.message);
    }

    #[test]
    fn conflicting_flags_name_both() {
        let e = parse_config("propagate", "", &["--method", "bridge", "--drift", "ou"]).unwrap_err();
        assert!(
            e.message.contains("--method bridge") && e.message.contains("--drift"),
            "{}",
            e.message
        );
    }

    #[test]
    fn expressions_and_presets() {
        let f = expression("x^2 + 1", 1).unwrap();
        assert_eq!(f(&[2.0]), 5.0);
        let g = expression("x1 * x2", 2).unwrap();
        assert_eq!(g(&[2.0, 3.0]), 6.0);
        assert!(expression("y + 1", 1).is_err());
        assert_eq!(potential_field("harmonic", 2).unwrap()(&[1.0, 1.0]), -1.0);
        let d = drift_field("ou", 1).unwrap();
        let mut o = [0.0];
        d(&[0.5], &mut o);
        assert_eq!(o[0], -0.5);
    }

    #[test]
    fn float_format_round_trips() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23] {
            assert_eq!(fmt(v).parse::<f64>().unwrap(), v);
        }
    }
}
