//! Command-line front end. Every command reads an optional JSON config,
//! applies `--override key=value` edits, prints a summary and writes its
//! machine-readable output under `--out`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::algebra;
use crate::error::{Error, Result};
use crate::mfg::{self, MfgEquilibrium, MfgOptions};
use crate::model::{assumption_report, LQPersuasionModel};
use crate::output::{self, fmt_g12};
use crate::receiver;
use crate::scenarios::{self, CarbonParams, Figure, FigureOptions, Mode, ScenarioReport, SmartMeterParams};
use crate::sender;
use crate::sim::{self, Integrand, SimConfig};
use crate::stationary;

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

pub const THREADS_ENV: &str = "PERSUASION_LQ_THREADS";

#[derive(Debug, Parser)]
#[command(name = "persuasion-lq", version, about = "Continuous-time LQ Bayesian persuasion solver")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Directory for JSON and CSV outputs.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// `dotted.key=value` applied to the config; the value is parsed as JSON,
    /// falling back to a string.
    #[arg(long = "override", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the structural assumption checks.
    Check { config: Option<PathBuf> },
    /// Solve the Receiver's ergodic problem.
    Receiver { config: Option<PathBuf> },
    /// Stationary law of the controlled system.
    Stationary { config: Option<PathBuf> },
    /// Mean-field equilibrium of a scenario.
    Mfg { config: Option<PathBuf> },
    /// Optimal device precision.
    Sender { config: Option<PathBuf> },
    /// Monte Carlo simulation.
    Simulate { config: Option<PathBuf> },
    /// Application report with closed-form cross-checks.
    Scenario {
        #[arg(value_enum)]
        which: ScenarioName,
        config: Option<PathBuf>,
    },
    /// Figure data as CSV.
    Figure {
        #[arg(value_enum)]
        which: FigureName,
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum ScenarioName {
    SmartMeter,
    Carbon,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum FigureName {
    Fig1,
    Fig2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfgConfig {
    pub tol: f64,
    pub damping: f64,
    pub max_iter: usize,
}

impl Default for MfgConfig {
    fn default() -> Self {
        let d = MfgOptions::default();
        Self { tol: d.tol, damping: d.damping, max_iter: d.max_iter }
    }
}

impl From<&MfgConfig> for MfgOptions {
    fn from(c: &MfgConfig) -> Self {
        MfgOptions { tol: c.tol, damping: c.damping, max_iter: c.max_iter }
    }
}

/// Top-level config document. Exactly one of `model`, `smart_meter` and
/// `carbon` selects the system for the model-level commands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: Option<LQPersuasionModel>,
    pub smart_meter: Option<SmartMeterParams>,
    pub carbon: Option<CarbonParams>,
    /// Precision for the scenario-backed model commands.
    pub b: Option<f64>,
    pub epsilon: f64,
    pub mfg: MfgConfig,
    pub sim: SimConfig,
    pub b_max: Option<f64>,
    pub sender_tol: f64,
    pub riccati_step: f64,
    /// The Riccati ODE is integrated up to this time, then held at its last value.
    pub riccati_horizon: f64,
    pub figure: FigureOptions,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: None,
            smart_meter: None,
            carbon: None,
            b: None,
            epsilon: 0.0,
            mfg: MfgConfig::default(),
            sim: SimConfig::default(),
            b_max: None,
            sender_tol: sender::DEFAULT_TOL,
            riccati_step: algebra::DEFAULT_RICCATI_STEP,
            riccati_horizon: 50.0,
            figure: FigureOptions::default(),
        }
    }
}

enum System {
    Model(LQPersuasionModel),
    SmartMeter(SmartMeterParams),
    Carbon(CarbonParams),
}

impl Config {
    fn system(&self) -> Result<System> {
        match (&self.model, &self.smart_meter, &self.carbon) {
            (Some(m), None, None) => Ok(System::Model(m.clone())),
            (None, Some(p), None) => {
                p.validate()?;
                Ok(System::SmartMeter(p.clone()))
            }
            (None, None, Some(p)) => {
                p.validate()?;
                Ok(System::Carbon(p.clone()))
            }
            (None, None, None) => Err(Error::Config("config names no system: set one of model, smart_meter, carbon".into())),
            _ => Err(Error::Config("config names more than one of model, smart_meter, carbon".into())),
        }
    }

    fn equilibrium(&self, sys: &System) -> Result<Option<MfgEquilibrium>> {
        let opts = MfgOptions::from(&self.mfg);
        match sys {
            System::Model(_) => Ok(None),
            System::SmartMeter(p) if p.mode == Mode::Single => Ok(None),
            System::SmartMeter(p) => {
                let init = (DVector::zeros(1), DMatrix::zeros(2, 2));
                mfg::mfg_solve(&p.family(self.b.unwrap_or(p.b)), init, opts).map(Some)
            }
            System::Carbon(p) => scenarios::carbon_equilibrium(p, self.b.unwrap_or(1.0), self.epsilon, opts).map(Some),
        }
    }

    /// The model the Receiver actually faces; mean-field scenarios are
    /// frozen at their equilibrium coefficients.
    fn resolved_model(&self) -> Result<LQPersuasionModel> {
        let sys = self.system()?;
        if let Some(eq) = self.equilibrium(&sys)? {
            return Ok(eq.model);
        }
        Ok(match sys {
            System::Model(m) => m,
            System::SmartMeter(p) => p.model(self.b.unwrap_or(p.b), Mode::Single),
            System::Carbon(_) => unreachable!("carbon is always mean-field"),
        })
    }
}

/// Set `path` (dot separated) in `doc` to `raw`, parsed as JSON if possible.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    for part in key.split('.') {
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}` descends into a non-object")))?;
        cur = obj.entry(part).or_insert(Value::Null);
    }
    *cur = value;
    Ok(())
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Default::default()),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_)
        | Error::Io(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::InvalidModel(_)
        | Error::DimensionMismatch(_) => 2,
        _ => 1,
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn vec_of(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|&x| fmt_g12(x)).collect();
    format!("[{}]", parts.join(", "))
}

fn write_out(out: &Path, name: &str, value: &impl Serialize) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let path = out.join(name);
    output::write_json(&path, value)?;
    Ok(path)
}

/// Exit status 1 with the failing check named.
struct CheckFailed(Vec<&'static str>);

fn cmd_check(cfg: &Config, out: &Path) -> Result<std::result::Result<(), CheckFailed>> {
    let model = cfg.resolved_model()?;
    let report = assumption_report(&model);
    for (name, check) in report.checks() {
        say!("{:<22} {}", name, if check.passed { "pass" } else { "FAIL" });
    }
    write_out(out, "check.json", &report)?;
    let failures = report.failures();
    if failures.is_empty() {
        say!("all checks pass");
        Ok(Ok(()))
    } else {
        Ok(Err(CheckFailed(failures)))
    }
}

fn cmd_receiver(cfg: &Config, out: &Path) -> Result<()> {
    let model = cfg.resolved_model()?;
    let sol = receiver::solve_receiver(&model)?;
    let value = receiver::receiver_ergodic_value(&model, &sol);
    say!("G2 = {}", fmt_vec(sol.g2.as_slice()));
    say!("G1 = {}", fmt_vec(sol.g1.as_slice()));
    say!("zeta = {}", fmt_g12(sol.zeta));
    say!("J_R = {}", fmt_g12(value));
    say!("feedback v = K x_hat + k with K = {}, k = {}", fmt_vec(sol.feedback_k.as_slice()), fmt_vec(sol.feedback_c.as_slice()));
    say!("P_inf = {}", fmt_vec(sol.p_limit.as_slice()));
    write_out(
        out,
        "receiver.json",
        &json!({
            "g2": rows(&sol.g2),
            "g1": vec_of(&sol.g1),
            "zeta": sol.zeta,
            "ergodic_value": value,
            "feedback_k": rows(&sol.feedback_k),
            "feedback_c": vec_of(&sol.feedback_c),
            "p_limit": rows(&sol.p_limit),
        }),
    )?;
    Ok(())
}

fn cmd_stationary(cfg: &Config, out: &Path) -> Result<()> {
    let model = cfg.resolved_model()?;
    let (_, law) = stationary::equilibrium(&model)?;
    say!("mean = {}", fmt_vec(law.mean.as_slice()));
    say!("Var(X) = {}", fmt_vec(law.var_x().as_slice()));
    say!("Var(X_hat) = {}", fmt_vec(law.var_x_hat().as_slice()));
    write_out(
        out,
        "stationary.json",
        &json!({
            "mean": vec_of(&law.mean),
            "cov_joint": rows(&law.cov_joint),
            "p_limit": rows(&law.p_limit),
        }),
    )?;
    Ok(())
}

fn cmd_mfg(cfg: &Config, out: &Path) -> Result<()> {
    let sys = cfg.system()?;
    let eq = cfg
        .equilibrium(&sys)?
        .ok_or_else(|| Error::Config("mfg needs smart_meter with mode \"mfg\" or carbon".into()))?;
    say!("m* = {}", fmt_vec(eq.m_star.as_slice()));
    say!("w* = {}", fmt_vec(eq.w_star.as_slice()));
    say!("iterations = {}, residual = {}", eq.iterations, fmt_g12(eq.residual));
    write_out(
        out,
        "mfg.json",
        &json!({
            "m_star": vec_of(&eq.m_star),
            "w_star": rows(&eq.w_star),
            "iterations": eq.iterations,
            "residual": eq.residual,
            "residual_history": eq.residual_history,
        }),
    )?;
    Ok(())
}

fn cmd_sender(cfg: &Config, out: &Path) -> Result<()> {
    let (scenario, default_max) = match cfg.system()? {
        System::SmartMeter(p) => (p.sender_scenario(p.mode), p.b_max),
        System::Carbon(p) => (p.sender_scenario(cfg.epsilon), p.b_max),
        System::Model(_) => {
            return Err(Error::Config("sender needs a smart_meter or carbon scenario".into()));
        }
    };
    let b_max = cfg.b_max.unwrap_or(default_max);
    let res = sender::optimize_precision(&scenario, b_max, cfg.sender_tol)?;
    say!("b* = {}", fmt_g12(res.b_star));
    say!("objective = {}", fmt_g12(res.objective_star));
    say!("boundary = {:?}", res.boundary_flag);
    if let Some(w) = &res.warning {
        say!("warning: {w}");
    }
    write_out(out, "sender.json", &res)?;
    Ok(())
}

fn cmd_simulate(cfg: &Config, out: &Path) -> Result<()> {
    let model = cfg.resolved_model()?;
    let (sol, law) = stationary::equilibrium(&model)?;
    let horizon = cfg.riccati_horizon.min(cfg.sim.horizon);
    let grid = algebra::uniform_grid(horizon, cfg.riccati_step);
    let p0 = DMatrix::zeros(model.d_w, model.d_w);
    let riccati = algebra::integrate_riccati_ode(&model.a_x, &model.obs_b, &p0, &grid)?;
    let stats = sim::simulate(&model, &sol, &riccati, &cfg.sim)?;
    let n = model.d_w;
    let receiver = sim::ergodic_estimate(&stats, Integrand::Receiver);
    let means: Vec<_> = (0..2 * n).map(|i| stats.terminal_mean(i)).collect();
    let gaps: Vec<_> = (0..n).map(|i| stats.variance_gap(i)).collect();
    say!("paths = {}, steps = {}", cfg.sim.n_paths, cfg.sim.n_steps());
    for (i, e) in means.iter().enumerate() {
        say!("terminal mean[{i}] = {} +- {} (stationary {})", fmt_g12(e.value), fmt_g12(e.stderr), fmt_g12(law.joint_mean()[i]));
    }
    say!(
        "receiver running cost = {} +- {} (ergodic value {})",
        fmt_g12(receiver.value),
        fmt_g12(receiver.stderr),
        fmt_g12(receiver::receiver_ergodic_value(&model, &sol))
    );
    std::fs::create_dir_all(out)?;
    write_out(
        out,
        "simulate.json",
        &json!({
            "seed": stats.seed,
            "terminal_mean": means,
            "terminal_cov": rows(&stats.terminal_cov_matrix()),
            "variance_gap": gaps,
            "receiver_cost": receiver,
            "stationary_mean": vec_of(&law.joint_mean()),
            "stationary_cov": rows(&law.cov_joint),
        }),
    )?;
    let per_path: Vec<Vec<f64>> = stats
        .receiver_path_means
        .iter()
        .zip(&stats.terminal)
        .enumerate()
        .map(|(k, (r, t))| {
            let mut row = vec![k as f64, *r];
            row.extend(t);
            row
        })
        .collect();
    let mut header = vec!["path".to_string(), "receiver_mean_cost".to_string()];
    header.extend((0..n).map(|i| format!("X{i}_T")));
    header.extend((0..n).map(|i| format!("X_hat{i}_T")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    output::write_csv(&out.join("simulate_paths.csv"), &header, &per_path)?;
    Ok(())
}

fn print_report(rep: &ScenarioReport) {
    for e in &rep.entries {
        say!(
            "{:<20} {:<10} pipeline {:>20} closed form {:>20} {}",
            e.quantity,
            e.context,
            fmt_g12(e.pipeline),
            fmt_g12(e.closed_form),
            if e.consistent { "ok" } else { "DISCREPANT" }
        );
    }
    for (ctx, s) in &rep.sender {
        say!("sender {ctx}: b* = {} ({:?}), objective {}", fmt_g12(s.b_star), s.boundary_flag, fmt_g12(s.objective_star));
    }
}

fn cmd_scenario(cfg: &Config, which: ScenarioName, out: &Path) -> Result<()> {
    let rep = match which {
        ScenarioName::SmartMeter => {
            let mut p = cfg.smart_meter.clone().unwrap_or_default();
            if let Some(b) = cfg.b {
                p.b = b;
            }
            if let Some(b) = cfg.b_max {
                p.b_max = b;
            }
            scenarios::smart_meter_report(&p)?
        }
        ScenarioName::Carbon => {
            let mut p = cfg.carbon.clone().unwrap_or_default();
            if let Some(b) = cfg.b_max {
                p.b_max = b;
            }
            let grid = p.epsilon_grid.clone();
            scenarios::carbon_report(&p, &grid)?
        }
    };
    print_report(&rep);
    write_out(out, &format!("{}_report.json", rep.scenario), &rep)?;
    Ok(())
}

fn cmd_figure(cfg: &Config, which: FigureName, out: &Path) -> Result<()> {
    let fig = match which {
        FigureName::Fig1 => Figure::Fig1,
        FigureName::Fig2 => Figure::Fig2,
    };
    for f in scenarios::figure_data(fig, out, &cfg.figure)? {
        say!("wrote {}", f.display());
    }
    Ok(())
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| Error::Config(e.to_string()))
}

fn dispatch(cli: &Cli) -> Result<std::result::Result<(), CheckFailed>> {
    let out = cli.out.as_path();
    let cfg_path = match &cli.command {
        Command::Check { config }
        | Command::Receiver { config }
        | Command::Stationary { config }
        | Command::Mfg { config }
        | Command::Sender { config }
        | Command::Simulate { config }
        | Command::Scenario { config, .. }
        | Command::Figure { config, .. } => config.as_deref(),
    };
    let cfg = load_config(cfg_path, &cli.overrides)?;
    match cli.command {
        Command::Check { .. } => return cmd_check(&cfg, out),
        Command::Receiver { .. } => cmd_receiver(&cfg, out)?,
        Command::Stationary { .. } => cmd_stationary(&cfg, out)?,
        Command::Mfg { .. } => cmd_mfg(&cfg, out)?,
        Command::Sender { .. } => cmd_sender(&cfg, out)?,
        Command::Simulate { .. } => cmd_simulate(&cfg, out)?,
        Command::Scenario { which, .. } => cmd_scenario(&cfg, which, out)?,
        Command::Figure { which, .. } => cmd_figure(&cfg, which, out)?,
    }
    Ok(Ok(()))
}

/// Run one invocation; `argv[0]` is the program name.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = thread_pool().and_then(|pool| pool.install(|| dispatch(&cli)));
    match result {
        Ok(Ok(())) => 0,
        Ok(Err(CheckFailed(names))) => {
            eprintln!("assumption check failed: {}", names.join(", "));
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
