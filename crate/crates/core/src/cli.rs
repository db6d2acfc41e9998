//! Command-line front end.
//!
//! Exit codes: 0 on success, 2 for usage, configuration or input-file
//! problems, 3 when a numerical solve fails.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use nalgebra::DMatrix;
use serde::Deserialize;

use crate::continuous::StateTangent;
use crate::discrete::{IdentityMode, SolverConfig};
use crate::error::Error;
use crate::experiments::{
    benchmark_damped_linear, benchmark_van_der_pol, convergence_csv, ensemble_csv, fmt_f64, run_convergence,
    run_ensemble, trajectory_csv, write_atomic, Benchmark, EnsembleSpec, Family, IntegratorSpec, Ladder,
    CONVERGENCE_HEADER, ENSEMBLE_HEADER, VAN_DER_POL_DEFAULTS,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "fvi", version, about = "Variational integrators for forced Lagrangian systems")]
pub struct Cli {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed for ensemble sampling; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Suppress summary output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Integrate one trajectory and write trajectory.csv.
    Simulate,
    /// Run a convergence study and write convergence.csv.
    Converge,
    /// Run a seeded ensemble of convergence studies and write ensemble.csv.
    Ensemble,
    /// Write a matplotlib script plotting the given CSV files.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numerical(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(e) => write!(f, "numerical failure: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => CliError::Config(m),
            Error::BadMass | Error::DimensionMismatch { .. } => CliError::Config(e.to_string()),
            other => CliError::Numerical(other),
        }
    }
}

fn config_err(path: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{path}: {msg}"))
}

fn invalid(path: &str, e: Error) -> CliError {
    match e {
        Error::InvalidArgument(m) => config_err(path, m),
        other => config_err(path, other),
    }
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum BenchmarkConfig {
    VanDerPol {
        #[serde(default = "default_eps")]
        eps: f64,
        #[serde(default = "default_rho")]
        rho: f64,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    DampedLinear {
        mass: Vec<Vec<f64>>,
        damping: Vec<Vec<f64>>,
        stiffness: Vec<Vec<f64>>,
    },
}

fn default_eps() -> f64 {
    VAN_DER_POL_DEFAULTS.0
}
fn default_rho() -> f64 {
    VAN_DER_POL_DEFAULTS.1
}
fn default_lambda() -> f64 {
    VAN_DER_POL_DEFAULTS.2
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig::VanDerPol {
            eps: default_eps(),
            rho: default_rho(),
            lambda: default_lambda(),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum IntegratorConfig {
    Alpha {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Lobatto {
        stages: usize,
    },
}

fn default_alpha() -> f64 {
    0.5
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig::Alpha { alpha: 0.5 }
    }
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ModeConfig {
    #[default]
    Full,
    Restricted,
}

#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LadderConfig {
    pub h_max: f64,
    pub h_min: f64,
    pub points: usize,
}

impl Default for LadderConfig {
    fn default() -> Self {
        let l = Ladder::default();
        LadderConfig {
            h_max: l.h_max,
            h_min: l.h_min,
            points: l.points,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub samples: usize,
    pub half_width: f64,
    pub sample_velocities: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        let e = EnsembleSpec::default();
        EnsembleConfig {
            samples: e.samples,
            half_width: e.half_width,
            sample_velocities: e.sample_velocities,
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub newton_tol: f64,
    pub max_iters: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        let s = SolverConfig::default();
        SolverSettings {
            newton_tol: s.newton_tol,
            max_iters: s.max_iters,
        }
    }
}

/// A complete run description. Every field is optional in the JSON file.
#[derive(Clone, Debug, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub benchmark: BenchmarkConfig,
    pub initial: Option<InitialConfig>,
    pub integrator: IntegratorConfig,
    /// Methods compared by `converge`; defaults to `[integrator]`.
    pub methods: Option<Vec<IntegratorConfig>>,
    pub mode: ModeConfig,
    pub h: f64,
    pub t_end: Option<f64>,
    pub ladder: LadderConfig,
    pub ensemble: EnsembleConfig,
    pub seed: u64,
    pub solver: SolverSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            benchmark: BenchmarkConfig::default(),
            initial: None,
            integrator: IntegratorConfig::default(),
            methods: None,
            mode: ModeConfig::Full,
            h: 0.01,
            t_end: None,
            ladder: LadderConfig::default(),
            ensemble: EnsembleConfig::default(),
            seed: 0,
            solver: SolverSettings::default(),
        }
    }
}

/// Parses a JSON configuration, naming the offending field on error.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let path = if path == "." { "config".to_string() } else { path };
        config_err(&path, e.into_inner())
    })
}

fn matrix(path: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, CliError> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(config_err(path, "must be a non-empty square matrix"));
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn integrator_spec(path: &str, cfg: &IntegratorConfig, solver: SolverConfig) -> Result<IntegratorSpec, CliError> {
    let family = match *cfg {
        IntegratorConfig::Alpha { alpha } => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(config_err(&format!("{path}.alpha"), format!("alpha must be in [0, 1], got {alpha}")));
            }
            Family::Alpha(alpha)
        }
        IntegratorConfig::Lobatto { stages } => {
            if !(2..=5).contains(&stages) {
                return Err(config_err(&format!("{path}.stages"), format!("stages must be in 2..5, got {stages}")));
            }
            Family::Lobatto(stages)
        }
    };
    Ok(IntegratorSpec { family, solver })
}

/// A configuration checked and turned into library objects.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub benchmark: Benchmark,
    pub integrator: IntegratorSpec,
    pub methods: Vec<IntegratorSpec>,
    pub h: f64,
    pub steps: usize,
    pub ladder: Ladder,
    pub ensemble: EnsembleSpec,
}

impl RunConfig {
    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let mut benchmark = match &self.benchmark {
            BenchmarkConfig::VanDerPol { eps, rho, lambda } => benchmark_van_der_pol(*eps, *rho, *lambda)
                .map_err(|e| invalid("benchmark", e))?,
            BenchmarkConfig::DampedLinear {
                mass,
                damping,
                stiffness,
            } => benchmark_damped_linear(
                matrix("benchmark.mass", mass)?,
                matrix("benchmark.damping", damping)?,
                matrix("benchmark.stiffness", stiffness)?,
            )
            .map_err(|e| invalid("benchmark", e))?,
        };
        if let Some(init) = &self.initial {
            let n = benchmark.dim();
            if init.q.len() != n {
                return Err(config_err("initial.q", format!("expected {n} entries, got {}", init.q.len())));
            }
            if init.v.len() != n {
                return Err(config_err("initial.v", format!("expected {n} entries, got {}", init.v.len())));
            }
            if init.q.iter().chain(&init.v).any(|x| !x.is_finite()) {
                return Err(config_err("initial", "entries must be finite"));
            }
            benchmark.initial = StateTangent::new(init.q.clone(), init.v.clone());
        }
        if let Some(t) = self.t_end {
            if !(t > 0.0 && t.is_finite()) {
                return Err(config_err("t_end", format!("must be positive, got {t}")));
            }
            benchmark.t_end = t;
        }
        let solver = SolverConfig {
            newton_tol: self.solver.newton_tol,
            max_iters: self.solver.max_iters,
            mode: match self.mode {
                ModeConfig::Full => IdentityMode::Full,
                ModeConfig::Restricted => IdentityMode::Restricted,
            },
        };
        solver.validate().map_err(|e| invalid("solver", e))?;
        let integrator = integrator_spec("integrator", &self.integrator, solver)?;
        let methods = match &self.methods {
            None => vec![integrator],
            Some(list) if list.is_empty() => return Err(config_err("methods", "must not be empty")),
            Some(list) => list
                .iter()
                .enumerate()
                .map(|(i, m)| integrator_spec(&format!("methods[{i}]"), m, solver))
                .collect::<Result<_, _>>()?,
        };
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(config_err("h", format!("must be positive, got {}", self.h)));
        }
        let t_end = benchmark.t_end;
        let steps = (t_end / self.h).round();
        if steps < 1.0 || (steps * self.h - t_end).abs() > 1e-9 * t_end {
            return Err(config_err("h", format!("t_end = {t_end} must be a whole multiple of h = {}", self.h)));
        }
        let ladder = Ladder {
            h_max: self.ladder.h_max,
            h_min: self.ladder.h_min,
            points: self.ladder.points,
        };
        ladder.validate(t_end).map_err(|e| invalid("ladder", e))?;
        if self.ensemble.samples == 0 {
            return Err(config_err("ensemble.samples", "must be positive"));
        }
        if !(self.ensemble.half_width > 0.0 && self.ensemble.half_width.is_finite()) {
            return Err(config_err("ensemble.half_width", "must be positive"));
        }
        Ok(Resolved {
            benchmark,
            integrator,
            methods,
            h: t_end / steps,
            steps: steps as usize,
            ladder,
            ensemble: EnsembleSpec {
                samples: self.ensemble.samples,
                seed: self.seed,
                half_width: self.ensemble.half_width,
                sample_velocities: self.ensemble.sample_velocities,
            },
        })
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| config_err(&p.display().to_string(), e))?;
            parse_config(&text)
        }
    }
}

fn write_output(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| config_err(&dir.display().to_string(), e))?;
    let path = dir.join(name);
    write_atomic(&path, contents.as_bytes()).map_err(|e| config_err(&path.display().to_string(), e))?;
    Ok(path)
}

fn list(x: &[f64]) -> String {
    let items: Vec<String> = x.iter().map(|&v| fmt_f64(v)).collect();
    format!("[{}]", items.join(","))
}

fn simulate(r: &Resolved, out: &Path, log: &mut String) -> Result<(), CliError> {
    let rec = r.integrator.run(&r.benchmark.system, &r.benchmark.initial, r.steps, r.h)?;
    let path = write_output(out, "trajectory.csv", &trajectory_csv(&rec))?;
    let _ = writeln!(
        log,
        "method={} steps={} t={} q={} p={} E={} max_identity_defect={}",
        r.integrator,
        r.steps,
        fmt_f64(*rec.times.last().unwrap_or(&0.0)),
        list(rec.final_q()),
        list(rec.final_p()),
        fmt_f64(rec.final_energy()),
        fmt_f64(rec.max_identity_defect())
    );
    let _ = writeln!(log, "wrote {}", path.display());
    Ok(())
}

fn converge(r: &Resolved, out: &Path, log: &mut String) -> Result<(), CliError> {
    let mut studies = Vec::new();
    for spec in &r.methods {
        let study = run_convergence(&r.benchmark, spec, &r.ladder)?;
        let _ = writeln!(
            log,
            "method={} slope={:.4} r2={:.6} retained={}",
            spec,
            study.slope(),
            study.r2(),
            study.retained()
        );
        studies.push(study);
    }
    let path = write_output(out, "convergence.csv", &convergence_csv(&studies))?;
    let _ = writeln!(log, "wrote {}", path.display());
    Ok(())
}

fn ensemble(r: &Resolved, out: &Path, log: &mut String) -> Result<(), CliError> {
    let study = run_ensemble(&r.benchmark, &r.integrator, &r.ladder, &r.ensemble)?;
    let slopes: Vec<f64> = study.slopes().into_iter().filter(|s| s.is_finite()).collect();
    let failures = study.samples.iter().filter(|s| s.study.is_err()).count();
    let path = write_output(out, "ensemble.csv", &ensemble_csv(&study))?;
    let (lo, hi) = slopes
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
    let _ = writeln!(
        log,
        "method={} samples={} seed={} slope_min={:.4} slope_max={:.4} failures={}",
        r.integrator,
        study.samples.len(),
        r.ensemble.seed,
        lo,
        hi,
        failures
    );
    let _ = writeln!(log, "wrote {}", path.display());
    Ok(())
}

/// A parsed CSV input for the plot script.
#[derive(Clone, Debug, PartialEq)]
struct Table {
    name: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = fs::read_to_string(path).map_err(|e| config_err(&path.display().to_string(), e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = match lines.next() {
        Some(h) => h.split(',').map(str::to_string).collect(),
        None => return Err(config_err(&path.display().to_string(), "file is empty")),
    };
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    if rows.is_empty() {
        return Err(config_err(&path.display().to_string(), "file has no data rows"));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != header.len()) {
        return Err(config_err(&path.display().to_string(), format!("row {} has the wrong number of columns", bad + 1)));
    }
    let known = header.join(",") == CONVERGENCE_HEADER
        || header.join(",") == ENSEMBLE_HEADER
        || header.first().map(String::as_str) == Some("t");
    if !known {
        return Err(config_err(&path.display().to_string(), "unrecognized CSV header"));
    }
    Ok(Table {
        name: path.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
        header,
        rows,
    })
}

fn py_str(s: &str) -> String {
    format!("{s:?}")
}

fn py_table(t: &Table) -> String {
    let mut out = String::from("{");
    for (j, col) in t.header.iter().enumerate() {
        let cells: Vec<String> = t
            .rows
            .iter()
            .map(|r| match r[j].parse::<f64>() {
                Ok(x) if x.is_finite() => r[j].clone(),
                Ok(_) => "float('nan')".to_string(),
                Err(_) => py_str(&r[j]),
            })
            .collect();
        let _ = write!(out, "{}: [{}], ", py_str(col), cells.join(", "));
    }
    out.push('}');
    out
}

/// Builds a self-contained matplotlib script with the data embedded.
pub fn plot_script(paths: &[PathBuf]) -> Result<String, CliError> {
    let tables = paths.iter().map(|p| read_table(p)).collect::<Result<Vec<_>, _>>()?;
    let mut s = String::from(
        "#!/usr/bin/env python3\n\
         import math\n\
         import matplotlib\n\
         matplotlib.use(\"Agg\")\n\
         import matplotlib.pyplot as plt\n\n\
         TABLES = [\n",
    );
    for t in &tables {
        let _ = writeln!(s, "    ({}, {}),", py_str(&t.name), py_table(t));
    }
    s.push_str(
        r#"]


def kind(cols):
    if "slope_window_flag" in cols:
        return "convergence"
    if "sample_id" in cols:
        return "ensemble"
    return "trajectory"


def convergence(ax_state, ax_energy, cols):
    methods = []
    for m in cols["method"]:
        if m not in methods:
            methods.append(m)
    for m in methods:
        idx = [i for i, x in enumerate(cols["method"]) if x == m]
        h = [cols["h"][i] for i in idx]
        ax_state.loglog(h, [cols["err_state_inf"][i] for i in idx], "o-", label=m)
        ax_energy.loglog(h, [cols["err_energy"][i] for i in idx], "o-", label=m)


def ensemble(ax_state, ax_energy, cols):
    hs = sorted(set(cols["h"]), reverse=True)
    for ax, key in ((ax_state, "err_state_inf"), (ax_energy, "err_energy")):
        stats = []
        for h in hs:
            vals = [e for x, e in zip(cols["h"], cols[key]) if x == h and not math.isnan(e) and e > 0]
            stats.append((sum(vals) / len(vals), max(vals), min(vals)) if vals else (math.nan,) * 3)
        ax.loglog(hs, [s[0] for s in stats], "k-", label="ensemble mean")
        ax.fill_between(hs, [s[2] for s in stats], [s[1] for s in stats], alpha=0.3, label="ensemble min/max")


def trajectory(ax_state, ax_energy, cols):
    for name, values in cols.items():
        if name.startswith("q"):
            ax_state.plot(cols["t"], values, label=name)
    ax_energy.plot(cols["t"], cols["E"], label="E")


panels = [t for t in TABLES]
fig, axes = plt.subplots(2, len(panels), figsize=(5 * len(panels), 8), squeeze=False)
for j, (name, cols) in enumerate(panels):
    k = kind(cols)
    top, bottom = axes[0][j], axes[1][j]
    {"convergence": convergence, "ensemble": ensemble, "trajectory": trajectory}[k](top, bottom, cols)
    if k == "trajectory":
        top.set_xlabel("t")
        bottom.set_xlabel("t")
        top.set_ylabel("q")
        bottom.set_ylabel("energy")
    else:
        top.set_xlabel("h")
        bottom.set_xlabel("h")
        top.set_ylabel("final state error")
        bottom.set_ylabel("energy error")
    top.set_title(name)
    top.legend()
    bottom.legend()
fig.tight_layout()
fig.savefig("errors.png", dpi=150)
"#,
    );
    Ok(s)
}

/// Caps the global thread pool from `FV_THREADS`.
fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("FV_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config_err("FV_THREADS", format!("expected a positive integer, got {value:?}")))?;
    // a pool may already exist when called repeatedly in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Executes a parsed command line, returning the summary text.
pub fn execute(cli: &Cli) -> Result<String, CliError> {
    configure_threads()?;
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    let mut log = String::new();
    if let Command::Plot { inputs } = &cli.command {
        let script = plot_script(inputs)?;
        let path = write_output(&out, "plot_errors.py", &script)?;
        let _ = writeln!(log, "wrote {}", path.display());
        return Ok(log);
    }
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let resolved = cfg.resolve()?;
    match cli.command {
        Command::Simulate => simulate(&resolved, &out, &mut log)?,
        Command::Converge => converge(&resolved, &out, &mut log)?,
        Command::Ensemble => ensemble(&resolved, &out, &mut log)?,
        Command::Plot { .. } => unreachable!(),
    }
    Ok(log)
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(log) => {
            if !cli.quiet {
                print!("{log}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_default() {
        assert_eq!(parse_config("{}").unwrap(), RunConfig::default());
        let r = RunConfig::default().resolve().unwrap();
        assert_eq!(r.steps, 100);
        assert_eq!(r.integrator.to_string(), "midpoint");
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let e = parse_config(r#"{"integrator": {"family": "lobatto", "stages": 3, "extra": 1}}"#).unwrap_err();
        assert!(e.to_string().contains("integrator"), "{e}");
        assert!(e.to_string().contains("extra"), "{e}");
        let e = parse_config(r#"{"ladder": {"h_mx": 0.1}}"#).unwrap_err();
        assert!(e.to_string().contains("ladder"), "{e}");
        let e = parse_config(r#"{"bogus": true}"#).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let cfg = parse_config(r#"{"h": -0.1}"#).unwrap();
        let e = cfg.resolve().unwrap_err();
        assert_eq!(e.exit_code(), EXIT_CONFIG);
        assert!(e.to_string().contains("h: must be positive"), "{e}");
        let cfg = parse_config(r#"{"integrator": {"family": "lobatto", "stages": 7}}"#).unwrap();
        let e = cfg.resolve().unwrap_err().to_string();
        assert!(e.contains("integrator.stages") && e.contains("stages must be in 2..5"), "{e}");
        let cfg = parse_config(r#"{"methods": [{"family": "alpha", "alpha": 1.5}]}"#).unwrap();
        assert!(cfg.resolve().unwrap_err().to_string().contains("methods[0].alpha"));
        let cfg = parse_config(r#"{"h": 0.3}"#).unwrap();
        assert!(cfg.resolve().unwrap_err().to_string().contains("multiple of h"));
    }

    #[test]
    fn damped_linear_config_resolves() {
        let cfg = parse_config(
            r#"{"benchmark": {"name": "damped_linear", "mass": [[1]], "damping": [[0.2]], "stiffness": [[1]]},
                "initial": {"q": [1], "v": [0]}, "h": 0.1, "t_end": 2}"#,
        )
        .unwrap();
        let r = cfg.resolve().unwrap();
        assert_eq!((r.steps, r.benchmark.dim()), (20, 1));
        let bad = parse_config(r#"{"benchmark": {"name": "damped_linear", "mass": [[-1]], "damping": [[0]], "stiffness": [[1]]}}"#)
            .unwrap();
        assert_eq!(bad.resolve().unwrap_err().exit_code(), EXIT_CONFIG);
        let ragged = parse_config(r#"{"benchmark": {"name": "damped_linear", "mass": [[1, 0]], "damping": [[0]], "stiffness": [[1]]}}"#)
            .unwrap();
        assert!(ragged.resolve().unwrap_err().to_string().contains("benchmark.mass"));
    }

    #[test]
    fn numerical_errors_map_to_exit_three() {
        let e = CliError::from(Error::StepFailed {
            step: 4,
            source: Box::new(Error::NewtonDiverged {
                iters: 1,
                residual: 1.0,
            }),
        });
        assert_eq!(e.exit_code(), EXIT_NUMERICAL);
        assert!(e.to_string().contains("step 4"));
    }
}
