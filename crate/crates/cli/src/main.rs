//! `beadstring` command line front end.
//!
//! Exit codes: 1 for configuration errors, 2 for precondition violations,
//! 3 for numerical failures. Refusals are reported as JSON on stderr and in
//! `error.json` under the output directory.

mod inputs;
mod output;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use beadstring::control::{
    full_control, shape_control, velocity_control, verify_control, ControlError, FullControlOptions, Synthesis,
    SynthesisOptions,
};
use beadstring::dynamics::{solve_characteristics, CharacteristicOptions, DynamicsError};
use beadstring::edd::{riesz_diagnostics, DdFamily, DdKind, EddError};
use beadstring::fd::{simulate_fd, FdError, FdGrid, DEFAULT_CFL};
use beadstring::model::{ModelError, Profile, StringSystem};
use beadstring::spaces::{check_order, norm_w0, norm_wm1, SpacesError};
use beadstring::spectral::{asymptotics_report, cluster_auto, eigen_system, first_clusters, SpectralError};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use output::{num, Writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorKind {
    Config,
    Precondition,
    Numerical,
}

#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
    pub details: Option<Value>,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Config, message: message.into(), details: None }
    }

    pub fn precondition(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Precondition, message: message.into(), details: None }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        CliError { kind: ErrorKind::Numerical, message: message.into(), details: None }
    }

    fn code(&self) -> u8 {
        match self.kind {
            ErrorKind::Config => 1,
            ErrorKind::Precondition => 2,
            ErrorKind::Numerical => 3,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<ControlError> for CliError {
    fn from(e: ControlError) -> Self {
        let details = match &e {
            ControlError::Incompatible { report, .. } => serde_json::to_value(report).ok(),
            _ => None,
        };
        let kind = if e.is_precondition() { ErrorKind::Precondition } else { ErrorKind::Numerical };
        CliError { kind, message: e.to_string(), details }
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::NonpositiveSpectrum { .. } | SpectralError::Request(_) => CliError::precondition(e.to_string()),
            _ => CliError::numerical(e.to_string()),
        }
    }
}

impl From<EddError> for CliError {
    fn from(e: EddError) -> Self {
        match e {
            EddError::Request(_) | EddError::RepeatedFrequency(..) => CliError::precondition(e.to_string()),
            _ => CliError::numerical(e.to_string()),
        }
    }
}

impl From<FdError> for CliError {
    fn from(e: FdError) -> Self {
        match e {
            FdError::Spaces(_) => CliError::numerical(e.to_string()),
            _ => CliError::precondition(e.to_string()),
        }
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::Request(_) | DynamicsError::Sampling(_) => CliError::precondition(e.to_string()),
            _ => CliError::numerical(e.to_string()),
        }
    }
}

impl From<SpacesError> for CliError {
    fn from(e: SpacesError) -> Self {
        CliError::precondition(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "beadstring", version, about = "Simulate and steer a string carrying point masses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// System description (JSON with `ell`, `masses`, `potentials`).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Spatial grid spacing; also the control step for marching.
    #[arg(long, default_value_t = 1e-3)]
    dx: f64,
    /// Relative tolerance of compatibility checks.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Solver {
    Fd,
    Characteristics,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Family {
    Edd,
    Raw,
    Sine,
    Cosine,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Eigenfrequencies, clusters and the asymptotics report.
    Spectrum {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 40)]
        count: usize,
    },
    /// Terminal state under a given control.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long = "T")]
        t: f64,
        /// Control CSV with header `t,f`.
        #[arg(long)]
        control: PathBuf,
        #[arg(long, value_enum, default_value = "fd")]
        solver: Solver,
    },
    /// Control reaching a terminal displacement.
    Shape {
        #[command(flatten)]
        common: Common,
        #[arg(long = "T")]
        t: f64,
        #[arg(long)]
        target: PathBuf,
    },
    /// Control reaching a terminal velocity.
    Velocity {
        #[command(flatten)]
        common: Common,
        #[arg(long = "T")]
        t: f64,
        #[arg(long)]
        target: PathBuf,
    },
    /// Control reaching a full terminal state, `T > 2ℓ`.
    Synthesize {
        #[command(flatten)]
        common: Common,
        #[arg(long = "T")]
        t: f64,
        /// Number of spectral clusters.
        #[arg(long = "P", default_value_t = 20)]
        p: usize,
        #[arg(long)]
        target: PathBuf,
        /// Moment weight ramp, relative to `(T - 2ℓ)/2`; 0 for the flat solve.
        #[arg(long, default_value_t = 2.5)]
        ramp: f64,
    },
    /// Compatibility and norms of a state.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Snapshot CSV with header `segment,x,displacement,velocity`.
        #[arg(long)]
        state: PathBuf,
    },
    /// Gram extremes of divided-difference families.
    DiagnoseRiesz {
        #[command(flatten)]
        common: Common,
        #[arg(long = "T")]
        t: f64,
        /// Largest truncation in clusters.
        #[arg(long = "P", default_value_t = 20)]
        p: usize,
        #[arg(long, value_enum, default_value = "edd")]
        family: Family,
        /// Report every k-th truncation.
        #[arg(long, default_value_t = 5)]
        every: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Spectrum { .. } => "spectrum",
            Command::Simulate { .. } => "simulate",
            Command::Shape { .. } => "shape",
            Command::Velocity { .. } => "velocity",
            Command::Synthesize { .. } => "synthesize",
            Command::Verify { .. } => "verify",
            Command::DiagnoseRiesz { .. } => "diagnose-riesz",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Spectrum { common, .. }
            | Command::Simulate { common, .. }
            | Command::Shape { common, .. }
            | Command::Velocity { common, .. }
            | Command::Synthesize { common, .. }
            | Command::Verify { common, .. }
            | Command::DiagnoseRiesz { common, .. } => common,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if !(v > 0.0 && v.is_finite()) {
        return Err(CliError::config(format!("--{name} must be positive and finite, got {v}")));
    }
    Ok(())
}

fn params(common: &Common) -> BTreeMap<String, Value> {
    let mut p = BTreeMap::new();
    p.insert("dx".into(), json!(common.dx));
    p.insert("tol".into(), json!(common.tol));
    p
}

fn run(command: &Command) -> Result<(), CliError> {
    let common = command.common();
    positive("dx", common.dx)?;
    positive("tol", common.tol)?;
    let system = inputs::load_system(&common.config)?;
    let mut out = Writer::new(&common.out)?;
    let mut p = params(common);
    match command {
        Command::Spectrum { count, .. } => {
            p.insert("count".into(), json!(count));
            spectrum(&system, *count, common.dx, &mut out)?;
        }
        Command::Simulate { t, control, solver, .. } => {
            positive("T", *t)?;
            p.insert("T".into(), json!(t));
            p.insert("control".into(), json!(control.display().to_string()));
            p.insert("solver".into(), json!(solver));
            simulate(&system, *t, control, *solver, common.dx, &mut out)?;
        }
        Command::Shape { t, target, .. } | Command::Velocity { t, target, .. } => {
            positive("T", *t)?;
            p.insert("T".into(), json!(t));
            p.insert("target".into(), json!(target.display().to_string()));
            let velocity = matches!(command, Command::Velocity { .. });
            shape_or_velocity(&system, *t, target, velocity, common, &mut out)?;
        }
        Command::Synthesize { t, p: clusters, target, ramp, .. } => {
            positive("T", *t)?;
            p.insert("T".into(), json!(t));
            p.insert("P".into(), json!(clusters));
            p.insert("ramp".into(), json!(ramp));
            p.insert("target".into(), json!(target.display().to_string()));
            let opts = FullControlOptions { clusters: *clusters, dx: common.dx, tol: common.tol, ramp: *ramp, ..Default::default() };
            synthesize(&system, *t, target, &opts, &mut out)?;
        }
        Command::Verify { state, .. } => {
            p.insert("state".into(), json!(state.display().to_string()));
            verify(&system, state, common.tol, &mut out)?;
        }
        Command::DiagnoseRiesz { t, p: clusters, family, every, .. } => {
            positive("T", *t)?;
            p.insert("T".into(), json!(t));
            p.insert("P".into(), json!(clusters));
            p.insert("family".into(), json!(family));
            p.insert("every".into(), json!(every));
            diagnose(&system, *t, *clusters, *family, (*every).max(1), &mut out)?;
        }
    }
    out.finish(command.name(), &common.config, p)?;
    Ok(())
}

fn spectrum(system: &StringSystem, count: usize, dx: f64, out: &mut Writer) -> Result<(), CliError> {
    let modes = eigen_system(system, count, dx)?;
    let freqs: Vec<f64> = modes.iter().map(|m| m.lambda).collect();
    let slopes: Vec<f64> = modes.iter().map(|m| m.phi_prime_0).collect();
    let report = asymptotics_report(&freqs, system, Some(&slopes));
    let rows = modes.iter().enumerate().map(|(i, m)| {
        let family = report.family_of(i).map(|f| f.to_string()).unwrap_or_default();
        vec![m.index.to_string(), num(m.lambda), family, num(m.phi_prime_0)]
    });
    out.csv("spectrum.csv", &["n", "lambda", "family", "phi_prime_0"], rows)?;
    out.json("asymptotics.json", &report)?;
    if !freqs.is_empty() {
        out.json("clusters.json", &cluster_auto(&freqs, system)?)?;
    }
    Ok(())
}

fn simulate(system: &StringSystem, t: f64, control: &Path, solver: Solver, dx: f64, out: &mut Writer) -> Result<(), CliError> {
    let f = inputs::load_control(control)?;
    let snap = match solver {
        Solver::Fd => simulate_fd(system, &f, &FdGrid::new(system, dx, t, DEFAULT_CFL)?)?,
        Solver::Characteristics => {
            let opts = CharacteristicOptions { output_dx: Some(dx), ..Default::default() };
            solve_characteristics(system, &f, t, &opts)?.snapshot()
        }
    };
    out.state("snapshot.csv", &snap.displacement, &snap.velocity)?;
    out.json("masses.json", &json!({
        "time": snap.time,
        "masses": snap.masses.iter().map(|m| json!({"position": m.position, "h": m.h, "h_dot": m.h_dot})).collect::<Vec<_>>(),
        "mass_consistency": snap.mass_consistency(),
    }))?;
    Ok(())
}

fn synthesis_json(s: &Synthesis) -> Value {
    json!({
        "steps": s.steps,
        "endpoint": s.endpoint.as_ref().map(|e| json!({"center": e.center, "coefficients": e.coefficients, "free": e.free})),
        "compatibility": s.compatibility,
    })
}

fn shape_or_velocity(system: &StringSystem, t: f64, target: &Path, velocity: bool, common: &Common, out: &mut Writer) -> Result<(), CliError> {
    let targets = inputs::load_targets(target, system, common.dx)?;
    let opts = SynthesisOptions { dt: common.dx, tol: common.tol, ..Default::default() };
    let (syn, y0, y1) = if velocity {
        let psi = targets.velocity.ok_or_else(|| CliError::config("target file has no `velocity` entry"))?;
        (velocity_control(system, &psi, t, &opts)?, None, Some(psi))
    } else {
        let phi = targets.displacement.ok_or_else(|| CliError::config("target file has no `displacement` entry"))?;
        (shape_control(system, &phi, t, &opts)?, Some(phi), None)
    };
    out.control("control.csv", &syn.control)?;
    out.json("synthesis.json", &synthesis_json(&syn))?;
    let report = verify_control(system, &syn.control, y0.as_ref(), y1.as_ref(), t, common.dx)?;
    out.json("verification.json", &report)?;
    Ok(())
}

fn synthesize(system: &StringSystem, t: f64, target: &Path, opts: &FullControlOptions, out: &mut Writer) -> Result<(), CliError> {
    let targets = inputs::load_targets(target, system, opts.dx)?;
    if targets.displacement.is_none() && targets.velocity.is_none() {
        return Err(CliError::config("target file names neither `displacement` nor `velocity`"));
    }
    let zero = Profile::zeros(system, opts.dx);
    let y0 = targets.displacement.unwrap_or_else(|| zero.clone());
    let y1 = targets.velocity.unwrap_or(zero);
    let fc = full_control(system, &y0, &y1, t, opts)?;
    for w in &fc.warnings {
        eprintln!("warning: {w}");
    }
    out.control("control.csv", &fc.control)?;
    out.json("moments.json", &fc.moments)?;
    out.json("report.json", &json!({
        "control_norm_sq": fc.control_norm_sq,
        "target_norm_sq": fc.target_norm_sq,
        "energy_ratio": fc.energy_ratio,
        "gram_condition": fc.gram_condition,
        "expansion_residual": [fc.expansion_residual.0, fc.expansion_residual.1],
        "warnings": fc.warnings,
    }))?;
    let report = verify_control(system, &fc.control, Some(&y0), Some(&y1), t, opts.dx)?;
    out.json("verification.json", &report)?;
    Ok(())
}

fn verify(system: &StringSystem, state: &Path, tol: f64, out: &mut Writer) -> Result<(), CliError> {
    let (u, v) = inputs::load_state(state, system)?;
    let cu = check_order(&u, system, 0, tol);
    let cv = check_order(&v, system, -1, tol);
    let passed = cu.passed() && cv.passed() && cu.skipped == 0 && cv.skipped == 0;
    out.json("verify.json", &json!({
        "displacement": {"w0_norm": norm_w0(&u, system)?, "compatibility": cu},
        "velocity": {"wm1_norm": norm_wm1(&v, system)?, "compatibility": cv},
        "passed": passed,
    }))?;
    Ok(())
}

fn diagnose(system: &StringSystem, t: f64, clusters: usize, family: Family, every: usize, out: &mut Writer) -> Result<(), CliError> {
    let kind = match family {
        Family::Edd => DdKind::Exponential,
        Family::Raw => DdKind::RawExponential,
        Family::Sine => DdKind::Sine,
        Family::Cosine => DdKind::Cosine,
    };
    let set = first_clusters(system, clusters)?;
    let fam = DdFamily::build(&set, kind, t, true)?;
    let truncations: Vec<usize> = (1..=clusters).filter(|k| k % every == 0 || *k == clusters).collect();
    let report = riesz_diagnostics(&fam, system.ell(), &truncations)?;
    if let Some(w) = &report.warning {
        eprintln!("warning: {w}");
    }
    out.bytes("gram.csv", report.to_csv().as_bytes())?;
    out.json("riesz.json", &report)?;
    Ok(())
}

fn refuse(command: &str, out: Option<&Path>, e: &CliError) -> ExitCode {
    let body = json!({
        "command": command,
        "exit_code": e.code(),
        "kind": e.kind,
        "message": e.message,
        "details": e.details,
    });
    let text = serde_json::to_string_pretty(&body).unwrap_or_else(|_| e.message.clone());
    eprintln!("{text}");
    if let Some(dir) = out {
        if std::fs::create_dir_all(dir).is_ok() {
            let _ = std::fs::write(dir.join("error.json"), format!("{text}\n"));
        }
    }
    ExitCode::from(e.code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return refuse("", None, &CliError::config(e.kind().to_string()));
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => refuse(cli.command.name(), Some(&cli.command.common().out), &e),
    }
}
