//! Config, target, control and state files.

use std::fs;
use std::path::{Path, PathBuf};

use beadstring::model::{ControlSignal, Domain, Profile, RawConfig, SampledFunction, StringSystem};
use beadstring::numerics::bump;
use serde::Deserialize;

use crate::CliError;

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))
}

pub fn load_system(path: &Path) -> Result<StringSystem, CliError> {
    let raw: RawConfig = serde_json::from_str(&read(path)?)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let system = StringSystem::from_raw(&raw).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    for w in system.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(system)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSpec {
    pub center: f64,
    pub half_width: f64,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default = "four")]
    pub power: i32,
}

fn one() -> f64 {
    1.0
}

fn four() -> i32 {
    4
}

/// A profile given as a sum of bumps or taken from a snapshot file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    #[serde(default)]
    pub bumps: Vec<BumpSpec>,
    /// Snapshot CSV, relative to the target file.
    pub snapshot: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetFile {
    pub displacement: Option<ProfileSpec>,
    pub velocity: Option<ProfileSpec>,
}

#[derive(Debug, Clone)]
pub struct Targets {
    pub displacement: Option<Profile>,
    pub velocity: Option<Profile>,
}

pub fn load_targets(path: &Path, system: &StringSystem, dx: f64) -> Result<Targets, CliError> {
    let file: TargetFile =
        serde_json::from_str(&read(path)?).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let build = |spec: &Option<ProfileSpec>, velocity: bool| -> Result<Option<Profile>, CliError> {
        let Some(spec) = spec else { return Ok(None) };
        match (&spec.snapshot, spec.bumps.is_empty()) {
            (Some(_), false) => Err(CliError::config("a target takes either bumps or a snapshot, not both")),
            (Some(p), true) => {
                let (u, v) = load_state(&base.join(p), system)?;
                Ok(Some(if velocity { v } else { u }))
            }
            (None, _) => {
                for b in &spec.bumps {
                    if !(b.half_width > 0.0) || b.power < 1 {
                        return Err(CliError::config(format!("bad bump {b:?}: need half_width > 0, power >= 1")));
                    }
                }
                Ok(Some(Profile::from_fn(system, dx, |_, x| {
                    spec.bumps.iter().map(|b| b.amplitude * bump(x, b.center, b.half_width, b.power)).sum()
                })))
            }
        }
    };
    Ok(Targets { displacement: build(&file.displacement, false)?, velocity: build(&file.velocity, true)? })
}

fn parse_rows(text: &str, header: &[&str], path: &Path) -> Result<Vec<Vec<f64>>, CliError> {
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap_or("").split(',').map(str::trim).collect();
    if head != header {
        return Err(CliError::config(format!("{}: expected header {}", path.display(), header.join(","))));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let row: Result<Vec<f64>, _> = l.split(',').map(|c| c.trim().parse::<f64>()).collect();
            match row {
                Ok(r) if r.len() == header.len() => Ok(r),
                _ => Err(CliError::config(format!("{}: malformed line {}", path.display(), i + 2))),
            }
        })
        .collect()
}

/// A uniform sampling starting at `rows[0]`, or an error naming the file.
fn uniform(xs: &[f64], path: &Path) -> Result<f64, CliError> {
    if xs.len() < 2 {
        return Err(CliError::config(format!("{}: need at least two samples", path.display())));
    }
    let step = (xs[xs.len() - 1] - xs[0]) / (xs.len() - 1) as f64;
    let ok = step > 0.0 && xs.iter().enumerate().all(|(i, &x)| (x - xs[0] - i as f64 * step).abs() <= 1e-9 * (1.0 + x.abs()));
    if !ok {
        return Err(CliError::config(format!("{}: samples are not uniformly spaced", path.display())));
    }
    Ok(step)
}

/// Control CSV with header `t,f`, uniform from `t = 0`.
pub fn load_control(path: &Path) -> Result<ControlSignal, CliError> {
    let rows = parse_rows(&read(path)?, &["t", "f"], path)?;
    let t: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let step = uniform(&t, path)?;
    if t[0].abs() > 1e-12 {
        return Err(CliError::config(format!("{}: control must start at t = 0", path.display())));
    }
    SampledFunction::new(0.0, step, rows.iter().map(|r| r[1]).collect(), Domain::Time)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

pub const STATE_HEADER: [&str; 4] = ["segment", "x", "displacement", "velocity"];

/// Snapshot CSV: one block of uniform rows per segment.
pub fn load_state(path: &Path, system: &StringSystem) -> Result<(Profile, Profile), CliError> {
    let rows = parse_rows(&read(path)?, &STATE_HEADER, path)?;
    let mut u = Vec::new();
    let mut v = Vec::new();
    for j in 0..system.n_segments() {
        let block: Vec<&Vec<f64>> = rows.iter().filter(|r| r[0] == j as f64).collect();
        let xs: Vec<f64> = block.iter().map(|r| r[1]).collect();
        let step = uniform(&xs, path)?;
        let (a, b) = (system.node(j), system.node(j + 1));
        let tol = 1e-9 * system.ell();
        if (xs[0] - a).abs() > tol || (xs[xs.len() - 1] - b).abs() > tol {
            return Err(CliError::config(format!("{}: segment {j} must span [{a}, {b}]", path.display())));
        }
        let mk = |c: usize| {
            SampledFunction::new(a, step, block.iter().map(|r| r[c]).collect(), Domain::Segment(j))
                .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
        };
        u.push(mk(2)?);
        v.push(mk(3)?);
    }
    if rows.iter().any(|r| r[0] < 0.0 || r[0] >= system.n_segments() as f64 || r[0].fract() != 0.0) {
        return Err(CliError::config(format!("{}: segment index out of range", path.display())));
    }
    Ok((Profile { segments: u }, Profile { segments: v }))
}
