//! Leapfrog finite-difference reference solver and state comparison.
//!
//! Each segment carries its own uniform spacing, so every mass sits on a
//! node. Mass nodes advance by Newton's law with one-sided three-point
//! slopes on either side.

use serde::Serialize;
use thiserror::Error;

use crate::model::{ControlSignal, Domain, MassState, Profile, SampledFunction, StateSnapshot, StringSystem};
use crate::numerics::trapz_sq;
use crate::spaces::{norm_w0, norm_wm1, SpacesError};

pub const DEFAULT_CFL: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdError {
    #[error("CFL violation: dt/dx = {ratio} exceeds {cfl}")]
    Cfl { ratio: f64, cfl: f64 },
    #[error("mass at {position} is not on the grid of spacing {dx}")]
    MassOffGrid { position: f64, dx: f64 },
    #[error("invalid grid request: {0}")]
    Request(String),
    #[error("states are not comparable: {0}")]
    Disjoint(String),
    #[error(transparent)]
    Spaces(#[from] SpacesError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Boundary,
    Interior,
    Mass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdGrid {
    /// Intervals per segment.
    pub cells: Vec<usize>,
    /// Spacing per segment.
    pub dx: Vec<f64>,
    pub dt: f64,
    pub steps: usize,
    pub cfl: f64,
}

impl FdGrid {
    /// Grid with spacing at most `target_dx` on every segment (at least four
    /// intervals each) and `dt = T / ceil(T / (cfl · min dx))`.
    pub fn new(system: &StringSystem, target_dx: f64, t_end: f64, cfl: f64) -> Result<Self, FdError> {
        if !(target_dx > 0.0) || !(t_end > 0.0) || !(cfl > 0.0 && cfl <= 1.0) {
            return Err(FdError::Request(format!("dx {target_dx}, T {t_end}, cfl {cfl}")));
        }
        let cells: Vec<usize> = system
            .segment_lengths()
            .iter()
            .map(|l| ((l / target_dx - 1e-9).ceil() as usize).max(4))
            .collect();
        let dx: Vec<f64> = system.segment_lengths().iter().zip(&cells).map(|(l, &c)| l / c as f64).collect();
        let min_dx = dx.iter().cloned().fold(f64::INFINITY, f64::min);
        let steps = (t_end / (cfl * min_dx) - 1e-9).ceil() as usize;
        let dt = t_end / steps as f64;
        Ok(FdGrid { cells, dx, dt, steps, cfl })
    }

    /// One spacing for the whole string; every mass must fall on a node.
    pub fn uniform(system: &StringSystem, dx: f64, dt: f64, t_end: f64, cfl: f64) -> Result<Self, FdError> {
        for &a in system.nodes() {
            let k = a / dx;
            if (k - k.round()).abs() > 1e-9 * k.max(1.0) {
                return Err(FdError::MassOffGrid { position: a, dx });
            }
        }
        if dt / dx > cfl + 1e-12 {
            return Err(FdError::Cfl { ratio: dt / dx, cfl });
        }
        let cells: Vec<usize> = system.segment_lengths().iter().map(|l| (l / dx).round() as usize).collect();
        if cells.iter().any(|&c| c < 2) {
            return Err(FdError::Request("each segment needs at least two intervals".into()));
        }
        let steps = (t_end / dt).round() as usize;
        if (steps as f64 * dt - t_end).abs() > 1e-9 * t_end {
            return Err(FdError::Request(format!("dt {dt} does not divide T {t_end}")));
        }
        Ok(FdGrid { cells: cells.clone(), dx: vec![dx; cells.len()], dt, steps, cfl })
    }

    pub fn min_dx(&self) -> f64 {
        self.dx.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_dx(&self) -> f64 {
        self.dx.iter().cloned().fold(0.0, f64::max)
    }

    pub fn n_nodes(&self) -> usize {
        self.cells.iter().sum::<usize>() + 1
    }

    fn offsets(&self) -> Vec<usize> {
        let mut o = vec![0];
        for &c in &self.cells {
            o.push(o.last().unwrap() + c);
        }
        o
    }

    pub fn node_kind(&self, i: usize) -> NodeKind {
        let o = self.offsets();
        if i == 0 || i == *o.last().unwrap() {
            NodeKind::Boundary
        } else if o.contains(&i) {
            NodeKind::Mass
        } else {
            NodeKind::Interior
        }
    }

    fn validate(&self, system: &StringSystem) -> Result<(), FdError> {
        if self.cells.len() != system.n_segments() {
            return Err(FdError::Request("grid does not match the system's segments".into()));
        }
        for (j, (&c, &dx)) in self.cells.iter().zip(&self.dx).enumerate() {
            if ((c as f64) * dx - system.segment_length(j)).abs() > 1e-9 {
                return Err(FdError::MassOffGrid { position: system.node(j + 1), dx });
            }
            if c < 2 {
                return Err(FdError::Request("each segment needs at least two intervals".into()));
            }
        }
        let ratio = self.dt / self.min_dx();
        if ratio > self.cfl + 1e-12 || self.cfl > 1.0 {
            return Err(FdError::Cfl { ratio, cfl: self.cfl });
        }
        Ok(())
    }
}

/// Output of [`run_fd`].
#[derive(Debug, Clone)]
pub struct FdRun {
    pub snapshot: StateSnapshot,
    /// `(t, E)` after every step, when requested.
    pub energy: Vec<(f64, f64)>,
    /// Mass displacements on the time grid.
    pub mass_traces: Vec<SampledFunction>,
    /// `(t, x, u)` rows, when requested.
    pub trajectory: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FdRecord {
    pub energy: bool,
    /// Dump every `k`-th time level.
    pub trajectory_stride: Option<usize>,
}

struct Layout {
    x: Vec<f64>,
    q: Vec<f64>,
    /// Per node: segment spacing for interior nodes, `None` at masses and ends.
    spacing: Vec<Option<f64>>,
    masses: Vec<(usize, f64, f64, f64)>,
    offsets: Vec<usize>,
}

fn layout(system: &StringSystem, grid: &FdGrid) -> Layout {
    let offsets = grid.offsets();
    let n = grid.n_nodes();
    let mut x = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut spacing = vec![None; n];
    for j in 0..system.n_segments() {
        let a = system.node(j);
        for k in 0..=grid.cells[j] {
            let i = offsets[j] + k;
            x[i] = if k == grid.cells[j] { system.node(j + 1) } else { a + k as f64 * grid.dx[j] };
            if k > 0 && k < grid.cells[j] {
                q[i] = system.q(j, x[i]);
                spacing[i] = Some(grid.dx[j]);
            }
        }
    }
    let masses = (1..=system.n_masses())
        .map(|j| (offsets[j], system.bead(j).mass, grid.dx[j - 1], grid.dx[j]))
        .collect();
    Layout { x, q, spacing, masses, offsets }
}

/// Samples of the control at `t_i`, `i = 0..=steps + 1`; one step past `T`
/// is extrapolated when the signal ends at `T`.
fn control_levels(f: &ControlSignal, grid: &FdGrid) -> Vec<f64> {
    let dt = grid.dt;
    let n = grid.steps;
    let mut v: Vec<f64> = (0..=n).map(|i| f.eval(i as f64 * dt)).collect();
    let t_end = n as f64 * dt;
    let past = t_end + dt;
    let extra = if f.end() >= past - 1e-9 * dt {
        f.eval(past)
    } else if f.end() >= t_end - 1e-9 * dt && n >= 1 {
        2.0 * v[n] - v[n - 1]
    } else {
        0.0
    };
    v.push(extra);
    v
}

fn energy(lay: &Layout, up: &[f64], u: &[f64], un: &[f64], dt: f64) -> f64 {
    let n = u.len();
    let vel: Vec<f64> = (0..n).map(|i| (un[i] - up[i]) / (2.0 * dt)).collect();
    let mut e = 0.0;
    for w in lay.offsets.windows(2) {
        let (a, b) = (w[0], w[1]);
        let h = lay.x[a + 1] - lay.x[a];
        e += 0.5 * trapz_sq(&vel[a..=b], h);
        e += 0.5 * (a..b).map(|i| (u[i + 1] - u[i]).powi(2)).sum::<f64>() / h;
        let qu: Vec<f64> = (a..=b).map(|i| lay.q[i] * u[i] * u[i]).collect();
        e += 0.5 * crate::numerics::trapz(&qu, h);
    }
    for &(k, m, _, _) in &lay.masses {
        e += 0.5 * m * vel[k] * vel[k];
    }
    e
}

/// Leapfrog march to `T = steps · dt`.
pub fn run_fd(
    system: &StringSystem,
    f: &ControlSignal,
    grid: &FdGrid,
    record: FdRecord,
) -> Result<FdRun, FdError> {
    grid.validate(system)?;
    if f.domain != Domain::Time {
        return Err(FdError::Request("control must be a time signal".into()));
    }
    let lay = layout(system, grid);
    let n = grid.n_nodes();
    let dt = grid.dt;
    let dt2 = dt * dt;
    let ctrl = control_levels(f, grid);
    let mut up = vec![0.0; n];
    let mut u = vec![0.0; n];
    u[0] = ctrl[0];
    let mut un = vec![0.0; n];
    let mut traces = vec![vec![0.0; grid.steps + 2]; system.n_masses()];
    let mut energy_log = Vec::new();
    let mut trajectory = Vec::new();
    let dump = |u: &[f64], step: usize, out: &mut Vec<(f64, f64, f64)>| {
        if let Some(s) = record.trajectory_stride {
            if step % s.max(1) == 0 {
                out.extend(u.iter().zip(&lay.x).map(|(&v, &x)| (step as f64 * dt, x, v)));
            }
        }
    };
    dump(&u, 0, &mut trajectory);
    let last = n - 1;
    // level `step` -> `step + 1`; one extra level past T for the velocity
    for step in 0..=grid.steps {
        for i in 1..last {
            if let Some(h) = lay.spacing[i] {
                let lap = (u[i + 1] - 2.0 * u[i] + u[i - 1]) / (h * h);
                un[i] = 2.0 * u[i] - up[i] + dt2 * (lap - lay.q[i] * u[i]);
            }
        }
        for &(k, m, hl, hr) in &lay.masses {
            let right = (-3.0 * u[k] + 4.0 * u[k + 1] - u[k + 2]) / (2.0 * hr);
            let left = (3.0 * u[k] - 4.0 * u[k - 1] + u[k - 2]) / (2.0 * hl);
            un[k] = 2.0 * u[k] - up[k] + dt2 / m * (right - left);
        }
        un[0] = ctrl[step + 1];
        un[last] = 0.0;
        if record.energy && step >= 1 {
            energy_log.push((step as f64 * dt, energy(&lay, &up, &u, &un, dt)));
        }
        for (j, &(k, _, _, _)) in lay.masses.iter().enumerate() {
            traces[j][step + 1] = un[k];
        }
        if step == grid.steps {
            break;
        }
        std::mem::swap(&mut up, &mut u);
        std::mem::swap(&mut u, &mut un);
        dump(&u, step + 1, &mut trajectory);
    }
    // now: up = level T - dt, u = level T, un = level T + dt
    let segments = |vals: &dyn Fn(usize) -> f64| -> Profile {
        Profile {
            segments: (0..system.n_segments())
                .map(|j| SampledFunction {
                    start: system.node(j),
                    step: grid.dx[j],
                    values: (lay.offsets[j]..=lay.offsets[j + 1]).map(vals).collect(),
                    domain: Domain::Segment(j),
                })
                .collect(),
        }
    };
    let displacement = segments(&|i| u[i]);
    let velocity = segments(&|i| (un[i] - up[i]) / (2.0 * dt));
    let masses = lay
        .masses
        .iter()
        .map(|&(k, _, _, _)| MassState { position: lay.x[k], h: u[k], h_dot: (un[k] - up[k]) / (2.0 * dt) })
        .collect();
    let t_end = grid.steps as f64 * dt;
    Ok(FdRun {
        snapshot: StateSnapshot { time: t_end, displacement, velocity, masses },
        energy: energy_log,
        mass_traces: traces
            .into_iter()
            .map(|v| SampledFunction { start: 0.0, step: dt, values: v, domain: Domain::Time })
            .collect(),
        trajectory,
    })
}

pub fn simulate_fd(system: &StringSystem, f: &ControlSignal, grid: &FdGrid) -> Result<StateSnapshot, FdError> {
    Ok(run_fd(system, f, grid, FdRecord::default())?.snapshot)
}

/// Which gaps [`compare_states`] evaluates.
#[derive(Debug, Clone, Copy)]
pub struct NormSelector {
    pub l2: bool,
    pub w0: bool,
    pub wm1: bool,
}

impl Default for NormSelector {
    fn default() -> Self {
        NormSelector { l2: true, w0: true, wm1: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub l2_displacement: Option<f64>,
    pub l2_velocity: Option<f64>,
    /// `W₀` norm of the displacement gap.
    pub w0: Option<f64>,
    /// `W₋₁` norm of the velocity gap.
    pub wm1: Option<f64>,
    /// `|Δh_j|` and `|Δh_j'|` per mass.
    pub mass_gaps: Vec<(f64, f64)>,
}

impl ComparisonReport {
    /// `sqrt(w0² + wm1²)` when both were computed.
    pub fn state_gap(&self) -> Option<f64> {
        Some((self.w0? * self.w0? + self.wm1? * self.wm1?).sqrt())
    }
}

pub fn l2_norm(p: &Profile) -> f64 {
    p.segments.iter().map(|s| trapz_sq(&s.values, s.step)).sum::<f64>().sqrt()
}

/// Gaps between two snapshots of the same system; `b` is resampled onto
/// `a`'s grid when they differ.
pub fn compare_states(
    system: &StringSystem,
    a: &StateSnapshot,
    b: &StateSnapshot,
    norms: NormSelector,
) -> Result<ComparisonReport, FdError> {
    let segs = system.n_segments();
    for p in [&a.displacement, &b.displacement, &a.velocity, &b.velocity] {
        if p.n_segments() != segs {
            return Err(FdError::Disjoint(format!("{} segments, system has {segs}", p.n_segments())));
        }
        for (j, s) in p.segments.iter().enumerate() {
            if (s.start - system.node(j)).abs() > 1e-9 || (s.end() - system.node(j + 1)).abs() > 1e-9 {
                return Err(FdError::Disjoint(format!("segment {j} spans [{}, {}]", s.start, s.end())));
            }
        }
    }
    if a.masses.len() != b.masses.len() {
        return Err(FdError::Disjoint("mass counts differ".into()));
    }
    let on_grid = |p: &Profile, grid: &Profile| {
        let same = p.segments.iter().zip(&grid.segments).all(|(x, y)| x.len() == y.len() && x.step == y.step);
        if same {
            p.clone()
        } else {
            p.resample_to(grid)
        }
    };
    let du = a.displacement.sub(&on_grid(&b.displacement, &a.displacement));
    let dv = a.velocity.sub(&on_grid(&b.velocity, &a.velocity));
    let mass_gaps = a.masses.iter().zip(&b.masses).map(|(x, y)| ((x.h - y.h).abs(), (x.h_dot - y.h_dot).abs())).collect();
    Ok(ComparisonReport {
        l2_displacement: norms.l2.then(|| l2_norm(&du)),
        l2_velocity: norms.l2.then(|| l2_norm(&dv)),
        w0: if norms.w0 { Some(norm_w0(&du, system)?) } else { None },
        wm1: if norms.wm1 { Some(norm_wm1(&dv, system)?) } else { None },
        mass_gaps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::bump;

    #[test]
    fn zero_control_stays_at_rest() {
        let s = StringSystem::free(1.0, &[(0.4, 1.0)]).unwrap();
        let g = FdGrid::new(&s, 0.02, 1.0, DEFAULT_CFL).unwrap();
        let f = SampledFunction::time_signal(1.0, g.dt, |_| 0.0);
        let snap = simulate_fd(&s, &f, &g).unwrap();
        assert_eq!(snap.displacement.max_abs(), 0.0);
        assert_eq!(snap.velocity.max_abs(), 0.0);
    }

    #[test]
    fn free_wave_before_first_mass() {
        let s = StringSystem::free(1.0, &[(0.6, 1.0)]).unwrap();
        let pulse = |t: f64| bump(t, 0.25, 0.2, 4);
        let errs: Vec<f64> = [0.01, 0.005]
            .iter()
            .map(|&dx| {
                let g = FdGrid::new(&s, dx, 0.5, DEFAULT_CFL).unwrap();
                let f = SampledFunction::time_signal(0.5, g.dt, pulse);
                let snap = simulate_fd(&s, &f, &g).unwrap();
                let seg = &snap.displacement.segments[0];
                (0..seg.len())
                    .map(|i| (seg.values[i] - pulse(0.5 - seg.abscissa(i))).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!(errs[0] / errs[1] > 3.0, "{errs:?}");
    }

    #[test]
    fn energy_conserved_after_control_stops() {
        let s = StringSystem::free(1.0, &[(0.4, 1.0), (0.7, 0.5)]).unwrap();
        let g = FdGrid::new(&s, 0.005, 3.0, DEFAULT_CFL).unwrap();
        let f = SampledFunction::time_signal(3.0, g.dt, |t| bump(t, 0.2, 0.15, 4));
        let run = run_fd(&s, &f, &g, FdRecord { energy: true, trajectory_stride: None }).unwrap();
        let tail: Vec<f64> = run.energy.iter().filter(|(t, _)| *t > 0.5).map(|e| e.1).collect();
        let (lo, hi) = tail.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &e| (a.min(e), b.max(e)));
        assert!(hi > 0.0 && (hi - lo) / hi < 1e-2, "{lo} {hi}");
    }

    #[test]
    fn uniform_grid_rejects_off_grid_mass() {
        let s = StringSystem::free(1.0, &[(0.33, 1.0)]).unwrap();
        assert!(matches!(FdGrid::uniform(&s, 0.1, 0.05, 1.0, 0.9), Err(FdError::MassOffGrid { .. })));
        assert!(matches!(FdGrid::uniform(&s, 0.01, 0.02, 1.0, 0.9), Err(FdError::Cfl { .. })));
    }

    #[test]
    fn identical_snapshots_compare_to_zero() {
        let s = StringSystem::free(1.0, &[(0.5, 1.0)]).unwrap();
        let g = FdGrid::new(&s, 0.01, 0.8, DEFAULT_CFL).unwrap();
        let f = SampledFunction::time_signal(0.8, g.dt, |t| bump(t, 0.3, 0.25, 4));
        let snap = simulate_fd(&s, &f, &g).unwrap();
        let r = compare_states(&s, &snap, &snap, NormSelector::default()).unwrap();
        assert_eq!(r.l2_displacement, Some(0.0));
        assert_eq!(r.state_gap(), Some(0.0));
    }
}
