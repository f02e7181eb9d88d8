//! Exact wave representations: kernel propagation along a segment, the
//! fixed-end reflection, the mass transmission operator `S` and its inverse,
//! and a forward solver that superposes all wave branches up to time `T`.
//!
//! A wave based at `b` with source trace `g` has the value
//! `g(t - y) + ∫_y^t k(y, s) g(t - s) ds` at distance `y` from `b`.
//!
//! Mass response. A wave with source `g` launched a distance `X` from mass `j`
//! arrives with the trace `v`. Let `W_x` be its slope at the mass, taken
//! along the direction of travel. The mass displacement `h` then satisfies
//! `M h' + 2h = v - ∫W_x - ∫(k_ref,y(0,·) * v) + ∫((R_y + L_y)(0,·) * h)`.
//! Here `k_ref` is the kernel of the reflected branch. `R` and `L` are the
//! kernels of the two segments, based at the mass.
//! The reflected branch carries source `h - v` and the transmitted one
//! carries `h`.

use std::sync::Arc;

use thiserror::Error;

use crate::kernel::{Direction, KernelCache, KernelError, KernelTable};
use crate::model::{ControlSignal, Domain, MassState, Profile, SampledFunction, StateSnapshot, StringSystem};
use crate::numerics::{causal_conv, cumtrapz, delay_trace, interp_uniform};

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("sampling mismatch: {0}")]
    Sampling(String),
    #[error("trace history ends at t = {have}, need t = {need}")]
    InsufficientHistory { have: f64, need: f64 },
    #[error("h(0) = {0:e} must vanish")]
    NonzeroStart(f64),
    #[error("Neumann series tail {tail:e} above tolerance at the horizon; refine the step")]
    NeumannTail { tail: f64 },
    #[error("reflection budget of {budget} generations exhausted with live branches (amplitude {amplitude:e})")]
    BudgetExceeded { budget: usize, amplitude: f64 },
    #[error("invalid request: {0}")]
    Request(String),
}

/// Value of a causal trace sampled from `t = 0` with step `dt`; zero before
/// the start and past the last sample.
fn trace_at(g: &[f64], dt: f64, tau: f64) -> f64 {
    let pos = tau / dt;
    let last = (g.len() - 1) as f64;
    if pos < -1e-9 || pos > last + 1e-9 {
        return 0.0;
    }
    interp_uniform(g, pos.clamp(0.0, last))
}

/// `g(t - y) + ∫_y^t k(y, s) g(t - s) ds` with the quadrature nodes placed on
/// the trace grid.
pub fn wave_value(g: &[f64], dt: f64, kernel: &KernelTable, y: f64, t: f64) -> f64 {
    if y >= t {
        return 0.0;
    }
    let direct = trace_at(g, dt, t - y);
    if kernel.is_zero() {
        return direct;
    }
    let span = t - y;
    let kmax = ((span / dt) + 1e-9).floor() as usize;
    let integrand = |k: usize| kernel.value(y, t - k as f64 * dt) * trace_at(g, dt, k as f64 * dt);
    let mut acc = 0.0;
    if kmax >= 1 {
        acc += 0.5 * (integrand(0) + integrand(kmax));
        for k in 1..kmax {
            acc += integrand(k);
        }
        acc *= dt;
    }
    let rest = span - kmax as f64 * dt;
    if rest > 1e-12 * dt {
        acc += 0.5 * rest * (integrand(kmax) + kernel.value(y, y) * direct);
    }
    direct + acc
}

/// Distance from the kernel's base along its direction of travel.
fn distance(kernel: &KernelTable, x: f64) -> f64 {
    match kernel.direction() {
        Direction::Rightward => x - kernel.base(),
        Direction::Leftward => kernel.base() - x,
    }
}

/// Wave launched from `kernel.base()` by the boundary trace `f`.
pub fn propagate(
    f: &ControlSignal,
    kernel: &KernelTable,
    base: f64,
    direction: Direction,
    x: f64,
    t: f64,
) -> Result<f64, DynamicsError> {
    if f.domain != Domain::Time || f.start.abs() > 1e-12 {
        return Err(DynamicsError::Sampling("source trace must be a time signal starting at t = 0".into()));
    }
    if !kernel.is_zero() {
        let ratio = kernel.step() / f.step;
        if ratio < 1.0 - 1e-9 || (ratio - ratio.round()).abs() > 1e-6 {
            return Err(DynamicsError::Sampling(format!(
                "signal step {} does not divide kernel step {}",
                f.step,
                kernel.step()
            )));
        }
    }
    let y = match direction {
        Direction::Rightward => x - base,
        Direction::Leftward => base - x,
    };
    if y < -1e-12 {
        return Err(DynamicsError::Request(format!("x = {x} lies behind the base {base}")));
    }
    if !kernel.is_zero() && y > kernel.reach() + 1e-9 {
        return Err(DynamicsError::Request(format!("distance {y} exceeds the kernel reach {}", kernel.reach())));
    }
    Ok(wave_value(&f.values, f.step, kernel, y.max(0.0), t))
}

/// A wave travelling away from its kernel's base.
#[derive(Debug, Clone)]
pub struct Wave {
    pub source: SampledFunction,
    pub kernel: Arc<KernelTable>,
}

impl Wave {
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        let y = distance(&self.kernel, x).max(0.0);
        wave_value(&self.source.values, self.source.step, &self.kernel, y, t)
    }
}

/// Reflection at the clamped end: a wave leaving the end with the negated
/// incident trace, so the sum vanishes there. `until` is the last time the
/// caller needs.
pub fn reflect_fixed_end(
    incident: &SampledFunction,
    kernel: Arc<KernelTable>,
    until: f64,
) -> Result<Wave, DynamicsError> {
    if incident.end() < until - 1e-9 {
        return Err(DynamicsError::InsufficientHistory { have: incident.end(), need: until });
    }
    Ok(Wave { source: incident.scaled(-1.0), kernel })
}

/// Which side of the mass the incident wave comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Solves `M h' + 2h = F + ∫_0^t Φ(t - s) h(s) ds`, `h(0) = 0`: a
/// trapezoidal first step, one BDF2 step, then BDF3. `memory` is `Φ` on the
/// same grid.
fn solve_mass(m: f64, forcing: &[f64], memory: Option<&[f64]>, dt: f64) -> Vec<f64> {
    let n = forcing.len();
    let mut h = vec![0.0; n];
    for i in 1..n {
        let c = memory_term(memory, &h, i, dt);
        h[i] = match i {
            1 => {
                let c0 = memory_term(memory, &h, 0, dt);
                (0.5 * (forcing[0] + forcing[1]) + 0.5 * (c0 + c) + (m / dt - 1.0) * h[0]) / (m / dt + 1.0)
            }
            2 => (forcing[i] + c + m * (4.0 * h[1] - h[0]) / (2.0 * dt)) / (1.5 * m / dt + 2.0),
            _ => {
                (forcing[i] + c + m * (18.0 * h[i - 1] - 9.0 * h[i - 2] + 2.0 * h[i - 3]) / (6.0 * dt))
                    / (11.0 * m / (6.0 * dt) + 2.0)
            }
        };
    }
    h
}

/// `∫_0^{t_i} Φ(t_i - s) h(s) ds` by the trapezoid rule; `Φ(0) = 0` keeps it explicit.
fn memory_term(memory: Option<&[f64]>, h: &[f64], i: usize, dt: f64) -> f64 {
    match memory {
        None => 0.0,
        Some(phi) => {
            if i == 0 {
                return 0.0;
            }
            let mut acc = 0.5 * phi[i] * h[0];
            for k in 1..i {
                acc += phi[i - k] * h[k];
            }
            dt * acc
        }
    }
}

/// The forcing that [`solve_mass`] maps to `h`. The start value `F(0)` is not
/// determined by `h` beyond `M h'(0)`; it is fixed by cubic extrapolation.
fn mass_residual(m: f64, h: &[f64], memory: Option<&[f64]>, dt: f64) -> Vec<f64> {
    let n = h.len();
    let mut out = vec![0.0; n];
    if n < 2 {
        return out;
    }
    for i in 2..n {
        let dh = if i == 2 {
            (3.0 * h[2] - 4.0 * h[1] + h[0]) / (2.0 * dt)
        } else {
            (11.0 * h[i] - 18.0 * h[i - 1] + 9.0 * h[i - 2] - 2.0 * h[i - 3]) / (6.0 * dt)
        };
        out[i] = m * dh + 2.0 * h[i] - memory_term(memory, h, i, dt);
    }
    // trapezoid step: F0 + F1 = 2 r1
    let r1 = m * (h[1] - h[0]) / dt + (h[1] + h[0])
        - 0.5 * (memory_term(memory, h, 0, dt) + memory_term(memory, h, 1, dt));
    if n >= 4 {
        out[0] = (6.0 * r1 - 3.0 * out[2] + out[3]) / 4.0;
    } else {
        out[0] = r1;
    }
    out[1] = 2.0 * r1 - out[0];
    out
}

fn all_zero(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// Trapezoid convolution at index `i`, with `f[i]` replaced by `fi`.
fn conv_at(k: &[f64], f: &[f64], i: usize, fi: f64, dt: f64) -> f64 {
    if i == 0 {
        return 0.0;
    }
    let mut acc = 0.5 * (k[0] * fi + k[i] * f[0]);
    for m in 1..i {
        acc += k[m] * f[i - m];
    }
    dt * acc
}

/// The map `f ↦ h` from an incident source trace to the displacement of one
/// mass, in time measured from the wave's arrival.
#[derive(Debug, Clone)]
pub struct TransmissionOperator {
    pub mass_index: usize,
    pub side: Side,
    pub mass: f64,
    pub step: f64,
    pub samples: usize,
    /// `k(X, X + σ)` of the incident segment.
    arrival: Vec<f64>,
    /// `k_y(X, X + σ)` of the incident segment.
    arrival_dy: Vec<f64>,
    diagonal: f64,
    /// `k_y(0, σ)` of the reflected branch.
    reflected_dy: Vec<f64>,
    /// `Φ(τ) = ∫_0^τ (R_y + L_y)(0, ·)`; `None` when identically zero.
    memory: Option<Vec<f64>>,
    trivial: bool,
}

impl TransmissionOperator {
    /// Operator for mass `j` (1-based) over `[0, horizon]` with step `step`.
    pub fn new(
        system: &StringSystem,
        cache: &mut KernelCache,
        j: usize,
        side: Side,
        horizon: f64,
        step: f64,
    ) -> Result<Self, DynamicsError> {
        if j == 0 || j > system.n_masses() {
            return Err(DynamicsError::Request(format!("mass index {j} out of range")));
        }
        let samples = (horizon / step - 1e-9).ceil() as usize + 1;
        let (in_seg, in_dir, ref_seg, ref_dir) = match side {
            Side::Left => (j - 1, Direction::Rightward, j - 1, Direction::Leftward),
            Side::Right => (j, Direction::Leftward, j, Direction::Rightward),
        };
        let x_len = system.segment_length(in_seg);
        let pad = horizon + 2.0 * step;
        let incident = cache.get(system, in_seg, in_dir, pad + x_len, step)?;
        let reflected = cache.get(system, ref_seg, ref_dir, pad, step)?;
        let right = cache.get(system, j, Direction::Rightward, pad, step)?;
        let left = cache.get(system, j - 1, Direction::Leftward, pad, step)?;
        let arrival = incident.line(x_len, samples);
        let arrival_dy = incident.line_dy(x_len, samples);
        let diagonal = arrival[0];
        let reflected_dy = reflected.line_dy(0.0, samples);
        let psi: Vec<f64> =
            right.line_dy(0.0, samples).iter().zip(left.line_dy(0.0, samples)).map(|(a, b)| a + b).collect();
        let memory = if all_zero(&psi) { None } else { Some(cumtrapz(&psi, step)) };
        let trivial = all_zero(&arrival) && all_zero(&arrival_dy) && all_zero(&reflected_dy) && memory.is_none();
        let op = TransmissionOperator {
            mass_index: j,
            side,
            mass: system.bead(j).mass,
            step,
            samples,
            arrival,
            arrival_dy,
            diagonal,
            reflected_dy,
            memory,
            trivial,
        };
        let tail = op.series_tail(60);
        if tail > 1e-10 {
            return Err(DynamicsError::NeumannTail { tail });
        }
        Ok(op)
    }

    /// Factorial bound on the Neumann tail `Σ_{n > terms} (cT)^n / n!` with
    /// `c = max|Φ| T / M`.
    pub fn series_tail(&self, terms: usize) -> f64 {
        let horizon = self.step * (self.samples - 1) as f64;
        let c = match &self.memory {
            None => return 0.0,
            Some(phi) => phi.iter().fold(0.0f64, |m, v| m.max(v.abs())) * horizon / self.mass,
        };
        let x = c * horizon;
        let mut term = 1.0;
        let mut tail = 0.0;
        for n in 1..=terms + 40 {
            term *= x / n as f64;
            if n > terms {
                tail += term;
            }
        }
        tail
    }

    /// Mass forcing `F` generated by the source trace `g`.
    fn forcing(&self, g: &[f64]) -> Vec<f64> {
        if self.trivial {
            return g.iter().map(|v| 2.0 * v).collect();
        }
        let mut march = ForcingMarch::new(self, g.len());
        for &gi in g {
            let s = march.step(gi);
            march.commit(gi, s);
        }
        march.out
    }

    fn check_grid(&self, f: &SampledFunction) -> Result<(), DynamicsError> {
        if (f.step - self.step).abs() > 1e-12 * self.step {
            return Err(DynamicsError::Sampling(format!("signal step {} differs from operator step {}", f.step, self.step)));
        }
        if f.len() > self.samples {
            return Err(DynamicsError::Sampling(format!(
                "signal has {} samples, operator horizon covers {}",
                f.len(),
                self.samples
            )));
        }
        Ok(())
    }

    /// `h = S f`.
    pub fn apply(&self, f: &ControlSignal) -> Result<SampledFunction, DynamicsError> {
        self.check_grid(f)?;
        let forcing = self.forcing(&f.values);
        let h = solve_mass(self.mass, &forcing, self.memory.as_deref(), self.step);
        Ok(SampledFunction { start: 0.0, step: self.step, values: h, domain: Domain::Time })
    }

    /// `f = S⁻¹ h`, by forward substitution in the Volterra equation.
    pub fn inverse(&self, h: &SampledFunction) -> Result<ControlSignal, DynamicsError> {
        self.check_grid(h)?;
        let scale = h.max_abs().max(f64::MIN_POSITIVE);
        if h.values[0].abs() > 1e-9 * scale.max(1.0) {
            return Err(DynamicsError::NonzeroStart(h.values[0]));
        }
        let mut hv = h.values.clone();
        hv[0] = 0.0;
        let target = mass_residual(self.mass, &hv, self.memory.as_deref(), self.step);
        let g = if self.trivial {
            target.iter().map(|v| 0.5 * v).collect()
        } else {
            let mut march = ForcingMarch::new(self, target.len());
            for &e in &target {
                let a = march.step(0.0);
                let b = march.step(1.0).f - a.f;
                let gi = (e - a.f) / b;
                let s = march.step(gi);
                march.commit(gi, s);
            }
            march.g
        };
        Ok(SampledFunction { start: 0.0, step: self.step, values: g, domain: Domain::Time })
    }
}

struct MarchStep {
    f: f64,
    v: f64,
    c2: f64,
    c3: f64,
    cum_g: f64,
    cum2: f64,
    cum3: f64,
}

/// Incremental evaluation of the forcing, affine in the newest sample.
struct ForcingMarch<'a> {
    op: &'a TransmissionOperator,
    g: Vec<f64>,
    v: Vec<f64>,
    c2: Vec<f64>,
    c3: Vec<f64>,
    cum_g: f64,
    cum2: f64,
    cum3: f64,
    out: Vec<f64>,
}

impl<'a> ForcingMarch<'a> {
    fn new(op: &'a TransmissionOperator, n: usize) -> Self {
        ForcingMarch {
            op,
            g: Vec::with_capacity(n),
            v: Vec::with_capacity(n),
            c2: Vec::with_capacity(n),
            c3: Vec::with_capacity(n),
            cum_g: 0.0,
            cum2: 0.0,
            cum3: 0.0,
            out: Vec::with_capacity(n),
        }
    }

    fn step(&self, gi: f64) -> MarchStep {
        let op = self.op;
        let dt = op.step;
        let i = self.g.len();
        let conv1 = conv_at(&op.arrival, &self.g, i, gi, dt);
        let v = gi + conv1;
        let c2 = conv_at(&op.arrival_dy, &self.g, i, gi, dt);
        let c3 = conv_at(&op.reflected_dy, &self.v, i, v, dt);
        let (cum_g, cum2, cum3) = if i == 0 {
            (0.0, 0.0, 0.0)
        } else {
            (
                self.cum_g + 0.5 * dt * (self.g[i - 1] + gi),
                self.cum2 + 0.5 * dt * (self.c2[i - 1] + c2),
                self.cum3 + 0.5 * dt * (self.c3[i - 1] + c3),
            )
        };
        let f = 2.0 * gi + conv1 + op.diagonal * cum_g - cum2 - cum3;
        MarchStep { f, v, c2, c3, cum_g, cum2, cum3 }
    }

    fn commit(&mut self, gi: f64, s: MarchStep) {
        self.g.push(gi);
        self.v.push(s.v);
        self.c2.push(s.c2);
        self.c3.push(s.c3);
        self.cum_g = s.cum_g;
        self.cum2 = s.cum2;
        self.cum3 = s.cum3;
        self.out.push(s.f);
    }
}

#[derive(Debug, Clone)]
pub struct CharacteristicOptions {
    /// Maximum number of reflection generations.
    pub reflection_budget: usize,
    /// Spacing of the output profile; defaults to the time step.
    pub output_dx: Option<f64>,
    /// Branches below this fraction of the control amplitude are dropped.
    pub prune_tol: f64,
}

impl Default for CharacteristicOptions {
    fn default() -> Self {
        CharacteristicOptions { reflection_budget: 64, output_dx: None, prune_tol: 1e-12 }
    }
}

/// Precomputed kernel lines of one table.
#[derive(Debug, Clone)]
struct KernelLines {
    table: Arc<KernelTable>,
    far: Vec<f64>,
    far_dy: Vec<f64>,
    base_dy: Vec<f64>,
}

impl KernelLines {
    fn new(table: Arc<KernelTable>, n: usize) -> Self {
        let x = table.reach();
        KernelLines { far: table.line(x, n), far_dy: table.line_dy(x, n), base_dy: table.line_dy(0.0, n), table }
    }

    /// Arrival trace `v` and `∫_0^t W_x` at the far end for source `g`.
    fn arrival(&self, g: &[f64], dt: f64) -> (Vec<f64>, Vec<f64>) {
        let big_g = delay_trace(g, self.table.reach(), dt);
        if self.table.is_zero() {
            let iwx = big_g.iter().map(|v| -v).collect();
            return (big_g, iwx);
        }
        let conv = causal_conv(&self.far, &big_g, dt);
        let v: Vec<f64> = big_g.iter().zip(&conv).map(|(a, b)| a + b).collect();
        let cum_g = cumtrapz(&big_g, dt);
        let cum2 = cumtrapz(&causal_conv(&self.far_dy, &big_g, dt), dt);
        let kxx = self.far[0];
        let iwx = (0..g.len()).map(|i| -big_g[i] - kxx * cum_g[i] + cum2[i]).collect();
        (v, iwx)
    }
}

/// All wave branches of a forward simulation on `[0, T + dt]`.
#[derive(Debug, Clone)]
pub struct CharacteristicSolution {
    system: StringSystem,
    dt: f64,
    t_end: f64,
    right_sources: Vec<Vec<f64>>,
    left_sources: Vec<Vec<f64>>,
    right_kernels: Vec<Arc<KernelTable>>,
    left_kernels: Vec<Arc<KernelTable>>,
    mass_traces: Vec<Vec<f64>>,
    generations: usize,
    output_dx: f64,
}

/// Samples `f` on `t_i = i dt`, `i = 0..=n + 1`, extending one step past `T`.
fn control_samples(f: &ControlSignal, t_end: f64) -> (f64, Vec<f64>) {
    let mut n = ((t_end / f.step).round() as usize).max(1);
    if (n as f64 * f.step - t_end).abs() > 1e-9 * t_end.max(1.0) {
        n = (t_end / f.step).ceil() as usize;
    }
    let dt = t_end / n as f64;
    let mut v: Vec<f64> = (0..=n).map(|i| f.eval(i as f64 * dt)).collect();
    let past = (n + 1) as f64 * dt;
    let extra = if f.end() >= past - 1e-9 * dt {
        f.eval(past)
    } else if f.end() >= t_end - 1e-9 * dt {
        2.0 * v[n] - v[n - 1]
    } else {
        0.0
    };
    v.push(extra);
    (dt, v)
}

/// Superposes every transmitted and reflected branch generated by `f` up
/// to time `T`.
pub fn solve_characteristics(
    system: &StringSystem,
    f: &ControlSignal,
    t_end: f64,
    options: &CharacteristicOptions,
) -> Result<CharacteristicSolution, DynamicsError> {
    if !(t_end > 0.0) {
        return Err(DynamicsError::Request(format!("horizon must be positive, got {t_end}")));
    }
    if f.domain != Domain::Time {
        return Err(DynamicsError::Sampling("control must be a time signal".into()));
    }
    let (dt, f0) = control_samples(f, t_end);
    let n = f0.len();
    let t_sim = dt * (n - 1) as f64;
    let segs = system.n_segments();
    let mut cache = KernelCache::new();
    let mut right = Vec::with_capacity(segs);
    let mut left = Vec::with_capacity(segs);
    for j in 0..segs {
        let horizon = t_sim + system.segment_length(j) + 2.0 * dt;
        right.push(KernelLines::new(cache.get(system, j, Direction::Rightward, horizon, dt)?, n));
        left.push(KernelLines::new(cache.get(system, j, Direction::Leftward, horizon, dt)?, n));
    }
    let memories: Vec<Option<Vec<f64>>> = (1..=system.n_masses())
        .map(|j| {
            let psi: Vec<f64> = right[j].base_dy.iter().zip(&left[j - 1].base_dy).map(|(a, b)| a + b).collect();
            if all_zero(&psi) {
                None
            } else {
                Some(cumtrapz(&psi, dt))
            }
        })
        .collect();

    let scale = f0.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut src_r = vec![vec![0.0; n]; segs];
    let mut src_l = vec![vec![0.0; n]; segs];
    src_r[0] = f0;
    let mut tot_r = vec![vec![0.0; n]; segs];
    let mut tot_l = vec![vec![0.0; n]; segs];
    let mut mass_traces = vec![vec![0.0; n]; system.n_masses()];
    let mut generations = 0;
    let zero = vec![0.0; n];
    loop {
        if generations >= options.reflection_budget {
            let amplitude = src_r.iter().chain(&src_l).flatten().fold(0.0f64, |m, v| m.max(v.abs()));
            return Err(DynamicsError::BudgetExceeded { budget: options.reflection_budget, amplitude });
        }
        generations += 1;
        for j in 0..segs {
            for i in 0..n {
                tot_r[j][i] += src_r[j][i];
                tot_l[j][i] += src_l[j][i];
            }
        }
        let arrive = |lines: &KernelLines, g: &Vec<f64>| {
            if all_zero(g) {
                (zero.clone(), zero.clone())
            } else {
                lines.arrival(g, dt)
            }
        };
        let arr_r: Vec<_> = (0..segs).map(|j| arrive(&right[j], &src_r[j])).collect();
        let arr_l: Vec<_> = (0..segs).map(|j| arrive(&left[j], &src_l[j])).collect();
        let mut new_r = vec![vec![0.0; n]; segs];
        let mut new_l = vec![vec![0.0; n]; segs];
        for i in 0..n {
            new_r[0][i] -= arr_l[0].0[i];
            new_l[segs - 1][i] -= arr_r[segs - 1].0[i];
        }
        for j in 1..=system.n_masses() {
            let (v_l, iwx_l) = &arr_r[j - 1];
            let (v_r, iwx_r) = &arr_l[j];
            if all_zero(v_l) && all_zero(v_r) {
                continue;
            }
            let back_l = reflected_term(&left[j - 1].base_dy, v_l, dt);
            let back_r = reflected_term(&right[j].base_dy, v_r, dt);
            let forcing: Vec<f64> =
                (0..n).map(|i| v_l[i] - iwx_l[i] - back_l[i] + v_r[i] - iwx_r[i] - back_r[i]).collect();
            let h = solve_mass(system.bead(j).mass, &forcing, memories[j - 1].as_deref(), dt);
            for i in 0..n {
                mass_traces[j - 1][i] += h[i];
                new_l[j - 1][i] += h[i] - v_l[i];
                new_r[j][i] += h[i] - v_r[i];
            }
        }
        let live = new_r.iter().chain(&new_l).flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        if live <= options.prune_tol * scale {
            break;
        }
        src_r = new_r;
        src_l = new_l;
    }
    Ok(CharacteristicSolution {
        system: system.clone(),
        dt,
        t_end,
        right_sources: tot_r,
        left_sources: tot_l,
        right_kernels: right.into_iter().map(|l| l.table).collect(),
        left_kernels: left.into_iter().map(|l| l.table).collect(),
        mass_traces,
        generations,
        output_dx: options.output_dx.unwrap_or(dt),
    })
}

/// `∫_0^t (k_y(0,·) * v)`; zero for a vanishing kernel.
fn reflected_term(base_dy: &[f64], v: &[f64], dt: f64) -> Vec<f64> {
    if all_zero(base_dy) || all_zero(v) {
        return vec![0.0; v.len()];
    }
    cumtrapz(&causal_conv(base_dy, v, dt), dt)
}

impl CharacteristicSolution {
    pub fn step(&self) -> f64 {
        self.dt
    }

    pub fn generations(&self) -> usize {
        self.generations
    }

    /// `u(x, t)` inside segment `j`, `t <= T + dt`.
    pub fn displacement_in(&self, j: usize, x: f64, t: f64) -> f64 {
        let (a, b) = (self.system.node(j), self.system.node(j + 1));
        let x = x.clamp(a, b);
        wave_value(&self.right_sources[j], self.dt, &self.right_kernels[j], x - a, t)
            + wave_value(&self.left_sources[j], self.dt, &self.left_kernels[j], b - x, t)
    }

    pub fn displacement(&self, x: f64, t: f64) -> f64 {
        self.displacement_in(self.system.segment_of(x), x, t)
    }

    /// `h_j` on `[0, T + dt]`, `j` 1-based.
    pub fn mass_trace(&self, j: usize) -> SampledFunction {
        SampledFunction { start: 0.0, step: self.dt, values: self.mass_traces[j - 1].clone(), domain: Domain::Time }
    }

    /// State at time `T` on a grid of spacing `dx`; velocities by central
    /// differences with the time step.
    pub fn snapshot_with(&self, dx: f64) -> StateSnapshot {
        let t = self.t_end;
        let dt = self.dt;
        let displacement = Profile::from_fn(&self.system, dx, |j, x| self.displacement_in(j, x, t));
        let velocity = Profile::from_fn(&self.system, dx, |j, x| {
            (self.displacement_in(j, x, t + dt) - self.displacement_in(j, x, t - dt)) / (2.0 * dt)
        });
        let n = ((t / dt).round()) as usize;
        let masses = (0..self.system.n_masses())
            .map(|i| {
                let tr = &self.mass_traces[i];
                MassState {
                    position: self.system.node(i + 1),
                    h: tr[n],
                    h_dot: (tr[n + 1] - tr[n - 1]) / (2.0 * dt),
                }
            })
            .collect();
        StateSnapshot { time: t, displacement, velocity, masses }
    }

    pub fn snapshot(&self) -> StateSnapshot {
        self.snapshot_with(self.output_dx)
    }
}

/// Forward simulation by superposition of wave branches.
pub fn simulate_characteristics(
    system: &StringSystem,
    f: &ControlSignal,
    t_end: f64,
    reflection_budget: usize,
) -> Result<StateSnapshot, DynamicsError> {
    let options = CharacteristicOptions { reflection_budget, ..Default::default() };
    Ok(solve_characteristics(system, f, t_end, &options)?.snapshot())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Potential;

    fn one_mass(q: Option<f64>) -> StringSystem {
        let pots = match q {
            None => vec![],
            Some(c) => vec![Potential::constant(c), Potential::constant(c)],
        };
        StringSystem::new(1.0, &[(0.5, 1.0)], pots).unwrap()
    }

    #[test]
    fn free_propagation_is_a_shift() {
        let s = one_mass(None);
        let mut cache = KernelCache::new();
        let k = cache.get(&s, 0, Direction::Rightward, 1.0, 0.01).unwrap();
        let f = SampledFunction::time_signal(1.0, 0.001, |t| t.sin());
        let u = propagate(&f, &k, 0.0, Direction::Rightward, 0.3, 0.8).unwrap();
        assert!((u - 0.5f64.sin()).abs() < 1e-10);
        assert_eq!(propagate(&f, &k, 0.0, Direction::Rightward, 0.4, 0.3).unwrap(), 0.0);
    }

    #[test]
    fn ramp_closed_form() {
        let s = one_mass(None);
        let mut cache = KernelCache::new();
        let dt = 1e-3;
        let op = TransmissionOperator::new(&s, &mut cache, 1, Side::Left, 2.0, dt).unwrap();
        let f = SampledFunction::time_signal(2.0, dt, |t| t);
        let h = op.apply(&f).unwrap();
        let err = h
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let t = i as f64 * dt;
                (v - (t - 0.5 * (1.0 - (-2.0 * t).exp()))).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn round_trip_with_potential() {
        let s = one_mass(Some(1.0));
        let mut cache = KernelCache::new();
        let dt = 1e-3;
        let op = TransmissionOperator::new(&s, &mut cache, 1, Side::Left, 1.0, dt).unwrap();
        let f = SampledFunction::time_signal(1.0, dt, |t| (3.0 * t).sin() + 0.5 * t * t);
        let back = op.inverse(&op.apply(&f).unwrap()).unwrap();
        let err = back.values.iter().zip(&f.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn inverse_rejects_nonzero_start() {
        let s = one_mass(None);
        let mut cache = KernelCache::new();
        let op = TransmissionOperator::new(&s, &mut cache, 1, Side::Left, 1.0, 0.01).unwrap();
        let h = SampledFunction::time_signal(1.0, 0.01, |t| 1.0 + t);
        assert!(matches!(op.inverse(&h), Err(DynamicsError::NonzeroStart(_))));
    }

    #[test]
    fn before_first_mass_only_the_launched_wave() {
        let s = one_mass(Some(1.0));
        let f = SampledFunction::time_signal(0.4, 2e-3, |t| (t * 5.0).sin().powi(2));
        let sol = solve_characteristics(&s, &f, 0.4, &CharacteristicOptions::default()).unwrap();
        let mut cache = KernelCache::new();
        let k = cache.get(&s, 0, Direction::Rightward, 1.0, 2e-3).unwrap();
        for &x in &[0.05, 0.2, 0.35] {
            let direct = propagate(&f, &k, 0.0, Direction::Rightward, x, 0.4).unwrap();
            assert!((sol.displacement(x, 0.4) - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn fixed_end_reflection_cancels() {
        let s = StringSystem::new(1.0, &[], vec![Potential::constant(1.0)]).unwrap();
        let f = SampledFunction::time_signal(2.0, 2e-3, |t| crate::numerics::bump(t, 0.3, 0.25, 4));
        let sol = solve_characteristics(&s, &f, 2.0, &CharacteristicOptions::default()).unwrap();
        let worst = (0..100).map(|i| sol.displacement(1.0, 0.02 * i as f64).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn continuity_at_masses() {
        let s = StringSystem::free(1.0, &[(0.4, 1.0), (0.7, 2.0)]).unwrap();
        let f = SampledFunction::time_signal(2.0, 2e-3, |t| crate::numerics::bump(t, 0.3, 0.25, 4));
        let sol = solve_characteristics(&s, &f, 2.0, &CharacteristicOptions::default()).unwrap();
        for j in 1..=2 {
            let a = s.node(j);
            for i in 0..40 {
                let t = 0.05 * i as f64;
                let l = sol.displacement_in(j - 1, a, t);
                let r = sol.displacement_in(j, a, t);
                let h = sol.mass_trace(j).eval(t);
                assert!((l - r).abs() < 1e-6 && (l - h).abs() < 1e-6, "j={j} t={t}: {l} {r} {h}");
            }
        }
    }
}
