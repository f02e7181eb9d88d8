//! String geometry, bead masses, segment potentials and the sampled-function
//! types shared by every other module.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("nonpositive length: ell = {0}")]
    NonpositiveLength(f64),
    #[error("non-monotone positions: mass {index} at a = {position}")]
    NonMonotonePositions { index: usize, position: f64 },
    #[error("nonpositive mass: M_{index} = {mass}")]
    NonpositiveMass { index: usize, mass: f64 },
    #[error("expected {expected} segment potentials, got {got}")]
    PotentialCount { expected: usize, got: usize },
    #[error("unevaluable potential on segment {index}: {reason}")]
    BadPotential { index: usize, reason: String },
    #[error("invalid sampling: {0}")]
    Sampling(String),
}

/// Config file layout. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub ell: f64,
    pub masses: Vec<RawMass>,
    #[serde(default)]
    pub potentials: Vec<RawPotential>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawMass {
    pub a: f64,
    #[serde(rename = "M")]
    pub m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PotentialKind {
    Polynomial,
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPotential {
    pub kind: PotentialKind,
    pub data: Vec<f64>,
}

/// Potential on one segment.
///
/// Polynomial coefficients are in the global coordinate `x` (lowest degree
/// first). Samples are uniform over the closed segment and interpolated
/// linearly.
#[derive(Debug, Clone, PartialEq)]
pub enum Potential {
    Polynomial(Vec<f64>),
    Samples(Vec<f64>),
}

impl Potential {
    pub fn zero() -> Self {
        Potential::Polynomial(vec![])
    }

    pub fn constant(c: f64) -> Self {
        Potential::Polynomial(vec![c])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPotential {
    start: f64,
    end: f64,
    potential: Potential,
}

impl SegmentPotential {
    /// Evaluates q at `x`, clamping `x` into the segment.
    pub fn eval(&self, x: f64) -> f64 {
        let x = x.clamp(self.start, self.end);
        match &self.potential {
            Potential::Polynomial(c) => c.iter().rev().fold(0.0, |acc, &ck| acc * x + ck),
            Potential::Samples(s) => {
                if s.len() == 1 {
                    return s[0];
                }
                let h = (self.end - self.start) / (s.len() - 1) as f64;
                let pos = (x - self.start) / h;
                let i = (pos.floor() as usize).min(s.len() - 2);
                let w = pos - i as f64;
                s[i] * (1.0 - w) + s[i + 1] * w
            }
        }
    }

    /// Derivatives `q^(k)(x)` for `k = 0..=order`, with `x` clamped.
    pub fn derivatives(&self, x: f64, order: usize) -> Vec<f64> {
        let x = x.clamp(self.start, self.end);
        let mut out = vec![0.0; order + 1];
        match &self.potential {
            Potential::Polynomial(c) => {
                let mut coeffs = c.clone();
                for slot in out.iter_mut() {
                    *slot = coeffs.iter().rev().fold(0.0, |acc, &ck| acc * x + ck);
                    coeffs = coeffs
                        .iter()
                        .enumerate()
                        .skip(1)
                        .map(|(k, ck)| ck * k as f64)
                        .collect();
                }
            }
            Potential::Samples(s) => {
                out[0] = self.eval(x);
                if order >= 1 && s.len() > 1 {
                    let h = (self.end - self.start) / (s.len() - 1) as f64;
                    let i = (((x - self.start) / h).floor() as usize).min(s.len() - 2);
                    out[1] = (s[i + 1] - s[i]) / h;
                }
            }
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        match &self.potential {
            Potential::Polynomial(c) => c.iter().all(|&v| v == 0.0),
            Potential::Samples(s) => s.iter().all(|&v| v == 0.0),
        }
    }

    /// Max of |q| over the segment (sampled densely for polynomials).
    pub fn sup_abs(&self) -> f64 {
        match &self.potential {
            Potential::Polynomial(c) if c.len() <= 1 => c.first().map_or(0.0, |v| v.abs()),
            Potential::Polynomial(_) => (0..=256)
                .map(|i| {
                    let x = self.start + (self.end - self.start) * i as f64 / 256.0;
                    self.eval(x).abs()
                })
                .fold(0.0, f64::max),
            Potential::Samples(s) => s.iter().fold(0.0, |m, v| m.max(v.abs())),
        }
    }

    /// Number of continuous derivatives the encoding guarantees.
    pub fn smoothness(&self) -> usize {
        match &self.potential {
            Potential::Polynomial(_) => usize::MAX,
            Potential::Samples(_) => 0,
        }
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bead {
    pub position: f64,
    pub mass: f64,
}

/// Validated, immutable description of the string.
///
/// Node `0` is the controlled end, nodes `1..=N` carry beads, node `N + 1`
/// is the fixed end. Segment `j` spans nodes `j` and `j + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct StringSystem {
    ell: f64,
    beads: Vec<Bead>,
    nodes: Vec<f64>,
    potentials: Vec<SegmentPotential>,
    warnings: Vec<String>,
}

impl StringSystem {
    pub fn new(ell: f64, beads: &[(f64, f64)], potentials: Vec<Potential>) -> Result<Self, ModelError> {
        if !(ell > 0.0) || !ell.is_finite() {
            return Err(ModelError::NonpositiveLength(ell));
        }
        let mut nodes = Vec::with_capacity(beads.len() + 2);
        nodes.push(0.0);
        for (i, &(a, m)) in beads.iter().enumerate() {
            let prev = *nodes.last().unwrap();
            if !(a > prev) || !(a < ell) || !a.is_finite() {
                return Err(ModelError::NonMonotonePositions { index: i + 1, position: a });
            }
            if !(m > 0.0) || !m.is_finite() {
                return Err(ModelError::NonpositiveMass { index: i + 1, mass: m });
            }
            nodes.push(a);
        }
        nodes.push(ell);
        let n_seg = beads.len() + 1;
        let potentials = if potentials.is_empty() {
            vec![Potential::zero(); n_seg]
        } else {
            potentials
        };
        if potentials.len() != n_seg {
            return Err(ModelError::PotentialCount { expected: n_seg, got: potentials.len() });
        }
        let mut segs = Vec::with_capacity(n_seg);
        let mut warnings = Vec::new();
        for (j, p) in potentials.into_iter().enumerate() {
            let bad = |reason: &str| ModelError::BadPotential { index: j, reason: reason.to_string() };
            match &p {
                Potential::Polynomial(c) if c.iter().any(|v| !v.is_finite()) => {
                    return Err(bad("non-finite coefficient"))
                }
                Potential::Samples(s) if s.is_empty() => return Err(bad("no samples")),
                Potential::Samples(s) if s.iter().any(|v| !v.is_finite()) => {
                    return Err(bad("non-finite sample"))
                }
                _ => {}
            }
            let sp = SegmentPotential { start: nodes[j], end: nodes[j + 1], potential: p };
            let needed = j.saturating_sub(2);
            if sp.smoothness() < needed && !sp.is_zero() {
                warnings.push(format!(
                    "segment {j}: potential is C^{} but C^{needed} is assumed",
                    sp.smoothness()
                ));
            }
            segs.push(sp);
        }
        Ok(StringSystem { ell, beads: beads.iter().map(|&(a, m)| Bead { position: a, mass: m }).collect(), nodes, potentials: segs, warnings })
    }

    /// String without potential.
    pub fn free(ell: f64, beads: &[(f64, f64)]) -> Result<Self, ModelError> {
        Self::new(ell, beads, vec![])
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self, ModelError> {
        let beads: Vec<(f64, f64)> = raw.masses.iter().map(|m| (m.a, m.m)).collect();
        let pots = raw
            .potentials
            .iter()
            .map(|p| match p.kind {
                PotentialKind::Polynomial => Potential::Polynomial(p.data.clone()),
                PotentialKind::Samples => Potential::Samples(p.data.clone()),
            })
            .collect();
        Self::new(raw.ell, &beads, pots)
    }

    pub fn to_raw(&self) -> RawConfig {
        RawConfig {
            ell: self.ell,
            masses: self.beads.iter().map(|b| RawMass { a: b.position, m: b.mass }).collect(),
            potentials: self
                .potentials
                .iter()
                .map(|p| match &p.potential {
                    Potential::Polynomial(c) => RawPotential { kind: PotentialKind::Polynomial, data: c.clone() },
                    Potential::Samples(s) => RawPotential { kind: PotentialKind::Samples, data: s.clone() },
                })
                .collect(),
        }
    }

    pub fn ell(&self) -> f64 {
        self.ell
    }

    /// Number of beads `N`.
    pub fn n_masses(&self) -> usize {
        self.beads.len()
    }

    pub fn n_segments(&self) -> usize {
        self.beads.len() + 1
    }

    /// `a_j` for `j = 0..=N+1` (with `a_0 = 0`, `a_{N+1} = ell`).
    pub fn node(&self, j: usize) -> f64 {
        self.nodes[j]
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    /// Bead at node `j`, `1 <= j <= N`.
    pub fn bead(&self, j: usize) -> Bead {
        self.beads[j - 1]
    }

    pub fn beads(&self) -> &[Bead] {
        &self.beads
    }

    pub fn segment_length(&self, j: usize) -> f64 {
        self.nodes[j + 1] - self.nodes[j]
    }

    pub fn segment_lengths(&self) -> Vec<f64> {
        (0..self.n_segments()).map(|j| self.segment_length(j)).collect()
    }

    /// Step length used by the shape-control march: twice the shortest segment.
    pub fn lambda_step(&self) -> f64 {
        2.0 * self.segment_lengths().into_iter().fold(f64::INFINITY, f64::min)
    }

    pub fn potential(&self, j: usize) -> &SegmentPotential {
        &self.potentials[j]
    }

    /// q on segment `j` at global position `x` (clamped into the segment).
    pub fn q(&self, j: usize, x: f64) -> f64 {
        self.potentials[j].eval(x)
    }

    pub fn is_potential_free(&self) -> bool {
        self.potentials.iter().all(|p| p.is_zero())
    }

    pub fn q_sup(&self) -> f64 {
        self.potentials.iter().map(|p| p.sup_abs()).fold(0.0, f64::max)
    }

    /// Segment containing `x`; nodes belong to the segment on their left
    /// except `x = 0`.
    pub fn segment_of(&self, x: f64) -> usize {
        for j in 0..self.n_segments() {
            if x <= self.nodes[j + 1] {
                return j;
            }
        }
        self.n_segments() - 1
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Same geometry and beads with potentials replaced.
    pub fn with_potentials(&self, potentials: Vec<Potential>) -> Result<Self, ModelError> {
        let beads: Vec<(f64, f64)> = self.beads.iter().map(|b| (b.position, b.mass)).collect();
        Self::new(self.ell, &beads, potentials)
    }

    /// The bare last segment `(a_N, ell)` shifted to start at the origin.
    pub fn last_segment(&self) -> StringSystem {
        let j = self.n_masses();
        let shift = self.nodes[j];
        let len = self.segment_length(j);
        let pot = match &self.potentials[j].potential {
            Potential::Polynomial(c) => Potential::Polynomial(shift_polynomial(c, shift)),
            Potential::Samples(s) => Potential::Samples(s.clone()),
        };
        StringSystem::new(len, &[], vec![pot]).expect("segment of a valid system is valid")
    }
}

/// Coefficients of `p(x + shift)`.
fn shift_polynomial(c: &[f64], shift: f64) -> Vec<f64> {
    let n = c.len();
    let mut out = vec![0.0; n];
    for (k, &ck) in c.iter().enumerate() {
        let mut binom = 1.0;
        for i in 0..=k {
            out[i] += ck * binom * shift.powi((k - i) as i32);
            binom = binom * (k - i) as f64 / (i + 1) as f64;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Time,
    Segment(usize),
}

/// Uniform samples of a real function.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledFunction {
    pub start: f64,
    pub step: f64,
    pub values: Vec<f64>,
    pub domain: Domain,
}

/// A boundary control sampled on `[0, T]`.
pub type ControlSignal = SampledFunction;

impl SampledFunction {
    pub fn new(start: f64, step: f64, values: Vec<f64>, domain: Domain) -> Result<Self, ModelError> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(ModelError::Sampling(format!("step must be positive, got {step}")));
        }
        if values.is_empty() {
            return Err(ModelError::Sampling("no samples".into()));
        }
        Ok(SampledFunction { start, step, values, domain })
    }

    /// `n + 1` samples of `f` on `[start, end]`.
    pub fn from_fn(start: f64, end: f64, n: usize, domain: Domain, f: impl Fn(f64) -> f64) -> Self {
        let n = n.max(1);
        let step = (end - start) / n as f64;
        let values = (0..=n).map(|i| f(if i == n { end } else { start + step * i as f64 })).collect();
        SampledFunction { start, step, values, domain }
    }

    /// Time signal on `[0, t_end]` with step `dt` (rounded so that `t_end` is a node).
    pub fn time_signal(t_end: f64, dt: f64, f: impl Fn(f64) -> f64) -> Self {
        let n = ((t_end / dt).round() as usize).max(1);
        Self::from_fn(0.0, t_end, n, Domain::Time, f)
    }

    pub fn zeros_like(&self) -> Self {
        SampledFunction { values: vec![0.0; self.values.len()], ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end(&self) -> f64 {
        self.start + self.step * (self.values.len() - 1) as f64
    }

    pub fn abscissa(&self, i: usize) -> f64 {
        self.start + self.step * i as f64
    }

    pub fn first(&self) -> f64 {
        self.values[0]
    }

    pub fn last(&self) -> f64 {
        *self.values.last().unwrap()
    }

    /// Linear interpolation, clamped at the ends.
    pub fn eval_linear(&self, x: f64) -> f64 {
        let n = self.values.len();
        if n == 1 {
            return self.values[0];
        }
        let pos = ((x - self.start) / self.step).clamp(0.0, (n - 1) as f64);
        let i = (pos.floor() as usize).min(n - 2);
        let w = pos - i as f64;
        self.values[i] * (1.0 - w) + self.values[i + 1] * w
    }

    /// Four-point Lagrange interpolation. Time signals vanish outside their
    /// window; spatial samples are clamped.
    pub fn eval(&self, x: f64) -> f64 {
        let pos = (x - self.start) / self.step;
        let n = self.values.len();
        if self.domain == Domain::Time && (pos < -1e-9 || pos > (n - 1) as f64 + 1e-9) {
            return 0.0;
        }
        crate::numerics::interp_uniform(&self.values, pos.clamp(0.0, (n - 1) as f64))
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// L2 norm by the trapezoid rule.
    pub fn l2_norm(&self) -> f64 {
        crate::numerics::trapz_sq(&self.values, self.step).sqrt()
    }

    pub fn scaled(&self, a: f64) -> Self {
        SampledFunction { values: self.values.iter().map(|v| a * v).collect(), ..self.clone() }
    }
}

/// Per-segment samples of a spatial profile; segment `j` covers the closed
/// interval `[a_j, a_{j+1}]`, so its end samples are one-sided limits.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub segments: Vec<SampledFunction>,
}

impl Profile {
    /// Grid with roughly `dx` spacing (at least `min_intervals` per segment).
    pub fn from_fn(system: &StringSystem, dx: f64, f: impl Fn(usize, f64) -> f64) -> Self {
        let segments = (0..system.n_segments())
            .map(|j| {
                let (a, b) = (system.node(j), system.node(j + 1));
                let n = (((b - a) / dx).round() as usize).max(4);
                SampledFunction::from_fn(a, b, n, Domain::Segment(j), |x| f(j, x))
            })
            .collect();
        Profile { segments }
    }

    pub fn zeros(system: &StringSystem, dx: f64) -> Self {
        Self::from_fn(system, dx, |_, _| 0.0)
    }

    pub fn zeros_like(&self) -> Self {
        Profile { segments: self.segments.iter().map(|s| s.zeros_like()).collect() }
    }

    /// Same grid, new values.
    pub fn map(&self, f: impl Fn(usize, f64, f64) -> f64) -> Self {
        Profile {
            segments: self
                .segments
                .iter()
                .enumerate()
                .map(|(j, s)| SampledFunction {
                    values: s.values.iter().enumerate().map(|(i, &v)| f(j, s.abscissa(i), v)).collect(),
                    ..s.clone()
                })
                .collect(),
        }
    }

    /// Resamples `f` on this profile's grid.
    pub fn sample_like(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        self.map(|j, x, _| f(j, x))
    }

    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Value at `x` inside segment `j` (linear interpolation).
    pub fn eval(&self, j: usize, x: f64) -> f64 {
        self.segments[j].eval_linear(x)
    }

    /// `u(a_j^-)` for `j >= 1`.
    pub fn left_limit(&self, j: usize) -> f64 {
        self.segments[j - 1].last()
    }

    /// `u(a_j^+)` for `j <= N`.
    pub fn right_limit(&self, j: usize) -> f64 {
        self.segments[j].first()
    }

    pub fn max_abs(&self) -> f64 {
        self.segments.iter().map(|s| s.max_abs()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, a: f64) -> Self {
        self.map(|_, _, v| a * v)
    }

    /// `self + a * other` on this grid; `other` is resampled if its grid differs.
    pub fn axpy(&self, a: f64, other: &Profile) -> Profile {
        self.map(|j, x, v| {
            let o = &other.segments[j];
            let same = o.len() == self.segments[j].len();
            let ov = if same {
                let i = ((x - o.start) / o.step).round() as usize;
                o.values[i.min(o.len() - 1)]
            } else {
                o.eval_linear(x)
            };
            v + a * ov
        })
    }

    pub fn sub(&self, other: &Profile) -> Profile {
        self.axpy(-1.0, other)
    }

    pub fn add(&self, other: &Profile) -> Profile {
        self.axpy(1.0, other)
    }

    /// Resample onto `grid`'s abscissae by linear interpolation.
    pub fn resample_to(&self, grid: &Profile) -> Profile {
        grid.map(|j, x, _| self.segments[j].eval_linear(x))
    }

    /// Resample onto `grid`'s abscissae by four-point interpolation; keeps
    /// derivative-based norms second-order accurate.
    pub fn resample_smooth(&self, grid: &Profile) -> Profile {
        grid.map(|j, x, _| self.segments[j].eval(x))
    }

    /// True when both profiles share segment grids.
    pub fn same_grid(&self, other: &Profile) -> bool {
        self.segments.len() == other.segments.len()
            && self.segments.iter().zip(&other.segments).all(|(a, b)| {
                a.len() == b.len() && (a.start - b.start).abs() < 1e-12 && (a.step - b.step).abs() < 1e-12 * a.step
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassState {
    pub position: f64,
    pub h: f64,
    pub h_dot: f64,
}

/// Terminal state of a simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    pub time: f64,
    pub displacement: Profile,
    pub velocity: Profile,
    pub masses: Vec<MassState>,
}

impl StateSnapshot {
    /// Largest `|h_j(T) - u(a_j^+, T)|`.
    pub fn mass_consistency(&self) -> f64 {
        self.masses
            .iter()
            .enumerate()
            .map(|(i, m)| (m.h - self.displacement.right_limit(i + 1)).abs())
            .fold(0.0, f64::max)
    }
}
