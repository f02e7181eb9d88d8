//! Boundary controls: terminal shape or velocity alone by a right-to-left
//! march from the wavefront, endpoint derivative targeting, Riesz bases of
//! the terminal spaces, and full terminal-state control by a moment problem
//! over divided-difference families.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::dynamics::{solve_characteristics, CharacteristicOptions, CharacteristicSolution, DynamicsError, Side, TransmissionOperator};
use crate::edd::{dd_numbers, dd_reconstruct, DdFamily, DdKind, EddError, C64};
use crate::fd::{run_fd, FdError, FdGrid, FdRecord, DEFAULT_CFL};
use crate::kernel::{Direction, KernelCache, KernelError};
use crate::model::{ControlSignal, Domain, Profile, SampledFunction, StringSystem};
use crate::numerics::{bump, cumtrapz, end_derivatives, par_map, simpson_weights, smooth_step};
use crate::spaces::{
    check_order, inner_w0, inner_wm1, norm_w0, norm_w0_sq, norm_wm1, norm_wm1_sq, scaled_tolerance,
    CompatibilityReport, SpacesError,
};
use crate::spectral::{eigenfunction, first_clusters, ClusterSet, EigenData, SpectralError};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("target fails compatibility at order {order}: {failures} condition(s), worst residual {worst:e}")]
    Incompatible { order: i32, failures: usize, worst: f64, report: Box<CompatibilityReport> },
    #[error("target is nonzero ({value:e}) at x = {x}, beyond the wavefront x = {front}")]
    Support { x: f64, front: f64, value: f64 },
    #[error("endpoint data not admissible: derivative {index} must be {expected:e}, got {got:e}")]
    EndpointData { index: usize, expected: f64, got: f64 },
    #[error("endpoint map is singular for every trial bump placement")]
    SingularEndpointMap,
    #[error("remainder did not shrink at step {step}: residual {residual:e}")]
    NotDecreasing { step: usize, residual: f64 },
    #[error("horizon {t} must exceed 2ℓ = {limit}")]
    Horizon { t: f64, limit: f64 },
    #[error("mode {index} (λ = {lambda}) has φ'(0) = {slope:e}")]
    VanishingSlope { index: usize, lambda: f64, slope: f64 },
    #[error("gram solve failed: {0}")]
    Gram(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Edd(#[from] EddError),
    #[error(transparent)]
    Spaces(#[from] SpacesError),
    #[error(transparent)]
    Fd(#[from] FdError),
    #[error("invalid request: {0}")]
    Request(String),
}

impl ControlError {
    /// True for refusals caused by the input rather than by numerics.
    pub fn is_precondition(&self) -> bool {
        matches!(
            self,
            ControlError::Incompatible { .. }
                | ControlError::Support { .. }
                | ControlError::EndpointData { .. }
                | ControlError::Horizon { .. }
                | ControlError::Request(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TargetKind {
    Displacement,
    Velocity,
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    /// Control sampling step.
    pub dt: f64,
    /// Relative tolerance for compatibility and support checks.
    pub tol: f64,
    pub reflection_budget: usize,
    /// Slack `δ` for the `T > ℓ` path; defaults to `min(T - ℓ, 0.9 Λ/4)`.
    pub delta: Option<f64>,
    /// Largest admissible residual on the solved region, relative to the target.
    pub residual_limit: f64,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        SynthesisOptions { dt: 1e-3, tol: 1e-3, reflection_budget: 64, delta: None, residual_limit: 5e-2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub front: f64,
    pub width: f64,
    pub segment: usize,
    pub refinement: usize,
    /// Max residual on the solved region relative to the target's sup.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EndpointControl {
    /// `g` on `[0, 2δ]`.
    pub g: SampledFunction,
    pub coefficients: Vec<f64>,
    pub center: f64,
    /// Indices of the targeted derivatives.
    pub free: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Synthesis {
    pub control: ControlSignal,
    pub steps: Vec<StepRecord>,
    pub endpoint: Option<EndpointControl>,
    pub compatibility: CompatibilityReport,
}

fn time_signal(step: f64, values: Vec<f64>) -> SampledFunction {
    SampledFunction { start: 0.0, step, values, domain: Domain::Time }
}

/// Solves `data(σ) = H(σ) + ∫_0^σ K(y, t - σ') H(σ') dσ'`, `y = t - σ`,
/// `t = front - a_j`, on `σ_i = i · step`.
fn front_solve(
    system: &StringSystem,
    cache: &mut KernelCache,
    j: usize,
    data: &[f64],
    front: f64,
    step: f64,
) -> Result<Vec<f64>, ControlError> {
    let t = front - system.node(j);
    let kernel = cache.get(system, j, Direction::Rightward, t + 2.0 * step, step)?;
    if kernel.is_zero() {
        return Ok(data.to_vec());
    }
    let mut h: Vec<f64> = Vec::with_capacity(data.len());
    for (i, &d) in data.iter().enumerate() {
        if i == 0 {
            h.push(d);
            continue;
        }
        let y = t - i as f64 * step;
        let mut acc = 0.5 * kernel.value(y, t) * h[0];
        for (k, hk) in h.iter().enumerate().skip(1) {
            acc += kernel.value(y, t - k as f64 * step) * hk;
        }
        h.push((d - step * acc) / (1.0 + 0.5 * step * kernel.value(y, y)));
    }
    Ok(h)
}

/// `S_1⁻¹ ⋯ S_j⁻¹ h`: first-arrival inverse through masses `j, …, 1`.
fn chain_inverse(
    system: &StringSystem,
    cache: &mut KernelCache,
    j: usize,
    h: Vec<f64>,
    step: f64,
) -> Result<Vec<f64>, ControlError> {
    let mut cur = h;
    for i in (1..=j).rev() {
        let scale = cur.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if cur[0].abs() > 1e-3 * scale {
            return Err(DynamicsError::NonzeroStart(cur[0]).into());
        }
        cur[0] = 0.0;
        let horizon = (cur.len() - 1) as f64 * step;
        let op = TransmissionOperator::new(system, cache, i, Side::Left, horizon, step)?;
        cur = op.inverse(&time_signal(step, cur))?.values;
    }
    Ok(cur)
}

fn realized(sol: Option<&CharacteristicSolution>, j: usize, x: f64, t: f64, kind: TargetKind) -> f64 {
    match sol {
        None => 0.0,
        Some(s) => match kind {
            TargetKind::Displacement => s.displacement_in(j, x, t),
            TargetKind::Velocity => {
                let h = s.step();
                (s.displacement_in(j, x, t + h) - s.displacement_in(j, x, t - h)) / (2.0 * h)
            }
        },
    }
}

/// Segment whose interior holds `x` from the left: largest `j` with `a_j < x`.
fn front_segment(system: &StringSystem, x: f64) -> usize {
    let tiny = 1e-12 * system.ell();
    (0..system.n_segments()).rev().find(|&j| system.node(j) < x - tiny).unwrap_or(0)
}

/// The `T ≤ ℓ` routine: windows of width at most `Λ` from the front
/// `x = T` leftwards; each window is a Volterra solve followed by the
/// first-arrival inverse, then the realized state is subtracted.
fn march(
    system: &StringSystem,
    target: &Profile,
    t_end: f64,
    kind: TargetKind,
    opts: &SynthesisOptions,
) -> Result<(ControlSignal, Vec<StepRecord>), ControlError> {
    let n_t = ((t_end / opts.dt).ceil() as usize).max(8);
    let dt = t_end / n_t as f64;
    let lam = system.lambda_step();
    let scale = target.max_abs().max(f64::MIN_POSITIVE);
    let cap = 2 * (t_end / lam).ceil() as usize + system.n_segments();
    let sim = CharacteristicOptions { reflection_budget: opts.reflection_budget, ..Default::default() };
    let mut control = vec![0.0; n_t + 1];
    let mut cache = KernelCache::new();
    let mut sol: Option<CharacteristicSolution> = None;
    let mut steps = Vec::new();
    let mut front = t_end;
    let mut shift = 0.0;
    let mut refinement = 1usize;
    let eps = 1e-9 * dt;
    while front > eps {
        if steps.len() >= cap {
            return Err(ControlError::NotDecreasing { step: steps.len(), residual: f64::NAN });
        }
        let j = front_segment(system, front);
        let c = lam.min(front - system.node(j));
        let n = ((c / dt).ceil() as usize).max(8) * refinement;
        let step = c / n as f64;
        let data: Vec<f64> = (0..=n)
            .map(|i| {
                let x = (front - i as f64 * step).max(system.node(j));
                target.segments[j].eval(x) - realized(sol.as_ref(), j, x, t_end, kind)
            })
            .collect();
        let mut h = front_solve(system, &mut cache, j, &data, front, step)?;
        if kind == TargetKind::Velocity {
            h = cumtrapz(&h, step);
        }
        let piece = if j == 0 { h } else { chain_inverse(system, &mut cache, j, h, step)? };
        let piece = time_signal(step, piece);
        // the piece is held at its end value past the window, so window
        // joins carry no jump for the next window to absorb
        let mut cand = control.clone();
        for (i, v) in cand.iter_mut().enumerate() {
            let s = i as f64 * dt - shift;
            if s >= -eps {
                *v += piece.eval(s.clamp(0.0, c));
            }
        }
        let new_sol = solve_characteristics(system, &time_signal(dt, cand.clone()), t_end, &sim)?;
        let mut residual = 0.0f64;
        for (jj, seg) in target.segments.iter().enumerate() {
            for (i, &v) in seg.values.iter().enumerate() {
                let x = seg.abscissa(i);
                if x > front - c + 2.0 * step && x <= t_end {
                    residual = residual.max((v - realized(Some(&new_sol), jj, x, t_end, kind)).abs() / scale);
                }
            }
        }
        if residual > opts.residual_limit {
            if refinement >= 8 {
                return Err(ControlError::NotDecreasing { step: steps.len() + 1, residual });
            }
            refinement *= 2;
            continue;
        }
        steps.push(StepRecord { front, width: c, segment: j, refinement, residual });
        control = cand;
        sol = Some(new_sol);
        front -= c;
        shift += c;
        refinement = 1;
    }
    Ok((time_signal(dt, control), steps))
}

/// Jet of `L φ = -φ'' + q φ` at a point from the jets of `φ` and `q`.
fn l_jet(d: &[f64], q: &[f64]) -> Vec<f64> {
    if d.len() < 3 {
        return vec![];
    }
    let mut binom = vec![1.0f64];
    (0..d.len() - 2)
        .map(|i| {
            if i > 0 {
                let mut next = vec![1.0; i + 1];
                for k in 1..i {
                    next[k] = binom[k - 1] + binom[k];
                }
                binom = next;
            }
            let mut v = -d[i + 2];
            for (l, b) in binom.iter().enumerate() {
                v += b * q.get(l).copied().unwrap_or(0.0) * d[i - l];
            }
            v
        })
        .collect()
}

/// Checks `(L^k φ)(ℓ) = 0` for the even derivatives present in `d`.
fn check_endpoint_relations(system: &StringSystem, d: &[f64], tol: f64) -> Result<(), ControlError> {
    let m = d.len();
    let q = system.potential(system.n_masses()).derivatives(system.ell(), m);
    let scale = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut k = 0;
    while 2 * k < m {
        // value of L^k φ with d_{2k} replaced by zero fixes the admissible d_{2k}
        let mut trial = d[..=2 * k].to_vec();
        trial[2 * k] = 0.0;
        let mut jet = trial;
        for _ in 0..k {
            jet = l_jet(&jet, &q);
        }
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        let expected = -jet[0] / sign;
        if (d[2 * k] - expected).abs() > tol * (1.0 + scale) {
            return Err(ControlError::EndpointData { index: 2 * k, expected, got: d[2 * k] });
        }
        k += 1;
    }
    Ok(())
}

/// Spatial derivatives of `u` (or `u_t`) at `x = ℓ` for the last segment
/// driven by `g` at its left end, at local time `ℓ_N + δ`.
fn endpoint_response(
    last: &StringSystem,
    g: &SampledFunction,
    t_eval: f64,
    order: usize,
    kind: TargetKind,
    budget: usize,
) -> Result<Vec<f64>, ControlError> {
    let sim = CharacteristicOptions { reflection_budget: budget, ..Default::default() };
    let sol = solve_characteristics(last, g, t_eval, &sim)?;
    let len = last.ell();
    let width = order + 5;
    let hx = (len / (4 * width) as f64).min(4.0 * sol.step());
    let vals: Vec<f64> =
        (0..width).rev().map(|k| realized(Some(&sol), 0, len - k as f64 * hx, t_eval, kind)).collect();
    Ok(end_derivatives(&vals, hx, order, width, true))
}

/// A signal `g ∈ H₀ᴺ(0, 2δ)` for mass `N` whose wave gives prescribed
/// derivatives `d_j` (`j < d.len()`) at `x = ℓ` and time `ℓ_N + δ` on the
/// last segment. Only odd derivatives are free; even ones must satisfy the
/// end relations.
pub fn endpoint_targeting(
    system: &StringSystem,
    d: &[f64],
    delta: f64,
    kind: TargetKind,
    opts: &SynthesisOptions,
) -> Result<EndpointControl, ControlError> {
    let lam = system.lambda_step();
    if !(delta > 0.0 && delta < lam / 4.0) {
        return Err(ControlError::Request(format!("slack δ = {delta} must lie in (0, {})", lam / 4.0)));
    }
    check_endpoint_relations(system, d, opts.tol)?;
    let n_g = ((2.0 * delta / opts.dt.min(2.0 * delta / 200.0)).ceil() as usize).max(200);
    let step = 2.0 * delta / n_g as f64;
    let free: Vec<usize> = (0..d.len()).filter(|j| j % 2 == 1).collect();
    let zero = EndpointControl { g: time_signal(step, vec![0.0; n_g + 1]), coefficients: vec![], center: delta, free: free.clone() };
    if free.is_empty() || free.iter().all(|&j| d[j] == 0.0) {
        return Ok(EndpointControl { coefficients: vec![0.0; free.len()], ..zero });
    }
    let last = system.last_segment();
    let t_eval = last.ell() + delta;
    let power = system.n_masses() as i32 + 3;
    let order = d.len() - 1;
    for center in [delta, 0.8 * delta, 1.2 * delta] {
        let hw = center.min(2.0 * delta - center);
        let basis: Vec<SampledFunction> = (1..=free.len())
            .map(|i| {
                let p = match kind {
                    TargetKind::Displacement => 2 * i as i32 - 1,
                    TargetKind::Velocity => 2 * i as i32,
                };
                SampledFunction::time_signal(2.0 * delta, step, |t| ((t - center) / hw).powi(p) * bump(t, center, hw, power))
            })
            .collect();
        let mut a = DMatrix::<f64>::zeros(free.len(), free.len());
        for (i, g) in basis.iter().enumerate() {
            let resp = endpoint_response(&last, g, t_eval, order, kind, opts.reflection_budget)?;
            for (k, &fj) in free.iter().enumerate() {
                a[(k, i)] = resp[fj];
            }
        }
        let sv = a.singular_values();
        let (smax, smin) = (sv.max(), sv.min());
        if !(smin > 1e-10 * smax) {
            continue;
        }
        let rhs = DVector::from_iterator(free.len(), free.iter().map(|&j| d[j]));
        let b = a.clone().lu().solve(&rhs).ok_or(ControlError::SingularEndpointMap)?;
        let mut g = vec![0.0; n_g + 1];
        for (bi, gi) in b.iter().zip(&basis) {
            for (v, w) in g.iter_mut().zip(&gi.values) {
                *v += bi * w;
            }
        }
        return Ok(EndpointControl { g: time_signal(step, g), coefficients: b.iter().copied().collect(), center, free });
    }
    Err(ControlError::SingularEndpointMap)
}

fn check_target(
    system: &StringSystem,
    target: &Profile,
    order: i32,
    tol: f64,
) -> Result<CompatibilityReport, ControlError> {
    if target.n_segments() != system.n_segments() {
        return Err(ControlError::Request(format!(
            "target has {} segments, system has {}",
            target.n_segments(),
            system.n_segments()
        )));
    }
    let report = check_order(target, system, order, tol);
    if !report.passed() || report.skipped > 0 {
        let failures = report.failures().count() + report.skipped;
        return Err(ControlError::Incompatible { order, failures, worst: report.worst_residual(), report: Box::new(report) });
    }
    Ok(report)
}

fn synthesize(
    system: &StringSystem,
    target: &Profile,
    t_end: f64,
    kind: TargetKind,
    opts: &SynthesisOptions,
) -> Result<Synthesis, ControlError> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(ControlError::Request(format!("horizon must be positive, got {t_end}")));
    }
    let order = if kind == TargetKind::Displacement { 0 } else { -1 };
    let compatibility = check_target(system, target, order, opts.tol)?;
    let ell = system.ell();
    let scale = target.max_abs();
    if scale == 0.0 {
        let n = ((t_end / opts.dt).ceil() as usize).max(8);
        let control = time_signal(t_end / n as f64, vec![0.0; n + 1]);
        return Ok(Synthesis { control, steps: vec![], endpoint: None, compatibility });
    }
    if t_end <= ell * (1.0 + 1e-12) {
        for seg in &target.segments {
            for (i, &v) in seg.values.iter().enumerate() {
                let x = seg.abscissa(i);
                if x > t_end + 2.0 * seg.step && v.abs() > opts.tol * scale {
                    return Err(ControlError::Support { x, front: t_end, value: v });
                }
            }
        }
        let (control, steps) = march(system, target, t_end, kind, opts)?;
        return Ok(Synthesis { control, steps, endpoint: None, compatibility });
    }
    // T > ℓ: steer the end data first, then march on the remainder from x = ℓ
    let lam = system.lambda_step();
    let delta = opts.delta.unwrap_or((t_end - ell).min(0.9 * lam / 4.0));
    if delta > t_end - ell + 1e-12 {
        return Err(ControlError::Request(format!("slack δ = {delta} exceeds T - ℓ = {}", t_end - ell)));
    }
    let lead = t_end - ell - delta;
    let n_mass = system.n_masses();
    let m = match kind {
        TargetKind::Displacement => n_mass,
        TargetKind::Velocity => n_mass.saturating_sub(1),
    };
    let last = &target.segments[n_mass];
    let d = if m == 0 { vec![] } else { end_derivatives(&last.values, last.step, m - 1, m + 4, true) };
    let endpoint = endpoint_targeting(system, &d, delta, kind, opts)?;
    let mut cache = KernelCache::new();
    let g = &endpoint.g;
    let fg = if n_mass == 0 { g.values.clone() } else { chain_inverse(system, &mut cache, n_mass, g.values.clone(), g.step)? };
    let fg = time_signal(g.step, fg);
    let horizon = ell + delta;
    let n_h = ((horizon / opts.dt).ceil() as usize).max(8);
    let dt_h = horizon / n_h as f64;
    let padded = time_signal(dt_h, (0..=n_h).map(|i| fg.eval(i as f64 * dt_h)).collect());
    let sim = CharacteristicOptions { reflection_budget: opts.reflection_budget, ..Default::default() };
    let sol = solve_characteristics(system, &padded, horizon, &sim)?;
    let remainder = target.map(|j, x, v| v - realized(Some(&sol), j, x, horizon, kind));
    let (rest, steps) = march(system, &remainder, ell, kind, opts)?;
    let n_t = ((t_end / opts.dt).ceil() as usize).max(8);
    let dt = t_end / n_t as f64;
    let control = time_signal(
        dt,
        (0..=n_t)
            .map(|i| {
                let t = i as f64 * dt;
                fg.eval(t - lead) + rest.eval(t - lead - delta)
            })
            .collect(),
    );
    Ok(Synthesis { control, steps, endpoint: Some(endpoint), compatibility })
}

/// A control with `u^f(·, T) = φ`.
pub fn shape_control(
    system: &StringSystem,
    phi: &Profile,
    t_end: f64,
    opts: &SynthesisOptions,
) -> Result<Synthesis, ControlError> {
    synthesize(system, phi, t_end, TargetKind::Displacement, opts)
}

/// A control with `u^f_t(·, T) = ψ`.
pub fn velocity_control(
    system: &StringSystem,
    psi: &Profile,
    t_end: f64,
    opts: &SynthesisOptions,
) -> Result<Synthesis, ControlError> {
    synthesize(system, psi, t_end, TargetKind::Velocity, opts)
}

/// Frequencies grouped into the first `P` clusters, with eigenfunctions.
#[derive(Debug, Clone)]
pub struct SpectralData {
    pub clusters: ClusterSet,
    pub modes: Vec<Vec<EigenData>>,
}

impl SpectralData {
    pub fn compute(system: &StringSystem, clusters: usize, dx: f64) -> Result<Self, ControlError> {
        if clusters == 0 {
            return Err(ControlError::Request("at least one cluster is required".into()));
        }
        let kept = first_clusters(system, clusters)?;
        let modes: Vec<Result<Vec<EigenData>, SpectralError>> = par_map(kept.clusters.len(), |p| {
            let c = &kept.clusters[p];
            c.frequencies.iter().zip(&c.indices).map(|(&l, &i)| eigenfunction(system, i + 1, l, dx)).collect()
        });
        let modes = modes.into_iter().collect::<Result<Vec<_>, _>>()?;
        Ok(SpectralData { clusters: kept, modes })
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.clusters.flattened()
    }

    pub fn n_modes(&self) -> usize {
        self.modes.iter().map(|m| m.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum WSpace {
    W0,
    Wm1,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisMember {
    pub cluster: i64,
    /// 1-based position inside the cluster.
    pub k: usize,
    pub profile: Profile,
}

#[derive(Debug, Clone)]
pub struct RieszBasisW {
    pub which: WSpace,
    pub truncation: usize,
    pub members: Vec<BasisMember>,
    pub gram: DMatrix<f64>,
}

impl RieszBasisW {
    pub fn condition(&self) -> f64 {
        let e = self.gram.clone().symmetric_eigenvalues();
        e.max() / e.min()
    }
}

fn inner(which: WSpace, a: &Profile, b: &Profile, system: &StringSystem) -> Result<f64, SpacesError> {
    match which {
        WSpace::W0 => inner_w0(a, b, system),
        WSpace::Wm1 => inner_wm1(a, b, system),
    }
}

fn norm_sq(which: WSpace, a: &Profile, system: &StringSystem) -> Result<f64, SpacesError> {
    match which {
        WSpace::W0 => norm_w0_sq(a, system),
        WSpace::Wm1 => norm_wm1_sq(a, system),
    }
}

fn gram_of(which: WSpace, profiles: &[&Profile], system: &StringSystem) -> Result<DMatrix<f64>, SpacesError> {
    let n = profiles.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |k| (i, k))).collect();
    let vals = par_map(pairs.len(), |p| {
        let (i, k) = pairs[p];
        if i == k {
            norm_sq(which, profiles[i], system)
        } else {
            inner(which, profiles[i], profiles[k], system)
        }
    });
    let mut g = DMatrix::zeros(n, n);
    for (&(i, k), v) in pairs.iter().zip(vals) {
        let v = v?;
        g[(i, k)] = v;
        g[(k, i)] = v;
    }
    Ok(g)
}

/// `ψ_k = Σ_{j ≥ k} φ_j w_j Π_{l < k}(λ_j - λ_l)` per cluster, with
/// `w_j = φ_j'(0)/λ_j` for `W₀` and `w_j = φ_j'(0)` for `W₋₁`.
pub fn build_riesz_basis(system: &StringSystem, data: &SpectralData, which: WSpace) -> Result<RieszBasisW, ControlError> {
    let mut members = Vec::new();
    for (c, modes) in data.clusters.clusters.iter().zip(&data.modes) {
        for m in modes {
            if m.phi_prime_0.abs() < 1e-12 {
                return Err(ControlError::VanishingSlope { index: m.index, lambda: m.lambda, slope: m.phi_prime_0 });
            }
        }
        for k in 0..modes.len() {
            let mut acc = modes[k].profile.zeros_like();
            for j in k..modes.len() {
                let w = match which {
                    WSpace::W0 => modes[j].phi_prime_0 / modes[j].lambda,
                    WSpace::Wm1 => modes[j].phi_prime_0,
                };
                let prod: f64 = (0..k).map(|l| modes[j].lambda - modes[l].lambda).product();
                acc = acc.axpy(w * prod, &modes[j].profile);
            }
            members.push(BasisMember { cluster: c.label, k: k + 1, profile: acc });
        }
    }
    let refs: Vec<&Profile> = members.iter().map(|m| &m.profile).collect();
    let gram = gram_of(which, &refs, system)?;
    Ok(RieszBasisW { which, truncation: data.clusters.clusters.len(), members, gram })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Expansion {
    pub coefficients: Vec<f64>,
    /// `‖y - Σ c ψ‖ / ‖y‖` in the basis space.
    pub residual: f64,
}

/// Least-squares coefficients of `y` in the basis, in its own inner product.
pub fn expand_target(y: &Profile, basis: &RieszBasisW, system: &StringSystem) -> Result<Expansion, ControlError> {
    let grid = &basis.members.first().ok_or_else(|| ControlError::Request("empty basis".into()))?.profile;
    let y = if y.same_grid(grid) { y.clone() } else { y.resample_smooth(grid) };
    let n = basis.members.len();
    let rhs = par_map(n, |i| inner(basis.which, &basis.members[i].profile, &y, system));
    let rhs = DVector::from_vec(rhs.into_iter().collect::<Result<Vec<f64>, _>>()?);
    let c = solve_spd(&basis.gram, &rhs)?;
    let y_norm = norm_sq(basis.which, &y, system)?.sqrt();
    let mut approx = y.zeros_like();
    for (ci, m) in c.iter().zip(&basis.members) {
        approx = approx.axpy(*ci, &m.profile);
    }
    let err = norm_sq(basis.which, &y.sub(&approx), system)?.sqrt();
    let residual = if y_norm > 0.0 { err / y_norm } else { err };
    Ok(Expansion { coefficients: c.iter().copied().collect(), residual })
}

impl RieszBasisW {
    /// `Σ c_k ψ_k` on the basis grid.
    pub fn combine(&self, coefficients: &[f64]) -> Result<Profile, ControlError> {
        let first = self.members.first().ok_or_else(|| ControlError::Request("empty basis".into()))?;
        if coefficients.len() != self.members.len() {
            return Err(ControlError::Request(format!(
                "{} coefficients for {} basis members",
                coefficients.len(),
                self.members.len()
            )));
        }
        let mut out = first.profile.zeros_like();
        for (c, m) in coefficients.iter().zip(&self.members) {
            out = out.axpy(*c, &m.profile);
        }
        Ok(out)
    }
}

/// Orthogonal projection of `y` onto the span of the basis.
pub fn project_target(y: &Profile, basis: &RieszBasisW, system: &StringSystem) -> Result<Profile, ControlError> {
    let e = expand_target(y, basis, system)?;
    basis.combine(&e.coefficients)
}

/// Cholesky, falling back to an SVD pseudo-inverse.
fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, ControlError> {
    if b.iter().all(|&v| v == 0.0) {
        return Ok(DVector::zeros(b.len()));
    }
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.solve(b));
    }
    a.clone().svd(true, true).solve(b, 1e-14 * a.norm()).map_err(|e| ControlError::Gram(e.to_string()))
}

/// Moment data of one positive cluster. `α_k = ⟨g, sin λ_k τ⟩`,
/// `β_k = ⟨g, cos λ_k τ⟩` with `g(τ) = f(T - τ)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterMoments {
    pub label: i64,
    pub frequencies: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// `[α_1, …, α_k]'`: the `W₀` coefficients of `y₀`.
    pub alpha_dd: Vec<f64>,
    /// `[β_1, …, β_k]'`: the `W₋₁` coefficients of `y₁`.
    pub beta_dd: Vec<f64>,
}

impl ClusterMoments {
    /// `γ_k = -i α_k + β_k`.
    pub fn gamma(&self) -> Vec<C64> {
        self.alpha.iter().zip(&self.beta).map(|(a, b)| C64::new(*b, -*a)).collect()
    }

    /// `[γ_1, …, γ_k]'`.
    pub fn gamma_dd(&self) -> Vec<C64> {
        self.alpha_dd.iter().zip(&self.beta_dd).map(|(a, b)| C64::new(*b, -*a)).collect()
    }

    /// `γ̂_k = y₀ₖ + i y₁ₖ`.
    pub fn gamma_hat(&self) -> Vec<C64> {
        self.alpha_dd.iter().zip(&self.beta_dd).map(|(a, b)| C64::new(*a, *b)).collect()
    }

    /// The cluster `-p`: `α` odd, `β` even in `p`; `y₀` coefficients extend
    /// evenly and `y₁` coefficients oddly.
    pub fn mirrored(&self) -> ClusterMoments {
        ClusterMoments {
            label: -self.label,
            frequencies: self.frequencies.iter().map(|v| -v).collect(),
            alpha: self.alpha.iter().map(|v| -v).collect(),
            beta: self.beta.clone(),
            alpha_dd: self.alpha_dd.clone(),
            beta_dd: self.beta_dd.iter().map(|v| -v).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentData {
    pub truncation: usize,
    pub clusters: Vec<ClusterMoments>,
    /// Largest relative mismatch of the `dd_numbers ∘ dd_reconstruct` round trip.
    pub round_trip_error: f64,
}

impl MomentData {
    /// `Σ|[γ]'|² - Σ|[α]'|² - Σ|[β]'|²`.
    pub fn norm_identity_gap(&self) -> f64 {
        let mut g = 0.0;
        let mut ab = 0.0;
        for c in &self.clusters {
            g += c.gamma_dd().iter().map(|z| z.norm_sqr()).sum::<f64>();
            ab += c.alpha_dd.iter().chain(&c.beta_dd).map(|v| v * v).sum::<f64>();
        }
        g - ab
    }

    pub fn dd_norm_sq(&self) -> f64 {
        self.clusters.iter().flat_map(|c| c.gamma_dd()).map(|z| z.norm_sqr()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct FullControlOptions {
    pub clusters: usize,
    /// Eigenfunction grid spacing.
    pub dx: f64,
    pub tol: f64,
    /// Gram condition numbers above this are reported as warnings.
    pub cond_limit: f64,
    /// Ramp length of the moment weight as a fraction of `(T* - 2ℓ)/2`.
    /// The control is the minimal norm element of `L²(1/w)` where `w`
    /// rises smoothly from 0 at both ends; 0 gives the flat `L²` solution.
    pub ramp: f64,
    /// Skip the compatibility checks on the targets.
    pub force: bool,
}

impl Default for FullControlOptions {
    fn default() -> Self {
        FullControlOptions { clusters: 20, dx: 1e-3, tol: 1e-3, cond_limit: 1e10, ramp: 2.5, force: false }
    }
}

#[derive(Debug, Clone)]
pub struct FullControl {
    pub control: ControlSignal,
    pub moments: MomentData,
    pub control_norm_sq: f64,
    pub target_norm_sq: f64,
    /// `‖f‖² / (‖y₀‖²_{W₀} + ‖y₁‖²_{W₋₁})`.
    pub energy_ratio: f64,
    pub gram_condition: f64,
    pub expansion_residual: (f64, f64),
    pub warnings: Vec<String>,
}

/// Spectral data and both bases, reusable across targets.
#[derive(Debug, Clone)]
pub struct MomentSetup {
    pub spectral: SpectralData,
    pub w0: RieszBasisW,
    pub wm1: RieszBasisW,
}

impl MomentSetup {
    pub fn new(system: &StringSystem, clusters: usize, dx: f64) -> Result<Self, ControlError> {
        let spectral = SpectralData::compute(system, clusters, dx)?;
        let w0 = build_riesz_basis(system, &spectral, WSpace::W0)?;
        let wm1 = build_riesz_basis(system, &spectral, WSpace::Wm1)?;
        Ok(MomentSetup { spectral, w0, wm1 })
    }
}

/// A control steering the rest state to `(y₀, y₁)` at `T* > 2ℓ`.
pub fn full_control(
    system: &StringSystem,
    y0: &Profile,
    y1: &Profile,
    t_star: f64,
    opts: &FullControlOptions,
) -> Result<FullControl, ControlError> {
    check_horizon(system, t_star)?;
    let setup = MomentSetup::new(system, opts.clusters, opts.dx)?;
    full_control_with(system, &setup, y0, y1, t_star, opts)
}

fn moment_weight(samples: usize, step: f64, ramp: f64) -> Result<Vec<f64>, ControlError> {
    if !(0.0..).contains(&ramp) || !ramp.is_finite() {
        return Err(ControlError::Request(format!("moment ramp {ramp} must be finite and nonnegative")));
    }
    let t_end = (samples - 1) as f64 * step;
    Ok((0..samples)
        .map(|i| {
            let t = i as f64 * step;
            if ramp == 0.0 {
                1.0
            } else {
                smooth_step(t / ramp) * smooth_step((t_end - t) / ramp)
            }
        })
        .collect())
}

fn check_horizon(system: &StringSystem, t_star: f64) -> Result<(), ControlError> {
    let limit = 2.0 * system.ell();
    if !(t_star > limit) || !t_star.is_finite() {
        return Err(ControlError::Horizon { t: t_star, limit });
    }
    Ok(())
}

pub fn full_control_with(
    system: &StringSystem,
    setup: &MomentSetup,
    y0: &Profile,
    y1: &Profile,
    t_star: f64,
    opts: &FullControlOptions,
) -> Result<FullControl, ControlError> {
    check_horizon(system, t_star)?;
    if !opts.force {
        check_target(system, y0, 0, opts.tol)?;
        check_target(system, y1, -1, opts.tol)?;
    }
    let e0 = expand_target(y0, &setup.w0, system)?;
    let e1 = expand_target(y1, &setup.wm1, system)?;
    let clusters = &setup.spectral.clusters;
    let mut moments = Vec::with_capacity(clusters.clusters.len());
    let mut round_trip = 0.0f64;
    let mut at = 0;
    for c in &clusters.clusters {
        let n = c.frequencies.len();
        let alpha_dd = e0.coefficients[at..at + n].to_vec();
        let beta_dd = e1.coefficients[at..at + n].to_vec();
        at += n;
        let alpha = dd_reconstruct(&c.frequencies, &alpha_dd)?;
        let beta = dd_reconstruct(&c.frequencies, &beta_dd)?;
        for (dd, vals) in [(&alpha_dd, &alpha), (&beta_dd, &beta)] {
            let back = dd_numbers(&c.frequencies, vals)?;
            for (a, b) in back.iter().zip(dd.iter()) {
                round_trip = round_trip.max((a - b).abs() / (1.0 + b.abs()));
            }
        }
        moments.push(ClusterMoments { label: c.label, frequencies: c.frequencies.clone(), alpha, beta, alpha_dd, beta_dd });
    }
    let moments = MomentData { truncation: clusters.clusters.len(), clusters: moments, round_trip_error: round_trip };

    let sine = DdFamily::build(clusters, DdKind::Sine, t_star, true)?;
    let cosine = DdFamily::build(clusters, DdKind::Cosine, t_star, true)?;
    let rows: Vec<Vec<f64>> = sine
        .members
        .iter()
        .chain(&cosine.members)
        .map(|m| m.values.iter().map(|z| z.re).collect())
        .collect();
    let rhs: Vec<f64> = moments
        .clusters
        .iter()
        .flat_map(|c| c.alpha_dd.iter().copied())
        .chain(moments.clusters.iter().flat_map(|c| c.beta_dd.iter().copied()))
        .collect();
    let weight = moment_weight(sine.samples, sine.step, opts.ramp * (t_star - 2.0 * system.ell()) / 2.0)?;
    let w: Vec<f64> = simpson_weights(sine.samples, sine.step).iter().zip(&weight).map(|(a, b)| a * b).collect();
    let n = rows.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |k| (i, k))).collect();
    let vals = par_map(pairs.len(), |p| {
        let (i, k) = pairs[p];
        rows[i].iter().zip(&rows[k]).zip(&w).map(|((a, b), w)| a * b * w).sum::<f64>()
    });
    let mut gram = DMatrix::zeros(n, n);
    for (&(i, k), v) in pairs.iter().zip(vals) {
        gram[(i, k)] = v;
        gram[(k, i)] = v;
    }
    let eig = gram.clone().symmetric_eigenvalues();
    let gram_condition = eig.max() / eig.min();
    let mut warnings = Vec::new();
    if !(gram_condition < opts.cond_limit) {
        warnings.push(format!("moment gram condition {gram_condition:e} exceeds {:e}; consider fewer clusters", opts.cond_limit));
    }
    let c = solve_spd(&gram, &DVector::from_vec(rhs))?;
    let mut g = vec![0.0; sine.samples];
    for (ci, row) in c.iter().zip(&rows) {
        for (v, r) in g.iter_mut().zip(row) {
            *v += ci * r;
        }
    }
    for (v, w) in g.iter_mut().zip(&weight) {
        *v *= w;
    }
    g.reverse();
    let control = time_signal(sine.step, g);
    let control_norm_sq = simpson_weights(control.len(), control.step)
        .iter()
        .zip(&control.values)
        .map(|(w, v)| w * v * v)
        .sum::<f64>();
    let target_norm_sq = norm_w0_sq(&y0.resample_smooth(&setup.w0.members[0].profile), system)?
        + norm_wm1_sq(&y1.resample_smooth(&setup.wm1.members[0].profile), system)?;
    let energy_ratio = if target_norm_sq > 0.0 { control_norm_sq / target_norm_sq } else { 0.0 };
    Ok(FullControl {
        control,
        moments,
        control_norm_sq,
        target_norm_sq,
        energy_ratio,
        gram_condition,
        expansion_residual: (e0.residual, e1.residual),
        warnings,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub time: f64,
    pub dx: f64,
    pub dt: f64,
    /// `‖u(T) - y₀‖_{W₀}`, when a displacement target is given.
    pub w0_error: Option<f64>,
    /// `‖u_t(T) - y₁‖_{W₋₁}`, when a velocity target is given.
    pub wm1_error: Option<f64>,
    pub w0_target: f64,
    pub wm1_target: f64,
    /// Combined error over the combined target norm (absolute when the
    /// targets vanish).
    pub relative_error: f64,
    pub displacement_compatibility: CompatibilityReport,
    pub velocity_compatibility: CompatibilityReport,
}

/// Runs the finite-difference oracle under `f` and compares the terminal
/// state with the given targets. A target left out is not checked.
pub fn verify_control(
    system: &StringSystem,
    f: &ControlSignal,
    y0: Option<&Profile>,
    y1: Option<&Profile>,
    t_end: f64,
    dx: f64,
) -> Result<VerificationReport, ControlError> {
    let grid = FdGrid::new(system, dx, t_end, DEFAULT_CFL)?;
    let run = run_fd(system, f, &grid, FdRecord::default())?;
    let snap = run.snapshot;
    let on_grid = |p: &Profile, like: &Profile| if p.same_grid(like) { p.clone() } else { p.resample_smooth(like) };
    let mut w0_error = None;
    let mut wm1_error = None;
    let mut w0_target = 0.0;
    let mut wm1_target = 0.0;
    if let Some(y) = y0 {
        let t = on_grid(y, &snap.displacement);
        w0_error = Some(norm_w0(&snap.displacement.sub(&t), system)?);
        w0_target = norm_w0(&t, system)?;
    }
    if let Some(y) = y1 {
        let t = on_grid(y, &snap.velocity);
        wm1_error = Some(norm_wm1(&snap.velocity.sub(&t), system)?);
        wm1_target = norm_wm1(&t, system)?;
    }
    let denom = (w0_target * w0_target + wm1_target * wm1_target).sqrt();
    let err = (w0_error.unwrap_or(0.0).powi(2) + wm1_error.unwrap_or(0.0).powi(2)).sqrt();
    let relative_error = if denom > 0.0 { err / denom } else { err };
    let tol_u = scaled_tolerance(50.0, grid.max_dx(), grid.dt, &snap.displacement);
    let tol_v = scaled_tolerance(50.0, grid.max_dx(), grid.dt, &snap.velocity);
    Ok(VerificationReport {
        time: t_end,
        dx: grid.max_dx(),
        dt: grid.dt,
        w0_error,
        wm1_error,
        w0_target,
        wm1_target,
        relative_error,
        displacement_compatibility: check_order(&snap.displacement, system, 0, tol_u),
        velocity_compatibility: check_order(&snap.velocity, system, -1, tol_v),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l_jet_matches_direct() {
        // φ = x³ near 1 with q = 2 + x: Lφ = -6x + (2 + x) x³
        let x: f64 = 1.0;
        let d = [x.powi(3), 3.0 * x * x, 6.0 * x, 6.0, 0.0];
        let q = [2.0 + x, 1.0, 0.0];
        let l = l_jet(&d, &q);
        assert!((l[0] - (-6.0 * x + (2.0 + x) * x.powi(3))).abs() < 1e-14);
        // (Lφ)' = -6 + x³ + 3x²(2 + x)
        assert!((l[1] - (-6.0 + x.powi(3) + 3.0 * x * x * (2.0 + x))).abs() < 1e-14);
    }

    #[test]
    fn endpoint_relations() {
        let s = StringSystem::free(1.0, &[(0.3, 1.0), (0.6, 1.0), (0.8, 1.0)]).unwrap();
        assert!(check_endpoint_relations(&s, &[0.0, 2.0, 0.0], 1e-9).is_ok());
        assert!(matches!(
            check_endpoint_relations(&s, &[0.0, 2.0, 1.0], 1e-9),
            Err(ControlError::EndpointData { index: 2, .. })
        ));
        assert!(check_endpoint_relations(&s, &[0.5], 1e-9).is_err());
    }

    #[test]
    fn mirrored_moments_are_conjugate() {
        let c = ClusterMoments {
            label: 3,
            frequencies: vec![2.0, 2.1],
            alpha: vec![1.0, 2.0],
            beta: vec![0.5, -1.0],
            alpha_dd: vec![1.0, 10.0],
            beta_dd: vec![0.5, -15.0],
        };
        let m = c.mirrored();
        for (a, b) in c.gamma_hat().iter().zip(m.gamma_hat()) {
            assert_eq!(*a, b.conj());
        }
        for (a, b) in c.gamma().iter().zip(m.gamma()) {
            assert_eq!(*a, b.conj());
        }
        assert_eq!(m.label, -3);
    }
}
