//! The operator `L = -d²/dx² + q`, junction compatibility conditions, and
//! the norms of the terminal-state spaces `W₀` and `W₋₁`.

use serde::Serialize;
use thiserror::Error;

use crate::model::{Profile, SampledFunction, StringSystem};
use crate::numerics::{derivative, end_derivatives, trapz_sq};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpacesError {
    #[error("segment {segment} has {have} samples, need at least {need}")]
    Resolution { segment: usize, need: usize, have: usize },
    #[error("profile has {have} segments, system has {want}")]
    Shape { have: usize, want: usize },
}

fn check_shape(p: &Profile, system: &StringSystem) -> Result<(), SpacesError> {
    if p.n_segments() != system.n_segments() {
        return Err(SpacesError::Shape { have: p.n_segments(), want: system.n_segments() });
    }
    Ok(())
}

/// `Lⁿφ` segmentwise by repeated second differences.
pub fn apply_l(system: &StringSystem, phi: &Profile, power: usize) -> Result<Profile, SpacesError> {
    check_shape(phi, system)?;
    let need = (2 * power + 1).max(5);
    let mut out = phi.clone();
    for (j, seg) in out.segments.iter_mut().enumerate() {
        if power > 0 && seg.len() < need {
            return Err(SpacesError::Resolution { segment: j, need, have: seg.len() });
        }
        for _ in 0..power {
            let d2 = derivative(&seg.values, seg.step, 2);
            let next: Vec<f64> =
                (0..seg.len()).map(|i| -d2[i] + system.q(j, seg.abscissa(i)) * seg.values[i]).collect();
            seg.values = next;
        }
    }
    Ok(out)
}

/// Derivatives `0..len-2` of `Lφ` from derivatives `0..len` of `φ` at a
/// point where `q` has derivatives `qd`.
fn l_taylor(d: &[f64], qd: &[f64]) -> Vec<f64> {
    if d.len() < 3 {
        return vec![];
    }
    let k_max = d.len() - 3;
    (0..=k_max)
        .map(|k| {
            let mut acc = -d[k + 2];
            let mut binom = 1.0;
            for i in 0..=k {
                acc += binom * qd.get(i).copied().unwrap_or(0.0) * d[k - i];
                binom = binom * (k - i) as f64 / (i + 1) as f64;
            }
            acc
        })
        .collect()
}

/// One-sided derivative jets at a segment end.
struct EndJet {
    /// `jets[n][k] = (Lⁿφ)^{(k)}`.
    jets: Vec<Vec<f64>>,
}

impl EndJet {
    fn new(system: &StringSystem, j: usize, seg: &SampledFunction, at_right: bool, order: usize) -> Self {
        let x = if at_right { seg.end() } else { seg.start };
        let width = (order + 3).min(seg.len());
        let d = end_derivatives(&seg.values, seg.step, order.min(width - 1), width, at_right);
        let qd = system.potential(j).derivatives(x, order);
        let mut jets = vec![d];
        while jets.last().unwrap().len() >= 3 {
            let next = l_taylor(jets.last().unwrap(), &qd);
            jets.push(next);
        }
        EndJet { jets }
    }

    fn value(&self, n: usize) -> Option<f64> {
        self.jets.get(n).and_then(|v| v.first().copied())
    }

    fn slope(&self, n: usize) -> Option<f64> {
        self.jets.get(n).and_then(|v| v.get(1).copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    /// `Lⁿφ(a⁻) = Lⁿφ(a⁺)`
    Continuity,
    /// `(Lⁿφ)'(a⁻) = (Lⁿφ)'(a⁺) + M Lⁿ⁺¹φ(a⁺)`, from `M h'' = [u_x]` and
    /// `u_tt = -Lu`
    SlopeJump,
    /// `Lⁿφ(ℓ) = 0`
    EndValue,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionResult {
    pub kind: ConditionKind,
    /// Junction index; `N + 1` is the right end.
    pub node: usize,
    pub location: f64,
    pub n: usize,
    pub residual: f64,
    /// Size of the largest term entering the residual.
    pub scale: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompatibilityReport {
    /// Order `i` of the starred condition set that was checked.
    pub order: i32,
    pub tolerance: f64,
    pub conditions: Vec<ConditionResult>,
    /// Conditions the sampling could not resolve.
    pub skipped: usize,
}

impl CompatibilityReport {
    pub fn passed(&self) -> bool {
        self.conditions.iter().all(|c| c.passed)
    }

    pub fn worst_residual(&self) -> f64 {
        self.conditions.iter().map(|c| c.residual.abs()).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ConditionResult> {
        self.conditions.iter().filter(|c| !c.passed)
    }
}

/// Counts of continuity and slope-jump conditions in `𝒞ⁱ` at an interior
/// junction: `⌈i/2⌉` and `⌈i/2⌉ - 1`.
pub fn condition_counts(i: i32) -> (usize, usize) {
    if i <= 0 {
        return (0, 0);
    }
    let c = ((i + 1) / 2) as usize;
    (c, c.saturating_sub(1))
}

/// Evaluates `𝒞ⁱ_*`: condition `𝒞^{j-1+i}` at `a_j` for `j = 1..=N+1`
/// with `a_{N+1} = ℓ`. A condition passes when its residual is below
/// `tol · (1 + scale)`.
pub fn check_order(phi: &Profile, system: &StringSystem, order: i32, tol: f64) -> CompatibilityReport {
    let n_mass = system.n_masses();
    let mut conditions = Vec::new();
    let mut skipped = 0;
    let mut push = |kind, node, location, n, lhs: f64, rhs: f64, scale: f64| {
        let residual = lhs - rhs;
        conditions.push(ConditionResult {
            kind,
            node,
            location,
            n,
            residual,
            scale,
            passed: residual.abs() <= tol * (1.0 + scale),
        });
    };
    if phi.n_segments() != system.n_segments() {
        return CompatibilityReport { order, tolerance: tol, conditions, skipped: 1 };
    }
    for j in 1..=n_mass + 1 {
        let i = j as i32 - 1 + order;
        let (n_cont, n_jump) = condition_counts(i);
        if n_cont == 0 {
            continue;
        }
        let deriv_order = 2 * n_cont + 1;
        let left = EndJet::new(system, j - 1, &phi.segments[j - 1], true, deriv_order);
        let a = system.node(j);
        if j == n_mass + 1 {
            for n in 0..n_cont {
                match left.value(n) {
                    Some(v) => push(ConditionKind::EndValue, j, a, n, v, 0.0, v.abs()),
                    None => skipped += 1,
                }
            }
            continue;
        }
        let right = EndJet::new(system, j, &phi.segments[j], false, deriv_order);
        let m = system.bead(j).mass;
        for n in 0..n_cont {
            match (left.value(n), right.value(n)) {
                (Some(l), Some(r)) => push(ConditionKind::Continuity, j, a, n, l, r, l.abs().max(r.abs())),
                _ => skipped += 1,
            }
        }
        for n in 0..n_jump {
            match (left.slope(n), right.slope(n), right.value(n + 1)) {
                (Some(sl), Some(sr), Some(next)) => {
                    let rhs = sr + m * next;
                    push(ConditionKind::SlopeJump, j, a, n, sl, rhs, sl.abs().max(sr.abs()).max((m * next).abs()))
                }
                _ => skipped += 1,
            }
        }
    }
    CompatibilityReport { order, tolerance: tol, conditions, skipped }
}

/// Displacement checked at order 0, and velocity, if given, at order -1.
pub fn check_compatibility(
    phi: &Profile,
    psi: Option<&Profile>,
    system: &StringSystem,
    tol: f64,
) -> (CompatibilityReport, Option<CompatibilityReport>) {
    (check_order(phi, system, 0, tol), psi.map(|p| check_order(p, system, -1, tol)))
}

/// Tolerance `c · (dx² + dt) · (1 + ‖φ‖∞)` for residuals of sampled data.
pub fn scaled_tolerance(c: f64, dx: f64, dt: f64, phi: &Profile) -> f64 {
    c * (dx * dx + dt) * (1.0 + phi.max_abs())
}

/// `‖φ‖²_{Hⁿ} = ‖dⁿφ‖² + ‖φ‖²` on one segment.
pub fn sobolev_sq(seg: &SampledFunction, n: usize, segment: usize) -> Result<f64, SpacesError> {
    let base = trapz_sq(&seg.values, seg.step);
    if n == 0 {
        return Ok(base);
    }
    let need = n + 3;
    if seg.len() < need {
        return Err(SpacesError::Resolution { segment, need, have: seg.len() });
    }
    Ok(base + trapz_sq(&derivative(&seg.values, seg.step, n), seg.step))
}

pub fn norm_w0_sq(phi: &Profile, system: &StringSystem) -> Result<f64, SpacesError> {
    check_shape(phi, system)?;
    let mut acc = 0.0;
    for (j, seg) in phi.segments.iter().enumerate() {
        acc += sobolev_sq(seg, j, j)?;
    }
    for j in 1..=system.n_masses() {
        let v = phi.right_limit(j);
        acc += system.bead(j).mass * v * v;
    }
    Ok(acc)
}

pub fn norm_w0(phi: &Profile, system: &StringSystem) -> Result<f64, SpacesError> {
    norm_w0_sq(phi, system).map(f64::sqrt)
}

/// `‖w‖²_{H¹}` for `-w'' + w = ψ` on the first segment, `w(0) = 0`,
/// `w'(a₁) = 0`: the squared dual norm of `ψ`.
pub fn theta_dual_sq(psi: &SampledFunction) -> f64 {
    let m = psi.len() - 1;
    if m == 0 {
        return 0.0;
    }
    let h = psi.step;
    // unknowns w_1..w_m; the Neumann end uses a reflected ghost node
    let n = m;
    let mut lower = vec![0.0; n];
    let mut diag = vec![0.0; n];
    let mut upper = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for k in 0..n {
        let i = k + 1;
        diag[k] = 2.0 / (h * h) + 1.0;
        lower[k] = -1.0 / (h * h);
        upper[k] = -1.0 / (h * h);
        rhs[k] = psi.values[i];
    }
    lower[n - 1] = -2.0 / (h * h);
    let mut w = thomas(&lower, &diag, &upper, &rhs);
    w.insert(0, 0.0);
    let slope: f64 = w.windows(2).map(|p| (p[1] - p[0]).powi(2)).sum::<f64>() / h;
    slope + trapz_sq(&w, h)
}

/// Tridiagonal solve; `lower[0]` and `upper[n-1]` are ignored.
fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let den = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / den } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / den;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// `‖ψ‖²_{W₋₁}`; the mass sum starts at the second mass.
pub fn norm_wm1_sq(psi: &Profile, system: &StringSystem) -> Result<f64, SpacesError> {
    check_shape(psi, system)?;
    let mut acc = theta_dual_sq(&psi.segments[0]);
    for j in 1..system.n_segments() {
        acc += sobolev_sq(&psi.segments[j], j - 1, j)?;
    }
    for j in 2..=system.n_masses() {
        let v = psi.right_limit(j);
        acc += system.bead(j).mass * v * v;
    }
    Ok(acc)
}

pub fn norm_wm1(psi: &Profile, system: &StringSystem) -> Result<f64, SpacesError> {
    norm_wm1_sq(psi, system).map(f64::sqrt)
}

/// `W₀` inner product by polarization.
pub fn inner_w0(a: &Profile, b: &Profile, system: &StringSystem) -> Result<f64, SpacesError> {
    Ok(0.25 * (norm_w0_sq(&a.add(b), system)? - norm_w0_sq(&a.sub(b), system)?))
}

/// `W₋₁` inner product by polarization.
pub fn inner_wm1(a: &Profile, b: &Profile, system: &StringSystem) -> Result<f64, SpacesError> {
    Ok(0.25 * (norm_wm1_sq(&a.add(b), system)? - norm_wm1_sq(&a.sub(b), system)?))
}

/// `∫ φ χ dx + Σ M_j φ(a_j) χ(a_j)`.
pub fn inner_l2m(a: &Profile, b: &Profile, system: &StringSystem) -> f64 {
    let mut acc = 0.0;
    for (sa, sb) in a.segments.iter().zip(&b.segments) {
        let prod: Vec<f64> = sa.values.iter().zip(&sb.values).map(|(x, y)| x * y).collect();
        acc += crate::numerics::simpson(&prod, sa.step);
    }
    for j in 1..=system.n_masses() {
        acc += system.bead(j).mass * a.right_limit(j) * b.right_limit(j);
    }
    acc
}
