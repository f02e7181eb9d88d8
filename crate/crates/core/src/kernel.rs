//! Goursat kernels `k(b±; y, s)` on the characteristic triangle `0 <= y <= s`.
//!
//! The kernel solves `k_ss - k_yy + Q(y) k = 0` with `k(0, s) = 0` and
//! `k(y, y) = -1/2 ∫_0^y Q`, where `Q(y) = q(b + y)` for a rightward table
//! and `q(b - y)` for a leftward one. Beyond the segment `Q` is continued
//! by its end value.
//!
//! Tables live on the characteristic lattice `xi = s + y = p h`,
//! `eta = s - y = r h`, `p >= r >= 0`, and are produced by Picard sweeps of
//! the integrated form
//! `k(xi, eta) = D(xi) - D(eta) - 1/4 ∬ Q k` over `[eta, xi] x [0, eta]`.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use thiserror::Error;

use crate::model::StringSystem;
use crate::numerics::simpson;

pub const MAX_SWEEPS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("Picard iteration did not converge after {sweeps} sweeps (last change {last_change:e}); step too coarse for this potential")]
    NonConvergence { sweeps: usize, last_change: f64 },
    #[error("y = {y} is not on the kernel lattice (step {step})")]
    OffGrid { y: f64, step: f64 },
    #[error("invalid kernel request: {0}")]
    Request(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Rightward,
    Leftward,
}

#[derive(Debug, Clone)]
pub struct KernelTable {
    segment: usize,
    base: f64,
    direction: Direction,
    step: f64,
    reach: f64,
    horizon: f64,
    p_max: usize,
    r_max: usize,
    q_along: Vec<f64>,
    values: Option<Vec<f64>>,
    sweeps: usize,
}

/// Builds the kernel for `segment`, based at its left end (rightward) or
/// right end (leftward), covering `0 <= y <= segment length`, `s <= horizon`.
pub fn build_kernel(
    system: &StringSystem,
    segment: usize,
    direction: Direction,
    horizon: f64,
    step: f64,
) -> Result<KernelTable, KernelError> {
    if segment >= system.n_segments() {
        return Err(KernelError::Request(format!("segment {segment} out of range")));
    }
    if !(step > 0.0) || !(horizon > 0.0) {
        return Err(KernelError::Request(format!("step {step} and horizon {horizon} must be positive")));
    }
    let reach = system.segment_length(segment);
    let base = match direction {
        Direction::Rightward => system.node(segment),
        Direction::Leftward => system.node(segment + 1),
    };
    let (lo, hi) = (system.node(segment), system.node(segment + 1));
    let q = |y: f64| {
        let x = match direction {
            Direction::Rightward => base + y,
            Direction::Leftward => base - y,
        };
        system.q(segment, x.clamp(lo, hi))
    };
    let zero = system.potential(segment).is_zero();
    build_from_fn(q, zero, reach, horizon, step, segment, base, direction, system.potential(segment).sup_abs())
}

#[allow(clippy::too_many_arguments)]
fn build_from_fn(
    q: impl Fn(f64) -> f64,
    zero: bool,
    reach: f64,
    horizon: f64,
    step: f64,
    segment: usize,
    base: f64,
    direction: Direction,
    q_sup: f64,
) -> Result<KernelTable, KernelError> {
    let h = step;
    let p_max = ((reach + horizon) / h - 1e-9).ceil() as usize + 3;
    let r_max = (horizon / h - 1e-9).ceil() as usize + 3;
    let q_along: Vec<f64> = (0..=p_max).map(|d| q(d as f64 * h / 2.0)).collect();
    let mut table = KernelTable {
        segment,
        base,
        direction,
        step,
        reach,
        horizon,
        p_max,
        r_max,
        q_along,
        values: None,
        sweeps: 0,
    };
    if zero {
        return Ok(table);
    }

    // D(p h) = -1/2 ∫_0^{p h / 2} Q, trapezoid on the half-step grid
    let mut d = vec![0.0; p_max + 1];
    for p in 1..=p_max {
        d[p] = d[p - 1] - 0.25 * (h / 2.0) * (table.q_along[p - 1] + table.q_along[p]);
    }
    let width = p_max + 1;
    let idx = |p: usize, r: usize| r * width + p;
    let mut k = vec![0.0; width * (r_max + 1)];
    for r in 0..=r_max {
        for p in r..=p_max {
            k[idx(p, r)] = d[p] - d[r];
        }
    }
    let eps = 1e-12 * (1.0 + q_sup * horizon * horizon);
    let qa = &table.q_along;
    let mut next = vec![0.0; k.len()];
    let mut acc = vec![0.0; width];
    let mut last_change = f64::INFINITY;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS {
        sweeps += 1;
        acc.iter_mut().for_each(|v| *v = 0.0);
        let mut change: f64 = 0.0;
        for r in 0..=r_max {
            if r > 0 {
                let rr = r - 1;
                for pp in r..p_max {
                    let qk = |p: usize, r: usize| qa[p - r] * k[idx(p, r)];
                    acc[pp] += 0.25 * h * h * (qk(pp, rr) + qk(pp + 1, rr) + qk(pp, r) + qk(pp + 1, r));
                }
            }
            next[idx(r, r)] = 0.0;
            let mut run = 0.0;
            for p in r + 1..=p_max {
                run += acc[p - 1];
                let v = d[p] - d[r] - 0.25 * run;
                change = change.max((v - k[idx(p, r)]).abs());
                next[idx(p, r)] = v;
            }
        }
        std::mem::swap(&mut k, &mut next);
        last_change = change;
        if change < eps {
            break;
        }
    }
    if last_change >= eps {
        return Err(KernelError::NonConvergence { sweeps, last_change });
    }
    table.values = Some(k);
    table.sweeps = sweeps;
    Ok(table)
}

impl KernelTable {
    /// Table for an explicit potential profile `Q(y)`; used for tests and
    /// cross-checks.
    pub fn from_potential(q: impl Fn(f64) -> f64, reach: f64, horizon: f64, step: f64) -> Result<Self, KernelError> {
        let sup = (0..=256).map(|i| q(reach * i as f64 / 256.0).abs()).fold(0.0, f64::max);
        build_from_fn(q, sup == 0.0, reach, horizon, step, 0, 0.0, Direction::Rightward, sup)
    }

    pub fn is_zero(&self) -> bool {
        self.values.is_none()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn reach(&self) -> f64 {
        self.reach
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn segment(&self) -> usize {
        self.segment
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    /// `Q(y)` at lattice offset `d = p - r`.
    fn q_at(&self, d: usize) -> f64 {
        self.q_along[d.min(self.p_max)]
    }

    /// Lattice value; zero outside the triangle.
    pub fn at(&self, p: usize, r: usize) -> f64 {
        match &self.values {
            None => 0.0,
            Some(v) => {
                if p < r || p > self.p_max || r > self.r_max {
                    0.0
                } else {
                    v[r * (self.p_max + 1) + p]
                }
            }
        }
    }

    /// `k(y, s)` by linear interpolation on the lattice (exact at nodes).
    pub fn value(&self, y: f64, s: f64) -> f64 {
        if self.values.is_none() || y <= 0.0 || y > s + 1e-9 * self.step {
            return 0.0;
        }
        let s = s.max(y);
        let xi = (s + y) / self.step;
        let eta = (s - y) / self.step;
        self.interp(xi, eta, |p, r| self.at(p, r))
    }

    fn interp(&self, xi: f64, eta: f64, g: impl Fn(usize, usize) -> f64) -> f64 {
        let p0 = (xi.floor() as usize).min(self.p_max - 1);
        let r0 = (eta.floor().max(0.0) as usize).min(self.r_max - 1);
        let a = xi - p0 as f64;
        let b = eta - r0 as f64;
        if a.abs() < 1e-9 && b.abs() < 1e-9 {
            return g(p0, r0);
        }
        if p0 == r0 {
            // lower triangle of a diagonal cell: (p0,r0), (p0+1,r0), (p0+1,r0+1)
            let b = b.min(a);
            return g(p0, r0) * (1.0 - a) + g(p0 + 1, r0) * (a - b) + g(p0 + 1, r0 + 1) * b;
        }
        g(p0, r0) * (1.0 - a) * (1.0 - b)
            + g(p0 + 1, r0) * a * (1.0 - b)
            + g(p0, r0 + 1) * (1.0 - a) * b
            + g(p0 + 1, r0 + 1) * a * b
    }

    fn d_xi(&self, p: usize, r: usize) -> f64 {
        let h = self.step;
        if p > r && p < self.p_max {
            (self.at(p + 1, r) - self.at(p - 1, r)) / (2.0 * h)
        } else if p + 2 <= self.p_max {
            (-3.0 * self.at(p, r) + 4.0 * self.at(p + 1, r) - self.at(p + 2, r)) / (2.0 * h)
        } else {
            (3.0 * self.at(p, r) - 4.0 * self.at(p - 1, r) + self.at(p - 2, r)) / (2.0 * h)
        }
    }

    fn d_eta(&self, p: usize, r: usize) -> f64 {
        let h = self.step;
        if p == r {
            // k vanishes along y = 0, so (d_xi + d_eta) k = 0 there
            return -self.d_xi(p, r);
        }
        if r >= 1 && r < p && r < self.r_max {
            (self.at(p, r + 1) - self.at(p, r - 1)) / (2.0 * h)
        } else if r + 2 <= p && r + 2 <= self.r_max {
            (-3.0 * self.at(p, r) + 4.0 * self.at(p, r + 1) - self.at(p, r + 2)) / (2.0 * h)
        } else if r + 1 <= p {
            (self.at(p, r + 1) - self.at(p, r)) / h
        } else {
            (3.0 * self.at(p, r) - 4.0 * self.at(p, r - 1) + self.at(p, r - 2)) / (2.0 * h)
        }
    }

    /// `∂k/∂y` at `(y, s)`.
    pub fn dy(&self, y: f64, s: f64) -> f64 {
        if self.values.is_none() || y < 0.0 || y > s + 1e-9 * self.step {
            return 0.0;
        }
        let s = s.max(y);
        let (xi, eta) = ((s + y) / self.step, (s - y) / self.step);
        self.interp(xi, eta, |p, r| self.d_xi(p, r) - self.d_eta(p, r))
    }

    /// `∂k/∂s` at `(y, s)`.
    pub fn ds(&self, y: f64, s: f64) -> f64 {
        if self.values.is_none() || y < 0.0 || y > s + 1e-9 * self.step {
            return 0.0;
        }
        let s = s.max(y);
        let (xi, eta) = ((s + y) / self.step, (s - y) / self.step);
        self.interp(xi, eta, |p, r| self.d_xi(p, r) + self.d_eta(p, r))
    }

    /// `k(y0, y0 + i h)` for `i = 0..count`.
    pub fn line(&self, y0: f64, count: usize) -> Vec<f64> {
        self.line_with(y0, count, |p, r| self.at(p, r), |y, s| self.value(y, s))
    }

    /// `∂k/∂y (y0, y0 + i h)` for `i = 0..count`.
    pub fn line_dy(&self, y0: f64, count: usize) -> Vec<f64> {
        self.line_with(y0, count, |p, r| self.d_xi(p, r) - self.d_eta(p, r), |y, s| self.dy(y, s))
    }

    /// `∂k/∂s (y0, y0 + i h)` for `i = 0..count`.
    pub fn line_ds(&self, y0: f64, count: usize) -> Vec<f64> {
        self.line_with(y0, count, |p, r| self.d_xi(p, r) + self.d_eta(p, r), |y, s| self.ds(y, s))
    }

    fn line_with(
        &self,
        y0: f64,
        count: usize,
        lattice: impl Fn(usize, usize) -> f64,
        off: impl Fn(f64, f64) -> f64,
    ) -> Vec<f64> {
        if self.values.is_none() {
            return vec![0.0; count];
        }
        let d = 2.0 * y0 / self.step;
        let di = d.round();
        if (d - di).abs() < 1e-9 {
            let d = di as usize;
            (0..count)
                .map(|i| if i > self.r_max || i + d > self.p_max { 0.0 } else { lattice(i + d, i) })
                .collect()
        } else {
            (0..count).map(|i| off(y0, y0 + i as f64 * self.step)).collect()
        }
    }

    /// Line samples restricted to lattice lines; errors off-grid.
    pub fn edge_derivatives(&self, y0: f64, count: usize) -> Result<EdgeDerivatives, KernelError> {
        let d = 2.0 * y0 / self.step;
        if (d - d.round()).abs() > 1e-9 || y0 < 0.0 {
            return Err(KernelError::OffGrid { y: y0, step: self.step });
        }
        Ok(EdgeDerivatives {
            y0,
            step: self.step,
            dk_dy_base: self.line_dy(0.0, count),
            dk_dy: self.line_dy(y0, count),
            dk_ds: self.line_ds(y0, count),
        })
    }

    /// Largest `|k_ss - k_yy + Q k|` over interior lattice points with
    /// `s <= horizon` and `y <= reach`, using the 4-point stencil.
    pub fn interior_residual(&self) -> f64 {
        self.interior_residual_within(self.horizon, self.reach)
    }

    pub fn interior_residual_within(&self, s_max: f64, y_max: f64) -> f64 {
        if self.values.is_none() {
            return 0.0;
        }
        let h = self.step;
        let mut worst: f64 = 0.0;
        for r in 1..self.r_max {
            for p in r + 2..self.p_max {
                let s = (p + r) as f64 * h / 2.0;
                let y = (p - r) as f64 * h / 2.0;
                if s > s_max + 1e-12 || y > y_max + 1e-12 {
                    continue;
                }
                let lap = (self.at(p + 1, r + 1) + self.at(p - 1, r - 1) - self.at(p + 1, r - 1) - self.at(p - 1, r + 1)) / (h * h);
                let res = lap + self.q_at(p - r) * self.at(p, r);
                worst = worst.max(res.abs());
            }
        }
        worst
    }

    /// Largest deviation of `k(x, x)` from `-1/2 ∫_0^x Q`, the integral taken
    /// by fine Simpson quadrature of `q`.
    pub fn diagonal_error(&self, q: impl Fn(f64) -> f64) -> f64 {
        let h = self.step;
        let mut worst: f64 = 0.0;
        let mut p = 1;
        while (p as f64) * h / 2.0 <= self.reach.min(self.horizon) + 1e-12 {
            let x = p as f64 * h / 2.0;
            let n = 64;
            let vals: Vec<f64> = (0..=n).map(|i| q(x * i as f64 / n as f64)).collect();
            let exact = -0.5 * simpson(&vals, x / n as f64);
            worst = worst.max((self.at(p, 0) - exact).abs());
            p += 1;
        }
        worst
    }

    /// Writes `x,t,k` rows for lattice points inside the triangle, every
    /// `stride`-th point in each direction.
    pub fn write_csv<W: Write>(&self, mut w: W, stride: usize) -> std::io::Result<()> {
        writeln!(w, "x,t,k")?;
        let stride = stride.max(1);
        let h = self.step;
        for r in (0..=self.r_max).step_by(stride) {
            for p in (r..=self.p_max).step_by(stride) {
                let s = (p + r) as f64 * h / 2.0;
                let y = (p - r) as f64 * h / 2.0;
                if s > self.horizon + 1e-12 || y > self.reach + 1e-12 {
                    continue;
                }
                writeln!(w, "{:.16e},{:.16e},{:.16e}", y, s, self.at(p, r))?;
            }
        }
        Ok(())
    }
}

/// Derivative samples along the lines `y = 0` and `y = y0`, with `s`
/// starting at the line's foot and stepping by the table step.
#[derive(Debug, Clone)]
pub struct EdgeDerivatives {
    pub y0: f64,
    pub step: f64,
    pub dk_dy_base: Vec<f64>,
    pub dk_dy: Vec<f64>,
    pub dk_ds: Vec<f64>,
}

/// Memoises tables by segment, direction, horizon bucket and step.
#[derive(Debug, Default)]
pub struct KernelCache {
    tables: HashMap<(usize, Direction, u64, u64), Arc<KernelTable>>,
}

impl KernelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(
        &mut self,
        system: &StringSystem,
        segment: usize,
        direction: Direction,
        horizon: f64,
        step: f64,
    ) -> Result<Arc<KernelTable>, KernelError> {
        let bucket_width = 0.25 * system.ell();
        let bucket = (horizon / bucket_width).ceil().max(1.0) as u64;
        let key = (segment, direction, bucket, step.to_bits());
        if let Some(t) = self.tables.get(&key) {
            return Ok(t.clone());
        }
        let t = Arc::new(build_kernel(system, segment, direction, bucket as f64 * bucket_width, step)?);
        self.tables.insert(key, t.clone());
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.tables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Potential;

    #[test]
    fn zero_potential_gives_zero_kernel() {
        let s = StringSystem::free(1.0, &[(0.5, 1.0)]).unwrap();
        let k = build_kernel(&s, 0, Direction::Rightward, 1.0, 0.01).unwrap();
        assert!(k.is_zero());
        assert_eq!(k.value(0.2, 0.7), 0.0);
        assert!(k.line_dy(0.3, 10).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_potential_diagonal() {
        let c = 2.5;
        let k = KernelTable::from_potential(|_| c, 1.0, 1.0, 1.0 / 64.0).unwrap();
        for &x in &[0.25, 0.5, 0.75] {
            assert!((k.value(x, x) + c * x / 2.0).abs() < 1e-12);
        }
        // slope of the diagonal data is -c/2
        let h = k.step();
        let slope = (k.value(0.5 + h / 2.0, 0.5 + h / 2.0) - k.value(0.5 - h / 2.0, 0.5 - h / 2.0)) / h;
        assert!((slope + c / 2.0).abs() < 1e-10);
        assert!(k.line(0.0, 20).iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn residual_is_second_order() {
        let r: Vec<f64> = [32.0, 64.0, 128.0]
            .iter()
            .map(|n| KernelTable::from_potential(|y| 1.0 + y * y, 1.0, 1.0, 1.0 / n).unwrap().interior_residual_within(1.0, 1.0))
            .collect();
        assert!(r[0] / r[1] > 3.0 && r[1] / r[2] > 3.0, "{r:?}");
    }

    #[test]
    fn derivative_on_diagonal_matches_data() {
        // d/dx k(x, x) = -Q(x)/2; compare with k_y + k_s along the diagonal
        let k = KernelTable::from_potential(|y| 1.0 + y, 1.0, 1.0, 1.0 / 128.0).unwrap();
        let x = 0.5;
        let total = k.dy(x, x) + k.ds(x, x);
        assert!((total + 0.5 * (1.0 + x)).abs() < 1e-3, "{total}");
    }

    #[test]
    fn leftward_uses_mirrored_potential() {
        let s = StringSystem::new(1.0, &[], vec![Potential::Polynomial(vec![0.0, 1.0])]).unwrap();
        let k = build_kernel(&s, 0, Direction::Leftward, 1.0, 1.0 / 64.0).unwrap();
        // Q(y) = 1 - y, so k(y,y) = -(y - y^2/2)/2
        let y = 0.5;
        assert!((k.value(y, y) + 0.5 * (y - y * y / 2.0)).abs() < 1e-4);
    }

    #[test]
    fn off_grid_edge_request_errors() {
        let k = KernelTable::from_potential(|_| 1.0, 1.0, 1.0, 0.1).unwrap();
        assert!(matches!(k.edge_derivatives(0.033, 5), Err(KernelError::OffGrid { .. })));
        assert!(k.edge_derivatives(0.5, 5).is_ok());
    }

    #[test]
    fn cache_reuses_tables() {
        let s = StringSystem::new(1.0, &[], vec![Potential::constant(1.0)]).unwrap();
        let mut c = KernelCache::new();
        let a = c.get(&s, 0, Direction::Rightward, 0.4, 0.05).unwrap();
        let b = c.get(&s, 0, Direction::Rightward, 0.45, 0.05).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
        assert_eq!(c.len(), 1);
    }
}
