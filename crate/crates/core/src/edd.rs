//! Divided differences of `e^{iμt}`, `sin μt`, `cos μt` over frequency
//! clusters, divided differences of number sequences, and Gram-matrix
//! diagnostics of the resulting families on `L²(0, T)`.

use nalgebra::{Complex, DMatrix};
use serde::Serialize;
use thiserror::Error;

use crate::numerics::{par_map, simpson_weights};
use crate::spectral::ClusterSet;

pub type C64 = Complex<f64>;

/// Gaps below this fraction of the frequency scale use the confluent formula.
pub const CONFLUENT_RATIO: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EddError {
    #[error("frequencies {0} and {1} coincide")]
    RepeatedFrequency(f64, f64),
    #[error("length mismatch: {0} frequencies, {1} values")]
    Length(usize, usize),
    #[error("gram eigen-decomposition failed for truncation {0}")]
    Eigen(usize),
    #[error("invalid request: {0}")]
    Request(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DdKind {
    Exponential,
    Sine,
    Cosine,
    /// `e^{iλt}` for every frequency, no differencing.
    RawExponential,
}

fn scale_of(freqs: &[f64]) -> f64 {
    freqs.iter().fold(1.0f64, |m, v| m.max(v.abs()))
}

/// Smallest pairwise gap relative to the frequency scale.
fn min_relative_gap(freqs: &[f64]) -> (f64, usize, usize) {
    let s = scale_of(freqs);
    let mut best = (f64::INFINITY, 0, 0);
    for i in 0..freqs.len() {
        for k in i + 1..freqs.len() {
            let g = (freqs[i] - freqs[k]).abs() / s;
            if g < best.0 {
                best = (g, i, k);
            }
        }
    }
    best
}

/// In-place Newton table; returns `[x_1], [x_1,x_2], …` for values `v`.
fn newton_top<T>(freqs: &[f64], mut v: Vec<T>) -> Vec<T>
where
    T: Copy + std::ops::Sub<Output = T> + std::ops::Div<f64, Output = T>,
{
    let n = v.len();
    let mut top = Vec::with_capacity(n);
    if n == 0 {
        return top;
    }
    top.push(v[0]);
    for level in 1..n {
        for i in 0..n - level {
            v[i] = (v[i + 1] - v[i]) / (freqs[i + level] - freqs[i]);
        }
        top.push(v[0]);
    }
    top
}

/// `[e^{iμ_1 t}, …, e^{iμ_k t}]` for `k = 1..n` as the first column of
/// `exp(itJ)`, `J` lower bidiagonal with the frequencies on the diagonal.
/// Valid for coincident frequencies.
fn confluent_exp(freqs: &[f64], t: f64) -> Vec<C64> {
    let n = freqs.len();
    let mut j = DMatrix::<C64>::zeros(n, n);
    for i in 0..n {
        j[(i, i)] = C64::new(0.0, t * freqs[i]);
        if i > 0 {
            j[(i, i - 1)] = C64::new(0.0, t);
        }
    }
    let e = j.exp();
    (0..n).map(|k| e[(k, 0)]).collect()
}

/// Orders `0..n-1` of the divided differences of the chosen kernel at each
/// time in `t`. Returns `out[order][sample]`.
pub fn edd_evaluate(freqs: &[f64], t: &[f64], kind: DdKind, confluent: bool) -> Result<Vec<Vec<C64>>, EddError> {
    let n = freqs.len();
    if kind == DdKind::RawExponential {
        return Ok(freqs.iter().map(|&m| t.iter().map(|&s| C64::new(0.0, m * s).exp()).collect()).collect());
    }
    let (gap, i, k) = min_relative_gap(freqs);
    let near = gap < CONFLUENT_RATIO;
    if near && !confluent {
        return Err(EddError::RepeatedFrequency(freqs[i], freqs[k]));
    }
    let mut out = vec![Vec::with_capacity(t.len()); n];
    for &s in t {
        let col: Vec<C64> = if near {
            let e = confluent_exp(freqs, s);
            match kind {
                DdKind::Exponential => e,
                DdKind::Sine => e.iter().map(|z| C64::new(z.im, 0.0)).collect(),
                _ => e.iter().map(|z| C64::new(z.re, 0.0)).collect(),
            }
        } else {
            match kind {
                DdKind::Exponential => newton_top(freqs, freqs.iter().map(|&m| C64::new(0.0, m * s).exp()).collect()),
                DdKind::Sine => newton_top(freqs, freqs.iter().map(|&m| (m * s).sin()).collect())
                    .into_iter()
                    .map(|v| C64::new(v, 0.0))
                    .collect(),
                _ => newton_top(freqs, freqs.iter().map(|&m| (m * s).cos()).collect())
                    .into_iter()
                    .map(|v| C64::new(v, 0.0))
                    .collect(),
            }
        };
        for (o, v) in out.iter_mut().zip(col) {
            o.push(v);
        }
    }
    Ok(out)
}

/// `[a_1]', [a_1, a_2]', …` with respect to the nodes `freqs`.
pub fn dd_numbers(freqs: &[f64], values: &[f64]) -> Result<Vec<f64>, EddError> {
    if freqs.len() != values.len() {
        return Err(EddError::Length(freqs.len(), values.len()));
    }
    let s = scale_of(freqs);
    for i in 0..freqs.len() {
        for k in i + 1..freqs.len() {
            if (freqs[i] - freqs[k]).abs() <= 1e-15 * s {
                return Err(EddError::RepeatedFrequency(freqs[i], freqs[k]));
            }
        }
    }
    Ok(newton_top(freqs, values.to_vec()))
}

/// Inverse of [`dd_numbers`]: `a_n = Σ_{k ≤ n} [a_1, …, a_k]' Π_{l < k} (λ_n - λ_l)`.
pub fn dd_reconstruct(freqs: &[f64], dds: &[f64]) -> Result<Vec<f64>, EddError> {
    if freqs.len() != dds.len() {
        return Err(EddError::Length(freqs.len(), dds.len()));
    }
    Ok((0..freqs.len())
        .map(|n| {
            // Horner on the Newton form
            let mut acc = dds[n];
            for k in (0..n).rev() {
                acc = dds[k] + (freqs[n] - freqs[k]) * acc;
            }
            acc
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdMember {
    /// Signed cluster label; negative labels are mirrored clusters.
    pub cluster: i64,
    /// Differencing order (`0` for the cluster's first member).
    pub order: usize,
    pub frequencies: Vec<f64>,
    pub values: Vec<C64>,
}

/// Family members sampled on `t_i = i · step`, `i = 0..samples`.
#[derive(Debug, Clone, PartialEq)]
pub struct DdFamily {
    pub kind: DdKind,
    pub step: f64,
    pub samples: usize,
    pub members: Vec<DdMember>,
}

/// Sample count for Simpson with at least 40 points per shortest period.
pub fn gram_samples(t_end: f64, max_freq: f64) -> usize {
    let per = 40.0 * t_end * max_freq.abs().max(1.0) / (2.0 * std::f64::consts::PI);
    let n = (per.ceil() as usize).max(64);
    n + n % 2 + 1
}

impl DdFamily {
    /// Members over every cluster; exponential kinds also cover the mirrored
    /// clusters `-Λᵖ`.
    pub fn build(clusters: &ClusterSet, kind: DdKind, t_end: f64, confluent: bool) -> Result<Self, EddError> {
        if !(t_end > 0.0) {
            return Err(EddError::Request(format!("interval length must be positive, got {t_end}")));
        }
        let mut groups: Vec<(i64, Vec<f64>)> =
            clusters.clusters.iter().map(|c| (c.label, c.frequencies.clone())).collect();
        if matches!(kind, DdKind::Exponential | DdKind::RawExponential) {
            groups.extend(clusters.mirrored().into_iter().map(|c| (c.label, c.frequencies)));
            groups.sort_by_key(|g| (g.0.abs(), -g.0.signum()));
        }
        let top = groups.iter().flat_map(|g| g.1.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        let samples = gram_samples(t_end, top);
        let step = t_end / (samples - 1) as f64;
        let t: Vec<f64> = (0..samples).map(|i| i as f64 * step).collect();
        let per_group: Vec<Result<Vec<DdMember>, EddError>> = par_map(groups.len(), |g| {
            let (label, freqs) = &groups[g];
            let vals = edd_evaluate(freqs, &t, kind, confluent)?;
            Ok(vals
                .into_iter()
                .enumerate()
                .map(|(k, values)| DdMember {
                    cluster: *label,
                    order: if kind == DdKind::RawExponential { 0 } else { k },
                    frequencies: if kind == DdKind::RawExponential {
                        vec![freqs[k]]
                    } else {
                        freqs[..=k].to_vec()
                    },
                    values,
                })
                .collect())
        });
        let mut members = Vec::new();
        for g in per_group {
            members.extend(g?);
        }
        Ok(DdFamily { kind, step, samples, members })
    }

    pub fn t_end(&self) -> f64 {
        self.step * (self.samples - 1) as f64
    }

    /// Members whose cluster satisfies `|p| ≤ clusters`.
    pub fn truncated(&self, clusters: usize) -> Vec<&DdMember> {
        self.members.iter().filter(|m| m.cluster.unsigned_abs() as usize <= clusters).collect()
    }
}

/// `G_{ik} = ∫_0^T e_i conj(e_k)` by Simpson's rule.
pub fn gram_matrix(members: &[&[C64]], step: f64) -> DMatrix<C64> {
    let n = members.len();
    let samples = members.first().map_or(0, |m| m.len());
    let w = simpson_weights(samples, step);
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |k| (i, k))).collect();
    let vals = par_map(pairs.len(), |p| {
        let (i, k) = pairs[p];
        let (a, b) = (members[i], members[k]);
        let mut acc = C64::new(0.0, 0.0);
        for s in 0..samples {
            acc += a[s] * b[s].conj() * w[s];
        }
        acc
    });
    let mut g = DMatrix::<C64>::zeros(n, n);
    for (&(i, k), v) in pairs.iter().zip(vals) {
        g[(i, k)] = v;
        g[(k, i)] = v.conj();
    }
    g
}

/// Extreme eigenvalues of a Hermitian matrix.
pub fn hermitian_extremes(g: DMatrix<C64>) -> (f64, f64) {
    let e = g.symmetric_eigenvalues();
    let lo = e.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GramRow {
    pub truncation: usize,
    pub members: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub cond: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GramReport {
    pub kind: DdKind,
    pub interval: f64,
    pub rows: Vec<GramRow>,
    pub warning: Option<String>,
}

impl GramReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("truncation,lambda_min,lambda_max,cond\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:.16e},{:.16e},{:.16e}\n", r.truncation, r.lambda_min, r.lambda_max, r.cond));
        }
        s
    }
}

/// Gram extremes of the family truncated to the first `P` clusters, for each
/// `P` in `truncations`. Short intervals are flagged but still computed.
pub fn riesz_diagnostics(family: &DdFamily, ell: f64, truncations: &[usize]) -> Result<GramReport, EddError> {
    let t_end = family.t_end();
    let need = match family.kind {
        DdKind::Exponential | DdKind::RawExponential => 2.0 * ell,
        _ => ell,
    };
    let warning = (t_end <= need).then(|| format!("interval {t_end} does not exceed {need}; Riesz bounds are not expected"));
    let mut rows = Vec::new();
    for &p in truncations {
        let members: Vec<&[C64]> = family.truncated(p).iter().map(|m| m.values.as_slice()).collect();
        if members.is_empty() {
            continue;
        }
        let g = gram_matrix(&members, family.step);
        let (lo, hi) = hermitian_extremes(g);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(EddError::Eigen(p));
        }
        rows.push(GramRow { truncation: p, members: members.len(), lambda_min: lo, lambda_max: hi, cond: hi / lo });
    }
    Ok(GramReport { kind: family.kind, interval: t_end, rows, warning })
}
