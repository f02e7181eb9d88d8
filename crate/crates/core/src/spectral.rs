//! Frequencies and eigenfunctions of `-φ'' + qφ = λ²φ` with point masses,
//! `φ(0) = φ(ℓ) = 0` and `φ'(a⁺) = φ'(a⁻) - M λ² φ(a)` at each mass.
//!
//! Roots are isolated with an oscillation count: the number of zeros of the
//! shooting solution in `(0, ℓ)` equals the number of eigenvalues below
//! `λ²`. Near-coincident roots inside a cluster are separated that way even
//! when a sign scan of `G` would step over both.

use serde::Serialize;
use thiserror::Error;

use crate::model::{Domain, Profile, SampledFunction, StringSystem};
use crate::numerics::bisect;
use crate::spaces::inner_l2m;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("the spectrum has a nonpositive eigenvalue (G/λ at λ = 0 is {g0:e} with {zeros} interior zeros); only positive spectra are supported")]
    NonpositiveSpectrum { g0: f64, zeros: usize },
    #[error("root count {found} below λ = {lambda} is outside the density window [{lo}, {hi}]")]
    CountMismatch { found: usize, lambda: f64, lo: i64, hi: i64 },
    #[error("eigenfunction at λ = {0} has vanishing norm; root is spurious")]
    SpuriousRoot(f64),
    #[error("cluster of {size} frequencies exceeds N + 1 = {limit} at radius {radius}")]
    ClusterTooLarge { size: usize, limit: usize, radius: f64 },
    #[error("invalid request: {0}")]
    Request(String),
}

/// Shooting data for one `λ`, normalised so that `φ = sin(λx)` on the first
/// segment (`φ'(0) = λ`; `φ'(0) = 1` when `λ = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct ShootRecord {
    pub lambda: f64,
    /// `G(λ) = φ(ℓ, λ)`.
    pub g: f64,
    /// `G(λ) / λ`, continuous through `λ = 0`.
    pub g_over_lambda: f64,
    /// `φ(a_j)` for `j = 0..=N+1`.
    pub node_values: Vec<f64>,
    /// `φ'(a_j⁺)` for `j = 0..=N`.
    pub node_slopes: Vec<f64>,
    /// Zeros of `φ` in `(0, ℓ)`.
    pub zeros: usize,
}

/// Value and slope after `y` along a segment from `(v, s)`, `q = 0`.
fn free_step(v: f64, s: f64, mu: f64, y: f64) -> (f64, f64) {
    if mu > 0.0 {
        let k = mu.sqrt();
        let (sn, cs) = (k * y).sin_cos();
        (v * cs + s * sn / k, -v * k * sn + s * cs)
    } else if mu < 0.0 {
        let k = (-mu).sqrt();
        let (sh, ch) = ((k * y).sinh(), (k * y).cosh());
        (v * ch + s * sh / k, v * k * sh + s * ch)
    } else {
        (v + s * y, s)
    }
}

fn rk4_step(v: f64, s: f64, x: f64, h: f64, mu: f64, q: &impl Fn(f64) -> f64) -> (f64, f64) {
    let acc = |x: f64, v: f64| (q(x) - mu) * v;
    let (k1v, k1s) = (s, acc(x, v));
    let (k2v, k2s) = (s + 0.5 * h * k1s, acc(x + 0.5 * h, v + 0.5 * h * k1v));
    let (k3v, k3s) = (s + 0.5 * h * k2s, acc(x + 0.5 * h, v + 0.5 * h * k2v));
    let (k4v, k4s) = (s + h * k3s, acc(x + h, v + h * k3v));
    (
        v + h / 6.0 * (k1v + 2.0 * k2v + 2.0 * k3v + k4v),
        s + h / 6.0 * (k1s + 2.0 * k2s + 2.0 * k3s + k4s),
    )
}

/// Shooting core in `μ = λ²` with `φ'(0) = 1`. When `samples` is given,
/// segment `j` is also sampled at `samples[j] + 1` uniform points.
struct Shot {
    node_values: Vec<f64>,
    node_slopes: Vec<f64>,
    zeros: usize,
    profile: Vec<Vec<f64>>,
}

fn shoot_mu(system: &StringSystem, mu: f64, samples: Option<&[usize]>) -> Shot {
    let segs = system.n_segments();
    let wave = (mu.abs() + system.q_sup() + 1.0).sqrt();
    let mut v = 0.0;
    let mut s = 1.0;
    let mut node_values = vec![0.0];
    let mut node_slopes = Vec::with_capacity(segs);
    let mut profile = Vec::new();
    let mut zeros = 0;
    let mut last_sign = 1.0f64;
    let track = |val: f64, last: &mut f64, zeros: &mut usize| {
        if val != 0.0 {
            let sg = val.signum();
            if sg != *last {
                *zeros += 1;
                *last = sg;
            }
        }
    };
    for j in 0..segs {
        if j > 0 {
            s -= system.bead(j).mass * mu * v;
        }
        node_slopes.push(s);
        let len = system.segment_length(j);
        let a = system.node(j);
        // sample spacing: a sixteenth of a half-wave, or the caller's grid
        let n_out = match samples {
            Some(n) => n[j].max(1),
            None => ((len * wave * 16.0 / std::f64::consts::PI).ceil() as usize).max(8),
        };
        let h_out = len / n_out as f64;
        let free = system.potential(j).is_zero();
        let sub = if free { 1 } else { ((h_out * wave * 40.0).ceil() as usize).max(1) };
        let h = h_out / sub as f64;
        let q = |x: f64| system.q(j, x);
        let mut seg_vals = Vec::with_capacity(if samples.is_some() { n_out + 1 } else { 0 });
        if samples.is_some() {
            seg_vals.push(v);
        }
        let (v0, s0) = (v, s);
        for k in 1..=n_out {
            if free {
                let (nv, ns) = free_step(v0, s0, mu, k as f64 * h_out);
                v = nv;
                s = ns;
            } else {
                for r in 0..sub {
                    let x = a + (k - 1) as f64 * h_out + r as f64 * h;
                    let (nv, ns) = rk4_step(v, s, x, h, mu, &q);
                    v = nv;
                    s = ns;
                }
            }
            if samples.is_some() {
                seg_vals.push(v);
            }
            track(v, &mut last_sign, &mut zeros);
        }
        node_values.push(v);
        if samples.is_some() {
            profile.push(seg_vals);
        }
    }
    Shot { node_values, node_slopes, zeros, profile }
}

/// `φ(ℓ, λ)` and the shooting record.
pub fn shoot(system: &StringSystem, lambda: f64) -> ShootRecord {
    let shot = shoot_mu(system, lambda * lambda, None);
    let scale = if lambda == 0.0 { 1.0 } else { lambda };
    let g_over_lambda = *shot.node_values.last().unwrap();
    ShootRecord {
        lambda,
        g: scale * g_over_lambda * if lambda == 0.0 { 0.0 } else { 1.0 },
        g_over_lambda,
        node_values: shot.node_values.iter().map(|v| v * scale).collect(),
        node_slopes: shot.node_slopes.iter().map(|v| v * scale).collect(),
        zeros: shot.zeros,
    }
}

/// `φ(x, λ)` for `q ≡ 0` from the superposition
/// `φ(x) = sin(λx) - λ Σ_{a_j < x} M_j φ(a_j) sin(λ(x - a_j))`.
pub fn free_recursion(system: &StringSystem, lambda: f64, x: f64) -> f64 {
    let mut at_mass: Vec<f64> = Vec::with_capacity(system.n_masses());
    let eval = |x: f64, at_mass: &[f64]| {
        let mut v = (lambda * x).sin();
        for (i, &phi_a) in at_mass.iter().enumerate() {
            let b = system.bead(i + 1);
            if b.position < x {
                v -= lambda * b.mass * phi_a * (lambda * (x - b.position)).sin();
            }
        }
        v
    };
    for j in 1..=system.n_masses() {
        let a = system.node(j);
        let v = eval(a, &at_mass);
        at_mass.push(v);
    }
    eval(x, &at_mass)
}

/// Zeros of the shooting solution in `(0, ℓ)`: the number of eigenvalues
/// strictly below `λ²`.
pub fn count_below(system: &StringSystem, lambda: f64) -> usize {
    shoot_mu(system, lambda * lambda, None).zeros
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrequencyCap {
    Count(usize),
    Max(f64),
}

/// Refuses spectra with a nonpositive eigenvalue.
pub fn check_positive(system: &StringSystem) -> Result<(), SpectralError> {
    let shot = shoot_mu(system, 0.0, None);
    let g0 = *shot.node_values.last().unwrap();
    if shot.zeros > 0 || g0 <= 0.0 {
        return Err(SpectralError::NonpositiveSpectrum { g0, zeros: shot.zeros });
    }
    Ok(())
}

/// Admissible root counts below `λ`: `Σ ⌊λ ℓ_j / π⌋ ± (2N + 1)`, widened by
/// the shift a bounded potential can cause.
pub fn density_window(system: &StringSystem, lambda: f64) -> (i64, i64) {
    let pi = std::f64::consts::PI;
    let base: i64 = system.segment_lengths().iter().map(|l| (lambda * l / pi).floor() as i64).sum();
    let slack = 2 * system.n_masses() as i64 + 1;
    let q = system.q_sup();
    let shift = if q > 0.0 {
        let lo = (lambda * lambda - q).max(0.0).sqrt();
        let hi = (lambda * lambda + q).sqrt();
        (system.ell() * (hi - lo) / pi).ceil() as i64 + system.n_segments() as i64
    } else {
        0
    };
    (base - slack - shift, base + slack + shift)
}

/// Positive frequencies in increasing order.
pub fn find_frequencies(system: &StringSystem, cap: FrequencyCap) -> Result<Vec<f64>, SpectralError> {
    check_positive(system)?;
    match cap {
        FrequencyCap::Count(0) => return Ok(vec![]),
        FrequencyCap::Max(m) if !(m > 0.0) || !m.is_finite() => {
            return Err(SpectralError::Request(format!("frequency cap must be positive and finite, got {m}")))
        }
        _ => {}
    }
    let pi = std::f64::consts::PI;
    let step = pi / (8.0 * system.ell());
    let mut roots = Vec::new();
    let mut lo = 0.0;
    let mut c_lo = 0usize;
    loop {
        let hi = lo + step;
        let c_hi = count_below(system, hi);
        if c_hi > c_lo {
            isolate(system, lo, hi, c_lo, c_hi, &mut roots);
        }
        let (wlo, whi) = density_window(system, hi);
        if (c_hi as i64) < wlo || (c_hi as i64) > whi {
            return Err(SpectralError::CountMismatch { found: c_hi, lambda: hi, lo: wlo, hi: whi });
        }
        lo = hi;
        c_lo = c_hi;
        let done = match cap {
            FrequencyCap::Count(n) => roots.len() >= n,
            FrequencyCap::Max(m) => lo >= m,
        };
        if done {
            break;
        }
    }
    match cap {
        FrequencyCap::Count(n) => roots.truncate(n),
        FrequencyCap::Max(m) => roots.retain(|&r| r <= m),
    }
    Ok(roots)
}

/// Splits `(lo, hi)` until each piece holds one root, then bisects `G/λ`.
fn isolate(system: &StringSystem, lo: f64, hi: f64, c_lo: usize, c_hi: usize, out: &mut Vec<f64>) {
    if c_hi == c_lo {
        return;
    }
    if c_hi == c_lo + 1 || hi - lo < 1e-13 * hi.max(1.0) {
        let g = |l: f64| *shoot_mu(system, l * l, None).node_values.last().unwrap();
        let root = bisect(lo, hi, g, 1e-13 * hi.max(1.0));
        for _ in c_lo..c_hi {
            out.push(root);
        }
        return;
    }
    let mid = 0.5 * (lo + hi);
    let c_mid = count_below(system, mid);
    isolate(system, lo, mid, c_lo, c_mid, out);
    isolate(system, mid, hi, c_mid, c_hi, out);
}

/// An `L²_M`-normalised eigenfunction with `φ'(0) > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenData {
    /// 1-based position in the increasing frequency list.
    pub index: usize,
    pub lambda: f64,
    pub lambda_sq: f64,
    pub profile: Profile,
    /// `φ'(0) = λ / ‖φ‖` where `φ = sin(λx)` near `0` before scaling.
    pub phi_prime_0: f64,
    /// `φ(a_j)` after normalisation, `j = 1..=N`.
    pub mass_values: Vec<f64>,
}

impl EigenData {
    /// `η = λ / φ'(0)`.
    pub fn eta(&self) -> f64 {
        self.lambda / self.phi_prime_0
    }
}

/// Samples the eigenfunction for a verified root on a grid of spacing about `dx`.
pub fn eigenfunction(system: &StringSystem, index: usize, lambda: f64, dx: f64) -> Result<EigenData, SpectralError> {
    if !(lambda > 0.0) {
        return Err(SpectralError::Request(format!("frequency must be positive, got {lambda}")));
    }
    let cells: Vec<usize> =
        system.segment_lengths().iter().map(|l| (((l / dx).round() as usize).max(4) + 1) / 2 * 2).collect();
    let shot = shoot_mu(system, lambda * lambda, Some(&cells));
    let segments: Vec<SampledFunction> = shot
        .profile
        .iter()
        .enumerate()
        .map(|(j, vals)| SampledFunction {
            start: system.node(j),
            step: system.segment_length(j) / cells[j] as f64,
            values: vals.iter().map(|v| v * lambda).collect(),
            domain: Domain::Segment(j),
        })
        .collect();
    let raw = Profile { segments };
    let norm = inner_l2m(&raw, &raw, system).sqrt();
    if !(norm > 1e-300) {
        return Err(SpectralError::SpuriousRoot(lambda));
    }
    let profile = raw.scaled(1.0 / norm);
    let mass_values = (1..=system.n_masses()).map(|j| shot.node_values[j] * lambda / norm).collect();
    Ok(EigenData { index, lambda, lambda_sq: lambda * lambda, profile, phi_prime_0: lambda / norm, mass_values })
}

/// Frequencies and eigenfunctions of the first `count` modes.
pub fn eigen_system(system: &StringSystem, count: usize, dx: f64) -> Result<Vec<EigenData>, SpectralError> {
    find_frequencies(system, FrequencyCap::Count(count))?
        .iter()
        .enumerate()
        .map(|(i, &l)| eigenfunction(system, i + 1, l, dx))
        .collect()
}

/// One cluster of positive frequencies; its mirror image `-Λᵖ` is implied.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cluster {
    /// `p >= 1`.
    pub label: i64,
    pub frequencies: Vec<f64>,
    /// Indices into the frequency list the clusters were built from.
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSet {
    pub radius: f64,
    pub clusters: Vec<Cluster>,
}

impl ClusterSet {
    pub fn max_size(&self) -> usize {
        self.clusters.iter().map(|c| c.frequencies.len()).max().unwrap_or(0)
    }

    /// Clusters of `-Λ`, labelled `-p`.
    pub fn mirrored(&self) -> Vec<Cluster> {
        self.clusters
            .iter()
            .map(|c| Cluster {
                label: -c.label,
                frequencies: c.frequencies.iter().map(|v| -v).collect(),
                indices: c.indices.clone(),
            })
            .collect()
    }

    /// Frequencies in cluster order.
    pub fn flattened(&self) -> Vec<f64> {
        self.clusters.iter().flat_map(|c| c.frequencies.iter().copied()).collect()
    }
}

/// Connected components of the union of intervals of radius `r` around
/// each frequency.
fn components(freqs: &[f64], r: f64) -> Vec<Cluster> {
    let mut order: Vec<usize> = (0..freqs.len()).collect();
    order.sort_by(|&a, &b| freqs[a].total_cmp(&freqs[b]));
    let mut out: Vec<Cluster> = Vec::new();
    for &i in &order {
        let f = freqs[i];
        match out.last_mut() {
            Some(c) if f - c.frequencies.last().unwrap() < 2.0 * r => {
                c.frequencies.push(f);
                c.indices.push(i);
            }
            _ => out.push(Cluster { label: out.len() as i64 + 1, frequencies: vec![f], indices: vec![i] }),
        }
    }
    out
}

/// Clusters with a fixed radius; components larger than `N + 1` are errors.
pub fn cluster(freqs: &[f64], radius: f64, n_masses: usize) -> Result<ClusterSet, SpectralError> {
    let clusters = components(freqs, radius);
    if let Some(c) = clusters.iter().find(|c| c.frequencies.len() > n_masses + 1) {
        return Err(SpectralError::ClusterTooLarge { size: c.frequencies.len(), limit: n_masses + 1, radius });
    }
    Ok(ClusterSet { radius, clusters })
}

/// The first `count` clusters. Frequencies are added until a later
/// cluster exists, so the last kept one is complete.
pub fn first_clusters(system: &StringSystem, count: usize) -> Result<ClusterSet, SpectralError> {
    if count == 0 {
        return Err(SpectralError::Request("at least one cluster is required".into()));
    }
    let n = system.n_masses();
    let mut total = (n + 1) * count + n + 4;
    loop {
        let freqs = find_frequencies(system, FrequencyCap::Count(total))?;
        let set = cluster_auto(&freqs, system)?;
        if set.clusters.len() > count {
            return Ok(ClusterSet { radius: set.radius, clusters: set.clusters[..count].to_vec() });
        }
        total += 4 * (n + 1);
    }
}

/// `r = r₀ / 2` with `r₀ = δ / (2N + 2)` and `δ` the smallest gap inside any
/// asymptotic family; halved until no component exceeds `N + 1`.
pub fn cluster_auto(freqs: &[f64], system: &StringSystem) -> Result<ClusterSet, SpectralError> {
    let n = system.n_masses();
    let report = asymptotics_report(freqs, system, None);
    let mut delta = f64::INFINITY;
    for fam in &report.families {
        let mut l: Vec<f64> = fam.members.iter().map(|m| m.lambda).collect();
        l.sort_by(f64::total_cmp);
        for w in l.windows(2) {
            delta = delta.min(w[1] - w[0]);
        }
    }
    if !delta.is_finite() {
        let pi = std::f64::consts::PI;
        delta = system.segment_lengths().iter().map(|l| pi / l).fold(f64::INFINITY, f64::min);
    }
    let mut r = delta / (2.0 * n as f64 + 2.0) / 2.0;
    for _ in 0..60 {
        match cluster(freqs, r, n) {
            Ok(c) => return Ok(c),
            Err(SpectralError::ClusterTooLarge { .. }) => r /= 2.0,
            Err(e) => return Err(e),
        }
    }
    Err(SpectralError::Request("could not find an admissible cluster radius".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyMember {
    pub m: usize,
    pub lambda: f64,
    /// `λ - π m / ℓ_j`.
    pub deviation: f64,
    pub phi_prime_0: Option<f64>,
    /// Position in the input list.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyReport {
    /// Segment `j` whose Dirichlet frequencies `π m / ℓ_j` the family follows.
    pub family: usize,
    pub segment_length: f64,
    pub members: Vec<FamilyMember>,
    /// `max_m m |γ_m - π m / ℓ_j|`.
    pub max_scaled_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticsReport {
    pub families: Vec<FamilyReport>,
    /// The `N` positive frequencies (and their mirrors) removed before labelling.
    pub deleted: Vec<f64>,
    /// Frequencies farther than half a family gap from every free target.
    pub unassigned: Vec<f64>,
    /// `max_n n |λ_n - γ_n|` against the same system with `q ≡ 0`.
    pub perturbation: Option<f64>,
}

impl AsymptoticsReport {
    /// Family index of the frequency at position `index`, if labelled.
    pub fn family_of(&self, index: usize) -> Option<usize> {
        self.families.iter().find(|f| f.members.iter().any(|m| m.index == index)).map(|f| f.family)
    }
}

/// Assigns frequencies to the families `π m / ℓ_j`. The `N` frequencies with
/// the worst assignment residual are deleted first.
pub fn asymptotics_report(freqs: &[f64], system: &StringSystem, phi_prime: Option<&[f64]>) -> AsymptoticsReport {
    let pi = std::f64::consts::PI;
    let lens = system.segment_lengths();
    let top = freqs.iter().cloned().fold(0.0, f64::max);
    // candidate targets (j, m, value)
    let mut targets: Vec<(usize, usize, f64)> = Vec::new();
    for (j, &l) in lens.iter().enumerate() {
        let mut m = 1;
        while pi * m as f64 / l <= top + pi / l {
            targets.push((j, m, pi * m as f64 / l));
            m += 1;
        }
    }
    let nearest = |f: f64, taken: &[bool]| {
        targets
            .iter()
            .enumerate()
            .filter(|(k, _)| !taken[*k])
            .map(|(k, t)| (k, (f - t.2).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    };
    let free_taken = vec![false; targets.len()];
    // delete the N frequencies farthest from any target
    let mut by_residual: Vec<(usize, f64)> =
        freqs.iter().enumerate().map(|(i, &f)| (i, nearest(f, &free_taken).map_or(f64::INFINITY, |x| x.1))).collect();
    by_residual.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let n_del = system.n_masses().min(freqs.len());
    let deleted_idx: Vec<usize> = by_residual[..n_del].iter().map(|x| x.0).collect();
    let mut remaining: Vec<usize> = (0..freqs.len()).filter(|i| !deleted_idx.contains(i)).collect();
    // greedy: closest frequency-target pairs first
    remaining.sort_by(|&a, &b| {
        let ra = nearest(freqs[a], &free_taken).map_or(f64::INFINITY, |x| x.1);
        let rb = nearest(freqs[b], &free_taken).map_or(f64::INFINITY, |x| x.1);
        ra.total_cmp(&rb)
    });
    let mut taken = vec![false; targets.len()];
    let mut families: Vec<FamilyReport> = lens
        .iter()
        .enumerate()
        .map(|(j, &l)| FamilyReport { family: j, segment_length: l, members: vec![], max_scaled_deviation: 0.0 })
        .collect();
    let mut unassigned = Vec::new();
    for i in remaining {
        let f = freqs[i];
        match nearest(f, &taken) {
            Some((k, res)) if res <= 0.5 * pi / lens[targets[k].0] => {
                taken[k] = true;
                let (j, m, t) = targets[k];
                families[j].members.push(FamilyMember {
                    m,
                    lambda: f,
                    deviation: f - t,
                    phi_prime_0: phi_prime.map(|p| p[i]),
                    index: i,
                });
            }
            _ => unassigned.push(f),
        }
    }
    for fam in &mut families {
        fam.members.sort_by_key(|m| m.m);
        fam.max_scaled_deviation = fam.members.iter().map(|m| m.m as f64 * m.deviation.abs()).fold(0.0, f64::max);
    }
    let perturbation = if system.is_potential_free() {
        None
    } else {
        system.with_potentials(vec![]).ok().and_then(|free| {
            find_frequencies(&free, FrequencyCap::Count(freqs.len())).ok().map(|gamma| {
                freqs.iter().zip(&gamma).enumerate().map(|(n, (l, g))| (n + 1) as f64 * (l - g).abs()).fold(0.0, f64::max)
            })
        })
    };
    AsymptoticsReport {
        families,
        deleted: deleted_idx.iter().map(|&i| freqs[i]).collect(),
        unassigned,
        perturbation,
    }
}
