//! Property checks for the invariants the library promises.

use std::sync::OnceLock;

use beadstring::control::{full_control_with, FullControlOptions, MomentSetup};
use beadstring::dynamics::{Side, TransmissionOperator};
use beadstring::edd::{dd_numbers, dd_reconstruct, edd_evaluate, DdKind};
use beadstring::fd::{simulate_fd, FdGrid, DEFAULT_CFL};
use beadstring::kernel::{KernelCache, KernelTable};
use beadstring::model::{Potential, Profile, SampledFunction, StringSystem};
use beadstring::numerics::bump;
use beadstring::spaces::{norm_w0, norm_wm1};
use beadstring::spectral::{count_below, find_frequencies, FrequencyCap};
use proptest::prelude::*;

/// Sorted nodes with relative gaps of at least a few percent.
fn nodes(n: usize) -> impl Strategy<Value = Vec<f64>> {
    (1.0f64..40.0, prop::collection::vec(0.05f64..2.0, n - 1)).prop_map(|(start, gaps)| {
        let mut v = vec![start];
        for g in gaps {
            v.push(v[v.len() - 1] + g);
        }
        v
    })
}

fn max_gap(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn one_mass() -> StringSystem {
    StringSystem::free(1.0, &[(0.5, 1.0)]).unwrap()
}

fn setup() -> &'static (StringSystem, MomentSetup) {
    static SETUP: OnceLock<(StringSystem, MomentSetup)> = OnceLock::new();
    SETUP.get_or_init(|| {
        let s = one_mass();
        let m = MomentSetup::new(&s, 10, 1e-3).unwrap();
        (s, m)
    })
}

fn bump_profile(s: &StringSystem, c: f64, w: f64, a: f64) -> Profile {
    Profile::from_fn(s, 1e-3, |_, x| a * bump(x, c, w, 4))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dd_reconstruct_inverts_dd_numbers(freqs in nodes(5), values in prop::collection::vec(-1.0f64..1.0, 5)) {
        let dd = dd_numbers(&freqs, &values).unwrap();
        let back = dd_reconstruct(&freqs, &dd).unwrap();
        prop_assert!(max_gap(&back, &values) < 1e-9);
    }

    #[test]
    fn dd_numbers_are_linear(
        freqs in nodes(4),
        u in prop::collection::vec(-1.0f64..1.0, 4),
        v in prop::collection::vec(-1.0f64..1.0, 4),
        a in -3.0f64..3.0,
    ) {
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + y).collect();
        let (du, dv) = (dd_numbers(&freqs, &u).unwrap(), dd_numbers(&freqs, &v).unwrap());
        let want: Vec<f64> = du.iter().zip(&dv).map(|(x, y)| a * x + y).collect();
        let got = dd_numbers(&freqs, &mix).unwrap();
        let scale = 1.0 + want.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assert!(max_gap(&got, &want) < 1e-12 * scale);
    }

    #[test]
    fn top_divided_difference_ignores_node_order(freqs in nodes(3), t in 0.0f64..3.0, kind in 0usize..3) {
        let kind = [DdKind::Exponential, DdKind::Sine, DdKind::Cosine][kind];
        let swapped = vec![freqs[1], freqs[2], freqs[0]];
        let a = edd_evaluate(&freqs, &[t], kind, true).unwrap();
        let b = edd_evaluate(&swapped, &[t], kind, true).unwrap();
        prop_assert!((a[2][0] - b[2][0]).norm() < 1e-12);
    }

    #[test]
    fn frequencies_count_themselves(a in 0.2f64..0.8, m in 0.2f64..5.0) {
        let s = StringSystem::free(1.0, &[(a, m)]).unwrap();
        let f = find_frequencies(&s, FrequencyCap::Count(12)).unwrap();
        for (n, &l) in f.iter().enumerate() {
            prop_assert_eq!(count_below(&s, l * (1.0 - 1e-7)), n);
            prop_assert_eq!(count_below(&s, l * (1.0 + 1e-7)), n + 1);
        }
    }

    #[test]
    fn norms_are_homogeneous(c in 0.15f64..0.85, w in 0.05f64..0.12, alpha in -5.0f64..5.0) {
        let s = one_mass();
        let p = bump_profile(&s, c, w, 1.0);
        let q = p.scaled(alpha);
        let (n0, n1) = (norm_w0(&p, &s).unwrap(), norm_wm1(&p, &s).unwrap());
        prop_assert!((norm_w0(&q, &s).unwrap() - alpha.abs() * n0).abs() <= 1e-12 * (1.0 + n0 * alpha.abs()));
        prop_assert!((norm_wm1(&q, &s).unwrap() - alpha.abs() * n1).abs() <= 1e-12 * (1.0 + n1 * alpha.abs()));
    }

    #[test]
    fn kernel_moves_continuously_with_q(c in -2.0f64..2.0, eps in 1e-4f64..1e-2) {
        let h = 1.0 / 32.0;
        let k0 = KernelTable::from_potential(|_| c, 1.0, 1.0, h).unwrap();
        let k1 = KernelTable::from_potential(|_| c + eps, 1.0, 1.0, h).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..=8 {
            for j in 0..=i {
                let (s, y) = (i as f64 / 8.0, j as f64 / 8.0);
                worst = worst.max((k0.value(y, s) - k1.value(y, s)).abs());
            }
        }
        prop_assert!(worst <= 2.0 * eps);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn transmission_round_trip(a in -2.0f64..2.0, b in -2.0f64..2.0, w in 1.0f64..8.0, q in 0.0f64..2.0) {
        let s = StringSystem::new(1.0, &[(0.5, 1.0)], vec![Potential::constant(q), Potential::constant(q)]).unwrap();
        let mut cache = KernelCache::new();
        let op = TransmissionOperator::new(&s, &mut cache, 1, Side::Left, 1.0, 1e-3).unwrap();
        let f = SampledFunction::time_signal(1.0, 1e-3, |t| a * (w * t).sin() + b * t * t);
        let back = op.inverse(&op.apply(&f).unwrap()).unwrap();
        prop_assert!(max_gap(&back.values, &f.values) < 1e-6);
    }

    #[test]
    fn fd_is_linear_in_the_control(a in -2.0f64..2.0, c1 in 0.1f64..0.4, c2 in 0.1f64..0.4) {
        let s = one_mass();
        let grid = FdGrid::new(&s, 0.01, 0.8, DEFAULT_CFL).unwrap();
        let f = SampledFunction::time_signal(0.8, grid.dt, |t| bump(t, c1, 0.1, 4));
        let g = SampledFunction::time_signal(0.8, grid.dt, |t| bump(t, c2, 0.1, 3));
        let mix = SampledFunction::time_signal(0.8, grid.dt, |t| a * bump(t, c1, 0.1, 4) + bump(t, c2, 0.1, 3));
        let (uf, ug, um) = (
            simulate_fd(&s, &f, &grid).unwrap(),
            simulate_fd(&s, &g, &grid).unwrap(),
            simulate_fd(&s, &mix, &grid).unwrap(),
        );
        let want = uf.displacement.scaled(a).add(&ug.displacement);
        prop_assert!(um.displacement.sub(&want).max_abs() < 1e-12);
        prop_assert!(um.velocity.sub(&uf.velocity.scaled(a).add(&ug.velocity)).max_abs() < 1e-10);
    }

    #[test]
    fn full_control_is_linear_in_the_targets(c0 in 0.15f64..0.35, c1 in 0.6f64..0.85, alpha in -3.0f64..3.0) {
        let (s, m) = setup();
        let opts = FullControlOptions { clusters: 10, ..Default::default() };
        let (y0, y1) = (bump_profile(s, c0, 0.1, 1.0), bump_profile(s, c1, 0.1, 0.5));
        let base = full_control_with(s, m, &y0, &y1, 2.2, &opts).unwrap();
        let scaled = full_control_with(s, m, &y0.scaled(alpha), &y1.scaled(alpha), 2.2, &opts).unwrap();
        let want: Vec<f64> = base.control.values.iter().map(|v| alpha * v).collect();
        let scale = 1.0 + base.control.max_abs() * alpha.abs();
        prop_assert!(max_gap(&scaled.control.values, &want) < 1e-9 * scale);
    }
}

#[test]
fn zero_targets_give_zero_control() {
    let (s, m) = setup();
    let z = Profile::zeros(s, 1e-3);
    let fc = full_control_with(s, m, &z, &z, 2.2, &FullControlOptions { clusters: 10, ..Default::default() }).unwrap();
    assert!(fc.control.values.iter().all(|&v| v == 0.0));
    assert_eq!(fc.energy_ratio, 0.0);
}

#[test]
fn full_control_is_deterministic() {
    let (s, m) = setup();
    let opts = FullControlOptions { clusters: 10, ..Default::default() };
    let (y0, y1) = (bump_profile(s, 0.25, 0.1, 1.0), bump_profile(s, 0.75, 0.1, -0.3));
    let a = full_control_with(s, m, &y0, &y1, 2.2, &opts).unwrap();
    let b = full_control_with(s, m, &y0, &y1, 2.2, &opts).unwrap();
    assert_eq!(a.control.values, b.control.values);
}
