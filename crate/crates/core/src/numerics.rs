//! Quadrature, finite-difference and interpolation helpers on uniform grids.

/// Trapezoid rule.
pub fn trapz(v: &[f64], h: f64) -> f64 {
    match v.len() {
        0 | 1 => 0.0,
        n => h * (0.5 * (v[0] + v[n - 1]) + v[1..n - 1].iter().sum::<f64>()),
    }
}

/// Trapezoid rule applied to `v^2`.
pub fn trapz_sq(v: &[f64], h: f64) -> f64 {
    match v.len() {
        0 | 1 => 0.0,
        n => h * (0.5 * (v[0] * v[0] + v[n - 1] * v[n - 1]) + v[1..n - 1].iter().map(|x| x * x).sum::<f64>()),
    }
}

/// Running trapezoid integral, `out[0] = 0`.
pub fn cumtrapz(v: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    let mut acc = 0.0;
    out.push(0.0);
    for i in 1..v.len() {
        acc += 0.5 * h * (v[i - 1] + v[i]);
        out.push(acc);
    }
    out
}

/// Composite Simpson weights for `n` points; an even point count closes
/// with a 3/8 panel.
pub fn simpson_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![0.0; n];
    match n {
        0 => {}
        1 => {}
        2 => {
            w[0] = 0.5 * h;
            w[1] = 0.5 * h;
        }
        3 => {
            w[0] = h / 3.0;
            w[1] = 4.0 * h / 3.0;
            w[2] = h / 3.0;
        }
        _ => {
            let (simpson_end, tail) = if n % 2 == 1 { (n - 1, false) } else { (n - 4, true) };
            let mut i = 0;
            while i < simpson_end {
                w[i] += h / 3.0;
                w[i + 1] += 4.0 * h / 3.0;
                w[i + 2] += h / 3.0;
                i += 2;
            }
            if tail {
                let s = simpson_end;
                w[s] += 3.0 * h / 8.0;
                w[s + 1] += 9.0 * h / 8.0;
                w[s + 2] += 9.0 * h / 8.0;
                w[s + 3] += 3.0 * h / 8.0;
            }
        }
    }
    w
}

pub fn simpson(v: &[f64], h: f64) -> f64 {
    simpson_weights(v.len(), h).iter().zip(v).map(|(w, x)| w * x).sum()
}

/// Fornberg's recursion: weights `c[m][k]` of the `m`-th derivative at `z`
/// from nodes `x`, for `m = 0..=order`.
pub fn fd_weights(z: f64, x: &[f64], order: usize) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut c = vec![vec![0.0; n]; order + 1];
    let mut c1 = 1.0;
    let mut c4 = x[0] - z;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = x[i] - z;
        for j in 0..i {
            let c3 = x[i] - x[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

/// `m`-th derivative at every node of uniform samples using `width`-point
/// stencils, centred where possible and shifted inward at the ends.
pub fn derivative_with_width(v: &[f64], h: f64, m: usize, width: usize) -> Vec<f64> {
    let n = v.len();
    if m == 0 {
        return v.to_vec();
    }
    let width = width.min(n);
    assert!(width > m, "need more than {m} samples for derivative of order {m}");
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; width];
    let mut out = vec![0.0; n];
    for i in 0..n {
        let lo = i.saturating_sub(width / 2).min(n - width);
        let off = i - lo;
        if cache[off].is_none() {
            let nodes: Vec<f64> = (0..width).map(|k| k as f64).collect();
            let w = fd_weights(off as f64, &nodes, m);
            cache[off] = Some(w[m].iter().map(|c| c / h.powi(m as i32)).collect());
        }
        let w = cache[off].as_ref().unwrap();
        out[i] = w.iter().zip(&v[lo..lo + width]).map(|(a, b)| a * b).sum();
    }
    out
}

/// Second-order accurate `m`-th derivative at every node.
pub fn derivative(v: &[f64], h: f64, m: usize) -> Vec<f64> {
    let width = if m % 2 == 0 { m + 3 } else { m + 2 };
    derivative_with_width(v, h, m, width)
}

/// Derivatives `0..=order` at the left end (`from_left = true`) or right end
/// of uniform samples, using the `width` nearest samples.
pub fn end_derivatives(v: &[f64], h: f64, order: usize, width: usize, at_right: bool) -> Vec<f64> {
    let n = v.len();
    let width = width.min(n);
    let nodes: Vec<f64> = (0..width).map(|k| k as f64 * h).collect();
    let vals: Vec<f64> = if at_right {
        (0..width).map(|k| v[n - 1 - k]).collect()
    } else {
        v[..width].to_vec()
    };
    let w = fd_weights(0.0, &nodes, order);
    (0..=order)
        .map(|m| {
            let d: f64 = w[m].iter().zip(&vals).map(|(a, b)| a * b).sum();
            // nodes run leftward from the right end, so odd derivatives flip
            if at_right && m % 2 == 1 {
                -d
            } else {
                d
            }
        })
        .collect()
}

/// Four-point Lagrange interpolation at fractional index `pos` in `[0, n-1]`.
pub fn interp_uniform(v: &[f64], pos: f64) -> f64 {
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    if n < 4 {
        let i = (pos.floor() as usize).min(n - 2);
        let w = pos - i as f64;
        return v[i] * (1.0 - w) + v[i + 1] * w;
    }
    let i = pos.floor() as isize;
    let frac = pos - i as f64;
    if frac.abs() < 1e-12 && i >= 0 && (i as usize) < n {
        return v[i as usize];
    }
    let base = (i - 1).clamp(0, n as isize - 4) as usize;
    let t = pos - base as f64;
    let (t0, t1, t2, t3) = (t, t - 1.0, t - 2.0, t - 3.0);
    let l0 = -t1 * t2 * t3 / 6.0;
    let l1 = t0 * t2 * t3 / 2.0;
    let l2 = -t0 * t1 * t3 / 2.0;
    let l3 = t0 * t1 * t2 / 6.0;
    l0 * v[base] + l1 * v[base + 1] + l2 * v[base + 2] + l3 * v[base + 3]
}

/// `out[i] = v(t_i - delay)` for a causal trace (zero before `t = 0`) on a
/// uniform grid with step `h`.
pub fn delay_trace(v: &[f64], delay: f64, h: f64) -> Vec<f64> {
    let n = v.len();
    let d = delay / h;
    let di = d.round();
    if (d - di).abs() < 1e-9 {
        let k = di as usize;
        return (0..n).map(|i| if i >= k { v[i - k] } else { 0.0 }).collect();
    }
    (0..n)
        .map(|i| {
            let pos = i as f64 - d;
            if pos < 0.0 {
                // linear ramp between the implicit zero history and v[0]
                if pos > -1.0 {
                    v[0] * (1.0 + pos)
                } else {
                    0.0
                }
            } else {
                interp_uniform(v, pos.min((n - 1) as f64))
            }
        })
        .collect()
}

/// Causal discrete convolution `out[n] = h * sum_trapz_{i=0..n} k[i] f[n-i]`.
pub fn causal_conv(k: &[f64], f: &[f64], h: f64) -> Vec<f64> {
    let n = f.len();
    let mut out = vec![0.0; n];
    for (m, slot) in out.iter_mut().enumerate() {
        if m == 0 {
            continue;
        }
        let mut acc = 0.5 * (k[0] * f[m] + k[m] * f[0]);
        for i in 1..m {
            acc += k[i] * f[m - i];
        }
        *slot = h * acc;
    }
    out
}

/// Bisection for a sign change of `f` on `[a, b]`.
pub fn bisect(mut a: f64, mut b: f64, f: impl Fn(f64) -> f64, tol: f64) -> f64 {
    let mut fa = f(a);
    for _ in 0..200 {
        if (b - a).abs() <= tol {
            break;
        }
        let m = 0.5 * (a + b);
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if (fm < 0.0) == (fa < 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Smooth compactly supported bump `(1 - s^2)^p` on `(c - w, c + w)`.
pub fn bump(x: f64, center: f64, half_width: f64, power: i32) -> f64 {
    let s = (x - center) / half_width;
    if s.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - s * s).powi(power)
    }
}

/// Smooth step: 0 for `s <= 0`, 1 for `s >= 1`, all derivatives vanish at
/// both ends.
pub fn smooth_step(s: f64) -> f64 {
    let e = |s: f64| if s > 0.0 { (-1.0 / s).exp() } else { 0.0 };
    if s <= 0.0 {
        0.0
    } else if s >= 1.0 {
        1.0
    } else {
        e(s) / (e(s) + e(1.0 - s))
    }
}

/// Worker count: `BEADSTRING_THREADS` if set, else the machine's parallelism.
pub fn thread_count() -> usize {
    std::env::var("BEADSTRING_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `(0..n).map(f)` over contiguous index blocks on scoped threads. Each
/// entry is computed independently, so results do not depend on the
/// thread count.
pub fn par_map<T: Send>(n: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let threads = thread_count().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Vec<T>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_exact_on_cubics() {
        for n in [3usize, 4, 5, 8, 11] {
            let h = 1.0 / (n - 1) as f64;
            let v: Vec<f64> = (0..n).map(|i| (i as f64 * h).powi(3)).collect();
            assert!((simpson(&v, h) - 0.25).abs() < 1e-13, "n = {n}");
        }
    }

    #[test]
    fn fornberg_matches_central_difference() {
        let w = fd_weights(0.0, &[-1.0, 0.0, 1.0], 2);
        assert_eq!(w[1], vec![-0.5, 0.0, 0.5]);
        assert_eq!(w[2], vec![1.0, -2.0, 1.0]);
    }

    #[test]
    fn derivative_second_order() {
        let errs: Vec<f64> = [50usize, 100]
            .iter()
            .map(|&n| {
                let h = 1.0 / n as f64;
                let v: Vec<f64> = (0..=n).map(|i| (2.0 * i as f64 * h).sin()).collect();
                let d2 = derivative(&v, h, 2);
                d2.iter()
                    .enumerate()
                    .map(|(i, d)| (d + 4.0 * (2.0 * i as f64 * h).sin()).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        assert!(errs[0] / errs[1] > 3.5, "{errs:?}");
    }

    #[test]
    fn end_derivatives_both_sides() {
        let h = 0.01;
        let v: Vec<f64> = (0..=50).map(|i| (i as f64 * h).exp()).collect();
        let l = end_derivatives(&v, h, 2, 6, false);
        let r = end_derivatives(&v, h, 2, 6, true);
        assert!((l[1] - 1.0).abs() < 1e-8);
        assert!((r[1] - 0.5f64.exp()).abs() < 1e-8);
        assert!((r[2] - 0.5f64.exp()).abs() < 1e-5);
    }

    #[test]
    fn delay_by_integer_and_fraction() {
        let v: Vec<f64> = (0..10).map(|i| i as f64).collect();
        assert_eq!(delay_trace(&v, 2.0, 1.0)[5], 3.0);
        assert!((delay_trace(&v, 2.5, 1.0)[5] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn convolution_of_constants() {
        let k = vec![1.0; 11];
        let f = vec![1.0; 11];
        let c = causal_conv(&k, &f, 0.1);
        assert!((c[10] - 1.0).abs() < 1e-12);
    }
}
