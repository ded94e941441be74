//! Shared test oracles: quadrature on low-dimensional spheres, reference
//! special-function values, and simple statistical tests. Everything here is
//! independent of the library's own numerics.

#![allow(dead_code)]

/// Gauss-Legendre nodes/weights on [-1, 1] by Newton iteration on P_n roots.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            // Evaluate P_n(x) and P_n'(x) by recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                let w = 2.0 / ((1.0 - x * x) * dp * dp);
                nodes[i] = -x;
                nodes[n - 1 - i] = x;
                weights[i] = w;
                weights[n - 1 - i] = w;
                break;
            }
        }
    }
    (nodes, weights)
}

/// Integral of f over the unit circle in R^2 (arc-length measure).
pub fn integrate_circle(f: impl Fn(&[f64]) -> f64, n: usize) -> f64 {
    let mut sum = 0.0;
    for i in 0..n {
        let theta = 2.0 * std::f64::consts::PI * (i as f64 + 0.5) / n as f64;
        sum += f(&[theta.cos(), theta.sin()]);
    }
    sum * 2.0 * std::f64::consts::PI / n as f64
}

/// Integral of f over the unit sphere in R^3 (surface measure), product rule:
/// Gauss-Legendre in cos(polar) x midpoint in azimuth.
pub fn integrate_sphere3(f: impl Fn(&[f64]) -> f64, nt: usize, nphi: usize) -> f64 {
    let (tn, tw) = gauss_legendre(nt);
    let mut sum = 0.0;
    for (t, w) in tn.iter().zip(&tw) {
        let r = (1.0 - t * t).max(0.0).sqrt();
        let mut inner = 0.0;
        for j in 0..nphi {
            let phi = 2.0 * std::f64::consts::PI * (j as f64 + 0.5) / nphi as f64;
            inner += f(&[*t, r * phi.cos(), r * phi.sin()]);
        }
        sum += w * inner * 2.0 * std::f64::consts::PI / nphi as f64;
    }
    sum
}

/// Reference modified Bessel values (Abramowitz & Stegun / published tables).
pub const I0_1: f64 = 1.266_065_877_752_008_4; // I_0(1)
pub const I1_10: f64 = 2670.988_303_701_254; // I_1(10)
pub const I60_40: f64 = 0.071_856_419_684_526_32; // I_60(40)
pub const I0_374: f64 = 9.041_496_849_012_773; // I_0(3.74)

/// I_{1/2}(x) = sqrt(2/(pi x)) sinh(x), closed form.
pub fn i_half(x: f64) -> f64 {
    (2.0 / (std::f64::consts::PI * x)).sqrt() * x.sinh()
}

/// I_{3/2}(x) = sqrt(2/(pi x)) (cosh x - sinh x / x), closed form.
pub fn i_three_halves(x: f64) -> f64 {
    (2.0 / (std::f64::consts::PI * x)).sqrt() * (x.cosh() - x.sinh() / x)
}

/// log C_3(kappa) = log(kappa / (4 pi sinh kappa)), closed form.
pub fn log_c3(kappa: f64) -> f64 {
    (kappa / (4.0 * std::f64::consts::PI * kappa.sinh())).ln()
}

/// A_3(kappa) = coth(kappa) - 1/kappa, closed form.
pub fn a3(kappa: f64) -> f64 {
    1.0 / kappa.tanh() - 1.0 / kappa
}

/// Sphere area by the recursion A_d = A_{d-1} * int_0^pi sin^{d-2}(t) dt,
/// starting from the circle circumference. Independent of the Gamma formula.
pub fn sphere_area_recursive(d: usize) -> f64 {
    assert!(d >= 2);
    let mut area = 2.0 * std::f64::consts::PI;
    for k in 3..=d {
        let (tn, tw) = gauss_legendre(200);
        // map [-1,1] -> [0,pi]
        let integral: f64 = tn
            .iter()
            .zip(&tw)
            .map(|(t, w)| {
                let theta = 0.5 * std::f64::consts::PI * (t + 1.0);
                w * 0.5 * std::f64::consts::PI * theta.sin().powi(k as i32 - 2)
            })
            .sum();
        area *= integral;
    }
    area
}

/// Two-sided two-sample Kolmogorov-Smirnov test; returns (statistic, p-value)
/// using the asymptotic Kolmogorov distribution.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (n, m) = (xa.len(), xb.len());
    let mut i = 0;
    let mut j = 0;
    let mut d: f64 = 0.0;
    while i < n && j < m {
        let x = xa[i].min(xb[j]);
        while i < n && xa[i] <= x {
            i += 1;
        }
        while j < m && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n as f64 * m as f64) / (n as f64 + m as f64);
    (d, kolmogorov_sf(ne.sqrt() * d))
}

/// One-sample KS test against a CDF; returns (statistic, p-value).
pub fn ks_one_sample(xs: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    for (i, x) in s.iter().enumerate() {
        let f = cdf(*x);
        d = d.max((f - i as f64 / n).abs()).max(((i as f64 + 1.0) / n - f).abs());
    }
    (d, kolmogorov_sf(n.sqrt() * d))
}

/// Kolmogorov distribution survival function P(K > x).
pub fn kolmogorov_sf(x: f64) -> f64 {
    if x < 0.02 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        s += if k % 2 == 1 { term } else { -term };
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sided Mann-Whitney U test with normal approximation and tie correction;
/// returns the p-value.
pub fn mann_whitney_p(a: &[f64], b: &[f64]) -> f64 {
    let n1 = a.len() as f64;
    let n2 = b.len() as f64;
    let mut all: Vec<(f64, usize)> = a
        .iter()
        .map(|&x| (x, 0usize))
        .chain(b.iter().map(|&x| (x, 1usize)))
        .collect();
    all.sort_by(|p, q| p.0.total_cmp(&q.0));
    let total = all.len();
    let mut ranks = vec![0.0; total];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < total {
        let mut j = i;
        while j + 1 < total && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        let t = (j - i + 1) as f64;
        if t > 1.0 {
            tie_term += t * t * t - t;
        }
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = rank;
        }
        i = j + 1;
    }
    let r1: f64 = all
        .iter()
        .zip(&ranks)
        .filter(|((_, g), _)| *g == 0)
        .map(|(_, r)| r)
        .sum();
    let u1 = r1 - n1 * (n1 + 1.0) / 2.0;
    let mu = n1 * n2 / 2.0;
    let nt = n1 + n2;
    let sigma2 = n1 * n2 / 12.0 * ((nt + 1.0) - tie_term / (nt * (nt - 1.0)));
    if sigma2 <= 0.0 {
        return 1.0;
    }
    let z = (u1 - mu).abs() / sigma2.sqrt();
    erfc_scaled_p(z)
}

/// Two-sided normal-tail p-value from a |z| score.
pub fn erfc_scaled_p(z: f64) -> f64 {
    statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}

/// Welch's t-test (two-sided) p-value via normal approximation (sample sizes
/// here are large enough that the t vs normal distinction is negligible).
pub fn welch_p(a: &[f64], b: &[f64]) -> f64 {
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let var = |x: &[f64], m: f64| x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (var(a, ma), var(b, mb));
    let se = (va / a.len() as f64 + vb / b.len() as f64).sqrt();
    if se == 0.0 {
        return if ma == mb { 1.0 } else { 0.0 };
    }
    erfc_scaled_p((ma - mb).abs() / se)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn sample_variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}
