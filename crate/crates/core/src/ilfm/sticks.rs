//! Samplers for the stick-weight conditionals: the tail-marginalized
//! extension density for new sticks, and truncated beta-like conditionals
//! for existing ones.

use rand::Rng;
use statrs::distribution::{Beta, ContinuousCDF};

use crate::error::{Error, Result};
use crate::util::log_sum_exp;

/// Resolution of the inverse-CDF grid fallback.
const GRID_POINTS: usize = 4096;
/// Abscissa cap and iteration cap of the adaptive rejection sampler.
const ARS_MAX_POINTS: usize = 40;
const ARS_MAX_ITERS: usize = 200;

/// Draws new stick weights from the conditional of the next stick given the
/// previous one, with every smaller stick marginalized out under all-zero
/// allocations:
///
///   p(μ | μ_prev) ∝ exp(α Σ_{n=1..N} (1/n)(1−μ)^n) μ^{α−1} (1−μ)^N
///
/// on (0, μ_prev]. Uses adaptive rejection sampling when the density is
/// log-concave; otherwise, or on envelope trouble, falls back to a
/// 4096-point grid inverse CDF. Log-concavity depends on (α, N): it holds
/// for α = 2 with small N but fails for large N, so it is checked
/// numerically at construction rather than assumed.
#[derive(Debug, Clone)]
pub struct StickExtensionSampler {
    alpha: f64,
    num_examples: usize,
    log_concave: bool,
    fallback_events: u64,
}

impl StickExtensionSampler {
    pub fn new(alpha: f64, num_examples: usize) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::invalid("mass parameter must be positive"));
        }
        // zero examples is allowed: the density degenerates to μ^{α−1}
        let mut sampler = StickExtensionSampler {
            alpha,
            num_examples,
            log_concave: false,
            fallback_events: 0,
        };
        sampler.log_concave = sampler.check_log_concave();
        Ok(sampler)
    }

    /// Unnormalized log density of the extension conditional.
    pub fn log_density(&self, mu: f64) -> f64 {
        if !(0.0..=1.0).contains(&mu) {
            return f64::NEG_INFINITY;
        }
        if mu == 0.0 {
            // μ^{α−1} diverges, vanishes, or is constant depending on α
            return match self.alpha.partial_cmp(&1.0) {
                Some(std::cmp::Ordering::Less) => f64::INFINITY,
                Some(std::cmp::Ordering::Equal) => self.alpha * self.tilt(0.0),
                _ => f64::NEG_INFINITY,
            };
        }
        self.alpha * self.tilt(mu)
            + (self.alpha - 1.0) * mu.ln()
            + self.num_examples as f64 * (1.0 - mu).ln()
    }

    /// Σ_{n=1..N} (1/n)(1−μ)^n, the log of the marginalized tail mass up to
    /// a constant.
    fn tilt(&self, mu: f64) -> f64 {
        let omm = 1.0 - mu;
        let mut acc = 0.0;
        let mut pow = 1.0;
        for n in 1..=self.num_examples {
            pow *= omm;
            acc += pow / n as f64;
        }
        acc
    }

    /// Derivative of the log density. The tilt sum telescopes to a closed
    /// form: d/dμ [α Σ (1/n)(1−μ)^n] = −α(1−(1−μ)^N)/μ.
    pub fn dlog_density(&self, mu: f64) -> f64 {
        let n = self.num_examples as f64;
        (self.alpha * (1.0 - mu).powi(self.num_examples as i32) - 1.0) / mu - n / (1.0 - mu)
    }

    pub fn is_log_concave(&self) -> bool {
        self.log_concave
    }

    /// Number of times the grid fallback replaced a failed envelope build.
    /// Grid draws taken because the density is not log-concave at all are
    /// not counted; those are the expected path.
    pub fn fallback_count(&self) -> u64 {
        self.fallback_events
    }

    fn check_log_concave(&self) -> bool {
        let points = 1024;
        let mut prev = f64::INFINITY;
        for i in 0..points {
            let mu = (i as f64 + 0.5) / points as f64;
            let d = self.dlog_density(mu);
            if !d.is_finite() {
                return false;
            }
            if d > prev + 1e-10 * prev.abs().max(1.0) {
                return false;
            }
            prev = d;
        }
        true
    }

    /// One draw from the conditional truncated to (0, upper].
    pub fn sample<R: Rng + ?Sized>(&mut self, upper: f64, rng: &mut R) -> Result<f64> {
        if !(upper > 0.0 && upper <= 1.0) {
            return Err(Error::invalid("stick upper bound must lie in (0, 1]"));
        }
        if self.log_concave {
            let h = |mu: f64| self.log_density(mu);
            let dh = |mu: f64| self.dlog_density(mu);
            if let Some(x) = ars_bounded(&h, &dh, 0.0, upper, rng) {
                return Ok(x);
            }
            self.fallback_events += 1;
        } else if self.alpha < 1.0 {
            // the μ^{α−1} singularity carries almost all the mass and a
            // uniform grid cannot see it; invert that factor exactly instead
            if let Some(x) = self.sample_rejection(upper, rng) {
                return Ok(x);
            }
            self.fallback_events += 1;
        }
        self.sample_with_grid(upper, rng)
    }

    /// Grid inverse-CDF draw, exposed so tests can compare it against the
    /// envelope path on the same density.
    pub fn sample_with_grid<R: Rng + ?Sized>(&self, upper: f64, rng: &mut R) -> Result<f64> {
        grid_inverse_cdf(|mu| self.log_density(mu), 0.0, upper, rng)
    }

    /// Exact rejection sampler: μ = upper·U^{1/α} inverts the density
    /// ∝ μ^{α−1} on (0, upper]; the remaining factors are bounded by their
    /// value at zero, giving acceptance exp(α(tilt(μ) − H_N))·(1−μ)^N ≤ 1.
    fn sample_rejection<R: Rng + ?Sized>(&self, upper: f64, rng: &mut R) -> Option<f64> {
        let h_n = harmonic(self.num_examples);
        let n = self.num_examples as f64;
        for _ in 0..1000 {
            let mu = upper * rng.gen::<f64>().powf(1.0 / self.alpha);
            if mu <= 0.0 {
                // the proposal underflowed: the true draw is far below any
                // representable slice, and the acceptance ratio tends to 1
                return Some(f64::MIN_POSITIVE);
            }
            let log_accept = self.alpha * (self.tilt(mu) - h_n) + n * (1.0 - mu).ln();
            if rng.gen::<f64>().ln() <= log_accept {
                return Some(mu);
            }
        }
        None
    }
}

fn harmonic(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum()
}

/// Draws from a density ∝ μ^{a−1}(1−μ)^{b−1} restricted to [lo, hi], with
/// a ≥ 0 and b ≥ 1. The a = 0 case (which a beta distribution cannot
/// express) is handled with a log-uniform proposal, which matches the μ^{−1}
/// factor exactly; a rejection step accounts for (1−μ)^{b−1}.
pub fn sample_truncated_beta_like<R: Rng + ?Sized>(
    a: f64,
    b: f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64> {
    if !(a >= 0.0 && b >= 1.0) || !a.is_finite() || !b.is_finite() {
        return Err(Error::invalid("shape parameters out of range"));
    }
    if !(lo >= 0.0 && lo < hi && hi <= 1.0) {
        return Err(Error::invalid(format!(
            "truncation window [{lo}, {hi}] is not an interval inside [0, 1]"
        )));
    }
    if a == 0.0 {
        if lo == 0.0 {
            return Err(Error::invalid(
                "a zero first shape needs a positive lower truncation",
            ));
        }
        let log_ratio = (hi / lo).ln();
        for _ in 0..10_000 {
            let mu = lo * (rng.gen::<f64>() * log_ratio).exp();
            let log_accept = (b - 1.0) * ((1.0 - mu).ln() - (1.0 - lo).ln());
            if rng.gen::<f64>().ln() <= log_accept {
                return Ok(mu.min(hi));
            }
        }
        return grid_inverse_cdf(
            |mu| -mu.ln() + (b - 1.0) * (1.0 - mu).ln(),
            lo,
            hi,
            rng,
        );
    }
    let beta = Beta::new(a, b)
        .map_err(|e| Error::invalid(format!("beta shapes ({a}, {b}): {e}")))?;
    let f_lo = if lo == 0.0 { 0.0 } else { beta.cdf(lo) };
    let f_hi = beta.cdf(hi);
    let mass = f_hi - f_lo;
    if mass > 1e-12 {
        let u = f_lo + rng.gen::<f64>() * mass;
        let x = beta.inverse_cdf(u);
        if x.is_finite() && x >= lo && x <= hi {
            return Ok(x);
        }
    }
    // window mass too small for the CDF to resolve; sample the shape of the
    // density directly on the window
    grid_inverse_cdf(
        |mu| (a - 1.0) * mu.ln() + (b - 1.0) * (1.0 - mu).ln(),
        lo,
        hi,
        rng,
    )
}

/// Inverse-CDF draw over [lo, hi] from an unnormalized log density evaluated
/// at bin midpoints, uniform within the chosen bin.
pub fn grid_inverse_cdf<R: Rng + ?Sized>(
    log_density: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Result<f64> {
    let width = (hi - lo) / GRID_POINTS as f64;
    let mut logw = Vec::with_capacity(GRID_POINTS);
    for j in 0..GRID_POINTS {
        let mid = lo + (j as f64 + 0.5) * width;
        logw.push(log_density(mid));
    }
    let m = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NoConvergence(
            "grid sampler saw no positive density".into(),
        ));
    }
    let mut cum = Vec::with_capacity(GRID_POINTS);
    let mut total = 0.0;
    for lw in &logw {
        total += (lw - m).exp();
        cum.push(total);
    }
    let target = rng.gen::<f64>() * total;
    let j = cum.partition_point(|&c| c < target).min(GRID_POINTS - 1);
    Ok(lo + (j as f64 + rng.gen::<f64>()) * width)
}

/// Adaptive rejection sampling on a bounded interval with a tangent-line
/// upper hull. Returns None when the hull cannot be built consistently
/// (slopes out of order, non-finite evaluations), signalling the caller to
/// use the grid fallback. Assumes the log density is concave on (lo, hi).
fn ars_bounded<R: Rng + ?Sized>(
    h: &impl Fn(f64) -> f64,
    dh: &impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Option<f64> {
    let mut pts: Vec<(f64, f64, f64)> = Vec::with_capacity(ARS_MAX_POINTS);
    for frac in [0.1, 0.4, 0.7, 0.95] {
        let x = lo + frac * (hi - lo);
        let hx = h(x);
        let sx = dh(x);
        if hx.is_finite() && sx.is_finite() {
            pts.push((x, hx, sx));
        }
    }
    if pts.len() < 2 {
        return None;
    }

    for _ in 0..ARS_MAX_ITERS {
        let (x, seg_top) = sample_hull(&pts, lo, hi, rng)?;
        let hx = h(x);
        if rng.gen::<f64>().ln() <= hx - seg_top {
            return Some(x);
        }
        if pts.len() < ARS_MAX_POINTS && hx.is_finite() {
            let sx = dh(x);
            if sx.is_finite() {
                let idx = pts.partition_point(|p| p.0 < x);
                pts.insert(idx, (x, hx, sx));
            }
        }
    }
    None
}

/// Draws one point from the exponentiated tangent hull; returns the point
/// and the hull's log value there.
fn sample_hull<R: Rng + ?Sized>(
    pts: &[(f64, f64, f64)],
    lo: f64,
    hi: f64,
    rng: &mut R,
) -> Option<(f64, f64)> {
    let m = pts.len();
    // intersection z_i of tangents i and i+1 must fall between the abscissae
    let mut cuts = Vec::with_capacity(m + 1);
    cuts.push(lo);
    for i in 0..m - 1 {
        let (x0, h0, s0) = pts[i];
        let (x1, h1, s1) = pts[i + 1];
        let denom = s0 - s1;
        let z = if denom.abs() <= 1e-12 * (s0.abs() + s1.abs() + 1.0) {
            0.5 * (x0 + x1)
        } else {
            (h1 - h0 - x1 * s1 + x0 * s0) / denom
        };
        let slack = 1e-9 * (hi - lo);
        if z < x0 - slack || z > x1 + slack {
            return None; // concavity violated numerically
        }
        cuts.push(z.clamp(x0, x1));
    }
    cuts.push(hi);

    let mut log_masses = Vec::with_capacity(m);
    for i in 0..m {
        let (a, b) = (cuts[i], cuts[i + 1]);
        if b <= a {
            log_masses.push(f64::NEG_INFINITY);
            continue;
        }
        let (xi, hi_val, si) = pts[i];
        let ell_a = hi_val + si * (a - xi);
        log_masses.push(log_exp_linear_integral(ell_a, si, b - a));
    }
    let log_total = log_sum_exp(&log_masses);
    if !log_total.is_finite() {
        return None;
    }

    let u = rng.gen::<f64>();
    let mut acc = 0.0;
    let mut pick = m - 1;
    for (i, lm) in log_masses.iter().enumerate() {
        acc += (lm - log_total).exp();
        if u <= acc {
            pick = i;
            break;
        }
    }
    let (a, b) = (cuts[pick], cuts[pick + 1]);
    let (xi, hi_val, si) = pts[pick];
    let x = exp_linear_inverse(a, b - a, si, rng.gen::<f64>());
    let top = hi_val + si * (x - xi);
    Some((x.clamp(a, b), top))
}

/// log ∫_0^len exp(c + s t) dt, stable across slope signs and magnitudes.
fn log_exp_linear_integral(c: f64, s: f64, len: f64) -> f64 {
    let sl = s * len;
    if sl.abs() < 1e-10 {
        c + len.ln()
    } else if sl > 0.0 {
        c + sl + (-(-sl).exp()).ln_1p() - s.ln()
    } else {
        c + (-sl.exp()).ln_1p() - (-s).ln()
    }
}

/// Inverse CDF at u of the density ∝ exp(s t) on [a, a + len].
fn exp_linear_inverse(a: f64, len: f64, s: f64, u: f64) -> f64 {
    let sl = s * len;
    if sl.abs() < 1e-10 {
        a + u * len
    } else if sl > 0.0 {
        a + (sl + (u + (1.0 - u) * (-sl).exp()).ln()) / s
    } else {
        a + (u * sl.exp_m1()).ln_1p() / s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn derivative_matches_finite_differences() {
        let s = StickExtensionSampler::new(2.0, 7).unwrap();
        for &mu in &[0.05, 0.3, 0.5, 0.8, 0.97] {
            let h = 1e-6;
            let fd = (s.log_density(mu + h) - s.log_density(mu - h)) / (2.0 * h);
            let an = s.dlog_density(mu);
            assert!(
                (fd - an).abs() <= 1e-4 * an.abs().max(1.0),
                "mu {mu}: fd {fd} vs {an}"
            );
        }
    }

    #[test]
    fn concavity_depends_on_sample_count() {
        assert!(StickExtensionSampler::new(2.0, 4).unwrap().is_log_concave());
        assert!(StickExtensionSampler::new(1.0, 1).unwrap().is_log_concave());
        // the tilt term is log-convex and wins near zero for large N
        assert!(!StickExtensionSampler::new(2.0, 450).unwrap().is_log_concave());
        // μ^{α−1} diverges at zero for α < 1
        assert!(!StickExtensionSampler::new(0.5, 4).unwrap().is_log_concave());
    }

    #[test]
    fn extension_draws_stay_inside_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = StickExtensionSampler::new(2.0, 4).unwrap();
        for &upper in &[1.0, 0.37, 1e-3] {
            for _ in 0..200 {
                let x = s.sample(upper, &mut rng).unwrap();
                assert!(x > 0.0 && x <= upper, "draw {x} outside (0, {upper}]");
            }
        }
        let mut s = StickExtensionSampler::new(2.0, 300).unwrap();
        assert!(!s.is_log_concave());
        for _ in 0..50 {
            let x = s.sample(0.9, &mut rng).unwrap();
            assert!(x > 0.0 && x <= 0.9);
        }
    }

    #[test]
    fn truncated_beta_respects_window_and_piles_at_upper_for_full_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..500 {
            let x = sample_truncated_beta_like(3.0, 8.0, 0.2, 0.5, &mut rng).unwrap();
            assert!((0.2..=0.5).contains(&x));
        }
        // a = N, b = 1 concentrates against the upper truncation
        let n = 40.0;
        let mean: f64 = (0..2000)
            .map(|_| sample_truncated_beta_like(n, 1.0, 0.1, 0.6, &mut rng).unwrap())
            .sum::<f64>()
            / 2000.0;
        assert!(mean > 0.55, "mean {mean} should sit near 0.6");
    }

    #[test]
    fn zero_first_shape_matches_log_uniform_times_survival() {
        // with b = 1 the density is exactly 1/μ; the log draw has mean
        // (hi − lo)/ln(hi/lo)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (lo, hi) = (0.1, 0.9);
        let n = 40_000;
        let mean: f64 = (0..n)
            .map(|_| sample_truncated_beta_like(0.0, 1.0, lo, hi, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        let expect = (hi - lo) / (hi / lo).ln();
        assert!((mean - expect).abs() < 0.01, "mean {mean} vs {expect}");
    }

    #[test]
    fn tight_window_falls_back_to_grid() {
        // far tail of Beta(2, 40): CDF cannot resolve the window mass
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x = sample_truncated_beta_like(2.0, 40.0, 0.95, 0.99, &mut rng).unwrap();
            assert!((0.95..=0.99).contains(&x));
        }
    }

    #[test]
    fn grid_matches_uniform_on_flat_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|_| grid_inverse_cdf(|_| 0.0, 0.25, 0.75, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.005);
    }

    #[test]
    fn ars_and_grid_agree_on_a_gaussian_slice() {
        // standard normal restricted to [-1, 2]: compare sample means
        let h = |x: f64| -0.5 * x * x;
        let dh = |x: f64| -x;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 8000;
        let mut ars_mean = 0.0;
        for _ in 0..n {
            ars_mean += ars_bounded(&h, &dh, -1.0, 2.0, &mut rng).unwrap();
        }
        ars_mean /= n as f64;
        let mut grid_mean = 0.0;
        for _ in 0..n {
            grid_mean += grid_inverse_cdf(h, -1.0, 2.0, &mut rng).unwrap();
        }
        grid_mean /= n as f64;
        assert!(
            (ars_mean - grid_mean).abs() < 0.02,
            "{ars_mean} vs {grid_mean}"
        );
    }
}
