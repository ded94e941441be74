//! Bound machinery for variational inference: Bouchard's log-sum-exp and
//! logistic quadratic bounds, expected squared norms of direction sums, the
//! log-partition upper bound over the sphere, and the prior/entropy terms of
//! the evidence lower bound for the mutual-angular prior.

use ndarray::Array1;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::directional::{
    log_vmf_normalizer, mean_resultant_length, sphere_area_with_convention, AreaConvention,
    GammaParams, UnitVector, UNIFORM_CONCENTRATION_EPS,
};
use crate::error::{Error, Result};
use crate::prior::MabnHyper;
use crate::util::{ksum, log1p_exp, sigmoid, KahanSum};

/// Mean-field factor for one component: vMF over the direction, gamma over
/// the magnitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MabnVariationalFactor {
    pub direction_mean: UnitVector,
    pub direction_concentration: f64,
    pub magnitude: GammaParams,
}

impl MabnVariationalFactor {
    pub fn new(
        direction_mean: UnitVector,
        direction_concentration: f64,
        magnitude: GammaParams,
    ) -> Result<Self> {
        if !(direction_concentration.is_finite() && direction_concentration > 0.0) {
            return Err(Error::invalid("variational concentration must be positive"));
        }
        Ok(MabnVariationalFactor {
            direction_mean,
            direction_concentration,
            magnitude,
        })
    }

    pub fn dim(&self) -> usize {
        self.direction_mean.dim()
    }

    /// A_p(κ̂): the resultant length of the direction factor.
    pub fn resultant(&self) -> f64 {
        mean_resultant_length(self.dim(), self.direction_concentration)
    }

    /// E[direction] = A_p(κ̂) · â.
    pub fn mean_vector(&self) -> Array1<f64> {
        self.direction_mean.coords() * self.resultant()
    }

    /// tr cov(direction) = 1 − A_p(κ̂)² (unit-norm identity).
    pub fn covariance_trace(&self) -> f64 {
        let a = self.resultant();
        1.0 - a * a
    }
}

/// Per-component auxiliary bound parameters (γ_i, ξ_i), ξ_i > 0.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BoundAuxParams {
    pub gamma: f64,
    pub xi: f64,
}

impl BoundAuxParams {
    pub fn new(gamma: f64, xi: f64) -> Result<Self> {
        if !(xi.is_finite() && xi > 0.0) {
            return Err(Error::invalid("aux xi must be positive"));
        }
        Ok(BoundAuxParams { gamma, xi })
    }

    /// Default initialization ξ = 1, γ = 0 (tangency near the origin).
    pub fn init() -> Self {
        BoundAuxParams { gamma: 0.0, xi: 1.0 }
    }
}

/// γ + Σ log(1 + exp(x_k − γ)): an upper bound of log Σ exp(x_k) for any γ.
pub fn bouchard_log_sum_exp_bound(xs: &[f64], gamma: f64) -> f64 {
    let mut acc = KahanSum::new();
    for &x in xs {
        acc.add(log1p_exp(x - gamma));
    }
    gamma + acc.value()
}

/// Curvature coefficient (1/2 − σ(ξ))/(2ξ) of the logistic quadratic bound;
/// strictly negative for ξ > 0, tending to −1/8 as ξ → 0.
pub fn logistic_curvature(xi: f64) -> f64 {
    assert!(xi > 0.0);
    if xi < 1e-6 {
        // series: (1/2 − σ(ξ))/(2ξ) = −1/8 + ξ²/96 + O(ξ⁴)
        -0.125 + xi * xi / 96.0
    } else {
        (0.5 - sigmoid(xi)) / (2.0 * xi)
    }
}

/// Quadratic upper bound of log(1 + e^{−x}), exact at x = ±ξ:
/// log(1+e^{−ξ}) − (x−ξ)/2 − [(1/2−σ(ξ))/(2ξ)](x²−ξ²).
pub fn bouchard_logistic_bound(x: f64, xi: f64) -> Result<f64> {
    if !(xi.is_finite() && xi > 0.0) {
        return Err(Error::invalid("bouchard_logistic_bound requires xi > 0"));
    }
    Ok(log1p_exp(-xi) - 0.5 * (x - xi) - logistic_curvature(xi) * (x * x - xi * xi))
}

/// E‖Σ_{j<count} ã_j‖² for the first `count` factors:
/// Σ_j tr cov(ã_j) + ‖Σ_j E[ã_j]‖² (the double sum over mean inner products).
pub fn expected_sq_norm_of_sum(factors: &[MabnVariationalFactor], count: usize) -> f64 {
    assert!(count <= factors.len());
    if count == 0 {
        return 0.0;
    }
    let p = factors[0].dim();
    let mut mean_sum = Array1::<f64>::zeros(p);
    let mut trace = KahanSum::new();
    for f in &factors[..count] {
        mean_sum = mean_sum + &f.mean_vector();
        trace.add(f.covariance_trace());
    }
    trace.value() + mean_sum.dot(&mean_sum)
}

/// Upper bound of the log normalizer of one conditional direction term, as a
/// function of the expected squared parent-sum norm:
/// −c(ξ)κ²E‖Σ‖²·Area + γ + [log(1+e^{−ξ}) + (ξ−γ)/2 + c(ξ)(ξ²−γ²)]·Area,
/// with c(ξ) the logistic curvature. Defaults to the standard sphere area of
/// the ambient dimension; see `log_partition_upper_bound_with_area`.
pub fn log_partition_upper_bound(
    expected_sq_norm: f64,
    kappa: f64,
    aux: &BoundAuxParams,
    ambient_dim: usize,
) -> Result<f64> {
    log_partition_upper_bound_with_area(
        expected_sq_norm,
        kappa,
        aux,
        ambient_dim,
        AreaConvention::ByAmbientDim,
    )
}

pub fn log_partition_upper_bound_with_area(
    expected_sq_norm: f64,
    kappa: f64,
    aux: &BoundAuxParams,
    ambient_dim: usize,
    convention: AreaConvention,
) -> Result<f64> {
    if expected_sq_norm < 0.0 {
        return Err(Error::invalid("expected squared norm must be nonnegative"));
    }
    if !(aux.xi.is_finite() && aux.xi > 0.0) {
        return Err(Error::invalid("aux xi must be positive"));
    }
    let area = sphere_area_with_convention(ambient_dim, convention)?;
    let c = logistic_curvature(aux.xi);
    let (g, xi) = (aux.gamma, aux.xi);
    Ok(-c * kappa * kappa * expected_sq_norm * area
        + g
        + (log1p_exp(-xi) + 0.5 * (xi - g) + c * (xi * xi - g * g)) * area)
}

/// Coordinate-minimizing auxiliary parameters of the log-partition bound at a
/// given expected squared norm: γ from its stationarity condition (the bound
/// is convex in γ), then ξ² = γ² + κ²E‖Σ‖² (tangency), iterated to a fixed
/// point.
pub fn optimal_aux(
    expected_sq_norm: f64,
    kappa: f64,
    ambient_dim: usize,
    convention: AreaConvention,
) -> Result<BoundAuxParams> {
    let area = sphere_area_with_convention(ambient_dim, convention)?;
    let mut aux = BoundAuxParams::init();
    for _ in 0..50 {
        let c = logistic_curvature(aux.xi);
        let gamma = (1.0 - 0.5 * area) / (2.0 * area * c);
        let xi = (gamma * gamma + kappa * kappa * expected_sq_norm).sqrt().max(1e-8);
        let done = (gamma - aux.gamma).abs() < 1e-12 && (xi - aux.xi).abs() < 1e-12;
        aux = BoundAuxParams { gamma, xi };
        if done {
            break;
        }
    }
    Ok(aux)
}

/// Lower bound of E_q[log p(components)] under the TypeII prior: the root
/// linear term, per-component coupling minus the log-partition upper bound,
/// and the gamma magnitude terms. The additive constant (the root vMF
/// normalizer, which depends on neither the factors nor the aux parameters)
/// is dropped; `aux` supplies (γ_i, ξ_i) for components 2..K.
pub fn mabn_elbo_prior_term(
    factors: &[MabnVariationalFactor],
    hyper: &MabnHyper,
    aux: &[BoundAuxParams],
) -> Result<f64> {
    mabn_elbo_prior_term_with_area(factors, hyper, aux, AreaConvention::ByAmbientDim)
}

pub fn mabn_elbo_prior_term_with_area(
    factors: &[MabnVariationalFactor],
    hyper: &MabnHyper,
    aux: &[BoundAuxParams],
    convention: AreaConvention,
) -> Result<f64> {
    let k = factors.len();
    if k == 0 {
        return Err(Error::invalid("prior term needs at least one factor"));
    }
    if aux.len() != k - 1 {
        return Err(Error::invalid(format!(
            "need {} aux parameter pairs, got {}",
            k - 1,
            aux.len()
        )));
    }
    let p = factors[0].dim();
    if hyper.dim() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: hyper.dim(),
        });
    }
    let kappa = hyper.concentration;
    let mut total = KahanSum::new();
    // Root component: κ μ0ᵀ E[ã₁].
    total.add(kappa * hyper.base_direction.coords().dot(&factors[0].mean_vector()));
    // Later components: coupling −κ E[ã_i]ᵀ Σ_{j<i} E[ã_j] minus the
    // log-partition bound at E‖Σ_{j<i}ã_j‖².
    let mut mean_sum = factors[0].mean_vector();
    for i in 1..k {
        let esn = expected_sq_norm_of_sum(factors, i);
        let mean_i = factors[i].mean_vector();
        total.add(-kappa * mean_i.dot(&mean_sum));
        total.add(-log_partition_upper_bound_with_area(
            esn,
            kappa,
            &aux[i - 1],
            p,
            convention,
        )?);
        mean_sum = mean_sum + &mean_i;
    }
    // Gamma magnitude terms: K(α₁ log α₂ − log Γ(α₁)) + Σ (α₁−1)E[log g] − α₂E[g].
    let (a1, a2) = (hyper.magnitude.shape(), hyper.magnitude.rate());
    total.add(k as f64 * (a1 * a2.ln() - ln_gamma(a1)));
    for f in factors {
        let (r, s) = (f.magnitude.shape(), f.magnitude.rate());
        total.add((a1 - 1.0) * (digamma(r) - s.ln()) - a2 * r / s);
    }
    Ok(total.value())
}

/// E_q[log q] with the vMF normalizer dropped:
/// Σ_k κ̂A_p(κ̂)‖â_k‖² + r_k log s_k − log Γ(r_k) + (r_k−1)(ψ(r_k) − log s_k) − r_k.
pub fn mabn_entropy_term(factors: &[MabnVariationalFactor]) -> f64 {
    ksum(factors.iter().map(|f| {
        let khat = f.direction_concentration;
        let a = f.resultant();
        let norm_sq = f.direction_mean.coords().dot(f.direction_mean.coords());
        let (r, s) = (f.magnitude.shape(), f.magnitude.rate());
        khat * a * norm_sq + r * s.ln() - ln_gamma(r) + (r - 1.0) * (digamma(r) - s.ln()) - r
    }))
}

/// The dropped vMF normalizers Σ_k log C_p(κ̂_k); adding this to
/// `mabn_entropy_term` gives the exact E_q[log q]. Needed whenever κ̂ itself
/// is being optimized, since the normalizer is not constant in κ̂.
pub fn mabn_entropy_normalizer(factors: &[MabnVariationalFactor]) -> f64 {
    ksum(
        factors
            .iter()
            .map(|f| log_vmf_normalizer(f.dim(), f.direction_concentration)),
    )
}

/// E[(η̃ᵀx)²] = tr(xxᵀ(E[η̃]E[η̃]ᵀ + cov(η̃))) for a direction factor:
/// (h/κ̂)‖x‖² + (1 − p·h/κ̂)(âᵀx)² with h = A_p(κ̂).
pub fn expected_quadratic_form(x: &Array1<f64>, factor: &MabnVariationalFactor) -> f64 {
    let p = factor.dim();
    assert_eq!(x.len(), p, "dimension mismatch in expected_quadratic_form");
    let xsq = x.dot(x);
    let khat = factor.direction_concentration;
    if khat < UNIFORM_CONCENTRATION_EPS {
        return xsq / p as f64;
    }
    let h = factor.resultant();
    let dot = factor.direction_mean.coords().dot(x);
    (h / khat) * xsq + (1.0 - p as f64 * h / khat) * dot * dot
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::log_sum_exp;
    use ndarray::array;

    fn factor(dir: UnitVector, khat: f64) -> MabnVariationalFactor {
        MabnVariationalFactor::new(dir, khat, GammaParams::new(2.0, 1.0).unwrap()).unwrap()
    }

    #[test]
    fn lse_bound_examples() {
        assert!((bouchard_log_sum_exp_bound(&[0.0], 0.0) - 2f64.ln()).abs() < 1e-12);
        let v = bouchard_log_sum_exp_bound(&[0.0, 0.0], 2f64.ln());
        let want = 2f64.ln() + 2.0 * 1.5f64.ln();
        assert!((v - want).abs() < 1e-12);
        assert!(v >= 2f64.ln());
    }

    #[test]
    fn logistic_bound_examples() {
        // tangency at x = ξ
        let v = bouchard_logistic_bound(1.0, 1.0).unwrap();
        assert!((v - log1p_exp(-1.0)).abs() < 1e-12);
        // arithmetic oracle at x=0, ξ=1 (and it dominates log 2)
        let v0 = bouchard_logistic_bound(0.0, 1.0).unwrap();
        assert!((v0 - 0.697_732_398_203_220_4).abs() < 1e-12);
        assert!(v0 >= 2f64.ln());
        assert!(bouchard_logistic_bound(0.0, 0.0).is_err());
    }

    #[test]
    fn lse_bound_dominates_lse_property() {
        // deterministic pseudo-random grid
        let mut x = 0.37;
        let mut next = || {
            x = (x * 9301.0 + 49_297.0) % 233_280.0 / 233_280.0;
            x * 20.0 - 10.0
        };
        for _ in 0..1000 {
            let xs: Vec<f64> = (0..4).map(|_| next()).collect();
            let gamma = next();
            assert!(bouchard_log_sum_exp_bound(&xs, gamma) >= log_sum_exp(&xs) - 1e-12);
        }
    }

    #[test]
    fn logistic_bound_dominates_on_grid() {
        for i in 0..=100 {
            let x = -10.0 + 0.2 * i as f64;
            for j in 1..=50 {
                let xi = 0.2 * j as f64;
                let b = bouchard_logistic_bound(x, xi).unwrap();
                assert!(b >= log1p_exp(-x) - 1e-12, "x={x} xi={xi}");
            }
        }
    }

    #[test]
    fn expected_sq_norm_trivial_cases() {
        let f1 = factor(UnitVector::basis(3, 0), 5.0);
        let f2 = factor(UnitVector::basis(3, 1), 5.0);
        assert_eq!(expected_sq_norm_of_sum(&[f1.clone(), f2.clone()], 0), 0.0);
        let one = expected_sq_norm_of_sum(&[f1.clone(), f2.clone()], 1);
        assert!((one - 1.0).abs() < 1e-10, "unit-norm identity: {one}");
        // orthogonal means: cross terms vanish, total = 2
        let two = expected_sq_norm_of_sum(&[f1, f2], 2);
        assert!((two - 2.0).abs() < 1e-10, "{two}");
    }

    #[test]
    fn partition_bound_reduces_when_no_parents() {
        let aux = BoundAuxParams::new(0.3, 1.7).unwrap();
        let p = 3;
        let area = crate::directional::sphere_area(p).unwrap();
        let c = logistic_curvature(aux.xi);
        let want = aux.gamma
            + (log1p_exp(-aux.xi) + 0.5 * (aux.xi - aux.gamma)
                + c * (aux.xi * aux.xi - aux.gamma * aux.gamma))
                * area;
        let got = log_partition_upper_bound(0.0, 2.0, &aux, p).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn partition_bound_monotone_in_expected_norm() {
        let aux = BoundAuxParams::new(0.1, 2.0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..20 {
            let esn = i as f64 * 0.5;
            let v = log_partition_upper_bound(esn, 1.3, &aux, 3).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn entropy_term_gamma_part() {
        // r=1, s=1: gamma contribution is −1; direction part κ̂A_p(κ̂)
        let f = MabnVariationalFactor::new(
            UnitVector::basis(3, 0),
            2.0,
            GammaParams::new(1.0, 1.0).unwrap(),
        )
        .unwrap();
        let v = mabn_entropy_term(&[f.clone()]);
        let want = 2.0 * mean_resultant_length(3, 2.0) - 1.0;
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn quadratic_form_trivial_cases() {
        let f = factor(UnitVector::basis(3, 0), 5.0);
        assert_eq!(expected_quadratic_form(&array![0.0, 0.0, 0.0], &f), 0.0);
        // point-mass limit along x
        let f_inf = factor(UnitVector::basis(3, 0), 5e7);
        let x = array![2.0, 0.0, 0.0];
        let v = expected_quadratic_form(&x, &f_inf);
        assert!((v - 4.0).abs() < 1e-4, "{v}");
    }

    #[test]
    fn prior_term_prefers_orthogonal_configurations() {
        let h = MabnHyper::new(
            UnitVector::basis(3, 0),
            2.0,
            GammaParams::new(2.0, 1.0).unwrap(),
        )
        .unwrap();
        let aux = vec![BoundAuxParams::init()];
        let parallel = [
            factor(UnitVector::basis(3, 0), 10.0),
            factor(UnitVector::basis(3, 0), 10.0),
        ];
        let orthogonal = [
            factor(UnitVector::basis(3, 0), 10.0),
            factor(UnitVector::basis(3, 1), 10.0),
        ];
        let vp = mabn_elbo_prior_term(&parallel, &h, &aux).unwrap();
        let vo = mabn_elbo_prior_term(&orthogonal, &h, &aux).unwrap();
        assert!(vo > vp, "orthogonal {vo} should beat parallel {vp}");
    }

    #[test]
    fn prior_term_k1_reduction() {
        let h = MabnHyper::new(
            UnitVector::basis(3, 2),
            1.5,
            GammaParams::new(3.0, 2.0).unwrap(),
        )
        .unwrap();
        let f = factor(UnitVector::basis(3, 2), 4.0);
        let got = mabn_elbo_prior_term(&[f.clone()], &h, &[]).unwrap();
        let (r, s) = (f.magnitude.shape(), f.magnitude.rate());
        let want = 1.5 * f.resultant()
            + (3.0 * 2f64.ln() - ln_gamma(3.0))
            + (3.0 - 1.0) * (digamma(r) - s.ln())
            - 2.0 * r / s;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn optimal_aux_tightens_the_bound() {
        for &(esn, kappa) in &[(0.0, 1.0), (1.7, 2.0), (4.0, 0.5)] {
            let opt = optimal_aux(esn, kappa, 3, AreaConvention::ByAmbientDim).unwrap();
            let at_opt = log_partition_upper_bound(esn, kappa, &opt, 3).unwrap();
            let at_init =
                log_partition_upper_bound(esn, kappa, &BoundAuxParams::init(), 3).unwrap();
            assert!(at_opt <= at_init + 1e-10);
            // perturbations do not improve
            for &(dg, dx) in &[(0.05, 0.0), (-0.05, 0.0), (0.0, 0.05), (0.0, -0.05)] {
                if opt.xi + dx <= 0.0 {
                    continue;
                }
                let near = BoundAuxParams::new(opt.gamma + dg, opt.xi + dx).unwrap();
                let v = log_partition_upper_bound(esn, kappa, &near, 3).unwrap();
                assert!(v >= at_opt - 1e-9, "esn={esn} kappa={kappa}");
            }
        }
    }
}
