//! Distributions and geometry on the unit sphere: von Mises-Fisher density,
//! sampling and moments, gamma moments, angles, and sphere surface areas.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::util::log_sum_exp;

/// Below this concentration the vMF is treated as uniform on the sphere,
/// avoiding 0/0 in mean-direction normalization.
pub const UNIFORM_CONCENTRATION_EPS: f64 = 1e-8;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A vector on the unit sphere in R^p, p >= 2. Norm is validated to 1e-9.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(Array1<f64>);

impl UnitVector {
    pub fn new(coords: Array1<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::invalid("unit vector needs dimension >= 2"));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("unit vector coordinates".into()));
        }
        let norm = coords.dot(&coords).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "vector norm {norm} differs from 1 beyond 1e-9"
            )));
        }
        Ok(UnitVector(coords))
    }

    /// Normalizes an arbitrary nonzero vector onto the sphere.
    pub fn from_unnormalized(coords: Array1<f64>) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::invalid("unit vector needs dimension >= 2"));
        }
        let norm = coords.dot(&coords).sqrt();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(Error::invalid("cannot normalize a (near-)zero vector"));
        }
        Ok(UnitVector(coords / norm))
    }

    /// Standard basis vector e_axis in dimension p.
    pub fn basis(p: usize, axis: usize) -> Self {
        assert!(p >= 2 && axis < p);
        let mut v = Array1::zeros(p);
        v[axis] = 1.0;
        UnitVector(v)
    }

    pub fn coords(&self) -> &Array1<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        self.0.dot(&other.0)
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        UnitVector::new(Array1::from(v))
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(u: UnitVector) -> Vec<f64> {
        u.0.to_vec()
    }
}

/// von Mises-Fisher parameters (mean direction mu, concentration kappa > 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VmfParams {
    mean_direction: UnitVector,
    concentration: f64,
}

impl VmfParams {
    pub fn new(mean_direction: UnitVector, concentration: f64) -> Result<Self> {
        if !concentration.is_finite() || concentration <= 0.0 {
            return Err(Error::invalid("vMF concentration must be positive and finite"));
        }
        Ok(VmfParams {
            mean_direction,
            concentration,
        })
    }

    pub fn mean_direction(&self) -> &UnitVector {
        &self.mean_direction
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn dim(&self) -> usize {
        self.mean_direction.dim()
    }
}

/// Gamma parameters in shape/rate form.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GammaParams {
    shape: f64,
    rate: f64,
}

impl GammaParams {
    pub fn new(shape: f64, rate: f64) -> Result<Self> {
        if !(shape.is_finite() && shape > 0.0 && rate.is_finite() && rate > 0.0) {
            return Err(Error::invalid("gamma shape and rate must be positive and finite"));
        }
        Ok(GammaParams { shape, rate })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn log_density(&self, g: f64) -> f64 {
        if g <= 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() - ln_gamma(self.shape) + (self.shape - 1.0) * g.ln()
            - self.rate * g
    }
}

/// log I_nu(x) for nu >= 0, x >= 0, evaluated by the power series with
/// log-space accumulation. Converges for all x; safe up to x ~ 1e4 and beyond
/// because terms are summed as logs.
pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x >= 0.0, "log_bessel_i requires nu >= 0, x >= 0");
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let lh = (0.5 * x).ln();
    let mut terms: Vec<f64> = Vec::with_capacity(64);
    let mut peak = f64::NEG_INFINITY;
    let mut m = 0usize;
    loop {
        let mf = m as f64;
        let t = (2.0 * mf + nu) * lh - ln_gamma(mf + 1.0) - ln_gamma(mf + nu + 1.0);
        terms.push(t);
        if t > peak {
            peak = t;
        }
        // Stop once past the peak (term ratio < 1) and negligibly small.
        let ratio_lt_one = (mf + 1.0) * (mf + nu + 1.0) > 0.25 * x * x;
        if ratio_lt_one && t < peak - 46.0 {
            break;
        }
        m += 1;
        assert!(m < 400_000, "bessel series failed to terminate");
    }
    log_sum_exp(&terms)
}

/// Ratio I_{nu+1}(x)/I_nu(x) by the continued fraction
/// x/(2(nu+1) + x^2/(2(nu+2) + ...)), evaluated with the modified Lentz
/// algorithm. Stable for all x >= 0 without computing I itself.
pub fn bessel_i_ratio(nu: f64, x: f64) -> f64 {
    assert!(nu >= 0.0 && x >= 0.0);
    if x < 1e-12 {
        return x / (2.0 * (nu + 1.0));
    }
    let tiny = 1e-300;
    let mut f = tiny;
    let mut c = f;
    let mut d = 0.0;
    let x2 = x * x;
    let mut j = 1.0;
    loop {
        let (a, b) = if j == 1.0 {
            (x, 2.0 * (nu + 1.0))
        } else {
            (x2, 2.0 * (nu + j))
        };
        d = b + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = b + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-15 {
            return f;
        }
        j += 1.0;
        assert!(j < 1e7, "bessel ratio continued fraction failed to converge");
    }
}

/// Mean resultant length A_p(kappa) = I_{p/2}(kappa)/I_{p/2-1}(kappa) of a
/// vMF in ambient dimension p. Tends to kappa/p as kappa -> 0 and 1 as
/// kappa -> inf.
pub fn mean_resultant_length(p: usize, kappa: f64) -> f64 {
    assert!(p >= 2);
    bessel_i_ratio(0.5 * p as f64 - 1.0, kappa)
}

/// Which dimension the sphere-area argument denotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AreaConvention {
    /// Argument is the ambient dimension d: area of {x in R^d : |x| = 1}.
    ByAmbientDim,
    /// Argument is treated as the manifold dimension, i.e. the sphere sits in
    /// ambient dimension d+1. Kept for verbatim reproduction of sources that
    /// use the shifted exponent; not the default.
    ByManifoldDim,
}

/// Surface area 2 pi^{d/2} / Gamma(d/2) of the unit sphere in ambient
/// dimension d (4*pi for d = 3).
pub fn sphere_area(ambient_dim: usize) -> Result<f64> {
    sphere_area_with_convention(ambient_dim, AreaConvention::ByAmbientDim)
}

pub fn sphere_area_with_convention(dim: usize, convention: AreaConvention) -> Result<f64> {
    if dim < 2 {
        return Err(Error::invalid("sphere_area requires dimension >= 2"));
    }
    let d = match convention {
        AreaConvention::ByAmbientDim => dim as f64,
        AreaConvention::ByManifoldDim => dim as f64 + 1.0,
    };
    Ok((std::f64::consts::LN_2 + 0.5 * d * std::f64::consts::PI.ln() - ln_gamma(0.5 * d)).exp())
}

/// log C_p(kappa) = (p/2-1) log kappa - (p/2) log(2 pi) - log I_{p/2-1}(kappa),
/// with the uniform-density limit below the concentration epsilon.
pub fn log_vmf_normalizer(p: usize, kappa: f64) -> f64 {
    assert!(p >= 2 && kappa >= 0.0);
    if kappa < UNIFORM_CONCENTRATION_EPS {
        return -sphere_area(p).expect("p >= 2").ln();
    }
    let nu = 0.5 * p as f64 - 1.0;
    nu * kappa.ln() - 0.5 * p as f64 * LN_2PI - log_bessel_i(nu, kappa)
}

/// Log-density of the vMF distribution at x: log C_p(kappa) + kappa mu.x.
pub fn vmf_log_density(x: &UnitVector, params: &VmfParams) -> Result<f64> {
    if x.dim() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            got: x.dim(),
        });
    }
    Ok(log_vmf_normalizer(params.dim(), params.concentration())
        + params.concentration() * params.mean_direction().dot(x))
}

/// Moments of a vMF distribution (Appendix-style closed forms).
#[derive(Debug, Clone)]
pub struct VmfMoments {
    pub mean: Array1<f64>,
    pub covariance: Array2<f64>,
    pub second_moment: f64,
}

/// mean = A_p(k) mu; covariance = (h/k) I + (1 - p h/k - h^2) mu mu^T with
/// h = I_{p/2}/I_{p/2-1}; second_moment = tr(cov) + A_p^2 |mu|^2 (identically 1).
pub fn vmf_moments(params: &VmfParams) -> VmfMoments {
    let p = params.dim();
    let mu = params.mean_direction().coords();
    let kappa = params.concentration();
    if kappa < UNIFORM_CONCENTRATION_EPS {
        let cov = Array2::eye(p) / p as f64;
        return VmfMoments {
            mean: Array1::zeros(p),
            covariance: cov,
            second_moment: 1.0,
        };
    }
    let h = mean_resultant_length(p, kappa);
    let iso = h / kappa;
    let aniso = 1.0 - p as f64 * iso - h * h;
    let mut cov = Array2::eye(p) * iso;
    for i in 0..p {
        for j in 0..p {
            cov[[i, j]] += aniso * mu[i] * mu[j];
        }
    }
    let tr: f64 = (0..p).map(|i| cov[[i, i]]).sum();
    let mean = mu * h;
    let second_moment = tr + h * h * mu.dot(mu);
    VmfMoments {
        mean,
        covariance: cov,
        second_moment,
    }
}

/// Gamma mean and mean-log: E[g] = shape/rate, E[log g] = psi(shape) - log rate.
#[derive(Debug, Clone, Copy)]
pub struct GammaMoments {
    pub mean: f64,
    pub mean_log: f64,
}

pub fn gamma_moments(params: &GammaParams) -> GammaMoments {
    GammaMoments {
        mean: params.shape() / params.rate(),
        mean_log: digamma(params.shape()) - params.rate().ln(),
    }
}

/// Uniform draw on the unit sphere in R^p (normalized Gaussian).
pub fn uniform_sphere_sample<R: Rng + ?Sized>(p: usize, rng: &mut R) -> UnitVector {
    assert!(p >= 2);
    loop {
        let z: Array1<f64> = Array1::from_iter((0..p).map(|_| StandardNormal.sample(rng)));
        if let Ok(u) = UnitVector::from_unnormalized(z) {
            return u;
        }
    }
}

/// Exact vMF draw by rejection on the tangent-normal decomposition
/// (Wood's envelope for the cosine component). Falls back to uniform below
/// the concentration epsilon.
pub fn vmf_sample<R: Rng + ?Sized>(params: &VmfParams, rng: &mut R) -> UnitVector {
    let p = params.dim();
    let kappa = params.concentration();
    if kappa < UNIFORM_CONCENTRATION_EPS {
        return uniform_sphere_sample(p, rng);
    }
    let mu = params.mean_direction().coords();
    let pm1 = (p - 1) as f64;
    // Envelope constants; b written in rationalized form to avoid cancellation.
    let b = pm1 / ((4.0 * kappa * kappa + pm1 * pm1).sqrt() + 2.0 * kappa);
    let x0 = (1.0 - b) / (1.0 + b);
    let one_minus_x0sq = 4.0 * b / ((1.0 + b) * (1.0 + b));
    let c = kappa * x0 + pm1 * one_minus_x0sq.ln();
    let beta = Beta::new(0.5 * pm1, 0.5 * pm1).expect("p >= 2 gives valid Beta");
    let t = loop {
        let z: f64 = beta.sample(rng);
        let t = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.gen::<f64>();
        if kappa * t + pm1 * (1.0 - x0 * t).ln() - c >= u.ln() {
            break t;
        }
    };
    // Uniform tangent direction orthogonal to mu.
    let perp = loop {
        let z: Array1<f64> = Array1::from_iter((0..p).map(|_| StandardNormal.sample(rng)));
        let proj = &z - &(mu * z.dot(mu));
        let norm = proj.dot(&proj).sqrt();
        if norm > 1e-12 {
            break proj / norm;
        }
    };
    let x = mu * t + &(perp * (1.0 - t * t).max(0.0).sqrt());
    UnitVector::from_unnormalized(x).expect("vMF draw is nonzero")
}

/// Draws n vMF samples as rows of an n x p matrix.
pub fn vmf_sample_n<R: Rng + ?Sized>(params: &VmfParams, n: usize, rng: &mut R) -> Array2<f64> {
    let p = params.dim();
    let mut out = Array2::zeros((n, p));
    for i in 0..n {
        let s = vmf_sample(params, rng);
        out.row_mut(i).assign(s.coords());
    }
    out
}

/// Non-obtuse angle arccos(|a.b| / (|a||b|)) in [0, pi/2]. Scale-invariant in
/// both arguments; the cosine is clamped to [-1, 1] before arccos.
pub fn nonobtuse_angle(a: &Array1<f64>, b: &Array1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na < 1e-300 || nb < 1e-300 {
        return Err(Error::invalid("nonobtuse_angle requires nonzero vectors"));
    }
    let cos = (a.dot(b).abs() / (na * nb)).clamp(-1.0, 1.0);
    Ok(cos.acos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unit_vector_validation() {
        assert!(UnitVector::new(array![1.0, 0.0]).is_ok());
        assert!(UnitVector::new(array![1.0, 1.0]).is_err());
        assert!(UnitVector::new(array![1.0]).is_err());
        assert!(UnitVector::from_unnormalized(array![0.0, 0.0]).is_err());
        let u = UnitVector::from_unnormalized(array![3.0, 4.0]).unwrap();
        assert!((u.coords()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn angles_trivial_cases() {
        let ang = |a: Array1<f64>, b: Array1<f64>| nonobtuse_angle(&a, &b).unwrap();
        assert!((ang(array![1.0, 0.0], array![0.0, 1.0]) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(ang(array![1.0, 0.0], array![-1.0, 0.0]).abs() < 1e-12);
        assert!((ang(array![1.0, 1.0], array![1.0, 0.0]) - std::f64::consts::FRAC_PI_4).abs() < 1e-12);
        // scale invariance
        assert!(
            (ang(array![2.5, 0.0], array![1.0, 1.0]) - ang(array![1.0, 0.0], array![-3.0, -3.0])).abs()
                < 1e-12
        );
        assert!(nonobtuse_angle(&array![0.0, 0.0], &array![1.0, 0.0]).is_err());
    }

    #[test]
    fn sphere_areas() {
        use std::f64::consts::PI;
        assert!((sphere_area(2).unwrap() - 2.0 * PI).abs() < 1e-12);
        assert!((sphere_area(3).unwrap() - 4.0 * PI).abs() < 1e-12);
        assert!((sphere_area(4).unwrap() - 2.0 * PI * PI).abs() < 1e-10);
        assert!(sphere_area(1).is_err());
        // Shifted convention: argument read as manifold dimension.
        assert!(
            (sphere_area_with_convention(2, AreaConvention::ByManifoldDim).unwrap()
                - sphere_area(3).unwrap())
            .abs()
                < 1e-12
        );
    }

    #[test]
    fn gamma_moments_basic() {
        let m = gamma_moments(&GammaParams::new(3.0, 2.0).unwrap());
        assert!((m.mean - 1.5).abs() < 1e-15);
        let m1 = gamma_moments(&GammaParams::new(1.0, 1.0).unwrap());
        assert!((m1.mean_log + 0.577_215_664_901_532_9).abs() < 1e-10);
        // concentration: shape = rate = k, large k
        let mk = gamma_moments(&GammaParams::new(4000.0, 4000.0).unwrap());
        assert!((mk.mean - 1.0).abs() < 1e-12 && mk.mean_log.abs() < 1e-3);
        // Jensen: E[log g] < log E[g]
        for &(a, b) in &[(0.5, 1.0), (2.0, 3.0), (10.0, 0.1)] {
            let m = gamma_moments(&GammaParams::new(a, b).unwrap());
            assert!(m.mean_log < m.mean.ln());
        }
    }

    #[test]
    fn vmf_density_uniform_limit() {
        let mu = UnitVector::basis(4, 0);
        let params = VmfParams::new(mu, 1e-9).unwrap();
        let x = UnitVector::basis(4, 1);
        let y = UnitVector::from_unnormalized(array![1.0, -1.0, 1.0, -1.0]).unwrap();
        let dx = vmf_log_density(&x, &params).unwrap();
        let dy = vmf_log_density(&y, &params).unwrap();
        assert!((dx - dy).abs() < 1e-7);
    }

    #[test]
    fn vmf_density_no_overflow_at_extreme_kappa() {
        for &p in &[2usize, 3, 10, 100] {
            let mu = UnitVector::basis(p, 0);
            let x = UnitVector::basis(p, 1);
            for &kappa in &[1e2, 1e3, 1e4] {
                let params = VmfParams::new(mu.clone(), kappa).unwrap();
                let v = vmf_log_density(&x, &params).unwrap();
                assert!(v.is_finite(), "p={p} kappa={kappa} gave {v}");
            }
        }
    }

    #[test]
    fn moments_unit_norm_identity() {
        for &p in &[2usize, 3, 10, 100] {
            for &kappa in &[0.1, 1.0, 10.0, 100.0] {
                let params = VmfParams::new(UnitVector::basis(p, 0), kappa).unwrap();
                let m = vmf_moments(&params);
                assert!(
                    (m.second_moment - 1.0).abs() < 1e-8,
                    "p={p} kappa={kappa}: {}",
                    m.second_moment
                );
            }
        }
    }

    #[test]
    fn moments_limits() {
        let params = VmfParams::new(UnitVector::basis(3, 0), 5e4).unwrap();
        let m = vmf_moments(&params);
        let norm = m.mean.dot(&m.mean).sqrt();
        let tr: f64 = (0..3).map(|i| m.covariance[[i, i]]).sum();
        assert!(norm > 0.999_9 && tr < 1e-4);
    }

    #[test]
    fn sampler_mean_direction_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = VmfParams::new(UnitVector::basis(3, 0), 1e4).unwrap();
        let mut mean = Array1::<f64>::zeros(3);
        let n = 10_000;
        for _ in 0..n {
            mean = mean + vmf_sample(&params, &mut rng).coords();
        }
        mean /= n as f64;
        let dir = UnitVector::from_unnormalized(mean).unwrap();
        let angle = dir.coords()[0].clamp(-1.0, 1.0).acos();
        assert!(angle < 0.05, "angle {angle}");
    }

    #[test]
    fn sampler_uniform_fallback_is_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = VmfParams::new(UnitVector::basis(5, 2), 1e-12).unwrap();
        let mut mean = Array1::<f64>::zeros(5);
        let n = 20_000;
        for _ in 0..n {
            mean = mean + vmf_sample(&params, &mut rng).coords();
        }
        mean /= n as f64;
        assert!(mean.dot(&mean).sqrt() < 0.02);
    }
}
