//! Regularized variant of the mean-field fitter: independent component
//! priors, with the pairwise-angle diversity score of the direction means
//! added to the objective instead of a coupling prior.

use ndarray::Array1;
use rand::Rng;

use super::vi::{fit_with_prior, BmemViConfig, BmemViFit};
use super::{BmemPriorSpec, IndependentPrior, LabeledDataset};
use crate::directional::UnitVector;
use crate::error::Result;

/// Fit with independent vMF/gamma priors and angle scores weighted by
/// `lambda_experts` / `lambda_gates` on the respective direction means.
/// With both weights zero this is exactly the unregularized coordinate
/// ascent under the independent prior.
#[allow(clippy::too_many_arguments)]
pub fn bmem_pr_fit<R: Rng + ?Sized>(
    data: &LabeledDataset,
    num_experts: usize,
    expert_prior: &IndependentPrior,
    gate_prior: &IndependentPrior,
    lambda_experts: f64,
    lambda_gates: f64,
    config: &BmemViConfig,
    rng: &mut R,
) -> Result<BmemViFit> {
    let prior = BmemPriorSpec::Independent {
        experts: expert_prior.clone(),
        gates: gate_prior.clone(),
    };
    fit_with_prior(
        data,
        num_experts,
        &prior,
        lambda_experts,
        lambda_gates,
        config,
        rng,
    )
}

/// Ambient gradient of the angle score (mean pairwise nonobtuse angle minus
/// `variance_weight` times its variance) with respect to the k-th unit
/// vector. Pairs at |cos| = 1 contribute a zero subgradient; so does the
/// |cos| kink at exactly orthogonal pairs.
pub(crate) fn angle_regularizer_gradient(
    dirs: &[UnitVector],
    k: usize,
    variance_weight: f64,
) -> Array1<f64> {
    let count = dirs.len();
    let p = dirs[0].dim();
    let ordered_pairs = (count * (count - 1)) as f64;
    let mut theta_sum = 0.0;
    for u in 0..count {
        for v in (u + 1)..count {
            let c = dirs[u].dot(&dirs[v]);
            theta_sum += c.abs().min(1.0).acos();
        }
    }
    let theta_mean = 2.0 * theta_sum / ordered_pairs;
    let mut g = Array1::<f64>::zeros(p);
    for (v, other) in dirs.iter().enumerate() {
        if v == k {
            continue;
        }
        let c = dirs[k].dot(other);
        let sin_sq = 1.0 - c * c;
        if sin_sq < 1e-12 {
            continue;
        }
        let theta = c.abs().min(1.0).acos();
        let weight = (2.0 / ordered_pairs) * (1.0 - 2.0 * variance_weight * (theta - theta_mean));
        let sign = if c == 0.0 { 0.0 } else { c.signum() };
        g.scaled_add(-weight * sign / sin_sq.sqrt(), other.coords());
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bmem::mutual_angular_regularizer;
    use crate::directional::uniform_sphere_sample;
    use crate::ghmc::tangent_project;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn angle_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = 4;
        let count = 4;
        let vw = 0.7;
        let dirs: Vec<UnitVector> = (0..count).map(|_| uniform_sphere_sample(p, &mut rng)).collect();
        for k in 0..count {
            let grad = angle_regularizer_gradient(&dirs, k, vw);
            let tang_grad = tangent_project(&grad, &dirs[k]);
            for _ in 0..2 {
                let t = tangent_project(uniform_sphere_sample(p, &mut rng).coords(), &dirs[k]);
                let tn = t.dot(&t).sqrt();
                if tn < 1e-8 {
                    continue;
                }
                let t = t / tn;
                let h = 1e-6;
                let eval = |sign: f64| {
                    let mut vs: Vec<Array1<f64>> =
                        dirs.iter().map(|d| d.coords().clone()).collect();
                    let raw = dirs[k].coords() + &(&t * (sign * h));
                    let norm = raw.dot(&raw).sqrt();
                    vs[k] = raw / norm;
                    mutual_angular_regularizer(&vs, vw).unwrap()
                };
                let fd = (eval(1.0) - eval(-1.0)) / (2.0 * h);
                let along = tang_grad.dot(&t);
                assert!(
                    (fd - along).abs() < 1e-5 * (1.0 + along.abs()),
                    "component {k}: fd {fd} vs analytic {along}"
                );
            }
        }
    }

    #[test]
    fn aligned_pairs_get_zero_subgradient() {
        let d = UnitVector::basis(3, 0);
        let dirs = vec![d.clone(), d.clone(), UnitVector::basis(3, 1)];
        // first two vectors coincide: their pair contributes nothing
        let g = angle_regularizer_gradient(&dirs, 0, 1.0);
        assert!(g.iter().all(|v| v.is_finite()));
        // the only surviving pair (0, 2) is orthogonal, the |cos| kink:
        // also a zero subgradient, so the whole gradient vanishes
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }
}
