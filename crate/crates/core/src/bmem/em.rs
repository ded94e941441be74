//! Point updates of the component prior's own hyperparameters from fitted
//! posterior summaries: the base direction from the expected first
//! direction, the magnitude shape/rate by maximum likelihood on expected
//! sufficient statistics. The chain concentration is deliberately left
//! untouched (treated as a held-out tuning knob).

use ndarray::Array1;
use statrs::function::gamma::digamma;

use crate::bounds::MabnVariationalFactor;
use crate::directional::{GammaParams, UnitVector};
use crate::prior::{ComponentSet, MabnHyper};
use crate::util::{ksum, trigamma};

/// Solves log α − ψ(α) = Δ by Newton iteration, started from the standard
/// closed-form approximation. Δ must be positive (it is log E[g] − E[log g],
/// nonnegative by Jensen, zero only for degenerate magnitudes).
fn solve_gamma_shape(delta: f64) -> Option<f64> {
    if !(delta.is_finite() && delta > 0.0) {
        return None;
    }
    let mut a = (3.0 - delta + ((delta - 3.0).powi(2) + 24.0 * delta).sqrt()) / (12.0 * delta);
    if !(a.is_finite() && a > 0.0) {
        return None;
    }
    for _ in 0..100 {
        let f = a.ln() - digamma(a) - delta;
        let fp = 1.0 / a - trigamma(a);
        let mut next = a - f / fp;
        if !(next.is_finite() && next > 0.0) {
            next = a / 2.0;
        }
        let done = (next - a).abs() < 1e-12 * (1.0 + a);
        a = next;
        if done {
            break;
        }
    }
    if a.is_finite() && a > 0.0 {
        Some(a)
    } else {
        None
    }
}

/// M-step from expected sufficient statistics: the first component's mean
/// direction vector (not necessarily unit), E[g], and E[log g] pooled over
/// components. Falls back to the current values wherever the statistics are
/// degenerate.
pub fn em_hyper_update_moments(
    first_direction_moment: &Array1<f64>,
    mean_magnitude: f64,
    mean_log_magnitude: f64,
    current: &MabnHyper,
) -> MabnHyper {
    let mut out = current.clone();
    let norm = first_direction_moment.dot(first_direction_moment).sqrt();
    if norm > 1e-12 {
        if let Ok(dir) = UnitVector::from_unnormalized(first_direction_moment.clone()) {
            if dir.dim() == current.dim() {
                out.base_direction = dir;
            }
        }
    }
    if mean_magnitude > 0.0 && mean_magnitude.is_finite() && mean_log_magnitude.is_finite() {
        let delta = mean_magnitude.ln() - mean_log_magnitude;
        if let Some(shape) = solve_gamma_shape(delta) {
            let rate = shape / mean_magnitude;
            if let Ok(gp) = GammaParams::new(shape, rate) {
                out.magnitude = gp;
            }
        }
    }
    out
}

/// Hyper update from posterior component draws (one chain's worth).
pub fn em_hyper_update_from_samples(samples: &[ComponentSet], current: &MabnHyper) -> MabnHyper {
    let usable: Vec<&ComponentSet> = samples.iter().filter(|s| !s.is_empty()).collect();
    if usable.is_empty() {
        return current.clone();
    }
    let p = current.dim();
    let mut first = Array1::<f64>::zeros(p);
    let mut count = 0usize;
    let mut mags = Vec::new();
    for s in &usable {
        if s.dim() == Some(p) {
            first += s.direction(0).coords();
            count += 1;
            mags.extend_from_slice(s.magnitudes());
        }
    }
    if count == 0 || mags.is_empty() {
        return current.clone();
    }
    first /= count as f64;
    let mean = ksum(mags.iter().copied()) / mags.len() as f64;
    let mean_log = ksum(mags.iter().map(|g| g.ln())) / mags.len() as f64;
    em_hyper_update_moments(&first, mean, mean_log, current)
}

/// Hyper update from a variational chain: E[ã₁] = A_p(κ̂)â₁ and the gamma
/// factor moments E[g] = r/s, E[log g] = ψ(r) − log s pooled over components.
pub fn em_hyper_update_from_state(
    factors: &[MabnVariationalFactor],
    current: &MabnHyper,
) -> MabnHyper {
    if factors.is_empty() || factors[0].dim() != current.dim() {
        return current.clone();
    }
    let first = factors[0].mean_vector();
    let k = factors.len() as f64;
    let mean = ksum(factors.iter().map(|f| f.magnitude.shape() / f.magnitude.rate())) / k;
    let mean_log = ksum(
        factors
            .iter()
            .map(|f| digamma(f.magnitude.shape()) - f.magnitude.rate().ln()),
    ) / k;
    em_hyper_update_moments(&first, mean, mean_log, current)
}

/// Expected magnitude log prior per draw under (shape, rate), at fixed
/// sufficient statistics; the M-step objective restricted to the gamma part.
pub fn expected_magnitude_log_prior(
    params: &GammaParams,
    mean_magnitude: f64,
    mean_log_magnitude: f64,
) -> f64 {
    use statrs::function::gamma::ln_gamma;
    let (a, b) = (params.shape(), params.rate());
    a * b.ln() - ln_gamma(a) + (a - 1.0) * mean_log_magnitude - b * mean_magnitude
}
