//! Joint-distribution testing support: a forward sampler of the full
//! generative model and matched statistic streams. The forward arm draws
//! (state, data) from scratch each time; the conditional arm alternates
//! Gibbs sweeps on the state with regeneration of the data given the state.
//! If every conditional update is correct, the two streams are draws from
//! the same joint, so any statistic of the state must agree in distribution.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::UnlabeledDataset;
use crate::error::Result;
use crate::prior::{ima_next_component, ComponentSet, MabnHyper};

use super::sweep::IlfmSampler;
use super::{IlfmConfig, IlfmState};

/// Sticks below this are numerically extinct in forward simulation; with
/// the example counts used in tests their activation probability is far
/// below floating point resolution.
const FORWARD_STICK_FLOOR: f64 = 1e-12;
const FORWARD_STICK_CAP: usize = 10_000;

/// One exact draw of (state, data) from the generative joint: geometric
/// stick-breaking of the inclusion probabilities, features from the
/// sequential direction chain, Bernoulli allocations, Gaussian data, and
/// the slice uniform on (0, μ*]. The returned state represents every
/// feature above the slice, exactly the set a Gibbs sweep would maintain.
pub fn ilfm_forward_sample<R: Rng + ?Sized>(
    num_examples: usize,
    dim: usize,
    noise_variance: f64,
    ibp_mass: f64,
    hyper: &MabnHyper,
    rng: &mut R,
) -> Result<(IlfmState, UnlabeledDataset)> {
    let mut sticks = Vec::new();
    let mut mu = 1.0_f64;
    while sticks.len() < FORWARD_STICK_CAP {
        mu *= rng.gen::<f64>().powf(1.0 / ibp_mass);
        if mu < FORWARD_STICK_FLOOR {
            break;
        }
        sticks.push(mu);
    }
    let k_all = sticks.len();

    let mut allocations: Array2<u8> = Array2::zeros((num_examples, k_all));
    for k in 0..k_all {
        for n in 0..num_examples {
            allocations[(n, k)] = u8::from(rng.gen::<f64>() < sticks[k]);
        }
    }

    let mu_star = (0..k_all)
        .filter(|&k| allocations.column(k).iter().any(|&z| z == 1))
        .map(|k| sticks[k])
        .fold(1.0_f64, f64::min);
    let slice = mu_star * (1.0 - rng.gen::<f64>());

    let mut keep = 0;
    for k in 0..k_all {
        let active = allocations.column(k).iter().any(|&z| z == 1);
        if sticks[k] > slice || active {
            keep = k + 1;
        }
    }

    let mut features = ComponentSet::empty();
    for _ in 0..keep {
        let (direction, magnitude) = ima_next_component(&features, hyper, rng);
        features.push(direction, magnitude)?;
    }
    sticks.truncate(keep);
    let allocations = allocations.slice(ndarray::s![.., ..keep]).to_owned();

    let sigma = noise_variance.sqrt();
    let mut x = Array2::zeros((num_examples, dim));
    for n in 0..num_examples {
        for k in 0..keep {
            if allocations[(n, k)] == 1 {
                let w = features.scaled(k);
                for d in 0..dim {
                    x[(n, d)] += w[d];
                }
            }
        }
        for d in 0..dim {
            x[(n, d)] += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let state = IlfmState::new(features, allocations, sticks, slice, noise_variance, ibp_mass)?;
    Ok((state, UnlabeledDataset::new(x)?))
}

/// Fresh data given the state: x_n ~ N(Σ_k z_nk w_k, σ² I).
pub fn regenerate_data<R: Rng + ?Sized>(
    state: &IlfmState,
    dim: usize,
    rng: &mut R,
) -> UnlabeledDataset {
    let sigma = state.noise_variance.sqrt();
    let n = state.num_examples();
    let mut x = Array2::zeros((n, dim));
    for row in 0..n {
        for k in 0..state.num_features() {
            if state.allocations[(row, k)] == 1 {
                let w = state.features.scaled(k);
                for d in 0..dim {
                    x[(row, d)] += w[d];
                }
            }
        }
        for d in 0..dim {
            x[(row, d)] += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    UnlabeledDataset::new(x).expect("regenerated data is finite")
}

/// Representation-independent summaries: active feature count, total
/// allocation count, mean active stick, mean pairwise angle between active
/// directions. Only active features enter, so the two arms are comparable
/// no matter how many trailing inactive features each happens to store.
pub fn geweke_statistics(state: &IlfmState) -> [f64; 4] {
    let active: Vec<usize> = (0..state.num_features())
        .filter(|&k| state.is_active(k))
        .collect();
    let total_alloc: usize = active.iter().map(|&k| state.allocation_count(k)).sum();
    let mean_stick = if active.is_empty() {
        0.0
    } else {
        active.iter().map(|&k| state.stick_weights[k]).sum::<f64>() / active.len() as f64
    };
    [
        active.len() as f64,
        total_alloc as f64,
        mean_stick,
        state.mean_active_pairwise_angle(),
    ]
}

/// Independent forward draws of the statistics.
pub fn geweke_forward_stream<R: Rng + ?Sized>(
    num_examples: usize,
    dim: usize,
    noise_variance: f64,
    ibp_mass: f64,
    hyper: &MabnHyper,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<[f64; 4]>> {
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let (state, _) =
            ilfm_forward_sample(num_examples, dim, noise_variance, ibp_mass, hyper, rng)?;
        out.push(geweke_statistics(&state));
    }
    Ok(out)
}

/// Successive-conditional draws: starting from one forward draw (hence
/// already stationary), alternate a Gibbs sweep on the state with data
/// regeneration, recording statistics every `thin` rounds.
pub fn geweke_gibbs_stream<R: Rng + ?Sized>(
    num_examples: usize,
    dim: usize,
    noise_variance: f64,
    ibp_mass: f64,
    config: &IlfmConfig,
    samples: usize,
    thin: usize,
    rng: &mut R,
) -> Result<Vec<[f64; 4]>> {
    let (mut state, mut data) = ilfm_forward_sample(
        num_examples,
        dim,
        noise_variance,
        ibp_mass,
        &config.hyper,
        rng,
    )?;
    let mut sampler = IlfmSampler::new(config.clone(), &state)?;
    let mut out = Vec::with_capacity(samples);
    while out.len() < samples {
        for _ in 0..thin.max(1) {
            sampler.sweep(&mut state, &data, rng)?;
            data = regenerate_data(&state, dim, rng);
        }
        out.push(geweke_statistics(&state));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_hyper() -> MabnHyper {
        IlfmConfig::defaults(3).unwrap().hyper
    }

    #[test]
    fn forward_draws_are_valid_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let hyper = test_hyper();
        for _ in 0..200 {
            let (state, data) = ilfm_forward_sample(4, 3, 0.25, 2.0, &hyper, &mut rng).unwrap();
            state.validate().unwrap();
            assert_eq!(data.len(), 4);
            assert_eq!(data.dim(), 3);
            if let Some(a) = state.last_active() {
                assert!(a < state.num_features());
                assert!(state.stick_weights[a] >= state.slice);
            }
        }
    }

    #[test]
    fn noiseless_regeneration_reproduces_feature_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let hyper = test_hyper();
        let (mut state, _) = ilfm_forward_sample(5, 3, 0.25, 2.0, &hyper, &mut rng).unwrap();
        state.noise_variance = 1e-30;
        let data = regenerate_data(&state, 3, &mut rng);
        let res = state.residuals(&data).unwrap();
        for v in res.iter() {
            assert!(v.abs() < 1e-10);
        }
    }

    #[test]
    fn statistics_count_only_active_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let hyper = test_hyper();
        let (state, _) = ilfm_forward_sample(6, 3, 0.25, 2.0, &hyper, &mut rng).unwrap();
        let stats = geweke_statistics(&state);
        assert_eq!(stats[0] as usize, state.num_active());
        let total: usize = (0..state.num_features())
            .map(|k| state.allocation_count(k))
            .sum();
        assert_eq!(stats[1] as usize, total);
        if stats[0] == 0.0 {
            assert_eq!(stats[2], 0.0);
        } else {
            assert!(stats[2] > 0.0 && stats[2] <= 1.0);
        }
    }

    #[test]
    fn stick_means_match_the_geometric_law() {
        // first stick is U^{1/α}: mean α/(α+1). With 25 examples the first
        // feature is active (hence represented) except with negligible
        // probability, so truncation does not bias the average.
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let hyper = test_hyper();
        let alpha = 2.0;
        let mut sum = 0.0;
        let trials = 4000;
        for _ in 0..trials {
            let (state, _) = ilfm_forward_sample(25, 3, 0.25, alpha, &hyper, &mut rng).unwrap();
            sum += state.stick_weights.first().copied().unwrap_or(0.0);
        }
        let mean = sum / trials as f64;
        let expect = alpha / (alpha + 1.0);
        assert!((mean - expect).abs() < 0.02, "first stick mean {mean} vs {expect}");
    }
}
