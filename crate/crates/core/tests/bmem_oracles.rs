mod common;

use divlvm::bmem::synth::{classification_accuracy, linearly_separable, planted_two_expert};
use divlvm::bmem::vi::{bmem_vi_fit, BmemViConfig};
use divlvm::bmem::{
    bmem_elbo, state_to_model, BmemVariationalState, IndependentPrior, LabeledDataset,
};
use divlvm::bounds::BoundAuxParams;
use divlvm::directional::{
    log_vmf_normalizer, uniform_sphere_sample, vmf_log_density, vmf_sample, GammaParams,
    UnitVector, VmfParams,
};
use divlvm::prior::{mabn_log_density, sample_mabn, ComponentSet, MabnHyper, PriorVariant};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

fn hyper(p: usize, kappa: f64, shape: f64, rate: f64) -> MabnHyper {
    MabnHyper::new(
        UnitVector::basis(p, 0),
        kappa,
        GammaParams::new(shape, rate).unwrap(),
    )
    .unwrap()
}

/// The assembled variational objective must lie below a Monte Carlo estimate
/// of the exact evidence lower bound it relaxes (sampling components and
/// assignments from q and averaging log p − log q).
#[test]
fn elbo_is_dominated_by_mc_estimate_of_exact_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let (n, k, p) = (5usize, 2usize, 3usize);
    let feats: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-1.5..1.5)).collect();
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<bool>())).collect();
    let data = LabeledDataset::new(Array2::from_shape_vec((n, p), feats).unwrap(), labels).unwrap();
    let hy = hyper(p, 2.0, 2.0, 1.0);

    let khat = 6.0;
    let mk_factors = |rng: &mut ChaCha8Rng| {
        (0..k)
            .map(|_| {
                divlvm::bounds::MabnVariationalFactor::new(
                    uniform_sphere_sample(p, rng),
                    khat,
                    GammaParams::new(2.0 + rng.gen::<f64>(), 1.5).unwrap(),
                )
                .unwrap()
            })
            .collect::<Vec<_>>()
    };
    let expert_factors = mk_factors(&mut rng);
    let gate_factors = mk_factors(&mut rng);
    let mut assignment_probs = Array2::zeros((n, k));
    for i in 0..n {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen_range(0.2..1.0)).collect();
        let s: f64 = raw.iter().sum();
        for j in 0..k {
            assignment_probs[(i, j)] = raw[j] / s;
        }
    }
    let state = BmemVariationalState {
        expert_factors: expert_factors.clone(),
        gate_factors: gate_factors.clone(),
        kappa_hat: khat,
        assignment_probs: assignment_probs.clone(),
        aux_gate_offset: vec![0.4; n],
        aux_gate_curv: Array2::from_elem((n, k), 1.3),
        aux_expert: Array2::from_elem((n, k), 0.9),
        aux_prior_experts: vec![BoundAuxParams { gamma: 0.2, xi: 1.1 }; k - 1],
        aux_prior_gates: vec![BoundAuxParams { gamma: 0.2, xi: 1.1 }; k - 1],
    };
    // the assembled bound drops the root direction normalizer of each chain
    let objective = bmem_elbo(&state, &data, &hy, &hy).unwrap()
        + 2.0 * log_vmf_normalizer(p, hy.concentration);

    let draws = 30_000;
    let mut vals = Vec::with_capacity(draws);
    for _ in 0..draws {
        let mut log_q = 0.0;
        let mut draw_chain = |factors: &Vec<divlvm::bounds::MabnVariationalFactor>,
                              rng: &mut ChaCha8Rng,
                              log_q: &mut f64| {
            let mut dirs = Vec::with_capacity(k);
            let mut mags = Vec::with_capacity(k);
            for f in factors {
                let vp = VmfParams::new(f.direction_mean.clone(), khat).unwrap();
                let d = vmf_sample(&vp, rng);
                *log_q += vmf_log_density(&d, &vp).unwrap();
                let g = Gamma::new(f.magnitude.shape(), 1.0 / f.magnitude.rate())
                    .unwrap()
                    .sample(rng);
                *log_q += f.magnitude.log_density(g);
                dirs.push(d);
                mags.push(g);
            }
            ComponentSet::new(dirs, mags).unwrap()
        };
        let experts = draw_chain(&expert_factors, &mut rng, &mut log_q);
        let gates = draw_chain(&gate_factors, &mut rng, &mut log_q);
        let mut log_p = mabn_log_density(&experts, &hy, PriorVariant::TypeII).unwrap()
            + mabn_log_density(&gates, &hy, PriorVariant::TypeII).unwrap();
        for i in 0..n {
            // z_i from the categorical factor
            let u: f64 = rng.gen();
            let mut z = k - 1;
            let mut cum = 0.0;
            for j in 0..k {
                cum += assignment_probs[(i, j)];
                if u < cum {
                    z = j;
                    break;
                }
            }
            log_q += assignment_probs[(i, z)].ln();
            let x = data.features().row(i);
            let gate_logits: Vec<f64> = (0..k).map(|j| gates.scaled(j).dot(&x)).collect();
            let lse = divlvm::util::log_sum_exp(&gate_logits);
            log_p += gate_logits[z] - lse;
            let a = data.label_sign(i) * experts.scaled(z).dot(&x);
            log_p += -divlvm::util::log1p_exp(-a);
        }
        vals.push(log_p - log_q);
    }
    let mean = common::mean(&vals);
    let se = (common::sample_variance(&vals) / draws as f64).sqrt();
    assert!(
        objective <= mean + 3.0 * se,
        "objective {objective} exceeds MC bound {mean} (se {se})"
    );
}

/// With one expert on separable data the fit is a regularized logistic
/// regression and must classify nearly everything.
#[test]
fn single_expert_classifies_separable_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let (data, _) = linearly_separable(200, 3, 0.4, &mut rng).unwrap();
    let hy = hyper(3, 1.0, 2.0, 0.5);
    let cfg = BmemViConfig {
        max_sweeps: 120,
        ..BmemViConfig::default()
    };
    let fit = bmem_vi_fit(&data, 1, &hy, &hy, &cfg, &mut rng).unwrap();
    let model = state_to_model(&fit.state).unwrap();
    let acc = classification_accuracy(&model, &data).unwrap();
    assert!(acc >= 0.99, "training accuracy {acc}");
}

/// On the planted two-expert problem the fitted assignments must agree with
/// the planted gate regions for at least 90% of examples, up to permutation.
#[test]
fn planted_assignments_recovered_up_to_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let planted = planted_two_expert(500, 200, &mut rng).unwrap();
    let hy = hyper(2, 1.0, 2.0, 0.5);
    let cfg = BmemViConfig {
        max_sweeps: 200,
        ..BmemViConfig::default()
    };
    let fit = bmem_vi_fit(&planted.train, 2, &hy, &hy, &cfg, &mut rng).unwrap();
    let n = planted.train.len();
    let mut direct = 0usize;
    let mut swapped = 0usize;
    for i in 0..n {
        let guess = usize::from(fit.state.assignment_probs[(i, 1)] > 0.5);
        if guess == planted.train_assignments[i] {
            direct += 1;
        } else {
            swapped += 1;
        }
    }
    let agree = direct.max(swapped) as f64 / n as f64;
    assert!(agree >= 0.90, "assignment agreement {agree}");
    // and the plug-in predictor should solve the task
    let model = state_to_model(&fit.state).unwrap();
    let acc = classification_accuracy(&model, &planted.test).unwrap();
    assert!(acc >= 0.90, "test accuracy {acc}");
}

/// Objective traces stay nondecreasing on randomly generated problems.
#[test]
fn traces_monotone_on_random_problems() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(70 + seed);
        let n = 40;
        let p = 3;
        let feats: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<bool>())).collect();
        let data =
            LabeledDataset::new(Array2::from_shape_vec((n, p), feats).unwrap(), labels).unwrap();
        let hy = hyper(p, 2.0, 2.0, 1.0);
        let cfg = BmemViConfig {
            max_sweeps: 40,
            ..BmemViConfig::default()
        };
        let fit = bmem_vi_fit(&data, 3, &hy, &hy, &cfg, &mut rng).unwrap();
        for w in fit.elbo_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-8, "seed {seed}: {} -> {}", w[0], w[1]);
        }
    }
}

/// Flat-likelihood sampling must reproduce the prior: pooled magnitudes
/// against the gamma law (one-sample KS) and the first-pair angle against
/// direct prior draws (two-sample KS).
#[test]
fn mh_prior_recovery_matches_direct_sampling() {
    use divlvm::bmem::mh::{bmem_mh_prior_samples, BmemMhConfig};
    let p = 3;
    let k = 2;
    let hy = hyper(p, 2.0, 2.0, 1.0);
    let cfg = BmemMhConfig {
        burn_in: 2000,
        thinning: 20,
        num_samples: 2500,
        proposal_concentration: 30.0,
        magnitude_step: 0.8,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let fit = bmem_mh_prior_samples(k, &hy, &hy, &cfg, &mut rng).unwrap();
    assert!(fit.warnings.is_empty(), "warnings: {:?}", fit.warnings);

    // magnitudes of the first expert against the Gamma(2, 1) law
    let mags: Vec<f64> = fit.samples.iter().map(|m| m.experts().magnitude(0)).collect();
    let gamma_cdf = |x: f64| {
        if x <= 0.0 {
            0.0
        } else {
            // shape 2, rate 1: P(G ≤ x) = 1 − e^{−x}(1 + x)
            1.0 - (-x).exp() * (1.0 + x)
        }
    };
    let (stat, pval) = common::ks_one_sample(&mags, gamma_cdf);
    assert!(pval > 0.01, "magnitude KS stat {stat}, p {pval}");

    // angle between the two chain directions vs direct prior draws
    let mh_angles: Vec<f64> = fit
        .samples
        .iter()
        .map(|m| {
            divlvm::directional::nonobtuse_angle(
                m.experts().direction(0).coords(),
                m.experts().direction(1).coords(),
            )
            .unwrap()
        })
        .collect();
    let mut rng2 = ChaCha8Rng::seed_from_u64(64);
    let direct_angles: Vec<f64> = (0..4000)
        .map(|_| {
            let s = sample_mabn(k, &hy, &mut rng2);
            divlvm::directional::nonobtuse_angle(
                s.direction(0).coords(),
                s.direction(1).coords(),
            )
            .unwrap()
        })
        .collect();
    let (stat2, pval2) = common::ks_two_sample(&mh_angles, &direct_angles);
    assert!(pval2 > 0.01, "angle KS stat {stat2}, p {pval2}");
}

/// The regularized fit at λ=0 is exactly the unregularized independent-prior
/// fit, and a large λ must spread the expert directions further apart.
#[test]
fn regularizer_paths_behave() {
    use divlvm::bmem::pairwise_angle_stats;
    use divlvm::bmem::pr::bmem_pr_fit;
    let mut rng = ChaCha8Rng::seed_from_u64(65);
    // weak label signal and a concentrated prior pulling all directions
    // toward one pole, so only the regularizer fights for spread
    let p = 4;
    let n = 100;
    let feats: Vec<f64> = (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen::<bool>())).collect();
    let data = LabeledDataset::new(Array2::from_shape_vec((n, p), feats).unwrap(), labels).unwrap();
    let prior = IndependentPrior {
        concentration: 30.0,
        base_direction: Some(UnitVector::basis(p, 0)),
        magnitude: GammaParams::new(2.0, 0.5).unwrap(),
    };
    let cfg = BmemViConfig {
        max_sweeps: 60,
        update_kappa_hat: false,
        ..BmemViConfig::default()
    };
    let run = |lam: f64, seed: u64| {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        bmem_pr_fit(&data, 4, &prior, &prior, lam, lam, &cfg, &mut r).unwrap()
    };
    let base_a = run(0.0, 99);
    let base_b = run(0.0, 99);
    assert_eq!(base_a.elbo_trace, base_b.elbo_trace);

    let strong = run(400.0, 99);
    let mean_angle = |fit: &divlvm::bmem::vi::BmemViFit| {
        let dirs: Vec<Array1<f64>> = fit
            .state
            .expert_factors
            .iter()
            .map(|f| f.direction_mean.coords().clone())
            .collect();
        pairwise_angle_stats(&dirs).unwrap().0
    };
    let (a0, a1) = (mean_angle(&base_a), mean_angle(&strong));
    assert!(
        a1 > a0 + 1e-3,
        "regularized mean angle {a1} not larger than baseline {a0}"
    );
    for w in strong.elbo_trace.windows(2) {
        assert!(w[1] >= w[0] - 1e-8);
    }
}
