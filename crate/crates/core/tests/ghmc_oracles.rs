//! Independent checks of the sphere HMC kernel: long-run moments against
//! closed-form resultant lengths, time reversibility, gradient contracts for
//! every target used here, and the integrator's second-order energy scaling.

mod common;

use divlvm::directional::{mean_resultant_length, UnitVector};
use divlvm::ghmc::{
    ghmc_step, ghmc_step_with_convention, ghmc_trajectory, tangent_project, FnTarget, GhmcConfig,
    ProjectionConvention, TargetOnSphere,
};
use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn vmf_target(kappa: f64, p: usize) -> impl TargetOnSphere {
    FnTarget {
        log_prob: move |w: &UnitVector| kappa * w.coords()[0],
        grad_log_prob: move |w: &UnitVector| {
            let mut g = Array1::zeros(w.dim());
            let _ = w;
            g[0] = kappa;
            g
        },
    }
    .into_checked(p)
}

/// Curved target log p(w) = κ μᵀw + wᵀB w with a fixed asymmetric-free B.
fn curved_target(p: usize) -> impl TargetOnSphere {
    let mu: Array1<f64> = Array1::from_iter((0..p).map(|i| ((i + 1) as f64).sin()));
    let b: Vec<f64> = (0..p * p).map(|i| ((i as f64) * 0.7).cos() * 0.5).collect();
    FnTarget {
        log_prob: {
            let mu = mu.clone();
            let b = b.clone();
            move |w: &UnitVector| {
                let wc = w.coords();
                let mut quad = 0.0;
                for i in 0..p {
                    for j in 0..p {
                        // symmetrized quadratic form
                        quad += 0.5 * (b[i * p + j] + b[j * p + i]) * wc[i] * wc[j];
                    }
                }
                2.0 * mu.dot(wc) + quad
            }
        },
        grad_log_prob: move |w: &UnitVector| {
            let wc = w.coords();
            let mut g = &mu * 2.0;
            for i in 0..p {
                for j in 0..p {
                    g[i] += (b[i * p + j] + b[j * p + i]) * wc[j];
                }
            }
            g
        },
    }
    .into_checked(p)
}

/// Wrapper trait helper so each test target is also finite-difference checked
/// once at construction, enforcing the gradient contract for all targets
/// used in this file.
trait IntoChecked: TargetOnSphere + Sized {
    fn into_checked(self, p: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        for _ in 0..5 {
            let raw: Array1<f64> =
                Array1::from_iter((0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let w = UnitVector::from_unnormalized(raw).unwrap();
            assert_gradient_matches(&self, &w);
        }
        self
    }
}

impl<T: TargetOnSphere + Sized> IntoChecked for T {}

/// Central finite differences along great circles: for tangent u,
/// d/dt log p(cos t·w + sin t·u)|_{t=0} must equal uᵀ∇log p(w).
fn assert_gradient_matches<T: TargetOnSphere + ?Sized>(target: &T, w: &UnitVector) {
    let p = w.dim();
    let g = target.grad_log_prob(w);
    let mut rng = ChaCha8Rng::seed_from_u64(405);
    let h = 1e-5;
    for _ in 0..4 {
        let raw: Array1<f64> =
            Array1::from_iter((0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let u = tangent_project(&raw, w);
        let norm = u.dot(&u).sqrt();
        if norm < 1e-8 {
            continue;
        }
        let u = &u / norm;
        let at = |t: f64| {
            let x = w.coords() * t.cos() + &(&u * t.sin());
            target.log_prob(&UnitVector::from_unnormalized(x).unwrap())
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let analytic = u.dot(&g);
        let scale = analytic.abs().max(1.0);
        assert!(
            (fd - analytic).abs() / scale < 1e-5,
            "directional derivative {fd} vs gradient {analytic}"
        );
    }
}

#[test]
fn long_run_matches_vmf_resultant_length() {
    let target = vmf_target(5.0, 3);
    let cfg = GhmcConfig::new(0.1, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut w = UnitVector::basis(3, 1);
    for _ in 0..500 {
        w = ghmc_step(&w, &target, &cfg, &mut rng).unwrap().state;
    }
    let n = 20_000;
    let mut sum = Array1::<f64>::zeros(3);
    let mut accepted = 0usize;
    for _ in 0..n {
        let out = ghmc_step(&w, &target, &cfg, &mut rng).unwrap();
        if out.accepted {
            accepted += 1;
        }
        w = out.state;
        sum = sum + w.coords();
    }
    let mean = sum / n as f64;
    let resultant = mean.dot(&mean).sqrt();
    let truth = mean_resultant_length(3, 5.0);
    assert!(
        (resultant - truth).abs() / truth < 0.01,
        "resultant {resultant} vs {truth}"
    );
    assert!(mean[0] / resultant > 0.999, "mean direction drifted: {mean}");
    assert!(accepted as f64 / n as f64 > 0.95);
}

#[test]
fn trajectory_is_time_reversible() {
    let target = curved_target(4);
    let cfg = GhmcConfig::new(0.05, 40).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..10 {
        let raw: Array1<f64> =
            Array1::from_iter((0..4).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let w0 = UnitVector::from_unnormalized(raw).unwrap();
        let raw_v: Array1<f64> =
            Array1::from_iter((0..4).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let v0 = tangent_project(&raw_v, &w0);
        let (w1, v1) =
            ghmc_trajectory(&w0, &v0, &target, &cfg, ProjectionConvention::CurrentPoint).unwrap();
        let (w2, v2) =
            ghmc_trajectory(&w1, &(-v1), &target, &cfg, ProjectionConvention::CurrentPoint)
                .unwrap();
        let dw = (w2.coords() - w0.coords())
            .iter()
            .fold(0f64, |m, x| m.max(x.abs()));
        let dv = (&v2 + &v0).iter().fold(0f64, |m, x| m.max(x.abs()));
        assert!(dw < 1e-6 && dv < 1e-6, "reversal error dw={dw} dv={dv}");
    }
}

#[test]
fn energy_error_scales_quadratically_at_fixed_trajectory_length() {
    // T = round(L/ε), L = 1: global energy error of the leapfrog is Θ(ε²).
    let target = curved_target(3);
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let raw: Array1<f64> = Array1::from_iter((0..3).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let w0 = UnitVector::from_unnormalized(raw).unwrap();
    let eps_grid: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
    let mut mean_abs = Vec::new();
    for &eps in &eps_grid {
        let t = (1.0 / eps).round() as usize;
        let cfg = GhmcConfig::new(eps, t).unwrap();
        let mut errs = Vec::new();
        let mut mrng = ChaCha8Rng::seed_from_u64(104);
        for _ in 0..20 {
            let raw_v: Array1<f64> =
                Array1::from_iter((0..3).map(|_| mrng.sample::<f64, _>(StandardNormal)));
            let v0 = tangent_project(&raw_v, &w0);
            let (w1, v1) =
                ghmc_trajectory(&w0, &v0, &target, &cfg, ProjectionConvention::CurrentPoint)
                    .unwrap();
            let h0 = target.log_prob(&w0) - 0.5 * v0.dot(&v0);
            let h1 = target.log_prob(&w1) - 0.5 * v1.dot(&v1);
            errs.push((h1 - h0).abs());
        }
        mean_abs.push(errs.iter().sum::<f64>() / errs.len() as f64);
    }
    // least-squares slope of log error against log ε
    let xs: Vec<f64> = eps_grid.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = mean_abs.iter().map(|e| e.ln()).collect();
    let xm = xs.iter().sum::<f64>() / xs.len() as f64;
    let ym = ys.iter().sum::<f64>() / ys.len() as f64;
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - xm) * (y - ym))
        .sum::<f64>()
        / xs.iter().map(|x| (x - xm) * (x - xm)).sum::<f64>();
    assert!(
        (1.8..=2.2).contains(&slope),
        "slope {slope}, errors {mean_abs:?}"
    );
}

#[test]
fn acceptance_approaches_one_as_step_shrinks() {
    let target = curved_target(3);
    let rate = |eps: f64| {
        let cfg = GhmcConfig::new(eps, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let mut w = UnitVector::basis(3, 0);
        let mut acc = 0usize;
        let n = 2000;
        for _ in 0..n {
            let out = ghmc_step(&w, &target, &cfg, &mut rng).unwrap();
            if out.accepted {
                acc += 1;
            }
            w = out.state;
        }
        acc as f64 / n as f64
    };
    let coarse = rate(0.5);
    let fine = rate(0.02);
    assert!(fine > 0.995, "fine-step acceptance {fine}");
    assert!(fine > coarse, "acceptance should improve: {coarse} -> {fine}");
}

#[test]
fn projection_conventions_agree_in_the_small_step_limit() {
    let target = curved_target(3);
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    for &eps in &[0.1, 0.01] {
        let cfg = GhmcConfig::new(eps, 1).unwrap();
        let mut a = ChaCha8Rng::seed_from_u64(107);
        let mut b = a.clone();
        let w = UnitVector::basis(3, 1);
        let out_cur =
            ghmc_step_with_convention(&w, &target, &cfg, ProjectionConvention::CurrentPoint, &mut a)
                .unwrap();
        let out_init =
            ghmc_step_with_convention(&w, &target, &cfg, ProjectionConvention::InitialPoint, &mut b)
                .unwrap();
        let n = out_init.state.coords().dot(out_init.state.coords()).sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        let gap = (out_cur.delta_h - out_init.delta_h).abs();
        // both integrators converge to the same flow as ε → 0
        assert!(gap < 10.0 * eps * eps, "gap {gap} at eps {eps}");
    }
    let _ = &mut rng;
}
