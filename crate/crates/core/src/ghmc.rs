//! Hamiltonian Monte Carlo on the unit sphere via geodesic flow: tangent
//! momentum, leapfrog with great-circle rotations, Metropolis correction.
//!
//! The kernel is stateless. Each call draws a fresh Gaussian momentum,
//! projects it into the tangent space, integrates the trajectory, and
//! accepts or rejects on the Hamiltonian difference.

use ndarray::Array1;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::directional::UnitVector;
use crate::error::{Error, Result};

/// Integrator settings: step size ε and leapfrog step count T.
#[derive(Debug, Clone, Copy)]
pub struct GhmcConfig {
    step_size: f64,
    leapfrog_steps: usize,
}

impl GhmcConfig {
    pub fn new(step_size: f64, leapfrog_steps: usize) -> Result<Self> {
        if !(step_size.is_finite() && step_size > 0.0) {
            return Err(Error::invalid("step size must be positive"));
        }
        if leapfrog_steps == 0 {
            return Err(Error::invalid("need at least one leapfrog step"));
        }
        Ok(GhmcConfig {
            step_size,
            leapfrog_steps,
        })
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn leapfrog_steps(&self) -> usize {
        self.leapfrog_steps
    }
}

/// Unnormalized target on the sphere: a log density and its ambient-space
/// gradient (the gradient of the same expression in R^p, before any tangent
/// projection; the kernel projects).
pub trait TargetOnSphere {
    fn log_prob(&self, w: &UnitVector) -> f64;
    fn grad_log_prob(&self, w: &UnitVector) -> Array1<f64>;
}

/// Adapter packing two closures into a target.
pub struct FnTarget<F, G> {
    pub log_prob: F,
    pub grad_log_prob: G,
}

impl<F, G> TargetOnSphere for FnTarget<F, G>
where
    F: Fn(&UnitVector) -> f64,
    G: Fn(&UnitVector) -> Array1<f64>,
{
    fn log_prob(&self, w: &UnitVector) -> f64 {
        (self.log_prob)(w)
    }

    fn grad_log_prob(&self, w: &UnitVector) -> Array1<f64> {
        (self.grad_log_prob)(w)
    }
}

/// Which point the momentum projections inside the trajectory use. The
/// trajectory stays on the sphere either way, but only projection at the
/// current point keeps the momentum tangent as the point moves; projecting
/// at the initial point is kept selectable for comparison because the
/// original algorithm listing can be read that way.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionConvention {
    CurrentPoint,
    InitialPoint,
}

/// Result of one transition: the next state (the proposal if accepted, the
/// start point otherwise) and the Hamiltonian difference h* − h.
#[derive(Debug, Clone)]
pub struct GhmcOutcome {
    pub state: UnitVector,
    pub accepted: bool,
    pub delta_h: f64,
}

/// v − w(wᵀv): removes the radial component of v at w.
pub fn tangent_project(v: &Array1<f64>, w: &UnitVector) -> Array1<f64> {
    let wc = w.coords();
    let radial = wc.dot(v);
    v - &(wc * radial)
}

fn ensure_finite_grad(g: &Array1<f64>, step: usize) -> Result<()> {
    if g.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "gradient of target log density at leapfrog step {step}"
        )))
    }
}

/// Deterministic leapfrog trajectory from (w, v): T iterations of gradient
/// half-step, projection, geodesic rotation, gradient half-step, projection.
/// The momentum must already be tangent at entry (the step kernel does this;
/// direct callers are responsible for it). Exposed so that reversibility and
/// integrator-order diagnostics can drive the integrator with a chosen
/// momentum.
pub fn ghmc_trajectory<T: TargetOnSphere + ?Sized>(
    w: &UnitVector,
    v: &Array1<f64>,
    target: &T,
    config: &GhmcConfig,
    convention: ProjectionConvention,
) -> Result<(UnitVector, Array1<f64>)> {
    let eps = config.step_size;
    let w0 = w.clone();
    let mut w = w.clone();
    let mut v = v.clone();
    for step in 0..config.leapfrog_steps {
        let g = target.grad_log_prob(&w);
        ensure_finite_grad(&g, step)?;
        v = v + &(g * (0.5 * eps));
        v = match convention {
            ProjectionConvention::CurrentPoint => tangent_project(&v, &w),
            ProjectionConvention::InitialPoint => tangent_project(&v, &w0),
        };
        // Great-circle rotation by angle ε‖v‖, updating point and momentum
        // from the same pre-rotation pair; ‖v‖ = 0 means no movement.
        let speed = v.dot(&v).sqrt();
        if speed > 0.0 {
            let theta = eps * speed;
            let (sin_t, cos_t) = theta.sin_cos();
            let new_w = w.coords() * cos_t + &(&v / speed * sin_t);
            let new_v = &v * cos_t - &(w.coords() * (speed * sin_t));
            w = UnitVector::from_unnormalized(new_w)?;
            v = new_v;
        }
        let g = target.grad_log_prob(&w);
        ensure_finite_grad(&g, step)?;
        v = v + &(g * (0.5 * eps));
        v = match convention {
            ProjectionConvention::CurrentPoint => tangent_project(&v, &w),
            ProjectionConvention::InitialPoint => tangent_project(&v, &w0),
        };
    }
    Ok((w, v))
}

/// One Metropolis-corrected transition with projections at the current point.
pub fn ghmc_step<T: TargetOnSphere + ?Sized, R: Rng + ?Sized>(
    w: &UnitVector,
    target: &T,
    config: &GhmcConfig,
    rng: &mut R,
) -> Result<GhmcOutcome> {
    ghmc_step_with_convention(w, target, config, ProjectionConvention::CurrentPoint, rng)
}

pub fn ghmc_step_with_convention<T: TargetOnSphere + ?Sized, R: Rng + ?Sized>(
    w: &UnitVector,
    target: &T,
    config: &GhmcConfig,
    convention: ProjectionConvention,
    rng: &mut R,
) -> Result<GhmcOutcome> {
    let p = w.dim();
    let raw: Array1<f64> = Array1::from_iter((0..p).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let v0 = tangent_project(&raw, w);
    let lp0 = target.log_prob(w);
    if !lp0.is_finite() {
        return Err(Error::NonFinite(
            "target log density at the initial state".into(),
        ));
    }
    let h0 = lp0 - 0.5 * v0.dot(&v0);
    let (w_star, v_star) = ghmc_trajectory(w, &v0, target, config, convention)?;
    let lp1 = target.log_prob(&w_star);
    if !lp1.is_finite() {
        return Err(Error::NonFinite(
            "target log density at the proposed state".into(),
        ));
    }
    let h1 = lp1 - 0.5 * v_star.dot(&v_star);
    let delta_h = h1 - h0;
    let accepted = delta_h >= 0.0 || rng.gen::<f64>() < delta_h.exp();
    Ok(GhmcOutcome {
        state: if accepted { w_star } else { w.clone() },
        accepted,
        delta_h,
    })
}
