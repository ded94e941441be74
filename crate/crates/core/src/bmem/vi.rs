//! Coordinate-ascent fitter for the gated mixture: closed-form updates for
//! the auxiliary bound parameters and the assignments, guarded gradient
//! steps on the sphere for direction means, log-space line search for the
//! magnitude factors, and a one-dimensional search for the shared direction
//! concentration. Every non-closed-form step keeps a move only if the full
//! objective improves, so the trace is nondecreasing by construction.

use ndarray::{Array1, Array2};
use rand::Rng;

use super::pr::angle_regularizer_gradient;
use super::{
    full_objective_cached, refresh_prior_aux, squared_row_norms, BmemPriorSpec,
    BmemVariationalState, ChainCache, IndependentPrior, LabeledDataset,
};
use crate::bounds::{logistic_curvature, BoundAuxParams, MabnVariationalFactor};
use crate::directional::{
    sphere_area, uniform_sphere_sample, vmf_sample, GammaParams, UnitVector, VmfParams,
};
use crate::error::{Error, Result};
use crate::prior::{sample_mabn, MabnHyper};
use crate::util::{log1p_exp, log_sum_exp};

#[derive(Debug, Clone)]
pub struct BmemViConfig {
    pub max_sweeps: usize,
    /// Relative objective change under which a sweep counts as converged;
    /// three consecutive converged sweeps stop the fit.
    pub tol: f64,
    /// Search over the shared direction concentration each sweep.
    pub update_kappa_hat: bool,
    pub init_kappa_hat: f64,
    /// Initial arc length of the direction line search.
    pub direction_step: f64,
    /// Initial log-space step of the magnitude line search.
    pub magnitude_step: f64,
    /// Variance weight of the angle score in regularized fits.
    pub variance_weight: f64,
}

impl Default for BmemViConfig {
    fn default() -> Self {
        BmemViConfig {
            max_sweeps: 500,
            tol: 1e-6,
            update_kappa_hat: true,
            init_kappa_hat: 10.0,
            direction_step: 0.5,
            magnitude_step: 0.25,
            variance_weight: 1.0,
        }
    }
}

impl BmemViConfig {
    fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 {
            return Err(Error::invalid("max_sweeps must be at least 1"));
        }
        for (name, v) in [
            ("tol", self.tol),
            ("init_kappa_hat", self.init_kappa_hat),
            ("direction_step", self.direction_step),
            ("magnitude_step", self.magnitude_step),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !(self.variance_weight.is_finite() && self.variance_weight >= 0.0) {
            return Err(Error::invalid("variance_weight must be nonnegative"));
        }
        Ok(())
    }
}

/// Converged (or sweep-capped) state together with the per-sweep objective
/// trace; the first entry is the objective at initialization.
#[derive(Debug, Clone)]
pub struct BmemViFit {
    pub state: BmemVariationalState,
    pub elbo_trace: Vec<f64>,
}

/// Mean-field fit under the sequential diversity prior on both chains.
pub fn bmem_vi_fit<R: Rng + ?Sized>(
    data: &LabeledDataset,
    num_experts: usize,
    expert_hyper: &MabnHyper,
    gate_hyper: &MabnHyper,
    config: &BmemViConfig,
    rng: &mut R,
) -> Result<BmemViFit> {
    let prior = BmemPriorSpec::MutualAngular {
        experts: expert_hyper.clone(),
        gates: gate_hyper.clone(),
    };
    fit_with_prior(data, num_experts, &prior, 0.0, 0.0, config, rng)
}

#[derive(Clone, Copy)]
pub(crate) enum Chain {
    Expert,
    Gate,
}

pub(crate) fn fit_with_prior<R: Rng + ?Sized>(
    data: &LabeledDataset,
    num_experts: usize,
    prior: &BmemPriorSpec,
    lambda_experts: f64,
    lambda_gates: f64,
    config: &BmemViConfig,
    rng: &mut R,
) -> Result<BmemViFit> {
    if data.is_empty() {
        return Err(Error::invalid("cannot fit an empty dataset"));
    }
    if num_experts == 0 {
        return Err(Error::invalid("need at least one expert"));
    }
    for lam in [lambda_experts, lambda_gates] {
        if !(lam.is_finite() && lam >= 0.0) {
            return Err(Error::invalid("regularization weights must be nonnegative"));
        }
    }
    config.validate()?;
    prior.validate(data.dim())?;

    let state = init_state(data, num_experts, prior, config, rng)?;
    let ec = ChainCache::build(&state.expert_factors, data);
    let gc = ChainCache::build(&state.gate_factors, data);
    let x_sq = squared_row_norms(data);
    let mut fitter = Fitter {
        data,
        prior,
        lambda_experts,
        lambda_gates,
        cfg: config,
        state,
        ec,
        gc,
        x_sq,
    };

    let mut trace = vec![fitter.objective()?];
    let mut flat = 0usize;
    for sweep in 0..config.max_sweeps {
        let obj = fitter.sweep()?;
        if !obj.is_finite() {
            return Err(Error::NonFinite(fitter.dump(sweep)));
        }
        let prev = *trace.last().unwrap();
        trace.push(obj);
        if (obj - prev).abs() <= config.tol * (1.0 + prev.abs()) {
            flat += 1;
            if flat >= 3 {
                break;
            }
        } else {
            flat = 0;
        }
    }
    Ok(BmemViFit {
        state: fitter.state,
        elbo_trace: trace,
    })
}

fn draw_iid_directions<R: Rng + ?Sized>(
    prior: &IndependentPrior,
    dim: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<UnitVector>> {
    let mut out = Vec::with_capacity(count);
    if prior.concentration > 0.0 {
        let base = prior
            .base_direction
            .clone()
            .ok_or_else(|| Error::invalid("concentrated prior needs a base direction"))?;
        let params = VmfParams::new(base, prior.concentration)?;
        for _ in 0..count {
            out.push(vmf_sample(&params, rng));
        }
    } else {
        for _ in 0..count {
            out.push(uniform_sphere_sample(dim, rng));
        }
    }
    Ok(out)
}

/// Diverse start: direction means drawn from the configured prior itself,
/// gamma factors at the prior values, uniform assignments.
fn init_state<R: Rng + ?Sized>(
    data: &LabeledDataset,
    num_experts: usize,
    prior: &BmemPriorSpec,
    config: &BmemViConfig,
    rng: &mut R,
) -> Result<BmemVariationalState> {
    let p = data.dim();
    let n = data.len();
    let k = num_experts;
    let (expert_dirs, expert_mag, gate_dirs, gate_mag) = match prior {
        BmemPriorSpec::MutualAngular { experts, gates } => {
            let se = sample_mabn(k, experts, rng);
            let sg = sample_mabn(k, gates, rng);
            (
                se.directions().to_vec(),
                experts.magnitude.clone(),
                sg.directions().to_vec(),
                gates.magnitude.clone(),
            )
        }
        BmemPriorSpec::Independent { experts, gates } => (
            draw_iid_directions(experts, p, k, rng)?,
            experts.magnitude.clone(),
            draw_iid_directions(gates, p, k, rng)?,
            gates.magnitude.clone(),
        ),
    };
    let build = |dirs: Vec<UnitVector>, mag: &GammaParams| -> Result<Vec<MabnVariationalFactor>> {
        dirs.into_iter()
            .map(|d| MabnVariationalFactor::new(d, config.init_kappa_hat, mag.clone()))
            .collect()
    };
    Ok(BmemVariationalState {
        expert_factors: build(expert_dirs, &expert_mag)?,
        gate_factors: build(gate_dirs, &gate_mag)?,
        kappa_hat: config.init_kappa_hat,
        assignment_probs: Array2::from_elem((n, k), 1.0 / k as f64),
        aux_gate_offset: vec![0.0; n],
        aux_gate_curv: Array2::ones((n, k)),
        aux_expert: Array2::ones((n, k)),
        aux_prior_experts: vec![BoundAuxParams::init(); k - 1],
        aux_prior_gates: vec![BoundAuxParams::init(); k - 1],
    })
}

struct Fitter<'a> {
    data: &'a LabeledDataset,
    prior: &'a BmemPriorSpec,
    lambda_experts: f64,
    lambda_gates: f64,
    cfg: &'a BmemViConfig,
    state: BmemVariationalState,
    ec: ChainCache,
    gc: ChainCache,
    x_sq: Array1<f64>,
}

impl Fitter<'_> {
    fn objective(&self) -> Result<f64> {
        full_objective_cached(
            &self.state,
            self.data,
            self.prior,
            self.lambda_experts,
            self.lambda_gates,
            self.cfg.variance_weight,
            &self.ec,
            &self.gc,
            &self.x_sq,
        )
    }

    fn sweep(&mut self) -> Result<f64> {
        self.update_aux_gate();
        self.update_aux_expert();
        self.update_assignments();
        self.update_directions(Chain::Expert)?;
        self.update_directions(Chain::Gate)?;
        self.update_magnitudes(Chain::Expert)?;
        self.update_magnitudes(Chain::Gate)?;
        self.update_prior_aux()?;
        self.update_concentration()?;
        self.objective()
    }

    fn chain_parts(&mut self, chain: Chain) -> (&mut Vec<MabnVariationalFactor>, &mut ChainCache) {
        match chain {
            Chain::Expert => (&mut self.state.expert_factors, &mut self.ec),
            Chain::Gate => (&mut self.state.gate_factors, &mut self.gc),
        }
    }

    fn factors(&self, chain: Chain) -> &[MabnVariationalFactor] {
        match chain {
            Chain::Expert => &self.state.expert_factors,
            Chain::Gate => &self.state.gate_factors,
        }
    }

    fn cache(&self, chain: Chain) -> &ChainCache {
        match chain {
            Chain::Expert => &self.ec,
            Chain::Gate => &self.gc,
        }
    }

    /// Tangency points of the per-class logistic bounds: e² = E[(βᵀx)²].
    fn update_aux_expert(&mut self) {
        let (n, k) = self.state.aux_expert.dim();
        for i in 0..n {
            for j in 0..k {
                let s2 = self.ec.second_moment(i, j, self.x_sq[i]);
                self.state.aux_expert[(i, j)] = s2.sqrt().max(1e-8);
            }
        }
    }

    /// Alternates the exact coordinate optima of the softmax-denominator
    /// bound's offset c_n (concave stationary point) and curvature points
    /// d_nj (tangency).
    fn update_aux_gate(&mut self) {
        let n = self.data.len();
        let k = self.state.num_experts();
        for i in 0..n {
            let mut c = self.state.aux_gate_offset[i];
            for _ in 0..3 {
                for j in 0..k {
                    let m = self.gc.mean(i, j);
                    let s2 = self.gc.second_moment(i, j, self.x_sq[i]);
                    let arg = (s2 - 2.0 * c * m + c * c).max(0.0);
                    self.state.aux_gate_curv[(i, j)] = arg.sqrt().max(1e-8);
                }
                let mut curv_sum = 0.0;
                let mut weighted = 0.0;
                for j in 0..k {
                    let cd = logistic_curvature(self.state.aux_gate_curv[(i, j)]);
                    curv_sum += cd;
                    weighted += cd * self.gc.mean(i, j);
                }
                c = (1.0 - 0.5 * k as f64 + 2.0 * weighted) / (2.0 * curv_sum);
            }
            self.state.aux_gate_offset[i] = c;
        }
    }

    /// Exact assignment update: softmax of the expected gate score plus the
    /// per-class likelihood bound.
    fn update_assignments(&mut self) {
        let n = self.data.len();
        let k = self.state.num_experts();
        let mut logits = vec![0.0; k];
        for i in 0..n {
            for (j, slot) in logits.iter_mut().enumerate() {
                let e = self.state.aux_expert[(i, j)];
                let ce = logistic_curvature(e);
                let ea = self.data.label_sign(i) * self.ec.mean(i, j);
                let ea2 = self.ec.second_moment(i, j, self.x_sq[i]);
                let b = -(log1p_exp(-e) - 0.5 * (ea - e) - ce * (ea2 - e * e));
                *slot = self.gc.mean(i, j) + b;
            }
            let lse = log_sum_exp(&logits);
            for j in 0..k {
                self.state.assignment_probs[(i, j)] = (logits[j] - lse).exp();
            }
        }
    }

    fn data_direction_gradient(&self, chain: Chain, k: usize) -> Array1<f64> {
        let cache = self.cache(chain);
        let mut g = Array1::<f64>::zeros(self.state.dim());
        match chain {
            Chain::Expert => {
                for i in 0..self.data.len() {
                    let phi = self.state.assignment_probs[(i, k)];
                    if phi == 0.0 {
                        continue;
                    }
                    let ce = logistic_curvature(self.state.aux_expert[(i, k)]);
                    let coef = phi
                        * (0.5 * self.data.label_sign(i) * cache.mean_coeff[k]
                            + 2.0 * ce * cache.sq_aniso[k] * cache.dots[(i, k)]);
                    g.scaled_add(coef, &self.data.features().row(i));
                }
            }
            Chain::Gate => {
                for i in 0..self.data.len() {
                    let c = self.state.aux_gate_offset[i];
                    let cd = logistic_curvature(self.state.aux_gate_curv[(i, k)]);
                    let phi = self.state.assignment_probs[(i, k)];
                    let coef = cache.mean_coeff[k] * (phi - 0.5 - 2.0 * cd * c)
                        + 2.0 * cd * cache.sq_aniso[k] * cache.dots[(i, k)];
                    g.scaled_add(coef, &self.data.features().row(i));
                }
            }
        }
        g
    }

    fn prior_direction_gradient(&self, chain: Chain, k: usize) -> Result<Array1<f64>> {
        let factors = self.factors(chain);
        match self.prior {
            BmemPriorSpec::MutualAngular { experts, gates } => {
                let (hyper, aux) = match chain {
                    Chain::Expert => (experts, &self.state.aux_prior_experts),
                    Chain::Gate => (gates, &self.state.aux_prior_gates),
                };
                sequential_prior_direction_gradient(factors, hyper, aux, k)
            }
            BmemPriorSpec::Independent { experts, gates } => {
                let pr = match chain {
                    Chain::Expert => experts,
                    Chain::Gate => gates,
                };
                let mut g = Array1::<f64>::zeros(self.state.dim());
                if pr.concentration > 0.0 {
                    let mu = pr.base_direction.as_ref().unwrap();
                    g.scaled_add(pr.concentration * factors[k].resultant(), mu.coords());
                }
                Ok(g)
            }
        }
    }

    /// Gradient step on the sphere with backtracking: move along the unit
    /// tangent of the full objective gradient, renormalize, keep only on
    /// strict improvement.
    fn update_directions(&mut self, chain: Chain) -> Result<()> {
        let k_count = self.state.num_experts();
        let lambda = match chain {
            Chain::Expert => self.lambda_experts,
            Chain::Gate => self.lambda_gates,
        };
        for k in 0..k_count {
            let mut grad = self.data_direction_gradient(chain, k);
            grad += &self.prior_direction_gradient(chain, k)?;
            if lambda > 0.0 && k_count >= 2 {
                let dirs: Vec<UnitVector> = self
                    .factors(chain)
                    .iter()
                    .map(|f| f.direction_mean.clone())
                    .collect();
                grad.scaled_add(
                    lambda,
                    &angle_regularizer_gradient(&dirs, k, self.cfg.variance_weight),
                );
            }
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "direction gradient of component {k}"
                )));
            }
            let current = self.factors(chain)[k].direction_mean.clone();
            let radial = current.coords().dot(&grad);
            let tangent = &grad - &(current.coords() * radial);
            let norm = tangent.dot(&tangent).sqrt();
            if norm < 1e-12 {
                continue;
            }
            let unit_tangent = tangent / norm;
            let base = self.objective()?;
            let mut step = self.cfg.direction_step;
            let mut accepted = false;
            for _ in 0..10 {
                let raw = current.coords() + &(&unit_tangent * step);
                match UnitVector::from_unnormalized(raw) {
                    Ok(cand) => {
                        self.set_direction(chain, k, cand);
                        if self.objective()? > base {
                            accepted = true;
                            break;
                        }
                    }
                    Err(_) => {}
                }
                step *= 0.5;
            }
            if !accepted {
                self.set_direction(chain, k, current);
            }
        }
        Ok(())
    }

    fn set_direction(&mut self, chain: Chain, k: usize, dir: UnitVector) {
        let data = self.data;
        let (factors, cache) = self.chain_parts(chain);
        factors[k].direction_mean = dir;
        let f = factors[k].clone();
        cache.refresh_dots(k, &f, data);
    }

    fn set_gamma(&mut self, chain: Chain, k: usize, shape: f64, rate: f64) -> Result<()> {
        let gp = GammaParams::new(shape, rate)?;
        let (factors, cache) = self.chain_parts(chain);
        factors[k].magnitude = gp;
        let p = factors[k].dim();
        let f = factors[k].clone();
        cache.refresh_coeffs(k, &f, p);
        Ok(())
    }

    /// Central-difference ascent in (log shape, log rate) with backtracking.
    fn update_magnitudes(&mut self, chain: Chain) -> Result<()> {
        let h = 1e-4_f64;
        for k in 0..self.state.num_experts() {
            let (r0, s0) = {
                let f = &self.factors(chain)[k];
                (f.magnitude.shape(), f.magnitude.rate())
            };
            let base = self.objective()?;
            let eval = |fit: &mut Self, r: f64, s: f64| -> Result<f64> {
                fit.set_gamma(chain, k, r, s)?;
                fit.objective()
            };
            let g_shape = (eval(self, r0 * h.exp(), s0)? - eval(self, r0 * (-h).exp(), s0)?)
                / (2.0 * h);
            let g_rate = (eval(self, r0, s0 * h.exp())? - eval(self, r0, s0 * (-h).exp())?)
                / (2.0 * h);
            let norm = (g_shape * g_shape + g_rate * g_rate).sqrt();
            if !norm.is_finite() {
                return Err(Error::NonFinite(format!(
                    "magnitude gradient of component {k}"
                )));
            }
            if norm < 1e-12 {
                eval(self, r0, s0)?;
                continue;
            }
            let (ur, us) = (g_shape / norm, g_rate / norm);
            let mut step = self.cfg.magnitude_step;
            let mut accepted = false;
            for _ in 0..10 {
                let r = (r0 * (step * ur).exp()).clamp(1e-8, 1e8);
                let s = (s0 * (step * us).exp()).clamp(1e-8, 1e8);
                if eval(self, r, s)? > base {
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                eval(self, r0, s0)?;
            }
        }
        Ok(())
    }

    fn update_prior_aux(&mut self) -> Result<()> {
        if let BmemPriorSpec::MutualAngular { experts, gates } = self.prior {
            refresh_prior_aux(
                &self.state.expert_factors,
                experts.concentration,
                &mut self.state.aux_prior_experts,
            )?;
            refresh_prior_aux(
                &self.state.gate_factors,
                gates.concentration,
                &mut self.state.aux_prior_gates,
            )?;
        }
        Ok(())
    }

    fn set_kappa(&mut self, kappa: f64) {
        self.state.kappa_hat = kappa;
        let p = self.state.dim();
        for (k, f) in self.state.expert_factors.iter_mut().enumerate() {
            f.direction_concentration = kappa;
            self.ec.refresh_coeffs(k, f, p);
        }
        for (k, f) in self.state.gate_factors.iter_mut().enumerate() {
            f.direction_concentration = kappa;
            self.gc.refresh_coeffs(k, f, p);
        }
    }

    /// One round of geometric probing of the shared concentration; kept only
    /// when the objective improves.
    fn update_concentration(&mut self) -> Result<()> {
        if !self.cfg.update_kappa_hat {
            return Ok(());
        }
        let base_kappa = self.state.kappa_hat;
        let mut best = self.objective()?;
        let mut best_kappa = base_kappa;
        for f in [3.0, 1.75, 1.0 / 1.75, 1.0 / 3.0] {
            let cand = (base_kappa * f).clamp(1e-3, 1e7);
            self.set_kappa(cand);
            let obj = self.objective()?;
            if obj > best {
                best = obj;
                best_kappa = cand;
            }
        }
        self.set_kappa(best_kappa);
        Ok(())
    }

    fn dump(&self, sweep: usize) -> String {
        let span = |fs: &[MabnVariationalFactor]| -> String {
            let shapes: Vec<f64> = fs.iter().map(|f| f.magnitude.shape()).collect();
            let rates: Vec<f64> = fs.iter().map(|f| f.magnitude.rate()).collect();
            format!("shapes={shapes:?} rates={rates:?}")
        };
        format!(
            "objective after sweep {sweep}; kappa_hat={:.6e}; experts: {}; gates: {}; assignment range=[{:.3e}, {:.3e}]",
            self.state.kappa_hat,
            span(&self.state.expert_factors),
            span(&self.state.gate_factors),
            self.state
                .assignment_probs
                .iter()
                .cloned()
                .fold(f64::INFINITY, f64::min),
            self.state
                .assignment_probs
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

/// Ambient objective gradient of one direction mean through the sequential
/// prior: the root alignment term (first component), the pairwise coupling,
/// and the parent-sum path of the later components' partition bounds.
fn sequential_prior_direction_gradient(
    factors: &[MabnVariationalFactor],
    hyper: &MabnHyper,
    aux: &[BoundAuxParams],
    k: usize,
) -> Result<Array1<f64>> {
    let p = factors[0].dim();
    let kappa = hyper.concentration;
    let a_k = factors[k].resultant();
    let mut g = Array1::<f64>::zeros(p);
    if k == 0 {
        g.scaled_add(kappa * a_k, hyper.base_direction.coords());
    }
    let mut others = Array1::<f64>::zeros(p);
    for (j, f) in factors.iter().enumerate() {
        if j != k {
            others += &f.mean_vector();
        }
    }
    g.scaled_add(-kappa * a_k, &others);
    let area = sphere_area(p)?;
    let mut prefix = factors[0].mean_vector();
    for i in 1..factors.len() {
        if i > k {
            let c = logistic_curvature(aux[i - 1].xi);
            g.scaled_add(2.0 * c * kappa * kappa * area * a_k, &prefix);
        }
        prefix += &factors[i].mean_vector();
    }
    Ok(g)
}
