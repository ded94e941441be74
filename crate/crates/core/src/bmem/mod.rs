//! Mixture of binary-outcome experts with gating, under diversity-promoting
//! component priors: the generative model, a mean-field variational fitter,
//! a Metropolis-Hastings fitter, a posterior-regularized fitter, and EM
//! updates for the prior's own hyperparameters.

pub mod em;
pub mod mh;
pub mod pr;
pub mod synth;
pub mod vi;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::bounds::{
    expected_sq_norm_of_sum, log_partition_upper_bound, logistic_curvature, mabn_elbo_prior_term,
    mabn_entropy_normalizer, mabn_entropy_term, BoundAuxParams, MabnVariationalFactor,
};
pub use crate::data::LabeledDataset;
use crate::directional::{
    log_vmf_normalizer, mean_resultant_length, nonobtuse_angle, sphere_area, GammaParams,
    UnitVector, UNIFORM_CONCENTRATION_EPS,
};
use crate::error::{Error, Result};
use crate::prior::{ComponentSet, MabnHyper};
use crate::util::{ksum, log1p_exp, log_sum_exp, sigmoid, KahanSum};

/// Fitted mixture: per-expert decision vectors β_k and gate vectors η_k,
/// both stored as unit direction × magnitude.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BmemModel {
    experts: ComponentSet,
    gates: ComponentSet,
}

impl BmemModel {
    pub fn new(experts: ComponentSet, gates: ComponentSet) -> Result<Self> {
        if experts.is_empty() {
            return Err(Error::invalid("model needs at least one expert"));
        }
        if experts.len() != gates.len() {
            return Err(Error::invalid(format!(
                "{} experts but {} gates",
                experts.len(),
                gates.len()
            )));
        }
        if experts.dim() != gates.dim() {
            return Err(Error::DimensionMismatch {
                expected: experts.dim().unwrap_or(0),
                got: gates.dim().unwrap_or(0),
            });
        }
        Ok(BmemModel { experts, gates })
    }

    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.experts.dim().unwrap_or(0)
    }

    pub fn experts(&self) -> &ComponentSet {
        &self.experts
    }

    pub fn gates(&self) -> &ComponentSet {
        &self.gates
    }

    /// Gate mixture weights softmax(η_kᵀx) at one input.
    pub fn gate_weights(&self, x: &Array1<f64>) -> Vec<f64> {
        let logits: Vec<f64> = (0..self.num_experts())
            .map(|k| self.gates.scaled(k).dot(x))
            .collect();
        let lse = log_sum_exp(&logits);
        logits.iter().map(|l| (l - lse).exp()).collect()
    }
}

/// P(y = 1 | x) = Σ_k softmax_k(η·x) σ(β_k·x).
pub fn bmem_predict(x: &Array1<f64>, model: &BmemModel) -> Result<f64> {
    if x.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: x.len(),
        });
    }
    let weights = model.gate_weights(x);
    let p = weights
        .iter()
        .enumerate()
        .map(|(k, w)| w * sigmoid(model.experts.scaled(k).dot(x)))
        .sum();
    Ok(p)
}

/// Posterior-sample predictor: the average of `bmem_predict` over draws.
pub fn bmem_predict_samples(x: &Array1<f64>, samples: &[BmemModel]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no posterior samples"));
    }
    let mut acc = KahanSum::new();
    for m in samples {
        acc.add(bmem_predict(x, m)?);
    }
    Ok(acc.value() / samples.len() as f64)
}

/// Mean and population variance of the pairwise nonobtuse angles of a vector
/// family, over ordered pairs (each unordered pair counted twice, which
/// leaves both statistics equal to their unordered values).
pub fn pairwise_angle_stats(vectors: &[Array1<f64>]) -> Result<(f64, f64)> {
    if vectors.len() < 2 {
        return Err(Error::invalid("need at least two vectors"));
    }
    let mut angles = Vec::new();
    for i in 0..vectors.len() {
        for j in (i + 1)..vectors.len() {
            angles.push(nonobtuse_angle(&vectors[i], &vectors[j])?);
        }
    }
    let m = ksum(angles.iter().copied()) / angles.len() as f64;
    let v = ksum(angles.iter().map(|a| (a - m) * (a - m))) / angles.len() as f64;
    Ok((m, v))
}

/// Diversity score of a vector family: mean pairwise nonobtuse angle minus
/// `variance_weight` times the variance of those angles. Invariant to
/// rescaling any vector.
pub fn mutual_angular_regularizer(
    vectors: &[Array1<f64>],
    variance_weight: f64,
) -> Result<f64> {
    if variance_weight < 0.0 {
        return Err(Error::invalid("variance weight must be nonnegative"));
    }
    let (mean, var) = pairwise_angle_stats(vectors)?;
    Ok(mean - variance_weight * var)
}

/// Independent prior on one component chain: directions iid vMF (κ = 0 means
/// uniform) and magnitudes iid gamma. The κ → 0 setting is the ablation the
/// diversity prior is compared against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndependentPrior {
    pub concentration: f64,
    pub base_direction: Option<UnitVector>,
    pub magnitude: GammaParams,
}

impl IndependentPrior {
    pub fn uniform(magnitude: GammaParams) -> Self {
        IndependentPrior {
            concentration: 0.0,
            base_direction: None,
            magnitude,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.concentration.is_finite() && self.concentration >= 0.0) {
            return Err(Error::invalid("prior concentration must be nonnegative"));
        }
        if self.concentration > 0.0 {
            match &self.base_direction {
                None => {
                    return Err(Error::invalid(
                        "concentrated independent prior needs a base direction",
                    ))
                }
                Some(d) if d.dim() != dim => {
                    return Err(Error::DimensionMismatch {
                        expected: dim,
                        got: d.dim(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Which prior the fitters assume over the expert and gate chains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BmemPriorSpec {
    MutualAngular {
        experts: MabnHyper,
        gates: MabnHyper,
    },
    Independent {
        experts: IndependentPrior,
        gates: IndependentPrior,
    },
}

impl BmemPriorSpec {
    pub fn validate(&self, dim: usize) -> Result<()> {
        match self {
            BmemPriorSpec::MutualAngular { experts, gates } => {
                for h in [experts, gates] {
                    if h.dim() != dim {
                        return Err(Error::DimensionMismatch {
                            expected: dim,
                            got: h.dim(),
                        });
                    }
                }
                Ok(())
            }
            BmemPriorSpec::Independent { experts, gates } => {
                experts.validate(dim)?;
                gates.validate(dim)
            }
        }
    }
}

/// Mean-field state: direction/magnitude factors for both chains (one shared
/// direction concentration κ̂), per-example assignment probabilities, and the
/// auxiliary bound parameters of the gate, expert, and prior terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BmemVariationalState {
    pub expert_factors: Vec<MabnVariationalFactor>,
    pub gate_factors: Vec<MabnVariationalFactor>,
    pub kappa_hat: f64,
    /// N×K rows on the simplex.
    pub assignment_probs: Array2<f64>,
    /// Per-example offset c_n of the softmax-denominator bound.
    pub aux_gate_offset: Vec<f64>,
    /// Per-(example, component) curvature point d_nj of the gate bound.
    pub aux_gate_curv: Array2<f64>,
    /// Per-(example, component) curvature point e_nk of the expert bound.
    pub aux_expert: Array2<f64>,
    /// (γ, ξ) pairs for components 2..K of the expert chain prior bound.
    pub aux_prior_experts: Vec<BoundAuxParams>,
    /// Same for the gate chain.
    pub aux_prior_gates: Vec<BoundAuxParams>,
}

impl BmemVariationalState {
    pub fn num_experts(&self) -> usize {
        self.expert_factors.len()
    }

    pub fn dim(&self) -> usize {
        self.expert_factors.first().map(|f| f.dim()).unwrap_or(0)
    }

    pub fn check_consistent(&self, data: &LabeledDataset) -> Result<()> {
        let k = self.num_experts();
        if k == 0 {
            return Err(Error::invalid("state has no components"));
        }
        if self.gate_factors.len() != k {
            return Err(Error::invalid("expert/gate factor counts differ"));
        }
        if data.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: data.dim(),
            });
        }
        let n = data.len();
        if self.assignment_probs.nrows() != n
            || self.assignment_probs.ncols() != k
            || self.aux_gate_offset.len() != n
            || self.aux_gate_curv.dim() != (n, k)
            || self.aux_expert.dim() != (n, k)
        {
            return Err(Error::invalid("state/dataset shape mismatch"));
        }
        Ok(())
    }
}

/// Plug-in point estimate: direction means scaled by E[magnitude]·A_p(κ̂).
pub fn state_to_model(state: &BmemVariationalState) -> Result<BmemModel> {
    let a = mean_resultant_length(state.dim(), state.kappa_hat);
    let build = |factors: &[MabnVariationalFactor]| -> Result<ComponentSet> {
        let dirs: Vec<UnitVector> = factors.iter().map(|f| f.direction_mean.clone()).collect();
        let mags: Vec<f64> = factors
            .iter()
            .map(|f| f.magnitude.shape() / f.magnitude.rate() * a)
            .collect();
        ComponentSet::new(dirs, mags)
    };
    BmemModel::new(build(&state.expert_factors)?, build(&state.gate_factors)?)
}

/// Per-chain moment caches for the data terms: direction dot products and
/// the coefficients that turn them into E[ηᵀx] and E[(ηᵀx)²].
#[derive(Debug, Clone)]
pub(crate) struct ChainCache {
    pub dots: Array2<f64>,
    pub mean_coeff: Vec<f64>,
    pub sq_iso: Vec<f64>,
    pub sq_aniso: Vec<f64>,
}

pub(crate) fn quadratic_coeffs(p: usize, kappa_hat: f64) -> (f64, f64) {
    if kappa_hat < UNIFORM_CONCENTRATION_EPS {
        (1.0 / p as f64, 0.0)
    } else {
        let a = mean_resultant_length(p, kappa_hat);
        (a / kappa_hat, 1.0 - p as f64 * a / kappa_hat)
    }
}

impl ChainCache {
    pub fn build(factors: &[MabnVariationalFactor], data: &LabeledDataset) -> ChainCache {
        let n = data.len();
        let k = factors.len();
        let p = factors[0].dim();
        let mut dots = Array2::zeros((n, k));
        for (j, f) in factors.iter().enumerate() {
            let dir = f.direction_mean.coords();
            for i in 0..n {
                dots[(i, j)] = data.features().row(i).dot(dir);
            }
        }
        let mut cache = ChainCache {
            dots,
            mean_coeff: vec![0.0; k],
            sq_iso: vec![0.0; k],
            sq_aniso: vec![0.0; k],
        };
        for (j, f) in factors.iter().enumerate() {
            cache.refresh_coeffs(j, f, p);
        }
        cache
    }

    /// Recomputes the moment coefficients of component j (after its gamma
    /// factor or the shared concentration changed).
    pub fn refresh_coeffs(&mut self, j: usize, f: &MabnVariationalFactor, p: usize) {
        let (iso, aniso) = quadratic_coeffs(p, f.direction_concentration);
        let eg = f.magnitude.shape() / f.magnitude.rate();
        let eg2 = f.magnitude.shape() * (f.magnitude.shape() + 1.0)
            / (f.magnitude.rate() * f.magnitude.rate());
        self.mean_coeff[j] = eg * f.resultant();
        self.sq_iso[j] = eg2 * iso;
        self.sq_aniso[j] = eg2 * aniso;
    }

    /// Recomputes the dot-product column of component j (after its direction
    /// mean changed).
    pub fn refresh_dots(&mut self, j: usize, f: &MabnVariationalFactor, data: &LabeledDataset) {
        let dir = f.direction_mean.coords();
        for i in 0..data.len() {
            self.dots[(i, j)] = data.features().row(i).dot(dir);
        }
    }

    pub fn mean(&self, n: usize, j: usize) -> f64 {
        self.mean_coeff[j] * self.dots[(n, j)]
    }

    pub fn second_moment(&self, n: usize, j: usize, x_sq: f64) -> f64 {
        let d = self.dots[(n, j)];
        self.sq_iso[j] * x_sq + self.sq_aniso[j] * d * d
    }
}

pub(crate) fn squared_row_norms(data: &LabeledDataset) -> Array1<f64> {
    Array1::from_iter(data.features().rows().into_iter().map(|r| r.dot(&r)))
}

/// Gate bound, expert bound, and assignment entropy summed over examples.
pub(crate) fn data_terms(
    state: &BmemVariationalState,
    data: &LabeledDataset,
    expert_cache: &ChainCache,
    gate_cache: &ChainCache,
    x_sq: &Array1<f64>,
) -> (f64, f64, f64) {
    let n = data.len();
    let k = state.num_experts();
    let mut gate = KahanSum::new();
    let mut expert = KahanSum::new();
    let mut phi_entropy = KahanSum::new();
    for i in 0..n {
        let c = state.aux_gate_offset[i];
        for j in 0..k {
            let phi = state.assignment_probs[(i, j)];
            let m = gate_cache.mean(i, j);
            let s2 = gate_cache.second_moment(i, j, x_sq[i]);
            // z-linear part
            gate.add(phi * m);
            // softmax-denominator bound, one term per component
            let d = state.aux_gate_curv[(i, j)];
            let curv = logistic_curvature(d);
            gate.add(-(log1p_exp(-d) + 0.5 * (m - c + d) - curv * (s2 - 2.0 * c * m + c * c - d * d)));

            // expert bound for class j, weighted by φ
            let sign = data.label_sign(i);
            let ea = sign * expert_cache.mean(i, j);
            let ea2 = expert_cache.second_moment(i, j, x_sq[i]);
            let e = state.aux_expert[(i, j)];
            let ce = logistic_curvature(e);
            expert.add(phi * -(log1p_exp(-e) - 0.5 * (ea - e) - ce * (ea2 - e * e)));

            if phi > 0.0 {
                phi_entropy.add(phi * phi.ln());
            }
        }
        gate.add(-c);
    }
    (gate.value(), expert.value(), phi_entropy.value())
}

fn independent_prior_term(
    factors: &[MabnVariationalFactor],
    prior: &IndependentPrior,
) -> Result<f64> {
    let p = factors[0].dim();
    let mut total = KahanSum::new();
    let (a1, a2) = (prior.magnitude.shape(), prior.magnitude.rate());
    for f in factors {
        if prior.concentration > 0.0 {
            let mu = prior.base_direction.as_ref().unwrap();
            total.add(
                log_vmf_normalizer(p, prior.concentration)
                    + prior.concentration * mu.coords().dot(&f.mean_vector()),
            );
        } else {
            total.add(-sphere_area(p)?.ln());
        }
        let (r, s) = (f.magnitude.shape(), f.magnitude.rate());
        total.add(a1 * a2.ln() - ln_gamma(a1) + (a1 - 1.0) * (digamma(r) - s.ln()) - a2 * r / s);
    }
    Ok(total.value())
}

/// Expected log prior of both chains under the configured prior spec, using
/// the sequential-prior lower bound when the diversity prior is active.
pub(crate) fn prior_terms(state: &BmemVariationalState, prior: &BmemPriorSpec) -> Result<f64> {
    match prior {
        BmemPriorSpec::MutualAngular { experts, gates } => {
            Ok(mabn_elbo_prior_term(&state.expert_factors, experts, &state.aux_prior_experts)?
                + mabn_elbo_prior_term(&state.gate_factors, gates, &state.aux_prior_gates)?)
        }
        BmemPriorSpec::Independent { experts, gates } => {
            Ok(independent_prior_term(&state.expert_factors, experts)?
                + independent_prior_term(&state.gate_factors, gates)?)
        }
    }
}

/// Full fitter objective: data bounds + prior terms − exact factor entropies
/// (normalizers included, so the trace stays comparable when κ̂ moves) −
/// assignment entropy + optional angle regularizers on the direction means.
pub(crate) fn full_objective(
    state: &BmemVariationalState,
    data: &LabeledDataset,
    prior: &BmemPriorSpec,
    lambda_experts: f64,
    lambda_gates: f64,
    variance_weight: f64,
) -> Result<f64> {
    let expert_cache = ChainCache::build(&state.expert_factors, data);
    let gate_cache = ChainCache::build(&state.gate_factors, data);
    let x_sq = squared_row_norms(data);
    full_objective_cached(
        state,
        data,
        prior,
        lambda_experts,
        lambda_gates,
        variance_weight,
        &expert_cache,
        &gate_cache,
        &x_sq,
    )
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn full_objective_cached(
    state: &BmemVariationalState,
    data: &LabeledDataset,
    prior: &BmemPriorSpec,
    lambda_experts: f64,
    lambda_gates: f64,
    variance_weight: f64,
    expert_cache: &ChainCache,
    gate_cache: &ChainCache,
    x_sq: &Array1<f64>,
) -> Result<f64> {
    let (gate, expert, phi_ent) = data_terms(state, data, expert_cache, gate_cache, x_sq);
    let prior_v = prior_terms(state, prior)?;
    let entropy = mabn_entropy_term(&state.expert_factors)
        + mabn_entropy_normalizer(&state.expert_factors)
        + mabn_entropy_term(&state.gate_factors)
        + mabn_entropy_normalizer(&state.gate_factors);
    let mut obj = gate + expert + prior_v - entropy - phi_ent;
    if lambda_experts > 0.0 {
        let means: Vec<Array1<f64>> = state
            .expert_factors
            .iter()
            .map(|f| f.direction_mean.coords().clone())
            .collect();
        obj += lambda_experts * mutual_angular_regularizer(&means, variance_weight)?;
    }
    if lambda_gates > 0.0 {
        let means: Vec<Array1<f64>> = state
            .gate_factors
            .iter()
            .map(|f| f.direction_mean.coords().clone())
            .collect();
        obj += lambda_gates * mutual_angular_regularizer(&means, variance_weight)?;
    }
    Ok(obj)
}

/// Evidence lower bound under the diversity prior on both chains.
pub fn bmem_elbo(
    state: &BmemVariationalState,
    data: &LabeledDataset,
    expert_hyper: &MabnHyper,
    gate_hyper: &MabnHyper,
) -> Result<f64> {
    if !data.is_empty() {
        state.check_consistent(data)?;
    }
    let prior = BmemPriorSpec::MutualAngular {
        experts: expert_hyper.clone(),
        gates: gate_hyper.clone(),
    };
    full_objective(state, data, &prior, 0.0, 0.0, 0.0)
}

/// Refreshes the sequential-prior (γ, ξ) pairs of one chain to their
/// coordinate optimum, keeping each pair only if it does not loosen the
/// bound at the current factors.
pub(crate) fn refresh_prior_aux(
    factors: &[MabnVariationalFactor],
    kappa: f64,
    aux: &mut [BoundAuxParams],
) -> Result<()> {
    let p = factors[0].dim();
    for i in 1..factors.len() {
        let esn = expected_sq_norm_of_sum(factors, i);
        let cand = crate::bounds::optimal_aux(esn, kappa, p, crate::directional::AreaConvention::ByAmbientDim)?;
        let cur = log_partition_upper_bound(esn, kappa, &aux[i - 1], p)?;
        let new = log_partition_upper_bound(esn, kappa, &cand, p)?;
        if new <= cur {
            aux[i - 1] = cand;
        }
    }
    Ok(())
}

/// Serialized training artifact with enough header to reproduce the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BmemCheckpoint {
    pub num_experts: usize,
    pub dim: usize,
    pub fitter: String,
    pub seed: u64,
    pub sweeps: usize,
    pub payload: BmemCheckpointPayload,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum BmemCheckpointPayload {
    Model(BmemModel),
    Variational(BmemVariationalState),
    Samples(Vec<BmemModel>),
}

impl BmemCheckpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)
            .map_err(|e| Error::Parse(format!("checkpoint encode: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        serde_json::from_reader(std::io::BufReader::new(f))
            .map_err(|e| Error::Parse(format!("checkpoint decode: {e}")))
    }
}
