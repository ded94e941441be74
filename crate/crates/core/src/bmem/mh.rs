//! Random-walk posterior sampler for the mixture: one block per component
//! direction (vMF proposal centered at the current direction, symmetric in
//! the inner product, so no proposal correction) and one per magnitude
//! (normal step truncated to the positive axis, with the truncation-mass
//! Hastings factor). The directional prior is the sequential chain in its
//! normalized-mean form; an empty dataset turns the target into the prior
//! itself.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::{BmemModel, LabeledDataset};
use crate::directional::{vmf_sample, UnitVector, VmfParams};
use crate::error::{Error, Result};
use crate::prior::{mabn_directional_log_density, sample_mabn, ComponentSet, MabnHyper, PriorVariant};
use crate::util::{log1p_exp, log_sum_exp, standard_normal_cdf, KahanSum};

#[derive(Debug, Clone)]
pub struct BmemMhConfig {
    pub burn_in: usize,
    pub thinning: usize,
    pub num_samples: usize,
    /// Concentration of the vMF random-walk proposal (larger = smaller steps).
    pub proposal_concentration: f64,
    /// Standard deviation of the truncated-normal magnitude proposal.
    pub magnitude_step: f64,
}

impl Default for BmemMhConfig {
    fn default() -> Self {
        BmemMhConfig {
            burn_in: 1000,
            thinning: 5,
            num_samples: 1000,
            proposal_concentration: 200.0,
            magnitude_step: 0.3,
        }
    }
}

impl BmemMhConfig {
    fn validate(&self) -> Result<()> {
        if self.thinning == 0 || self.num_samples == 0 {
            return Err(Error::invalid("thinning and num_samples must be positive"));
        }
        if !(self.proposal_concentration.is_finite() && self.proposal_concentration > 0.0) {
            return Err(Error::invalid("proposal_concentration must be positive"));
        }
        if !(self.magnitude_step.is_finite() && self.magnitude_step > 0.0) {
            return Err(Error::invalid("magnitude_step must be positive"));
        }
        Ok(())
    }
}

/// Post-burn-in acceptance rates of the four block families.
#[derive(Debug, Clone, Copy)]
pub struct BmemMhAcceptance {
    pub expert_directions: f64,
    pub expert_magnitudes: f64,
    pub gate_directions: f64,
    pub gate_magnitudes: f64,
}

#[derive(Debug, Clone)]
pub struct BmemMhFit {
    pub samples: Vec<BmemModel>,
    pub acceptance: BmemMhAcceptance,
    /// One entry per block family whose acceptance left [0.05, 0.95].
    pub warnings: Vec<String>,
}

/// Samples the posterior over components given labeled data. An empty
/// dataset is allowed and yields draws from the prior.
pub fn bmem_mh_fit<R: Rng + ?Sized>(
    data: &LabeledDataset,
    num_experts: usize,
    expert_hyper: &MabnHyper,
    gate_hyper: &MabnHyper,
    config: &BmemMhConfig,
    rng: &mut R,
) -> Result<BmemMhFit> {
    if num_experts == 0 {
        return Err(Error::invalid("need at least one expert"));
    }
    config.validate()?;
    for h in [expert_hyper, gate_hyper] {
        if h.dim() != data.dim() {
            return Err(Error::DimensionMismatch {
                expected: data.dim(),
                got: h.dim(),
            });
        }
    }
    let mut sampler = Sampler::init(data, num_experts, expert_hyper, gate_hyper, config, rng)?;
    let total_sweeps = config.burn_in + config.num_samples * config.thinning;
    let mut samples = Vec::with_capacity(config.num_samples);
    for sweep in 0..total_sweeps {
        let counting = sweep >= config.burn_in;
        sampler.sweep(rng, counting)?;
        if counting && (sweep - config.burn_in + 1) % config.thinning == 0 {
            samples.push(sampler.snapshot()?);
        }
    }
    let acceptance = sampler.acceptance_rates();
    let mut warnings = Vec::new();
    for (name, rate) in [
        ("expert directions", acceptance.expert_directions),
        ("expert magnitudes", acceptance.expert_magnitudes),
        ("gate directions", acceptance.gate_directions),
        ("gate magnitudes", acceptance.gate_magnitudes),
    ] {
        if !(0.05..=0.95).contains(&rate) {
            warnings.push(format!(
                "acceptance rate {rate:.3} for {name} blocks is outside [0.05, 0.95]; \
                 adjust proposal_concentration or magnitude_step"
            ));
        }
    }
    Ok(BmemMhFit {
        samples,
        acceptance,
        warnings,
    })
}

/// Prior-recovery entry point: flat likelihood, so the chain targets the
/// component prior alone.
pub fn bmem_mh_prior_samples<R: Rng + ?Sized>(
    num_experts: usize,
    expert_hyper: &MabnHyper,
    gate_hyper: &MabnHyper,
    config: &BmemMhConfig,
    rng: &mut R,
) -> Result<BmemMhFit> {
    let data = LabeledDataset::empty(expert_hyper.dim());
    bmem_mh_fit(&data, num_experts, expert_hyper, gate_hyper, config, rng)
}

fn normal_cdf(x: f64) -> f64 {
    standard_normal_cdf(x)
}

#[derive(Clone, Copy)]
enum ChainId {
    Expert,
    Gate,
}

struct Sampler<'a> {
    data: &'a LabeledDataset,
    expert_hyper: &'a MabnHyper,
    gate_hyper: &'a MabnHyper,
    cfg: &'a BmemMhConfig,
    expert_dirs: Vec<UnitVector>,
    expert_mags: Vec<f64>,
    gate_dirs: Vec<UnitVector>,
    gate_mags: Vec<f64>,
    /// x_nᵀ(unit direction) per chain; magnitudes are applied on the fly so
    /// magnitude proposals never touch these.
    expert_dots: Array2<f64>,
    gate_dots: Array2<f64>,
    log_lik: f64,
    dir_log_prior_expert: f64,
    dir_log_prior_gate: f64,
    accepts: [usize; 4],
    proposals: [usize; 4],
}

impl<'a> Sampler<'a> {
    fn init<R: Rng + ?Sized>(
        data: &'a LabeledDataset,
        num_experts: usize,
        expert_hyper: &'a MabnHyper,
        gate_hyper: &'a MabnHyper,
        cfg: &'a BmemMhConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let split = |set: ComponentSet| (set.directions().to_vec(), set.magnitudes().to_vec());
        let (expert_dirs, expert_mags) = split(sample_mabn(num_experts, expert_hyper, rng));
        let (gate_dirs, gate_mags) = split(sample_mabn(num_experts, gate_hyper, rng));
        let expert_dots = dot_matrix(data, &expert_dirs);
        let gate_dots = dot_matrix(data, &gate_dirs);
        let mut s = Sampler {
            data,
            expert_hyper,
            gate_hyper,
            cfg,
            expert_dirs,
            expert_mags,
            gate_dirs,
            gate_mags,
            expert_dots,
            gate_dots,
            log_lik: 0.0,
            dir_log_prior_expert: 0.0,
            dir_log_prior_gate: 0.0,
            accepts: [0; 4],
            proposals: [0; 4],
        };
        s.log_lik = s.total_log_lik();
        s.dir_log_prior_expert =
            mabn_directional_log_density(&s.expert_dirs, expert_hyper, PriorVariant::TypeI)?;
        s.dir_log_prior_gate =
            mabn_directional_log_density(&s.gate_dirs, gate_hyper, PriorVariant::TypeI)?;
        Ok(s)
    }

    fn total_log_lik(&self) -> f64 {
        let k = self.expert_dirs.len();
        let mut num = vec![0.0; k];
        let mut den = vec![0.0; k];
        let mut acc = KahanSum::new();
        for n in 0..self.data.len() {
            let sign = self.data.label_sign(n);
            for j in 0..k {
                let gate = self.gate_mags[j] * self.gate_dots[(n, j)];
                let a = sign * self.expert_mags[j] * self.expert_dots[(n, j)];
                den[j] = gate;
                num[j] = gate - log1p_exp(-a);
            }
            acc.add(log_sum_exp(&num) - log_sum_exp(&den));
        }
        acc.value()
    }

    fn accept<R: Rng + ?Sized>(delta: f64, rng: &mut R) -> bool {
        delta >= 0.0 || rng.gen::<f64>() < delta.exp()
    }

    fn direction_block<R: Rng + ?Sized>(
        &mut self,
        chain: ChainId,
        k: usize,
        rng: &mut R,
        counting: bool,
    ) -> Result<()> {
        let (current, hyper) = match chain {
            ChainId::Expert => (self.expert_dirs[k].clone(), self.expert_hyper),
            ChainId::Gate => (self.gate_dirs[k].clone(), self.gate_hyper),
        };
        let proposal = vmf_sample(
            &VmfParams::new(current.clone(), self.cfg.proposal_concentration)?,
            rng,
        );
        let (dirs, dots) = match chain {
            ChainId::Expert => (&mut self.expert_dirs, &mut self.expert_dots),
            ChainId::Gate => (&mut self.gate_dirs, &mut self.gate_dots),
        };
        let old_col: Vec<f64> = dots.column(k).to_vec();
        dirs[k] = proposal;
        for n in 0..self.data.len() {
            dots[(n, k)] = self.data.features().row(n).dot(dirs[k].coords());
        }
        let new_prior = match chain {
            ChainId::Expert => {
                mabn_directional_log_density(&self.expert_dirs, hyper, PriorVariant::TypeI)?
            }
            ChainId::Gate => {
                mabn_directional_log_density(&self.gate_dirs, hyper, PriorVariant::TypeI)?
            }
        };
        let old_prior = match chain {
            ChainId::Expert => self.dir_log_prior_expert,
            ChainId::Gate => self.dir_log_prior_gate,
        };
        let new_lik = self.total_log_lik();
        let delta = new_prior + new_lik - old_prior - self.log_lik;
        let slot = match chain {
            ChainId::Expert => 0,
            ChainId::Gate => 2,
        };
        if counting {
            self.proposals[slot] += 1;
        }
        if Self::accept(delta, rng) {
            if counting {
                self.accepts[slot] += 1;
            }
            self.log_lik = new_lik;
            match chain {
                ChainId::Expert => self.dir_log_prior_expert = new_prior,
                ChainId::Gate => self.dir_log_prior_gate = new_prior,
            }
        } else {
            let (dirs, dots) = match chain {
                ChainId::Expert => (&mut self.expert_dirs, &mut self.expert_dots),
                ChainId::Gate => (&mut self.gate_dirs, &mut self.gate_dots),
            };
            dirs[k] = current;
            for (n, v) in old_col.into_iter().enumerate() {
                dots[(n, k)] = v;
            }
        }
        Ok(())
    }

    fn magnitude_block<R: Rng + ?Sized>(&mut self, chain: ChainId, k: usize, rng: &mut R, counting: bool) {
        let sigma = self.cfg.magnitude_step;
        let (old, prior) = match chain {
            ChainId::Expert => (self.expert_mags[k], &self.expert_hyper.magnitude),
            ChainId::Gate => (self.gate_mags[k], &self.gate_hyper.magnitude),
        };
        // draw from N(old, σ²) restricted to the positive axis
        let proposal = loop {
            let step: f64 = rng.sample(StandardNormal);
            let cand = old + sigma * step;
            if cand > 0.0 {
                break cand;
            }
        };
        // the proposal normalizes by the positive mass Φ(center/σ)
        let log_hastings = normal_cdf(old / sigma).ln() - normal_cdf(proposal / sigma).ln();
        let d_prior = prior.log_density(proposal) - prior.log_density(old);
        match chain {
            ChainId::Expert => self.expert_mags[k] = proposal,
            ChainId::Gate => self.gate_mags[k] = proposal,
        }
        let new_lik = self.total_log_lik();
        let delta = d_prior + new_lik - self.log_lik + log_hastings;
        let slot = match chain {
            ChainId::Expert => 1,
            ChainId::Gate => 3,
        };
        if counting {
            self.proposals[slot] += 1;
        }
        if Self::accept(delta, rng) {
            if counting {
                self.accepts[slot] += 1;
            }
            self.log_lik = new_lik;
        } else {
            match chain {
                ChainId::Expert => self.expert_mags[k] = old,
                ChainId::Gate => self.gate_mags[k] = old,
            }
        }
    }

    fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R, counting: bool) -> Result<()> {
        let k = self.expert_dirs.len();
        for chain in [ChainId::Expert, ChainId::Gate] {
            for j in 0..k {
                self.direction_block(chain, j, rng, counting)?;
                self.magnitude_block(chain, j, rng, counting);
            }
        }
        Ok(())
    }

    fn snapshot(&self) -> Result<BmemModel> {
        BmemModel::new(
            ComponentSet::new(self.expert_dirs.clone(), self.expert_mags.clone())?,
            ComponentSet::new(self.gate_dirs.clone(), self.gate_mags.clone())?,
        )
    }

    fn acceptance_rates(&self) -> BmemMhAcceptance {
        let rate = |i: usize| {
            if self.proposals[i] == 0 {
                // nothing counted (all burn-in): report a neutral rate
                0.5
            } else {
                self.accepts[i] as f64 / self.proposals[i] as f64
            }
        };
        BmemMhAcceptance {
            expert_directions: rate(0),
            expert_magnitudes: rate(1),
            gate_directions: rate(2),
            gate_magnitudes: rate(3),
        }
    }
}

fn dot_matrix(data: &LabeledDataset, dirs: &[UnitVector]) -> Array2<f64> {
    let mut out = Array2::zeros((data.len(), dirs.len()));
    for (j, d) in dirs.iter().enumerate() {
        for n in 0..data.len() {
            out[(n, j)] = data.features().row(n).dot(d.coords());
        }
    }
    out
}
