//! Mutual-angular Bayesian-network prior over component sets: each direction
//! is drawn from a vMF centered at the negated (normalized) sum of its
//! predecessors, magnitudes are iid gamma. Two density variants differ in the
//! local normalizer; a lazy step function extends the chain indefinitely.

use std::io::{BufRead, Write};

use ndarray::Array1;
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::directional::{
    log_vmf_normalizer, sphere_area, uniform_sphere_sample, vmf_log_density, vmf_sample,
    GammaParams, UnitVector, VmfParams,
};
use crate::error::{Error, Result};
use crate::util::ksum;

/// Parent sums shorter than this are treated as degenerate: the local
/// probability falls back to uniform on the sphere (the κ‖Σ‖ -> 0 limit).
pub const DEGENERATE_SUM_EPS: f64 = 1e-12;

/// Hyperparameters of the prior: base direction μ0, shared concentration κ,
/// and the gamma law of the magnitudes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MabnHyper {
    pub base_direction: UnitVector,
    pub concentration: f64,
    pub magnitude: GammaParams,
}

impl MabnHyper {
    pub fn new(base_direction: UnitVector, concentration: f64, magnitude: GammaParams) -> Result<Self> {
        if !(concentration.is_finite() && concentration > 0.0) {
            return Err(Error::invalid("prior concentration must be positive"));
        }
        Ok(MabnHyper {
            base_direction,
            concentration,
            magnitude,
        })
    }

    pub fn dim(&self) -> usize {
        self.base_direction.dim()
    }
}

/// Which local-normalizer convention the joint density uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PriorVariant {
    /// Every local term carries the constant normalizer C_p(κ).
    TypeI,
    /// Each local term is normalized as a vMF with linear term κ(−Σparents)ᵀx,
    /// i.e. normalizer C_p(κ‖Σparents‖).
    TypeII,
}

/// Ordered components: unit directions with positive magnitudes. Order is the
/// Bayesian-network topological order (insertion order) and is persisted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentSet {
    directions: Vec<UnitVector>,
    magnitudes: Vec<f64>,
}

impl ComponentSet {
    pub fn new(directions: Vec<UnitVector>, magnitudes: Vec<f64>) -> Result<Self> {
        if directions.len() != magnitudes.len() {
            return Err(Error::invalid("directions and magnitudes differ in length"));
        }
        if let Some(p) = directions.first().map(|d| d.dim()) {
            if directions.iter().any(|d| d.dim() != p) {
                return Err(Error::invalid("all directions must share one dimension"));
            }
        }
        if magnitudes.iter().any(|&g| !(g.is_finite() && g > 0.0)) {
            return Err(Error::invalid("magnitudes must be positive and finite"));
        }
        Ok(ComponentSet {
            directions,
            magnitudes,
        })
    }

    pub fn empty() -> Self {
        ComponentSet {
            directions: Vec::new(),
            magnitudes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Ambient dimension, or None when empty.
    pub fn dim(&self) -> Option<usize> {
        self.directions.first().map(|d| d.dim())
    }

    pub fn directions(&self) -> &[UnitVector] {
        &self.directions
    }

    pub fn magnitudes(&self) -> &[f64] {
        &self.magnitudes
    }

    pub fn direction(&self, i: usize) -> &UnitVector {
        &self.directions[i]
    }

    pub fn magnitude(&self, i: usize) -> f64 {
        self.magnitudes[i]
    }

    /// The full component a_i = g_i * direction_i.
    pub fn scaled(&self, i: usize) -> Array1<f64> {
        self.directions[i].coords() * self.magnitudes[i]
    }

    pub fn push(&mut self, direction: UnitVector, magnitude: f64) -> Result<()> {
        if let Some(p) = self.dim() {
            if direction.dim() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    got: direction.dim(),
                });
            }
        }
        if !(magnitude.is_finite() && magnitude > 0.0) {
            return Err(Error::invalid("magnitude must be positive and finite"));
        }
        self.directions.push(direction);
        self.magnitudes.push(magnitude);
        Ok(())
    }

    pub fn remove(&mut self, i: usize) {
        self.directions.remove(i);
        self.magnitudes.remove(i);
    }

    pub fn set_direction(&mut self, i: usize, d: UnitVector) {
        self.directions[i] = d;
    }

    pub fn set_magnitude(&mut self, i: usize, g: f64) {
        assert!(g.is_finite() && g > 0.0);
        self.magnitudes[i] = g;
    }

    /// Sum of the first `count` directions.
    pub fn direction_prefix_sum(&self, count: usize) -> Array1<f64> {
        let p = self.dim().unwrap_or(0);
        let mut s = Array1::zeros(p);
        for d in self.directions.iter().take(count) {
            s = s + d.coords();
        }
        s
    }

    /// Plain-text serialization: versioned header, then one line per component
    /// holding the direction coordinates followed by the magnitude. Floats are
    /// printed in shortest-roundtrip form, so load(save(x)) == x bit-exactly.
    pub fn to_writer<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "divlvm-components v1")?;
        writeln!(
            w,
            "p={} k={} order=insertion",
            self.dim().unwrap_or(0),
            self.len()
        )?;
        for (d, g) in self.directions.iter().zip(&self.magnitudes) {
            let mut line = String::new();
            for c in d.coords() {
                line.push_str(&format!("{c} "));
            }
            line.push_str(&format!("{g}"));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn from_reader<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty component file".into()))??;
        if header.trim() != "divlvm-components v1" {
            return Err(Error::Parse(format!("unknown component header: {header}")));
        }
        let meta = lines
            .next()
            .ok_or_else(|| Error::Parse("missing metadata line".into()))??;
        let mut p = None;
        let mut k = None;
        for tok in meta.split_whitespace() {
            if let Some(v) = tok.strip_prefix("p=") {
                p = Some(v.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?);
            } else if let Some(v) = tok.strip_prefix("k=") {
                k = Some(v.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?);
            }
        }
        let (p, k) = match (p, k) {
            (Some(p), Some(k)) => (p, k),
            _ => return Err(Error::Parse("metadata line needs p= and k=".into())),
        };
        let mut directions = Vec::with_capacity(k);
        let mut magnitudes = Vec::with_capacity(k);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                .collect::<Result<_>>()?;
            if vals.len() != p + 1 {
                return Err(Error::Parse(format!(
                    "component line has {} values, expected {}",
                    vals.len(),
                    p + 1
                )));
            }
            directions.push(UnitVector::new(Array1::from(vals[..p].to_vec()))?);
            magnitudes.push(vals[p]);
        }
        if directions.len() != k {
            return Err(Error::Parse(format!(
                "component count {} does not match header k={}",
                directions.len(),
                k
            )));
        }
        ComponentSet::new(directions, magnitudes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.to_writer(std::io::BufWriter::new(f))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(f))
    }
}

/// Draws the direction for the component whose predecessors sum (as unit
/// directions) to `parent_sum`; `None` means the root component.
fn step_direction<R: Rng + ?Sized>(
    parent_sum: Option<&Array1<f64>>,
    hyper: &MabnHyper,
    rng: &mut R,
) -> UnitVector {
    match parent_sum {
        None => {
            let params = VmfParams::new(hyper.base_direction.clone(), hyper.concentration)
                .expect("validated hyper");
            vmf_sample(&params, rng)
        }
        Some(s) => {
            let norm = s.dot(s).sqrt();
            if norm < DEGENERATE_SUM_EPS {
                uniform_sphere_sample(hyper.dim(), rng)
            } else {
                let mean = UnitVector::from_unnormalized(-s).expect("nondegenerate sum");
                let params =
                    VmfParams::new(mean, hyper.concentration).expect("validated hyper");
                vmf_sample(&params, rng)
            }
        }
    }
}

fn sample_magnitude<R: Rng + ?Sized>(hyper: &MabnHyper, rng: &mut R) -> f64 {
    let dist = rand_distr::Gamma::new(hyper.magnitude.shape(), 1.0 / hyper.magnitude.rate())
        .expect("validated gamma");
    loop {
        let g: f64 = dist.sample(rng);
        if g > 0.0 && g.is_finite() {
            return g;
        }
    }
}

/// Samples K components from the prior in topological order.
pub fn sample_mabn<R: Rng + ?Sized>(k: usize, hyper: &MabnHyper, rng: &mut R) -> ComponentSet {
    assert!(k >= 1, "sample_mabn requires K >= 1");
    let mut set = ComponentSet::empty();
    let mut sum = Array1::zeros(hyper.dim());
    for i in 0..k {
        let dir = if i == 0 {
            step_direction(None, hyper, rng)
        } else {
            step_direction(Some(&sum), hyper, rng)
        };
        sum = sum + dir.coords();
        let g = sample_magnitude(hyper, rng);
        set.push(dir, g).expect("consistent dims");
    }
    set
}

/// Draws the next component for a possibly-empty existing set, without
/// appending it. Identical in law to sample_mabn's step |existing|+1.
pub fn ima_next_component<R: Rng + ?Sized>(
    existing: &ComponentSet,
    hyper: &MabnHyper,
    rng: &mut R,
) -> (UnitVector, f64) {
    let dir = if existing.is_empty() {
        step_direction(None, hyper, rng)
    } else {
        let sum = existing.direction_prefix_sum(existing.len());
        step_direction(Some(&sum), hyper, rng)
    };
    let g = sample_magnitude(hyper, rng);
    (dir, g)
}

/// Log-probability of one direction given its parents' directions.
///
/// TypeI: log C_p(κ) + κ(−Σ/‖Σ‖)ᵀx. TypeII: log C_p(κ‖Σ‖) + κ(−Σ)ᵀx.
/// A parent sum below the degeneracy epsilon yields the uniform density.
pub fn local_log_prob(
    direction: &UnitVector,
    parents: &[UnitVector],
    kappa: f64,
    variant: PriorVariant,
) -> Result<f64> {
    if parents.is_empty() {
        return Err(Error::invalid("local_log_prob requires at least one parent"));
    }
    let p = direction.dim();
    if parents.iter().any(|u| u.dim() != p) {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: parents.iter().map(|u| u.dim()).find(|&d| d != p).unwrap_or(p),
        });
    }
    let mut sum = Array1::<f64>::zeros(p);
    for u in parents {
        sum = sum + u.coords();
    }
    let norm = sum.dot(&sum).sqrt();
    if norm < DEGENERATE_SUM_EPS {
        return Ok(-sphere_area(p)?.ln());
    }
    let dot = sum.dot(direction.coords());
    Ok(match variant {
        PriorVariant::TypeI => log_vmf_normalizer(p, kappa) - kappa * dot / norm,
        PriorVariant::TypeII => log_vmf_normalizer(p, kappa * norm) - kappa * dot,
    })
}

/// Angular part of the joint log-density (no magnitude terms).
pub fn mabn_directional_log_density(
    directions: &[UnitVector],
    hyper: &MabnHyper,
    variant: PriorVariant,
) -> Result<f64> {
    if directions.is_empty() {
        return Err(Error::invalid("mabn density of an empty set"));
    }
    let root = VmfParams::new(hyper.base_direction.clone(), hyper.concentration)?;
    let mut terms = Vec::with_capacity(directions.len());
    terms.push(vmf_log_density(&directions[0], &root)?);
    for i in 1..directions.len() {
        terms.push(local_log_prob(
            &directions[i],
            &directions[..i],
            hyper.concentration,
            variant,
        )?);
    }
    Ok(ksum(terms))
}

/// Joint log-density of the component set: angular chain plus iid gamma
/// magnitude terms.
pub fn mabn_log_density(
    components: &ComponentSet,
    hyper: &MabnHyper,
    variant: PriorVariant,
) -> Result<f64> {
    if components.is_empty() {
        return Err(Error::invalid("mabn density of an empty set"));
    }
    let angular = mabn_directional_log_density(components.directions(), hyper, variant)?;
    let gamma: f64 = ksum(
        components
            .magnitudes()
            .iter()
            .map(|&g| hyper.magnitude.log_density(g)),
    );
    Ok(angular + gamma)
}
