//! Task execution: resolves a configuration into a pipeline run and writes
//! the artifacts (manifest, metrics stream, checkpoints, summary).

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use divlvm::bmem::mh::{bmem_mh_fit, BmemMhConfig, BmemMhFit};
use divlvm::bmem::pr::bmem_pr_fit;
use divlvm::bmem::synth::classification_accuracy;
use divlvm::bmem::vi::{bmem_vi_fit, BmemViConfig, BmemViFit};
use divlvm::bmem::{
    bmem_predict_samples, pairwise_angle_stats, state_to_model, BmemCheckpoint,
    BmemCheckpointPayload, BmemModel, IndependentPrior,
};
use divlvm::data::{
    generate_blocks, load_dense_matrix, load_sparse_labeled, write_dense_matrix, LabeledDataset,
    UnlabeledDataset,
};
use divlvm::directional::{GammaParams, UnitVector};
use divlvm::eval::{clustering_metrics, kmeans_labels, precision_at_k, ClusteringResult};
use divlvm::ghmc::GhmcConfig;
use divlvm::ilfm::{
    default_noise_variance, ilfm_metrics, resample_assignments, IlfmCheckpoint, IlfmConfig,
    IlfmMetricsRecord, IlfmSampler, IlfmState,
};
use divlvm::prior::{sample_mabn, ComponentSet, MabnHyper};
use divlvm::{Error, Result};
use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{CommonSettings, RawConfig, Task};

const MANIFEST_SCHEMA_VERSION: u32 = 1;
/// Allocation passes used to infer representations for held-out rows.
const EVAL_ALLOCATION_PASSES: usize = 20;
/// Restarts of the representation clustering step.
const KMEANS_RESTARTS: usize = 10;

pub struct Run {
    pub task: Task,
    pub config_path: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub strict_paper: bool,
}

pub fn run(run: Run) -> Result<()> {
    let mut raw = RawConfig::load(&run.config_path)?;
    if let Some(seed) = run.seed {
        raw.apply_override("seed", seed.to_string());
    }
    if let Some(out) = &run.out {
        raw.apply_override("out", out.display().to_string());
    }
    if let Some(workers) = run.workers {
        raw.apply_override("workers", workers.to_string());
    }
    if run.strict_paper {
        raw.apply_override("strict_paper", "true".to_string());
    }
    let hash = raw.config_hash(run.task);
    let resolved = raw.resolved().clone();
    let common = CommonSettings::resolve(run.task, &mut raw)?;
    let outcome = dispatch(&common, &hash, &resolved, raw);
    if let Err(e) = &outcome {
        record_failure(&common, e);
    }
    outcome
}

fn dispatch(
    common: &CommonSettings,
    hash: &str,
    resolved: &BTreeMap<String, String>,
    raw: RawConfig,
) -> Result<()> {
    match common.task {
        Task::SamplePrior => sample_prior(common, hash, resolved, raw),
        Task::TrainBmem => train_bmem(common, hash, resolved, raw),
        Task::TrainIlfm => train_ilfm(common, hash, resolved, raw),
        Task::Eval => eval_task(common, hash, resolved, raw),
        Task::Diagnose => diagnose(common, raw),
    }
}

/// On failure, leave a machine-readable record next to the other artifacts
/// (when an output directory is known) and on stderr.
fn record_failure(common: &CommonSettings, e: &Error) {
    let record = json!({
        "error": { "class": error_class(e), "message": e.to_string() },
        "task": common.task.name(),
    });
    eprintln!("{record}");
    if let Some(out) = &common.out {
        if out.is_dir() {
            let _ = std::fs::write(
                out.join("error.json"),
                format!("{:#}\n", record),
            );
        }
    }
}

pub fn error_class(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => "config",
        Error::Parse(_) | Error::Io(_) | Error::DimensionMismatch { .. } => "data",
        Error::NonFinite(_) | Error::NoConvergence(_) => "numerical",
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match error_class(e) {
        "config" => 2,
        "data" => 3,
        _ => 4,
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    task: &'a str,
    code_version: &'a str,
    seed: u64,
    workers: usize,
    strict_paper: bool,
    config_hash: &'a str,
    config: &'a BTreeMap<String, String>,
}

fn write_manifest(
    common: &CommonSettings,
    hash: &str,
    resolved: &BTreeMap<String, String>,
    out: &Path,
) -> Result<()> {
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        task: common.task.name(),
        code_version: env!("CARGO_PKG_VERSION"),
        seed: common.seed,
        workers: common.workers,
        strict_paper: common.strict_paper,
        config_hash: hash,
        config: resolved,
    };
    let f = File::create(out.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &manifest)
        .map_err(|e| Error::Parse(format!("manifest encode: {e}")))?;
    Ok(())
}

/// One JSON object per line; any plotting stack can consume it.
struct MetricsWriter {
    w: BufWriter<File>,
}

impl MetricsWriter {
    fn create(out: &Path) -> Result<Self> {
        let w = BufWriter::new(File::create(out.join("metrics.jsonl"))?);
        Ok(MetricsWriter { w })
    }

    fn record<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value)
            .map_err(|e| Error::Parse(format!("metrics encode: {e}")))?;
        writeln!(self.w, "{line}")?;
        Ok(())
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

fn write_summary(out: &Path, lines: &[String]) -> Result<()> {
    let mut text = String::new();
    for l in lines {
        text.push_str(l);
        text.push('\n');
    }
    std::fs::write(out.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn prepare_out(common: &CommonSettings) -> Result<PathBuf> {
    let out = common.out_dir()?.to_path_buf();
    std::fs::create_dir_all(&out)?;
    Ok(out)
}

/// Mean and variance of the pairwise angles between component directions,
/// plus magnitude summaries, as a JSON block. Angle statistics need at least
/// two components and are omitted below that.
fn component_diagnostics(dirs: &[UnitVector], mags: &[f64]) -> Result<serde_json::Value> {
    let mut block = json!({
        "count": dirs.len(),
        "dim": dirs.first().map_or(0, |d| d.dim()),
    });
    if dirs.len() >= 2 {
        let arrays: Vec<Array1<f64>> = dirs.iter().map(|d| d.coords().clone()).collect();
        let (mean, var) = pairwise_angle_stats(&arrays)?;
        block["angle_mean"] = mean.into();
        block["angle_variance"] = var.into();
    }
    if !mags.is_empty() {
        let n = mags.len() as f64;
        let mean = mags.iter().sum::<f64>() / n;
        let min = mags.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = mags.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        block["magnitude_mean"] = mean.into();
        block["magnitude_min"] = min.into();
        block["magnitude_max"] = max.into();
    }
    Ok(block)
}

fn angle_summary_line(label: &str, block: &serde_json::Value) -> String {
    match (block.get("angle_mean"), block.get("angle_variance")) {
        (Some(m), Some(v)) => format!(
            "{label}: mean={:.6} variance={:.6} (radians)",
            m.as_f64().unwrap_or(f64::NAN),
            v.as_f64().unwrap_or(f64::NAN)
        ),
        _ => format!("{label}: fewer than two components"),
    }
}

fn gamma_magnitude(raw: &mut RawConfig) -> Result<GammaParams> {
    let shape = raw.take_f64("magnitude_shape")?.unwrap_or(2.0);
    let rate = raw.take_f64("magnitude_rate")?.unwrap_or(2.0);
    GammaParams::new(shape, rate)
}

fn mabn_hyper(dim: usize, kappa: f64, magnitude: GammaParams) -> Result<MabnHyper> {
    if dim < 2 {
        return Err(Error::Config(format!(
            "component dimension must be at least 2, got {dim}"
        )));
    }
    MabnHyper::new(UnitVector::basis(dim, 0), kappa, magnitude)
}

fn check_format(raw: &mut RawConfig, expected: &str) -> Result<()> {
    if let Some(fmt) = raw.take_string("dataset_format") {
        if fmt != expected {
            return Err(Error::Config(format!(
                "this task reads the {expected} format, config says {fmt:?}"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sample-prior

fn sample_prior(
    common: &CommonSettings,
    hash: &str,
    resolved: &BTreeMap<String, String>,
    mut raw: RawConfig,
) -> Result<()> {
    let k = raw.require_usize("num_components")?;
    let dim = raw.require_usize("dim")?;
    let kappa = raw.take_f64("kappa")?.unwrap_or(1.0);
    let magnitude = gamma_magnitude(&mut raw)?;
    raw.finish()?;
    if k == 0 {
        return Err(Error::Config("num_components must be at least 1".into()));
    }
    let hyper = mabn_hyper(dim, kappa, magnitude)?;
    let out = prepare_out(common)?;
    write_manifest(common, hash, resolved, &out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
    let set = sample_mabn(k, &hyper, &mut rng);
    set.save(&out.join("components.txt"))?;

    let diag = component_diagnostics(set.directions(), set.magnitudes())?;
    let mut metrics = MetricsWriter::create(&out)?;
    metrics.record(&json!({ "components": diag }))?;
    metrics.finish()?;
    write_summary(
        &out,
        &[
            format!("task: {}", common.task.name()),
            format!("components: {k} in dimension {dim}"),
            angle_summary_line("component_angles", &diag),
        ],
    )
}

// ---------------------------------------------------------------------------
// train-bmem

struct BmemData {
    train: LabeledDataset,
    test: Option<LabeledDataset>,
}

fn load_bmem_data(raw: &mut RawConfig) -> Result<BmemData> {
    check_format(raw, "sparse-labeled")?;
    let train_path = raw.require_path("dataset")?;
    let test_path = raw.take_path("test_dataset");
    let num_features = raw.take_usize("num_features")?;
    let train = load_sparse_labeled(&train_path, num_features)?;
    let test = match test_path {
        Some(p) => {
            let t = load_sparse_labeled(&p, Some(num_features.unwrap_or(train.dim())))?;
            if t.dim() != train.dim() {
                return Err(Error::DimensionMismatch {
                    expected: train.dim(),
                    got: t.dim(),
                });
            }
            Some(t)
        }
        None => None,
    };
    Ok(BmemData { train, test })
}

enum BmemFitOutcome {
    Optimized(BmemViFit),
    Sampled(BmemMhFit),
}

fn train_bmem(
    common: &CommonSettings,
    hash: &str,
    resolved: &BTreeMap<String, String>,
    mut raw: RawConfig,
) -> Result<()> {
    let algorithm = raw.require_string("algorithm")?;
    let data = load_bmem_data(&mut raw)?;
    let num_experts = raw.require_usize("num_experts")?;
    let magnitude = gamma_magnitude(&mut raw)?;
    let dim = data.train.dim();

    let outcome = match algorithm.as_str() {
        "vi" => {
            let kappa = raw.take_f64("kappa")?.unwrap_or(1.0);
            let gate_kappa = raw.take_f64("gate_kappa")?.unwrap_or(kappa);
            let config = vi_config(&mut raw)?;
            raw.finish()?;
            let expert_hyper = mabn_hyper(dim, kappa, magnitude)?;
            let gate_hyper = mabn_hyper(dim, gate_kappa, magnitude)?;
            let fit = best_of_restarts(common, |rng| {
                bmem_vi_fit(&data.train, num_experts, &expert_hyper, &gate_hyper, &config, rng)
            })?;
            BmemFitOutcome::Optimized(fit)
        }
        "pr" => {
            let lambda_experts = raw.take_f64("lambda_experts")?.unwrap_or(1.0);
            let lambda_gates = raw.take_f64("lambda_gates")?.unwrap_or(1.0);
            let config = vi_config(&mut raw)?;
            raw.finish()?;
            let prior = IndependentPrior::uniform(magnitude);
            let fit = best_of_restarts(common, |rng| {
                bmem_pr_fit(
                    &data.train,
                    num_experts,
                    &prior,
                    &prior,
                    lambda_experts,
                    lambda_gates,
                    &config,
                    rng,
                )
            })?;
            BmemFitOutcome::Optimized(fit)
        }
        "mh" => {
            let kappa = raw.take_f64("kappa")?.unwrap_or(1.0);
            let gate_kappa = raw.take_f64("gate_kappa")?.unwrap_or(kappa);
            let mut config = BmemMhConfig::default();
            if let Some(v) = raw.take_usize("burn_in")? {
                config.burn_in = v;
            }
            if let Some(v) = raw.take_usize("thinning")? {
                config.thinning = v;
            }
            if let Some(v) = raw.take_usize("num_samples")? {
                config.num_samples = v;
            }
            if let Some(v) = raw.take_f64("proposal_concentration")? {
                config.proposal_concentration = v;
            }
            if let Some(v) = raw.take_f64("magnitude_step")? {
                config.magnitude_step = v;
            }
            raw.finish()?;
            let expert_hyper = mabn_hyper(dim, kappa, magnitude)?;
            let gate_hyper = mabn_hyper(dim, gate_kappa, magnitude)?;
            let fit = pooled_chains(common, |rng| {
                bmem_mh_fit(&data.train, num_experts, &expert_hyper, &gate_hyper, &config, rng)
            })?;
            BmemFitOutcome::Sampled(fit)
        }
        other => {
            return Err(Error::Config(format!(
                "unknown algorithm {other:?}: expected vi, mh, or pr"
            )))
        }
    };

    let out = prepare_out(common)?;
    write_manifest(common, hash, resolved, &out)?;
    let mut metrics = MetricsWriter::create(&out)?;
    let mut summary = vec![
        format!("task: {}", common.task.name()),
        format!("algorithm: {algorithm}"),
        format!(
            "dataset: {} examples in dimension {}",
            data.train.len(),
            dim
        ),
        format!("num_experts: {num_experts}"),
    ];

    match &outcome {
        BmemFitOutcome::Optimized(fit) => {
            for (sweep, objective) in fit.elbo_trace.iter().enumerate() {
                metrics.record(&json!({ "sweep": sweep, "objective": objective }))?;
            }
            let model = state_to_model(&fit.state)?;
            let train_accuracy = classification_accuracy(&model, &data.train)?;
            let test_accuracy = match &data.test {
                Some(t) => Some(classification_accuracy(&model, t)?),
                None => None,
            };
            metrics.record(&json!({
                "final": true,
                "objective": fit.elbo_trace.last(),
                "train_accuracy": train_accuracy,
                "test_accuracy": test_accuracy,
            }))?;
            BmemCheckpoint {
                num_experts,
                dim,
                fitter: algorithm.clone(),
                seed: common.seed,
                sweeps: fit.elbo_trace.len().saturating_sub(1),
                payload: BmemCheckpointPayload::Variational(fit.state.clone()),
            }
            .save(&out.join("checkpoint.json"))?;
            let experts = component_diagnostics(
                model.experts().directions(),
                model.experts().magnitudes(),
            )?;
            let gates =
                component_diagnostics(model.gates().directions(), model.gates().magnitudes())?;
            summary.push(format!(
                "sweeps_run: {}",
                fit.elbo_trace.len().saturating_sub(1)
            ));
            summary.push(format!(
                "final_objective: {:.6}",
                fit.elbo_trace.last().copied().unwrap_or(f64::NAN)
            ));
            summary.push(format!("train_accuracy: {train_accuracy:.4}"));
            if let Some(t) = test_accuracy {
                summary.push(format!("test_accuracy: {t:.4}"));
            }
            summary.push(angle_summary_line("expert_angles", &experts));
            summary.push(angle_summary_line("gate_angles", &gates));
        }
        BmemFitOutcome::Sampled(fit) => {
            for (i, model) in fit.samples.iter().enumerate() {
                let diag = component_diagnostics(
                    model.experts().directions(),
                    model.experts().magnitudes(),
                )?;
                metrics.record(&json!({
                    "sample": i,
                    "angle_mean": diag.get("angle_mean"),
                    "angle_variance": diag.get("angle_variance"),
                }))?;
            }
            let train_accuracy = samples_accuracy(&fit.samples, &data.train)?;
            let test_accuracy = match &data.test {
                Some(t) => Some(samples_accuracy(&fit.samples, t)?),
                None => None,
            };
            metrics.record(&json!({
                "final": true,
                "train_accuracy": train_accuracy,
                "test_accuracy": test_accuracy,
                "acceptance": {
                    "expert_directions": fit.acceptance.expert_directions,
                    "expert_magnitudes": fit.acceptance.expert_magnitudes,
                    "gate_directions": fit.acceptance.gate_directions,
                    "gate_magnitudes": fit.acceptance.gate_magnitudes,
                },
            }))?;
            BmemCheckpoint {
                num_experts,
                dim,
                fitter: algorithm.clone(),
                seed: common.seed,
                sweeps: fit.samples.len(),
                payload: BmemCheckpointPayload::Samples(fit.samples.clone()),
            }
            .save(&out.join("checkpoint.json"))?;
            summary.push(format!("posterior_samples: {}", fit.samples.len()));
            summary.push(format!("train_accuracy: {train_accuracy:.4}"));
            if let Some(t) = test_accuracy {
                summary.push(format!("test_accuracy: {t:.4}"));
            }
            if let Some(last) = fit.samples.last() {
                let diag = component_diagnostics(
                    last.experts().directions(),
                    last.experts().magnitudes(),
                )?;
                summary.push(angle_summary_line("expert_angles_last_sample", &diag));
            }
            for w in &fit.warnings {
                summary.push(format!("warning: {w}"));
            }
        }
    }
    metrics.finish()?;
    write_summary(&out, &summary)
}

fn vi_config(raw: &mut RawConfig) -> Result<BmemViConfig> {
    let mut config = BmemViConfig::default();
    if let Some(v) = raw.take_usize("max_sweeps")? {
        config.max_sweeps = v;
    }
    if let Some(v) = raw.take_f64("tol")? {
        config.tol = v;
    }
    Ok(config)
}

/// Runs `workers` restarts on distinct derived seeds and keeps the fit with
/// the best final objective; ties go to the earliest seed so the outcome does
/// not depend on thread scheduling.
fn best_of_restarts<F>(common: &CommonSettings, fit: F) -> Result<BmemViFit>
where
    F: Fn(&mut ChaCha8Rng) -> Result<BmemViFit> + Sync,
{
    let fits = run_on_workers(common, &fit)?;
    let mut best: Option<BmemViFit> = None;
    for f in fits {
        let score = f.elbo_trace.last().copied().unwrap_or(f64::NEG_INFINITY);
        let better = match &best {
            None => true,
            Some(b) => score > b.elbo_trace.last().copied().unwrap_or(f64::NEG_INFINITY),
        };
        if better {
            best = Some(f);
        }
    }
    best.ok_or_else(|| Error::invalid("no restart produced a fit"))
}

/// Runs one chain per worker on distinct derived seeds and pools the samples
/// in chain order.
fn pooled_chains<F>(common: &CommonSettings, fit: F) -> Result<BmemMhFit>
where
    F: Fn(&mut ChaCha8Rng) -> Result<BmemMhFit> + Sync,
{
    let mut fits = run_on_workers(common, &fit)?;
    let mut pooled = fits.remove(0);
    let chains = fits.len() as f64 + 1.0;
    for (i, f) in fits.into_iter().enumerate() {
        pooled.samples.extend(f.samples);
        pooled.acceptance.expert_directions += f.acceptance.expert_directions;
        pooled.acceptance.expert_magnitudes += f.acceptance.expert_magnitudes;
        pooled.acceptance.gate_directions += f.acceptance.gate_directions;
        pooled.acceptance.gate_magnitudes += f.acceptance.gate_magnitudes;
        for w in f.warnings {
            pooled.warnings.push(format!("chain {}: {w}", i + 1));
        }
    }
    pooled.acceptance.expert_directions /= chains;
    pooled.acceptance.expert_magnitudes /= chains;
    pooled.acceptance.gate_directions /= chains;
    pooled.acceptance.gate_magnitudes /= chains;
    Ok(pooled)
}

fn run_on_workers<T, F>(common: &CommonSettings, job: &F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut ChaCha8Rng) -> Result<T> + Sync,
{
    if common.workers == 1 {
        let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
        return Ok(vec![job(&mut rng)?]);
    }
    let mut slots: Vec<Option<Result<T>>> = Vec::new();
    slots.resize_with(common.workers, || None);
    std::thread::scope(|scope| {
        for (w, slot) in slots.iter_mut().enumerate() {
            let seed = common.seed.wrapping_add(w as u64);
            scope.spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                *slot = Some(job(&mut rng));
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.expect("worker finished without a result"))
        .collect()
}

fn samples_accuracy(samples: &[BmemModel], data: &LabeledDataset) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no posterior samples to predict with"));
    }
    let mut hits = 0usize;
    for n in 0..data.len() {
        let x = data.features().row(n).to_owned();
        let p = bmem_predict_samples(&x, samples)?;
        let predicted = u8::from(p >= 0.5);
        if predicted == data.labels()[n] {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// train-ilfm

fn train_ilfm(
    common: &CommonSettings,
    hash: &str,
    resolved: &BTreeMap<String, String>,
    mut raw: RawConfig,
) -> Result<()> {
    let out = prepare_out(common)?;
    let mut rng = ChaCha8Rng::seed_from_u64(common.seed);

    // Data source: a dense matrix on disk, or the built-in synthetic
    // generator (noisy shape overlays with known templates).
    check_format(&mut raw, "dense-matrix")?;
    let synthetic = raw.take_string("synthetic");
    let full = match synthetic.as_deref() {
        None => {
            let path = raw.require_path("dataset")?;
            load_dense_matrix(&path)?
        }
        Some("blocks") => {
            let n = raw.take_usize("blocks_n")?.unwrap_or(1000);
            let sigma = raw.take_f64("blocks_noise_sigma")?.unwrap_or(0.5);
            let (data, templates, present) = generate_blocks(n, sigma, &mut rng);
            write_dense_matrix(&data, &out.join("blocks_data.txt"))?;
            write_dense_matrix(
                &UnlabeledDataset::new(templates)?,
                &out.join("blocks_templates.txt"),
            )?;
            write_dense_matrix(
                &UnlabeledDataset::new(present.mapv(f64::from))?,
                &out.join("blocks_truth.txt"),
            )?;
            data
        }
        Some(other) => {
            return Err(Error::Config(format!(
                "unknown synthetic source {other:?}: expected blocks"
            )))
        }
    };

    let heldout_fraction = raw.take_f64("heldout_fraction")?.unwrap_or(0.0);
    if !(0.0..1.0).contains(&heldout_fraction) {
        return Err(Error::Config("heldout_fraction must be in [0, 1)".into()));
    }
    let heldout_count = (heldout_fraction * full.len() as f64).floor() as usize;
    let train_count = full.len() - heldout_count;
    if train_count == 0 {
        return Err(Error::Config("held-out split leaves no training rows".into()));
    }
    let train_raw = UnlabeledDataset::new(
        full.examples()
            .slice(ndarray::s![..train_count, ..])
            .to_owned(),
    )?;
    let heldout_raw = if heldout_count > 0 {
        Some(UnlabeledDataset::new(
            full.examples()
                .slice(ndarray::s![train_count.., ..])
                .to_owned(),
        )?)
    } else {
        None
    };

    // Centering uses the training means everywhere, and the means are written
    // out so a later eval run can apply the same shift.
    let center = raw.take_bool("center")?.unwrap_or(true);
    let (train, heldout) = if center {
        let (train, means) = train_raw.centered();
        write_dense_matrix(
            &UnlabeledDataset::new(means.clone().insert_axis(ndarray::Axis(0)))?,
            &out.join("train_means.txt"),
        )?;
        let heldout = match heldout_raw {
            Some(h) => Some(UnlabeledDataset::new(h.examples() - &means)?),
            None => None,
        };
        (train, heldout)
    } else {
        (train_raw, heldout_raw)
    };

    let ibp_mass = raw.take_f64("ibp_mass")?.unwrap_or(2.0);
    let kappa = raw.take_f64("kappa")?.unwrap_or(1.0);
    let magnitude = gamma_magnitude(&mut raw)?;
    let sweeps = raw.require_usize("sweeps")?;
    let ghmc_step = raw.take_f64("ghmc_step")?.unwrap_or(0.01);
    let ghmc_leaps = raw.take_usize("ghmc_leaps")?.unwrap_or(20);
    let magnitude_step = raw.take_f64("magnitude_step")?.unwrap_or(0.3);
    let noise_variance = match raw.take_string("noise").as_deref() {
        None | Some("auto") => default_noise_variance(&train),
        Some(v) => v.parse::<f64>().map_err(|_| {
            Error::Config(format!("key \"noise\": expected auto or a number, got {v:?}"))
        })?,
    };
    let resample_noise = raw.take_bool("resample_noise")?.unwrap_or(false);
    let drop_trailing_inactive = raw.take_bool("drop_trailing_inactive")?.unwrap_or(false);
    let checkpoint_every = raw.take_usize("checkpoint_every")?.unwrap_or(0);
    let metrics_every = raw.take_usize("metrics_every")?.unwrap_or(1).max(1);
    let init = raw.take_string("init").unwrap_or_else(|| "warm".into());
    raw.finish()?;

    let mut config = IlfmConfig::defaults(train.dim())?;
    config.hyper = mabn_hyper(train.dim(), kappa, magnitude)?;
    config.ghmc = GhmcConfig::new(ghmc_step, ghmc_leaps)?;
    config.magnitude_step = magnitude_step;
    config.strict_paper = common.strict_paper;
    config.resample_noise_variance = resample_noise;
    config.drop_trailing_inactive = drop_trailing_inactive;

    write_manifest(common, hash, resolved, &out)?;
    let mut metrics = MetricsWriter::create(&out)?;

    // Warm starts seed the chain with prior draws; from the featureless
    // state the first represented feature can take hundreds of sweeps when
    // the example count is large.
    let mut state = match init.as_str() {
        "warm" => IlfmState::warm_start(
            train.len(),
            noise_variance,
            ibp_mass,
            &config.hyper,
            &mut rng,
        )?,
        "cold" => IlfmState::initial(train.len(), noise_variance, ibp_mass)?,
        other => {
            return Err(Error::Config(format!(
                "unknown init {other:?}: expected warm or cold"
            )))
        }
    };
    let mut sampler = IlfmSampler::new(config, &state)?;
    for sweep in 1..=sweeps {
        sampler.sweep(&mut state, &train, &mut rng)?;
        if sweep % metrics_every == 0 || sweep == sweeps {
            let (l2_error, log_likelihood) = train_reconstruction(&state, &train)?;
            metrics.record(&IlfmMetricsRecord {
                sweep: sweep as u64,
                k_active: state.num_active(),
                l2_error,
                log_likelihood,
                mean_pairwise_angle: state.mean_active_pairwise_angle(),
            })?;
        }
        if checkpoint_every > 0 && sweep % checkpoint_every == 0 && sweep != sweeps {
            IlfmCheckpoint {
                state: state.clone(),
                seed: common.seed,
                sweep: sweep as u64,
            }
            .save(&out.join(format!("checkpoint_{sweep}.json")))?;
        }
    }
    IlfmCheckpoint {
        state: state.clone(),
        seed: common.seed,
        sweep: sweeps as u64,
    }
    .save(&out.join("checkpoint.json"))?;

    let active_dirs: Vec<UnitVector> = (0..state.num_features())
        .filter(|&k| state.is_active(k))
        .map(|k| state.features.direction(k).clone())
        .collect();
    let active_mags: Vec<f64> = (0..state.num_features())
        .filter(|&k| state.is_active(k))
        .map(|k| state.features.magnitude(k))
        .collect();
    let diag = component_diagnostics(&active_dirs, &active_mags)?;
    let mut summary = vec![
        format!("task: {}", common.task.name()),
        format!("dataset: {} examples in dimension {}", train.len(), train.dim()),
        format!("sweeps_run: {sweeps}"),
        format!("active_features: {}", state.num_active()),
        format!("noise_variance: {:.6}", state.noise_variance),
        format!(
            "train_log_likelihood: {:.4}",
            train_reconstruction(&state, &train)?.1
        ),
        angle_summary_line("active_feature_angles", &diag),
    ];
    let heldout_record = match &heldout {
        Some(h) => {
            let m = ilfm_metrics(&state, h, &mut rng)?;
            summary.push(format!("heldout_l2_error: {:.4}", m.l2_error));
            summary.push(format!("heldout_log_likelihood: {:.4}", m.log_likelihood));
            Some(m)
        }
        None => None,
    };
    metrics.record(&json!({
        "final": true,
        "active_features": state.num_active(),
        "heldout": heldout_record,
        "angles": diag,
    }))?;
    metrics.finish()?;
    write_summary(&out, &summary)
}

/// Mean residual norm and mean Gaussian log density per training row.
fn train_reconstruction(state: &IlfmState, data: &UnlabeledDataset) -> Result<(f64, f64)> {
    let res = state.residuals(data)?;
    let d = data.dim() as f64;
    let norm = -0.5 * d * (2.0 * std::f64::consts::PI * state.noise_variance).ln();
    let mut l2 = 0.0;
    let mut ll = 0.0;
    for row in res.rows() {
        let sq: f64 = row.iter().map(|x| x * x).sum();
        l2 += sq.sqrt();
        ll += norm - 0.5 * sq / state.noise_variance;
    }
    let n = data.len() as f64;
    Ok((l2 / n, ll / n))
}

// ---------------------------------------------------------------------------
// eval

enum Checkpoint {
    Bmem(BmemCheckpoint),
    Ilfm(IlfmCheckpoint),
    Components(ComponentSet),
}

/// Checkpoints are sniffed by shape: JSON objects are tried as the two run
/// checkpoints, anything else as the plain-text component format.
fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)?;
    if text.trim_start().starts_with('{') {
        if let Ok(ck) = IlfmCheckpoint::load(path) {
            return Ok(Checkpoint::Ilfm(ck));
        }
        if let Ok(ck) = BmemCheckpoint::load(path) {
            return Ok(Checkpoint::Bmem(ck));
        }
        return Err(Error::Parse(format!(
            "{} is not a recognized checkpoint",
            path.display()
        )));
    }
    Ok(Checkpoint::Components(ComponentSet::load(path)?))
}

fn eval_task(
    common: &CommonSettings,
    hash: &str,
    resolved: &BTreeMap<String, String>,
    mut raw: RawConfig,
) -> Result<()> {
    let checkpoint_path = raw.require_path("checkpoint")?;
    let dataset_path = raw.require_path("dataset")?;
    let checkpoint = load_checkpoint(&checkpoint_path)?;
    let out = prepare_out(common)?;
    write_manifest(common, hash, resolved, &out)?;
    let mut metrics = MetricsWriter::create(&out)?;
    let mut summary = vec![format!("task: {}", common.task.name())];

    match checkpoint {
        Checkpoint::Bmem(ck) => {
            check_format(&mut raw, "sparse-labeled")?;
            let num_features = raw.take_usize("num_features")?;
            raw.finish()?;
            let data = load_sparse_labeled(&dataset_path, num_features.or(Some(ck.dim)))?;
            if data.dim() != ck.dim {
                return Err(Error::DimensionMismatch {
                    expected: ck.dim,
                    got: data.dim(),
                });
            }
            let accuracy = match &ck.payload {
                BmemCheckpointPayload::Samples(samples) => samples_accuracy(samples, &data)?,
                BmemCheckpointPayload::Model(m) => classification_accuracy(m, &data)?,
                BmemCheckpointPayload::Variational(st) => {
                    classification_accuracy(&state_to_model(st)?, &data)?
                }
            };
            metrics.record(&json!({ "final": true, "accuracy": accuracy }))?;
            summary.push(format!("checkpoint: {} fitter", ck.fitter));
            summary.push(format!("examples: {}", data.len()));
            summary.push(format!("accuracy: {accuracy:.4}"));
        }
        Checkpoint::Ilfm(ck) => {
            check_format(&mut raw, "dense-matrix")?;
            let means_path = raw.take_path("means");
            let labels_path = raw.take_path("labels");
            let clusters = raw.take_usize("clusters")?;
            let precision_k = raw.take_usize("precision_k")?;
            raw.finish()?;
            let mut data = load_dense_matrix(&dataset_path)?;
            if let Some(p) = means_path {
                let means = load_dense_matrix(&p)?;
                if means.len() != 1 || means.dim() != data.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: data.dim(),
                        got: means.dim(),
                    });
                }
                data = UnlabeledDataset::new(data.examples() - &means.examples().row(0))?;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed);
            let m = ilfm_metrics(&ck.state, &data, &mut rng)?;
            summary.push(format!("examples: {}", data.len()));
            summary.push(format!("active_features: {}", ck.state.num_active()));
            summary.push(format!("l2_error: {:.4}", m.l2_error));
            summary.push(format!("log_likelihood: {:.4}", m.log_likelihood));
            let mut record = json!({
                "final": true,
                "l2_error": m.l2_error,
                "log_likelihood": m.log_likelihood,
            });
            if labels_path.is_some() || precision_k.is_some() {
                let reprs = infer_representations(&ck.state, &data, &mut rng)?;
                if let Some(lp) = &labels_path {
                    let truth = load_labels(lp, data.len())?;
                    let k = clusters.unwrap_or_else(|| {
                        truth.iter().collect::<BTreeSet<_>>().len()
                    });
                    let predicted =
                        kmeans_labels(reprs.view(), k, KMEANS_RESTARTS, common.seed)?;
                    let cm = clustering_metrics(&ClusteringResult::new(
                        predicted,
                        truth.clone(),
                    )?);
                    summary.push(format!("clustering_accuracy: {:.4}", cm.accuracy));
                    summary.push(format!("clustering_nmi: {:.4}", cm.nmi));
                    record["clustering_accuracy"] = cm.accuracy.into();
                    record["clustering_nmi"] = cm.nmi.into();
                    if let Some(k) = precision_k {
                        let p = precision_at_k(reprs.view(), reprs.view(), &truth, &truth, k)?;
                        summary.push(format!("precision_at_{k}: {:.4}", p.mean));
                        record["precision_at_k"] =
                            json!({ "k": k, "mean": p.mean });
                    }
                } else if precision_k.is_some() {
                    return Err(Error::Config(
                        "precision_k needs a labels file to score against".into(),
                    ));
                }
            }
            metrics.record(&record)?;
        }
        Checkpoint::Components(_) => {
            return Err(Error::Config(
                "eval needs a run checkpoint; use diagnose for component files".into(),
            ))
        }
    }
    metrics.finish()?;
    write_summary(&out, &summary)
}

/// Binary feature indicators inferred for rows the model never saw, with the
/// features frozen; these are the representation vectors used for clustering
/// and retrieval scoring.
fn infer_representations<R: rand::Rng + ?Sized>(
    state: &IlfmState,
    data: &UnlabeledDataset,
    rng: &mut R,
) -> Result<Array2<f64>> {
    let mut st = state.clone();
    st.allocations = Array2::zeros((data.len(), st.num_features()));
    for _ in 0..EVAL_ALLOCATION_PASSES {
        resample_assignments(&mut st, data, false, rng)?;
    }
    Ok(st.allocations.mapv(f64::from))
}

fn load_labels(path: &Path, expected: usize) -> Result<Vec<usize>> {
    let reader = BufReader::new(File::open(path)?);
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: usize = t.parse().map_err(|_| {
            Error::Parse(format!("line {}: expected an integer label, got {t:?}", i + 1))
        })?;
        labels.push(v);
    }
    if labels.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: labels.len(),
        });
    }
    Ok(labels)
}

// ---------------------------------------------------------------------------
// diagnose

fn diagnose(common: &CommonSettings, mut raw: RawConfig) -> Result<()> {
    let path = raw.require_path("checkpoint")?;
    raw.finish()?;
    let report = match load_checkpoint(&path)? {
        Checkpoint::Components(set) => json!({
            "kind": "components",
            "components": component_diagnostics(set.directions(), set.magnitudes())?,
        }),
        Checkpoint::Ilfm(ck) => {
            let dirs: Vec<UnitVector> = ck.state.features.directions().to_vec();
            let mags = ck.state.features.magnitudes().to_vec();
            json!({
                "kind": "ilfm",
                "components": component_diagnostics(&dirs, &mags)?,
                "active_features": ck.state.num_active(),
                "noise_variance": ck.state.noise_variance,
                "sweep": ck.sweep,
            })
        }
        Checkpoint::Bmem(ck) => {
            let model = match &ck.payload {
                BmemCheckpointPayload::Model(m) => m.clone(),
                BmemCheckpointPayload::Variational(st) => state_to_model(st)?,
                BmemCheckpointPayload::Samples(v) => v
                    .last()
                    .cloned()
                    .ok_or_else(|| Error::invalid("checkpoint holds no samples"))?,
            };
            json!({
                "kind": "bmem",
                "fitter": ck.fitter,
                "experts": component_diagnostics(
                    model.experts().directions(),
                    model.experts().magnitudes(),
                )?,
                "gates": component_diagnostics(
                    model.gates().directions(),
                    model.gates().magnitudes(),
                )?,
            })
        }
    };
    println!("{report}");
    if let Some(dir) = &common.out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("diagnostics.json"), format!("{report:#}\n"))?;
    }
    Ok(())
}
