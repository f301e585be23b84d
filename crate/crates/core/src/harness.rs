//! Training, evaluation, and artifact plumbing.
//!
//! Three run modes share one code path:
//! - `vanilla`: plain residual classifier, no gates, cross-entropy only.
//! - `ppp`: gated model trained with task + prototype + target losses.
//! - `noreg`: the ablation — identical to `ppp` with the prototype loss
//!   weight forced to zero at config load, nothing else changed.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::container::{file_digest, Container};
use crate::data::{
    image_dataset_loader, synth_identity_dataset, BatchComposition, Dataset, IdentityBatchSampler,
};
use crate::error::{Error, Result};
use crate::losses::{
    loss_gate_grads_with_targets, prototype_means, total_loss_given_targets, BatchGateRecord,
    LossBreakdown, LossConfig, PrototypeTargets,
};
use crate::model::{GatedModel, ModelNoise, ModelSpec, TrainKind};
use crate::nn::ops::argmax_row;
use crate::nn::{cosine_lr, SgdMomentum};
use crate::prototypes::{collect_eval_decisions, dispersion, enroll};
use crate::pruning::{
    build_plan, prune, utilization, utilization_from_keep_counts, Provenance, PrunedModel,
    Utilization,
};
use crate::rng::{derive, seeded};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Ppp,
    Noreg,
    Vanilla,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Ppp => "ppp",
            RunMode::Noreg => "noreg",
            RunMode::Vanilla => "vanilla",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    #[serde(default = "d_stage_widths")]
    pub stage_widths: Vec<usize>,
    #[serde(default = "d_blocks")]
    pub blocks_per_stage: usize,
    #[serde(default = "d_gate_hidden")]
    pub gate_hidden: usize,
    #[serde(default = "d_gate_temp")]
    pub gate_temperature: f64,
    #[serde(default = "d_gate_bias")]
    pub gate_open_bias: f64,
}

fn d_stage_widths() -> Vec<usize> {
    vec![16, 32, 64]
}
fn d_blocks() -> usize {
    2
}
fn d_gate_hidden() -> usize {
    16
}
fn d_gate_temp() -> f64 {
    1.0
}
fn d_gate_bias() -> f64 {
    2.0
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            stage_widths: d_stage_widths(),
            blocks_per_stage: d_blocks(),
            gate_hidden: d_gate_hidden(),
            gate_temperature: d_gate_temp(),
            gate_open_bias: d_gate_bias(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSettings {
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    #[serde(default = "d_alpha")]
    pub beta: f64,
    #[serde(default = "d_tau")]
    pub tau: f64,
    #[serde(default = "d_target")]
    pub target_rate: f64,
    /// 0 disables the cross-batch running average: prototype targets are
    /// recomputed from each minibatch alone (the default training rule).
    /// A value in (0,1) blends per-batch means into an exponential average
    /// before binarization.
    #[serde(default)]
    pub prototype_momentum: f64,
}

fn d_alpha() -> f64 {
    10.0
}
fn d_tau() -> f64 {
    0.7
}
fn d_target() -> f64 {
    0.6
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            alpha: d_alpha(),
            beta: d_alpha(),
            tau: d_tau(),
            target_rate: d_target(),
            prototype_momentum: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSettings {
    #[serde(default = "d_kind")]
    pub kind: String,
    #[serde(default = "d_classes")]
    pub classes: u32,
    #[serde(default = "d_identities")]
    pub identities: u32,
    #[serde(default = "d_spi")]
    pub samples_per_identity: usize,
    #[serde(default = "d_noise")]
    pub noise_level: f64,
    #[serde(default = "d_data_seed")]
    pub seed: u64,
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub subset: Option<usize>,
}

fn d_kind() -> String {
    "synthetic".into()
}
fn d_classes() -> u32 {
    4
}
fn d_identities() -> u32 {
    8
}
fn d_spi() -> usize {
    200
}
fn d_noise() -> f64 {
    2.0
}
fn d_data_seed() -> u64 {
    1
}

impl Default for DataSettings {
    fn default() -> Self {
        DataSettings {
            kind: d_kind(),
            classes: d_classes(),
            identities: d_identities(),
            samples_per_identity: d_spi(),
            noise_level: d_noise(),
            seed: d_data_seed(),
            path: None,
            subset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSettings {
    #[serde(default = "d_ipb")]
    pub identities_per_batch: usize,
    #[serde(default = "d_bspi")]
    pub samples_per_identity: usize,
}

fn d_ipb() -> usize {
    4
}
fn d_bspi() -> usize {
    8
}

impl Default for BatchSettings {
    fn default() -> Self {
        BatchSettings {
            identities_per_batch: d_ipb(),
            samples_per_identity: d_bspi(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSettings {
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr_net")]
    pub lr_network: f64,
    #[serde(default = "d_lr_gate")]
    pub lr_gates: f64,
    #[serde(default = "d_momentum")]
    pub momentum: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
}

fn d_epochs() -> usize {
    16
}
fn d_lr_net() -> f64 {
    0.01
}
fn d_lr_gate() -> f64 {
    0.1
}
fn d_momentum() -> f64 {
    0.9
}
fn d_wd() -> f64 {
    1e-4
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            epochs: d_epochs(),
            lr_network: d_lr_net(),
            lr_gates: d_lr_gate(),
            momentum: d_momentum(),
            weight_decay: d_wd(),
        }
    }
}

/// Complete run description. Unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: RunMode,
    pub seed: u64,
    #[serde(default)]
    pub init_from: Option<String>,
    #[serde(default = "d_enroll")]
    pub enroll_batch: usize,
    #[serde(default)]
    pub model: ModelSettings,
    #[serde(default)]
    pub loss: LossSettings,
    #[serde(default)]
    pub data: DataSettings,
    #[serde(default)]
    pub batch: BatchSettings,
    #[serde(default)]
    pub optim: OptimSettings,
}

fn d_enroll() -> usize {
    32
}

impl RunConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(s).map_err(|e| Error::Config(format!("run config: {e}")))?;
        Ok(cfg.effective())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    /// The ablation is a config transform: noreg forces alpha to zero with
    /// everything else equal.
    pub fn effective(mut self) -> Self {
        if self.mode == RunMode::Noreg {
            self.loss.alpha = 0.0;
        }
        self
    }

    pub fn model_spec(&self, dataset: &Dataset) -> ModelSpec {
        ModelSpec {
            input_channels: 3,
            input_hw: dataset.image_hw,
            num_classes: dataset.num_classes as usize,
            stage_widths: self.model.stage_widths.clone(),
            blocks_per_stage: self.model.blocks_per_stage,
            gated: self.mode != RunMode::Vanilla,
            gate_hidden: self.model.gate_hidden,
            gate_temperature: self.model.gate_temperature,
            gate_open_bias: self.model.gate_open_bias,
        }
    }
}

/// A dataset with its train/held-out index split.
pub struct DataBundle {
    pub dataset: Dataset,
    pub train_idx: Vec<usize>,
    pub heldout_idx: Vec<usize>,
}

/// Build the dataset a config describes and split it. Synthetic data holds
/// out the last quarter of each identity's examples; archive data keeps the
/// archive's own train/test division.
pub fn load_data(cfg: &DataSettings) -> Result<DataBundle> {
    match cfg.kind.as_str() {
        "synthetic" => {
            let ds = synth_identity_dataset(
                cfg.classes,
                cfg.identities,
                cfg.samples_per_identity,
                cfg.noise_level,
                cfg.seed,
            )?;
            let (train_idx, heldout_idx) = ds.split(0.25);
            Ok(DataBundle {
                dataset: ds,
                train_idx,
                heldout_idx,
            })
        }
        "cifar10" | "cifar100" => {
            let path = cfg.path.as_ref().ok_or_else(|| {
                Error::Config("archive datasets need data.path".into())
            })?;
            let root = Path::new(path);
            let train = image_dataset_loader(root, "train", cfg.subset)?;
            let test = image_dataset_loader(root, "test", None)?;
            let n_train = train.examples.len();
            let mut merged = train;
            let n_test = test.examples.len();
            merged.examples.extend(test.examples);
            Ok(DataBundle {
                dataset: merged,
                train_idx: (0..n_train).collect(),
                heldout_idx: (n_train..n_train + n_test).collect(),
            })
        }
        other => Err(Error::Config(format!("unknown dataset kind {other}"))),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub task: f64,
    pub prototype: f64,
    pub target: f64,
    pub total: f64,
    /// Mean fraction of active channels in this batch's sampled gates.
    pub gate_rate: f64,
}

pub struct TrainOutcome {
    pub checkpoint_path: PathBuf,
    pub steps: usize,
    pub final_train_accuracy: f64,
    /// Mean sampled gate on-rate per epoch (empty for vanilla runs).
    pub epoch_gate_rates: Vec<f64>,
    pub step_logs: Vec<StepLog>,
}

/// Optimize the configured objective and write a checkpoint. Identical
/// config + seed produces a bitwise-identical checkpoint.
pub fn train(
    cfg: &RunConfig,
    bundle: &DataBundle,
    out_path: &Path,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    let cfg = cfg.clone().effective();
    let gated = cfg.mode != RunMode::Vanilla;
    if !(0.0..1.0).contains(&cfg.loss.prototype_momentum) {
        return Err(Error::Config(format!(
            "prototype_momentum must lie in [0,1), got {}",
            cfg.loss.prototype_momentum
        )));
    }
    if cfg.batch.samples_per_identity < 2 {
        return Err(Error::Config(
            "training batches need samples_per_identity >= 2 (a one-sample prototype mean is vacuous)"
                .into(),
        ));
    }
    let spec = cfg.model_spec(&bundle.dataset);
    let mut model = GatedModel::<f32>::new(spec.clone(), derive(cfg.seed, 1))?;
    if let Some(init) = &cfg.init_from {
        let c = Container::read(Path::new(init))?;
        if c.kind != "checkpoint" {
            return Err(Error::Format(format!("{init}: not a checkpoint")));
        }
        model.load_named_tensors(&c.tensor_map(), true)?;
    }
    let loss_cfg = if gated {
        let lc = LossConfig {
            alpha: cfg.loss.alpha,
            beta: cfg.loss.beta,
            tau: cfg.loss.tau,
            target_rate: cfg.loss.target_rate,
            gated_layer_ids: model.gated_layer_ids(),
        };
        lc.validate()?;
        Some(lc)
    } else {
        None
    };
    let comp = BatchComposition {
        identities_per_batch: cfg.batch.identities_per_batch,
        samples_per_identity: cfg.batch.samples_per_identity,
        seed: derive(cfg.seed, 2),
    };
    let sampler = IdentityBatchSampler::new(&bundle.dataset, &bundle.train_idx, comp)?;
    let mut noise_rng = seeded(derive(cfg.seed, 3));
    let optim = SgdMomentum {
        lr_network: cfg.optim.lr_network,
        lr_gate: cfg.optim.lr_gates,
        momentum: cfg.optim.momentum,
        weight_decay: cfg.optim.weight_decay,
    };
    let steps_per_epoch = sampler.epoch(0).len();
    let total_steps = steps_per_epoch * cfg.optim.epochs;
    let mut logs: Vec<StepLog> = Vec::with_capacity(total_steps);
    let mut epoch_gate_rates = Vec::new();
    let mut log_file = match log_path {
        Some(p) => Some(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => None,
    };
    // cross-batch running average of per-identity mean gate patterns,
    // used only when prototype_momentum > 0
    let mut ema: PrototypeTargets = PrototypeTargets::new();
    let mut step = 0usize;
    for epoch in 0..cfg.optim.epochs {
        let mut epoch_rate = 0.0f64;
        let batches = sampler.epoch(epoch as u64);
        for batch in &batches {
            let (x, labels, identities) = bundle.dataset.gather::<f32>(batch);
            model.zero_grads();
            let with_step = |e: Error| match e {
                Error::Divergence(m) => Error::Divergence(format!("at step {step}: {m}")),
                other => other,
            };
            let breakdown;
            let rate;
            if gated {
                let mut ns = ModelNoise::Sample(&mut noise_rng);
                let fwd = model
                    .forward_train(&x, TrainKind::HardSt, &mut ns, true)
                    .map_err(with_step)?;
                let (task, dlogits) = GatedModel::task_loss(&fwd.logits, &labels);
                let record = BatchGateRecord::from_decisions(&fwd.decisions, &identities)?;
                let lc = loss_cfg.as_ref().unwrap();
                let batch_means = prototype_means(&record);
                let mom = cfg.loss.prototype_momentum;
                let mut targets: PrototypeTargets = PrototypeTargets::new();
                for (layer_id, per_identity) in &batch_means {
                    let layer_ema = ema.entry(*layer_id).or_default();
                    let mut layer_targets = std::collections::BTreeMap::new();
                    for (p, mean) in per_identity {
                        let base = if mom > 0.0 {
                            let e = layer_ema.entry(*p).or_insert_with(|| mean.clone());
                            for (ev, mv) in e.iter_mut().zip(mean.iter()) {
                                *ev = mom * *ev + (1.0 - mom) * mv;
                            }
                            e.clone()
                        } else {
                            mean.clone()
                        };
                        layer_targets.insert(
                            *p,
                            base.iter()
                                .map(|&v| if v >= lc.tau { 1.0 } else { 0.0 })
                                .collect(),
                        );
                    }
                    targets.insert(*layer_id, layer_targets);
                }
                record.check_complete(lc)?;
                breakdown = total_loss_given_targets(task, &record, lc, &targets);
                rate = record.mean_on_rate();
                let ggrads = loss_gate_grads_with_targets(&record, lc, &targets)?;
                model.backward_train(&fwd.cache, &dlogits, Some(&ggrads));
            } else {
                let mut ns = ModelNoise::Sample(&mut noise_rng);
                let fwd = model.forward_train(&x, TrainKind::HardSt, &mut ns, true)?;
                let (task, dlogits) = GatedModel::task_loss(&fwd.logits, &labels);
                breakdown = LossBreakdown {
                    task,
                    prototype: 0.0,
                    target: 0.0,
                    total: task,
                };
                rate = 1.0;
                model.backward_train(&fwd.cache, &dlogits, None);
            }
            if !breakdown.total.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite loss at step {step} (task {}, prototype {}, target {})",
                    breakdown.task, breakdown.prototype, breakdown.target
                )));
            }
            let scale = cosine_lr(step, total_steps);
            optim.step(&mut model.params_mut(), scale);
            let entry = StepLog {
                step,
                epoch,
                task: breakdown.task,
                prototype: breakdown.prototype,
                target: breakdown.target,
                total: breakdown.total,
                gate_rate: rate,
            };
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", serde_json::to_string(&entry).unwrap())?;
            }
            epoch_rate += rate;
            logs.push(entry);
            step += 1;
        }
        let mean_rate = epoch_rate / batches.len().max(1) as f64;
        if gated {
            epoch_gate_rates.push(mean_rate);
        }
        println!(
            "epoch {epoch:>3}: total {:.4} task {:.4} rate {:.3}",
            logs.last().map(|l| l.total).unwrap_or(f64::NAN),
            logs.last().map(|l| l.task).unwrap_or(f64::NAN),
            mean_rate
        );
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    let final_train_accuracy = eval_accuracy(&model, &bundle.dataset, &bundle.train_idx)?.0;
    save_checkpoint(&mut model, &cfg, &spec, step, out_path)?;
    Ok(TrainOutcome {
        checkpoint_path: out_path.to_path_buf(),
        steps: step,
        final_train_accuracy,
        epoch_gate_rates,
        step_logs: logs,
    })
}

fn save_checkpoint(
    model: &mut GatedModel<f32>,
    cfg: &RunConfig,
    spec: &ModelSpec,
    steps: usize,
    path: &Path,
) -> Result<()> {
    let meta = serde_json::json!({
        "config_toml": cfg.to_toml(),
        "model_spec": spec,
        "mode": cfg.mode.as_str(),
        "seed": cfg.seed,
        "steps": steps,
    });
    let mut c = Container::new("checkpoint", meta);
    for (name, shape, data) in model.named_tensors() {
        c.push(name, shape, data);
    }
    c.write(path)
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub spec: ModelSpec,
    pub mode: RunMode,
    pub steps: usize,
    pub digest: String,
}

pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, GatedModel<f32>)> {
    let c = Container::read(path)?;
    if c.kind != "checkpoint" {
        return Err(Error::Format(format!(
            "{}: kind {} is not a checkpoint",
            path.display(),
            c.kind
        )));
    }
    let config_toml = c.meta["config_toml"]
        .as_str()
        .ok_or_else(|| Error::Format("checkpoint lacks embedded config".into()))?;
    let config = RunConfig::from_toml(config_toml)?;
    let spec: ModelSpec = serde_json::from_value(c.meta["model_spec"].clone())
        .map_err(|e| Error::Format(format!("model spec block: {e}")))?;
    let steps = c.meta["steps"].as_u64().unwrap_or(0) as usize;
    let mode = config.mode;
    let mut model = GatedModel::<f32>::new(spec.clone(), derive(config.seed, 1))?;
    model.load_named_tensors(&c.tensor_map(), false)?;
    let digest = file_digest(path)?;
    Ok((
        Checkpoint {
            config,
            spec,
            mode,
            steps,
            digest,
        },
        model,
    ))
}

/// Accuracy of the checkpoint's natural eval path over the given examples.
fn eval_accuracy(
    model: &GatedModel<f32>,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<(f64, BTreeMap<u32, (usize, usize)>)> {
    let mut correct = 0usize;
    let mut per_identity: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for chunk in indices.chunks(64) {
        let (x, labels, ids) = dataset.gather::<f32>(chunk);
        let logits = if model.spec.gated {
            model.forward_eval_gated(&x)?.0
        } else {
            model.forward_eval_vanilla(&x)?
        };
        for (bi, (&label, &id)) in labels.iter().zip(ids.iter()).enumerate() {
            let pred = argmax_row(logits.row(bi));
            let e = per_identity.entry(id).or_insert((0, 0));
            e.1 += 1;
            if pred == label {
                correct += 1;
                e.0 += 1;
            }
        }
    }
    Ok((
        100.0 * correct as f64 / indices.len().max(1) as f64,
        per_identity,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Single,
    Prototype,
    Vanilla,
}

impl EvalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            EvalMode::Single => "single",
            EvalMode::Prototype => "prototype",
            EvalMode::Vanilla => "vanilla",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub inference: String,
    pub accuracy_pct: f64,
    pub util_propagated: f64,
    pub util_output_only: f64,
    pub mean_dispersion: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityDetail {
    pub identity: u32,
    pub accuracy_pct: f64,
    pub util_propagated: f64,
    pub util_output_only: f64,
    pub dispersion: Option<f64>,
    pub test_count: usize,
    pub enroll_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMeta {
    pub checkpoint_digest: String,
    pub mode: String,
    pub seed: u64,
    pub test_examples: usize,
    pub enroll_batch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub per_identity: Vec<IdentityDetail>,
    pub omitted_identities: Vec<u32>,
    pub meta: EvalMeta,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&s).map_err(|e| Error::Format(format!("report: {e}")))
    }
}

/// Evaluate a checkpoint.
///
/// - `vanilla`: plain accuracy, utilization exactly 1.
/// - `single`: the gated full model picks channels per input.
/// - `prototype`: per identity, enroll -> measure dispersion -> build plan ->
///   prune -> evaluate that identity's test samples on its own compact
///   model. The full model is not touched after enrollment and pruning;
///   an access counter asserts it.
pub fn evaluate(
    ckpt: &Checkpoint,
    model: &GatedModel<f32>,
    bundle: &DataBundle,
    mode: EvalMode,
) -> Result<EvalReport> {
    let method = ckpt.mode.as_str().to_string();
    let dataset = &bundle.dataset;
    let heldout = dataset.by_identity(&bundle.heldout_idx);
    let all_ids: std::collections::BTreeSet<u32> =
        (1..=dataset.num_identities).collect();
    let omitted: Vec<u32> = all_ids
        .iter()
        .filter(|p| !heldout.contains_key(p))
        .cloned()
        .collect();
    let meta = EvalMeta {
        checkpoint_digest: ckpt.digest.clone(),
        mode: mode.as_str().into(),
        seed: ckpt.config.seed,
        test_examples: bundle.heldout_idx.len(),
        enroll_batch: ckpt.config.enroll_batch,
    };
    match mode {
        EvalMode::Vanilla => {
            if ckpt.mode != RunMode::Vanilla {
                return Err(Error::Config(
                    "vanilla evaluation needs a vanilla checkpoint".into(),
                ));
            }
            let (acc, per_id) = eval_accuracy(model, dataset, &bundle.heldout_idx)?;
            let per_identity = per_id
                .into_iter()
                .map(|(p, (c, t))| IdentityDetail {
                    identity: p,
                    accuracy_pct: 100.0 * c as f64 / t.max(1) as f64,
                    util_propagated: 1.0,
                    util_output_only: 1.0,
                    dispersion: None,
                    test_count: t,
                    enroll_count: 0,
                })
                .collect();
            Ok(EvalReport {
                records: vec![EvalRecord {
                    method,
                    inference: "n/a".into(),
                    accuracy_pct: acc,
                    util_propagated: 1.0,
                    util_output_only: 1.0,
                    mean_dispersion: None,
                }],
                per_identity,
                omitted_identities: omitted,
                meta,
            })
        }
        EvalMode::Single => {
            if !model.spec.gated {
                return Err(Error::Config("single mode needs a gated checkpoint".into()));
            }
            let mut correct = 0usize;
            let mut total = 0usize;
            let mut per_identity_counts: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
            let mut util_sum = Utilization {
                propagated: 0.0,
                output_only: 0.0,
            };
            for chunk in bundle.heldout_idx.chunks(64) {
                let (x, labels, ids) = dataset.gather::<f32>(chunk);
                let (logits, decisions) = model.forward_eval_gated(&x)?;
                for (bi, (&label, &id)) in labels.iter().zip(ids.iter()).enumerate() {
                    let pred = argmax_row(logits.row(bi));
                    let e = per_identity_counts.entry(id).or_insert((0, 0));
                    e.1 += 1;
                    total += 1;
                    if pred == label {
                        correct += 1;
                        e.0 += 1;
                    }
                    let keep: BTreeMap<usize, usize> = decisions
                        .iter()
                        .map(|d| {
                            let n: f64 = d.hard.row(bi).iter().map(|v| *v as f64).sum();
                            (d.layer_id, (n as usize).max(1))
                        })
                        .collect();
                    let u = utilization_from_keep_counts(model, &keep)?;
                    util_sum.propagated += u.propagated;
                    util_sum.output_only += u.output_only;
                }
            }
            let nf = total.max(1) as f64;
            let disp = mean_dispersion_over_identities(model, dataset, &heldout, ckpt)?;
            let per_identity = per_identity_counts
                .into_iter()
                .map(|(p, (c, t))| IdentityDetail {
                    identity: p,
                    accuracy_pct: 100.0 * c as f64 / t.max(1) as f64,
                    util_propagated: util_sum.propagated / nf,
                    util_output_only: util_sum.output_only / nf,
                    dispersion: disp.per_identity.get(&p).cloned(),
                    test_count: t,
                    enroll_count: ckpt.config.enroll_batch,
                })
                .collect();
            Ok(EvalReport {
                records: vec![EvalRecord {
                    method,
                    inference: "single".into(),
                    accuracy_pct: 100.0 * correct as f64 / nf,
                    util_propagated: util_sum.propagated / nf,
                    util_output_only: util_sum.output_only / nf,
                    mean_dispersion: Some(disp.mean),
                }],
                per_identity,
                omitted_identities: omitted,
                meta,
            })
        }
        EvalMode::Prototype => {
            if !model.spec.gated {
                return Err(Error::Config(
                    "prototype mode needs a gated checkpoint".into(),
                ));
            }
            // phase 1: enrollment, dispersion, plan, prune — full model used
            struct PerIdentity {
                pruned: PrunedModel<f32>,
                test_idx: Vec<usize>,
                dispersion: f64,
                util: Utilization,
                enroll_count: usize,
            }
            let mut personal: BTreeMap<u32, PerIdentity> = BTreeMap::new();
            for (&p, idxs) in &heldout {
                let n_enroll = ckpt.config.enroll_batch.min(idxs.len());
                let enroll_idx: Vec<usize> = idxs[..n_enroll].to_vec();
                let (ex, _, eids) = dataset.gather::<f32>(&enroll_idx);
                let proto = enroll(model, &ex, &eids, ckpt.config.loss.tau)?;
                let (tx, _, _) = dataset.gather::<f32>(idxs);
                let test_decisions = collect_eval_decisions(model, &tx)?;
                let mut dsum = 0.0;
                for (lid, d) in &test_decisions {
                    dsum += dispersion(d, &proto, *lid)?;
                }
                let disp = dsum / test_decisions.len().max(1) as f64;
                let plan = build_plan(model, &proto)?;
                let util = utilization(&plan);
                let pruned = prune(
                    model,
                    &plan,
                    Provenance {
                        source_digest: ckpt.digest.clone(),
                        identity: p,
                        tau: ckpt.config.loss.tau,
                        target_rate: ckpt.config.loss.target_rate,
                    },
                )?;
                personal.insert(
                    p,
                    PerIdentity {
                        pruned,
                        test_idx: idxs.clone(),
                        dispersion: disp,
                        util,
                        enroll_count: n_enroll,
                    },
                );
            }
            // phase 2: evaluation uses only the compact models
            let full_model_accesses_before = model.forward_count();
            let mut correct = 0usize;
            let mut total = 0usize;
            let mut per_identity = Vec::new();
            for (&p, pi) in &personal {
                let mut id_correct = 0usize;
                for chunk in pi.test_idx.chunks(64) {
                    let (x, labels, _) = dataset.gather::<f32>(chunk);
                    let logits = pi.pruned.forward(&x)?;
                    for (bi, &label) in labels.iter().enumerate() {
                        if argmax_row(logits.row(bi)) == label {
                            id_correct += 1;
                        }
                    }
                }
                correct += id_correct;
                total += pi.test_idx.len();
                per_identity.push(IdentityDetail {
                    identity: p,
                    accuracy_pct: 100.0 * id_correct as f64 / pi.test_idx.len().max(1) as f64,
                    util_propagated: pi.util.propagated,
                    util_output_only: pi.util.output_only,
                    dispersion: Some(pi.dispersion),
                    test_count: pi.test_idx.len(),
                    enroll_count: pi.enroll_count,
                });
            }
            assert_eq!(
                model.forward_count(),
                full_model_accesses_before,
                "prototype-mode evaluation must not touch the full model after enrollment and pruning"
            );
            let n_ids = personal.len().max(1) as f64;
            let mean_util_prop =
                personal.values().map(|pi| pi.util.propagated).sum::<f64>() / n_ids;
            let mean_util_out =
                personal.values().map(|pi| pi.util.output_only).sum::<f64>() / n_ids;
            let mean_disp = personal.values().map(|pi| pi.dispersion).sum::<f64>() / n_ids;
            Ok(EvalReport {
                records: vec![EvalRecord {
                    method,
                    inference: "prototype".into(),
                    accuracy_pct: 100.0 * correct as f64 / total.max(1) as f64,
                    util_propagated: mean_util_prop,
                    util_output_only: mean_util_out,
                    mean_dispersion: Some(mean_disp),
                }],
                per_identity,
                omitted_identities: omitted,
                meta,
            })
        }
    }
}

struct DispersionSummary {
    mean: f64,
    per_identity: BTreeMap<u32, f64>,
}

/// Enrollment-based dispersion for each identity: distance of held-out test
/// decisions from the identity's prototype, averaged over gated layers.
fn mean_dispersion_over_identities(
    model: &GatedModel<f32>,
    dataset: &Dataset,
    heldout: &BTreeMap<u32, Vec<usize>>,
    ckpt: &Checkpoint,
) -> Result<DispersionSummary> {
    let mut per_identity = BTreeMap::new();
    let mut acc = 0.0f64;
    for (&p, idxs) in heldout {
        let n_enroll = ckpt.config.enroll_batch.min(idxs.len());
        let (ex, _, eids) = dataset.gather::<f32>(&idxs[..n_enroll]);
        let proto = enroll(model, &ex, &eids, ckpt.config.loss.tau)?;
        let (tx, _, _) = dataset.gather::<f32>(idxs);
        let decisions = collect_eval_decisions(model, &tx)?;
        let mut dsum = 0.0;
        for (lid, d) in &decisions {
            dsum += dispersion(d, &proto, *lid)?;
        }
        let d = dsum / decisions.len().max(1) as f64;
        per_identity.insert(p, d);
        acc += d;
    }
    Ok(DispersionSummary {
        mean: acc / heldout.len().max(1) as f64,
        per_identity,
    })
}

/// Batch tensor helper shared by enrollment flows.
pub fn gather_f32(dataset: &Dataset, indices: &[usize]) -> (Array4<f32>, Vec<usize>, Vec<u32>) {
    dataset.gather::<f32>(indices)
}

/// Logit matrix type alias for readability in downstream code.
pub type Logits = Array2<f32>;
