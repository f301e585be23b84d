//! Training objectives for personalized gating.
//!
//! Three terms combine: the usual cross-entropy task loss, a prototype loss
//! pulling every sample's gate pattern toward its identity's binarized mean
//! pattern, and a target loss steering the mean channel on-rate toward a
//! configured utilization target.
//!
//! Loss values are computed in f64 regardless of the network precision so
//! they can be checked against independent scalar re-implementations at
//! 1e-10 relative tolerance.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GateDecision;
use crate::nn::Scalar;

/// Loss hyperparameters plus the set of gated layers they apply to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub target_rate: f64,
    pub gated_layer_ids: Vec<usize>,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!(
                "tau must lie in (0,1), got {}",
                self.tau
            )));
        }
        if !(self.target_rate > 0.0 && self.target_rate <= 1.0) {
            return Err(Error::Config(format!(
                "target rate must lie in (0,1], got {}",
                self.target_rate
            )));
        }
        if self.gated_layer_ids.is_empty() {
            return Err(Error::Config("no gated layers registered".into()));
        }
        Ok(())
    }
}

/// Per-layer gate outputs for one minibatch, with sample identities.
pub struct LayerRecord<F> {
    pub layer_id: usize,
    /// (batch, channels); binary in normal training, continuous in the
    /// relaxed verification mode.
    pub z: Array2<F>,
}

pub struct BatchGateRecord<F> {
    pub layers: Vec<LayerRecord<F>>,
    pub identities: Vec<u32>,
}

impl<F: Scalar> BatchGateRecord<F> {
    pub fn from_decisions(decisions: &[GateDecision<F>], identities: &[u32]) -> Result<Self> {
        if decisions.is_empty() {
            return Err(Error::Contract("batch record needs at least one gated layer".into()));
        }
        let b = identities.len();
        let mut layers = Vec::with_capacity(decisions.len());
        let mut seen = std::collections::BTreeSet::new();
        for d in decisions {
            if d.hard.nrows() != b {
                return Err(Error::Contract(format!(
                    "layer {}: {} gate rows but {b} identities",
                    d.layer_id,
                    d.hard.nrows()
                )));
            }
            if !seen.insert(d.layer_id) {
                return Err(Error::Contract(format!(
                    "layer {} appears twice in the batch record",
                    d.layer_id
                )));
            }
            layers.push(LayerRecord {
                layer_id: d.layer_id,
                z: d.hard.clone(),
            });
        }
        layers.sort_by_key(|l| l.layer_id);
        Ok(BatchGateRecord {
            layers,
            identities: identities.to_vec(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.identities.len()
    }

    /// Validate that the record covers exactly the configured gated layers.
    pub fn check_complete(&self, cfg: &LossConfig) -> Result<()> {
        let have: Vec<usize> = self.layers.iter().map(|l| l.layer_id).collect();
        let mut want = cfg.gated_layer_ids.clone();
        want.sort_unstable();
        if have != want {
            return Err(Error::Contract(format!(
                "record layers {have:?} do not match configured gated layers {want:?}"
            )));
        }
        Ok(())
    }

    fn identity_rows(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut m: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, &p) in self.identities.iter().enumerate() {
            m.entry(p).or_default().push(i);
        }
        m
    }

    /// Mean fraction of active channels across layers and samples.
    pub fn mean_on_rate(&self) -> f64 {
        let b = self.batch_size() as f64;
        let mut acc = 0.0;
        for l in &self.layers {
            let m = l.z.ncols() as f64;
            let s: f64 = l.z.iter().map(|v| v.into64()).sum();
            acc += s / (b * m);
        }
        acc / self.layers.len() as f64
    }
}

/// Binarized per-identity mean gate patterns, one vector per (layer, identity).
/// These are the constant targets of the prototype loss: no gradient flows
/// into them.
pub type PrototypeTargets = BTreeMap<usize, BTreeMap<u32, Vec<f64>>>;

/// Raw per-identity mean gate patterns for one batch (soft prototypes).
pub fn prototype_means<F: Scalar>(record: &BatchGateRecord<F>) -> PrototypeTargets {
    let groups = record.identity_rows();
    let mut out: PrototypeTargets = BTreeMap::new();
    for l in &record.layers {
        let m = l.z.ncols();
        let mut per_identity = BTreeMap::new();
        for (&p, rows) in &groups {
            let n = rows.len() as f64;
            let mut mean = vec![0.0f64; m];
            for c in 0..m {
                let mut s = 0.0;
                for &r in rows {
                    s += l.z[[r, c]].into64();
                }
                mean[c] = s / n;
            }
            per_identity.insert(p, mean);
        }
        out.insert(l.layer_id, per_identity);
    }
    out
}

pub fn prototype_targets<F: Scalar>(record: &BatchGateRecord<F>, tau: f64) -> PrototypeTargets {
    let mut out = prototype_means(record);
    for per_identity in out.values_mut() {
        for target in per_identity.values_mut() {
            for v in target.iter_mut() {
                *v = if *v >= tau { 1.0 } else { 0.0 };
            }
        }
    }
    out
}

/// Prototype regularization with explicit (frozen) targets.
pub fn prototype_loss_given_targets<F: Scalar>(
    record: &BatchGateRecord<F>,
    targets: &PrototypeTargets,
) -> f64 {
    let groups = record.identity_rows();
    let b = record.batch_size() as f64;
    let mut acc = 0.0f64;
    for l in &record.layers {
        let m = l.z.ncols();
        let layer_targets = &targets[&l.layer_id];
        let mut layer_sum = 0.0f64;
        for (&p, rows) in &groups {
            let t = &layer_targets[&p];
            for &r in rows {
                for c in 0..m {
                    let d = l.z[[r, c]].into64() - t[c];
                    layer_sum += d * d;
                }
            }
        }
        acc += layer_sum / b;
    }
    acc / record.layers.len() as f64
}

/// Mean squared distance of each sample's gate pattern to its identity's
/// binarized batch-mean pattern, averaged over layers and normalized by the
/// batch size once (identities with more samples weigh more).
pub fn prototype_loss<F: Scalar>(record: &BatchGateRecord<F>, tau: f64) -> Result<f64> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0,1), got {tau}")));
    }
    let targets = prototype_targets(record, tau);
    Ok(prototype_loss_given_targets(record, &targets))
}

/// Squared deviation of the mean on-rate from the target utilization rate.
pub fn target_loss<F: Scalar>(record: &BatchGateRecord<F>, target_rate: f64) -> f64 {
    let r = record.mean_on_rate();
    (target_rate - r) * (target_rate - r)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task: f64,
    pub prototype: f64,
    pub target: f64,
    pub total: f64,
}

/// Weighted combination, reported with its per-term breakdown.
pub fn total_loss<F: Scalar>(
    task_loss: f64,
    record: &BatchGateRecord<F>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    record.check_complete(cfg)?;
    let targets = prototype_targets(record, cfg.tau);
    Ok(total_loss_given_targets(task_loss, record, cfg, &targets))
}

/// Weighted combination against caller-supplied prototype targets.
pub fn total_loss_given_targets<F: Scalar>(
    task_loss: f64,
    record: &BatchGateRecord<F>,
    cfg: &LossConfig,
    targets: &PrototypeTargets,
) -> LossBreakdown {
    let prototype = prototype_loss_given_targets(record, targets);
    let target = target_loss(record, cfg.target_rate);
    LossBreakdown {
        task: task_loss,
        prototype,
        target,
        total: task_loss + cfg.alpha * prototype + cfg.beta * target,
    }
}

/// Gradients of `alpha * prototype_loss + beta * target_loss` with respect to
/// each layer's gate outputs, keyed by layer id. The prototype targets are
/// constants; their entries carry no gradient.
pub fn loss_gate_grads<F: Scalar>(
    record: &BatchGateRecord<F>,
    cfg: &LossConfig,
) -> Result<BTreeMap<usize, Array2<F>>> {
    let targets = prototype_targets(record, cfg.tau);
    loss_gate_grads_with_targets(record, cfg, &targets)
}

/// Same as [`loss_gate_grads`] with caller-supplied constant targets (used by
/// the running-average prototype variant).
pub fn loss_gate_grads_with_targets<F: Scalar>(
    record: &BatchGateRecord<F>,
    cfg: &LossConfig,
    targets: &PrototypeTargets,
) -> Result<BTreeMap<usize, Array2<F>>> {
    cfg.validate()?;
    record.check_complete(cfg)?;
    let groups = record.identity_rows();
    let b = record.batch_size() as f64;
    let n_layers = record.layers.len() as f64;
    let r = record.mean_on_rate();
    let d_target_common = -2.0 * (cfg.target_rate - r) / n_layers / b;
    let mut out = BTreeMap::new();
    for l in &record.layers {
        let m = l.z.ncols();
        let layer_targets = &targets[&l.layer_id];
        let mut g = Array2::<F>::zeros(l.z.raw_dim());
        let d_target = cfg.beta * d_target_common / m as f64;
        for (&p, rows) in &groups {
            let t = &layer_targets[&p];
            for &row in rows {
                for c in 0..m {
                    let d_proto =
                        cfg.alpha * 2.0 * (l.z[[row, c]].into64() - t[c]) / (n_layers * b);
                    g[[row, c]] = F::from64(d_proto + d_target);
                }
            }
        }
        out.insert(l.layer_id, g);
    }
    Ok(out)
}
