//! Per-identity gate prototypes.
//!
//! A prototype is, per gated layer, the mean of an identity's hard gate
//! decisions (soft form) together with its thresholded binary form. At
//! deployment the prototype is computed once from a small enrollment batch
//! and then drives pruning; the full model is not needed afterwards.

use std::collections::BTreeMap;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GateDecision;
use crate::model::GatedModel;
use crate::nn::Scalar;

/// Identity label, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IdentityId(pub u32);

/// Per-identity, per-layer gate signature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub identity: u32,
    pub tau: f64,
    pub sample_count: usize,
    /// One entry per gated layer, ordered by layer id.
    pub layers: Vec<PrototypeLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeLayer {
    pub layer_id: usize,
    /// Mean of hard decisions, in [0,1] per channel.
    pub soft: Vec<f64>,
    /// soft >= tau, elementwise.
    pub hard: Vec<u8>,
}

impl Prototype {
    pub fn layer(&self, layer_id: usize) -> Option<&PrototypeLayer> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    /// Check internal consistency: hard masks must be recomputable from the
    /// soft masks and tau alone.
    pub fn validate(&self) -> Result<()> {
        if self.sample_count == 0 {
            return Err(Error::InsufficientEnrollment(
                "prototype built from zero samples".into(),
            ));
        }
        for l in &self.layers {
            if l.soft.len() != l.hard.len() {
                return Err(Error::Contract(format!(
                    "layer {}: soft/hard length mismatch",
                    l.layer_id
                )));
            }
            for (i, (&s, &h)) in l.soft.iter().zip(l.hard.iter()).enumerate() {
                if !(0.0..=1.0).contains(&s) {
                    return Err(Error::Contract(format!(
                        "layer {} channel {i}: soft value {s} outside [0,1]",
                        l.layer_id
                    )));
                }
                let want = u8::from(s >= self.tau);
                if h != want {
                    return Err(Error::Contract(format!(
                        "layer {} channel {i}: hard {h} does not match soft {s} at tau {}",
                        l.layer_id, self.tau
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prototype serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Prototype =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("prototype file: {e}")))?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
        Self::from_json(&s)
    }
}

/// Elementwise mean of hard decisions for one layer. All decisions must come
/// from the same layer; rows are samples.
pub fn prototype_mean<F: Scalar>(decisions: &[GateDecision<F>]) -> Result<Vec<f64>> {
    if decisions.is_empty() {
        return Err(Error::InsufficientEnrollment(
            "prototype mean of an empty decision list".into(),
        ));
    }
    let layer_id = decisions[0].layer_id;
    let m = decisions[0].hard.ncols();
    let mut sum = vec![0.0f64; m];
    let mut n = 0usize;
    for d in decisions {
        if d.layer_id != layer_id {
            return Err(Error::Contract(format!(
                "mixed layer ids in prototype mean: {} and {}",
                layer_id, d.layer_id
            )));
        }
        if d.hard.ncols() != m {
            return Err(Error::Contract("decision width mismatch".into()));
        }
        for row in d.hard.rows() {
            for (c, &v) in row.iter().enumerate() {
                sum[c] += v.into64();
            }
            n += 1;
        }
    }
    let nf = n as f64;
    Ok(sum.into_iter().map(|s| s / nf).collect())
}

/// Step function: out[i] = 1 iff soft[i] >= tau.
pub fn binarize(soft: &[f64], tau: f64) -> Result<Vec<u8>> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0,1), got {tau}")));
    }
    for (i, &s) in soft.iter().enumerate() {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Contract(format!(
                "soft mask entry {i} = {s} outside [0,1]"
            )));
        }
    }
    Ok(soft.iter().map(|&s| u8::from(s >= tau)).collect())
}

/// Compute an identity's prototype from an enrollment batch: run the model's
/// deterministic eval gates over the batch, average the hard decisions per
/// layer, binarize at tau. Model weights are untouched.
pub fn enroll<F: Scalar>(
    model: &GatedModel<F>,
    inputs: &Array4<F>,
    identities: &[u32],
    tau: f64,
) -> Result<Prototype> {
    let n = inputs.dim().0;
    if n == 0 {
        return Err(Error::InsufficientEnrollment("empty enrollment batch".into()));
    }
    if identities.len() != n {
        return Err(Error::Contract(format!(
            "{n} inputs but {} identity labels",
            identities.len()
        )));
    }
    let identity = identities[0];
    if identities.iter().any(|&p| p != identity) {
        return Err(Error::Contract(
            "enrollment batch mixes identities".into(),
        ));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("tau must lie in (0,1), got {tau}")));
    }
    let decisions = collect_eval_decisions(model, inputs)?;
    let mut layers = Vec::new();
    for (layer_id, ds) in &decisions {
        let soft = prototype_mean(std::slice::from_ref(ds))?;
        let hard = binarize(&soft, tau)?;
        layers.push(PrototypeLayer {
            layer_id: *layer_id,
            soft,
            hard,
        });
    }
    let proto = Prototype {
        identity,
        tau,
        sample_count: n,
        layers,
    };
    proto.validate()?;
    Ok(proto)
}

/// Eval-mode decisions for every gated layer, batched in chunks.
pub fn collect_eval_decisions<F: Scalar>(
    model: &GatedModel<F>,
    inputs: &Array4<F>,
) -> Result<BTreeMap<usize, GateDecision<F>>> {
    let n = inputs.dim().0;
    let chunk = 64usize;
    let mut per_layer: BTreeMap<usize, Vec<GateDecision<F>>> = BTreeMap::new();
    let mut start = 0usize;
    while start < n {
        let end = (start + chunk).min(n);
        let xb = inputs
            .slice(ndarray::s![start..end, .., .., ..])
            .to_owned();
        let (_, decisions) = model.forward_eval_gated(&xb)?;
        for d in decisions {
            per_layer.entry(d.layer_id).or_default().push(d);
        }
        start = end;
    }
    let mut out = BTreeMap::new();
    for (layer_id, parts) in per_layer {
        let m = parts[0].hard.ncols();
        let total: usize = parts.iter().map(|d| d.hard.nrows()).sum();
        let mut hard = ndarray::Array2::<F>::zeros((total, m));
        let mut soft = ndarray::Array2::<F>::zeros((total, m));
        let mut row = 0usize;
        for p in &parts {
            for r in 0..p.hard.nrows() {
                for c in 0..m {
                    hard[[row, c]] = p.hard[[r, c]];
                    soft[[row, c]] = p.soft[[r, c]];
                }
                row += 1;
            }
        }
        out.insert(
            layer_id,
            GateDecision {
                layer_id,
                hard,
                soft,
            },
        );
    }
    Ok(out)
}

/// Mean squared distance of per-sample decisions to the prototype's hard mask
/// for one layer. Low dispersion means the identity's inputs share a gate
/// pattern; the regularized model should score far lower than the ablation.
pub fn dispersion<F: Scalar>(
    decisions: &GateDecision<F>,
    prototype: &Prototype,
    layer_id: usize,
) -> Result<f64> {
    let layer = prototype.layer(layer_id).ok_or_else(|| {
        Error::Contract(format!("layer {layer_id} not present in prototype"))
    })?;
    if decisions.layer_id != layer_id {
        return Err(Error::Contract(format!(
            "decisions are for layer {}, not {layer_id}",
            decisions.layer_id
        )));
    }
    let (n, m) = decisions.hard.dim();
    if m != layer.hard.len() {
        return Err(Error::Contract("channel count mismatch".into()));
    }
    if n == 0 {
        return Err(Error::InsufficientEnrollment("no decisions".into()));
    }
    let mut acc = 0.0f64;
    for r in 0..n {
        for c in 0..m {
            let d = decisions.hard[[r, c]].into64() - layer.hard[c] as f64;
            acc += d * d;
        }
    }
    Ok(acc / n as f64)
}
