//! Graph generator and network pruner.
//!
//! `build_plan` turns a prototype's per-layer masks into alive channel index
//! lists with input-channel propagation; `prune` copies the surviving
//! filters and normalization channels into a physically smaller model with
//! no gate modules at all, then certifies equivalence against the masked
//! full model on random probes. No weights are adjusted.
//!
//! Residual-branch outputs keep full block width: the skip path is ungated,
//! so pruned branch outputs are scattered back into their original channel
//! positions before the residual add. That choice is what makes pruning an
//! exact transform rather than an approximation.

use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::GatedModel;
use crate::nn::ops::{global_avg_pool, relu4};
use crate::nn::{conv_ref, norm, Scalar};
use crate::prototypes::Prototype;
use crate::rng::{normal, seeded};

/// Certificate probe settings: 100 standard-normal inputs, fixed seed,
/// float32 tolerance.
pub const CERT_PROBES: usize = 100;
pub const CERT_SEED: u64 = 0x9e11_ce27;
pub const CERT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlanLayer {
    pub name: String,
    /// Gated-layer registry id; `None` for ungated convolutions.
    pub layer_id: Option<usize>,
    pub full_out: usize,
    pub full_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_spatial: (usize, usize),
    pub alive_out: Vec<usize>,
    pub alive_in: Vec<usize>,
    /// For residual-branch-final convs: position of each alive output in the
    /// full-width block output.
    pub scatter: Option<Vec<usize>>,
}

impl PlanLayer {
    fn full(name: &str, out: usize, inp: usize, k: usize, stride: usize, pad: usize, sp: (usize, usize)) -> Self {
        PlanLayer {
            name: name.into(),
            layer_id: None,
            full_out: out,
            full_in: inp,
            kernel: k,
            stride,
            pad,
            out_spatial: sp,
            alive_out: (0..out).collect(),
            alive_in: (0..inp).collect(),
            scatter: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PruningPlan {
    pub input_hw: (usize, usize),
    pub layers: Vec<PlanLayer>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Utilization {
    /// Both ends alive: weights actually kept by the pruner.
    pub propagated: f64,
    /// Output-channel convention only (inputs counted full).
    pub output_only: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub source_digest: String,
    pub identity: u32,
    pub tau: f64,
    pub target_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Certificate {
    pub probe_count: usize,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
}

/// Resolve a prototype layer mask into alive indices, applying the
/// degenerate-layer rule: an all-zero mask keeps the single channel with the
/// highest soft value.
fn alive_from_mask(hard: &[u8], soft: &[f64]) -> Vec<usize> {
    let alive: Vec<usize> = hard
        .iter()
        .enumerate()
        .filter(|(_, &h)| h == 1)
        .map(|(i, _)| i)
        .collect();
    if !alive.is_empty() {
        return alive;
    }
    let mut best = 0usize;
    let mut bv = f64::NEG_INFINITY;
    for (i, &s) in soft.iter().enumerate() {
        if s > bv {
            bv = s;
            best = i;
        }
    }
    vec![best]
}

/// Derive the pruning plan for one identity: alive output channels from the
/// prototype's hard masks, input channels propagated from each producer.
pub fn build_plan<F: Scalar>(model: &GatedModel<F>, prototype: &Prototype) -> Result<PruningPlan> {
    prototype.validate()?;
    for l in &model.layers {
        let pl = prototype.layer(l.layer_id).ok_or_else(|| {
            Error::Contract(format!(
                "prototype missing gated layer {}",
                l.layer_id
            ))
        })?;
        if pl.hard.len() != l.out_channels {
            return Err(Error::Contract(format!(
                "prototype layer {}: {} channels, model has {}",
                l.layer_id,
                pl.hard.len(),
                l.out_channels
            )));
        }
    }
    let mut layers = Vec::new();
    let w0 = model.spec.stage_widths[0];
    layers.push(PlanLayer::full(
        "stem.conv",
        w0,
        model.spec.input_channels,
        3,
        1,
        1,
        model.spec.input_hw,
    ));
    for (i, b) in model.blocks.iter().enumerate() {
        let in_w = b.conv1.in_channels;
        let width = b.conv1.out_channels;
        let (alive1, lid1) = match b.lid1 {
            Some(id) => {
                let pl = prototype.layer(id).unwrap();
                (alive_from_mask(&pl.hard, &pl.soft), Some(id))
            }
            None => ((0..width).collect(), None),
        };
        let (alive2, lid2) = match b.lid2 {
            Some(id) => {
                let pl = prototype.layer(id).unwrap();
                (alive_from_mask(&pl.hard, &pl.soft), Some(id))
            }
            None => ((0..width).collect(), None),
        };
        layers.push(PlanLayer {
            name: format!("b{i}.conv1"),
            layer_id: lid1,
            full_out: width,
            full_in: in_w,
            kernel: 3,
            stride: b.conv1.stride,
            pad: 1,
            out_spatial: b.out_hw,
            alive_out: alive1.clone(),
            // block input is full width: the skip path carries every channel
            alive_in: (0..in_w).collect(),
            scatter: None,
        });
        layers.push(PlanLayer {
            name: format!("b{i}.conv2"),
            layer_id: lid2,
            full_out: width,
            full_in: width,
            kernel: 3,
            stride: 1,
            pad: 1,
            out_spatial: b.out_hw,
            alive_out: alive2.clone(),
            alive_in: alive1,
            scatter: Some(alive2),
        });
        if let Some((dc, _)) = &b.down {
            layers.push(PlanLayer::full(
                &format!("b{i}.down.conv"),
                dc.out_channels,
                dc.in_channels,
                1,
                dc.stride,
                0,
                b.out_hw,
            ));
        }
    }
    Ok(PruningPlan {
        input_hw: model.spec.input_hw,
        layers,
    })
}

/// Alive-parameter fractions over conv layers, both counting conventions.
pub fn utilization(plan: &PruningPlan) -> Utilization {
    let mut num_prop = 0usize;
    let mut num_out = 0usize;
    let mut den = 0usize;
    for l in &plan.layers {
        let k2 = l.kernel * l.kernel;
        num_prop += l.alive_out.len() * l.alive_in.len() * k2;
        num_out += l.alive_out.len() * l.full_in * k2;
        den += l.full_out * l.full_in * k2;
    }
    Utilization {
        propagated: num_prop as f64 / den as f64,
        output_only: num_out as f64 / den as f64,
    }
}

/// The headline utilization number (propagated convention).
pub fn utilization_rate(plan: &PruningPlan) -> f64 {
    utilization(plan).propagated
}

/// Utilization implied by per-layer keep counts alone (used for single-mode
/// accounting, where every input picks its own channels). Index positions do
/// not matter for counting, so alive sets are materialized as prefixes.
pub fn utilization_from_keep_counts<F: Scalar>(
    model: &GatedModel<F>,
    keep: &std::collections::BTreeMap<usize, usize>,
) -> Result<Utilization> {
    for l in &model.layers {
        match keep.get(&l.layer_id) {
            Some(&n) if n >= 1 && n <= l.out_channels => {}
            Some(&n) => {
                return Err(Error::Contract(format!(
                    "layer {}: keep count {n} out of range",
                    l.layer_id
                )))
            }
            None => {
                return Err(Error::Contract(format!(
                    "keep count missing for layer {}",
                    l.layer_id
                )))
            }
        }
    }
    let mut layers = Vec::new();
    let w0 = model.spec.stage_widths[0];
    layers.push(PlanLayer::full(
        "stem.conv",
        w0,
        model.spec.input_channels,
        3,
        1,
        1,
        model.spec.input_hw,
    ));
    for (i, b) in model.blocks.iter().enumerate() {
        let width = b.conv1.out_channels;
        let k1 = b.lid1.map(|id| keep[&id]).unwrap_or(width);
        let k2 = b.lid2.map(|id| keep[&id]).unwrap_or(width);
        layers.push(PlanLayer {
            name: format!("b{i}.conv1"),
            layer_id: b.lid1,
            full_out: width,
            full_in: b.conv1.in_channels,
            kernel: 3,
            stride: b.conv1.stride,
            pad: 1,
            out_spatial: b.out_hw,
            alive_out: (0..k1).collect(),
            alive_in: (0..b.conv1.in_channels).collect(),
            scatter: None,
        });
        layers.push(PlanLayer {
            name: format!("b{i}.conv2"),
            layer_id: b.lid2,
            full_out: width,
            full_in: width,
            kernel: 3,
            stride: 1,
            pad: 1,
            out_spatial: b.out_hw,
            alive_out: (0..k2).collect(),
            alive_in: (0..k1).collect(),
            scatter: Some((0..k2).collect()),
        });
        if let Some((dc, _)) = &b.down {
            layers.push(PlanLayer::full(
                &format!("b{i}.down.conv"),
                dc.out_channels,
                dc.in_channels,
                1,
                dc.stride,
                0,
                b.out_hw,
            ));
        }
    }
    Ok(utilization(&PruningPlan {
        input_hw: model.spec.input_hw,
        layers,
    }))
}

/// Multiply-accumulate count for one forward pass at the plan's input size.
pub fn flops_estimate(plan: &PruningPlan, input_spatial: (usize, usize)) -> Result<u64> {
    if input_spatial != plan.input_hw {
        return Err(Error::Contract(format!(
            "plan was built for input {:?}, asked for {:?}",
            plan.input_hw, input_spatial
        )));
    }
    let mut macs = 0u64;
    for l in &plan.layers {
        let (oh, ow) = l.out_spatial;
        macs += (l.alive_out.len() * l.alive_in.len() * l.kernel * l.kernel * oh * ow) as u64;
    }
    Ok(macs)
}

pub struct PrunedConvLayer<F> {
    pub weight: Array4<F>,
    pub stride: usize,
    pub pad: usize,
}

pub struct PrunedNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub mean: Array1<F>,
    pub var: Array1<F>,
    pub eps: F,
}

impl<F: Scalar> PrunedNorm<F> {
    fn apply(&self, x: &Array4<F>) -> Array4<F> {
        let (scale, shift) = norm::eval_affine(&self.gamma, &self.beta, &self.mean, &self.var, self.eps);
        norm::apply_affine_2d(x, &scale, &shift)
    }
}

pub struct PrunedBlock<F> {
    pub conv1: PrunedConvLayer<F>,
    pub bn1: PrunedNorm<F>,
    pub conv2: PrunedConvLayer<F>,
    pub bn2: PrunedNorm<F>,
    /// Channel positions of conv2's alive outputs in the full-width block output.
    pub scatter: Vec<usize>,
    pub out_width: usize,
    pub down: Option<(PrunedConvLayer<F>, PrunedNorm<F>)>,
}

/// A compact per-identity model: surviving conv filters and normalization
/// channels only, no gate modules, immutable after construction.
pub struct PrunedModel<F> {
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub num_classes: usize,
    pub stem: (PrunedConvLayer<F>, PrunedNorm<F>),
    pub blocks: Vec<PrunedBlock<F>>,
    pub fc_w: Array2<F>,
    pub fc_b: Array1<F>,
    pub plan: PruningPlan,
    pub provenance: Provenance,
    pub certificate: Certificate,
}

fn select_std<F: Scalar, D: ndarray::Dimension + ndarray::RemoveAxis>(
    a: &ndarray::Array<F, D>,
    axis: usize,
    idx: &[usize],
) -> ndarray::Array<F, D> {
    let picked = a.select(Axis(axis), idx);
    picked.as_standard_layout().to_owned()
}

fn sliced_norm<F: Scalar>(bn: &crate::nn::BatchNorm2d<F>, idx: &[usize]) -> PrunedNorm<F> {
    let g1 = bn.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    let b1 = bn.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
    PrunedNorm {
        gamma: select_std(&g1, 0, idx),
        beta: select_std(&b1, 0, idx),
        mean: select_std(&bn.running_mean, 0, idx),
        var: select_std(&bn.running_var, 0, idx),
        eps: bn.eps,
    }
}

/// Check the plan's internal consistency against the model structure.
fn validate_plan<F: Scalar>(model: &GatedModel<F>, plan: &PruningPlan) -> Result<()> {
    let mut expect = 1usize;
    for b in &model.blocks {
        expect += 2 + usize::from(b.down.is_some());
    }
    if plan.layers.len() != expect {
        return Err(Error::Contract(format!(
            "plan has {} layers, model has {expect} convolutions",
            plan.layers.len()
        )));
    }
    if plan.input_hw != model.spec.input_hw {
        return Err(Error::Contract("plan input size mismatch".into()));
    }
    let mut li = 1usize; // skip stem
    for (i, b) in model.blocks.iter().enumerate() {
        let l1 = &plan.layers[li];
        let l2 = &plan.layers[li + 1];
        li += 2 + usize::from(b.down.is_some());
        for (l, conv, nm) in [(l1, &b.conv1, "conv1"), (l2, &b.conv2, "conv2")] {
            if l.full_out != conv.out_channels || l.full_in != conv.in_channels {
                return Err(Error::Contract(format!("b{i}.{nm}: width mismatch")));
            }
            if l.alive_out.is_empty() {
                return Err(Error::Contract(format!("b{i}.{nm}: empty alive set")));
            }
            let mut prev = None;
            for &c in l.alive_out.iter().chain(l.alive_in.iter()) {
                if c >= l.full_out.max(l.full_in) && c >= l.full_in.max(l.full_out) {
                    return Err(Error::Contract(format!("b{i}.{nm}: index {c} out of range")));
                }
                let _ = prev.replace(c);
            }
        }
        if l2.alive_in != l1.alive_out {
            return Err(Error::Contract(format!(
                "b{i}: conv2 inputs must equal conv1's alive outputs"
            )));
        }
        match &l2.scatter {
            Some(s) if s == &l2.alive_out => {}
            _ => {
                return Err(Error::Contract(format!(
                    "b{i}: branch output scatter map must be the alive output list"
                )))
            }
        }
    }
    Ok(())
}

/// Copy surviving weights into a compact model and certify equivalence
/// against the masked full model. Fails loudly if the certificate exceeds
/// tolerance.
pub fn prune<F: Scalar>(
    model: &GatedModel<F>,
    plan: &PruningPlan,
    provenance: Provenance,
) -> Result<PrunedModel<F>> {
    validate_plan(model, plan)?;
    let stem_w = model.stem_conv.weight4_view().to_owned();
    let stem = (
        PrunedConvLayer {
            weight: stem_w,
            stride: 1,
            pad: 1,
        },
        sliced_norm(&model.stem_bn, &(0..model.spec.stage_widths[0]).collect::<Vec<_>>()),
    );
    let mut blocks = Vec::new();
    let mut li = 1usize;
    for b in &model.blocks {
        let l1 = plan.layers[li].clone();
        let l2 = plan.layers[li + 1].clone();
        li += 2;
        let w1 = select_std(&b.conv1.weight4_view().to_owned(), 0, &l1.alive_out);
        let w2full = b.conv2.weight4_view().to_owned();
        let w2 = select_std(&select_std(&w2full, 0, &l2.alive_out), 1, &l2.alive_in);
        let down = match &b.down {
            Some((dc, dbn)) => {
                li += 1;
                Some((
                    PrunedConvLayer {
                        weight: dc.weight4_view().to_owned(),
                        stride: dc.stride,
                        pad: dc.pad,
                    },
                    sliced_norm(dbn, &(0..dc.out_channels).collect::<Vec<_>>()),
                ))
            }
            None => None,
        };
        blocks.push(PrunedBlock {
            conv1: PrunedConvLayer {
                weight: w1,
                stride: b.conv1.stride,
                pad: b.conv1.pad,
            },
            bn1: sliced_norm(&b.bn1, &l1.alive_out),
            conv2: PrunedConvLayer {
                weight: w2,
                stride: 1,
                pad: 1,
            },
            bn2: sliced_norm(&b.bn2, &l2.alive_out),
            scatter: l2.scatter.clone().unwrap(),
            out_width: l2.full_out,
            down,
        });
    }
    let mut pruned = PrunedModel {
        input_channels: model.spec.input_channels,
        input_hw: model.spec.input_hw,
        num_classes: model.spec.num_classes,
        stem,
        blocks,
        fc_w: model.fc.weight2_view().to_owned(),
        fc_b: model.fc.bias1_view().to_owned(),
        plan: plan.clone(),
        provenance,
        certificate: Certificate {
            probe_count: 0,
            max_abs_deviation: 0.0,
            tolerance: CERT_TOLERANCE,
        },
    };
    let cert = run_certificate(model, &pruned, CERT_PROBES, CERT_SEED)?;
    if cert.max_abs_deviation > cert.tolerance {
        return Err(Error::PruningDefect(format!(
            "certificate deviation {} exceeds tolerance {}",
            cert.max_abs_deviation, cert.tolerance
        )));
    }
    pruned.certificate = cert;
    Ok(pruned)
}

/// Per-layer constant masks equivalent to the plan's alive sets.
pub fn plan_masks<F: Scalar>(plan: &PruningPlan) -> std::collections::BTreeMap<usize, Array1<F>> {
    let mut masks = std::collections::BTreeMap::new();
    for l in &plan.layers {
        if let Some(id) = l.layer_id {
            let mut m = Array1::<F>::zeros(l.full_out);
            for &c in &l.alive_out {
                m[c] = F::one();
            }
            masks.insert(id, m);
        }
    }
    masks
}

/// Run N standard-normal probes through the masked full model and the pruned
/// model; record the worst absolute logit deviation.
pub fn run_certificate<F: Scalar>(
    model: &GatedModel<F>,
    pruned: &PrunedModel<F>,
    probes: usize,
    seed: u64,
) -> Result<Certificate> {
    let (h, w) = model.spec.input_hw;
    let c = model.spec.input_channels;
    let mut rng = seeded(seed);
    let mut x = Array4::<F>::zeros((probes, c, h, w));
    for v in x.iter_mut() {
        *v = F::from64(normal(&mut rng));
    }
    let masks = plan_masks::<F>(&pruned.plan);
    let reference = model.forward_masked_ref(&x, &masks)?;
    let compact = pruned.forward(&x)?;
    let mut max_dev = 0.0f64;
    for (a, b) in reference.iter().zip(compact.iter()) {
        let d = (a.into64() - b.into64()).abs();
        if d > max_dev {
            max_dev = d;
        }
    }
    Ok(Certificate {
        probe_count: probes,
        max_abs_deviation: max_dev,
        tolerance: CERT_TOLERANCE,
    })
}

impl<F: Scalar> PrunedModel<F> {
    /// Deterministic inference on the compact model.
    pub fn forward(&self, x: &Array4<F>) -> Result<Array2<F>> {
        let (_b, c, h, w) = x.dim();
        if c != self.input_channels || (h, w) != self.input_hw {
            return Err(Error::Contract(format!(
                "input shape ({c},{h},{w}) does not match pruned model"
            )));
        }
        let stem = conv_ref(x, self.stem.0.weight.view(), self.stem.0.stride, self.stem.0.pad);
        let mut cur = relu4(&self.stem.1.apply(&stem));
        for blk in &self.blocks {
            let x_in = cur;
            let skip = match &blk.down {
                Some((dc, dbn)) => dbn.apply(&conv_ref(&x_in, dc.weight.view(), dc.stride, dc.pad)),
                None => x_in.clone(),
            };
            let c1 = conv_ref(&x_in, blk.conv1.weight.view(), blk.conv1.stride, blk.conv1.pad);
            let v = relu4(&blk.bn1.apply(&c1));
            let c2 = conv_ref(&v, blk.conv2.weight.view(), blk.conv2.stride, blk.conv2.pad);
            let branch = blk.bn2.apply(&c2);
            // scatter compact branch channels into full block width
            let (bsz, _, oh, ow) = branch.dim();
            let mut widened = Array4::<F>::zeros((bsz, blk.out_width, oh, ow));
            for (j, &dst) in blk.scatter.iter().enumerate() {
                widened
                    .index_axis_mut(Axis(1), dst)
                    .assign(&branch.index_axis(Axis(1), j));
            }
            cur = relu4(&(&widened + &skip));
        }
        let pooled = global_avg_pool(&cur);
        Ok(crate::nn::linear::linear_eval(
            &pooled,
            self.fc_w.view(),
            self.fc_b.view(),
        ))
    }

    /// Total parameter count (conv + norm + classifier).
    pub fn param_count(&self) -> usize {
        let mut n = self.stem.0.weight.len() + 4 * self.stem.1.gamma.len();
        for b in &self.blocks {
            n += b.conv1.weight.len() + 4 * b.bn1.gamma.len();
            n += b.conv2.weight.len() + 4 * b.bn2.gamma.len();
            if let Some((dc, dbn)) = &b.down {
                n += dc.weight.len() + 4 * dbn.gamma.len();
            }
        }
        n + self.fc_w.len() + self.fc_b.len()
    }

    pub fn conv_param_count(&self) -> usize {
        let mut n = self.stem.0.weight.len();
        for b in &self.blocks {
            n += b.conv1.weight.len() + b.conv2.weight.len();
            if let Some((dc, _)) = &b.down {
                n += dc.weight.len();
            }
        }
        n
    }

    fn push_norm(c: &mut Container, name: &str, nm: &PrunedNorm<F>) {
        let to32 = |a: &Array1<F>| a.iter().map(|v| v.into64() as f32).collect::<Vec<_>>();
        c.push(format!("{name}.gamma"), vec![nm.gamma.len()], to32(&nm.gamma));
        c.push(format!("{name}.beta"), vec![nm.beta.len()], to32(&nm.beta));
        c.push(format!("{name}.mean"), vec![nm.mean.len()], to32(&nm.mean));
        c.push(format!("{name}.var"), vec![nm.var.len()], to32(&nm.var));
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let meta = serde_json::json!({
            "plan": self.plan,
            "provenance": self.provenance,
            "certificate": self.certificate,
            "input_channels": self.input_channels,
            "input_hw": self.input_hw,
            "num_classes": self.num_classes,
        });
        let mut c = Container::new("pruned-model", meta);
        let w32 = |a: &Array4<F>| a.iter().map(|v| v.into64() as f32).collect::<Vec<_>>();
        c.push(
            "stem.conv.w".into(),
            self.stem.0.weight.shape().to_vec(),
            w32(&self.stem.0.weight),
        );
        Self::push_norm(&mut c, "stem.bn", &self.stem.1);
        for (i, b) in self.blocks.iter().enumerate() {
            c.push(
                format!("b{i}.conv1.w"),
                b.conv1.weight.shape().to_vec(),
                w32(&b.conv1.weight),
            );
            Self::push_norm(&mut c, &format!("b{i}.bn1"), &b.bn1);
            c.push(
                format!("b{i}.conv2.w"),
                b.conv2.weight.shape().to_vec(),
                w32(&b.conv2.weight),
            );
            Self::push_norm(&mut c, &format!("b{i}.bn2"), &b.bn2);
            if let Some((dc, dbn)) = &b.down {
                c.push(
                    format!("b{i}.down.conv.w"),
                    dc.weight.shape().to_vec(),
                    w32(&dc.weight),
                );
                Self::push_norm(&mut c, &format!("b{i}.down.bn"), dbn);
            }
        }
        c.push(
            "fc.w".into(),
            self.fc_w.shape().to_vec(),
            self.fc_w.iter().map(|v| v.into64() as f32).collect(),
        );
        c.push(
            "fc.b".into(),
            vec![self.fc_b.len()],
            self.fc_b.iter().map(|v| v.into64() as f32).collect(),
        );
        c.write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<PrunedModel<F>> {
        let c = Container::read(path)?;
        if c.kind != "pruned-model" {
            return Err(Error::Format(format!(
                "{}: kind {} is not a pruned model",
                path.display(),
                c.kind
            )));
        }
        let meta = c.meta.clone();
        let plan: PruningPlan = serde_json::from_value(meta["plan"].clone())
            .map_err(|e| Error::Format(format!("plan block: {e}")))?;
        let provenance: Provenance = serde_json::from_value(meta["provenance"].clone())
            .map_err(|e| Error::Format(format!("provenance block: {e}")))?;
        let certificate: Certificate = serde_json::from_value(meta["certificate"].clone())
            .map_err(|e| Error::Format(format!("certificate block: {e}")))?;
        let input_channels = meta["input_channels"].as_u64().unwrap_or(0) as usize;
        let input_hw: (usize, usize) = serde_json::from_value(meta["input_hw"].clone())
            .map_err(|e| Error::Format(format!("input_hw: {e}")))?;
        let num_classes = meta["num_classes"].as_u64().unwrap_or(0) as usize;
        let map = c.tensor_map();
        let get4 = |name: &str| -> Result<Array4<F>> {
            let (shape, data) = map
                .get(name)
                .ok_or_else(|| Error::Format(format!("tensor {name} missing")))?;
            if shape.len() != 4 {
                return Err(Error::Format(format!("tensor {name} is not 4-d")));
            }
            let arr = Array4::from_shape_vec(
                (shape[0], shape[1], shape[2], shape[3]),
                data.iter().map(|&v| F::from64(v as f64)).collect(),
            )
            .map_err(|e| Error::Format(format!("tensor {name}: {e}")))?;
            Ok(arr)
        };
        let get1 = |name: &str| -> Result<Array1<F>> {
            let (_, data) = map
                .get(name)
                .ok_or_else(|| Error::Format(format!("tensor {name} missing")))?;
            Ok(Array1::from_iter(data.iter().map(|&v| F::from64(v as f64))))
        };
        let get_norm = |name: &str| -> Result<PrunedNorm<F>> {
            Ok(PrunedNorm {
                gamma: get1(&format!("{name}.gamma"))?,
                beta: get1(&format!("{name}.beta"))?,
                mean: get1(&format!("{name}.mean"))?,
                var: get1(&format!("{name}.var"))?,
                eps: F::from64(1e-5),
            })
        };
        // block structure comes from the plan
        let mut blocks = Vec::new();
        let mut i = 0usize;
        loop {
            let c1name = format!("b{i}.conv1.w");
            if !map.contains_key(&c1name) {
                break;
            }
            let l1 = plan
                .layers
                .iter()
                .find(|l| l.name == format!("b{i}.conv1"))
                .ok_or_else(|| Error::Format(format!("plan missing b{i}.conv1")))?;
            let l2 = plan
                .layers
                .iter()
                .find(|l| l.name == format!("b{i}.conv2"))
                .ok_or_else(|| Error::Format(format!("plan missing b{i}.conv2")))?;
            let down = if map.contains_key(&format!("b{i}.down.conv.w")) {
                let dl = plan
                    .layers
                    .iter()
                    .find(|l| l.name == format!("b{i}.down.conv"))
                    .ok_or_else(|| Error::Format(format!("plan missing b{i}.down.conv")))?;
                Some((
                    PrunedConvLayer {
                        weight: get4(&format!("b{i}.down.conv.w"))?,
                        stride: dl.stride,
                        pad: dl.pad,
                    },
                    get_norm(&format!("b{i}.down.bn"))?,
                ))
            } else {
                None
            };
            blocks.push(PrunedBlock {
                conv1: PrunedConvLayer {
                    weight: get4(&c1name)?,
                    stride: l1.stride,
                    pad: l1.pad,
                },
                bn1: get_norm(&format!("b{i}.bn1"))?,
                conv2: PrunedConvLayer {
                    weight: get4(&format!("b{i}.conv2.w"))?,
                    stride: l2.stride,
                    pad: l2.pad,
                },
                bn2: get_norm(&format!("b{i}.bn2"))?,
                scatter: l2.scatter.clone().ok_or_else(|| {
                    Error::Format(format!("plan layer b{i}.conv2 lacks a scatter map"))
                })?,
                out_width: l2.full_out,
                down,
            });
            i += 1;
        }
        let fc_w_raw = map
            .get("fc.w")
            .ok_or_else(|| Error::Format("tensor fc.w missing".into()))?;
        let fc_w = Array2::from_shape_vec(
            (fc_w_raw.0[0], fc_w_raw.0[1]),
            fc_w_raw.1.iter().map(|&v| F::from64(v as f64)).collect(),
        )
        .map_err(|e| Error::Format(format!("fc.w: {e}")))?;
        Ok(PrunedModel {
            input_channels,
            input_hw,
            num_classes,
            stem: (
                PrunedConvLayer {
                    weight: get4("stem.conv.w")?,
                    stride: 1,
                    pad: 1,
                },
                get_norm("stem.bn")?,
            ),
            blocks,
            fc_w,
            fc_b: get1("fc.b")?,
            plan,
            provenance,
            certificate,
        })
    }
}
