//! The channel-gated residual classifier.
//!
//! Small three-stage residual network: stem conv, `blocks_per_stage` basic
//! blocks per stage (stride-2 transition at each new stage), global average
//! pool, linear classifier. Both convolutions inside every residual block may
//! carry a gate module; the stem, the downsample projections, and the
//! classifier are never gated so the skip path keeps full width.
//!
//! Gate placement inside a block:
//!
//! ```text
//! x -> conv1 -> bn1 -> *gate1(x) -> relu -> conv2 -> bn2 -> *gate2(v) -+-> relu -> out
//!  \__________________________ skip (identity or 1x1 conv + bn) ______/
//! ```
//!
//! Masked channels are exactly zero after the gate multiply, which is what
//! makes physical channel removal an equivalence-preserving transform.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{
    apply_gate, apply_gate_backward, GateCache, GateDecision, GateKind, GateModule, GateNoise,
    LayerSpec,
};
use crate::nn::ops::{
    global_avg_pool, global_avg_pool_backward, relu4, relu4_backward, softmax_cross_entropy,
};
use crate::nn::param::{Param, ParamGroup};
use crate::nn::{conv_ref, norm, BatchNorm2d, Bn2dCache, Conv2d, ConvCache, Linear, LinearCache, Scalar};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub input_hw: (usize, usize),
    pub num_classes: usize,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub gated: bool,
    #[serde(default = "default_gate_hidden")]
    pub gate_hidden: usize,
    #[serde(default = "default_gate_temperature")]
    pub gate_temperature: f64,
    #[serde(default = "default_gate_open_bias")]
    pub gate_open_bias: f64,
}

fn default_gate_hidden() -> usize {
    16
}
fn default_gate_temperature() -> f64 {
    1.0
}
fn default_gate_open_bias() -> f64 {
    2.0
}

impl ModelSpec {
    /// Desk-scale default: 3 stages, 2 blocks each, widths 16/32/64.
    pub fn desk(num_classes: usize, gated: bool) -> Self {
        ModelSpec {
            input_channels: 3,
            input_hw: (16, 16),
            num_classes,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            gated,
            gate_hidden: default_gate_hidden(),
            gate_temperature: default_gate_temperature(),
            gate_open_bias: default_gate_open_bias(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.blocks_per_stage == 0 {
            return Err(Error::Config("model needs at least one stage and block".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.gate_temperature <= 0.0 {
            return Err(Error::Config("gate temperature must be positive".into()));
        }
        Ok(())
    }
}

pub struct Block<F: Scalar> {
    pub conv1: Conv2d<F>,
    pub bn1: BatchNorm2d<F>,
    pub gate1: Option<GateModule<F>>,
    pub conv2: Conv2d<F>,
    pub bn2: BatchNorm2d<F>,
    pub gate2: Option<GateModule<F>>,
    pub down: Option<(Conv2d<F>, BatchNorm2d<F>)>,
    pub lid1: Option<usize>,
    pub lid2: Option<usize>,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

pub struct GatedModel<F: Scalar> {
    pub spec: ModelSpec,
    pub stem_conv: Conv2d<F>,
    pub stem_bn: BatchNorm2d<F>,
    pub blocks: Vec<Block<F>>,
    pub fc: Linear<F>,
    /// Registry of gated convolution layers, indexed by layer id.
    pub layers: Vec<LayerSpec>,
    forward_count: AtomicU64,
}

/// Which value multiplies the conv output during a training forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainKind {
    /// Hard binary sample forward, relaxed gradients (straight-through).
    HardSt,
    /// Continuous relaxed forward; used by gradient verification.
    Relaxed,
}

/// Per-gate noise for a training forward.
pub enum ModelNoise<'a> {
    Sample(&'a mut ChaCha8Rng),
    /// One (B, m, 2) standard-Gumbel array per gated layer, by layer id.
    Frozen(&'a [Array3<f64>]),
}

struct GateStep<F> {
    cache: GateCache<F>,
    gate_vec: Array2<F>,
    pre_mask: Array4<F>,
    layer_id: usize,
}

struct BlockCache<F> {
    c1: ConvCache<F>,
    bn1: Bn2dCache<F>,
    g1: Option<GateStep<F>>,
    v: Array4<F>,
    c2: ConvCache<F>,
    bn2: Bn2dCache<F>,
    g2: Option<GateStep<F>>,
    downc: Option<(ConvCache<F>, Bn2dCache<F>)>,
    out: Array4<F>,
}

pub struct ModelCache<F> {
    stem_c: ConvCache<F>,
    stem_bn: Bn2dCache<F>,
    stem_out: Array4<F>,
    blocks: Vec<BlockCache<F>>,
    fc: LinearCache<F>,
    final_hw: (usize, usize),
}

pub struct TrainForward<F> {
    pub logits: Array2<F>,
    /// Decisions for every gated layer, ordered by layer id.
    pub decisions: Vec<GateDecision<F>>,
    pub cache: ModelCache<F>,
}

impl<F: Scalar> GatedModel<F> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = crate::rng::seeded(seed);
        let w0 = spec.stage_widths[0];
        let stem_conv = Conv2d::new(
            "stem.conv.w",
            spec.input_channels,
            w0,
            3,
            1,
            1,
            ParamGroup::Network,
            &mut rng,
        );
        let stem_bn = BatchNorm2d::new("stem.bn", w0, ParamGroup::Network);
        let mut blocks = Vec::new();
        let mut layers = Vec::new();
        let mut in_w = w0;
        let mut hw = spec.input_hw;
        let mut next_layer_id = 0usize;
        let mut bidx = 0usize;
        for (si, &width) in spec.stage_widths.iter().enumerate() {
            for bi in 0..spec.blocks_per_stage {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("b{bidx}");
                let conv1 = Conv2d::new(
                    &format!("{name}.conv1.w"),
                    in_w,
                    width,
                    3,
                    stride,
                    1,
                    ParamGroup::Network,
                    &mut rng,
                );
                let out_hw = conv1.out_hw(hw);
                let bn1 = BatchNorm2d::new(&format!("{name}.bn1"), width, ParamGroup::Network);
                let (gate1, lid1) = if spec.gated {
                    let id = next_layer_id;
                    next_layer_id += 1;
                    layers.push(LayerSpec {
                        layer_id: id,
                        in_channels: in_w,
                        out_channels: width,
                        spatial: hw,
                        gated: true,
                    });
                    (
                        Some(GateModule::new(
                            &format!("{name}.gate1"),
                            id,
                            in_w,
                            width,
                            spec.gate_hidden,
                            spec.gate_temperature,
                            spec.gate_open_bias,
                            &mut rng,
                        )?),
                        Some(id),
                    )
                } else {
                    (None, None)
                };
                let conv2 = Conv2d::new(
                    &format!("{name}.conv2.w"),
                    width,
                    width,
                    3,
                    1,
                    1,
                    ParamGroup::Network,
                    &mut rng,
                );
                let bn2 = BatchNorm2d::new(&format!("{name}.bn2"), width, ParamGroup::Network);
                let (gate2, lid2) = if spec.gated {
                    let id = next_layer_id;
                    next_layer_id += 1;
                    layers.push(LayerSpec {
                        layer_id: id,
                        in_channels: width,
                        out_channels: width,
                        spatial: out_hw,
                        gated: true,
                    });
                    (
                        Some(GateModule::new(
                            &format!("{name}.gate2"),
                            id,
                            width,
                            width,
                            spec.gate_hidden,
                            spec.gate_temperature,
                            spec.gate_open_bias,
                            &mut rng,
                        )?),
                        Some(id),
                    )
                } else {
                    (None, None)
                };
                let down = if stride != 1 || in_w != width {
                    let dconv = Conv2d::new(
                        &format!("{name}.down.conv.w"),
                        in_w,
                        width,
                        1,
                        stride,
                        0,
                        ParamGroup::Network,
                        &mut rng,
                    );
                    let dbn = BatchNorm2d::new(&format!("{name}.down.bn"), width, ParamGroup::Network);
                    Some((dconv, dbn))
                } else {
                    None
                };
                blocks.push(Block {
                    conv1,
                    bn1,
                    gate1,
                    conv2,
                    bn2,
                    gate2,
                    down,
                    lid1,
                    lid2,
                    in_hw: hw,
                    out_hw,
                });
                in_w = width;
                hw = out_hw;
                bidx += 1;
            }
        }
        let fc = Linear::new("fc", in_w, spec.num_classes, ParamGroup::Network, &mut rng);
        Ok(GatedModel {
            spec,
            stem_conv,
            stem_bn,
            blocks,
            fc,
            layers,
            forward_count: AtomicU64::new(0),
        })
    }

    pub fn gated_layer_ids(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.layer_id).collect()
    }

    /// Number of forward passes executed through the full model. Used to
    /// assert that prototype-mode evaluation leaves the full model untouched
    /// after enrollment and pruning.
    pub fn forward_count(&self) -> u64 {
        self.forward_count.load(Ordering::Relaxed)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v: Vec<&mut Param<F>> = Vec::new();
        v.push(&mut self.stem_conv.weight);
        v.push(&mut self.stem_bn.gamma);
        v.push(&mut self.stem_bn.beta);
        for b in &mut self.blocks {
            v.push(&mut b.conv1.weight);
            v.push(&mut b.bn1.gamma);
            v.push(&mut b.bn1.beta);
            if let Some(g) = &mut b.gate1 {
                v.extend(g.params_mut());
            }
            v.push(&mut b.conv2.weight);
            v.push(&mut b.bn2.gamma);
            v.push(&mut b.bn2.beta);
            if let Some(g) = &mut b.gate2 {
                v.extend(g.params_mut());
            }
            if let Some((dc, dbn)) = &mut b.down {
                v.push(&mut dc.weight);
                v.push(&mut dbn.gamma);
                v.push(&mut dbn.beta);
            }
        }
        v.push(&mut self.fc.weight);
        v.push(&mut self.fc.bias);
        v
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Count of parameters whose name marks them as gate-module parameters.
    pub fn gate_param_count(&mut self) -> usize {
        self.params_mut()
            .iter()
            .filter(|p| p.group == ParamGroup::Gate)
            .map(|p| p.numel())
            .sum()
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.input_channels || (h, w) != self.spec.input_hw {
            return Err(Error::Contract(format!(
                "input shape ({c},{h},{w}) does not match model ({}, {:?})",
                self.spec.input_channels, self.spec.input_hw
            )));
        }
        Ok(())
    }

    /// Training forward. Returns logits, per-layer gate decisions, and the
    /// cache for `backward_train`. `update_running` controls batch-norm
    /// running-statistic updates (off for gradient probes).
    pub fn forward_train(
        &mut self,
        x: &Array4<F>,
        kind: TrainKind,
        noise: &mut ModelNoise<'_>,
        update_running: bool,
    ) -> Result<TrainForward<F>> {
        self.check_input(x)?;
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let gkind = match kind {
            TrainKind::HardSt => GateKind::HardSt,
            TrainKind::Relaxed => GateKind::Relaxed,
        };
        let (s, stem_c) = self.stem_conv.forward_cached(x);
        let (sb, stem_bnc) = self.stem_bn.forward_train(&s, update_running);
        let stem_out = relu4(&sb);
        let mut cur = stem_out.clone();
        let mut decisions: Vec<GateDecision<F>> = Vec::new();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &mut self.blocks {
            let x_in = cur;
            // skip path
            let downc;
            let skip = match &mut b.down {
                Some((dc, dbn)) => {
                    let (d, dcc) = dc.forward_cached(&x_in);
                    let (db, dbnc) = dbn.forward_train(&d, update_running);
                    downc = Some((dcc, dbnc));
                    db
                }
                None => {
                    downc = None;
                    x_in.clone()
                }
            };
            // branch
            let (c1, c1c) = b.conv1.forward_cached(&x_in);
            let (b1, bn1c) = b.bn1.forward_train(&c1, update_running);
            let (m1, g1) = match &mut b.gate1 {
                Some(g) => {
                    let (dec, gate_vec, gc) =
                        gate_step(g, &x_in, gkind, noise, update_running)?;
                    let masked = apply_gate(&b1, &gate_vec)?;
                    decisions.push(dec);
                    (
                        masked,
                        Some(GateStep {
                            cache: gc,
                            gate_vec,
                            pre_mask: b1,
                            layer_id: b.lid1.unwrap(),
                        }),
                    )
                }
                None => (b1, None),
            };
            let v = relu4(&m1);
            let (c2, c2c) = b.conv2.forward_cached(&v);
            let (b2, bn2c) = b.bn2.forward_train(&c2, update_running);
            let (m2, g2) = match &mut b.gate2 {
                Some(g) => {
                    let (dec, gate_vec, gc) = gate_step(g, &v, gkind, noise, update_running)?;
                    let masked = apply_gate(&b2, &gate_vec)?;
                    decisions.push(dec);
                    (
                        masked,
                        Some(GateStep {
                            cache: gc,
                            gate_vec,
                            pre_mask: b2,
                            layer_id: b.lid2.unwrap(),
                        }),
                    )
                }
                None => (b2, None),
            };
            let sum = &m2 + &skip;
            let out = relu4(&sum);
            cur = out.clone();
            caches.push(BlockCache {
                c1: c1c,
                bn1: bn1c,
                g1,
                v,
                c2: c2c,
                bn2: bn2c,
                g2,
                downc,
                out,
            });
        }
        let final_hw = self.blocks.last().map(|b| b.out_hw).unwrap_or(self.spec.input_hw);
        let pooled = global_avg_pool(&cur);
        let (logits, fcc) = self.fc.forward_cached(&pooled);
        decisions.sort_by_key(|d| d.layer_id);
        Ok(TrainForward {
            logits,
            decisions,
            cache: ModelCache {
                stem_c,
                stem_bn: stem_bnc,
                stem_out,
                blocks: caches,
                fc: fcc,
                final_hw,
            },
        })
    }

    /// Backward pass. `gate_grads` carries extra dL/dz contributions from the
    /// gate regularization losses, keyed by layer id; they are added to the
    /// task-path gradients before each gate's backward.
    pub fn backward_train(
        &mut self,
        cache: &ModelCache<F>,
        dlogits: &Array2<F>,
        gate_grads: Option<&BTreeMap<usize, Array2<F>>>,
    ) {
        let dpooled = self.fc.backward(&cache.fc, dlogits);
        let mut dcur = global_avg_pool_backward(&dpooled, cache.final_hw);
        for (b, bc) in self.blocks.iter_mut().zip(cache.blocks.iter()).rev() {
            let dsum = relu4_backward(&dcur, &bc.out);
            // branch side
            let (db2, dz2) = match &bc.g2 {
                Some(gs) => {
                    let (db2, mut dz) = apply_gate_backward(&dsum, &gs.pre_mask, &gs.gate_vec);
                    if let Some(extra) = gate_grads.and_then(|g| g.get(&gs.layer_id)) {
                        dz += extra;
                    }
                    (db2, Some(dz))
                }
                None => (dsum.clone(), None),
            };
            let dc2 = b.bn2.backward(&bc.bn2, &db2);
            let mut dv = b.conv2.backward(&bc.c2, &dc2);
            if let (Some(gs), Some(dz)) = (&bc.g2, dz2) {
                let dxg = b.gate2.as_mut().unwrap().backward(&gs.cache, &dz);
                dv += &dxg;
            }
            let dm1 = relu4_backward(&dv, &bc.v);
            let (db1, dz1) = match &bc.g1 {
                Some(gs) => {
                    let (db1, mut dz) = apply_gate_backward(&dm1, &gs.pre_mask, &gs.gate_vec);
                    if let Some(extra) = gate_grads.and_then(|g| g.get(&gs.layer_id)) {
                        dz += extra;
                    }
                    (db1, Some(dz))
                }
                None => (dm1, None),
            };
            let dc1 = b.bn1.backward(&bc.bn1, &db1);
            let mut dx = b.conv1.backward(&bc.c1, &dc1);
            if let (Some(gs), Some(dz)) = (&bc.g1, dz1) {
                let dxg = b.gate1.as_mut().unwrap().backward(&gs.cache, &dz);
                dx += &dxg;
            }
            // skip side
            match (&mut b.down, &bc.downc) {
                (Some((dc, dbn)), Some((dcc, dbnc))) => {
                    let dd = dbn.backward(dbnc, &dsum);
                    let dxd = dc.backward(dcc, &dd);
                    dx += &dxd;
                }
                _ => {
                    dx += &dsum;
                }
            }
            dcur = dx;
        }
        let dstem = relu4_backward(&dcur, &cache.stem_out);
        let dsc = self.stem_bn.backward(&cache.stem_bn, &dstem);
        let _ = self.stem_conv.backward(&cache.stem_c, &dsc);
    }

    /// Deterministic gated evaluation ("single" inference): every input
    /// selects its own channels through eval-mode gates.
    pub fn forward_eval_gated(&self, x: &Array4<F>) -> Result<(Array2<F>, Vec<GateDecision<F>>)> {
        if !self.spec.gated {
            return Err(Error::Contract("model has no gates".into()));
        }
        self.check_input(x)?;
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let mut cur = relu4(&self.stem_bn.forward_eval(&self.stem_conv.forward(x)));
        let mut decisions = Vec::new();
        for b in &self.blocks {
            let x_in = cur;
            let skip = match &b.down {
                Some((dc, dbn)) => dbn.forward_eval(&dc.forward(&x_in)),
                None => x_in.clone(),
            };
            let d1 = b.gate1.as_ref().unwrap().forward_eval(&x_in)?;
            let b1 = b.bn1.forward_eval(&b.conv1.forward(&x_in));
            let m1 = apply_gate(&b1, &d1.hard)?;
            decisions.push(d1);
            let v = relu4(&m1);
            let d2 = b.gate2.as_ref().unwrap().forward_eval(&v)?;
            let b2 = b.bn2.forward_eval(&b.conv2.forward(&v));
            let m2 = apply_gate(&b2, &d2.hard)?;
            decisions.push(d2);
            cur = relu4(&(&m2 + &skip));
        }
        let pooled = global_avg_pool(&cur);
        let logits = self.fc.forward(&pooled);
        decisions.sort_by_key(|d| d.layer_id);
        Ok((logits, decisions))
    }

    /// Plain evaluation for ungated models.
    pub fn forward_eval_vanilla(&self, x: &Array4<F>) -> Result<Array2<F>> {
        if self.spec.gated {
            return Err(Error::Contract(
                "gated model requires gated or masked evaluation".into(),
            ));
        }
        self.check_input(x)?;
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let mut cur = relu4(&self.stem_bn.forward_eval(&self.stem_conv.forward(x)));
        for b in &self.blocks {
            let x_in = cur;
            let skip = match &b.down {
                Some((dc, dbn)) => dbn.forward_eval(&dc.forward(&x_in)),
                None => x_in.clone(),
            };
            let v = relu4(&b.bn1.forward_eval(&b.conv1.forward(&x_in)));
            let m2 = b.bn2.forward_eval(&b.conv2.forward(&v));
            cur = relu4(&(&m2 + &skip));
        }
        let pooled = global_avg_pool(&cur);
        Ok(self.fc.forward(&pooled))
    }

    /// Reference evaluation with fixed per-layer channel masks in place of
    /// gates, built on the sequential-order convolution. This is the oracle
    /// side of the pruning equivalence certificate.
    pub fn forward_masked_ref(
        &self,
        x: &Array4<F>,
        masks: &BTreeMap<usize, Array1<F>>,
    ) -> Result<Array2<F>> {
        self.check_input(x)?;
        for l in &self.layers {
            match masks.get(&l.layer_id) {
                None => {
                    return Err(Error::Contract(format!(
                        "mask missing for gated layer {}",
                        l.layer_id
                    )))
                }
                Some(m) if m.len() != l.out_channels => {
                    return Err(Error::Contract(format!(
                        "mask for layer {} has {} entries, expected {}",
                        l.layer_id,
                        m.len(),
                        l.out_channels
                    )))
                }
                _ => {}
            }
        }
        self.forward_count.fetch_add(1, Ordering::Relaxed);
        let stem = conv_ref(x, self.stem_conv.weight4_view(), 1, 1);
        let (sc, sh) = self.stem_bn.eval_affine();
        let mut cur = relu4(&norm::apply_affine_2d(&stem, &sc, &sh));
        for b in &self.blocks {
            let x_in = cur;
            let skip = match &b.down {
                Some((dc, dbn)) => {
                    let d = conv_ref(&x_in, dc.weight4_view(), dc.stride, dc.pad);
                    let (s, h) = dbn.eval_affine();
                    norm::apply_affine_2d(&d, &s, &h)
                }
                None => x_in.clone(),
            };
            let c1 = conv_ref(&x_in, b.conv1.weight4_view(), b.conv1.stride, b.conv1.pad);
            let (s1, h1) = b.bn1.eval_affine();
            let mut m1 = norm::apply_affine_2d(&c1, &s1, &h1);
            if let Some(id) = b.lid1 {
                mask_channels(&mut m1, &masks[&id]);
            }
            let v = relu4(&m1);
            let c2 = conv_ref(&v, b.conv2.weight4_view(), b.conv2.stride, b.conv2.pad);
            let (s2, h2) = b.bn2.eval_affine();
            let mut m2 = norm::apply_affine_2d(&c2, &s2, &h2);
            if let Some(id) = b.lid2 {
                mask_channels(&mut m2, &masks[&id]);
            }
            cur = relu4(&(&m2 + &skip));
        }
        let pooled = global_avg_pool(&cur);
        Ok(crate::nn::linear::linear_eval(
            &pooled,
            self.fc.weight2_view(),
            self.fc.bias1_view(),
        ))
    }

    /// Convenience: mean cross-entropy and logit gradient for a batch.
    pub fn task_loss(logits: &Array2<F>, labels: &[usize]) -> (f64, Array2<F>) {
        softmax_cross_entropy(logits, labels)
    }

    /// Named tensors (parameters then normalization buffers) in a stable
    /// order, as f32 for serialization.
    pub fn named_tensors(&mut self) -> Vec<(String, Vec<usize>, Vec<f32>)> {
        let mut out = Vec::new();
        for p in self.params_mut() {
            out.push((
                p.name.clone(),
                p.value.shape().to_vec(),
                p.value.iter().map(|v| v.into64() as f32).collect(),
            ));
        }
        for (name, buf) in self.named_buffers() {
            out.push((name, vec![buf.len()], buf));
        }
        out
    }

    fn named_buffers(&self) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        let push_bn2 = |name: &str, bn: &BatchNorm2d<F>, out: &mut Vec<(String, Vec<f32>)>| {
            out.push((
                format!("{name}.running_mean"),
                bn.running_mean.iter().map(|v| v.into64() as f32).collect(),
            ));
            out.push((
                format!("{name}.running_var"),
                bn.running_var.iter().map(|v| v.into64() as f32).collect(),
            ));
        };
        push_bn2("stem.bn", &self.stem_bn, &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            push_bn2(&format!("b{i}.bn1"), &b.bn1, &mut out);
            push_bn2(&format!("b{i}.bn2"), &b.bn2, &mut out);
            if let Some(g) = &b.gate1 {
                out.push((
                    format!("b{i}.gate1.bn.running_mean"),
                    g.bn.running_mean.iter().map(|v| v.into64() as f32).collect(),
                ));
                out.push((
                    format!("b{i}.gate1.bn.running_var"),
                    g.bn.running_var.iter().map(|v| v.into64() as f32).collect(),
                ));
            }
            if let Some(g) = &b.gate2 {
                out.push((
                    format!("b{i}.gate2.bn.running_mean"),
                    g.bn.running_mean.iter().map(|v| v.into64() as f32).collect(),
                ));
                out.push((
                    format!("b{i}.gate2.bn.running_var"),
                    g.bn.running_var.iter().map(|v| v.into64() as f32).collect(),
                ));
            }
            if let Some((_, dbn)) = &b.down {
                push_bn2(&format!("b{i}.down.bn"), dbn, &mut out);
            }
        }
        out
    }

    /// Load tensors by name. With `allow_missing_gates`, gate-module tensors
    /// absent from the map keep their fresh initialization (used when seeding
    /// a gated model from an ungated pretrained checkpoint).
    pub fn load_named_tensors(
        &mut self,
        tensors: &BTreeMap<String, (Vec<usize>, Vec<f32>)>,
        allow_missing_gates: bool,
    ) -> Result<()> {
        let mut used = 0usize;
        for p in self.params_mut() {
            match tensors.get(&p.name) {
                Some((shape, data)) => {
                    if shape != &p.value.shape().to_vec() {
                        return Err(Error::Format(format!(
                            "tensor {}: shape {:?} in file, model wants {:?}",
                            p.name,
                            shape,
                            p.value.shape()
                        )));
                    }
                    for (dst, src) in p.value.iter_mut().zip(data.iter()) {
                        *dst = F::from64(*src as f64);
                    }
                    used += 1;
                }
                None => {
                    if !(allow_missing_gates && p.group == ParamGroup::Gate) {
                        return Err(Error::Format(format!("tensor {} missing from file", p.name)));
                    }
                }
            }
        }
        // buffers
        let mut load_buf = |name: String, target: &mut Array1<F>, gate: bool| -> Result<()> {
            match tensors.get(&name) {
                Some((_, data)) => {
                    if data.len() != target.len() {
                        return Err(Error::Format(format!("buffer {name}: length mismatch")));
                    }
                    for (dst, src) in target.iter_mut().zip(data.iter()) {
                        *dst = F::from64(*src as f64);
                    }
                    used += 1;
                    Ok(())
                }
                None if allow_missing_gates && gate => Ok(()),
                None => Err(Error::Format(format!("buffer {name} missing from file"))),
            }
        };
        load_buf("stem.bn.running_mean".into(), &mut self.stem_bn.running_mean, false)?;
        load_buf("stem.bn.running_var".into(), &mut self.stem_bn.running_var, false)?;
        for i in 0..self.blocks.len() {
            macro_rules! bufs {
                ($field:expr, $name:expr, $gate:expr) => {
                    load_buf(format!("{}.running_mean", $name), &mut $field.running_mean, $gate)?;
                    load_buf(format!("{}.running_var", $name), &mut $field.running_var, $gate)?;
                };
            }
            let b = &mut self.blocks[i];
            bufs!(b.bn1, format!("b{i}.bn1"), false);
            bufs!(b.bn2, format!("b{i}.bn2"), false);
            if let Some(g) = &mut b.gate1 {
                bufs!(g.bn, format!("b{i}.gate1.bn"), true);
            }
            if let Some(g) = &mut b.gate2 {
                bufs!(g.bn, format!("b{i}.gate2.bn"), true);
            }
            if let Some((_, dbn)) = &mut b.down {
                bufs!(dbn, format!("b{i}.down.bn"), false);
            }
        }
        let _ = used;
        Ok(())
    }
}

fn gate_step<F: Scalar>(
    gate: &mut GateModule<F>,
    input: &Array4<F>,
    kind: GateKind,
    noise: &mut ModelNoise<'_>,
    update_running: bool,
) -> Result<(GateDecision<F>, Array2<F>, GateCache<F>)> {
    match noise {
        ModelNoise::Sample(rng) => {
            let mut n = GateNoise::Sample(rng);
            gate.forward_train(input, kind, &mut n, update_running)
        }
        ModelNoise::Frozen(arrays) => {
            let arr = arrays.get(gate.layer_id).ok_or_else(|| {
                Error::Contract(format!("no frozen noise for gate layer {}", gate.layer_id))
            })?;
            let mut n = GateNoise::Frozen(arr);
            gate.forward_train(input, kind, &mut n, update_running)
        }
    }
}

/// Multiply each channel of `x` by a constant per-layer mask entry.
pub fn mask_channels<F: Scalar>(x: &mut Array4<F>, mask: &Array1<F>) {
    let (_, c, _, _) = x.dim();
    assert_eq!(c, mask.len());
    for ci in 0..c {
        let m = mask[ci];
        x.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * m);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{loss_gate_grads, total_loss, BatchGateRecord, LossConfig};
    use crate::rng::{gumbel, normal, seeded};
    use ndarray::Array;

    fn tiny_spec(gated: bool) -> ModelSpec {
        ModelSpec {
            input_channels: 2,
            input_hw: (8, 8),
            num_classes: 3,
            stage_widths: vec![4, 6],
            blocks_per_stage: 1,
            gated,
            gate_hidden: 4,
            gate_temperature: 1.0,
            gate_open_bias: 0.5,
        }
    }

    fn batch(seed: u64, b: usize) -> Array4<f64> {
        let mut rng = seeded(seed);
        Array::from_shape_fn((b, 2, 8, 8), |_| normal(&mut rng))
    }

    fn frozen_noise(model: &GatedModel<f64>, b: usize, seed: u64) -> Vec<Array3<f64>> {
        let mut rng = seeded(seed);
        model
            .layers
            .iter()
            .map(|l| {
                let mut a = Array3::<f64>::zeros((b, l.out_channels, 2));
                for v in a.iter_mut() {
                    *v = gumbel(&mut rng);
                }
                a
            })
            .collect()
    }

    #[test]
    fn relaxed_objective_gradients_match_finite_differences() {
        let b = 5usize;
        let mut model = GatedModel::<f64>::new(tiny_spec(true), 42).unwrap();
        let x = batch(1, b);
        let labels = vec![0usize, 1, 2, 0, 1];
        let identities = vec![1u32, 1, 2, 2, 3];
        let noise = frozen_noise(&model, b, 2);
        let cfg = LossConfig {
            alpha: 10.0,
            beta: 10.0,
            tau: 0.7,
            target_rate: 0.6,
            gated_layer_ids: model.gated_layer_ids(),
        };

        let objective = |m: &mut GatedModel<f64>| -> f64 {
            let mut ns = ModelNoise::Frozen(&noise);
            let fwd = m.forward_train(&x, TrainKind::Relaxed, &mut ns, false).unwrap();
            let (task, _) = GatedModel::task_loss(&fwd.logits, &labels);
            let rec = BatchGateRecord::from_decisions(&fwd.decisions, &identities).unwrap();
            total_loss(task, &rec, &cfg).unwrap().total
        };

        // analytic gradients
        model.zero_grads();
        let mut ns = ModelNoise::Frozen(&noise);
        let fwd = model
            .forward_train(&x, TrainKind::Relaxed, &mut ns, false)
            .unwrap();
        let (_, dlogits) = GatedModel::task_loss(&fwd.logits, &labels);
        let rec = BatchGateRecord::from_decisions(&fwd.decisions, &identities).unwrap();
        let ggrads = loss_gate_grads(&rec, &cfg).unwrap();
        model.backward_train(&fwd.cache, &dlogits, Some(&ggrads));

        let h = 1e-5;
        let n_tensors = model.params_mut().len();
        let mut max_rel = 0.0f64;
        let mut worst = String::new();
        for ti in 0..n_tensors {
            let (len, name) = {
                let ps = model.params_mut();
                (ps[ti].numel(), ps[ti].name.clone())
            };
            // probe a few spread coordinates per tensor
            let probes: Vec<usize> = [0, len / 3, (2 * len) / 3, len - 1]
                .into_iter()
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            for idx in probes {
                let orig = model.params_mut()[ti].value.as_slice().unwrap()[idx];
                model.params_mut()[ti].value.as_slice_mut().unwrap()[idx] = orig + h;
                let lp = objective(&mut model);
                model.params_mut()[ti].value.as_slice_mut().unwrap()[idx] = orig - h;
                let lm = objective(&mut model);
                model.params_mut()[ti].value.as_slice_mut().unwrap()[idx] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = model.params_mut()[ti].grad.as_slice().unwrap()[idx];
                let rel = (an - fd).abs() / (fd.abs() + 1e-6);
                if rel > max_rel {
                    max_rel = rel;
                    worst = format!("{name}[{idx}]: analytic {an} fd {fd}");
                }
            }
        }
        assert!(max_rel <= 1e-3, "max relative error {max_rel} at {worst}");
    }

    #[test]
    fn zero_gradient_isolation_for_fully_off_channel() {
        let b = 4usize;
        let mut model = GatedModel::<f64>::new(tiny_spec(true), 7).unwrap();
        // force channel 2 of block 0's second gate off for every sample
        {
            let g = model.blocks[0].gate2.as_mut().unwrap();
            let m = g.out_channels;
            for r in 0..g.fc2.weight.value.shape()[0] {
                for c in 0..g.fc2.weight.value.shape()[1] {
                    g.fc2.weight.value[[r, c]] = 0.0;
                }
            }
            let _ = m;
            g.fc2.bias.value[2 * 2] = 50.0; // off logit
            g.fc2.bias.value[2 * 2 + 1] = -50.0; // on logit
        }
        let x = batch(3, b);
        let labels = vec![0usize, 1, 2, 0];
        model.zero_grads();
        let mut rng = seeded(11);
        let mut ns = ModelNoise::Sample(&mut rng);
        let fwd = model
            .forward_train(&x, TrainKind::HardSt, &mut ns, true)
            .unwrap();
        for d in &fwd.decisions {
            if d.layer_id == model.blocks[0].lid2.unwrap() {
                for bi in 0..b {
                    assert_eq!(d.hard[[bi, 2]], 0.0, "channel must be off");
                }
            }
        }
        let (_, dlogits) = GatedModel::task_loss(&fwd.logits, &labels);
        model.backward_train(&fwd.cache, &dlogits, None);
        let g = &model.blocks[0].conv2.weight.grad;
        let gv = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        for ic in 0..gv.shape()[1] {
            for kh in 0..3 {
                for kw in 0..3 {
                    assert_eq!(
                        gv[[2, ic, kh, kw]], 0.0,
                        "conv filter of a fully-off channel must receive exactly zero gradient"
                    );
                }
            }
        }
        assert_eq!(model.blocks[0].bn2.gamma.grad[2], 0.0);
        assert_eq!(model.blocks[0].bn2.beta.grad[2], 0.0);
    }

    #[test]
    fn vanilla_gemm_and_reference_paths_agree() {
        let mut model = GatedModel::<f32>::new(tiny_spec(false), 9).unwrap();
        // push some running statistics
        let mut rng = seeded(10);
        for s in 0..3 {
            let xb: Array4<f32> = {
                let mut r2 = seeded(100 + s);
                Array::from_shape_fn((6, 2, 8, 8), |_| normal(&mut r2) as f32)
            };
            let mut ns = ModelNoise::Sample(&mut rng);
            model
                .forward_train(&xb, TrainKind::HardSt, &mut ns, true)
                .unwrap();
        }
        let x: Array4<f32> = {
            let mut r2 = seeded(55);
            Array::from_shape_fn((4, 2, 8, 8), |_| normal(&mut r2) as f32)
        };
        let fast = model.forward_eval_vanilla(&x).unwrap();
        let slow = model.forward_masked_ref(&x, &BTreeMap::new()).unwrap();
        let max = (&fast - &slow).iter().fold(0f32, |a, v| a.max(v.abs()));
        assert!(max < 1e-4, "GEMM vs reference path disagree by {max}");
    }

    #[test]
    fn eval_is_deterministic_and_counts_forwards() {
        let model = GatedModel::<f32>::new(tiny_spec(true), 21).unwrap();
        let x: Array4<f32> = {
            let mut r2 = seeded(77);
            Array::from_shape_fn((2, 2, 8, 8), |_| normal(&mut r2) as f32)
        };
        let before = model.forward_count();
        let (l1, d1) = model.forward_eval_gated(&x).unwrap();
        let (l2, d2) = model.forward_eval_gated(&x).unwrap();
        assert_eq!(l1, l2);
        for (a, b) in d1.iter().zip(d2.iter()) {
            assert_eq!(a.hard, b.hard);
            assert_eq!(a.soft, b.soft);
        }
        assert_eq!(model.forward_count(), before + 2);
    }

    #[test]
    fn named_tensor_roundtrip_reproduces_outputs() {
        let mut model = GatedModel::<f32>::new(tiny_spec(true), 31).unwrap();
        let tensors = model.named_tensors();
        let map: BTreeMap<String, (Vec<usize>, Vec<f32>)> = tensors
            .into_iter()
            .map(|(n, s, d)| (n, (s, d)))
            .collect();
        let mut clone = GatedModel::<f32>::new(tiny_spec(true), 9999).unwrap();
        clone.load_named_tensors(&map, false).unwrap();
        let x: Array4<f32> = {
            let mut r2 = seeded(13);
            Array::from_shape_fn((2, 2, 8, 8), |_| normal(&mut r2) as f32)
        };
        let (a, _) = model.forward_eval_gated(&x).unwrap();
        let (b, _) = clone.forward_eval_gated(&x).unwrap();
        assert_eq!(a, b, "reloaded weights must reproduce outputs bitwise");
    }

    #[test]
    fn gated_layer_registry_matches_structure() {
        let model = GatedModel::<f32>::new(ModelSpec::desk(4, true), 1).unwrap();
        // 3 stages x 2 blocks x 2 convs
        assert_eq!(model.layers.len(), 12);
        assert_eq!(model.layers[0].in_channels, 16);
        assert_eq!(model.layers[0].out_channels, 16);
        assert_eq!(model.layers[0].spatial, (16, 16));
        // first conv of stage 2 sees 16x16 input, emits at 8x8
        let l4 = &model.layers[4];
        assert_eq!(l4.in_channels, 16);
        assert_eq!(l4.out_channels, 32);
        assert_eq!(l4.spatial, (16, 16));
        let l5 = &model.layers[5];
        assert_eq!(l5.in_channels, 32);
        assert_eq!(l5.spatial, (8, 8));
        for (i, l) in model.layers.iter().enumerate() {
            assert_eq!(l.layer_id, i, "registry ids are dense and ordered");
            assert!(l.gated);
        }
    }
}
