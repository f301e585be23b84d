//! Per-channel gate modules.
//!
//! Each gated convolution carries a small companion network that maps the
//! conv's own input to one keep/drop decision per output channel. The
//! forward pass is hard binary; gradients flow through a temperature-relaxed
//! softmax sample (straight-through). In eval mode decisions are
//! deterministic: a channel stays on iff its on-probability is >= 0.5.
//!
//! Gate head: global average pool -> linear (hidden width 16 by default) ->
//! batch norm -> ReLU -> linear emitting 2 logits per output channel.

use ndarray::{Array2, Array3, Array4};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ops::{global_avg_pool, global_avg_pool_backward, relu2, relu2_backward};
use crate::nn::param::{Param, ParamGroup};
use crate::nn::{BatchNorm1d, Bn1dCache, Linear, LinearCache, Scalar};
use crate::rng::gumbel;

/// Structural description of one convolution layer in the gate registry.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub layer_id: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial size of the incoming activation (h, w).
    pub spatial: (usize, usize),
    pub gated: bool,
}

/// One gate evaluation for a batch.
///
/// `hard` is the binary keep/drop vector actually multiplied into the conv
/// output; `soft` is the deterministic on-probability (no sampling noise).
/// Gradients of anything downstream reach gate parameters only through the
/// relaxed sample kept in the forward cache, never through `hard` itself.
#[derive(Debug, Clone)]
pub struct GateDecision<F> {
    pub layer_id: usize,
    pub hard: Array2<F>,
    pub soft: Array2<F>,
}

/// Public forward mode. Train samples, eval thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Train,
    Eval,
}

/// Internal forward kind; `Relaxed` replaces the hard sample by the
/// continuous relaxation and exists for gradient verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GateKind {
    HardSt,
    Relaxed,
}

/// Noise source for train-mode forwards.
pub enum GateNoise<'a> {
    Sample(&'a mut ChaCha8Rng),
    /// Pre-drawn standard Gumbel noise of shape (B, m, 2).
    Frozen(&'a Array3<f64>),
}

pub struct GateCache<F> {
    fc1: LinearCache<F>,
    bn: Bn1dCache<F>,
    ha: Array2<F>,
    fc2: LinearCache<F>,
    /// Relaxed on-probability per (sample, channel), the gradient carrier.
    relaxed: Array2<F>,
    in_hw: (usize, usize),
}

pub struct GateModule<F> {
    pub layer_id: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub hidden: usize,
    pub temperature: F,
    pub fc1: Linear<F>,
    pub bn: BatchNorm1d<F>,
    pub fc2: Linear<F>,
}

impl<F: Scalar> GateModule<F> {
    /// `open_bias` is added to every channel's "on" logit at init so gates
    /// start mostly open and training prunes downward from there.
    pub fn new(
        name: &str,
        layer_id: usize,
        in_channels: usize,
        out_channels: usize,
        hidden: usize,
        temperature: f64,
        open_bias: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if temperature <= 0.0 {
            return Err(Error::Config(format!(
                "gate temperature must be positive, got {temperature}"
            )));
        }
        if hidden == 0 {
            return Err(Error::Config("gate hidden width must be >= 1".into()));
        }
        let mut fc1 = Linear::new(&format!("{name}.fc1"), in_channels, hidden, ParamGroup::Gate, rng);
        let bn = BatchNorm1d::new(&format!("{name}.bn"), hidden, ParamGroup::Gate);
        let mut fc2 = Linear::new(
            &format!("{name}.fc2"),
            hidden,
            2 * out_channels,
            ParamGroup::Gate,
            rng,
        );
        // no weight decay on gate parameters: decay drags the keep/drop
        // logits toward indifference and fights the utilization target
        fc1.weight.decay = false;
        fc2.weight.decay = false;
        for c in 0..out_channels {
            fc2.bias.value[2 * c + 1] = F::from64(open_bias);
        }
        Ok(GateModule {
            layer_id,
            in_channels,
            out_channels,
            hidden,
            temperature: F::from64(temperature),
            fc1,
            bn,
            fc2,
        })
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        let mut v: Vec<&mut Param<F>> = Vec::new();
        v.push(&mut self.fc1.weight);
        v.push(&mut self.fc1.bias);
        v.push(&mut self.bn.gamma);
        v.push(&mut self.bn.beta);
        v.push(&mut self.fc2.weight);
        v.push(&mut self.fc2.bias);
        v
    }

    fn logits_eval(&self, x: &Array4<F>) -> Array2<F> {
        let pooled = global_avg_pool(x);
        let h1 = self.fc1.forward(&pooled);
        let hb = self.bn.forward_eval(&h1);
        let ha = relu2(&hb);
        self.fc2.forward(&ha)
    }

    fn check_input(&self, x: &Array4<F>) -> Result<()> {
        let (_, c, _, _) = x.dim();
        if c != self.in_channels {
            return Err(Error::Contract(format!(
                "gate layer {}: expected {} input channels, got {c}",
                self.layer_id, self.in_channels
            )));
        }
        Ok(())
    }

    /// Deterministic eval-mode decision: on-probability thresholded at 0.5,
    /// ties kept.
    pub fn forward_eval(&self, x: &Array4<F>) -> Result<GateDecision<F>> {
        self.check_input(x)?;
        let logits = self.logits_eval(x);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gate logits in layer {}",
                self.layer_id
            )));
        }
        let (b, _) = logits.dim();
        let m = self.out_channels;
        let mut soft = Array2::<F>::zeros((b, m));
        let mut hard = Array2::<F>::zeros((b, m));
        let half = F::from64(0.5);
        for bi in 0..b {
            for c in 0..m {
                let diff = logits[[bi, 2 * c + 1]] - logits[[bi, 2 * c]];
                let p = F::one() / (F::one() + (-diff).exp());
                soft[[bi, c]] = p;
                hard[[bi, c]] = if p >= half { F::one() } else { F::zero() };
            }
        }
        let d = GateDecision {
            layer_id: self.layer_id,
            hard,
            soft,
        };
        assert_decision_ranges(&d);
        Ok(d)
    }

    /// Train-mode forward. Returns the decision, the vector multiplied into
    /// the conv output (hard for `HardSt`, relaxed for `Relaxed`), and the
    /// backward cache.
    pub(crate) fn forward_train(
        &mut self,
        x: &Array4<F>,
        kind: GateKind,
        noise: &mut GateNoise<'_>,
        update_running: bool,
    ) -> Result<(GateDecision<F>, Array2<F>, GateCache<F>)> {
        self.check_input(x)?;
        let (b, _, h, w) = x.dim();
        let m = self.out_channels;
        let pooled = global_avg_pool(x);
        let (h1, fc1c) = self.fc1.forward_cached(&pooled);
        let (hb, bnc) = self.bn.forward_train(&h1, update_running);
        let ha = relu2(&hb);
        let (logits, fc2c) = self.fc2.forward_cached(&ha);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gate logits in layer {}",
                self.layer_id
            )));
        }
        let g: Array3<F> = match noise {
            GateNoise::Sample(rng) => {
                let mut a = Array3::<F>::zeros((b, m, 2));
                for bi in 0..b {
                    for c in 0..m {
                        for k in 0..2 {
                            a[[bi, c, k]] = F::from64(gumbel(rng));
                        }
                    }
                }
                a
            }
            GateNoise::Frozen(a) => {
                if a.dim() != (b, m, 2) {
                    return Err(Error::Contract(format!(
                        "frozen gate noise shape {:?} does not match (batch {b}, channels {m}, 2)",
                        a.dim()
                    )));
                }
                a.mapv(F::from64)
            }
        };
        let mut soft = Array2::<F>::zeros((b, m));
        let mut hard = Array2::<F>::zeros((b, m));
        let mut relaxed = Array2::<F>::zeros((b, m));
        for bi in 0..b {
            for c in 0..m {
                let l_off = logits[[bi, 2 * c]];
                let l_on = logits[[bi, 2 * c + 1]];
                let p = F::one() / (F::one() + (l_off - l_on).exp());
                soft[[bi, c]] = p;
                let a_off = l_off + g[[bi, c, 0]];
                let a_on = l_on + g[[bi, c, 1]];
                hard[[bi, c]] = if a_on >= a_off { F::one() } else { F::zero() };
                let y = F::one() / (F::one() + ((a_off - a_on) / self.temperature).exp());
                relaxed[[bi, c]] = y;
            }
        }
        let gate_vec = match kind {
            GateKind::HardSt => hard.clone(),
            GateKind::Relaxed => relaxed.clone(),
        };
        let decision = GateDecision {
            layer_id: self.layer_id,
            hard: match kind {
                // In relaxed verification mode the decision carries the
                // continuous forward value.
                GateKind::Relaxed => relaxed.clone(),
                _ => hard,
            },
            soft,
        };
        if kind == GateKind::HardSt {
            assert_decision_ranges(&decision);
        }
        let cache = GateCache {
            fc1: fc1c,
            bn: bnc,
            ha,
            fc2: fc2c,
            relaxed,
            in_hw: (h, w),
        };
        Ok((decision, gate_vec, cache))
    }

    /// Backward from dL/d(gate vector) to dL/d(gate input); accumulates
    /// parameter gradients. The straight-through route: gradients enter at
    /// the relaxed sample regardless of whether the forward used hard values.
    pub(crate) fn backward(&mut self, cache: &GateCache<F>, d_gate: &Array2<F>) -> Array4<F> {
        let (b, m) = d_gate.dim();
        assert_eq!(m, self.out_channels);
        let mut dlogits = Array2::<F>::zeros((b, 2 * m));
        for bi in 0..b {
            for c in 0..m {
                let y = cache.relaxed[[bi, c]];
                let d_diff = d_gate[[bi, c]] * y * (F::one() - y) / self.temperature;
                dlogits[[bi, 2 * c + 1]] = d_diff;
                dlogits[[bi, 2 * c]] = -d_diff;
            }
        }
        let dha = self.fc2.backward(&cache.fc2, &dlogits);
        let dhb = relu2_backward(&dha, &cache.ha);
        let dh1 = self.bn.backward(&cache.bn, &dhb);
        let dpooled = self.fc1.backward(&cache.fc1, &dh1);
        global_avg_pool_backward(&dpooled, cache.in_hw)
    }
}

fn assert_decision_ranges<F: Scalar>(d: &GateDecision<F>) {
    for &h in d.hard.iter() {
        assert!(
            h == F::zero() || h == F::one(),
            "gate hard output must be binary"
        );
    }
    for &s in d.soft.iter() {
        assert!(
            s >= F::zero() && s <= F::one(),
            "gate soft output must lie in [0,1]"
        );
    }
}

/// Public train/eval entry matching the per-layer gating contract.
pub fn gate_forward<F: Scalar>(
    activation: &Array4<F>,
    gate: &mut GateModule<F>,
    mode: GateMode,
    rng: &mut ChaCha8Rng,
) -> Result<GateDecision<F>> {
    match mode {
        GateMode::Eval => gate.forward_eval(activation),
        GateMode::Train => {
            let mut noise = GateNoise::Sample(rng);
            let (d, _, _) = gate.forward_train(activation, GateKind::HardSt, &mut noise, true)?;
            Ok(d)
        }
    }
}

/// Multiply each output channel by its gate value.
pub fn apply_gate<F: Scalar>(conv_out: &Array4<F>, gate_vec: &Array2<F>) -> Result<Array4<F>> {
    let (b, c, _, _) = conv_out.dim();
    if gate_vec.dim() != (b, c) {
        return Err(Error::Contract(format!(
            "apply_gate: conv output has {b}x{c} sample/channel layout, gate vector is {:?}",
            gate_vec.dim()
        )));
    }
    let mut y = conv_out.clone();
    for bi in 0..b {
        for ci in 0..c {
            let g = gate_vec[[bi, ci]];
            y.index_axis_mut(ndarray::Axis(0), bi)
                .index_axis_mut(ndarray::Axis(0), ci)
                .mapv_inplace(|v| v * g);
        }
    }
    Ok(y)
}

/// Gradients of `apply_gate`: masked gradient to the conv output, and the
/// per-channel inner product as the gate-vector gradient.
pub fn apply_gate_backward<F: Scalar>(
    dout: &Array4<F>,
    conv_out: &Array4<F>,
    gate_vec: &Array2<F>,
) -> (Array4<F>, Array2<F>) {
    let (b, c, _, _) = conv_out.dim();
    let mut dx = dout.clone();
    let mut dgate = Array2::<F>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let g = gate_vec[[bi, ci]];
            let dplane = dout.index_axis(ndarray::Axis(0), bi);
            let dplane = dplane.index_axis(ndarray::Axis(0), ci);
            let xplane = conv_out.index_axis(ndarray::Axis(0), bi);
            let xplane = xplane.index_axis(ndarray::Axis(0), ci);
            let mut s = F::zero();
            for (dv, xv) in dplane.iter().zip(xplane.iter()) {
                s = s + *dv * *xv;
            }
            dgate[[bi, ci]] = s;
            dx.index_axis_mut(ndarray::Axis(0), bi)
                .index_axis_mut(ndarray::Axis(0), ci)
                .mapv_inplace(|v| v * g);
        }
    }
    (dx, dgate)
}

/// Verify the straight-through estimator: with frozen sampling noise, the
/// analytic gradient of a quadratic objective of the relaxed gate output must
/// match central finite differences over every gate parameter.
///
/// Returns the maximum relative error. Runs in f64.
pub fn straight_through_grad_check(
    gate: &mut GateModule<f64>,
    probe: &Array4<f64>,
    seed: u64,
) -> Result<f64> {
    let (b, _, _, _) = probe.dim();
    let m = gate.out_channels;
    let mut rng = crate::rng::seeded(seed);
    let mut noise = Array3::<f64>::zeros((b, m, 2));
    for v in noise.iter_mut() {
        *v = gumbel(&mut rng);
    }
    let mut lin_w = Array2::<f64>::zeros((b, m));
    let mut quad_w = Array2::<f64>::zeros((b, m));
    for v in lin_w.iter_mut() {
        *v = crate::rng::normal(&mut rng);
    }
    for v in quad_w.iter_mut() {
        *v = crate::rng::normal(&mut rng);
    }

    let objective = |gate: &mut GateModule<f64>| -> Result<f64> {
        let mut ns = GateNoise::Frozen(&noise);
        let (_, y, _) = gate.forward_train(probe, GateKind::Relaxed, &mut ns, false)?;
        let mut l = 0.0;
        for bi in 0..b {
            for c in 0..m {
                let v = y[[bi, c]];
                l += lin_w[[bi, c]] * v + 0.5 * quad_w[[bi, c]] * v * v;
            }
        }
        Ok(l)
    };

    // analytic gradients
    for p in gate.params_mut() {
        p.zero_grad();
    }
    let mut ns = GateNoise::Frozen(&noise);
    let (_, y, cache) = gate.forward_train(probe, GateKind::Relaxed, &mut ns, false)?;
    let mut d_gate = Array2::<f64>::zeros((b, m));
    for bi in 0..b {
        for c in 0..m {
            d_gate[[bi, c]] = lin_w[[bi, c]] + quad_w[[bi, c]] * y[[bi, c]];
        }
    }
    gate.backward(&cache, &d_gate);

    // finite differences over every parameter coordinate
    let h = 1e-4;
    let mut max_rel = 0.0f64;
    let n_params = gate.params_mut().len();
    for pi in 0..n_params {
        let count = gate.params_mut()[pi].numel();
        for i in 0..count {
            let orig = gate.params_mut()[pi].value.as_slice().unwrap()[i];
            gate.params_mut()[pi].value.as_slice_mut().unwrap()[i] = orig + h;
            let lp = objective(gate)?;
            gate.params_mut()[pi].value.as_slice_mut().unwrap()[i] = orig - h;
            let lm = objective(gate)?;
            gate.params_mut()[pi].value.as_slice_mut().unwrap()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = gate.params_mut()[pi].grad.as_slice().unwrap()[i];
            let rel = (an - fd).abs() / (fd.abs() + 1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
