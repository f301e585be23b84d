//! Trainable parameter storage.

use ndarray::ArrayD;

use super::Scalar;

/// Optimizer group a parameter belongs to. Gate-module parameters train at a
/// different learning rate than the backbone network.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ParamGroup {
    Network,
    Gate,
}

/// A named tensor with its gradient and momentum buffers.
pub struct Param<F> {
    pub name: String,
    pub value: ArrayD<F>,
    pub grad: ArrayD<F>,
    pub vel: ArrayD<F>,
    pub group: ParamGroup,
    /// Whether weight decay applies (conv/linear weights yes, biases and
    /// normalization affine parameters no).
    pub decay: bool,
}

impl<F: Scalar> Param<F> {
    pub fn new(name: impl Into<String>, value: ArrayD<F>, group: ParamGroup, decay: bool) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let vel = ArrayD::zeros(value.raw_dim());
        Param {
            name: name.into(),
            value,
            grad,
            vel,
            group,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}
