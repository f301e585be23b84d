//! Fully connected layer.

use ndarray::{Array2, ArrayD, Axis};
use rand_chacha::ChaCha8Rng;

use super::param::{Param, ParamGroup};
use super::Scalar;
use crate::rng::normal;

pub struct Linear<F> {
    pub weight: Param<F>, // (out, in)
    pub bias: Param<F>,   // (out,)
    pub in_features: usize,
    pub out_features: usize,
}

pub struct LinearCache<F> {
    x: Array2<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(
        name: &str,
        in_features: usize,
        out_features: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let std = (2.0 / in_features as f64).sqrt();
        let mut w = ArrayD::<F>::zeros(vec![out_features, in_features]);
        for v in w.iter_mut() {
            *v = F::from64(normal(rng) * std);
        }
        Linear {
            weight: Param::new(format!("{name}.w"), w, group, true),
            bias: Param::new(
                format!("{name}.b"),
                ArrayD::zeros(vec![out_features]),
                group,
                false,
            ),
            in_features,
            out_features,
        }
    }

    fn w2(&self) -> ndarray::ArrayView2<'_, F> {
        self.weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
    }

    pub fn weight2_view(&self) -> ndarray::ArrayView2<'_, F> {
        self.w2()
    }

    pub fn bias1_view(&self) -> ndarray::ArrayView1<'_, F> {
        self.bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        assert_eq!(x.ncols(), self.in_features, "linear {}: input width", self.weight.name);
        let b1 = self
            .bias
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap();
        let mut y = x.dot(&self.w2().t());
        y += &b1;
        y
    }

    pub fn forward_cached(&self, x: &Array2<F>) -> (Array2<F>, LinearCache<F>) {
        let y = self.forward(x);
        (y, LinearCache { x: x.clone() })
    }

    pub fn backward(&mut self, cache: &LinearCache<F>, dy: &Array2<F>) -> Array2<F> {
        let dw = dy.t().dot(&cache.x);
        self.weight.grad += &dw.into_dyn();
        let db = dy.sum_axis(Axis(0));
        self.bias.grad += &db.into_dyn();
        dy.dot(&self.w2())
    }
}

/// Eval-mode linear transform on plain arrays (shared by the pruned model so
/// both paths run identical arithmetic).
pub fn linear_eval<F: Scalar>(
    x: &Array2<F>,
    weight: ndarray::ArrayView2<'_, F>,
    bias: ndarray::ArrayView1<'_, F>,
) -> Array2<F> {
    let mut y = x.dot(&weight.t());
    y += &bias;
    y
}
