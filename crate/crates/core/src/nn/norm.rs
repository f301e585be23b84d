//! Batch normalization over NCHW feature maps (2d) and plain feature vectors
//! (1d, used inside gate modules).

use ndarray::{Array1, Array2, Array4, ArrayD, Axis};

use super::param::{Param, ParamGroup};
use super::Scalar;

pub struct BatchNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub channels: usize,
    pub eps: F,
    pub momentum: F,
}

pub struct Bn2dCache<F> {
    xhat: Array4<F>,
    inv_std: Array1<F>,
    n: usize,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(name: &str, channels: usize, group: ParamGroup) -> Self {
        BatchNorm2d {
            gamma: Param::new(
                format!("{name}.gamma"),
                ArrayD::ones(vec![channels]),
                group,
                false,
            ),
            beta: Param::new(
                format!("{name}.beta"),
                ArrayD::zeros(vec![channels]),
                group,
                false,
            ),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            channels,
            eps: F::from64(1e-5),
            momentum: F::from64(0.1),
        }
    }

    fn gamma1(&self) -> Array1<F> {
        self.gamma
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned()
    }

    fn beta1(&self) -> Array1<F> {
        self.beta
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned()
    }

    /// Training forward with batch statistics. `update_running` is false for
    /// gradient-check probes so repeated evaluations don't mutate state.
    pub fn forward_train(&mut self, x: &Array4<F>, update_running: bool) -> (Array4<F>, Bn2dCache<F>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let n = b * h * w;
        let nf = F::from64(n as f64);
        let mut mean = Array1::<F>::zeros(c);
        let mut var = Array1::<F>::zeros(c);
        for ci in 0..c {
            let ch = x.index_axis(Axis(1), ci);
            let s = ch.iter().fold(F::zero(), |a, &v| a + v);
            let m = s / nf;
            let v2 = ch.iter().fold(F::zero(), |a, &v| a + (v - m) * (v - m));
            mean[ci] = m;
            var[ci] = v2 / nf;
        }
        if update_running {
            let mom = self.momentum;
            let one = F::one();
            // unbiased variance for the running buffer
            let unbias = if n > 1 {
                F::from64(n as f64 / (n as f64 - 1.0))
            } else {
                F::one()
            };
            for ci in 0..c {
                self.running_mean[ci] = (one - mom) * self.running_mean[ci] + mom * mean[ci];
                self.running_var[ci] = (one - mom) * self.running_var[ci] + mom * var[ci] * unbias;
            }
        }
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let gamma = self.gamma1();
        let beta = self.beta1();
        let mut xhat = x.clone();
        let mut y = Array4::<F>::zeros(x.raw_dim());
        for ci in 0..c {
            let m = mean[ci];
            let is = inv_std[ci];
            let g = gamma[ci];
            let bta = beta[ci];
            let mut xh = xhat.index_axis_mut(Axis(1), ci);
            let mut yy = y.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut xh).and(&mut yy).for_each(|xv, yv| {
                let h = (*xv - m) * is;
                *xv = h;
                *yv = g * h + bta;
            });
        }
        (y, Bn2dCache { xhat, inv_std, n })
    }

    pub fn backward(&mut self, cache: &Bn2dCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (_, c, _, _) = dy.dim();
        let nf = F::from64(cache.n as f64);
        let gamma = self.gamma1();
        let mut dx = Array4::<F>::zeros(dy.raw_dim());
        for ci in 0..c {
            let dyc = dy.index_axis(Axis(1), ci);
            let xh = cache.xhat.index_axis(Axis(1), ci);
            let sum_dy = dyc.iter().fold(F::zero(), |a, &v| a + v);
            let sum_dy_xhat = dyc
                .iter()
                .zip(xh.iter())
                .fold(F::zero(), |a, (&d, &x)| a + d * x);
            self.gamma.grad[ci] = self.gamma.grad[ci] + sum_dy_xhat;
            self.beta.grad[ci] = self.beta.grad[ci] + sum_dy;
            let scale = gamma[ci] * cache.inv_std[ci] / nf;
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dxc)
                .and(&dyc)
                .and(&xh)
                .for_each(|dxv, &dyv, &xhv| {
                    *dxv = scale * (nf * dyv - sum_dy - xhv * sum_dy_xhat);
                });
        }
        dx
    }

    /// Per-channel affine form of the eval-mode transform: y = x*scale + shift.
    pub fn eval_affine(&self) -> (Array1<F>, Array1<F>) {
        let gamma = self.gamma1();
        let beta = self.beta1();
        eval_affine(
            &gamma,
            &beta,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }

    pub fn forward_eval(&self, x: &Array4<F>) -> Array4<F> {
        let (scale, shift) = self.eval_affine();
        apply_affine_2d(x, &scale, &shift)
    }
}

/// Shared eval-mode arithmetic so the pruned model, with sliced buffers,
/// reproduces the full model's values bit for bit.
pub fn eval_affine<F: Scalar>(
    gamma: &Array1<F>,
    beta: &Array1<F>,
    mean: &Array1<F>,
    var: &Array1<F>,
    eps: F,
) -> (Array1<F>, Array1<F>) {
    let mut scale = Array1::<F>::zeros(gamma.len());
    let mut shift = Array1::<F>::zeros(gamma.len());
    for i in 0..gamma.len() {
        let s = gamma[i] / (var[i] + eps).sqrt();
        scale[i] = s;
        shift[i] = beta[i] - mean[i] * s;
    }
    (scale, shift)
}

pub fn apply_affine_2d<F: Scalar>(x: &Array4<F>, scale: &Array1<F>, shift: &Array1<F>) -> Array4<F> {
    let (_, c, _, _) = x.dim();
    assert_eq!(c, scale.len());
    let mut y = x.clone();
    for ci in 0..c {
        let s = scale[ci];
        let sh = shift[ci];
        y.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * s + sh);
    }
    y
}

pub struct BatchNorm1d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub features: usize,
    pub eps: F,
    pub momentum: F,
}

pub struct Bn1dCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
    n: usize,
}

impl<F: Scalar> BatchNorm1d<F> {
    pub fn new(name: &str, features: usize, group: ParamGroup) -> Self {
        BatchNorm1d {
            gamma: Param::new(
                format!("{name}.gamma"),
                ArrayD::ones(vec![features]),
                group,
                false,
            ),
            beta: Param::new(
                format!("{name}.beta"),
                ArrayD::zeros(vec![features]),
                group,
                false,
            ),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            features,
            eps: F::from64(1e-5),
            momentum: F::from64(0.1),
        }
    }

    pub fn forward_train(&mut self, x: &Array2<F>, update_running: bool) -> (Array2<F>, Bn1dCache<F>) {
        let (b, d) = x.dim();
        assert_eq!(d, self.features);
        let nf = F::from64(b as f64);
        let mut mean = Array1::<F>::zeros(d);
        for di in 0..d {
            let col = x.index_axis(Axis(1), di);
            mean[di] = col.iter().fold(F::zero(), |a, &v| a + v) / nf;
        }
        let mut var = Array1::<F>::zeros(d);
        for di in 0..d {
            let col = x.index_axis(Axis(1), di);
            let m = mean[di];
            var[di] = col.iter().fold(F::zero(), |a, &v| a + (v - m) * (v - m)) / nf;
        }
        if update_running {
            let mom = self.momentum;
            let one = F::one();
            let unbias = if b > 1 {
                F::from64(b as f64 / (b as f64 - 1.0))
            } else {
                F::one()
            };
            for di in 0..d {
                self.running_mean[di] = (one - mom) * self.running_mean[di] + mom * mean[di];
                self.running_var[di] = (one - mom) * self.running_var[di] + mom * var[di] * unbias;
            }
        }
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut xhat = Array2::<F>::zeros((b, d));
        let mut y = Array2::<F>::zeros((b, d));
        for bi in 0..b {
            for di in 0..d {
                let h = (x[[bi, di]] - mean[di]) * inv_std[di];
                xhat[[bi, di]] = h;
                y[[bi, di]] = gamma[di] * h + beta[di];
            }
        }
        (y, Bn1dCache { xhat, inv_std, n: b })
    }

    pub fn backward(&mut self, cache: &Bn1dCache<F>, dy: &Array2<F>) -> Array2<F> {
        let (b, d) = dy.dim();
        let nf = F::from64(cache.n as f64);
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let mut dx = Array2::<F>::zeros((b, d));
        for di in 0..d {
            let dyc = dy.index_axis(Axis(1), di);
            let xh = cache.xhat.index_axis(Axis(1), di);
            let sum_dy = dyc.iter().fold(F::zero(), |a, &v| a + v);
            let sum_dy_xhat = dyc
                .iter()
                .zip(xh.iter())
                .fold(F::zero(), |a, (&dv, &xv)| a + dv * xv);
            self.gamma.grad[di] = self.gamma.grad[di] + sum_dy_xhat;
            self.beta.grad[di] = self.beta.grad[di] + sum_dy;
            let scale = gamma[di] * cache.inv_std[di] / nf;
            for bi in 0..b {
                dx[[bi, di]] = scale * (nf * dy[[bi, di]] - sum_dy - xh[bi] * sum_dy_xhat);
            }
        }
        dx
    }

    pub fn forward_eval(&self, x: &Array2<F>) -> Array2<F> {
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap().to_owned();
        let (scale, shift) = eval_affine(&gamma, &beta, &self.running_mean, &self.running_var, self.eps);
        let (b, d) = x.dim();
        let mut y = Array2::<F>::zeros((b, d));
        for bi in 0..b {
            for di in 0..d {
                y[[bi, di]] = x[[bi, di]] * scale[di] + shift[di];
            }
        }
        y
    }
}
