//! 2-D convolution, NCHW layout, no bias (normalization follows every conv).
//!
//! Two implementations with different jobs:
//! - [`Conv2d::forward`] / [`Conv2d::backward`]: im2col + GEMM, used for
//!   training and bulk evaluation.
//! - [`conv_ref`]: direct convolution with strictly sequential accumulation.
//!   Inserting exactly-zero channels into the input does not change its
//!   output bits, which is what lets the pruning certificate compare a
//!   channel-sliced model against the masked full model at zero deviation.

use ndarray::{Array2, Array4, ArrayD};
use rand_chacha::ChaCha8Rng;

use super::param::{Param, ParamGroup};
use super::Scalar;
use crate::rng::normal;

pub struct Conv2d<F> {
    pub weight: Param<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache<F> {
    /// im2col matrix of the input, (B*OH*OW, C*k*k).
    col: Array2<F>,
    in_hw: (usize, usize),
    batch: usize,
}

impl<F: Scalar> Conv2d<F> {
    /// Kaiming-normal initialization: std = sqrt(2 / fan_in).
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let mut w = ArrayD::<F>::zeros(vec![out_channels, in_channels, kernel, kernel]);
        for v in w.iter_mut() {
            *v = F::from64(normal(rng) * std);
        }
        Conv2d {
            weight: Param::new(name, w, group, true),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, in_hw: (usize, usize)) -> (usize, usize) {
        let (h, w) = in_hw;
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn weight4_view(&self) -> ndarray::ArrayView4<'_, F> {
        self.weight
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv weight is 4-d")
    }

    /// GEMM forward without cache (evaluation path).
    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (y, _) = self.forward_impl(x);
        y
    }

    /// GEMM forward keeping the im2col matrix for the backward pass.
    pub fn forward_cached(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (b, _, h, w) = x.dim();
        let (y, col) = self.forward_impl(x);
        (
            y,
            ConvCache {
                col,
                in_hw: (h, w),
                batch: b,
            },
        )
    }

    fn forward_impl(&self, x: &Array4<F>) -> (Array4<F>, Array2<F>) {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv {}: input channel mismatch", self.weight.name);
        let (oh, ow) = self.out_hw((h, w));
        let col = im2col(x, self.kernel, self.stride, self.pad);
        let q = c * self.kernel * self.kernel;
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.out_channels, q))
            .expect("conv weight reshape");
        // (R, Q) x (Q, M) -> (R, M)
        let y2 = col.dot(&w2.t());
        let y = y2
            .into_shape_with_order((b, oh, ow, self.out_channels))
            .expect("conv output reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (y, col)
    }

    /// Accumulates the weight gradient and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache<F>, dy: &Array4<F>) -> Array4<F> {
        let (b, m, oh, ow) = dy.dim();
        assert_eq!(m, self.out_channels);
        assert_eq!(b, cache.batch);
        let q = self.in_channels * self.kernel * self.kernel;
        let dy2 = dy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .into_shape_with_order((b * oh * ow, m))
            .expect("dy reshape")
            .to_owned();
        // dW = dY^T . col
        let dw = dy2.t().dot(&cache.col);
        let dw4 = dw
            .into_shape_with_order((m, self.in_channels, self.kernel, self.kernel))
            .expect("dw reshape")
            .into_dyn();
        self.weight.grad += &dw4;
        // dcol = dY . W
        let w2 = self
            .weight
            .value
            .view()
            .into_shape_with_order((m, q))
            .expect("conv weight reshape");
        let dcol = dy2.dot(&w2);
        col2im(
            &dcol,
            cache.batch,
            self.in_channels,
            cache.in_hw,
            self.kernel,
            self.stride,
            self.pad,
        )
    }
}

/// Gather input patches into a (B*OH*OW, C*k*k) matrix.
pub fn im2col<F: Scalar>(x: &Array4<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut col = Array2::<F>::zeros((b * oh * ow, c * k * k));
    let xs = x.as_slice().expect("standard layout");
    let cs = col.as_slice_mut().expect("standard layout");
    let q = c * k * k;
    for bi in 0..b {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = ((bi * oh + ohi) * ow + owi) * q;
                for ci in 0..c {
                    let xbase = (bi * c + ci) * h * w;
                    for kh in 0..k {
                        let ih = (ohi * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = xbase + ih as usize * w;
                        let crow = row + (ci * k + kh) * k;
                        for kw in 0..k {
                            let iw = (owi * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cs[crow + kw] = xs[xrow + iw as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a column-form gradient back to input layout.
fn col2im<F: Scalar>(
    dcol: &Array2<F>,
    b: usize,
    c: usize,
    in_hw: (usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (h, w) = in_hw;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut dx = Array4::<F>::zeros((b, c, h, w));
    let ds = dcol.as_slice().expect("standard layout");
    let xs = dx.as_slice_mut().expect("standard layout");
    let q = c * k * k;
    for bi in 0..b {
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = ((bi * oh + ohi) * ow + owi) * q;
                for ci in 0..c {
                    let xbase = (bi * c + ci) * h * w;
                    for kh in 0..k {
                        let ih = (ohi * stride + kh) as isize - pad as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let xrow = xbase + ih as usize * w;
                        let crow = row + (ci * k + kh) * k;
                        for kw in 0..k {
                            let iw = (owi * stride + kw) as isize - pad as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            xs[xrow + iw as usize] = xs[xrow + iw as usize] + ds[crow + kw];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Direct convolution with a fixed, sequential accumulation order.
///
/// For every output element the inner sum runs over input channels in
/// ascending index order, then kernel rows, then kernel columns. Because
/// `acc + 0.0 == acc` exactly, dropping input channels that are identically
/// zero (or output channels that are never read) reproduces the full-width
/// result bit for bit.
pub fn conv_ref<F: Scalar>(
    x: &Array4<F>,
    weight: ndarray::ArrayView4<'_, F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, c, h, w) = x.dim();
    let (m, cw, kh_, kw_) = weight.dim();
    assert_eq!(c, cw, "conv_ref input channel mismatch");
    assert_eq!(kh_, kw_, "square kernels only");
    let k = kh_;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut y = Array4::<F>::zeros((b, m, oh, ow));
    let x_std = x.as_standard_layout();
    let w_std = weight.as_standard_layout();
    let xs = x_std.as_slice().expect("standard layout");
    let ws = w_std.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    for bi in 0..b {
        for oc in 0..m {
            let wbase = oc * c * k * k;
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = F::zero();
                    for ic in 0..c {
                        let xbase = (bi * c + ic) * h * w;
                        let wrow0 = wbase + ic * k * k;
                        for kh in 0..k {
                            let ih = (ohi * stride + kh) as isize - pad as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let iw0 = (owi * stride) as isize - pad as isize;
                            let kw_lo = (-iw0).max(0) as usize;
                            let kw_hi = k.min((w as isize - iw0).max(0) as usize);
                            if kw_lo >= kw_hi {
                                continue;
                            }
                            let xrow = xbase + ih as usize * w;
                            let wrow = wrow0 + kh * k;
                            let xoff = (iw0 + kw_lo as isize) as usize;
                            let xseg = &xs[xrow + xoff..xrow + xoff + (kw_hi - kw_lo)];
                            let wseg = &ws[wrow + kw_lo..wrow + kw_hi];
                            for (wv, xv) in wseg.iter().zip(xseg.iter()) {
                                acc = acc + *wv * *xv;
                            }
                        }
                    }
                    ys[((bi * m + oc) * oh + ohi) * ow + owi] = acc;
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::Array;

    fn rand4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = seeded(seed);
        Array::from_shape_fn(shape, |_| normal(&mut rng))
    }

    #[test]
    fn gemm_matches_reference_conv() {
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0)] {
            let mut rng = seeded(7);
            let conv = Conv2d::<f64>::new("t", 3, 5, 3, stride, pad, ParamGroup::Network, &mut rng);
            let x = rand4((2, 3, 8, 8), 11 + stride as u64);
            let y_gemm = conv.forward(&x);
            let y_ref = conv_ref(&x, conv.weight4_view(), stride, pad);
            let max = (&y_gemm - &y_ref).iter().fold(0f64, |a, v| a.max(v.abs()));
            assert!(max < 1e-12, "stride {stride} pad {pad}: max diff {max}");
        }
    }

    #[test]
    fn hand_computed_1x1() {
        // 1x1 conv is a per-pixel matrix multiply.
        let mut rng = seeded(3);
        let mut conv = Conv2d::<f64>::new("t", 2, 1, 1, 1, 0, ParamGroup::Network, &mut rng);
        conv.weight.value.fill(0.0);
        conv.weight.value[[0, 0, 0, 0]] = 2.0;
        conv.weight.value[[0, 1, 0, 0]] = -1.0;
        let mut x = Array4::<f64>::zeros((1, 2, 1, 2));
        x[[0, 0, 0, 0]] = 3.0;
        x[[0, 1, 0, 0]] = 1.0;
        x[[0, 0, 0, 1]] = -2.0;
        x[[0, 1, 0, 1]] = 4.0;
        let y = conv.forward(&x);
        assert_eq!(y[[0, 0, 0, 0]], 5.0);
        assert_eq!(y[[0, 0, 0, 1]], -8.0);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seeded(5);
        let mut conv = Conv2d::<f64>::new("t", 2, 3, 3, 2, 1, ParamGroup::Network, &mut rng);
        let x = rand4((2, 2, 5, 5), 13);
        // objective: 0.5 * sum(y^2)
        let (y, cache) = conv.forward_cached(&x);
        let dx = conv.backward(&cache, &y);
        let h = 1e-6;
        // weight grad, a few coordinates
        for &idx in &[0usize, 7, 23, 53] {
            let flat = conv.weight.value.as_slice_mut().unwrap();
            let orig = flat[idx];
            flat[idx] = orig + h;
            let lp: f64 = conv.forward(&x).iter().map(|v| 0.5 * v * v).sum();
            conv.weight.value.as_slice_mut().unwrap()[idx] = orig - h;
            let lm: f64 = conv.forward(&x).iter().map(|v| 0.5 * v * v).sum();
            conv.weight.value.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = conv.weight.grad.as_slice().unwrap()[idx];
            assert!((an - fd).abs() / (fd.abs() + 1e-8) < 1e-6, "w[{idx}]: {an} vs {fd}");
        }
        // input grad, a few coordinates
        let mut xp = x.clone();
        for &idx in &[0usize, 19, 80] {
            let orig = xp.as_slice().unwrap()[idx];
            xp.as_slice_mut().unwrap()[idx] = orig + h;
            let lp: f64 = conv.forward(&xp).iter().map(|v| 0.5 * v * v).sum();
            xp.as_slice_mut().unwrap()[idx] = orig - h;
            let lm: f64 = conv.forward(&xp).iter().map(|v| 0.5 * v * v).sum();
            xp.as_slice_mut().unwrap()[idx] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = dx.as_slice().unwrap()[idx];
            assert!((an - fd).abs() / (fd.abs() + 1e-8) < 1e-6, "x[{idx}]: {an} vs {fd}");
        }
    }

    #[test]
    fn zero_input_channels_do_not_change_reference_output() {
        let mut rng = seeded(9);
        let conv = Conv2d::<f64>::new("t", 4, 3, 3, 1, 1, ParamGroup::Network, &mut rng);
        let mut x = rand4((1, 4, 6, 6), 21);
        // zero channels 1 and 3, then compare against sliced weights/input
        for ch in [1usize, 3] {
            x.index_axis_mut(ndarray::Axis(1), ch).fill(0.0);
        }
        let full = conv_ref(&x, conv.weight4_view(), 1, 1);
        let keep = [0usize, 2];
        let xs = x.select(ndarray::Axis(1), &keep);
        let ws = conv.weight4_view().select(ndarray::Axis(1), &keep);
        let sliced = conv_ref(&xs, ws.view(), 1, 1);
        assert_eq!(
            full.as_slice().unwrap(),
            sliced.as_slice().unwrap(),
            "sequential accumulation must make zero channels exact no-ops"
        );
    }
}
