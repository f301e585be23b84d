//! Activation, pooling, and loss primitives.

use ndarray::{Array2, Array4, Axis};

use super::Scalar;

/// ReLU with canonical zeros (never emits -0.0, which keeps the pruning
/// equivalence comparison bit-exact across paths).
pub fn relu4<F: Scalar>(x: &Array4<F>) -> Array4<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu4_backward<F: Scalar>(dy: &Array4<F>, y: &Array4<F>) -> Array4<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

pub fn relu2<F: Scalar>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu2_backward<F: Scalar>(dy: &Array2<F>, y: &Array2<F>) -> Array2<F> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        if yv <= F::zero() {
            *d = F::zero();
        }
    });
    dx
}

/// Spatial global average pooling, (B, C, H, W) -> (B, C).
/// Sequential per-channel summation so full and pruned paths agree bitwise.
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = x.dim();
    let nf = F::from64((h * w) as f64);
    let mut y = Array2::<F>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), bi);
            let plane = plane.index_axis(Axis(0), ci);
            let s = plane.iter().fold(F::zero(), |a, &v| a + v);
            y[[bi, ci]] = s / nf;
        }
    }
    y
}

pub fn global_avg_pool_backward<F: Scalar>(dy: &Array2<F>, hw: (usize, usize)) -> Array4<F> {
    let (b, c) = dy.dim();
    let (h, w) = hw;
    let nf = F::from64((h * w) as f64);
    let mut dx = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let g = dy[[bi, ci]] / nf;
            dx.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

/// Row-wise softmax probabilities.
pub fn softmax<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().fold(F::zero(), |a, &v| a + v);
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Mean cross-entropy over the batch plus the logit gradient.
/// Loss is reported in f64 so logging and oracles are precision-stable.
pub fn softmax_cross_entropy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> (f64, Array2<F>) {
    let (b, k) = logits.dim();
    assert_eq!(b, labels.len(), "one label per row");
    let p = softmax(logits);
    let mut loss = 0.0f64;
    for (bi, &t) in labels.iter().enumerate() {
        assert!(t < k, "label {t} out of range for {k} classes");
        loss -= p[[bi, t]].into64().max(1e-300).ln();
    }
    loss /= b as f64;
    let invb = F::from64(1.0 / b as f64);
    let mut dlogits = p;
    for (bi, &t) in labels.iter().enumerate() {
        dlogits[[bi, t]] = dlogits[[bi, t]] - F::one();
    }
    dlogits.mapv_inplace(|v| v * invb);
    (loss, dlogits)
}

pub fn argmax_row<F: Scalar>(row: ndarray::ArrayView1<'_, F>) -> usize {
    let mut best = 0usize;
    let mut bv = F::neg_infinity();
    for (i, &v) in row.iter().enumerate() {
        if v > bv {
            bv = v;
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, seeded};
    use ndarray::Array;

    #[test]
    fn cross_entropy_gradient_matches_fd() {
        let mut rng = seeded(6);
        let logits: Array2<f64> = Array::from_shape_fn((3, 4), |_| normal(&mut rng));
        let labels = vec![2usize, 0, 3];
        let (_, d) = softmax_cross_entropy(&logits, &labels);
        let h = 1e-6;
        for &idx in &[0usize, 5, 11] {
            let mut lp = logits.clone();
            lp.as_slice_mut().unwrap()[idx] += h;
            let (vp, _) = softmax_cross_entropy(&lp, &labels);
            let mut lm = logits.clone();
            lm.as_slice_mut().unwrap()[idx] -= h;
            let (vm, _) = softmax_cross_entropy(&lm, &labels);
            let fd = (vp - vm) / (2.0 * h);
            assert!((d.as_slice().unwrap()[idx] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn gap_reduces_mean() {
        let x = Array4::<f64>::from_elem((1, 2, 2, 2), 3.0);
        let y = global_avg_pool(&x);
        assert_eq!(y[[0, 0]], 3.0);
        assert_eq!(y[[0, 1]], 3.0);
    }

    #[test]
    fn relu_canonicalizes_negative_zero() {
        let mut x = Array4::<f32>::zeros((1, 1, 1, 2));
        x[[0, 0, 0, 0]] = -0.0;
        x[[0, 0, 0, 1]] = -1.5;
        let y = relu4(&x);
        assert!(y[[0, 0, 0, 0]].is_sign_positive());
        assert_eq!(y[[0, 0, 0, 1]], 0.0);
    }
}
