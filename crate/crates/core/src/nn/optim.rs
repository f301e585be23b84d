//! Momentum SGD with two learning-rate groups and a cosine schedule.

use super::param::{Param, ParamGroup};
use super::Scalar;

pub struct SgdMomentum {
    pub lr_network: f64,
    pub lr_gate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdMomentum {
    /// One update step. `lr_scale` multiplies both base rates (schedule).
    pub fn step<F: Scalar>(&self, params: &mut [&mut Param<F>], lr_scale: f64) {
        let mom = F::from64(self.momentum);
        let wd = F::from64(self.weight_decay);
        for p in params.iter_mut() {
            let lr = F::from64(
                match p.group {
                    ParamGroup::Network => self.lr_network,
                    ParamGroup::Gate => self.lr_gate,
                } * lr_scale,
            );
            let decay = p.decay;
            ndarray::Zip::from(&mut p.vel)
                .and(&p.grad)
                .and(&p.value)
                .for_each(|v, &g, &w| {
                    let g = if decay { g + wd * w } else { g };
                    *v = mom * *v + g;
                });
            ndarray::Zip::from(&mut p.value)
                .and(&p.vel)
                .for_each(|w, &v| *w = *w - lr * v);
        }
    }
}

/// Cosine decay from 1.0 to 0.0 over `total` steps.
pub fn cosine_lr(step: usize, total: usize) -> f64 {
    if total == 0 {
        return 1.0;
    }
    let t = (step as f64 / total as f64).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = Param::<f32>::new("w", ArrayD::zeros(vec![2]), ParamGroup::Network, false);
        p.grad[0] = 1.0;
        p.grad[1] = -2.0;
        let opt = SgdMomentum {
            lr_network: 0.1,
            lr_gate: 0.0,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        opt.step(&mut [&mut p], 1.0);
        assert!((p.value[0] + 0.1).abs() < 1e-7);
        assert!((p.value[1] - 0.2).abs() < 1e-7);
    }

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0, 100) - 1.0).abs() < 1e-12);
        assert!(cosine_lr(100, 100).abs() < 1e-12);
        assert!((cosine_lr(50, 100) - 0.5).abs() < 1e-12);
    }
}
