//! SGD with momentum, coupled L2 decay, and a staircase learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_rate: f64,
    pub decay_step: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr0 > 0.0
            && self.lr0.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.decay_rate > 0.0
            && self.decay_rate <= 1.0
            && self.decay_step > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }

    /// `lr0 · decay_rate^floor(epoch / decay_step)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_rate.powi((epoch / self.decay_step) as i32)
    }
}

/// Optimizer state: one velocity per trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(config: SgdConfig, shapes: &[Vec<usize>]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.config.lr_at(epoch)
    }

    /// Updates every parameter in place. Parameters and gradients pair up with
    /// the velocities by position. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[&Tensor], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::shape(
                "sgd step",
                format!(
                    "{} params, {} grads, {} velocities",
                    params.len(),
                    grads.len(),
                    self.velocity.len()
                ),
            ));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || g.shape() != self.velocity[i].shape() {
                return Err(Error::shape("sgd step", format!("tensor {i}")));
            }
            g.ensure_finite("gradient")?;
        }
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            step(p, g, v, lr, &self.config);
        }
        Ok(())
    }
}

/// One update of a single tensor:
/// `g ← grad + wd·p; v ← μ·v + g; p ← p − lr·v`.
pub fn step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, lr: f64, cfg: &SgdConfig) {
    let (wd, mu) = (cfg.weight_decay, cfg.momentum);
    for ((p, &g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(velocity.data_mut())
    {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(momentum: f64, weight_decay: f64) -> SgdConfig {
        SgdConfig {
            lr0: 0.05,
            momentum,
            weight_decay,
            decay_rate: 0.96,
            decay_step: 10,
        }
    }

    #[test]
    fn staircase_schedule() {
        let c = cfg(0.9, 0.0);
        assert_eq!(c.lr_at(0), 0.05);
        assert_eq!(c.lr_at(9), 0.05);
        assert!((c.lr_at(25) - 0.04608).abs() < 1e-15);
        let flat = SgdConfig {
            decay_rate: 1.0,
            ..c
        };
        assert_eq!(flat.lr_at(1000), 0.05);
    }

    #[test]
    fn hand_cases() {
        let c = cfg(0.0, 0.0);
        let mut p = Tensor::new([2], vec![1.0, -2.0]).unwrap();
        let mut v = Tensor::zeros([2]);
        step(
            &mut p,
            &Tensor::new([2], vec![0.5, 1.0]).unwrap(),
            &mut v,
            0.1,
            &c,
        );
        assert_eq!(p.data(), &[1.0 - 0.1 * 0.5, -2.0 - 0.1]);

        let mut p = Tensor::full([3], 0.7);
        let mut v = Tensor::zeros([3]);
        step(&mut p, &Tensor::zeros([3]), &mut v, 0.3, &c);
        assert_eq!(p.data(), &[0.7; 3]);

        let mut p = Tensor::full([1], 1.0);
        let mut v = Tensor::zeros([1]);
        step(&mut p, &Tensor::zeros([1]), &mut v, 1.0, &cfg(0.0, 0.1));
        assert!((p.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_accumulates_decay() {
        let c = cfg(0.9, 0.1);
        let mut p = Tensor::full([1], 1.0);
        let mut v = Tensor::zeros([1]);
        step(&mut p, &Tensor::full([1], 1.0), &mut v, 0.5, &c);
        // g = 1.1, v = 1.1, p = 1 - 0.55
        assert!((p.data()[0] - 0.45).abs() < 1e-15);
        step(&mut p, &Tensor::full([1], 1.0), &mut v, 0.5, &c);
        let g = 1.0 + 0.1 * 0.45;
        let v2 = 0.9 * 1.1 + g;
        assert!((p.data()[0] - (0.45 - 0.5 * v2)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_leaves_state_untouched() {
        let mut s = SgdState::new(cfg(0.9, 0.0), &[vec![2]]).unwrap();
        let mut p = Tensor::full([2], 1.0);
        let g = Tensor::new([2], vec![1.0, f64::NAN]).unwrap();
        assert!(s.step(vec![&mut p], &[&g], 0.1).is_err());
        assert_eq!(p.data(), &[1.0, 1.0]);
        assert_eq!(s.velocity[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(SgdConfig {
            momentum: 1.0,
            ..cfg(0.0, 0.0)
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            lr0: 0.0,
            ..cfg(0.0, 0.0)
        }
        .validate()
        .is_err());
        assert!(SgdConfig {
            decay_step: 0,
            ..cfg(0.0, 0.0)
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn two_half_steps_equal_one_full(
            p0 in prop::collection::vec(-5.0f64..5.0, 1..8),
            g in -3.0f64..3.0,
            lr in 0.001f64..1.0,
        ) {
            let c = cfg(0.0, 0.0);
            let n = p0.len();
            let grad = Tensor::full([n], g);
            let mut a = Tensor::new([n], p0.clone()).unwrap();
            let mut va = Tensor::zeros([n]);
            step(&mut a, &grad, &mut va, lr / 2.0, &c);
            step(&mut a, &grad, &mut va, lr / 2.0, &c);
            let mut b = Tensor::new([n], p0).unwrap();
            let mut vb = Tensor::zeros([n]);
            step(&mut b, &grad, &mut vb, lr, &c);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn velocity_bounded(
            grads in prop::collection::vec(-2.0f64..2.0, 1..200),
            mu in 0.0f64..0.95,
        ) {
            let c = cfg(mu, 0.0);
            let mut p = Tensor::zeros([1]);
            let mut v = Tensor::zeros([1]);
            let sup = grads.iter().fold(0.0f64, |m, g| m.max(g.abs()));
            for g in grads {
                step(&mut p, &Tensor::full([1], g), &mut v, 0.01, &c);
                prop_assert!(v.data()[0].abs() <= sup / (1.0 - mu) + 1e-12);
            }
        }

        #[test]
        fn per_tensor_updates_are_order_independent(
            a in prop::collection::vec(-1.0f64..1.0, 3),
            b in prop::collection::vec(-1.0f64..1.0, 2),
        ) {
            let c = cfg(0.9, 5e-4);
            let shapes = vec![vec![3], vec![2]];
            let ga = Tensor::new([3], a.clone()).unwrap();
            let gb = Tensor::new([2], b.clone()).unwrap();
            let mut s = SgdState::new(c, &shapes).unwrap();
            let (mut pa, mut pb) = (Tensor::full([3], 0.2), Tensor::full([2], -0.1));
            s.step(vec![&mut pa, &mut pb], &[&ga, &gb], 0.05).unwrap();

            let (mut qa, mut qb) = (Tensor::full([3], 0.2), Tensor::full([2], -0.1));
            let (mut va, mut vb) = (Tensor::zeros([3]), Tensor::zeros([2]));
            step(&mut qb, &gb, &mut vb, 0.05, &c);
            step(&mut qa, &ga, &mut va, 0.05, &c);
            prop_assert_eq!(pa, qa);
            prop_assert_eq!(pb, qb);
        }
    }
}
