//! AdamW with decoupled weight decay and an optional polynomial schedule.

use serde::{Deserialize, Serialize};

use crate::error::{IdaError, Result};
use crate::scalar::Scalar;
use crate::segnet::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `lr * (1 - k / total)^power`
    Poly { power: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 2.5e-4,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 5e-4,
            schedule: LrSchedule::Constant,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.betas.0)
            && (0.0..1.0).contains(&self.betas.1)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(IdaError::Config(format!("invalid optimizer settings {self:?}")));
        }
        if let LrSchedule::Poly { power } = self.schedule {
            if !(power > 0.0 && power.is_finite()) {
                return Err(IdaError::Config(format!("poly power must be positive, got {power}")));
            }
        }
        Ok(())
    }

    /// Learning rate at step `k` of `total`.
    pub fn lr_at(&self, k: u64, total: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Poly { power } => {
                let frac = if total == 0 { 0.0 } else { (k as f64 / total as f64).min(1.0) };
                self.lr * (1.0 - frac).powf(power)
            }
        }
    }
}

/// First and second moment estimates, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelState<T>,
    pub v: ModelState<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(like: &ModelState<T>) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
        }
    }

    /// One AdamW step at learning rate `lr`.
    pub fn step(&mut self, cfg: &OptimizerConfig, lr: f64, params: &mut ModelState<T>, grads: &ModelState<T>) -> Result<()> {
        if !params.same_structure(grads) || !params.same_structure(&self.m) {
            return Err(IdaError::InvalidArgument("optimizer state does not match parameters".into()));
        }
        if !grads.all_finite() {
            return Err(IdaError::Numeric("non-finite gradient".into()));
        }
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let one = T::one();
        let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2_sqrt = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(cfg.eps);
        let decay = T::from_f64_lossy(1.0 - lr * cfg.weight_decay);
        let it = params
            .iter_scalars_mut()
            .zip(grads.iter_scalars())
            .zip(self.m.iter_scalars_mut().zip(self.v.iter_scalars_mut()));
        for ((p, &g), (m, v)) in it {
            *m = b1t * *m + (one - b1t) * g;
            *v = b2t * *v + (one - b2t) * g * g;
            *p = *p * decay - step_size * *m / (v.sqrt() * inv_bc2_sqrt + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::NamedArray;

    fn state(v: Vec<f64>) -> ModelState<f64> {
        ModelState {
            params: vec![NamedArray {
                name: "w".into(),
                shape: vec![v.len()],
                data: v,
            }],
            iteration: 0,
        }
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let cfg = OptimizerConfig::default();
        let mut p = state(vec![1.0, -2.0]);
        let g = state(vec![0.5, -0.1]);
        let mut opt = AdamState::new(&p);
        opt.step(&cfg, cfg.lr, &mut p, &g).unwrap();
        // with bias correction the first update is lr * g / (|g| + eps')
        for (i, (&x0, &gi)) in [1.0f64, -2.0].iter().zip(&[0.5f64, -0.1]).enumerate() {
            let m = 0.1 * gi / 0.1;
            let v = (0.001 * gi * gi / 0.001).sqrt();
            let want = x0 * (1.0 - cfg.lr * cfg.weight_decay) - cfg.lr * m / (v + cfg.eps);
            assert!((p.params[0].data[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = OptimizerConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = state(vec![3.0, -4.0]);
        let mut opt = AdamState::new(&p);
        for _ in 0..2000 {
            let g = state(p.params[0].data.iter().map(|x| 2.0 * (x - 1.0)).collect());
            opt.step(&cfg, cfg.lr, &mut p, &g).unwrap();
        }
        assert!(p.params[0].data.iter().all(|x| (x - 1.0).abs() < 1e-3));
    }

    #[test]
    fn rejects_non_finite_and_mismatched() {
        let cfg = OptimizerConfig::default();
        let mut p = state(vec![1.0]);
        let mut opt = AdamState::new(&p);
        assert!(opt.step(&cfg, 0.1, &mut p, &state(vec![f64::NAN])).unwrap_err().is_numeric());
        assert!(opt.step(&cfg, 0.1, &mut p, &state(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn schedules() {
        let c = OptimizerConfig::default();
        assert_eq!(c.lr_at(500, 1000), 2.5e-4);
        let p = OptimizerConfig {
            schedule: LrSchedule::Poly { power: 1.0 },
            ..c
        };
        assert!((p.lr_at(500, 1000) - 1.25e-4).abs() < 1e-18);
        assert_eq!(p.lr_at(1000, 1000), 0.0);
        assert!(OptimizerConfig { lr: -1.0, ..c }.validate().is_err());
    }
}
