//! Masked supervised and consistency losses and their weighted total.
//!
//! Each masked loss returns its value together with the gradient w.r.t. the
//! student probability map. Pixels outside `region` never contribute.

use serde::{Deserialize, Serialize};

use crate::error::{IdaError, Result};
use crate::plane::{LabelPlane, Plane};
use crate::scalar::Scalar;
use crate::segnet::ops::Tensor;

/// Floor applied to probabilities before the logarithm.
pub const LOG_FLOOR: f64 = 1e-7;
/// Additive smoothing of the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;
/// Class treated as foreground by the Dice loss.
pub const FOREGROUND_CLASS: usize = 1;

#[derive(Debug, Clone)]
pub struct LossValue<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

fn check<T: Scalar>(probs: &Tensor<T>, region: &Plane<u8>) -> Result<()> {
    if (probs.w, probs.h) != region.dims() {
        return Err(IdaError::shape(
            format!("{}x{}", probs.w, probs.h),
            format!("{}x{}", region.width(), region.height()),
        ));
    }
    Ok(())
}

/// Mean over region pixels of `-log max(p[target], 1e-7)`; 0 on an empty region.
pub fn masked_cross_entropy<T: Scalar>(
    probs: &Tensor<T>,
    target: &LabelPlane,
    region: &Plane<u8>,
) -> Result<LossValue<T>> {
    check(probs, region)?;
    target.check_dims(region, "target")?;
    let n = probs.hw();
    let mut grad = Tensor::zeros(probs.c, probs.h, probs.w);
    let count = region.as_slice().iter().filter(|&&r| r != 0).count();
    if count == 0 {
        return Ok(LossValue { value: T::zero(), grad });
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    let floor = T::from_f64_lossy(LOG_FLOOR);
    let mut sum = T::zero();
    for j in 0..n {
        if region.as_slice()[j] == 0 {
            continue;
        }
        let y = target.as_slice()[j] as usize;
        let p = probs.data[y * n + j];
        if p > floor {
            sum -= p.ln();
            grad.data[y * n + j] = -inv / p;
        } else {
            sum -= floor.ln();
        }
    }
    Ok(LossValue { value: sum * inv, grad })
}

/// `1 - (2 sum(p t) + 1) / (sum p + sum t + 1)` over the region, using the
/// foreground channel; 0 on an empty region.
pub fn masked_dice<T: Scalar>(probs: &Tensor<T>, target: &LabelPlane, region: &Plane<u8>) -> Result<LossValue<T>> {
    check(probs, region)?;
    target.check_dims(region, "target")?;
    let n = probs.hw();
    let mut grad = Tensor::zeros(probs.c, probs.h, probs.w);
    if region.as_slice().iter().all(|&r| r == 0) {
        return Ok(LossValue { value: T::zero(), grad });
    }
    let fg = &probs.data[FOREGROUND_CLASS * n..(FOREGROUND_CLASS + 1) * n];
    let (mut inter, mut ps, mut ts) = (T::zero(), T::zero(), T::zero());
    for j in 0..n {
        if region.as_slice()[j] == 0 {
            continue;
        }
        let t = if target.as_slice()[j] as usize == FOREGROUND_CLASS { T::one() } else { T::zero() };
        inter += fg[j] * t;
        ps += fg[j];
        ts += t;
    }
    let eps = T::from_f64_lossy(DICE_SMOOTH);
    let two = T::one() + T::one();
    let num = two * inter + eps;
    let den = ps + ts + eps;
    for j in 0..n {
        if region.as_slice()[j] == 0 {
            continue;
        }
        let t = if target.as_slice()[j] as usize == FOREGROUND_CLASS { T::one() } else { T::zero() };
        grad.data[FOREGROUND_CLASS * n + j] = -(two * t * den - num) / (den * den);
    }
    Ok(LossValue {
        value: T::one() - num / den,
        grad,
    })
}

/// Mean over region pixels and channels of the squared difference. The
/// teacher map is a constant.
pub fn masked_consistency<T: Scalar>(
    student: &Tensor<T>,
    teacher: &Tensor<T>,
    region: &Plane<u8>,
) -> Result<LossValue<T>> {
    check(student, region)?;
    if (student.c, student.h, student.w) != (teacher.c, teacher.h, teacher.w) {
        return Err(IdaError::shape(
            format!("{}x{}x{}", student.c, student.h, student.w),
            format!("{}x{}x{}", teacher.c, teacher.h, teacher.w),
        ));
    }
    let n = student.hw();
    let mut grad = Tensor::zeros(student.c, student.h, student.w);
    let count = region.as_slice().iter().filter(|&&r| r != 0).count() * student.c;
    if count == 0 {
        return Ok(LossValue { value: T::zero(), grad });
    }
    let inv = T::one() / T::from_usize(count).unwrap();
    let two = T::one() + T::one();
    let mut sum = T::zero();
    for c in 0..student.c {
        for j in 0..n {
            if region.as_slice()[j] == 0 {
                continue;
            }
            let d = student.data[c * n + j] - teacher.data[c * n + j];
            sum += d * d;
            grad.data[c * n + j] = two * d * inv;
        }
    }
    Ok(LossValue { value: sum * inv, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta1: 1.0,
            beta2: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("beta1", self.beta1), ("beta2", self.beta2), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(IdaError::Config(format!("loss weight {n} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-step loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub dice: f64,
    pub idcl_t2s: f64,
    pub idcl_s2t: f64,
    pub con: f64,
    pub total: f64,
}

/// Weighted total `cls + dice + beta1 t2s + beta2 s2t + gamma con`.
pub fn total_loss(cls: f64, dice: f64, idcl_t2s: f64, idcl_s2t: f64, con: f64, w: &LossWeights) -> Result<LossReport> {
    let parts = [cls, dice, idcl_t2s, idcl_s2t, con];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(IdaError::Numeric(format!("non-finite loss component {parts:?}")));
    }
    Ok(LossReport {
        cls,
        dice,
        idcl_t2s,
        idcl_s2t,
        con,
        total: cls + dice + w.beta1 * idcl_t2s + w.beta2 * idcl_s2t + w.gamma * con,
    })
}
