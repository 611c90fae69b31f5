//! Class prototypes and the margin prototype-contrastive loss.

use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::data::resize_bilinear;
use crate::error::{IdaError, Result};
use crate::plane::LabelPlane;
use crate::scalar::Scalar;
use crate::segnet::ops::Tensor;
use crate::segnet::{ModelState, WNet};

/// Running class-mean features. Vectors are raw means; normalization only
/// happens inside [`cosine_similarity`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank<T> {
    pub vectors: Vec<Vec<T>>,
    pub iteration: u64,
    /// (t2s, s2t) weights of the last update.
    pub last_weights: (f64, f64),
}

impl<T: Scalar> PrototypeBank<T> {
    pub fn new(vectors: Vec<Vec<T>>) -> Result<Self> {
        let bank = PrototypeBank {
            vectors,
            iteration: 0,
            last_weights: (0.0, 0.0),
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.vectors.is_empty() {
            return Err(IdaError::InvalidArgument("prototype bank has no classes".into()));
        }
        let d = self.dim();
        if self.vectors.iter().any(|v| v.len() != d) {
            return Err(IdaError::InvalidArgument("prototype vectors differ in length".into()));
        }
        if self.vectors.iter().flatten().any(|v| !v.is_finite()) {
            return Err(IdaError::Numeric("non-finite prototype".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastConfig {
    /// Angular margin added to the positive pair, radians.
    pub delta: f64,
    pub tau: f64,
    pub th_t2s: f64,
    pub th_s2t: f64,
    /// Sum the per-pixel terms instead of averaging them.
    pub raw_sum: bool,
}

impl Default for ContrastConfig {
    fn default() -> Self {
        ContrastConfig {
            delta: 0.1,
            tau: 1.0,
            th_t2s: 0.9,
            th_s2t: 0.7,
            raw_sum: false,
        }
    }
}

impl ContrastConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(IdaError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.delta) {
            return Err(IdaError::Config(format!("delta must lie in [0, pi/2), got {}", self.delta)));
        }
        for (name, th) in [("th_t2s", self.th_t2s), ("th_s2t", self.th_s2t)] {
            if !(0.0..=1.0).contains(&th) {
                return Err(IdaError::Config(format!("{name} must lie in [0, 1], got {th}")));
            }
        }
        Ok(())
    }
}

/// Nearest-neighbour label downsampling to the feature grid.
pub fn downsample_labels(labels: &LabelPlane, w: usize, h: usize) -> LabelPlane {
    labels.resize_nearest(w, h)
}

/// Mean feature over pixels labelled `class`, and the pixel count. The
/// vector is all zeros when the count is 0.
pub fn batch_class_prototype<T: Scalar>(
    features: &[&Tensor<T>],
    labels_ds: &[&LabelPlane],
    class: u8,
) -> (Vec<T>, usize) {
    let d = features.first().map_or(0, |f| f.c);
    let mut sum = vec![T::zero(); d];
    let mut count = 0usize;
    for (f, l) in features.iter().zip(labels_ds) {
        debug_assert_eq!((f.w, f.h), l.dims());
        let n = f.hw();
        for (j, &y) in l.as_slice().iter().enumerate() {
            if y == class {
                count += 1;
                for (c, s) in sum.iter_mut().enumerate() {
                    *s += f.data[c * n + j];
                }
            }
        }
    }
    if count > 0 {
        let k = T::from_usize(count).unwrap();
        sum.iter_mut().for_each(|s| *s /= k);
    }
    (sum, count)
}

/// Per-class (mean, count) for classes `0..num_classes`.
pub fn batch_stats<T: Scalar>(
    features: &[&Tensor<T>],
    labels_ds: &[&LabelPlane],
    num_classes: usize,
) -> Vec<(Vec<T>, usize)> {
    (0..num_classes)
        .map(|r| batch_class_prototype(features, labels_ds, r as u8))
        .collect()
}

/// Prototypes from already computed features. A class with no pixels gets
/// the global feature mean.
pub fn prototypes_from_features<T: Scalar>(
    features: &[&Tensor<T>],
    labels_ds: &[&LabelPlane],
    num_classes: usize,
) -> Result<PrototypeBank<T>> {
    if features.is_empty() {
        return Err(IdaError::InvalidArgument("no source features for prototypes".into()));
    }
    let stats = batch_stats(features, labels_ds, num_classes);
    let d = features[0].c;
    let mut global = vec![T::zero(); d];
    let mut total = 0usize;
    for (v, n) in &stats {
        let k = T::from_usize(*n).unwrap();
        for (g, &x) in global.iter_mut().zip(v) {
            *g += x * k;
        }
        total += n;
    }
    if total > 0 {
        let k = T::from_usize(total).unwrap();
        global.iter_mut().for_each(|g| *g /= k);
    }
    let vectors = stats
        .into_iter()
        .map(|(v, n)| if n > 0 { v } else { global.clone() })
        .collect();
    PrototypeBank::new(vectors)
}

/// Initial prototypes: class means of tap features over labelled source
/// images. Images not at the network input size are resized first.
pub fn init_prototypes<T: Scalar>(
    net: &WNet,
    model: &ModelState<T>,
    source: &[ImageSample<T>],
) -> Result<PrototypeBank<T>> {
    if source.is_empty() {
        return Err(IdaError::InvalidArgument("empty source list".into()));
    }
    let (iw, ih) = net.config().input_size;
    let (tw, th) = net.config().tap_size();
    let mut feats = Vec::with_capacity(source.len());
    let mut labels = Vec::with_capacity(source.len());
    for s in source {
        let label = s
            .label
            .as_ref()
            .ok_or_else(|| IdaError::InvalidArgument(format!("source sample {} has no label", s.id)))?;
        let plane = s.plane();
        let (img, lab) = if plane.dims() == (iw, ih) {
            (plane.clone(), label.clone())
        } else {
            (resize_bilinear(plane, iw, ih), label.resize_nearest(iw, ih))
        };
        feats.push(net.forward(model, &img)?.features);
        labels.push(downsample_labels(&lab, tw, th));
    }
    let f: Vec<&Tensor<T>> = feats.iter().collect();
    let l: Vec<&LabelPlane> = labels.iter().collect();
    prototypes_from_features(&f, &l, net.config().num_classes)
}

/// Fraction of pixels whose top-1 minus top-2 probability exceeds `th`.
pub fn confidence_weight<T: Scalar>(probs: &[&Tensor<T>], th: f64) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for p in probs {
        let n = p.hw();
        for j in 0..n {
            let (mut a, mut b) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
            for c in 0..p.c {
                let v = p.data[c * n + j].as_f64();
                if v > a {
                    b = a;
                    a = v;
                } else if v > b {
                    b = v;
                }
            }
            if a - b > th {
                hit += 1;
            }
        }
        total += n;
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Two-step convex update, t2s first then s2t. A direction with zero pixels
/// of a class skips that class's step.
pub fn update_prototypes<T: Scalar>(
    bank: &mut PrototypeBank<T>,
    t2s: &[(Vec<T>, usize)],
    s2t: &[(Vec<T>, usize)],
    weights: (f64, f64),
) {
    for (stats, w) in [(t2s, weights.0), (s2t, weights.1)] {
        let wt = T::from_f64_lossy(w);
        let keep = T::from_f64_lossy(1.0 - w);
        for (c, (v, n)) in bank.vectors.iter_mut().zip(stats) {
            if *n == 0 {
                continue;
            }
            for (x, &y) in c.iter_mut().zip(v) {
                *x = keep * *x + wt * y;
            }
        }
    }
    bank.iteration += 1;
    bank.last_weights = weights;
}

/// Cosine similarity clamped to [-1, 1]; 0 if either vector has zero norm.
pub fn cosine_similarity<T: Scalar>(c: &[T], f: &[T]) -> T {
    let (mut dot, mut nc, mut nf) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in c.iter().zip(f) {
        dot += a * b;
        nc += a * a;
        nf += b * b;
    }
    if nc == T::zero() || nf == T::zero() {
        return T::zero();
    }
    (dot / (nc.sqrt() * nf.sqrt())).max(-T::one()).min(T::one())
}

/// Loss value and gradient w.r.t. the feature map. Prototypes are constants.
#[derive(Debug, Clone)]
pub struct ContrastOutput<T> {
    pub loss: T,
    pub grad: Tensor<T>,
}

/// Per-pixel margin term averaged over the map (or summed when
/// `cfg.raw_sum`).
pub fn contrastive_loss<T: Scalar>(
    features: &Tensor<T>,
    labels_ds: &LabelPlane,
    bank: &PrototypeBank<T>,
    cfg: &ContrastConfig,
) -> Result<ContrastOutput<T>> {
    if (features.w, features.h) != labels_ds.dims() {
        return Err(IdaError::shape(
            format!("{}x{}", features.w, features.h),
            format!("{}x{}", labels_ds.width(), labels_ds.height()),
        ));
    }
    if features.c != bank.dim() {
        return Err(IdaError::shape(bank.dim(), features.c));
    }
    if !features.all_finite() {
        return Err(IdaError::Numeric("non-finite features in contrastive loss".into()));
    }
    let n = features.hw();
    let l = bank.num_classes();
    let tau = cfg.tau;
    let pi = std::f64::consts::PI;
    let proto_norm: Vec<f64> = bank
        .vectors
        .iter()
        .map(|v| v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt())
        .collect();
    let scale = if cfg.raw_sum { 1.0 } else { 1.0 / n as f64 };
    let mut total = 0.0f64;
    let mut grad = Tensor::zeros(features.c, features.h, features.w);
    let mut f = vec![0.0f64; features.c];
    let mut sims = vec![0.0f64; l];
    let mut z = vec![0.0f64; l];
    let mut dsim = vec![0.0f64; l];
    for j in 0..n {
        let y = labels_ds.as_slice()[j] as usize;
        if y >= l {
            return Err(IdaError::InvalidArgument(format!("label {y} outside {l} classes")));
        }
        for (c, v) in f.iter_mut().enumerate() {
            *v = features.data[c * n + j].as_f64();
        }
        let fnorm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
        // raw similarities and whether the clamp was active
        let mut clamped = vec![false; l];
        for r in 0..l {
            if fnorm == 0.0 || proto_norm[r] == 0.0 {
                sims[r] = 0.0;
                clamped[r] = true;
                continue;
            }
            let dot: f64 = bank.vectors[r].iter().zip(&f).map(|(a, b)| a.as_f64() * b).sum();
            let s = dot / (proto_norm[r] * fnorm);
            clamped[r] = !(-1.0..=1.0).contains(&s);
            sims[r] = s.clamp(-1.0, 1.0);
        }
        let theta = sims[y].acos() + cfg.delta;
        let theta_c = theta.clamp(0.0, pi);
        for r in 0..l {
            z[r] = if r == y { theta_c.cos() / tau } else { sims[r] / tau };
        }
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = zmax + z.iter().map(|v| (v - zmax).exp()).sum::<f64>().ln();
        total += lse - z[y];
        // dL/dz = softmax(z) - onehot(y)
        for r in 0..l {
            let soft = (z[r] - lse).exp();
            let dz = soft - if r == y { 1.0 } else { 0.0 };
            dsim[r] = if r == y {
                if theta >= pi {
                    0.0
                } else {
                    let s = sims[y];
                    dz * theta_c.sin() / (tau * (1.0 - s * s).sqrt().max(1e-6))
                }
            } else {
                dz / tau
            };
        }
        for r in 0..l {
            if clamped[r] || dsim[r] == 0.0 {
                continue;
            }
            let k = dsim[r] * scale;
            let inv = 1.0 / (proto_norm[r] * fnorm);
            let s_over = sims[r] / (fnorm * fnorm);
            for c in 0..features.c {
                let ds = bank.vectors[r][c].as_f64() * inv - s_over * f[c];
                grad.data[c * n + j] += T::from_f64_lossy(k * ds);
            }
        }
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(IdaError::Numeric("non-finite contrastive loss".into()));
    }
    Ok(ContrastOutput {
        loss: T::from_f64_lossy(loss),
        grad,
    })
}
