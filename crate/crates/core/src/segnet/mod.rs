//! Cascaded two-stage encoder-decoder ("W-Net") with a bottleneck feature tap.

pub mod ops;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{to_grayscale, ImageSample, PreprocessConfig};
use crate::data::resize_bilinear;
use crate::error::{IdaError, Result};
use crate::plane::{LabelPlane, Plane};
use crate::scalar::Scalar;
use ops::{ConvCache, ConvShape, Tensor};

/// What the second stage receives alongside the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StageLink {
    #[default]
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Encoder levels per stage, including the bottleneck.
    pub depth: usize,
    pub base_channels: usize,
    /// Channels at the feature tap; always `base_channels * 2^(depth-1)`.
    pub feature_dim: usize,
    pub num_classes: usize,
    /// (width, height)
    pub input_size: (usize, usize),
    #[serde(default)]
    pub stage_link: StageLink,
}

impl NetworkConfig {
    pub fn new(depth: usize, base_channels: usize, input_size: (usize, usize)) -> Self {
        NetworkConfig {
            depth,
            base_channels,
            feature_dim: base_channels << depth.saturating_sub(1),
            num_classes: 2,
            input_size,
            stage_link: StageLink::Logits,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(IdaError::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.base_channels == 0 {
            return Err(IdaError::Config("base_channels must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(IdaError::Config("num_classes must be >= 2".into()));
        }
        if self.feature_dim != self.channels(self.depth - 1) {
            return Err(IdaError::Config(format!(
                "feature_dim {} does not match bottleneck width {}",
                self.feature_dim,
                self.channels(self.depth - 1)
            )));
        }
        let f = 1usize << (self.depth - 1);
        let (w, h) = self.input_size;
        if w == 0 || h == 0 || w % f != 0 || h % f != 0 {
            return Err(IdaError::Config(format!(
                "input size {w}x{h} must be a positive multiple of {f}"
            )));
        }
        Ok(())
    }

    /// Channels at encoder level `level`.
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial size (w, h) of the feature tap.
    pub fn tap_size(&self) -> (usize, usize) {
        let f = 1usize << (self.depth - 1);
        (self.input_size.0 / f, self.input_size.1 / f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Flat ordered set of named parameter arrays plus an iteration counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub params: Vec<NamedArray<T>>,
    pub iteration: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn same_structure(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.data.len() == b.data.len())
    }

    /// Zero-filled arrays with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        ModelState {
            params: self
                .params
                .iter()
                .map(|p| NamedArray {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
            iteration: 0,
        }
    }

    pub fn iter_scalars(&self) -> impl Iterator<Item = &T> {
        self.params.iter().flat_map(|p| p.data.iter())
    }

    pub fn iter_scalars_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.params.iter_mut().flat_map(|p| p.data.iter_mut())
    }

    /// Order-sensitive FNV-1a hash of the raw parameter bytes.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut buf = Vec::with_capacity(8);
        for v in self.iter_scalars() {
            buf.clear();
            v.write_le(&mut buf);
            for &b in &buf {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.iter_scalars().all(|v| v.is_finite())
    }
}

/// Teacher update: `teacher <- lambda * teacher + (1 - lambda) * student`.
pub fn ema_update<T: Scalar>(teacher: &mut ModelState<T>, student: &ModelState<T>, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(IdaError::InvalidArgument(format!("ema decay {lambda} outside [0, 1]")));
    }
    if !teacher.same_structure(student) {
        return Err(IdaError::InvalidArgument("teacher and student structures differ".into()));
    }
    let l = T::from_f64_lossy(lambda);
    let r = T::from_f64_lossy(1.0 - lambda);
    for (t, &s) in teacher.iter_scalars_mut().zip(student.iter_scalars()) {
        *t = l * *t + r * s;
    }
    teacher.iteration += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LayerKind {
    /// 3x3 conv followed by the leaky rectifier.
    Conv,
    /// 1x1 classification head, no activation.
    Head,
}

#[derive(Debug, Clone)]
struct Layer {
    name: String,
    shape: ConvShape,
    kind: LayerKind,
}

/// Layer table of one U-Net stage, in parameter order.
#[derive(Debug, Clone)]
struct StageLayout {
    enc: Vec<[usize; 2]>,
    dec: Vec<[usize; 2]>,
    head: usize,
}

/// The backbone: a fixed architecture bound to a [`NetworkConfig`].
/// Parameters live in a separate [`ModelState`].
#[derive(Debug, Clone)]
pub struct WNet {
    cfg: NetworkConfig,
    layers: Vec<Layer>,
    stages: [StageLayout; 2],
}

/// Probabilities and bottleneck features of one image.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `num_classes x H x W`
    pub probs: Tensor<T>,
    /// `feature_dim x h x w`
    pub features: Tensor<T>,
}

impl<T: Scalar> ForwardOutput<T> {
    /// Probability of `class` as a plane.
    pub fn class_plane(&self, class: usize) -> Plane<T> {
        Plane::from_vec(self.probs.w, self.probs.h, self.probs.channel(class).to_vec()).expect("dims")
    }

    pub fn argmax(&self) -> LabelPlane {
        argmax_labels(&self.probs)
    }
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn argmax_labels<T: Scalar>(probs: &Tensor<T>) -> LabelPlane {
    let n = probs.hw();
    let data = (0..n)
        .map(|j| {
            let mut best = 0;
            for c in 1..probs.c {
                if probs.data[c * n + j] > probs.data[best * n + j] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Plane::from_vec(probs.w, probs.h, data).expect("dims")
}

struct StageTrace<T> {
    caches: Vec<Option<ConvCache<T>>>,
    pool_idx: Vec<Vec<u32>>,
    pool_dims: Vec<(usize, usize)>,
    skip_channels: Vec<usize>,
}

/// Everything the backward pass needs from a training forward.
pub struct Trace<T> {
    stages: [StageTrace<T>; 2],
    probs: Tensor<T>,
}

impl<T: Scalar> Trace<T> {
    pub fn probs(&self) -> &Tensor<T> {
        &self.probs
    }
}

impl WNet {
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut layers = Vec::new();
        let stage_in = [1, 1 + cfg.num_classes];
        let mut stages = Vec::new();
        for (s, &cin0) in stage_in.iter().enumerate() {
            let mut push = |name: String, cin: usize, cout: usize, k: usize, kind: LayerKind| {
                layers.push(Layer {
                    name,
                    shape: ConvShape { cin, cout, k },
                    kind,
                });
                layers.len() - 1
            };
            let mut enc = Vec::new();
            let mut cin = cin0;
            for lvl in 0..cfg.depth {
                let c = cfg.channels(lvl);
                let a = push(format!("s{s}.enc{lvl}.conv0"), cin, c, 3, LayerKind::Conv);
                let b = push(format!("s{s}.enc{lvl}.conv1"), c, c, 3, LayerKind::Conv);
                enc.push([a, b]);
                cin = c;
            }
            let mut dec = vec![[0, 0]; cfg.depth - 1];
            for lvl in (0..cfg.depth - 1).rev() {
                let c = cfg.channels(lvl);
                let a = push(format!("s{s}.dec{lvl}.conv0"), cin + c, c, 3, LayerKind::Conv);
                let b = push(format!("s{s}.dec{lvl}.conv1"), c, c, 3, LayerKind::Conv);
                dec[lvl] = [a, b];
                cin = c;
            }
            let head = push(format!("s{s}.head"), cin, cfg.num_classes, 1, LayerKind::Head);
            stages.push(StageLayout { enc, dec, head });
        }
        let stages: [StageLayout; 2] = stages.try_into().expect("two stages");
        Ok(WNet { cfg, layers, stages })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    /// He-initialized parameters, zero biases.
    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> ModelState<T> {
        let mut params = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            let fan_in = (l.shape.cin * l.shape.k * l.shape.k) as f64;
            let gain = match l.kind {
                LayerKind::Conv => 2.0 / (1.0 + ops::LEAK * ops::LEAK),
                LayerKind::Head => 1.0,
            };
            let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("finite std");
            params.push(NamedArray {
                name: format!("{}.weight", l.name),
                shape: vec![l.shape.cout, l.shape.cin, l.shape.k, l.shape.k],
                data: (0..l.shape.weight_len())
                    .map(|_| T::from_f64_lossy(normal.sample(rng)))
                    .collect(),
            });
            params.push(NamedArray {
                name: format!("{}.bias", l.name),
                shape: vec![l.shape.cout],
                data: vec![T::zero(); l.shape.cout],
            });
        }
        ModelState { params, iteration: 0 }
    }

    /// Checks that `state` has exactly this network's names and shapes.
    pub fn check_state<T: Scalar>(&self, state: &ModelState<T>) -> Result<()> {
        if state.params.len() != 2 * self.layers.len() {
            return Err(IdaError::shape(
                format!("{} parameter arrays", 2 * self.layers.len()),
                format!("{}", state.params.len()),
            ));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let w = &state.params[2 * i];
            let b = &state.params[2 * i + 1];
            if w.name != format!("{}.weight", l.name) || w.data.len() != l.shape.weight_len() {
                return Err(IdaError::shape(format!("{}.weight", l.name), w.name.clone()));
            }
            if b.name != format!("{}.bias", l.name) || b.data.len() != l.shape.cout {
                return Err(IdaError::shape(format!("{}.bias", l.name), b.name.clone()));
            }
        }
        Ok(())
    }

    fn conv<T: Scalar>(
        &self,
        state: &ModelState<T>,
        layer: usize,
        x: &Tensor<T>,
        caches: Option<&mut Vec<Option<ConvCache<T>>>>,
    ) -> Tensor<T> {
        let l = &self.layers[layer];
        let keep = caches.is_some();
        let (out, cache) = ops::conv_forward(
            x,
            l.shape,
            &state.params[2 * layer].data,
            &state.params[2 * layer + 1].data,
            l.kind == LayerKind::Conv,
            keep,
        );
        if let Some(c) = caches {
            c[layer] = cache;
        }
        out
    }

    /// One U-Net stage; returns (logits, bottleneck features).
    fn stage_forward<T: Scalar>(
        &self,
        state: &ModelState<T>,
        s: usize,
        x: Tensor<T>,
        mut trace: Option<&mut StageTrace<T>>,
    ) -> (Tensor<T>, Tensor<T>) {
        let lay = &self.stages[s];
        let mut skips = Vec::with_capacity(self.cfg.depth - 1);
        let mut h = x;
        for lvl in 0..self.cfg.depth {
            for &li in &lay.enc[lvl] {
                h = self.conv(state, li, &h, trace.as_deref_mut().map(|t| &mut t.caches));
            }
            if lvl + 1 < self.cfg.depth {
                let (p, idx) = ops::maxpool_forward(&h);
                if let Some(t) = trace.as_deref_mut() {
                    t.pool_idx.push(idx);
                    t.pool_dims.push((h.h, h.w));
                    t.skip_channels.push(h.c);
                }
                skips.push(h);
                h = p;
            }
        }
        let features = h.clone();
        for lvl in (0..self.cfg.depth - 1).rev() {
            let up = ops::upsample_forward(&h);
            h = ops::concat(&up, &skips[lvl]);
            for &li in &lay.dec[lvl] {
                h = self.conv(state, li, &h, trace.as_deref_mut().map(|t| &mut t.caches));
            }
        }
        let logits = self.conv(state, lay.head, &h, trace.as_deref_mut().map(|t| &mut t.caches));
        (logits, features)
    }

    fn input_tensor<T: Scalar>(&self, image: &Plane<T>) -> Result<Tensor<T>> {
        let (w, h) = image.dims();
        if (w, h) != self.cfg.input_size {
            return Err(IdaError::shape(
                format!("{}x{}", self.cfg.input_size.0, self.cfg.input_size.1),
                format!("{w}x{h}"),
            ));
        }
        Ok(Tensor::from_vec(1, h, w, image.as_slice().to_vec()))
    }

    fn run<T: Scalar>(
        &self,
        state: &ModelState<T>,
        image: &Plane<T>,
        mut traces: Option<&mut [StageTrace<T>; 2]>,
    ) -> Result<ForwardOutput<T>> {
        let x = self.input_tensor(image)?;
        let (logits1, _) = self.stage_forward(state, 0, x.clone(), traces.as_deref_mut().map(|t| &mut t[0]));
        let x2 = ops::concat(&x, &logits1);
        let (logits2, features) = self.stage_forward(state, 1, x2, traces.as_deref_mut().map(|t| &mut t[1]));
        let probs = ops::softmax(&logits2);
        if !probs.all_finite() || !features.all_finite() {
            return Err(IdaError::Numeric("non-finite activations in forward pass".into()));
        }
        Ok(ForwardOutput { probs, features })
    }

    /// Inference forward.
    pub fn forward<T: Scalar>(&self, state: &ModelState<T>, image: &Plane<T>) -> Result<ForwardOutput<T>> {
        self.check_state(state)?;
        self.run(state, image, None)
    }

    /// Forward that keeps activations for [`WNet::backward`].
    pub fn forward_train<T: Scalar>(
        &self,
        state: &ModelState<T>,
        image: &Plane<T>,
    ) -> Result<(ForwardOutput<T>, Trace<T>)> {
        self.check_state(state)?;
        let mk = || StageTrace {
            caches: (0..self.layers.len()).map(|_| None).collect(),
            pool_idx: Vec::new(),
            pool_dims: Vec::new(),
            skip_channels: Vec::new(),
        };
        let mut traces = [mk(), mk()];
        let out = self.run(state, image, Some(&mut traces))?;
        Ok((
            out.clone(),
            Trace {
                stages: traces,
                probs: out.probs,
            },
        ))
    }

    fn conv_back<T: Scalar>(
        &self,
        state: &ModelState<T>,
        grads: &mut ModelState<T>,
        trace: &StageTrace<T>,
        layer: usize,
        dout: Tensor<T>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let l = &self.layers[layer];
        let cache = trace.caches[layer].as_ref().expect("layer cache");
        let (gw, gb) = grads.params.split_at_mut(2 * layer + 1);
        ops::conv_backward(
            l.shape,
            &state.params[2 * layer].data,
            cache,
            dout,
            &mut gw[2 * layer].data,
            &mut gb[0].data,
            need_input,
        )
    }

    /// Returns the gradient w.r.t. the stage input when `need_input` is set.
    fn stage_backward<T: Scalar>(
        &self,
        state: &ModelState<T>,
        grads: &mut ModelState<T>,
        s: usize,
        trace: &StageTrace<T>,
        dlogits: Tensor<T>,
        dfeatures: Option<&Tensor<T>>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let lay = &self.stages[s];
        let depth = self.cfg.depth;
        let mut dh = self.conv_back(state, grads, trace, lay.head, dlogits, true).unwrap();
        let mut dskips: Vec<Option<Tensor<T>>> = vec![None; depth - 1];
        for lvl in 0..depth - 1 {
            let [a, b] = lay.dec[lvl];
            dh = self.conv_back(state, grads, trace, b, dh, true).unwrap();
            dh = self.conv_back(state, grads, trace, a, dh, true).unwrap();
            let up_c = dh.c - trace.skip_channels[lvl];
            let (dup, dskip) = ops::split(&dh, up_c);
            dskips[lvl] = Some(dskip);
            dh = ops::upsample_backward(&dup);
        }
        if let Some(df) = dfeatures {
            dh.add_assign(df);
        }
        for lvl in (0..depth).rev() {
            if lvl + 1 < depth {
                let (h, w) = trace.pool_dims[lvl];
                dh = ops::maxpool_backward(&dh, &trace.pool_idx[lvl], h, w);
                dh.add_assign(dskips[lvl].as_ref().unwrap());
            }
            let [a, b] = lay.enc[lvl];
            dh = self.conv_back(state, grads, trace, b, dh, true).unwrap();
            let need = lvl > 0 || need_input;
            match self.conv_back(state, grads, trace, a, dh, need) {
                Some(d) => dh = d,
                None => return None,
            }
        }
        Some(dh)
    }

    /// Accumulates parameter gradients into `grads` given the gradient of a
    /// scalar loss w.r.t. the output probabilities and, optionally, w.r.t. the
    /// tapped features.
    pub fn backward<T: Scalar>(
        &self,
        state: &ModelState<T>,
        trace: &Trace<T>,
        dprobs: &Tensor<T>,
        dfeatures: Option<&Tensor<T>>,
        grads: &mut ModelState<T>,
    ) {
        let dlogits2 = ops::softmax_backward(&trace.probs, dprobs);
        let dx2 = self
            .stage_backward(state, grads, 1, &trace.stages[1], dlogits2, dfeatures, true)
            .expect("stage input gradient");
        let (_, dlogits1) = ops::split(&dx2, 1);
        self.stage_backward(state, grads, 0, &trace.stages[0], dlogits1, None, false);
    }

    /// Teacher pseudo-label: per-pixel argmax, lowest index on ties.
    pub fn pseudo_label<T: Scalar>(&self, teacher: &ModelState<T>, image: &Plane<T>) -> Result<LabelPlane> {
        Ok(self.forward(teacher, image)?.argmax())
    }

    /// Resize to the network input, forward, then resize class probabilities
    /// back to each sample's own resolution and renormalize.
    pub fn predict_dataset<T: Scalar>(
        &self,
        state: &ModelState<T>,
        samples: &[ImageSample<T>],
    ) -> Result<Vec<Tensor<T>>> {
        let gray_cfg = PreprocessConfig::default();
        let (ew, eh) = self.cfg.input_size;
        samples
            .iter()
            .map(|s| {
                let g = to_grayscale(s, &gray_cfg);
                let plane = g.plane();
                let (w, h) = plane.dims();
                let out = self.forward(state, &resize_bilinear(plane, ew, eh))?;
                let mut probs = Tensor::zeros(self.cfg.num_classes, h, w);
                for c in 0..self.cfg.num_classes {
                    let up = resize_bilinear(&out.class_plane(c), w, h);
                    probs.data[c * w * h..(c + 1) * w * h].copy_from_slice(up.as_slice());
                }
                let n = w * h;
                for j in 0..n {
                    let sum: T = (0..probs.c).map(|c| probs.data[c * n + j]).sum();
                    for c in 0..probs.c {
                        probs.data[c * n + j] /= sum;
                    }
                }
                Ok(probs)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> WNet {
        WNet::new(NetworkConfig::new(2, 4, (16, 16))).unwrap()
    }

    fn image(w: usize, h: usize, seed: u64) -> Plane<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Plane::from_fn(w, h, |_, _| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(NetworkConfig::new(1, 4, (16, 16)).validate().is_err());
        assert!(NetworkConfig::new(3, 4, (18, 16)).validate().is_err());
        let mut c = NetworkConfig::new(3, 4, (16, 16));
        c.feature_dim = 5;
        assert!(c.validate().is_err());
        assert_eq!(NetworkConfig::new(4, 8, (384, 384)).tap_size(), (48, 48));
    }

    #[test]
    fn output_shapes_and_simplex() {
        let net = WNet::new(NetworkConfig::new(3, 4, (32, 24))).unwrap();
        let st: ModelState<f64> = net.init(&mut ChaCha8Rng::seed_from_u64(0));
        let out = net.forward(&st, &image(32, 24, 1)).unwrap();
        assert_eq!((out.probs.c, out.probs.h, out.probs.w), (2, 24, 32));
        assert_eq!((out.features.c, out.features.h, out.features.w), (16, 6, 8));
        for j in 0..out.probs.hw() {
            assert!((out.probs.data[j] + out.probs.data[out.probs.hw() + j] - 1.0).abs() < 1e-12);
        }
        let again = net.forward(&st, &image(32, 24, 1)).unwrap();
        assert_eq!(out.probs, again.probs);
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let net = small();
        let st: ModelState<f64> = net.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            net.forward(&st, &image(8, 16, 0)),
            Err(IdaError::ShapeMismatch { .. })
        ));
        let other = WNet::new(NetworkConfig::new(2, 2, (16, 16))).unwrap();
        let bad: ModelState<f64> = other.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(net.forward(&bad, &image(16, 16, 0)).is_err());
    }

    #[test]
    fn non_finite_parameters_are_numeric_errors() {
        let net = small();
        let mut st: ModelState<f64> = net.init(&mut ChaCha8Rng::seed_from_u64(0));
        st.params[0].data[0] = f64::NAN;
        assert!(net.forward(&st, &image(16, 16, 0)).unwrap_err().is_numeric());
    }

    #[test]
    fn argmax_tie_break() {
        let p = Tensor::from_vec(2, 1, 3, vec![0.1, 0.5, 0.6, 0.9, 0.5, 0.4]);
        assert_eq!(argmax_labels(&p).as_slice(), &[1, 0, 0]);
        let uniform = Tensor::from_vec(2, 2, 2, vec![0.5; 8]);
        assert_eq!(argmax_labels(&uniform).count_class(1), 0);
    }

    #[test]
    fn ema_endpoints_and_linearity() {
        let net = small();
        let s: ModelState<f64> = net.init(&mut ChaCha8Rng::seed_from_u64(1));
        let t0: ModelState<f64> = net.init(&mut ChaCha8Rng::seed_from_u64(2));

        let mut t = t0.clone();
        ema_update(&mut t, &s, 0.0).unwrap();
        assert!(t.iter_scalars().eq(s.iter_scalars()));
        assert_eq!(t.iteration, 1);

        let mut t = t0.clone();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert!(t.iter_scalars().eq(t0.iter_scalars()));

        let lam = 0.99;
        let mut twice = t0.clone();
        ema_update(&mut twice, &s, lam).unwrap();
        ema_update(&mut twice, &s, lam).unwrap();
        let mut once = t0.clone();
        ema_update(&mut once, &s, lam * lam).unwrap();
        for (a, b) in twice.iter_scalars().zip(once.iter_scalars()) {
            assert!((a - b).abs() < 1e-12);
        }

        assert!(ema_update(&mut t0.clone(), &s, 1.5).is_err());
        let other: ModelState<f64> = WNet::new(NetworkConfig::new(2, 2, (16, 16)))
            .unwrap()
            .init(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(ema_update(&mut t0.clone(), &other, 0.5).is_err());
    }

    #[test]
    fn predict_dataset_restores_resolution() {
        let net = small();
        let st: ModelState<f64> = net.init(&mut ChaCha8Rng::seed_from_u64(3));
        let s = ImageSample::gray("a", crate::data::Domain::Target, image(23, 19, 4), None).unwrap();
        let p = net.predict_dataset(&st, &[s]).unwrap();
        assert_eq!((p[0].c, p[0].h, p[0].w), (2, 19, 23));
        let n = p[0].hw();
        for j in 0..n {
            assert!((p[0].data[j] + p[0].data[n + j] - 1.0).abs() < 1e-12);
        }
    }

    /// Scalar test loss L = <g, probs> + <q, features>.
    fn probe_loss(net: &WNet, st: &ModelState<f64>, x: &Plane<f64>, g: &Tensor<f64>, q: &Tensor<f64>) -> f64 {
        let out = net.forward(st, x).unwrap();
        let a: f64 = out.probs.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let b: f64 = out.features.data.iter().zip(&q.data).map(|(a, b)| a * b).sum();
        a + b
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let st: ModelState<f64> = net.init(&mut rng);
        let x = image(16, 16, 6);
        let g = Tensor::from_vec(2, 16, 16, (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let q = Tensor::from_vec(8, 8, 8, (0..512).map(|_| rng.gen_range(-0.1..0.1)).collect());
        let (_, trace) = net.forward_train(&st, &x).unwrap();
        let mut grads = st.zeros_like();
        net.backward(&st, &trace, &g, Some(&q), &mut grads);

        let eps = 1e-5;
        let (mut num, mut den) = (0.0f64, 0.0f64);
        for (pi, p) in st.params.iter().enumerate() {
            for k in (0..p.data.len()).step_by(1 + p.data.len() / 6) {
                let mut plus = st.clone();
                plus.params[pi].data[k] += eps;
                let mut minus = st.clone();
                minus.params[pi].data[k] -= eps;
                let fd = (probe_loss(&net, &plus, &x, &g, &q) - probe_loss(&net, &minus, &x, &g, &q)) / (2.0 * eps);
                let an = grads.params[pi].data[k];
                num += (fd - an).powi(2);
                den += fd.powi(2).max(an.powi(2));
            }
        }
        let rel = (num / den).sqrt();
        assert!(rel < 1e-4, "relative gradient error {rel}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn probabilities_form_a_simplex(seed in any::<u64>()) {
            let net = WNet::new(NetworkConfig::new(2, 2, (8, 8))).unwrap();
            let st: ModelState<f64> = net.init(&mut ChaCha8Rng::seed_from_u64(seed));
            let out = net.forward(&st, &image(8, 8, seed ^ 7)).unwrap();
            let n = out.probs.hw();
            for j in 0..n {
                let s = out.probs.data[j] + out.probs.data[n + j];
                prop_assert!((s - 1.0).abs() < 1e-6);
                prop_assert!(out.probs.data[j] >= 0.0);
            }
            prop_assert!(out.features.all_finite());
        }
    }
}
