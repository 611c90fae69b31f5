//! Dataset loading, the two preprocessing paths (whole-image resize and
//! random crop), grayscale conversion, augmentation and quad sampling.

mod io;
pub mod synth;
mod transform;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IdaError, Result};
use crate::plane::{LabelPlane, Plane};
use crate::scalar::Scalar;

pub use io::{load_dataset, save_label_png, save_plane_png, write_sample, LoadedDataset, Rejection};
pub use transform::{augment, random_crop, resize_bilinear, resize_whole, to_grayscale};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

/// Image intensities in `[0, 1]`, either already single channel or RGB.
#[derive(Debug, Clone, PartialEq)]
pub enum Pixels<T> {
    Gray(Plane<T>),
    Rgb([Plane<T>; 3]),
}

impl<T: Copy> Pixels<T> {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Pixels::Gray(p) => p.dims(),
            Pixels::Rgb(ch) => ch[0].dims(),
        }
    }

    pub fn gray(&self) -> Option<&Plane<T>> {
        match self {
            Pixels::Gray(p) => Some(p),
            Pixels::Rgb(_) => None,
        }
    }

    pub(crate) fn map_planes(&self, mut f: impl FnMut(&Plane<T>) -> Plane<T>) -> Pixels<T> {
        match self {
            Pixels::Gray(p) => Pixels::Gray(f(p)),
            Pixels::Rgb([r, g, b]) => Pixels::Rgb([f(r), f(g), f(b)]),
        }
    }
}

/// One image plane with optional label and identity metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample<T> {
    pub pixels: Pixels<T>,
    pub label: Option<LabelPlane>,
    pub domain: Domain,
    pub id: String,
}

impl<T: Scalar> ImageSample<T> {
    pub fn new(
        pixels: Pixels<T>,
        label: Option<LabelPlane>,
        domain: Domain,
        id: impl Into<String>,
    ) -> Result<Self> {
        let dims = pixels.dims();
        if let Some(label) = &label {
            if label.dims() != dims {
                return Err(IdaError::shape(
                    format!("label {}x{}", dims.0, dims.1),
                    format!("{}x{}", label.width(), label.height()),
                ));
            }
        }
        Ok(ImageSample {
            pixels,
            label,
            domain,
            id: id.into(),
        })
    }

    pub fn gray(id: impl Into<String>, domain: Domain, pixels: Plane<T>, label: Option<LabelPlane>) -> Result<Self> {
        Self::new(Pixels::Gray(pixels), label, domain, id)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.pixels.dims()
    }

    /// Grayscale plane; panics on RGB samples, which must be converted first.
    pub fn plane(&self) -> &Plane<T> {
        self.pixels
            .gray()
            .expect("sample must be converted to grayscale before use")
    }

    pub fn without_label(mut self) -> Self {
        self.label = None;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub color_jitter: bool,
    /// Brightness offset drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast scale drawn from `[1 - contrast, 1 + contrast]`.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            horizontal_flip: true,
            vertical_flip: true,
            color_jitter: true,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            horizontal_flip: false,
            vertical_flip: false,
            color_jitter: false,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// `(width, height)` of every training plane.
    pub train_size: (usize, usize),
    pub grayscale_weights: [f64; 3],
    pub augment: AugmentConfig,
    pub seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            train_size: (384, 384),
            grayscale_weights: [0.299, 0.587, 0.114],
            augment: AugmentConfig::default(),
            seed: 0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = self.train_size;
        if w == 0 || h == 0 {
            return Err(IdaError::Config(format!("train_size must be positive, got {w}x{h}")));
        }
        let sum: f64 = self.grayscale_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 || self.grayscale_weights.iter().any(|&g| g < 0.0) {
            return Err(IdaError::Config(format!(
                "grayscale weights must be nonnegative and sum to 1, got {:?}",
                self.grayscale_weights
            )));
        }
        if self.augment.brightness < 0.0 || self.augment.contrast < 0.0 {
            return Err(IdaError::Config("jitter amplitudes must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Which preprocessing path feeds the "whole" and "patch" slots of a quad.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputStrategy {
    /// Random crops in both slots.
    Patch,
    /// Whole-image resizes in both slots.
    Whole,
    /// Resize for the whole slot, crop for the patch slot.
    #[default]
    Both,
}

/// The four preprocessed planes of one translation draw.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadBatch<T> {
    /// Resized source sample (labeled).
    pub sr: ImageSample<T>,
    /// Cropped source patch (labeled).
    pub sp: ImageSample<T>,
    /// Resized target sample.
    pub tr: ImageSample<T>,
    /// Cropped target patch.
    pub tp: ImageSample<T>,
}

impl<T: Scalar> QuadBatch<T> {
    pub fn y_sr(&self) -> &LabelPlane {
        self.sr.label.as_ref().expect("source whole carries a label")
    }

    pub fn y_sp(&self) -> &LabelPlane {
        self.sp.label.as_ref().expect("source patch carries a label")
    }
}

/// Resize (`whole`) or crop, then grayscale and augment.
pub fn preprocess_one<T: Scalar, R: Rng + ?Sized>(
    s: &ImageSample<T>,
    whole: bool,
    cfg: &PreprocessConfig,
    rng: &mut R,
) -> Result<ImageSample<T>> {
    let geo = if whole {
        resize_whole(s, cfg)?
    } else {
        random_crop(s, cfg, rng)
    };
    let gray = to_grayscale(&geo, cfg);
    Ok(augment(&gray, cfg, rng))
}

/// Draws two source and two target samples (with replacement) and runs
/// them through resize/crop, grayscale and augmentation.
pub fn sample_quad<T: Scalar, R: Rng + ?Sized>(
    source: &[ImageSample<T>],
    target: &[ImageSample<T>],
    cfg: &PreprocessConfig,
    input: InputStrategy,
    rng: &mut R,
) -> Result<QuadBatch<T>> {
    if source.is_empty() || target.is_empty() {
        return Err(IdaError::InvalidArgument(
            "sample_quad needs non-empty source and target lists".into(),
        ));
    }
    let i = rng.gen_range(0..source.len());
    let j = rng.gen_range(0..source.len());
    let k = rng.gen_range(0..target.len());
    let l = rng.gen_range(0..target.len());
    let (r_whole, p_whole) = match input {
        InputStrategy::Both => (true, false),
        InputStrategy::Whole => (true, true),
        InputStrategy::Patch => (false, false),
    };
    for idx in [i, j] {
        if source[idx].label.is_none() {
            return Err(IdaError::InvalidArgument(format!(
                "source sample {} has no label",
                source[idx].id
            )));
        }
    }
    let sr = preprocess_one(&source[i], r_whole, cfg, rng)?;
    let sp = preprocess_one(&source[j], p_whole, cfg, rng)?;
    let tr = preprocess_one(&target[k], r_whole, cfg, rng)?.without_label();
    let tp = preprocess_one(&target[l], p_whole, cfg, rng)?.without_label();
    Ok(QuadBatch { sr, sp, tr, tp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(id: &str, domain: Domain, w: usize, h: usize, labeled: bool) -> ImageSample<f64> {
        let px = Plane::from_fn(w, h, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        let label = labeled.then(|| Plane::from_fn(w, h, |x, y| ((x + y) % 5 == 0) as u8));
        ImageSample::gray(id, domain, px, label).unwrap()
    }

    fn cfg() -> PreprocessConfig {
        PreprocessConfig {
            train_size: (16, 12),
            ..Default::default()
        }
    }

    #[test]
    fn label_shape_must_match() {
        let px = Plane::filled(4, 4, 0.5f64);
        let label = Plane::filled(4, 3, 0u8);
        assert!(ImageSample::gray("x", Domain::Source, px, Some(label)).is_err());
    }

    #[test]
    fn quad_from_singletons_has_uniform_shape() {
        let src = vec![sample("s", Domain::Source, 30, 20, true)];
        let tgt = vec![sample("t", Domain::Target, 25, 40, false)];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = sample_quad(&src, &tgt, &cfg(), InputStrategy::Both, &mut rng).unwrap();
        for s in [&q.sr, &q.sp, &q.tr, &q.tp] {
            assert_eq!(s.dims(), (16, 12));
            assert!(s.plane().as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(q.sr.label.is_some() && q.sp.label.is_some());
        assert!(q.tr.label.is_none() && q.tp.label.is_none());
        assert_eq!(q.sr.id, q.sp.id);
    }

    #[test]
    fn quad_replays_under_fixed_seed() {
        let src: Vec<_> = (0..3).map(|i| sample(&format!("s{i}"), Domain::Source, 30, 20, true)).collect();
        let tgt: Vec<_> = (0..3).map(|i| sample(&format!("t{i}"), Domain::Target, 20, 30, false)).collect();
        let a = sample_quad(&src, &tgt, &cfg(), InputStrategy::Both, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_quad(&src, &tgt, &cfg(), InputStrategy::Both, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_lists_are_rejected() {
        let src = vec![sample("s", Domain::Source, 30, 20, true)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_quad::<f64, _>(&src, &[], &cfg(), InputStrategy::Both, &mut rng).is_err());
        assert!(sample_quad::<f64, _>(&[], &src, &cfg(), InputStrategy::Both, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        assert!(c.validate().is_ok());
        c.grayscale_weights = [0.5, 0.5, 0.5];
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.train_size = (0, 3);
        assert!(c.validate().is_err());
    }
}
