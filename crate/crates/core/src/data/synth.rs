//! Procedural two-domain vessel images for desk-scale runs.
//!
//! Both presets share one branching random-walk tree process; they differ
//! only in rendering style (intensities, widths, texture, noise, blur and
//! field of view).

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Domain, ImageSample};
use crate::error::{IdaError, Result};
use crate::plane::{LabelPlane, Plane};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub background: f64,
    pub vessel: f64,
    /// Root vessel width range in pixels.
    pub thickness: (f64, f64),
    /// Maximum branching events per tree.
    pub branches: usize,
    pub noise_sigma: f64,
    /// Passes of a 3-tap binomial blur.
    pub blur_passes: usize,
    /// Amplitude of low-frequency background texture.
    pub texture_amplitude: f64,
    /// Texture lattice spacing in pixels.
    pub texture_scale: usize,
    /// Restrict content to a centred disc with a dark surround.
    pub fov_disc: bool,
    /// Foreground fraction the tree process grows towards.
    pub target_density: f64,
}

impl DomainStyle {
    /// Dark vessels on a bright disc, mild texture.
    pub fn retina_like(size: usize) -> Self {
        DomainStyle {
            name: "retina-like".into(),
            width: size,
            height: size,
            background: 0.62,
            vessel: 0.22,
            thickness: (2.0, 4.0),
            branches: 6,
            noise_sigma: 0.02,
            blur_passes: 1,
            texture_amplitude: 0.04,
            texture_scale: 24,
            fov_disc: true,
            target_density: 0.12,
        }
    }

    /// Lower-contrast, thinner vessels on a brighter full-frame background
    /// with coarser texture.
    pub fn cam_like(size: usize) -> Self {
        DomainStyle {
            name: "cam-like".into(),
            width: size,
            height: size,
            background: 0.52,
            vessel: 0.30,
            thickness: (1.5, 3.0),
            branches: 8,
            noise_sigma: 0.03,
            blur_passes: 1,
            texture_amplitude: 0.06,
            texture_scale: 16,
            fov_disc: false,
            target_density: 0.14,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(IdaError::Config(format!("domain style {}: {m}", self.name)));
        if self.width < 8 || self.height < 8 {
            return bad("images must be at least 8x8");
        }
        if !(0.0..=1.0).contains(&self.background) || !(0.0..=1.0).contains(&self.vessel) {
            return bad("intensities must lie in [0, 1]");
        }
        if self.thickness.0 <= 0.0 || self.thickness.1 < self.thickness.0 {
            return bad("thickness range must be positive and ordered");
        }
        if self.noise_sigma < 0.0 || self.texture_amplitude < 0.0 {
            return bad("noise and texture amplitudes must be nonnegative");
        }
        if !(0.0..1.0).contains(&self.target_density) {
            return bad("target density must lie in [0, 1)");
        }
        if self.texture_scale == 0 {
            return bad("texture scale must be positive");
        }
        Ok(())
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return false;
        }
        if self.fov_disc {
            let (cx, cy, r) = self.disc();
            (x - cx).powi(2) + (y - cy).powi(2) <= r * r
        } else {
            true
        }
    }

    fn disc(&self) -> (f64, f64, f64) {
        let cx = self.width as f64 / 2.0;
        let cy = self.height as f64 / 2.0;
        (cx, cy, cx.min(cy) - 1.0)
    }
}

struct Walker {
    x: f64,
    y: f64,
    angle: f64,
    thickness: f64,
    branches_left: usize,
}

fn stamp(mask: &mut LabelPlane, x: f64, y: f64, thickness: f64) {
    let r = (thickness / 2.0).max(0.5);
    let (w, h) = mask.dims();
    let x0 = (x - r).floor().max(0.0) as usize;
    let y0 = (y - r).floor().max(0.0) as usize;
    let x1 = ((x + r).ceil() as usize).min(w - 1);
    let y1 = ((y + r).ceil() as usize).min(h - 1);
    for py in y0..=y1 {
        for px in x0..=x1 {
            let dx = px as f64 + 0.5 - x;
            let dy = py as f64 + 0.5 - y;
            if dx * dx + dy * dy <= r * r {
                mask.set(px, py, 1);
            }
        }
    }
}

fn grow_tree<R: Rng + ?Sized>(style: &DomainStyle, mask: &mut LabelPlane, rng: &mut R) {
    // seed on the content boundary, heading roughly inwards
    let (cx, cy, radius) = style.disc();
    let phi = rng.gen_range(0.0..2.0 * PI);
    let (sx, sy) = if style.fov_disc {
        (cx + (radius - 1.0) * phi.cos(), cy + (radius - 1.0) * phi.sin())
    } else {
        let t = rng.gen_range(0.0..1.0);
        match rng.gen_range(0..4) {
            0 => (t * (style.width - 1) as f64, 0.5),
            1 => (t * (style.width - 1) as f64, style.height as f64 - 1.5),
            2 => (0.5, t * (style.height - 1) as f64),
            _ => (style.width as f64 - 1.5, t * (style.height - 1) as f64),
        }
    };
    let inward = (cy - sy).atan2(cx - sx) + rng.gen_range(-0.6..0.6);
    let turn = Normal::new(0.0, 0.12).unwrap();
    let mut stack = vec![Walker {
        x: sx,
        y: sy,
        angle: inward,
        thickness: rng.gen_range(style.thickness.0..=style.thickness.1),
        branches_left: style.branches,
    }];
    let max_steps = 2 * (style.width + style.height);
    while let Some(mut wk) = stack.pop() {
        for _ in 0..max_steps {
            if !style.inside(wk.x, wk.y) {
                break;
            }
            stamp(mask, wk.x, wk.y, wk.thickness);
            wk.angle += turn.sample(rng);
            wk.x += wk.angle.cos();
            wk.y += wk.angle.sin();
            wk.thickness = (wk.thickness * 0.996).max(1.0);
            if wk.branches_left > 0 && rng.gen_bool(0.025) {
                wk.branches_left -= 1;
                let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let child_branches = wk.branches_left / 2;
                wk.branches_left -= child_branches;
                stack.push(Walker {
                    x: wk.x,
                    y: wk.y,
                    angle: wk.angle + side * rng.gen_range(0.4..1.1),
                    thickness: (wk.thickness * 0.75).max(1.0),
                    branches_left: child_branches,
                });
            }
        }
    }
}

fn value_noise<R: Rng + ?Sized>(width: usize, height: usize, scale: usize, rng: &mut R) -> Plane<f64> {
    let gw = width / scale + 2;
    let gh = height / scale + 2;
    let lattice = Plane::from_fn(gw, gh, |_, _| rng.gen_range(-1.0..1.0));
    Plane::from_fn(width, height, |x, y| {
        let fx = x as f64 / scale as f64;
        let fy = y as f64 / scale as f64;
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        // smoothstep weights
        let (tx, ty) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
        let a = lattice.get(ix, iy) * (1.0 - tx) + lattice.get(ix + 1, iy) * tx;
        let b = lattice.get(ix, iy + 1) * (1.0 - tx) + lattice.get(ix + 1, iy + 1) * tx;
        a * (1.0 - ty) + b * ty
    })
}

/// `passes` rounds of the separable [1, 2, 1] / 4 kernel, edges clamped.
fn binomial_blur(p: &Plane<f64>, passes: usize) -> Plane<f64> {
    let (w, h) = p.dims();
    let mut out = p.clone();
    for _ in 0..passes {
        let src = out.clone();
        let horiz = Plane::from_fn(w, h, |x, y| {
            let l = src.get(x.saturating_sub(1), y);
            let r = src.get((x + 1).min(w - 1), y);
            0.25 * l + 0.5 * src.get(x, y) + 0.25 * r
        });
        out = Plane::from_fn(w, h, |x, y| {
            let u = horiz.get(x, y.saturating_sub(1));
            let d = horiz.get(x, (y + 1).min(h - 1));
            0.25 * u + 0.5 * horiz.get(x, y) + 0.25 * d
        });
    }
    out
}

fn render_one<T: Scalar, R: Rng + ?Sized>(style: &DomainStyle, rng: &mut R) -> (Plane<T>, LabelPlane) {
    let (w, h) = (style.width, style.height);
    let mut mask = Plane::filled(w, h, 0u8);
    let total = (w * h) as f64;
    for _ in 0..64 {
        if mask.count_class(1) as f64 / total >= style.target_density {
            break;
        }
        grow_tree(style, &mut mask, rng);
    }

    let texture = (style.texture_amplitude > 0.0)
        .then(|| value_noise(w, h, style.texture_scale, rng));
    let mut img = Plane::from_fn(w, h, |x, y| {
        if style.fov_disc && !style.inside(x as f64 + 0.5, y as f64 + 0.5) {
            return 0.0;
        }
        let mut v = style.background;
        if let Some(t) = &texture {
            v += style.texture_amplitude * t.get(x, y);
        }
        if mask.get(x, y) == 1 {
            v = style.vessel;
        }
        v
    });
    if style.blur_passes > 0 {
        img = binomial_blur(&img, style.blur_passes);
    }
    if style.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, style.noise_sigma).unwrap();
        for v in img.as_mut_slice() {
            *v += normal.sample(rng);
        }
    }
    (img.map(|v| T::from_f64_lossy(v.clamp(0.0, 1.0))), mask)
}

/// Renders `n` labeled images in `style`. `n = 0` yields an empty list.
pub fn generate_synthetic_domain<T: Scalar, R: Rng + ?Sized>(
    style: &DomainStyle,
    domain: Domain,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ImageSample<T>>> {
    style.validate()?;
    (0..n)
        .map(|i| {
            let (img, mask) = render_one::<T, _>(style, rng);
            ImageSample::gray(format!("{}_{i:04}", style.name), domain, img, Some(mask))
        })
        .collect()
}

/// Image counts for a synthetic two-domain dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthCounts {
    pub source_train: usize,
    pub source_val: usize,
    pub target_train: usize,
    pub target_test: usize,
}

impl Default for SynthCounts {
    fn default() -> Self {
        SynthCounts {
            source_train: 60,
            source_val: 0,
            target_train: 60,
            target_test: 20,
        }
    }
}

/// Source splits are labeled; the target training split is not.
#[derive(Debug, Clone)]
pub struct SynthDataset<T> {
    pub source_train: Vec<ImageSample<T>>,
    pub source_val: Vec<ImageSample<T>>,
    pub target_train: Vec<ImageSample<T>>,
    /// Ground truth of the target training images, kept for dataset
    /// statistics only.
    pub target_train_labels: Vec<LabelPlane>,
    pub target_test: Vec<ImageSample<T>>,
}

/// Renders both domains from one seed. Source and target draw from separate
/// generator streams, so changing one count leaves the other domain intact.
pub fn synthesize_domains<T: Scalar>(
    source: &DomainStyle,
    target: &DomainStyle,
    counts: SynthCounts,
    seed: u64,
) -> Result<SynthDataset<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    let mut src = generate_synthetic_domain(source, Domain::Source, counts.source_train + counts.source_val, &mut rng)?;
    rng.set_stream(12);
    rng.set_word_pos(0);
    let mut tgt = generate_synthetic_domain(target, Domain::Target, counts.target_train + counts.target_test, &mut rng)?;
    let source_val = src.split_off(counts.source_train);
    let target_test = tgt.split_off(counts.target_train);
    let target_train_labels = tgt.iter().filter_map(|s| s.label.clone()).collect();
    Ok(SynthDataset {
        source_train: src,
        source_val,
        target_train: tgt.into_iter().map(ImageSample::without_label).collect(),
        target_train_labels,
        target_test,
    })
}

/// Mean intensity over all pixels of a sample list.
pub fn mean_intensity<T: Scalar>(samples: &[ImageSample<T>]) -> f64 {
    let (sum, count) = samples.iter().fold((0.0, 0usize), |(s, c), x| {
        (
            s + x.plane().as_slice().iter().map(|v| v.as_f64()).sum::<f64>(),
            c + x.plane().len(),
        )
    });
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Mean label foreground fraction.
pub fn foreground_fraction<'a>(labels: impl IntoIterator<Item = &'a LabelPlane>) -> f64 {
    let (sum, n) = labels
        .into_iter()
        .fold((0.0, 0usize), |(s, n), l| (s + l.count_class(1) as f64 / l.len() as f64, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
