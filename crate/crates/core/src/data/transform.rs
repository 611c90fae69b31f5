use rand::Rng;

use super::{ImageSample, Pixels, PreprocessConfig};
use crate::error::{IdaError, Result};
use crate::plane::Plane;
use crate::scalar::Scalar;

/// Bilinear resample with pixel-centre alignment; identity at equal size.
pub fn resize_bilinear<T: Scalar>(src: &Plane<T>, width: usize, height: usize) -> Plane<T> {
    let (sw, sh) = src.dims();
    if (sw, sh) == (width, height) {
        return src.clone();
    }
    let scale_x = sw as f64 / width as f64;
    let scale_y = sh as f64 / height as f64;
    let axis = |dst: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, pos - i0 as f64)
    };
    let xs: Vec<_> = (0..width).map(|x| axis(x, scale_x, sw)).collect();
    let ys: Vec<_> = (0..height).map(|y| axis(y, scale_y, sh)).collect();
    Plane::from_fn(width, height, |x, y| {
        let (x0, x1, fx) = xs[x];
        let (y0, y1, fy) = ys[y];
        let fx = T::from_f64_lossy(fx);
        let fy = T::from_f64_lossy(fy);
        let top = src.get(x0, y0) * (T::one() - fx) + src.get(x1, y0) * fx;
        let bottom = src.get(x0, y1) * (T::one() - fx) + src.get(x1, y1) * fx;
        top * (T::one() - fy) + bottom * fy
    })
}

/// Whole-image path: bilinear resample of intensities, nearest of labels.
pub fn resize_whole<T: Scalar>(s: &ImageSample<T>, cfg: &PreprocessConfig) -> Result<ImageSample<T>> {
    let (w, h) = s.dims();
    if w < 2 || h < 2 {
        return Err(IdaError::InvalidArgument(format!(
            "cannot resize degenerate {w}x{h} image {}",
            s.id
        )));
    }
    let (tw, th) = cfg.train_size;
    Ok(ImageSample {
        pixels: s.pixels.map_planes(|p| resize_bilinear(p, tw, th)),
        label: s.label.as_ref().map(|l| l.resize_nearest(tw, th)),
        domain: s.domain,
        id: s.id.clone(),
    })
}

/// Patch path: a uniformly placed `train_size` window at native resolution.
/// Images smaller than the window are reflect-padded first.
pub fn random_crop<T: Scalar, R: Rng + ?Sized>(
    s: &ImageSample<T>,
    cfg: &PreprocessConfig,
    rng: &mut R,
) -> ImageSample<T> {
    let (tw, th) = cfg.train_size;
    let pixels = s.pixels.map_planes(|p| p.reflect_pad_to(tw, th));
    let label = s.label.as_ref().map(|l| l.reflect_pad_to(tw, th));
    let (w, h) = pixels.dims();
    let x0 = rng.gen_range(0..=w - tw);
    let y0 = rng.gen_range(0..=h - th);
    ImageSample {
        pixels: pixels.map_planes(|p| p.crop(x0, y0, tw, th)),
        label: label.map(|l| l.crop(x0, y0, tw, th)),
        domain: s.domain,
        id: s.id.clone(),
    }
}

/// Weighted channel sum, clamped to `[0, 1]`. Gray input passes through.
pub fn to_grayscale<T: Scalar>(s: &ImageSample<T>, cfg: &PreprocessConfig) -> ImageSample<T> {
    let pixels = match &s.pixels {
        Pixels::Gray(p) => Pixels::Gray(p.clone()),
        Pixels::Rgb([r, g, b]) => {
            let [wr, wg, wb] = cfg.grayscale_weights.map(T::from_f64_lossy);
            let (w, h) = r.dims();
            let data = r
                .as_slice()
                .iter()
                .zip(g.as_slice())
                .zip(b.as_slice())
                .map(|((&r, &g), &b)| (wr * r + wg * g + wb * b).max(T::zero()).min(T::one()))
                .collect();
            Pixels::Gray(Plane::from_vec(w, h, data).expect("channel planes share dims"))
        }
    };
    ImageSample {
        pixels,
        label: s.label.clone(),
        domain: s.domain,
        id: s.id.clone(),
    }
}

/// Random flips (pixels and label alike), then brightness/contrast jitter
/// on pixels only.
pub fn augment<T: Scalar, R: Rng + ?Sized>(
    s: &ImageSample<T>,
    cfg: &PreprocessConfig,
    rng: &mut R,
) -> ImageSample<T> {
    let aug = &cfg.augment;
    let mut pixels = s.plane().clone();
    let mut label = s.label.clone();
    if aug.horizontal_flip && rng.gen_bool(0.5) {
        pixels = pixels.flip_horizontal();
        label = label.map(|l| l.flip_horizontal());
    }
    if aug.vertical_flip && rng.gen_bool(0.5) {
        pixels = pixels.flip_vertical();
        label = label.map(|l| l.flip_vertical());
    }
    if aug.color_jitter {
        let offset = if aug.brightness > 0.0 {
            rng.gen_range(-aug.brightness..=aug.brightness)
        } else {
            0.0
        };
        let scale = if aug.contrast > 0.0 {
            rng.gen_range(1.0 - aug.contrast..=1.0 + aug.contrast)
        } else {
            1.0
        };
        let n = T::from_usize(pixels.len()).unwrap();
        let mean = pixels.as_slice().iter().copied().sum::<T>() / n;
        let offset = T::from_f64_lossy(offset);
        let scale = T::from_f64_lossy(scale);
        for v in pixels.as_mut_slice() {
            *v = ((*v - mean) * scale + mean + offset).max(T::zero()).min(T::one());
        }
    }
    ImageSample {
        pixels: Pixels::Gray(pixels),
        label,
        domain: s.domain,
        id: s.id.clone(),
    }
}
