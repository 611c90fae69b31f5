use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, Luma};

use super::{Domain, ImageSample, Pixels, Split};
use crate::error::{IdaError, Result};
use crate::plane::{LabelPlane, Plane};
use crate::scalar::Scalar;

const IMAGE_EXTENSIONS: &[&str] = &["png", "tif", "tiff", "gif", "jpg", "jpeg", "bmp", "ppm"];

/// A file that could not be turned into a sample.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub file: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct LoadedDataset<T> {
    pub samples: Vec<ImageSample<T>>,
    pub rejected: Vec<Rejection>,
}

fn image_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).map_err(|e| IdaError::io(dir, e))? {
        let path = entry.map_err(|e| IdaError::io(dir, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some(e) if IMAGE_EXTENSIONS.contains(&e)) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

fn decode(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| IdaError::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn to_pixels<T: Scalar>(img: &DynamicImage) -> Pixels<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = |v: u8| T::from_f64_lossy(v as f64 / 255.0);
    if img.color().has_color() {
        let rgb = img.to_rgb8();
        let channel = |c: usize| Plane::from_fn(w, h, |x, y| scale(rgb.get_pixel(x as u32, y as u32)[c]));
        Pixels::Rgb([channel(0), channel(1), channel(2)])
    } else {
        let gray = img.to_luma8();
        Pixels::Gray(Plane::from_fn(w, h, |x, y| scale(gray.get_pixel(x as u32, y as u32)[0])))
    }
}

/// 8-bit mask binarized at 127: values above become class 1.
fn to_label(img: &DynamicImage) -> LabelPlane {
    let gray = img.to_luma8();
    Plane::from_fn(gray.width() as usize, gray.height() as usize, |x, y| {
        (gray.get_pixel(x as u32, y as u32)[0] > 127) as u8
    })
}

/// Loads `root/<split>/images` (and `root/<split>/masks` for labeled splits).
///
/// Images and masks are matched by file stem. The target training split is
/// always returned unlabeled. Samples come back sorted by id.
pub fn load_dataset<T: Scalar>(root: &Path, domain: Domain, split: Split) -> Result<LoadedDataset<T>> {
    let base = root.join(split.dir_name());
    let images_dir = base.join("images");
    if !images_dir.is_dir() {
        return Err(IdaError::Config(format!(
            "dataset directory {} does not exist",
            images_dir.display()
        )));
    }
    let labeled = !(domain == Domain::Target && split == Split::Train);
    let masks_dir = base.join("masks");
    if labeled && !masks_dir.is_dir() {
        return Err(IdaError::Config(format!(
            "labeled split needs a mask directory at {}",
            masks_dir.display()
        )));
    }
    let images = image_files(&images_dir)?;
    if images.is_empty() {
        log::warn!("no images found under {}", images_dir.display());
    }
    let masks = if labeled {
        image_files(&masks_dir)?
    } else {
        BTreeMap::new()
    };

    let mut samples = Vec::with_capacity(images.len());
    let mut rejected = Vec::new();
    for (id, path) in images {
        let img = match decode(&path) {
            Ok(img) => img,
            Err(e) => {
                rejected.push(Rejection {
                    file: path,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let pixels = to_pixels::<T>(&img);
        let label = if labeled {
            let Some(mask_path) = masks.get(&id) else {
                rejected.push(Rejection {
                    file: path,
                    reason: "no mask with matching name".into(),
                });
                continue;
            };
            match decode(mask_path) {
                Ok(m) => Some(to_label(&m)),
                Err(e) => {
                    rejected.push(Rejection {
                        file: mask_path.clone(),
                        reason: e.to_string(),
                    });
                    continue;
                }
            }
        } else {
            None
        };
        match ImageSample::new(pixels, label, domain, id) {
            Ok(s) => samples.push(s),
            Err(e) => rejected.push(Rejection {
                file: path,
                reason: e.to_string(),
            }),
        }
    }
    for r in &rejected {
        log::warn!("rejected {}: {}", r.file.display(), r.reason);
    }
    Ok(LoadedDataset { samples, rejected })
}

pub(crate) fn plane_to_gray8<T: Scalar>(p: &Plane<T>) -> GrayImage {
    GrayImage::from_fn(p.width() as u32, p.height() as u32, |x, y| {
        let v = p.get(x as usize, y as usize).as_f64().clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    })
}

pub(crate) fn save_png(img: &GrayImage, path: &Path) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| IdaError::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

/// Saves a plane of `[0, 1]` values as an 8-bit grayscale PNG.
pub fn save_plane_png<T: Scalar>(path: &Path, plane: &Plane<T>) -> Result<()> {
    save_png(&plane_to_gray8(plane), path)
}

/// Saves a label plane as a 0/255 PNG (any nonzero class becomes 255).
pub fn save_label_png(path: &Path, label: &LabelPlane) -> Result<()> {
    let img = GrayImage::from_fn(label.width() as u32, label.height() as u32, |x, y| {
        Luma([if label.get(x as usize, y as usize) > 0 { 255 } else { 0 }])
    });
    save_png(&img, path)
}

/// Writes a grayscale sample as `images/<id>.png` and, when labeled,
/// `masks/<id>.png` (0/255) under `dir`.
pub fn write_sample<T: Scalar>(dir: &Path, sample: &ImageSample<T>) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| IdaError::io(&images, e))?;
    save_png(&plane_to_gray8(sample.plane()), &images.join(format!("{}.png", sample.id)))?;
    if let Some(label) = &sample.label {
        let masks = dir.join("masks");
        fs::create_dir_all(&masks).map_err(|e| IdaError::io(&masks, e))?;
        save_label_png(&masks.join(format!("{}.png", sample.id)), label)?;
    }
    Ok(())
}
