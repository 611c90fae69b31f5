//! Dataset root layout: `<root>/source/{train,val}` and `<root>/target/{train,test}`,
//! each split holding `images/` and (when labeled) `masks/`.

use std::path::{Path, PathBuf};

use anyhow::Result;
use ida_core::data::{load_dataset, to_grayscale, Domain, ImageSample, PreprocessConfig, Split};
use ida_core::Scalar;
use log::{info, warn};

use crate::UsageError;

pub fn domain_dir(root: &Path, domain: Domain) -> PathBuf {
    root.join(match domain {
        Domain::Source => "source",
        Domain::Target => "target",
    })
}

fn split_exists(root: &Path, domain: Domain, split: Split) -> bool {
    domain_dir(root, domain).join(split.dir_name()).join("images").is_dir()
}

/// Loads one split and converts it to single-channel with the configured weights.
pub fn load_split<T: Scalar>(
    root: &Path,
    domain: Domain,
    split: Split,
    prep: &PreprocessConfig,
) -> Result<Vec<ImageSample<T>>> {
    let loaded = load_dataset::<T>(&domain_dir(root, domain), domain, split)?;
    for r in &loaded.rejected {
        warn!("skipped {}: {}", r.file.display(), r.reason);
    }
    info!(
        "{} {split}: {} images ({} rejected)",
        domain_dir(root, domain).display(),
        loaded.samples.len(),
        loaded.rejected.len()
    );
    Ok(loaded.samples.iter().map(|s| to_grayscale(s, prep)).collect())
}

/// Loads a split when its directory exists; empty otherwise.
pub fn load_optional<T: Scalar>(
    root: &Path,
    domain: Domain,
    split: Split,
    prep: &PreprocessConfig,
) -> Result<Vec<ImageSample<T>>> {
    if split_exists(root, domain, split) {
        load_split(root, domain, split, prep)
    } else {
        Ok(Vec::new())
    }
}

/// Everything a training command reads.
pub struct TrainingData<T> {
    pub source: Vec<ImageSample<T>>,
    pub source_val: Vec<ImageSample<T>>,
    pub target: Vec<ImageSample<T>>,
    pub target_eval: Vec<ImageSample<T>>,
}

impl<T: Scalar> TrainingData<T> {
    /// Source training data is required; target training data only when
    /// `need_target` is set. Validation and evaluation splits are optional.
    pub fn load(root: &Path, prep: &PreprocessConfig, need_target: bool) -> Result<Self> {
        if !root.is_dir() {
            return Err(UsageError(format!("dataset root {} does not exist", root.display())).into());
        }
        let source = load_split(root, Domain::Source, Split::Train, prep)?;
        if source.is_empty() {
            return Err(UsageError(format!("no source training images under {}", root.display())).into());
        }
        let target = if need_target {
            let t = load_split(root, Domain::Target, Split::Train, prep)?;
            if t.is_empty() {
                return Err(UsageError(format!("no target training images under {}", root.display())).into());
            }
            t
        } else {
            Vec::new()
        };
        Ok(TrainingData {
            source,
            source_val: load_optional(root, Domain::Source, Split::Val, prep)?,
            target,
            target_eval: if need_target {
                load_optional(root, Domain::Target, Split::Test, prep)?
            } else {
                Vec::new()
            },
        })
    }
}
