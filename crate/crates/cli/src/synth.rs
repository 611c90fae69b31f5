use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use ida_core::data::synth::{foreground_fraction, mean_intensity, synthesize_domains, DomainStyle, SynthCounts};
use ida_core::data::{write_sample, ImageSample};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::UsageError;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Dataset root to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Training images per domain.
    #[arg(long, default_value_t = 60)]
    pub n: usize,
    /// Labeled source validation images.
    #[arg(long, default_value_t = 0)]
    pub n_val: usize,
    /// Labeled target test images.
    #[arg(long, default_value_t = 20)]
    pub n_eval: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// TOML file with optional `[source]` and `[target]` tables overriding
    /// fields of the retina-like and cam-like presets.
    #[arg(long)]
    pub styles: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainStats {
    pub images: usize,
    pub mean_intensity: f64,
    pub foreground_fraction: f64,
}

/// `synth.json`, written next to the two domain directories. It carries no
/// timestamps so reruns are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub seed: u64,
    pub counts: SynthCounts,
    pub source_style: DomainStyle,
    pub target_style: DomainStyle,
    pub source: DomainStats,
    pub target: DomainStats,
    /// Source minus target mean intensity.
    pub intensity_margin: f64,
}

fn patch_style(base: DomainStyle, patch: Option<&Value>, which: &str) -> Result<DomainStyle> {
    let Some(patch) = patch else { return Ok(base) };
    let Value::Table(patch) = patch else {
        return Err(UsageError(format!("[{which}] must be a table")).into());
    };
    let mut table = Table::try_from(&base).expect("style serializes");
    for (k, v) in patch {
        if !table.contains_key(k) {
            return Err(UsageError(format!("unknown style key {which}.{k}")).into());
        }
        table.insert(k.clone(), v.clone());
    }
    Value::Table(table)
        .try_into()
        .map_err(|e| UsageError(format!("invalid [{which}] style: {e}")).into())
}

pub fn styles(args: &SynthArgs) -> Result<(DomainStyle, DomainStyle)> {
    let src = DomainStyle::retina_like(args.size);
    let tgt = DomainStyle::cam_like(args.size);
    let Some(path) = &args.styles else { return Ok((src, tgt)) };
    let text = fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read {}: {e}", path.display())))?;
    let table: Table = text
        .parse()
        .map_err(|e| UsageError(format!("{} is not valid TOML: {e}", path.display())))?;
    if let Some(k) = table.keys().find(|k| *k != "source" && *k != "target") {
        return Err(UsageError(format!("unknown table [{k}] in {}", path.display())).into());
    }
    Ok((
        patch_style(src, table.get("source"), "source")?,
        patch_style(tgt, table.get("target"), "target")?,
    ))
}

fn write_split(dir: &Path, samples: &[ImageSample<f64>]) -> Result<()> {
    fs::create_dir_all(dir.join("images")).with_context(|| format!("creating {}", dir.display()))?;
    for s in samples {
        write_sample(dir, s)?;
    }
    Ok(())
}

pub fn run(args: &SynthArgs) -> Result<SynthRecord> {
    if args.n == 0 {
        return Err(UsageError("--n must be at least 1".into()).into());
    }
    let (source_style, target_style) = styles(args)?;
    let counts = SynthCounts {
        source_train: args.n,
        source_val: args.n_val,
        target_train: args.n,
        target_test: args.n_eval,
    };
    let data = synthesize_domains::<f64>(&source_style, &target_style, counts, args.seed)?;

    let source = DomainStats {
        images: data.source_train.len() + data.source_val.len(),
        mean_intensity: mean_intensity(&[data.source_train.as_slice(), &data.source_val].concat()),
        foreground_fraction: foreground_fraction(
            data.source_train.iter().chain(&data.source_val).filter_map(|s| s.label.as_ref()),
        ),
    };
    let target = DomainStats {
        images: data.target_train.len() + data.target_test.len(),
        mean_intensity: mean_intensity(&[data.target_train.as_slice(), &data.target_test].concat()),
        foreground_fraction: foreground_fraction(
            data.target_train_labels
                .iter()
                .chain(data.target_test.iter().filter_map(|s| s.label.as_ref())),
        ),
    };

    let root = &args.out;
    write_split(&root.join("source/train"), &data.source_train)?;
    if !data.source_val.is_empty() {
        write_split(&root.join("source/val"), &data.source_val)?;
    }
    write_split(&root.join("target/train"), &data.target_train)?;
    if !data.target_test.is_empty() {
        write_split(&root.join("target/test"), &data.target_test)?;
    }
    let record = SynthRecord {
        seed: args.seed,
        counts,
        intensity_margin: source.mean_intensity - target.mean_intensity,
        source_style,
        target_style,
        source,
        target,
    };
    let mut bytes = serde_json::to_vec_pretty(&record)?;
    bytes.push(b'\n');
    fs::write(root.join("synth.json"), bytes).with_context(|| format!("writing {}", root.display()))?;

    println!("domain  images  mean_intensity  foreground");
    for (name, s) in [("source", &record.source), ("target", &record.target)] {
        println!(
            "{name:<7} {:>6}  {:>14.4}  {:>10.4}",
            s.images, s.mean_intensity, s.foreground_fraction
        );
    }
    println!("mean intensity margin (source - target): {:+.4}", record.intensity_margin);
    Ok(record)
}
