//! `pretrain` and `adapt`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use ida_core::checkpoint::{load_checkpoint, peek_header, save_checkpoint};
use ida_core::metrics::{aggregate_runs, EvalReport, SummaryFile, Stat};
use ida_core::segnet::ModelState;
use ida_core::trainer::{write_history_csv, Checkpoint, Datasets, Dtype, Phase, RunConfig, Trainer};
use ida_core::Scalar;
use log::info;
use toml::Value;

use crate::datasets::TrainingData;
use crate::logger;
use crate::manifest::{write_finished, RunManifest, MANIFEST_FILE};
use crate::settings::{
    apply_resume_overrides, config_toml, env_overrides, file_overrides, flag_override, inherit_architecture,
    parse_assignment, parse_value, resolve, Override, Preset, Resolved,
};
use crate::UsageError;

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "run.log";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Starting values before the config file, environment and flags apply.
    #[arg(long, value_enum, default_value_t = Preset::Default)]
    pub preset: Preset,
    /// Flat TOML file of config keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any config key, e.g. `--set lr=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Dataset root with `source/train` (and optionally `source/val`).
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// random, self_cut, vcl or self_cut+vcl.
    #[arg(long)]
    pub strategy: Option<String>,
    #[arg(long)]
    pub iterations: Option<u64>,
    /// Continue from a pre-training checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[command(flatten)]
    pub common: ConfigArgs,
    /// Dataset root with `source/train`, `target/train` and optionally `target/test`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Pre-trained checkpoint; pre-training runs first when omitted.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Independent runs with seeds `seed, seed+1, ...`; reports mean ± std.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Continue from an adaptation checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Translation strategy (bat_class_cut, cut_mix, class_mix, ...).
    #[arg(long)]
    pub strategy: Option<String>,
    /// Pre-training strategy for the inline pre-training run.
    #[arg(long)]
    pub pretrain_strategy: Option<String>,
    /// Side of the translation square in pixels.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub th_t2s: Option<f64>,
    #[arg(long)]
    pub th_s2t: Option<f64>,
    #[arg(long)]
    pub beta1: Option<f64>,
    #[arg(long)]
    pub beta2: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Disable the teacher-student loop (and everything built on it).
    #[arg(long)]
    pub no_self_training: bool,
    /// Disable intermediate-domain translation (also disables contrast).
    #[arg(long)]
    pub no_mrat: bool,
    /// Disable intermediate-domain contrastive learning.
    #[arg(long)]
    pub no_idcl: bool,
    /// patch, whole or both.
    #[arg(long)]
    pub input: Option<String>,
    /// idcl, vanilla or dcl.
    #[arg(long)]
    pub cl_variant: Option<String>,
    #[arg(long)]
    pub iterations: Option<u64>,
}

/// File, environment and flag layers; `named` are command-specific flags.
fn layers(common: &ConfigArgs, named: Vec<(&str, Value)>) -> Result<Vec<Vec<Override>>> {
    let file = match &common.config {
        Some(p) => file_overrides(p)?,
        None => Vec::new(),
    };
    let env = env_overrides(std::env::vars());
    let mut flags = Vec::new();
    for s in &common.set {
        let (k, v) = parse_assignment(s)?;
        flags.push(flag_override(&k, v));
    }
    if let Some(seed) = common.seed {
        flags.push(flag_override("seed", Value::Integer(seed as i64)));
    }
    for (k, v) in named {
        flags.push(flag_override(k, v));
    }
    Ok(vec![file, env, flags])
}

fn str_flag(out: &mut Vec<(&'static str, Value)>, key: &'static str, v: &Option<String>) {
    if let Some(v) = v {
        out.push((key, Value::String(v.clone())));
    }
}

fn num_flag<N: ToString>(out: &mut Vec<(&'static str, Value)>, key: &'static str, v: Option<N>) {
    if let Some(v) = v {
        out.push((key, parse_value(&v.to_string())));
    }
}

fn prepare_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    logger::attach_file(&out.join(LOG_FILE)).with_context(|| format!("opening log in {}", out.display()))?;
    Ok(())
}

/// Writes the manifest (a numbered sibling when resuming into a used directory).
fn write_manifest(out: &Path, manifest: &RunManifest, resuming: bool) -> Result<()> {
    let name = if resuming && out.join(MANIFEST_FILE).exists() {
        let mut k = 1;
        while out.join(format!("manifest.resume-{k}.json")).exists() {
            k += 1;
        }
        format!("manifest.resume-{k}.json")
    } else {
        MANIFEST_FILE.to_string()
    };
    let path = manifest.write_new(out, &name)?;
    info!("manifest written to {}", path.display());
    Ok(())
}

fn write_config(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join(CONFIG_FILE);
    fs::write(&path, config_toml(cfg)).with_context(|| format!("writing {}", path.display()))
}

fn standard_outputs(m: RunManifest) -> RunManifest {
    m.output("checkpoint", CHECKPOINT_FILE)
        .output("history", HISTORY_FILE)
        .output("config", CONFIG_FILE)
        .output("log", LOG_FILE)
}

fn persist<T: Scalar>(dir: &Path, state: &Checkpoint<T>) -> ida_core::Result<()> {
    save_checkpoint(&dir.join(CHECKPOINT_FILE), state)?;
    write_history_csv(&dir.join(HISTORY_FILE), &state.history)
}

fn load_resume<T: Scalar>(path: &Path, phase: Phase, layers: &[Vec<Override>]) -> Result<Checkpoint<T>> {
    let mut ck = load_checkpoint::<T>(path)?;
    if ck.phase != phase {
        return Err(UsageError(format!(
            "{} is a {} checkpoint, expected {}",
            path.display(),
            ck.phase.as_str(),
            phase.as_str()
        ))
        .into());
    }
    ck.config = apply_resume_overrides(&ck.config, layers)?;
    Ok(ck)
}

pub fn checkpoint_dtype(path: &Path) -> Result<Dtype> {
    if !path.is_file() {
        return Err(UsageError(format!("checkpoint {} does not exist", path.display())).into());
    }
    Ok(peek_header(path)?.config.dtype)
}


pub fn pretrain(args: &PretrainArgs) -> Result<()> {
    let mut named = Vec::new();
    str_flag(&mut named, "pretrain_strategy", &args.strategy);
    num_flag(&mut named, "pretrain_iterations", args.iterations);
    let layers = layers(&args.common, named)?;
    let dtype = match &args.resume {
        Some(p) => checkpoint_dtype(p)?,
        None => resolve(args.common.preset.config(), &layers)?.config.dtype,
    };
    match dtype {
        Dtype::F32 => pretrain_typed::<f32>(args, &layers),
        Dtype::F64 => pretrain_typed::<f64>(args, &layers),
    }
}

fn pretrain_typed<T: Scalar>(args: &PretrainArgs, layers: &[Vec<Override>]) -> Result<()> {
    let resume = match &args.resume {
        Some(p) => Some(load_resume::<T>(p, Phase::Pretrain, layers)?),
        None => None,
    };
    let cfg = match &resume {
        Some(ck) => ck.config.clone(),
        None => {
            let resolved = resolve(args.common.preset.config(), layers)?;
            resolved.warn_inert(&[Phase::Pretrain]);
            resolved.config
        }
    };
    cfg.validate()?;
    let data = TrainingData::<T>::load(&args.data, &cfg.preprocess(), false)?;
    let resumed = resume.is_some();
    let trainer = match resume {
        Some(ck) => Trainer::from_checkpoint(ck)?,
        None => Trainer::new_pretrain(cfg.clone(), &data.source)?,
    };
    prepare_dir(&args.out)?;
    let mut manifest = standard_outputs(RunManifest::new("pretrain", &cfg, vec![cfg.seed]).input("data", &args.data));
    manifest.resumed_from = args.resume.clone();
    write_manifest(&args.out, &manifest, resumed)?;
    write_config(&args.out, &cfg)?;
    let state = run_pretrain(trainer, &data, &args.out)?;
    write_finished(&args.out, state.iteration)?;
    if let Some(best) = state.best_score {
        println!("best source validation dice {best:.4}");
    }
    println!("pre-trained model written to {}", args.out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn run_pretrain<T: Scalar>(mut trainer: Trainer<T>, data: &TrainingData<T>, dir: &Path) -> Result<Checkpoint<T>> {
    info!(
        "pre-training ({}) for {} steps, seed {}",
        trainer.config().pretrain_strategy,
        trainer.config().pretrain_iterations,
        trainer.config().seed
    );
    let sets = Datasets {
        source: &data.source,
        source_val: &data.source_val,
        target: &[],
        target_eval: &[],
    };
    trainer.pretrain(sets, &mut |t| {
        info!("checkpoint at pre-training step {}", t.state.iteration);
        persist(dir, &t.state)
    })?;
    persist(dir, &trainer.state)?;
    Ok(trainer.state)
}


fn adapt_layers(args: &AdaptArgs) -> Result<Vec<Vec<Override>>> {
    let mut named = Vec::new();
    str_flag(&mut named, "translation_strategy", &args.strategy);
    str_flag(&mut named, "pretrain_strategy", &args.pretrain_strategy);
    num_flag(&mut named, "m", args.m);
    num_flag(&mut named, "th_t2s", args.th_t2s);
    num_flag(&mut named, "th_s2t", args.th_s2t);
    num_flag(&mut named, "beta1", args.beta1);
    num_flag(&mut named, "beta2", args.beta2);
    num_flag(&mut named, "gamma", args.gamma);
    str_flag(&mut named, "input_strategy", &args.input);
    str_flag(&mut named, "cl_variant", &args.cl_variant);
    num_flag(&mut named, "iterations", args.iterations);
    // Components depend on each other: contrast needs translated images,
    // translation needs teacher pseudo-labels.
    if args.no_self_training {
        named.push(("self_training", Value::Boolean(false)));
    }
    if args.no_self_training || args.no_mrat {
        named.push(("mrat", Value::Boolean(false)));
    }
    if args.no_self_training || args.no_mrat || args.no_idcl {
        named.push(("idcl", Value::Boolean(false)));
    }
    if args.no_mrat && !args.no_idcl {
        info!("--no-mrat also disables contrastive learning");
    }
    layers(&args.common, named)
}

pub fn adapt(args: &AdaptArgs) -> Result<()> {
    if args.seeds == 0 {
        return Err(UsageError("--seeds must be at least 1".into()).into());
    }
    if args.resume.is_some() && (args.seeds > 1 || args.pretrained.is_some()) {
        return Err(UsageError("--resume continues one run; drop --seeds and --pretrained".into()).into());
    }
    let layers = adapt_layers(args)?;
    let dtype = match (&args.resume, &args.pretrained) {
        (Some(p), _) | (None, Some(p)) => checkpoint_dtype(p)?,
        (None, None) => resolve(args.common.preset.config(), &layers)?.config.dtype,
    };
    match dtype {
        Dtype::F32 => adapt_typed::<f32>(args, &layers),
        Dtype::F64 => adapt_typed::<f64>(args, &layers),
    }
}

fn seed_dir(out: &Path, seeds: u64, seed: u64) -> PathBuf {
    if seeds == 1 {
        out.to_path_buf()
    } else {
        out.join(format!("seed-{seed}"))
    }
}

fn adapt_typed<T: Scalar>(args: &AdaptArgs, layers: &[Vec<Override>]) -> Result<()> {
    if let Some(p) = &args.resume {
        let ck = load_resume::<T>(p, Phase::Adapt, layers)?;
        let cfg = ck.config.clone();
        let data = TrainingData::<T>::load(&args.data, &cfg.preprocess(), true)?;
        prepare_dir(&args.out)?;
        let mut manifest = adapt_manifest(&cfg, vec![cfg.seed], args);
        manifest.resumed_from = Some(p.clone());
        write_manifest(&args.out, &manifest, true)?;
        write_config(&args.out, &cfg)?;
        let (state, report) = run_adapt(Trainer::from_checkpoint(ck)?, &data, &args.out)?;
        write_finished(&args.out, state.iteration)?;
        print_summary(report.as_ref().map(|r| r.summary.clone()).as_ref(), 1);
        return Ok(());
    }

    let mut resolved: Resolved = resolve(args.common.preset.config(), layers)?;
    let pretrained: Option<Checkpoint<T>> = match &args.pretrained {
        Some(p) => {
            let ck = load_checkpoint::<T>(p)?;
            inherit_architecture(&mut resolved, &ck.config);
            Some(ck)
        }
        None => None,
    };
    let phases: &[Phase] = if pretrained.is_some() {
        &[Phase::Adapt]
    } else {
        &[Phase::Pretrain, Phase::Adapt]
    };
    resolved.warn_inert(phases);
    let base = resolved.config;
    base.validate()?;
    let data = TrainingData::<T>::load(&args.data, &base.preprocess(), true)?;
    if data.target_eval.is_empty() {
        log::warn!("no target/test split; the adapted model will not be scored");
    }

    let seeds: Vec<u64> = (0..args.seeds).map(|i| base.seed + i).collect();
    prepare_dir(&args.out)?;
    let mut manifest = adapt_manifest(&base, seeds.clone(), args);
    if let Some(p) = &args.pretrained {
        manifest = manifest.input("pretrained", p);
    }
    if args.seeds > 1 {
        manifest = manifest.output("summary", SUMMARY_FILE);
    }
    write_manifest(&args.out, &manifest, false)?;
    write_config(&args.out, &base)?;

    let mut reports = Vec::new();
    for &seed in &seeds {
        let dir = seed_dir(&args.out, args.seeds, seed);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let cfg = RunConfig { seed, ..base.clone() };
        if args.seeds > 1 {
            write_config(&dir, &cfg)?;
        }
        let start: ModelState<T> = match &pretrained {
            Some(ck) => ck.output_model().clone(),
            None => {
                let pre_dir = dir.join("pretrain");
                fs::create_dir_all(&pre_dir).with_context(|| format!("creating {}", pre_dir.display()))?;
                let state = run_pretrain(Trainer::new_pretrain(cfg.clone(), &data.source)?, &data, &pre_dir)?;
                state.output_model().clone()
            }
        };
        let trainer = Trainer::new_adapt(cfg, &start, &data.source)?;
        let (_, report) = run_adapt(trainer, &data, &dir)?;
        if let Some(r) = report {
            reports.push(r);
        }
    }
    write_finished(&args.out, base.iterations)?;
    if reports.is_empty() {
        return Ok(());
    }
    if args.seeds > 1 {
        let stats = aggregate_runs(&reports);
        let summary = SummaryFile::from_stats(&stats, reports[0].per_image.len(), reports.len());
        let mut bytes = serde_json::to_vec_pretty(&summary)?;
        bytes.push(b'\n');
        fs::write(args.out.join(SUMMARY_FILE), bytes).context("writing summary.json")?;
        print_summary(Some(&stats), reports.len());
    } else {
        print_summary(Some(&reports[0].summary), 1);
    }
    Ok(())
}

fn adapt_manifest(cfg: &RunConfig, seeds: Vec<u64>, args: &AdaptArgs) -> RunManifest {
    let mut m = RunManifest::new("adapt", cfg, seeds).input("data", &args.data);
    if args.seeds == 1 {
        m = standard_outputs(m).output("metrics", METRICS_FILE).output("summary", SUMMARY_FILE);
    } else {
        m = m.output("config", CONFIG_FILE).output("log", LOG_FILE);
    }
    m
}

/// Adapts, saves, and scores the output model on the target test split.
fn run_adapt<T: Scalar>(
    mut trainer: Trainer<T>,
    data: &TrainingData<T>,
    dir: &Path,
) -> Result<(Checkpoint<T>, Option<EvalReport>)> {
    let cfg = trainer.config().clone();
    info!(
        "adapting for {} steps, seed {} (self-training {}, mrat {}, idcl {})",
        cfg.iterations, cfg.seed, cfg.self_training, cfg.mrat, cfg.idcl
    );
    let sets = Datasets {
        source: &data.source,
        source_val: &[],
        target: &data.target,
        target_eval: &data.target_eval,
    };
    trainer.adapt(sets, &mut |t| {
        info!("checkpoint at adaptation step {}", t.state.iteration);
        persist(dir, &t.state)
    })?;
    persist(dir, &trainer.state)?;
    let report = if data.target_eval.is_empty() {
        None
    } else {
        let r = trainer.evaluate(&data.target_eval)?;
        r.write_csv(&dir.join(METRICS_FILE))?;
        r.write_summary_json(&dir.join(SUMMARY_FILE))?;
        info!("seed {} target dice {:.4}", cfg.seed, r.mean("dice").unwrap_or(f64::NAN));
        Some(r)
    };
    Ok((trainer.state, report))
}

pub fn print_summary(stats: Option<&std::collections::BTreeMap<String, Stat>>, runs: usize) {
    let Some(stats) = stats else { return };
    let label = if runs > 1 { format!("mean ± std over {runs} runs") } else { "mean ± std over images".into() };
    println!("metric   {label}");
    for (name, s) in stats {
        match (s.mean, s.std) {
            (Some(m), Some(sd)) => println!("{name:<8} {m:.4} ± {sd:.4}"),
            _ => println!("{name:<8} n/a"),
        }
    }
}
