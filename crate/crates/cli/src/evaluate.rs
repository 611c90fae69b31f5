use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use ida_core::checkpoint::load_checkpoint;
use ida_core::data::{resize_bilinear, save_label_png, save_plane_png, Domain, ImageSample, Pixels, Split};
use ida_core::metrics::{binarize, evaluate_dataset, predict_foreground, EvalReport};
use ida_core::segnet::WNet;
use ida_core::trainer::Dtype;
use ida_core::Scalar;
use log::info;

use crate::datasets::load_split;
use crate::train::{checkpoint_dtype, print_summary, METRICS_FILE, SUMMARY_FILE};
use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DomainArg {
    Source,
    Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset root (same layout as for training).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = DomainArg::Target)]
    pub domain: DomainArg,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Directory for metrics.csv and summary.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write `<id>_prob.png` and `<id>_mask.png` under `preds/`.
    #[arg(long)]
    pub dump_preds: bool,
    /// Score at this resolution (images bilinear, masks nearest), e.g. 96x96.
    /// Native resolution when omitted.
    #[arg(long, value_parser = parse_size)]
    pub eval_size: Option<(usize, usize)>,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected WxH, got {s:?}"))?;
    let w: usize = w.parse().map_err(|_| format!("bad width in {s:?}"))?;
    let h: usize = h.parse().map_err(|_| format!("bad height in {s:?}"))?;
    if w == 0 || h == 0 {
        return Err("sizes must be positive".into());
    }
    Ok((w, h))
}

pub fn run(args: &EvaluateArgs) -> Result<EvalReport> {
    match checkpoint_dtype(&args.checkpoint)? {
        Dtype::F32 => run_typed::<f32>(args),
        Dtype::F64 => run_typed::<f64>(args),
    }
}

fn resize_sample<T: Scalar>(s: &ImageSample<T>, (w, h): (usize, usize)) -> ImageSample<T> {
    ImageSample {
        pixels: Pixels::Gray(resize_bilinear(s.plane(), w, h)),
        label: s.label.as_ref().map(|l| l.resize_nearest(w, h)),
        domain: s.domain,
        id: s.id.clone(),
    }
}

fn run_typed<T: Scalar>(args: &EvaluateArgs) -> Result<EvalReport> {
    let ck = load_checkpoint::<T>(&args.checkpoint)?;
    let net = WNet::new(ck.config.network())?;
    let (domain, split) = (
        match args.domain {
            DomainArg::Source => Domain::Source,
            DomainArg::Target => Domain::Target,
        },
        match args.split {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        },
    );
    if domain == Domain::Target && split == Split::Train {
        return Err(UsageError("target/train is unlabeled and cannot be scored".into()).into());
    }
    if !args.data.is_dir() {
        return Err(UsageError(format!("dataset root {} does not exist", args.data.display())).into());
    }
    let mut samples = load_split::<T>(&args.data, domain, split, &ck.config.preprocess())?;
    if samples.is_empty() {
        return Err(UsageError("no images to evaluate".into()).into());
    }
    if let Some(size) = args.eval_size {
        samples = samples.iter().map(|s| resize_sample(s, size)).collect();
    }
    info!(
        "evaluating {} ({} model, iteration {}) on {} images",
        args.checkpoint.display(),
        ck.phase.as_str(),
        ck.iteration,
        samples.len()
    );
    let model = ck.output_model();
    let report = evaluate_dataset(&net, model, &samples)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    report.write_csv(&args.out.join(METRICS_FILE))?;
    report.write_summary_json(&args.out.join(SUMMARY_FILE))?;
    if args.dump_preds {
        let dir = args.out.join("preds");
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        for (s, p) in samples.iter().zip(predict_foreground(&net, model, &samples)?) {
            save_plane_png(&dir.join(format!("{}_prob.png", s.id)), &p)?;
            save_label_png(&dir.join(format!("{}_mask.png", s.id)), &binarize(&p))?;
        }
    }
    print_summary(Some(&report.summary), 1);
    Ok(report)
}
