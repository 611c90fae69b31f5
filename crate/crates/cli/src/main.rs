//! `ida`: synthesize data, pre-train, adapt and evaluate vessel segmenters.

mod datasets;
mod evaluate;
mod logger;
mod manifest;
mod settings;
mod synth;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ida_core::IdaError;

/// Bad flags, config or paths; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "ida", version, about = "Cross-domain vessel segmentation with intermediate-domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic two-domain dataset.
    Synth(synth::SynthArgs),
    /// Supervised pre-training on the source domain.
    Pretrain(train::PretrainArgs),
    /// Teacher-student adaptation to the target domain.
    Adapt(train::AdaptArgs),
    /// Score a checkpoint on a labeled split.
    Evaluate(evaluate::EvaluateArgs),
}

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<IdaError>() {
            return match e {
                IdaError::Config(_) | IdaError::InvalidArgument(_) | IdaError::CheckpointVersion { .. } => EXIT_USAGE,
                IdaError::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_FAILURE,
            };
        }
    }
    EXIT_FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    logger::init(std::env::var(settings::LOG_ENV).ok().as_deref());
    let result = match &cli.command {
        Command::Synth(a) => synth::run(a).map(|_| ()),
        Command::Pretrain(a) => train::pretrain(a),
        Command::Adapt(a) => train::adapt(a),
        Command::Evaluate(a) => evaluate::run(a).map(|_| ()),
    };
    let code = match result {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e:#}");
            exit_code(&e)
        }
    };
    logger::detach_file();
    ExitCode::from(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_map_to_exit_codes() {
        let usage: anyhow::Error = UsageError("x".into()).into();
        assert_eq!(exit_code(&usage), EXIT_USAGE);
        let config: anyhow::Error = IdaError::Config("x".into()).into();
        assert_eq!(exit_code(&config.context("while loading")), EXIT_USAGE);
        let version: anyhow::Error = IdaError::CheckpointVersion { found: 9, expected: 1 }.into();
        assert_eq!(exit_code(&version), EXIT_USAGE);
        let numeric: anyhow::Error = IdaError::Numeric("nan".into()).into();
        assert_eq!(exit_code(&numeric), EXIT_NUMERIC);
        let other: anyhow::Error = IdaError::Integrity("x".into()).into();
        assert_eq!(exit_code(&other), EXIT_FAILURE);
    }
}
