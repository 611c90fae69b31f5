//! Flat run configuration. Every key here is also a config-file key and an
//! `IDA_<KEY>` environment variable in the command-line tool.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, InputStrategy, PreprocessConfig};
use crate::error::{IdaError, Result};
use crate::idcl::ContrastConfig;
use crate::losses::LossWeights;
use crate::mrat::{MratOptions, TranslationStrategy};
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::segnet::NetworkConfig;

use super::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }
}

impl FromStr for Dtype {
    type Err = IdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Dtype::F32),
            "f64" => Ok(Dtype::F64),
            _ => Err(IdaError::Config(format!("unknown dtype {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PretrainStrategy {
    #[serde(rename = "random")]
    Random,
    #[serde(rename = "self_cut")]
    SelfCut,
    #[serde(rename = "vcl")]
    Vcl,
    #[default]
    #[serde(rename = "self_cut+vcl")]
    SelfCutVcl,
}

impl PretrainStrategy {
    pub const ALL: [PretrainStrategy; 4] = [
        PretrainStrategy::Random,
        PretrainStrategy::SelfCut,
        PretrainStrategy::Vcl,
        PretrainStrategy::SelfCutVcl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PretrainStrategy::Random => "random",
            PretrainStrategy::SelfCut => "self_cut",
            PretrainStrategy::Vcl => "vcl",
            PretrainStrategy::SelfCutVcl => "self_cut+vcl",
        }
    }

    pub fn uses_self_cut(self) -> bool {
        matches!(self, PretrainStrategy::SelfCut | PretrainStrategy::SelfCutVcl)
    }

    pub fn uses_vcl(self) -> bool {
        matches!(self, PretrainStrategy::Vcl | PretrainStrategy::SelfCutVcl)
    }
}

impl fmt::Display for PretrainStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PretrainStrategy {
    type Err = IdaError;
    fn from_str(s: &str) -> Result<Self> {
        PretrainStrategy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| IdaError::Config(format!("unknown pretraining strategy {s:?}")))
    }
}

/// Where the contrastive prototypes come from during adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClVariant {
    /// Prototypes follow both intermediate streams.
    #[default]
    Idcl,
    /// Prototypes follow source features; source and target images are contrasted.
    Vanilla,
    /// Prototypes follow the target-like stream only.
    Dcl,
}

impl FromStr for ClVariant {
    type Err = IdaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "idcl" => Ok(ClVariant::Idcl),
            "vanilla" => Ok(ClVariant::Vanilla),
            "dcl" => Ok(ClVariant::Dcl),
            _ => Err(IdaError::Config(format!("unknown contrastive variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Constant,
    Poly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub dtype: Dtype,

    pub train_width: usize,
    pub train_height: usize,
    pub grayscale_weights: [f64; 3],
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    pub color_jitter: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub input_strategy: InputStrategy,

    pub depth: usize,
    pub base_channels: usize,

    pub lr: f64,
    /// Pre-training learning rate; `lr` when unset.
    pub pretrain_lr: Option<f64>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub lr_schedule: ScheduleKind,
    pub poly_power: f64,
    pub batch_size: usize,
    pub ema_decay: f64,

    pub m: usize,
    pub translation_strategy: TranslationStrategy,
    pub independent_squares: bool,

    pub delta: f64,
    pub tau: f64,
    pub th_t2s: f64,
    pub th_s2t: f64,
    pub raw_sum: bool,
    pub cl_variant: ClVariant,
    /// Fixed prototype weight for both directions; confidence-based when unset.
    pub proto_weight: Option<f64>,

    pub beta1: f64,
    pub beta2: f64,
    pub gamma: f64,

    pub self_training: bool,
    pub mrat: bool,
    pub idcl: bool,

    pub pretrain_strategy: PretrainStrategy,
    pub pretrain_iterations: u64,
    pub iterations: u64,
    /// Steps between evaluations; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        let opt = OptimizerConfig::default();
        let con = ContrastConfig::default();
        let w = LossWeights::default();
        RunConfig {
            seed: 0,
            dtype: Dtype::F32,
            train_width: 384,
            train_height: 384,
            grayscale_weights: [0.299, 0.587, 0.114],
            horizontal_flip: aug.horizontal_flip,
            vertical_flip: aug.vertical_flip,
            color_jitter: aug.color_jitter,
            brightness: aug.brightness,
            contrast: aug.contrast,
            input_strategy: InputStrategy::Both,
            depth: 4,
            base_channels: 8,
            lr: opt.lr,
            pretrain_lr: None,
            adam_beta1: opt.betas.0,
            adam_beta2: opt.betas.1,
            adam_eps: opt.eps,
            weight_decay: opt.weight_decay,
            lr_schedule: ScheduleKind::Constant,
            poly_power: 0.9,
            batch_size: 4,
            ema_decay: 0.99,
            m: 128,
            translation_strategy: TranslationStrategy::BatClassCut,
            independent_squares: false,
            delta: con.delta,
            tau: con.tau,
            th_t2s: con.th_t2s,
            th_s2t: con.th_s2t,
            raw_sum: con.raw_sum,
            cl_variant: ClVariant::Idcl,
            proto_weight: None,
            beta1: w.beta1,
            beta2: w.beta2,
            gamma: w.gamma,
            self_training: true,
            mrat: true,
            idcl: true,
            pretrain_strategy: PretrainStrategy::SelfCutVcl,
            pretrain_iterations: 4000,
            iterations: 10000,
            eval_every: 500,
            checkpoint_every: 1000,
        }
    }
}

impl RunConfig {
    /// Small CPU-sized setup for 96x96 synthetic data. The consistency
    /// weight is raised because at this scale the ClassMix region is almost
    /// all foreground and, averaged on its own, pushes the student towards
    /// over-segmentation.
    pub fn desk() -> Self {
        RunConfig {
            train_width: 96,
            train_height: 96,
            depth: 3,
            base_channels: 4,
            m: 32,
            lr: 1e-3,
            pretrain_lr: Some(2e-3),
            gamma: 10.0,
            pretrain_iterations: 600,
            iterations: 600,
            eval_every: 100,
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    pub fn network(&self) -> NetworkConfig {
        NetworkConfig::new(self.depth, self.base_channels, (self.train_width, self.train_height))
    }

    pub fn preprocess(&self) -> PreprocessConfig {
        PreprocessConfig {
            train_size: (self.train_width, self.train_height),
            grayscale_weights: self.grayscale_weights,
            augment: AugmentConfig {
                horizontal_flip: self.horizontal_flip,
                vertical_flip: self.vertical_flip,
                color_jitter: self.color_jitter,
                brightness: self.brightness,
                contrast: self.contrast,
            },
            seed: self.seed,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            betas: (self.adam_beta1, self.adam_beta2),
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            schedule: match self.lr_schedule {
                ScheduleKind::Constant => LrSchedule::Constant,
                ScheduleKind::Poly => LrSchedule::Poly { power: self.poly_power },
            },
        }
    }

    pub fn contrast_config(&self) -> ContrastConfig {
        ContrastConfig {
            delta: self.delta,
            tau: self.tau,
            th_t2s: self.th_t2s,
            th_s2t: self.th_s2t,
            raw_sum: self.raw_sum,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            beta1: self.beta1,
            beta2: self.beta2,
            gamma: self.gamma,
        }
    }

    pub fn mrat_options(&self) -> MratOptions {
        MratOptions {
            m: self.m,
            strategy: self.translation_strategy,
            independent_squares: self.independent_squares,
        }
    }

    /// Quads per step; each intermediate stream sees this many images.
    pub fn half_batch(&self) -> usize {
        self.batch_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        self.network().validate()?;
        self.preprocess().validate()?;
        self.optimizer().validate()?;
        self.contrast_config().validate()?;
        self.loss_weights().validate()?;
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(IdaError::Config(format!(
                "batch_size must be even and >= 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(IdaError::Config(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        if self.m == 0 || self.m >= self.train_width.min(self.train_height) {
            return Err(IdaError::Config(format!(
                "m must satisfy 0 < m < min(train_width, train_height), got {}",
                self.m
            )));
        }
        if let Some(lr) = self.pretrain_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(IdaError::Config(format!("pretrain_lr must be positive, got {lr}")));
            }
        }
        if let Some(w) = self.proto_weight {
            if !(0.0..=1.0).contains(&w) {
                return Err(IdaError::Config(format!("proto_weight must lie in [0, 1], got {w}")));
            }
        }
        if self.mrat && !self.self_training {
            return Err(IdaError::Config("mrat needs self_training (teacher pseudo-labels)".into()));
        }
        if self.idcl && !self.mrat {
            return Err(IdaError::Config("idcl needs mrat (intermediate features)".into()));
        }
        Ok(())
    }

    /// Config keys whose value cannot affect the given phase with the
    /// current toggles and strategies.
    pub fn inert_keys(&self, phase: Phase) -> Vec<&'static str> {
        const ADAPT_ONLY: [&str; 8] = [
            "iterations",
            "ema_decay",
            "gamma",
            "translation_strategy",
            "independent_squares",
            "beta2",
            "th_s2t",
            "cl_variant",
        ];
        const CONTRAST: [&str; 6] = ["beta1", "th_t2s", "delta", "tau", "raw_sum", "proto_weight"];
        let mut out = Vec::new();
        match phase {
            Phase::Pretrain => {
                out.extend(ADAPT_ONLY);
                out.extend(["self_training", "mrat", "idcl"]);
                if self.pretrain_lr.is_some() {
                    out.push("lr");
                }
                if !self.pretrain_strategy.uses_vcl() {
                    out.extend(CONTRAST);
                }
                if !self.pretrain_strategy.uses_self_cut() {
                    out.push("m");
                }
            }
            Phase::Adapt => {
                out.extend(["pretrain_strategy", "pretrain_iterations", "pretrain_lr"]);
                if !self.self_training {
                    out.extend(["iterations", "ema_decay", "batch_size", "input_strategy", "lr"]);
                }
                if !self.mrat {
                    out.extend(["gamma", "m", "translation_strategy", "independent_squares"]);
                }
                if !self.idcl {
                    out.extend(CONTRAST);
                    out.extend(["beta2", "th_s2t", "cl_variant"]);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_published_settings() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.adam_beta1, c.adam_beta2, c.weight_decay), (2.5e-4, 0.9, 0.999, 5e-4));
        assert_eq!((c.batch_size, c.ema_decay, c.m), (4, 0.99, 128));
        assert_eq!((c.th_t2s, c.th_s2t), (0.9, 0.7));
        assert_eq!((c.beta1, c.beta2, c.gamma), (1.0, 1.0, 1.0));
        assert_eq!(c.translation_strategy, TranslationStrategy::BatClassCut);
        assert_eq!(c.pretrain_strategy, PretrainStrategy::SelfCutVcl);
        assert_eq!(c.half_batch(), 2);
        c.validate().unwrap();
        RunConfig::desk().validate().unwrap();
    }

    #[test]
    fn invalid_combinations() {
        let bad = |f: fn(&mut RunConfig)| {
            let mut c = RunConfig::desk();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.batch_size = 3));
        assert!(bad(|c| c.m = 96));
        assert!(bad(|c| c.mrat = false));
        assert!(bad(|c| {
            c.self_training = false;
            c.idcl = false;
        }));
        assert!(bad(|c| c.proto_weight = Some(1.5)));
        assert!(bad(|c| c.tau = 0.0));
        assert!(bad(|c| c.train_width = 90));
    }

    #[test]
    fn toml_round_trip_and_names() {
        let c = RunConfig::desk();
        let text = toml::to_string(&c).unwrap();
        assert!(text.contains("pretrain_strategy = \"self_cut+vcl\""));
        assert!(text.contains("translation_strategy = \"bat_class_cut\""));
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert!(toml::from_str::<RunConfig>("no_such_key = 1").is_err());
        for p in PretrainStrategy::ALL {
            assert_eq!(p.as_str().parse::<PretrainStrategy>().unwrap(), p);
        }
    }

    #[test]
    fn inert_keys_follow_toggles() {
        let mut c = RunConfig::desk();
        assert_eq!(
            c.inert_keys(Phase::Adapt),
            ["pretrain_strategy", "pretrain_iterations", "pretrain_lr"]
        );
        c.idcl = false;
        assert!(c.inert_keys(Phase::Adapt).contains(&"beta1"));
        assert!(!c.inert_keys(Phase::Adapt).contains(&"gamma"));
        c.mrat = false;
        assert!(c.inert_keys(Phase::Adapt).contains(&"gamma"));
        // prototype contrast is live during pre-training with vcl
        assert!(!c.inert_keys(Phase::Pretrain).contains(&"beta1"));
        c.pretrain_strategy = PretrainStrategy::Random;
        assert!(c.inert_keys(Phase::Pretrain).contains(&"beta1"));
        assert!(c.inert_keys(Phase::Pretrain).contains(&"m"));
    }
}
