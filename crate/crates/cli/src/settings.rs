//! Layered run configuration: preset < config file < `IDA_*` environment < flags.

use std::collections::BTreeSet;
use std::path::Path;

use anyhow::{bail, Result};
use clap::ValueEnum;
use ida_core::trainer::{Phase, RunConfig};
use log::{info, warn};
use toml::{Table, Value};

use crate::UsageError;

/// Environment variables with this prefix override config keys.
pub const ENV_PREFIX: &str = "IDA_";
/// Reserved for the log filter, never a config key.
pub const LOG_ENV: &str = "IDA_LOG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Full-size settings (384x384 inputs, depth-4 backbone).
    Default,
    /// CPU-sized settings for 96x96 synthetic data.
    Desk,
}

impl Preset {
    pub fn config(self) -> RunConfig {
        match self {
            Preset::Default => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        }
    }
}

/// Where an override came from, for error messages.
#[derive(Debug, Clone)]
pub struct Override {
    pub key: String,
    pub value: Value,
    pub origin: String,
}

/// A resolved configuration plus the keys that were set on purpose.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub explicit: BTreeSet<String>,
}

/// Every config key, including optional ones that serialize to nothing when unset.
pub fn known_keys() -> BTreeSet<String> {
    let probe = RunConfig {
        proto_weight: Some(0.5),
        pretrain_lr: Some(1e-3),
        ..RunConfig::default()
    };
    to_table(&probe).keys().cloned().collect()
}

fn to_table(cfg: &RunConfig) -> Table {
    Table::try_from(cfg).expect("run config serializes to a table")
}

/// Parses `raw` as a TOML value; bare words fall back to strings.
pub fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.to_string())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// `key=value` as given to `--set`.
pub fn parse_assignment(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| UsageError(format!("expected key=value, got {s:?}")))?;
    Ok((k.trim().to_string(), parse_value(v.trim())))
}

/// Flat keys from a TOML config file. Nested tables are rejected.
pub fn file_overrides(path: &Path) -> Result<Vec<Override>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config file {}: {e}", path.display())))?;
    let table: Table = text
        .parse()
        .map_err(|e| UsageError(format!("config file {} is not valid TOML: {e}", path.display())))?;
    let origin = format!("config file {}", path.display());
    Ok(table
        .into_iter()
        .map(|(key, value)| Override {
            key,
            value,
            origin: origin.clone(),
        })
        .collect())
}

/// `IDA_<KEY>` variables, keys lowercased. Unknown keys are an error so a
/// typo cannot silently leave a default in place.
pub fn env_overrides(vars: impl IntoIterator<Item = (String, String)>) -> Vec<Override> {
    let mut out: Vec<Override> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k != LOG_ENV)
        .map(|(k, v)| Override {
            key: k[ENV_PREFIX.len()..].to_ascii_lowercase(),
            value: parse_value(&v),
            origin: format!("environment variable {k}"),
        })
        .collect();
    out.sort_by(|a, b| a.key.cmp(&b.key));
    out
}

pub fn flag_override(key: &str, value: Value) -> Override {
    Override {
        key: key.to_string(),
        value,
        origin: "command line".into(),
    }
}

/// Applies the layers in order; later layers win.
pub fn resolve(base: RunConfig, layers: &[Vec<Override>]) -> Result<Resolved> {
    let known = known_keys();
    let mut table = to_table(&base);
    let mut explicit = BTreeSet::new();
    for o in layers.iter().flatten() {
        if !known.contains(&o.key) {
            return Err(UsageError(format!("unknown config key {:?} from {}", o.key, o.origin)).into());
        }
        if matches!(o.value, Value::Table(_)) {
            return Err(UsageError(format!("config key {:?} from {} must be a plain value", o.key, o.origin)).into());
        }
        table.insert(o.key.clone(), o.value.clone());
        explicit.insert(o.key.clone());
    }
    let config: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e| UsageError(format!("invalid configuration: {e}")))?;
    Ok(Resolved { config, explicit })
}

impl Resolved {
    /// Warns about explicitly set keys that cannot influence any of `phases`.
    pub fn warn_inert(&self, phases: &[Phase]) -> Vec<String> {
        let mut inert: Option<BTreeSet<&str>> = None;
        for &p in phases {
            let here: BTreeSet<&str> = self.config.inert_keys(p).into_iter().collect();
            inert = Some(match inert {
                None => here,
                Some(prev) => prev.intersection(&here).copied().collect(),
            });
        }
        let inert = inert.unwrap_or_default();
        let hits: Vec<String> = self
            .explicit
            .iter()
            .filter(|k| inert.contains(k.as_str()))
            .cloned()
            .collect();
        for k in &hits {
            warn!("{k} has no effect with the current toggles and strategy; ignored");
        }
        hits
    }
}

/// Keys a resumed run may still change.
pub const RESUME_KEYS: [&str; 4] = ["iterations", "pretrain_iterations", "eval_every", "checkpoint_every"];

/// Applies explicitly set keys from `overrides` to a checkpoint's config,
/// allowing only budget and cadence keys.
pub fn apply_resume_overrides(config: &RunConfig, layers: &[Vec<Override>]) -> Result<RunConfig> {
    let mut table = to_table(config);
    for o in layers.iter().flatten() {
        if !RESUME_KEYS.contains(&o.key.as_str()) {
            bail!(UsageError(format!(
                "{} ({}) cannot change when resuming; only {} may",
                o.key,
                o.origin,
                RESUME_KEYS.join(", ")
            )));
        }
        table.insert(o.key.clone(), o.value.clone());
    }
    let cfg: RunConfig = Value::Table(table)
        .try_into()
        .map_err(|e| UsageError(format!("invalid configuration: {e}")))?;
    Ok(cfg)
}

/// Keys describing the network and its input, fixed by a pre-trained model.
pub const ARCHITECTURE_KEYS: [&str; 6] = [
    "dtype",
    "depth",
    "base_channels",
    "train_width",
    "train_height",
    "grayscale_weights",
];

/// Copies the architecture of a pre-trained model unless set explicitly.
pub fn inherit_architecture(resolved: &mut Resolved, pretrained: &RunConfig) {
    let from = to_table(pretrained);
    let mut table = to_table(&resolved.config);
    let mut changed = Vec::new();
    for key in ARCHITECTURE_KEYS {
        if !resolved.explicit.contains(key) && table.get(key) != from.get(key) {
            table.insert(key.to_string(), from[key].clone());
            changed.push(key);
        }
    }
    if !changed.is_empty() {
        info!("taken from the pre-trained model: {}", changed.join(", "));
        resolved.config = Value::Table(table).try_into().expect("keys copied from a valid config");
    }
}

/// Resolved config as a flat TOML document that reproduces the run.
pub fn config_toml(cfg: &RunConfig) -> String {
    toml::to_string(cfg).expect("run config serializes")
}

/// Loads `path` strictly, as a full config.
#[cfg(test)]
pub fn read_config_toml(path: &Path) -> Result<RunConfig> {
    use anyhow::Context as _;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())).into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(pairs: &[(&str, &str)]) -> Vec<Override> {
        env_overrides(pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())))
    }

    #[test]
    fn literal_parsing_falls_back_to_strings() {
        assert_eq!(parse_value("3"), Value::Integer(3));
        assert_eq!(parse_value("0.5"), Value::Float(0.5));
        assert_eq!(parse_value("false"), Value::Boolean(false));
        assert_eq!(parse_value("bat_class_cut"), Value::String("bat_class_cut".into()));
        assert_eq!(parse_value("self_cut+vcl"), Value::String("self_cut+vcl".into()));
        assert_eq!(parse_value("\"x\""), Value::String("x".into()));
    }

    #[test]
    fn later_layers_win() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "gamma = 2.0\nm = 64\nseed = 5\n").unwrap();
        let layers = vec![
            file_overrides(&f).unwrap(),
            env(&[("IDA_M", "48"), ("IDA_LOG", "debug"), ("HOME", "/x")]),
            vec![flag_override("seed", Value::Integer(9))],
        ];
        let r = resolve(RunConfig::desk(), &layers).unwrap();
        assert_eq!((r.config.gamma, r.config.m, r.config.seed), (2.0, 48, 9));
        assert_eq!(r.config.lr, RunConfig::desk().lr);
        let keys: Vec<_> = r.explicit.iter().map(String::as_str).collect();
        assert_eq!(keys, ["gamma", "m", "seed"]);
    }

    #[test]
    fn unknown_or_ill_typed_keys_are_errors() {
        let e = resolve(RunConfig::default(), &[env(&[("IDA_GAMA", "1")])]).unwrap_err();
        assert!(e.to_string().contains("IDA_GAMA"), "{e}");
        assert!(resolve(RunConfig::default(), &[vec![flag_override("m", Value::String("x".into()))]]).is_err());
        assert!(resolve(RunConfig::default(), &[vec![flag_override("translation_strategy", parse_value("nope"))]]).is_err());
    }

    #[test]
    fn optional_keys_are_known() {
        let r = resolve(RunConfig::default(), &[vec![flag_override("proto_weight", Value::Float(0.3))]]).unwrap();
        assert_eq!(r.config.proto_weight, Some(0.3));
        assert!(known_keys().contains("pretrain_lr"));
    }

    #[test]
    fn inert_warnings_follow_toggles() {
        let layers = vec![vec![
            flag_override("idcl", Value::Boolean(false)),
            flag_override("beta1", Value::Float(2.0)),
            flag_override("gamma", Value::Float(2.0)),
        ]];
        let r = resolve(RunConfig::desk(), &layers).unwrap();
        assert_eq!(r.warn_inert(&[Phase::Adapt]), ["beta1"]);
        // beta1 is live while pre-training with prototype contrast
        assert!(r.warn_inert(&[Phase::Pretrain, Phase::Adapt]).is_empty());
    }

    #[test]
    fn resume_allows_only_budget_keys() {
        let cfg = RunConfig::desk();
        let ok = apply_resume_overrides(&cfg, &[vec![flag_override("iterations", Value::Integer(9))]]).unwrap();
        assert_eq!(ok.iterations, 9);
        assert!(apply_resume_overrides(&cfg, &[vec![flag_override("lr", Value::Float(1.0))]]).is_err());
    }

    #[test]
    fn architecture_comes_from_the_pretrained_model() {
        let mut pre = RunConfig::desk();
        pre.depth = 2;
        pre.base_channels = 6;
        let mut r = resolve(RunConfig::desk(), &[vec![flag_override("base_channels", Value::Integer(4))]]).unwrap();
        inherit_architecture(&mut r, &pre);
        assert_eq!((r.config.depth, r.config.base_channels), (2, 4));
    }

    #[test]
    fn written_config_reloads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("config.toml");
        let mut cfg = RunConfig::desk();
        cfg.pretrain_lr = Some(1e-3);
        std::fs::write(&p, config_toml(&cfg)).unwrap();
        assert_eq!(read_config_toml(&p).unwrap(), cfg);
    }
}
