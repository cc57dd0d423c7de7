//! Run configuration: one TOML document with a section per subsystem.
//!
//! ```toml
//! seed = 7                 # required
//!
//! [task]
//! dataset_seed = 11        # required
//! frames = 8
//! dim = 2
//!
//! [model]                  # hidden, depth, time_features, style_embed
//! [pretrain]               # batch_size, steps, lr, cond_dropout
//! [rl]                     # group_size, clip_eps, kl_beta, align_gamma, ...
//! [bank]                   # capacity, staleness
//! [reward]                 # smooth, endpoint, consistency
//! [eval]                   # bench_size, bench_seed
//! ```
//!
//! Every key except the two required ones has a default. Unknown keys and
//! invalid values are reported together, by dotted key name.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bank::BankConfig;
use crate::error::{Error, Result};
use crate::flow_match::PretrainConfig;
use crate::grpo::RLConfig;
use crate::task::{RewardSpec, TaskConfig};
use crate::velocity::VelocityArch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub depth: usize,
    pub time_features: usize,
    pub style_embed: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let a = VelocityArch::default();
        Self {
            hidden: a.hidden,
            depth: a.depth,
            time_features: a.time_features,
            style_embed: a.style_embed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub bench_size: usize,
    pub bench_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            bench_size: 64,
            bench_seed: 0x5eed_be4c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    #[serde(default)]
    pub task: TaskConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub rl: RLConfig,
    #[serde(default)]
    pub bank: BankConfig,
    #[serde(default)]
    pub reward: RewardSpec,
    #[serde(default)]
    pub eval: EvalConfig,
}

const REQUIRED: [&str; 2] = ["seed", "task.dataset_seed"];

impl Config {
    /// Defaults everywhere, with the two required seeds set.
    pub fn with_seeds(seed: u64, dataset_seed: u64) -> Self {
        Self {
            seed,
            task: TaskConfig {
                dataset_seed,
                ..TaskConfig::default()
            },
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            rl: RLConfig::default(),
            bank: BankConfig::default(),
            reward: RewardSpec::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let json = serde_json::to_value(&value)?;
        Self::from_value(json)
    }

    /// Accepts the same structure as JSON, e.g. the config echo of a run
    /// manifest.
    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let missing: Vec<&str> = REQUIRED
            .iter()
            .copied()
            .filter(|k| lookup(&value, k).is_none())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "missing required keys: {}",
                missing.join(", ")
            )));
        }
        let template = serde_json::to_value(Self::with_seeds(0, 0))?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &template, "", &mut unknown);
        if !unknown.is_empty() {
            return Err(Error::Config(format!(
                "unknown keys: {}",
                unknown.join(", ")
            )));
        }
        let cfg: Config =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: serde_json::Value = serde_json::from_str(&text)?;
            // A run manifest carries the config under "config"; a config
            // itself has no such key.
            let v = match v.get("config") {
                Some(c) if c.is_object() => c.clone(),
                _ => v,
            };
            Self::from_value(v)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        for r in [
            self.task.validate(),
            self.pretrain.validate(),
            self.rl.validate(),
            self.bank.validate(),
            self.reward.validate(),
        ] {
            if let Err(keys) = r {
                bad.extend(keys);
            }
        }
        let m = &self.model;
        if m.hidden == 0 {
            bad.push("model.hidden".into());
        }
        if m.depth == 0 {
            bad.push("model.depth".into());
        }
        if m.time_features == 0 || !m.time_features.is_multiple_of(2) {
            bad.push("model.time_features".into());
        }
        if self.eval.bench_size == 0 {
            bad.push("eval.bench_size".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid values for keys: {}",
                bad.join(", ")
            )))
        }
    }

    pub fn arch(&self) -> VelocityArch {
        VelocityArch {
            latent_dim: self.task.latent_dim(),
            cond_dim: self.task.dim,
            num_styles: self.task.num_styles,
            hidden: self.model.hidden,
            depth: self.model.depth,
            time_features: self.model.time_features,
            style_embed: self.model.style_embed,
        }
    }
}

fn lookup<'a>(v: &'a serde_json::Value, dotted: &str) -> Option<&'a serde_json::Value> {
    dotted.split('.').try_fold(v, |v, k| v.get(k))
}

fn unknown_keys(
    value: &serde_json::Value,
    template: &serde_json::Value,
    prefix: &str,
    out: &mut Vec<String>,
) {
    let (Some(obj), Some(tpl)) = (value.as_object(), template.as_object()) else {
        return;
    };
    for (k, v) in obj {
        let name = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match tpl.get(k) {
            Some(t) => unknown_keys(v, t, &name, out),
            None => out.push(name),
        }
    }
}
