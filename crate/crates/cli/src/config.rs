//! The JSON run configuration and its command-line overrides.

use std::fs;
use std::path::Path;

use clap::Args;
use iscf_core::data::SynthSpec;
use iscf_core::model::ModelConfig;
use iscf_core::pipeline::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::Failure;

/// Everything a run needs. Every field has a default, so `{}` is a valid
/// config file; unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Used by `--synth`; `hw` always follows `model.input_hw`.
    pub synth: SynthSpec,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::Config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Flags that win over the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Overrides {
    /// Seed for initialization, data split, shuffling and synthetic data.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Stage-1 width d1.
    #[arg(long)]
    pub base_width: Option<usize>,
    /// Input extent, `N` or `HxW`.
    #[arg(long, value_parser = parse_hw)]
    pub hw: Option<[usize; 2]>,
    /// ISCF stages, e.g. `123`, `1,2` or `none`.
    #[arg(long, value_parser = parse_stages)]
    pub iscf_stages: Option<Vec<usize>>,
    /// Number of synthetic samples.
    #[arg(long)]
    pub synth_count: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.model.seed = s;
            cfg.train.seed = s;
            cfg.synth.seed = s;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.train.lr = v;
        }
        if let Some(v) = self.threshold {
            cfg.train.threshold = v;
        }
        if let Some(v) = self.val_fraction {
            cfg.train.val_fraction = v;
        }
        if let Some(v) = self.base_width {
            cfg.model.base_width = v;
        }
        if let Some(v) = self.hw {
            cfg.model.input_hw = v;
        }
        if let Some(v) = &self.iscf_stages {
            cfg.model.iscf_stages = v.clone();
        }
        if let Some(v) = self.synth_count {
            cfg.synth.count = v;
        }
        cfg.synth.hw = cfg.model.input_hw;
    }
}

pub fn parse_hw(s: &str) -> Result<[usize; 2], String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("bad extent `{t}`: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok([parse(h)?, parse(w)?]),
        None => {
            let n = parse(s)?;
            Ok([n, n])
        }
    }
}

/// `123`, `1,2,3` and `none` are all accepted.
pub fn parse_stages(s: &str) -> Result<Vec<usize>, String> {
    if s.eq_ignore_ascii_case("none") || s.is_empty() {
        return Ok(Vec::new());
    }
    s.chars()
        .filter(|c| *c != ',')
        .map(|c| c.to_digit(10).map(|d| d as usize).ok_or_else(|| format!("bad stage `{c}` in `{s}`")))
        .collect()
}

/// `setting` label for a stage set, e.g. `123` or `none`.
pub fn stage_label(stages: &[usize]) -> String {
    if stages.is_empty() {
        "none".into()
    } else {
        stages.iter().map(usize::to_string).collect()
    }
}
