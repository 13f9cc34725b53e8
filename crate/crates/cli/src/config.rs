//! Run configuration file (TOML). Every section is optional; missing keys take
//! their defaults and command-line flags override file values.

use std::path::Path;

use anyhow::{bail, Context};
use selfhar_core::eval::{PretrainSettings, ProtocolConfig};
use selfhar_core::transforms::{TransformConfig, TransformKind};
use selfhar_core::{SynthConfig, TrainConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub window_len: usize,
    pub overlap: f64,
    pub sample_rate_hz: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            window_len: 400,
            overlap: 0.5,
            sample_rate_hz: 50.0,
            test_fraction: 0.25,
            val_fraction: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolSection {
    pub n_runs: usize,
    pub budgets: Vec<usize>,
    pub modes: Vec<String>,
    pub folds: usize,
    pub layers: Vec<String>,
    pub tasks: Vec<String>,
    /// Transformed copies per window and task in the self-supervised set.
    pub multiplier: usize,
}

impl Default for ProtocolSection {
    fn default() -> Self {
        Self {
            n_runs: 10,
            budgets: vec![2, 5, 10, 20, 50, 100],
            modes: vec![
                "supervised_scratch".into(),
                "frozen".into(),
                "finetune_conv_c".into(),
            ],
            folds: 5,
            layers: vec!["conv_a".into(), "conv_b".into(), "conv_c".into()],
            tasks: TransformKind::ALL
                .iter()
                .map(|k| k.name().to_string())
                .collect(),
            multiplier: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Master seed; copied into every section's seed when resolved.
    pub seed: u64,
    pub split: SplitConfig,
    pub synth: SynthConfig,
    pub transforms: TransformConfig,
    pub pretrain: TrainConfig,
    pub classifier: TrainConfig,
    pub protocol: ProtocolSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            split: SplitConfig::default(),
            synth: SynthConfig::default(),
            transforms: TransformConfig::default(),
            pretrain: TrainConfig::default(),
            classifier: TrainConfig::classifier(),
            protocol: ProtocolSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        if cfg.version != CONFIG_VERSION {
            bail!(
                "config {} has version {}, expected {CONFIG_VERSION}",
                path.display(),
                cfg.version
            );
        }
        Ok(cfg)
    }

    /// Propagates the master seed so the written file is self-describing.
    pub fn resolve(mut self) -> Self {
        self.synth.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.classifier.seed = self.seed;
        self
    }

    pub fn save(&self, dir: &Path) -> anyhow::Result<()> {
        let text = toml::to_string_pretty(self)?;
        std::fs::write(dir.join(CONFIG_FILE), text)?;
        Ok(())
    }

    pub fn protocol(&self) -> ProtocolConfig {
        ProtocolConfig {
            n_runs: self.protocol.n_runs,
            classifier: self.classifier.clone(),
            seed: self.seed,
        }
    }

    pub fn pretrain_settings(&self) -> PretrainSettings {
        PretrainSettings {
            pretrain: self.pretrain.clone(),
            transforms: self.transforms.clone(),
            multiplier: self.protocol.multiplier,
            seed: self.seed,
        }
    }

    pub fn tasks(&self) -> anyhow::Result<Vec<TransformKind>> {
        let tasks = self
            .protocol
            .tasks
            .iter()
            .map(|t| t.parse::<TransformKind>())
            .collect::<Result<Vec<_>, _>>()?;
        if tasks.is_empty() {
            bail!("no pretext tasks configured");
        }
        Ok(tasks)
    }
}
