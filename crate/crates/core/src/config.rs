//! JSON experiment configuration shared by every CLI subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{resolve, AttentionKind, AttentionParams};
use crate::bench::BenchSpec;
use crate::error::{Error, Result};
use crate::kspace::DataConfig;
use crate::metrics::MetricsConfig;
use crate::trainer::TrainConfig;
use crate::unet::{Placement, UNetConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub depth: usize,
    pub dropout: f64,
    /// Registry name, e.g. `none`, `simam`, `cmratt`.
    pub attention: String,
    pub attention_params: AttentionParams,
    pub placement: Placement,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            depth: 3,
            dropout: 0.25,
            attention: "none".into(),
            attention_params: AttentionParams::default(),
            placement: Placement::PerConvAndSkip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Registry names; the `none` baseline is always added.
    pub kinds: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            kinds: ["none", "simam", "se", "cbam", "gct", "l2norm", "hadamard", "cmratt"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            seeds: vec![0, 1, 2],
        }
    }
}

/// Every knob of an experiment. Unknown keys are rejected; missing keys take
/// the defaults shown by `ExperimentConfig::default()`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub bench: BenchConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises") + "\n"
    }

    /// Write the resolved configuration as `config.json` inside `dir`.
    pub fn save_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))
    }

    pub fn attention_kind(&self, name: &str) -> Result<AttentionKind> {
        resolve(name, &self.model.attention_params)
    }

    pub fn unet(&self) -> Result<UNetConfig> {
        self.unet_with(&self.model.attention)
    }

    pub fn unet_with(&self, attention: &str) -> Result<UNetConfig> {
        let cfg = UNetConfig {
            base_channels: self.model.base_channels,
            depth: self.model.depth,
            dropout_p: self.model.dropout,
            attention: self.attention_kind(attention)?,
            placement: self.model.placement,
            input_size: (self.data.size, self.data.size),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn bench_spec(&self) -> Result<BenchSpec> {
        let kinds = self
            .bench
            .kinds
            .iter()
            .map(|k| self.attention_kind(k))
            .collect::<Result<Vec<_>>>()?;
        let spec = BenchSpec {
            kinds,
            unet: self.unet_with("none")?,
            train: self.train.clone(),
            seeds: self.bench.seeds.clone(),
            metrics: self.metrics.clone(),
        };
        // Every kind must fit the shared backbone.
        for k in spec.resolved_kinds()? {
            UNetConfig {
                attention: k,
                ..spec.unet.clone()
            }
            .validate()?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.count == 0 {
            return Err(Error::Config("data.count must be >= 1".into()));
        }
        if !self.data.size.is_power_of_two() {
            return Err(Error::Config(format!("data.size must be a power of two, got {}", self.data.size)));
        }
        if self.data.accel < 1.0 {
            return Err(Error::Config(format!("data.accel must be >= 1, got {}", self.data.accel)));
        }
        if self.data.acs >= self.data.size {
            return Err(Error::Config(format!(
                "data.acs ({}) must be smaller than data.size ({})",
                self.data.acs, self.data.size
            )));
        }
        self.unet()?;
        self.train.validate()?;
        self.metrics.validate()
    }
}
