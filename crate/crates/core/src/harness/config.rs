//! Experiment configuration (TOML) with defaults and presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contrastive::{AugSpec, ContrastiveConfig, NtXentVariant};
use crate::error::{Error, Result};
use crate::fedsim::{Models, RoundConfig};
use crate::hexgrid::Thresholds;
use crate::privacy::DpConfig;
use crate::synthdata::{default_profiles, RegionProfile};
use crate::tensornet::presets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Ccnet,
    Fedavg,
    Fedprox,
    FedproxFt,
    Local,
    Central,
    DpFedavg,
    /// Central training on geomasked events.
    Geomask,
    /// Central training on Laplace-noised events.
    Cnoise,
    /// Long local training on a small subset, as an attack reference.
    Overfit,
}

impl Pipeline {
    pub const ALL: [Pipeline; 10] = [
        Pipeline::Ccnet,
        Pipeline::Fedavg,
        Pipeline::Fedprox,
        Pipeline::FedproxFt,
        Pipeline::Local,
        Pipeline::Central,
        Pipeline::DpFedavg,
        Pipeline::Geomask,
        Pipeline::Cnoise,
        Pipeline::Overfit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Ccnet => "ccnet",
            Pipeline::Fedavg => "fedavg",
            Pipeline::Fedprox => "fedprox",
            Pipeline::FedproxFt => "fedprox_ft",
            Pipeline::Local => "local",
            Pipeline::Central => "central",
            Pipeline::DpFedavg => "dp_fedavg",
            Pipeline::Geomask => "geomask",
            Pipeline::Cnoise => "cnoise",
            Pipeline::Overfit => "overfit",
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::config(format!("unknown pipeline {name:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub edge_km: f64,
    pub interval_hours: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { edge_km: 1.0, interval_hours: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub days: u32,
    pub history_len: usize,
    pub thresholds: Thresholds,
    /// Rings of neighbor cells added around every active cell.
    pub ring: u32,
    pub test_fraction: f64,
    /// Region profiles; empty means the built-in five regions.
    pub profiles: Vec<RegionProfile>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            days: 60,
            history_len: 24,
            thresholds: Thresholds::default(),
            ring: 1,
            test_fraction: 0.2,
            profiles: Vec::new(),
        }
    }
}

impl DataConfig {
    pub fn profiles(&self) -> Vec<RegionProfile> {
        if self.profiles.is_empty() {
            default_profiles()
        } else {
            self.profiles.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    ConvAttention,
    Mlp,
    /// The large conv-attention preset, ignoring the width fields.
    FullScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderKind,
    pub channels: usize,
    pub ffn: usize,
    /// Hidden width of the MLP encoder.
    pub hidden: usize,
    pub repr: usize,
    pub classifier_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { encoder: EncoderKind::ConvAttention, channels: 8, ffn: 0, hidden: 32, repr: 16, classifier_hidden: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveSection {
    pub tau: f64,
    pub batch: usize,
    pub variant: NtXentVariant,
    /// Applied in order to every view.
    pub augmentations: Vec<String>,
    pub head_hidden: usize,
    pub head_out: usize,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        let d = ContrastiveConfig::default();
        Self {
            tau: d.tau,
            batch: d.batch,
            variant: d.variant,
            augmentations: vec!["noise".into(), "crop".into()],
            head_hidden: d.head_hidden,
            head_out: d.head_out,
        }
    }
}

impl ContrastiveSection {
    pub fn build(&self) -> Result<ContrastiveConfig> {
        let augs = self.augmentations.iter().map(|n| AugSpec::by_name(n)).collect::<Result<Vec<_>>>()?;
        let c = ContrastiveConfig {
            tau: self.tau,
            batch: self.batch,
            variant: self.variant,
            aug_a: augs.clone(),
            aug_b: augs,
            head_hidden: self.head_hidden,
            head_out: self.head_out,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub epsilon: f64,
    /// Overrides the per-region bounding-box diagonal.
    pub sensitivity_km: Option<f64>,
    pub sigma_space_km: f64,
    pub sigma_time_s: f64,
    pub dp: DpConfig,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self { epsilon: 1.0, sensitivity_km: None, sigma_space_km: 0.2, sigma_time_s: 60.0, dp: DpConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub enabled: bool,
    /// Members (and non-members) per client.
    pub samples: usize,
    /// Relabelings averaged for the shuffled control.
    pub shuffle_repeats: usize,
    pub overfit_epochs: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self { enabled: false, samples: 200, shuffle_repeats: 10, overfit_epochs: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub pipeline: Pipeline,
    pub grid: GridConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub contrastive: ContrastiveSection,
    pub federation: RoundConfig,
    pub privacy: PrivacyConfig,
    pub attack: AttackConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pipeline: Pipeline::Ccnet,
            grid: GridConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            contrastive: ContrastiveSection::default(),
            federation: RoundConfig::default(),
            privacy: PrivacyConfig::default(),
            attack: AttackConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Small, fast setting used by tests and the default comparison.
    pub fn benchmark() -> Self {
        let mut c = Self::default();
        c.data.days = 8;
        c.model.encoder = EncoderKind::Mlp;
        c
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.grid.edge_km > 0.0 && self.grid.interval_hours > 0.0) {
            return Err(Error::config("grid edge and interval must be positive"));
        }
        if self.data.days < 1 {
            return Err(Error::config("days must be at least 1"));
        }
        if self.data.history_len < 3 {
            return Err(Error::config("history length must be at least 3"));
        }
        let slots = (self.data.days as f64 * 24.0 / self.grid.interval_hours).ceil() as usize;
        if slots <= self.data.history_len {
            return Err(Error::config(format!(
                "{} days give {slots} slots, need more than history_len = {}",
                self.data.days, self.data.history_len
            )));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::config("test_fraction must lie in (0, 1)"));
        }
        self.data.thresholds.validate()?;
        for p in &self.data.profiles {
            p.validate()?;
        }
        self.federation.validate()?;
        self.contrastive.build()?;
        self.privacy.dp.validate()?;
        if self.privacy.epsilon <= 0.0 {
            return Err(Error::config("epsilon must be positive"));
        }
        if self.attack.samples < crate::attack::MIN_ATTACK_SET {
            return Err(Error::config(format!("attack samples must be at least {}", crate::attack::MIN_ATTACK_SET)));
        }
        let m = &self.model;
        if m.channels == 0 || m.repr == 0 || m.hidden == 0 || m.classifier_hidden == 0 {
            return Err(Error::config("model widths must be positive"));
        }
        Ok(())
    }

    pub fn models(&self) -> Result<Models> {
        let m = &self.model;
        let c = &self.contrastive;
        let l = self.data.history_len;
        if m.encoder == EncoderKind::FullScale {
            if l != 24 {
                return Err(Error::config("the full-scale preset needs history_len = 24"));
            }
            let (encoder, head, classifier) = presets::full_scale()?;
            return Ok(Models { encoder, head, classifier });
        }
        let encoder = match m.encoder {
            EncoderKind::Mlp => presets::mlp_encoder(l, m.hidden, m.repr)?,
            _ => presets::conv_attention_encoder(presets::EncoderDims {
                history: l,
                channels: m.channels,
                ffn: m.ffn,
                repr: m.repr,
            })?,
        };
        Ok(Models {
            encoder,
            head: presets::projection_head(m.repr, c.head_hidden, c.head_out)?,
            classifier: presets::classifier(m.repr, m.classifier_hidden)?,
        })
    }
}
