//! The run configuration: one JSON document with a section per module.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::prior::PriorConfig;
use crate::scoring::ScoringConfig;
use crate::train::{Stage, TrainConfig};

/// Per-stage training settings. A partial stage section overrides only the
/// keys it names; the rest keep that stage's run defaults.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSection {
    pub vqvae: TrainConfig,
    pub prior: TrainConfig,
    pub vae: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            vqvae: TrainConfig {
                learning_rate: 1e-3,
                max_steps: 1500,
                ..Default::default()
            },
            // the slice score hinges on how well the prior fits healthy codes
            prior: TrainConfig {
                max_steps: 4500,
                ..Default::default()
            },
            vae: TrainConfig {
                learning_rate: 1e-3,
                max_steps: 1500,
                ..Default::default()
            },
        }
    }
}

impl<'de> Deserialize<'de> for TrainSection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Partial {
            vqvae: Option<serde_json::Map<String, serde_json::Value>>,
            prior: Option<serde_json::Map<String, serde_json::Value>>,
            vae: Option<serde_json::Map<String, serde_json::Value>>,
        }
        fn merge<E: serde::de::Error>(
            base: TrainConfig,
            over: Option<serde_json::Map<String, serde_json::Value>>,
        ) -> std::result::Result<TrainConfig, E> {
            let Some(over) = over else { return Ok(base) };
            let mut v = serde_json::to_value(base).map_err(E::custom)?;
            if let serde_json::Value::Object(m) = &mut v {
                m.extend(over);
            }
            serde_json::from_value(v).map_err(E::custom)
        }
        let p = Partial::deserialize(d)?;
        let base = TrainSection::default();
        Ok(TrainSection {
            vqvae: merge(base.vqvae, p.vqvae)?,
            prior: merge(base.prior, p.prior)?,
            vae: merge(base.vae, p.vae)?,
        })
    }
}

impl TrainSection {
    pub fn stage(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Vqvae => &self.vqvae,
            Stage::Prior => &self.prior,
            Stage::Vae => &self.vae,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Also score the fixed low/high contrast copies of the validation anomalies.
    pub contrast_probe: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { contrast_probe: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub prior: PriorConfig,
    pub scoring: ScoringConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 20240917,
            data: DataConfig::default(),
            codec: CodecConfig::default(),
            prior: PriorConfig::default(),
            scoring: ScoringConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let factor = 1usize << self.codec.blocks;
        if self.data.side % factor != 0 {
            let lower = self.data.side / factor * factor;
            return Err(Error::InvalidConfig(format!(
                "data.side = {} is not divisible by 2^codec.blocks = {factor}; use a multiple of {factor} such as {} or {}",
                self.data.side,
                lower.max(factor),
                lower + factor
            )));
        }
        if self.data.side != self.codec.image_side {
            return Err(Error::InvalidConfig(format!(
                "data.side = {} must equal codec.image_side = {}",
                self.data.side, self.codec.image_side
            )));
        }
        self.data.validate()?;
        self.codec.validate()?;
        self.prior.validate()?;
        self.scoring.validate()?;
        for s in [Stage::Vqvae, Stage::Prior, Stage::Vae] {
            self.train.stage(s).validate()?;
        }
        Ok(())
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_slice(bytes).map_err(|e| Error::InvalidConfig(format!("config schema: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_json(&bytes)
    }

    /// Hash of the canonical serialization; stamps every output.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))[..16].to_string()
    }
}
