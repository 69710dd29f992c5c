//! Model checkpoints: an LSRC container of parameters (and optimizer moments)
//! plus a JSON sidecar describing the architecture.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::vae::Vae;
use crate::codec::{Codec, CodecConfig};
use crate::error::{Error, Result};
use crate::format::{read_container, write_container, TensorData, TensorRecord};
use crate::params::ParamStore;
use crate::prior::{Prior, PriorConfig};
use crate::tensor::Tensor;

use super::{AdamState, LossPoint, TrainConfig};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Vqvae,
    Prior,
    Vae,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Vqvae => "vqvae",
            Stage::Prior => "prior",
            Stage::Vae => "vae",
        }
    }

    pub fn checkpoint_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.lsrc", self.name()))
    }

    pub fn sidecar_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.json", self.name()))
    }

    pub fn curve_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}_loss.json", self.name()))
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vqvae" => Ok(Stage::Vqvae),
            "prior" => Ok(Stage::Prior),
            "vae" => Ok(Stage::Vae),
            other => Err(Error::InvalidArgument(format!("unknown stage {other:?}"))),
        }
    }
}

/// Latent grid geometry the prior was trained for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub schema_version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub step: u64,
    pub finished: bool,
    pub config_hash: String,
    pub train: TrainConfig,
    pub codec: Option<CodecConfig>,
    pub prior: Option<PriorConfig>,
    pub grid: Option<GridShape>,
    /// Hash of the frozen codec checkpoint a prior was trained against.
    pub codec_checkpoint: Option<String>,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";
const STEP: &str = "adam.step";

fn record(t: &Tensor<f32>) -> TensorRecord {
    TensorRecord::f32(t.shape(), t.data().to_vec())
}

fn tensor(r: &TensorRecord) -> Result<Tensor<f32>> {
    Ok(Tensor::from_vec(&r.dims, r.as_f32()?.to_vec()))
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn save_checkpoint(
    dir: &Path,
    sidecar: &Sidecar,
    params: &ParamStore<f32>,
    adam: Option<&AdamState>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors: Vec<(String, TensorRecord)> =
        params.iter().map(|(n, t)| (format!("{PARAM}{n}"), record(t))).collect();
    if let Some(a) = adam {
        for (n, m) in params.names().iter().zip(&a.m) {
            tensors.push((format!("{MOMENT1}{n}"), record(m)));
        }
        for (n, v) in params.names().iter().zip(&a.v) {
            tensors.push((format!("{MOMENT2}{n}"), record(v)));
        }
        let s = a.step;
        tensors.push((
            STEP.to_string(),
            TensorRecord::i32(&[2], vec![(s & 0xffff_ffff) as u32 as i32, (s >> 32) as u32 as i32]),
        ));
    }
    // write to temporaries first so an interrupted save never leaves a torn pair
    let ckpt = sidecar.stage.checkpoint_path(dir);
    let side = sidecar.stage.sidecar_path(dir);
    let tmp_ckpt = ckpt.with_extension("lsrc.tmp");
    let tmp_side = side.with_extension("json.tmp");
    write_container(&tmp_ckpt, &tensors)?;
    std::fs::write(&tmp_side, serde_json::to_vec_pretty(sidecar)?)?;
    std::fs::rename(tmp_ckpt, ckpt)?;
    std::fs::rename(tmp_side, side)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub sidecar: Sidecar,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState>,
}

pub fn load_checkpoint(dir: &Path, stage: Stage) -> Result<LoadedCheckpoint> {
    let side_path = stage.sidecar_path(dir);
    let ckpt_path = stage.checkpoint_path(dir);
    if !side_path.exists() || !ckpt_path.exists() {
        return Err(Error::MissingDependency(format!(
            "no {} checkpoint in {}; run `lsr train --stage {}` first",
            stage.name(),
            dir.display(),
            stage.name()
        )));
    }
    let sidecar: Sidecar = serde_json::from_slice(&std::fs::read(&side_path)?)?;
    if sidecar.schema_version != CHECKPOINT_SCHEMA_VERSION || sidecar.stage != stage {
        return Err(Error::Format(format!(
            "{} is not a {} checkpoint",
            side_path.display(),
            stage.name()
        )));
    }
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut step = None;
    for (name, r) in read_container(&ckpt_path)? {
        if let Some(n) = name.strip_prefix(PARAM) {
            params.insert(n, tensor(&r)?);
        } else if name.starts_with(MOMENT1) {
            m.push(tensor(&r)?);
        } else if name.starts_with(MOMENT2) {
            v.push(tensor(&r)?);
        } else if name == STEP {
            match &r.data {
                TensorData::I32(d) if d.len() == 2 => step = Some(d[0] as u32 as u64 | ((d[1] as u32 as u64) << 32)),
                _ => return Err(Error::Format("bad optimizer step record".into())),
            }
        } else {
            return Err(Error::Format(format!("unexpected tensor {name} in checkpoint")));
        }
    }
    let adam = match step {
        Some(step) if m.len() == params.len() && v.len() == params.len() => Some(AdamState { m, v, step }),
        None if m.is_empty() && v.is_empty() => None,
        _ => return Err(Error::Format("incomplete optimizer state".into())),
    };
    Ok(LoadedCheckpoint { sidecar, params, adam })
}

pub fn load_codec(dir: &Path) -> Result<Codec<f32>> {
    let c = load_checkpoint(dir, Stage::Vqvae)?;
    let cfg = c
        .sidecar
        .codec
        .ok_or_else(|| Error::Format("codec sidecar lacks architecture".into()))?;
    Codec::from_params(cfg, c.params)
}

pub fn load_vae(dir: &Path) -> Result<Vae<f32>> {
    let c = load_checkpoint(dir, Stage::Vae)?;
    let cfg = c
        .sidecar
        .codec
        .ok_or_else(|| Error::Format("VAE sidecar lacks architecture".into()))?;
    Vae::from_params(cfg, c.params)
}

pub fn load_prior(dir: &Path) -> Result<Prior<f32>> {
    let c = load_checkpoint(dir, Stage::Prior)?;
    let (cfg, g) = match (c.sidecar.prior, c.sidecar.grid) {
        (Some(cfg), Some(g)) => (cfg, g),
        _ => return Err(Error::Format("prior sidecar lacks architecture".into())),
    };
    Prior::from_params(cfg, g.classes, g.height, g.width, c.params)
}

pub fn save_curve(path: &Path, curve: &[LossPoint]) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(curve)?)?;
    Ok(())
}

pub fn load_curve(path: &Path) -> Result<Vec<LossPoint>> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}
