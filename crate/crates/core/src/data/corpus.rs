//! Train/validation corpora, their on-disk layout and the JSON manifest.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::format::{read_tensor, write_tensor, TensorRecord};
use crate::image::{Image, Mask};
use crate::rng;

use super::{generate_volume, inject_volume, normalize, AnomalyShape, AnomalySpec, AugmentConfig, PseudoVolume};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const VAL_SUBJECT_OFFSET: u64 = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_volumes: usize,
    pub val_volumes: usize,
    /// Validation volumes left without an anomaly.
    pub val_normal_volumes: usize,
    pub slices: usize,
    pub side: usize,
    pub radius_range: (usize, usize),
    pub delta_range: (f64, f64),
    /// Anomaly centres are drawn from this fraction of the image side.
    pub center_range: (f64, f64),
    /// Number of contiguous slices an anomaly spans.
    pub span_range: (usize, usize),
    /// Fixed contrasts for the low/high contrast probe splits.
    pub probe_deltas: (f64, f64),
    pub augment: AugmentConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_volumes: 64,
            val_volumes: 8,
            val_normal_volumes: 2,
            slices: 16,
            side: 32,
            radius_range: (3, 8),
            delta_range: (0.5, 2.0),
            center_range: (0.3, 0.7),
            span_range: (3, 8),
            probe_deltas: (0.5, 2.0),
            augment: AugmentConfig::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.train_volumes == 0 || self.slices < 2 || self.side < 8 {
            return bad("data needs >= 1 training volume, >= 2 slices and side >= 8");
        }
        if self.val_normal_volumes > self.val_volumes {
            return bad("data.val_normal_volumes exceeds data.val_volumes");
        }
        if self.radius_range.0 > self.radius_range.1 || 2 * self.radius_range.1 + 1 > self.side {
            return bad("data.radius_range must be ordered and fit inside the image");
        }
        let d = self.delta_range;
        if !(d.0 > 0.0 && d.0 <= d.1 && d.1.is_finite()) {
            return bad("data.delta_range must satisfy 0 < lo <= hi");
        }
        let c = self.center_range;
        if !(0.0 <= c.0 && c.0 <= c.1 && c.1 <= 1.0) {
            return bad("data.center_range must lie in [0, 1]");
        }
        if self.span_range.0 == 0 || self.span_range.0 > self.span_range.1 {
            return bad("data.span_range must satisfy 1 <= lo <= hi");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    ProbeLow,
    ProbeHigh,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::ProbeLow => "probe_low",
            Split::ProbeHigh => "probe_high",
        }
    }

    pub fn evaluation() -> [Split; 3] {
        [Split::Val, Split::ProbeLow, Split::ProbeHigh]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyRecord {
    pub spec: AnomalySpec,
    pub first_slice: usize,
    /// Exclusive.
    pub end_slice: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVolume {
    pub split: Split,
    pub volume: PseudoVolume,
    pub masks: Vec<Mask>,
    pub anomaly: Option<AnomalyRecord>,
}

/// Normalized volumes for every split.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub volumes: Vec<LabeledVolume>,
}

fn draw_anomaly(cfg: &DataConfig, seed: u64, index: u64) -> AnomalyRecord {
    let mut r = rng::stream(seed, "anomaly", &[index]);
    let shape = if r.gen_bool(0.5) {
        AnomalyShape::Disk
    } else {
        AnomalyShape::Square
    };
    let radius = r.gen_range(cfg.radius_range.0..=cfg.radius_range.1);
    let side = cfg.side as f64;
    let lo = ((cfg.center_range.0 * side).ceil() as usize).max(radius);
    let hi = ((cfg.center_range.1 * side).floor() as usize)
        .min(cfg.side - 1 - radius)
        .max(lo);
    let center_row = r.gen_range(lo..=hi);
    let center_col = r.gen_range(lo..=hi);
    let magnitude = r.gen_range(cfg.delta_range.0..=cfg.delta_range.1);
    let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
    let span = r.gen_range(cfg.span_range.0..=cfg.span_range.1).min(cfg.slices);
    let first_slice = r.gen_range(0..=cfg.slices - span);
    AnomalyRecord {
        spec: AnomalySpec {
            shape,
            center_row,
            center_col,
            radius,
            intensity_delta: sign * magnitude,
        },
        first_slice,
        end_slice: first_slice + span,
    }
}

impl Corpus {
    pub fn generate(cfg: &DataConfig, seed: u64) -> Result<Corpus> {
        cfg.validate()?;
        let mut volumes = Vec::new();
        for i in 0..cfg.train_volumes as u64 {
            let v = normalize(&generate_volume(seed, i, cfg.slices, cfg.side)?)?;
            let masks = vec![Mask::empty(cfg.side, cfg.side); cfg.slices];
            volumes.push(LabeledVolume {
                split: Split::Train,
                volume: v,
                masks,
                anomaly: None,
            });
        }
        let mut probes = Vec::new();
        for i in 0..cfg.val_volumes as u64 {
            let base = normalize(&generate_volume(seed, VAL_SUBJECT_OFFSET + i, cfg.slices, cfg.side)?)?;
            if (i as usize) < cfg.val_normal_volumes {
                volumes.push(LabeledVolume {
                    split: Split::Val,
                    volume: base.clone(),
                    masks: vec![Mask::empty(cfg.side, cfg.side); cfg.slices],
                    anomaly: None,
                });
                continue;
            }
            let record = draw_anomaly(cfg, seed, i);
            let range = record.first_slice..record.end_slice;
            let (v, masks) = inject_volume(&base, &record.spec, range.clone())?;
            volumes.push(LabeledVolume {
                split: Split::Val,
                volume: v,
                masks,
                anomaly: Some(record.clone()),
            });
            let sign = record.spec.intensity_delta.signum();
            for (split, mag) in [
                (Split::ProbeLow, cfg.probe_deltas.0),
                (Split::ProbeHigh, cfg.probe_deltas.1),
            ] {
                let mut rec = record.clone();
                rec.spec.intensity_delta = sign * mag;
                let (v, masks) = inject_volume(&base, &rec.spec, range.clone())?;
                probes.push(LabeledVolume {
                    split,
                    volume: v,
                    masks,
                    anomaly: Some(rec),
                });
            }
        }
        probes.sort_by_key(|v| v.split == Split::ProbeHigh);
        volumes.extend(probes);
        Ok(Corpus { volumes })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledVolume> {
        self.volumes.iter().filter(move |v| v.split == split)
    }

    /// Hash over all pixel values at full precision.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.volumes {
            h.update(v.split.name().as_bytes());
            h.update(v.volume.subject_id.to_le_bytes());
            for (s, m) in v.volume.slices.iter().zip(&v.masks) {
                for x in s.data() {
                    h.update(x.to_le_bytes());
                }
                h.update(m.data().iter().map(|&b| b as u8).collect::<Vec<_>>());
            }
        }
        hex::encode(h.finalize())
    }

    /// Write slices and masks under `dir` and return the manifest (also written).
    pub fn write(&self, dir: &Path, config_hash: &str, seed: u64) -> Result<Manifest> {
        let mut entries = Vec::new();
        for v in &self.volumes {
            let rel_dir = PathBuf::from(v.split.name()).join(format!("{:07}", v.volume.subject_id));
            std::fs::create_dir_all(dir.join(&rel_dir))?;
            let mut slices = Vec::new();
            for (i, (img, m)) in v.volume.slices.iter().zip(&v.masks).enumerate() {
                let image_rel = rel_dir.join(format!("slice_{i:03}.lsrt"));
                write_tensor(&dir.join(&image_rel), &image_record(img))?;
                let mask_rel = if v.split == Split::Train {
                    None
                } else {
                    let p = rel_dir.join(format!("mask_{i:03}.lsrt"));
                    write_tensor(&dir.join(&p), &mask_record(m))?;
                    Some(path_string(&p))
                };
                slices.push(SliceEntry {
                    index: i,
                    position: v.volume.positions[i],
                    image: path_string(&image_rel),
                    mask: mask_rel,
                    anomalous: m.any(),
                });
            }
            entries.push(VolumeEntry {
                subject_id: v.volume.subject_id,
                split: v.split,
                value_range: v.volume.value_range,
                anomaly: v.anomaly.clone(),
                slices,
            });
        }
        let side = self.volumes.first().map_or(0, |v| v.volume.side());
        let manifest = Manifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            side,
            corpus_hash: self.hash(),
            volumes: entries,
        };
        manifest.save(&dir.join(MANIFEST_FILE))?;
        Ok(manifest)
    }
}

fn path_string(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn image_record(img: &Image) -> TensorRecord {
    TensorRecord::f32(
        &[img.height(), img.width()],
        img.data().iter().map(|&v| v as f32).collect(),
    )
}

pub fn mask_record(m: &Mask) -> TensorRecord {
    TensorRecord::i32(&[m.height(), m.width()], m.data().iter().map(|&b| b as i32).collect())
}

pub fn image_from_record(t: &TensorRecord) -> Result<Image> {
    if t.dims.len() != 2 {
        return Err(Error::Format(format!("expected a 2-d image, got dims {:?}", t.dims)));
    }
    Image::new(t.dims[0], t.dims[1], t.as_f32()?.iter().map(|&v| v as f64).collect())
}

pub fn mask_from_record(t: &TensorRecord) -> Result<Mask> {
    if t.dims.len() != 2 {
        return Err(Error::Format(format!("expected a 2-d mask, got dims {:?}", t.dims)));
    }
    Mask::new(t.dims[0], t.dims[1], t.as_i32()?.iter().map(|&v| v != 0).collect())
}

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceEntry {
    pub index: usize,
    pub position: f64,
    pub image: String,
    pub mask: Option<String>,
    pub anomalous: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeEntry {
    pub subject_id: u64,
    pub split: Split,
    pub value_range: (f64, f64),
    pub anomaly: Option<AnomalyRecord>,
    pub slices: Vec<SliceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub side: usize,
    pub corpus_hash: String,
    pub volumes: Vec<VolumeEntry>,
}

/// One slice loaded from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub subject_id: u64,
    pub split: Split,
    pub index: usize,
    pub position: f64,
    pub image: Image,
    pub mask: Option<Mask>,
}

impl SliceRecord {
    pub fn id(&self) -> String {
        format!("{}/{:07}/{:03}", self.split.name(), self.subject_id, self.index)
    }

    pub fn is_anomalous(&self) -> bool {
        self.mask.as_ref().is_some_and(|m| m.any())
    }
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let bytes = std::fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        let m: Manifest = serde_json::from_slice(&bytes)?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Format(format!("manifest schema version {}", m.schema_version)));
        }
        Ok(m)
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("manifest serializes")))
    }

    pub fn volume_count(&self, split: Split) -> usize {
        self.volumes.iter().filter(|v| v.split == split).count()
    }

    /// Load every slice of a split, in manifest order.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Vec<SliceRecord>> {
        let mut out = Vec::new();
        for v in self.volumes.iter().filter(|v| v.split == split) {
            for s in &v.slices {
                let image = image_from_record(&read_tensor(&dir.join(&s.image))?)?;
                let mask = match &s.mask {
                    Some(p) => Some(mask_from_record(&read_tensor(&dir.join(p))?)?),
                    None => None,
                };
                out.push(SliceRecord {
                    subject_id: v.subject_id,
                    split,
                    index: s.index,
                    position: s.position,
                    image,
                    mask,
                });
            }
        }
        Ok(out)
    }
}
