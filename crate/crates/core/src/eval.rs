//! Ranking and overlap metrics, and the evaluation report over scored splits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::corpus::image_from_record;
use crate::data::{Manifest, Split};
use crate::error::{Error, Result};
use crate::format::read_tensor;
use crate::image::Mask;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const SCORES_FILE: &str = "scores.json";

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("scores".into()));
        }
        Ok(ScoredSet { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    fn counts(&self) -> (usize, usize) {
        let pos = self.labels.iter().filter(|&&l| l).count();
        (pos, self.labels.len() - pos)
    }

    /// Indices sorted by descending score, grouped into runs of equal score.
    fn descending_groups(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut groups = Vec::new();
        let mut i = 0;
        while i < order.len() {
            let s = self.scores[order[i]];
            let (mut p, mut n) = (0, 0);
            while i < order.len() && self.scores[order[i]] == s {
                if self.labels[order[i]] {
                    p += 1;
                } else {
                    n += 1;
                }
                i += 1;
            }
            groups.push((p, n));
        }
        groups
    }
}

/// Probability a positive outranks a negative, ties counting one half.
pub fn auroc(set: &ScoredSet) -> Result<f64> {
    let (pos, neg) = set.counts();
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!("{pos} positives, {neg} negatives")));
    }
    let mut negatives_below = neg as f64;
    let mut wins = 0.0;
    for (p, n) in set.descending_groups() {
        negatives_below -= n as f64;
        wins += p as f64 * (negatives_below + 0.5 * n as f64);
    }
    Ok(wins / (pos as f64 * neg as f64))
}

/// Step-wise average precision over descending unique thresholds.
pub fn average_precision(set: &ScoredSet) -> Result<f64> {
    let (pos, _) = set.counts();
    if pos == 0 {
        return Err(Error::NoPositives);
    }
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    for (p, n) in set.descending_groups() {
        tp += p;
        seen += p + n;
        if p > 0 {
            ap += (p as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

pub fn dice(pred: &Mask, truth: &Mask) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::DimensionMismatch("dice masks".into()));
    }
    Ok(dice_counts(
        pred.data().iter().zip(truth.data()).filter(|(a, b)| **a && **b).count(),
        pred.count(),
        truth.count(),
    ))
}

fn dice_counts(both: usize, a: usize, b: usize) -> f64 {
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

/// Best dice of `score >= t` over the unique score values; ties keep the lowest `t`.
pub fn best_dice_pooled(scores: &[f64], truth: &[bool]) -> Result<(f64, f64)> {
    if scores.len() != truth.len() || scores.is_empty() {
        return Err(Error::DimensionMismatch("best dice inputs".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("anomaly map".into()));
    }
    let set = ScoredSet::new(scores.to_vec(), truth.to_vec())?;
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted.dedup();
    let total_true = truth.iter().filter(|&&t| t).count();
    let (mut tp, mut predicted) = (0, 0);
    let mut best = (sorted[0], -1.0);
    for ((p, n), threshold) in set.descending_groups().into_iter().zip(sorted) {
        tp += p;
        predicted += p + n;
        let d = dice_counts(tp, predicted, total_true);
        if d >= best.1 {
            best = (threshold, d);
        }
    }
    Ok(best)
}

pub fn best_dice(map: &[f64], truth: &Mask) -> Result<(f64, f64)> {
    best_dice_pooled(map, truth.data())
}

/// One slice's method output alongside its ground truth.
#[derive(Clone, Debug)]
pub struct ScoredSlice {
    pub sample_score: f64,
    pub map: Vec<f64>,
    pub truth: Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub auroc: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub auroc: f64,
    pub ap: f64,
    pub dice: f64,
    pub dice_threshold: f64,
}

/// Anomalous slices whose mean score inside the ground truth beats the mean outside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub hits: usize,
    pub anomalous: usize,
}

impl Localization {
    pub fn rate(&self) -> f64 {
        if self.anomalous == 0 {
            0.0
        } else {
            self.hits as f64 / self.anomalous as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub slice: SliceMetrics,
    pub pixel: PixelMetrics,
    pub localization: Localization,
}

pub fn method_metrics(slices: &[ScoredSlice]) -> Result<MethodMetrics> {
    let sample = ScoredSet::new(
        slices.iter().map(|s| s.sample_score).collect(),
        slices.iter().map(|s| s.truth.any()).collect(),
    )?;
    let mut pixel_scores = Vec::new();
    let mut pixel_truth = Vec::new();
    let mut loc = Localization { hits: 0, anomalous: 0 };
    for s in slices {
        if s.map.len() != s.truth.data().len() {
            return Err(Error::DimensionMismatch("anomaly map vs mask".into()));
        }
        pixel_scores.extend_from_slice(&s.map);
        pixel_truth.extend_from_slice(s.truth.data());
        if s.truth.any() {
            loc.anomalous += 1;
            let mean = |inside: bool| {
                let v: Vec<f64> = s
                    .map
                    .iter()
                    .zip(s.truth.data())
                    .filter(|(_, &t)| t == inside)
                    .map(|(v, _)| *v)
                    .collect();
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            if mean(true) > mean(false) {
                loc.hits += 1;
            }
        }
    }
    let pixels = ScoredSet::new(pixel_scores, pixel_truth)?;
    let (dice_threshold, dice) = best_dice_pooled(pixels.scores(), pixels.labels())?;
    Ok(MethodMetrics {
        slice: SliceMetrics {
            auroc: auroc(&sample)?,
            ap: average_precision(&sample)?,
        },
        pixel: PixelMetrics {
            auroc: auroc(&pixels)?,
            ap: average_precision(&pixels)?,
            dice,
            dice_threshold,
        },
        localization: loc,
    })
}

/// Per-slice entry in a score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreEntry {
    pub id: String,
    pub subject_id: u64,
    pub index: usize,
    pub slice_position: f64,
    pub sample_score: f64,
    /// Anomaly map tensor, relative to the score file's directory.
    pub map: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub manifest_hash: String,
    pub method: String,
    pub split: Split,
    pub entries: Vec<ScoreEntry>,
}

impl ScoreReport {
    pub fn path(score_dir: &Path, method: &str, split: Split) -> PathBuf {
        score_dir.join(method).join(split.name()).join(SCORES_FILE)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::MissingInput(format!("{}: {e}", path.display())))?;
        let r: ScoreReport = serde_json::from_slice(&bytes)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "score report schema version {}",
                r.schema_version
            )));
        }
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub manifest_hash: String,
    pub corpus_hash: String,
    pub train_volumes: usize,
    pub val_volumes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub method: MethodMetrics,
    pub baseline: MethodMetrics,
}

/// Pixel AUROC of the method on fixed low- and high-contrast copies of the
/// anomalous validation volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastProbe {
    pub low_delta_pixel_auroc: f64,
    pub high_delta_pixel_auroc: f64,
    pub low_is_harder: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub dataset: DatasetInfo,
    pub seeds: BTreeMap<String, u64>,
    pub config_hash: String,
    pub metrics: SplitMetrics,
    pub probes: BTreeMap<String, SplitMetrics>,
    pub contrast_probe: Option<ContrastProbe>,
}

impl Report {
    pub fn validate(&self) -> Result<()> {
        let check = |m: &MethodMetrics| {
            [m.slice.auroc, m.slice.ap, m.pixel.auroc, m.pixel.ap, m.pixel.dice]
                .iter()
                .all(|v| (0.0..=1.0).contains(v))
        };
        let all = std::iter::once(&self.metrics).chain(self.probes.values());
        for s in all {
            if !check(&s.method) || !check(&s.baseline) {
                return Err(Error::Format("metric outside [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}

pub const METHOD: &str = "method";
pub const BASELINE: &str = "baseline";

fn load_scored(
    score_dir: &Path,
    data_dir: &Path,
    manifest: &Manifest,
    method: &str,
    split: Split,
) -> Result<Vec<ScoredSlice>> {
    let path = ScoreReport::path(score_dir, method, split);
    let report = ScoreReport::load(&path)?;
    let manifest_hash = manifest.hash();
    if report.manifest_hash != manifest_hash {
        return Err(Error::InvalidArgument(format!(
            "{} was scored against a different manifest",
            path.display()
        )));
    }
    let truth = manifest.load_split(data_dir, split)?;
    if truth.len() != report.entries.len() {
        return Err(Error::MissingInput(format!(
            "{}: {} entries for {} slices",
            path.display(),
            report.entries.len(),
            truth.len()
        )));
    }
    let base = path.parent().expect("score file has a directory");
    report
        .entries
        .iter()
        .zip(truth)
        .map(|(e, t)| {
            if e.id != t.id() {
                return Err(Error::InvalidArgument(format!(
                    "score entry {} vs slice {}",
                    e.id,
                    t.id()
                )));
            }
            let map = image_from_record(&read_tensor(&base.join(&e.map))?)?;
            Ok(ScoredSlice {
                sample_score: e.sample_score,
                map: map.into_data(),
                truth: t
                    .mask
                    .ok_or_else(|| Error::MissingInput(format!("mask for {}", e.id)))?,
            })
        })
        .collect()
}

fn split_metrics(score_dir: &Path, data_dir: &Path, manifest: &Manifest, split: Split) -> Result<SplitMetrics> {
    Ok(SplitMetrics {
        method: method_metrics(&load_scored(score_dir, data_dir, manifest, METHOD, split)?)?,
        baseline: method_metrics(&load_scored(score_dir, data_dir, manifest, BASELINE, split)?)?,
    })
}

/// Build the report from score files. Validation is always scored; each
/// probe split is read when `with_probes` is set and the manifest has it.
pub fn evaluate(
    score_dir: &Path,
    data_dir: &Path,
    manifest: &Manifest,
    config_hash: &str,
    with_probes: bool,
) -> Result<Report> {
    let metrics = split_metrics(score_dir, data_dir, manifest, Split::Val)?;
    let mut probes = BTreeMap::new();
    for split in [Split::ProbeLow, Split::ProbeHigh] {
        if with_probes && manifest.volume_count(split) > 0 {
            probes.insert(
                split.name().to_string(),
                split_metrics(score_dir, data_dir, manifest, split)?,
            );
        }
    }
    let contrast_probe = match (probes.get(Split::ProbeLow.name()), probes.get(Split::ProbeHigh.name())) {
        (Some(lo), Some(hi)) => Some(ContrastProbe {
            low_delta_pixel_auroc: lo.method.pixel.auroc,
            high_delta_pixel_auroc: hi.method.pixel.auroc,
            low_is_harder: lo.method.pixel.auroc < hi.method.pixel.auroc,
        }),
        _ => None,
    };
    let report = Report {
        schema_version: REPORT_SCHEMA_VERSION,
        dataset: DatasetInfo {
            manifest_hash: manifest.hash(),
            corpus_hash: manifest.corpus_hash.clone(),
            train_volumes: manifest.volume_count(Split::Train),
            val_volumes: manifest.volume_count(Split::Val),
        },
        seeds: BTreeMap::from([("master".to_string(), manifest.seed)]),
        config_hash: config_hash.to_string(),
        metrics,
        probes,
        contrast_probe,
    };
    report.validate()?;
    Ok(report)
}
