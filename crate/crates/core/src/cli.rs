//! Command-line workflow: generate, train, calibrate, score, evaluate, or all at once.

use std::path::{Path, PathBuf};

use clap::{ArgAction, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::codec::vae::Vae;
use crate::codec::{Codec, LatentGrid};
use crate::config::RunConfig;
use crate::data::corpus::{image_record, MANIFEST_FILE};
use crate::data::{Corpus, Manifest, SliceRecord, Split};
use crate::error::{Error, Result};
use crate::eval::{self, Report, ScoreEntry, ScoreReport, BASELINE, METHOD, REPORT_SCHEMA_VERSION};
use crate::format::{read_container, write_container, write_tensor, TensorRecord};
use crate::image::Image;
use crate::prior::{ConditioningContext, Prior};
use crate::rng;
use crate::scoring::{self, ScoringConfig};
use crate::train::checkpoint::{self, file_hash, Sidecar};
use crate::train::{self, Stage, StageContext};

#[derive(Parser, Debug)]
#[command(name = "lsr", version, about = "Anomaly detection by latent space restoration")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = true, action = ArgAction::Set)]
    pub deterministic: bool,
    /// Worker threads for scoring. Training is always single-threaded.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic corpus and its manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage; the prior stage needs a trained VQ-VAE in the same directory.
    Train {
        #[arg(long)]
        stage: Stage,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the stage's checkpoint if it belongs to the same run.
        #[arg(long)]
        resume: bool,
    },
    /// Derive thresholds from validation NLL percentiles (defaults without --data).
    Calibrate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        models: PathBuf,
    },
    /// Score evaluation splits with the method and the VAE baseline.
    Score {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute the metrics report from score files.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// generate, train (all stages), calibrate, score and evaluate under one directory.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Debug)]
pub struct Options {
    pub threads: usize,
    pub verbose: bool,
    pub resume: bool,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            threads: 1,
            verbose: false,
            resume: false,
        }
    }
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.global.config.as_deref(), cli.global.seed)?;
    let opts = Options {
        threads: cli.global.threads.max(1),
        verbose: !cli.global.quiet,
        resume: false,
    };
    match cli.command {
        Command::Generate { out } => {
            cmd_generate(&cfg, &out)?;
        }
        Command::Train {
            stage,
            data,
            out,
            resume,
        } => cmd_train(&cfg, stage, &data, &out, &Options { resume, ..opts })?,
        Command::Calibrate { data, models } => {
            cmd_calibrate(&cfg, data.as_deref(), &models)?;
        }
        Command::Score { data, models, out } => cmd_score(&cfg, &data, &models, &out, &opts)?,
        Command::Evaluate { scores, data, out } => {
            let out = out.unwrap_or_else(|| scores.join(REPORT_FILE));
            let report = cmd_evaluate(&cfg, &scores, &data, &out)?;
            print_summary(&report);
        }
        Command::Pipeline { out } => {
            let report = cmd_pipeline(&cfg, &out, &opts)?;
            print_summary(&report);
        }
    }
    Ok(())
}

fn print_summary(r: &Report) {
    let m = &r.metrics;
    println!(
        "method:   slice AUROC {:.4} AP {:.4} | pixel AUROC {:.4} AP {:.4} dice {:.4}",
        m.method.slice.auroc, m.method.slice.ap, m.method.pixel.auroc, m.method.pixel.ap, m.method.pixel.dice
    );
    println!(
        "baseline: slice AUROC {:.4} AP {:.4} | pixel AUROC {:.4} AP {:.4} dice {:.4}",
        m.baseline.slice.auroc, m.baseline.slice.ap, m.baseline.pixel.auroc, m.baseline.pixel.ap, m.baseline.pixel.dice
    );
    if let Some(p) = &r.contrast_probe {
        println!(
            "contrast probe: pixel AUROC low {:.4} high {:.4}",
            p.low_delta_pixel_auroc, p.high_delta_pixel_auroc
        );
    }
}

pub const REPORT_FILE: &str = "report.json";
pub const THRESHOLDS_FILE: &str = "thresholds.json";
const LATENTS_FILE: &str = "latents.lsrc";
const LATENTS_META: &str = "latents.json";

pub fn cmd_generate(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let corpus = Corpus::generate(&cfg.data, cfg.seed)?;
    std::fs::create_dir_all(out)?;
    corpus.write(out, &cfg.hash(), cfg.seed)
}

fn load_manifest(data_dir: &Path, cfg: &RunConfig) -> Result<Manifest> {
    let m = Manifest::load(&data_dir.join(MANIFEST_FILE))?;
    check_hash("corpus", &m.config_hash, cfg)?;
    Ok(m)
}

fn check_hash(what: &str, found: &str, cfg: &RunConfig) -> Result<()> {
    if found != cfg.hash() {
        return Err(Error::InvalidArgument(format!(
            "{what} was produced with config {found}, current config is {}; regenerate it",
            cfg.hash()
        )));
    }
    Ok(())
}

fn checked_sidecar(dir: &Path, stage: Stage, cfg: &RunConfig) -> Result<Sidecar> {
    let c = checkpoint::load_checkpoint(dir, stage)?;
    check_hash(&format!("{} checkpoint", stage.name()), &c.sidecar.config_hash, cfg)?;
    if !c.sidecar.finished {
        return Err(Error::MissingDependency(format!(
            "{} checkpoint stopped at step {}; resume training first",
            stage.name(),
            c.sidecar.step
        )));
    }
    Ok(c.sidecar)
}

#[derive(Serialize, Deserialize)]
struct LatentCache {
    codec_checkpoint: String,
    manifest_hash: String,
    count: usize,
}

fn training_latents(
    codec: &Codec<f32>,
    images: &[Image],
    models: &Path,
    codec_hash: &str,
    manifest: &Manifest,
) -> Result<Vec<LatentGrid>> {
    let meta_path = models.join(LATENTS_META);
    let data_path = models.join(LATENTS_FILE);
    let side = codec.config().latent_side();
    if let Ok(bytes) = std::fs::read(&meta_path) {
        if let Ok(meta) = serde_json::from_slice::<LatentCache>(&bytes) {
            if meta.codec_checkpoint == codec_hash
                && meta.manifest_hash == manifest.hash()
                && meta.count == images.len()
            {
                let tensors = read_container(&data_path)?;
                if let Some((_, t)) = tensors.iter().find(|(n, _)| n == "grids") {
                    let data = t.as_i32()?;
                    return data
                        .chunks(side * side)
                        .map(|c| LatentGrid::new(side, side, c.iter().map(|&v| v as usize).collect()))
                        .collect();
                }
            }
        }
    }
    let grids = train::encode_corpus(codec, images)?;
    let flat: Vec<i32> = grids
        .iter()
        .flat_map(|g| g.indices().iter().map(|&v| v as i32))
        .collect();
    write_container(
        &data_path,
        &[("grids".into(), TensorRecord::i32(&[grids.len(), side, side], flat))],
    )?;
    let meta = LatentCache {
        codec_checkpoint: codec_hash.to_string(),
        manifest_hash: manifest.hash(),
        count: grids.len(),
    };
    std::fs::write(meta_path, serde_json::to_vec_pretty(&meta)?)?;
    Ok(grids)
}

pub fn cmd_train(cfg: &RunConfig, stage: Stage, data: &Path, out: &Path, opts: &Options) -> Result<()> {
    let manifest = load_manifest(data, cfg)?;
    let slices = manifest.load_split(data, Split::Train)?;
    let images: Vec<Image> = slices.iter().map(|s| s.image.clone()).collect();
    std::fs::create_dir_all(out)?;
    let ctx = StageContext {
        out_dir: Some(out),
        seed: cfg.seed,
        config_hash: cfg.hash(),
        resume: opts.resume,
        verbose: opts.verbose,
    };
    let tc = cfg.train.stage(stage);
    match stage {
        Stage::Vqvae => {
            let mut codec = Codec::new(cfg.codec.clone(), rng::derive_seed(cfg.seed, "init", &[0]))?;
            train::train_vqvae(&mut codec, &images, tc, &cfg.data.augment, &ctx)?;
        }
        Stage::Vae => {
            let mut vae = Vae::new(cfg.codec.clone(), rng::derive_seed(cfg.seed, "init", &[2]))?;
            train::train_vae(&mut vae, &images, tc, &cfg.data.augment, &ctx)?;
        }
        Stage::Prior => {
            checked_sidecar(out, Stage::Vqvae, cfg)?;
            let codec_hash = file_hash(&Stage::Vqvae.checkpoint_path(out))?;
            let codec = checkpoint::load_codec(out)?;
            let grids = training_latents(&codec, &images, out, &codec_hash, &manifest)?;
            let positions: Vec<f64> = slices.iter().map(|s| s.position).collect();
            let side = cfg.codec.latent_side();
            let mut prior = Prior::new(
                cfg.prior.clone(),
                cfg.codec.codebook_size,
                side,
                side,
                rng::derive_seed(cfg.seed, "init", &[1]),
            )?;
            train::train_prior(&mut prior, &grids, &positions, tc, Some(codec_hash), &ctx)?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub schema_version: u32,
    pub config_hash: String,
    pub lambda_s: f64,
    pub lambda_p: f64,
    /// `"validation"` when derived from data, `"defaults"` otherwise.
    pub source: String,
    pub population: usize,
}

/// Linear-interpolation percentile, `q` in `[0, 100]`.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::MissingInput("no values for percentile".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!("percentile {q}")));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

fn load_models(cfg: &RunConfig, models: &Path) -> Result<(Codec<f32>, Prior<f32>)> {
    checked_sidecar(models, Stage::Vqvae, cfg)?;
    let prior_side = checked_sidecar(models, Stage::Prior, cfg)?;
    let codec_hash = file_hash(&Stage::Vqvae.checkpoint_path(models))?;
    if prior_side.codec_checkpoint.as_deref() != Some(codec_hash.as_str()) {
        return Err(Error::MissingDependency(
            "prior was trained against a different VQ-VAE checkpoint; retrain the prior".into(),
        ));
    }
    Ok((checkpoint::load_codec(models)?, checkpoint::load_prior(models)?))
}

pub fn cmd_calibrate(cfg: &RunConfig, data: Option<&Path>, models: &Path) -> Result<Thresholds> {
    let thresholds = match data {
        None => Thresholds {
            schema_version: REPORT_SCHEMA_VERSION,
            config_hash: cfg.hash(),
            lambda_s: ScoringConfig::default().lambda_s,
            lambda_p: ScoringConfig::default().lambda_p,
            source: "defaults".into(),
            population: 0,
        },
        Some(dir) => {
            let manifest = load_manifest(dir, cfg)?;
            let (codec, prior) = load_models(cfg, models)?;
            let slices = manifest.load_split(dir, Split::Val)?;
            let images: Vec<Image> = slices.iter().map(|s| s.image.clone()).collect();
            let grids = train::encode_corpus(&codec, &images)?;
            let mut pooled = Vec::new();
            for chunk in grids.iter().zip(&slices).collect::<Vec<_>>().chunks(32) {
                let g: Vec<&LatentGrid> = chunk.iter().map(|(g, _)| *g).collect();
                let p: Vec<f64> = chunk.iter().map(|(_, s)| s.position).collect();
                for m in prior.nll_maps(&g, &p)? {
                    pooled.extend_from_slice(m.values());
                }
            }
            Thresholds {
                schema_version: REPORT_SCHEMA_VERSION,
                config_hash: cfg.hash(),
                lambda_s: percentile(&pooled, 98.0)?,
                lambda_p: percentile(&pooled, 90.0)?,
                source: "validation".into(),
                population: pooled.len(),
            }
        }
    };
    std::fs::create_dir_all(models)?;
    std::fs::write(models.join(THRESHOLDS_FILE), serde_json::to_vec_pretty(&thresholds)?)?;
    Ok(thresholds)
}

fn scoring_config(cfg: &RunConfig, models: &Path) -> Result<ScoringConfig> {
    let mut sc = cfg.scoring.clone();
    let path = models.join(THRESHOLDS_FILE);
    if path.exists() {
        let t: Thresholds = serde_json::from_slice(&std::fs::read(&path)?)?;
        check_hash("thresholds", &t.config_hash, cfg)?;
        sc.lambda_s = t.lambda_s;
        sc.lambda_p = t.lambda_p;
    }
    Ok(sc)
}

/// Everything needed to score images: the trained models and the thresholds in effect.
pub struct ScoringModels {
    pub codec: Codec<f32>,
    pub prior: Prior<f32>,
    pub vae: Vae<f32>,
    pub scoring: ScoringConfig,
}

/// Load and cross-check the three checkpoints (and thresholds, if calibrated) in `models`.
pub fn load_scoring_models(cfg: &RunConfig, models: &Path) -> Result<ScoringModels> {
    let (codec, prior) = load_models(cfg, models)?;
    checked_sidecar(models, Stage::Vae, cfg)?;
    Ok(ScoringModels {
        codec,
        prior,
        vae: checkpoint::load_vae(models)?,
        scoring: scoring_config(cfg, models)?,
    })
}

/// Map `f` over `items` on up to `threads` scoped workers, preserving order.
fn parallel_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("scoring worker panicked")?);
        }
        Ok(out)
    })
}

fn map_name(s: &SliceRecord) -> String {
    format!("maps/{:07}_{:03}.lsrt", s.subject_id, s.index)
}

fn write_scores(
    out: &Path,
    method: &str,
    split: Split,
    slices: &[SliceRecord],
    results: Vec<(f64, Image)>,
    cfg: &RunConfig,
    manifest: &Manifest,
) -> Result<()> {
    let dir = out.join(method).join(split.name());
    std::fs::create_dir_all(dir.join("maps"))?;
    let mut entries = Vec::with_capacity(slices.len());
    for (s, (score, map)) in slices.iter().zip(results) {
        let name = map_name(s);
        write_tensor(&dir.join(&name), &image_record(&map))?;
        entries.push(ScoreEntry {
            id: s.id(),
            subject_id: s.subject_id,
            index: s.index,
            slice_position: s.position,
            sample_score: score,
            map: name,
        });
    }
    ScoreReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config_hash: cfg.hash(),
        manifest_hash: manifest.hash(),
        method: method.to_string(),
        split,
        entries,
    }
    .save(&ScoreReport::path(out, method, split))
}

fn evaluation_splits(cfg: &RunConfig, manifest: &Manifest) -> Vec<Split> {
    Split::evaluation()
        .into_iter()
        .filter(|&s| s == Split::Val || (cfg.eval.contrast_probe && manifest.volume_count(s) > 0))
        .collect()
}

pub fn cmd_score(cfg: &RunConfig, data: &Path, models: &Path, out: &Path, opts: &Options) -> Result<()> {
    let manifest = load_manifest(data, cfg)?;
    let ScoringModels {
        codec,
        prior,
        vae,
        scoring: sc,
    } = load_scoring_models(cfg, models)?;
    for split in evaluation_splits(cfg, &manifest) {
        let slices = manifest.load_split(data, split)?;
        if opts.verbose {
            eprintln!("[score] {}: {} slices", split.name(), slices.len());
        }
        let method = parallel_map(&slices, opts.threads, |s| {
            let ctx = ConditioningContext::new(s.position)?;
            let seed = rng::derive_seed(cfg.seed, "score", &[split as u64, s.subject_id, s.index as u64]);
            let r = scoring::score_image(&s.image, &codec, &prior, ctx, &sc, seed)?;
            Ok((r.sample_score, r.map.into_image()))
        })?;
        write_scores(out, METHOD, split, &slices, method, cfg, &manifest)?;
        let baseline = parallel_map(&slices, opts.threads, |s| {
            let (score, map) = scoring::vae_scores(&s.image, &vae)?;
            Ok((score, map.into_image()))
        })?;
        write_scores(out, BASELINE, split, &slices, baseline, cfg, &manifest)?;
    }
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, scores: &Path, data: &Path, out: &Path) -> Result<Report> {
    let manifest = load_manifest(data, cfg)?;
    for split in evaluation_splits(cfg, &manifest) {
        for method in [METHOD, BASELINE] {
            let r = ScoreReport::load(&ScoreReport::path(scores, method, split))?;
            check_hash(&format!("{method} scores for {}", split.name()), &r.config_hash, cfg)?;
        }
    }
    let report = eval::evaluate(scores, data, &manifest, &cfg.hash(), cfg.eval.contrast_probe)?;
    if let Some(parent) = out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(out, report.to_json()?)?;
    Ok(report)
}

/// Full workflow under `out/{data,models,scores}` plus `out/report.json`.
pub fn cmd_pipeline(cfg: &RunConfig, out: &Path, opts: &Options) -> Result<Report> {
    let data = out.join("data");
    let models = out.join("models");
    let scores = out.join("scores");
    cmd_generate(cfg, &data)?;
    for stage in [Stage::Vqvae, Stage::Prior, Stage::Vae] {
        cmd_train(cfg, stage, &data, &models, opts)?;
    }
    cmd_calibrate(cfg, Some(&data), &models)?;
    cmd_score(cfg, &data, &models, &scores, opts)?;
    cmd_evaluate(cfg, &scores, &data, &out.join(REPORT_FILE))
}

/// Process exit code for an error kind.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidConfig(_) | Error::InvalidArgument(_) => 2,
        Error::MissingInput(_) | Error::MissingDependency(_) => 3,
        Error::Divergence { .. } | Error::NonFinite(_) => 4,
        Error::Format(_) | Error::Json(_) => 5,
        _ => 1,
    }
}

/// Machine-readable error for stderr.
pub fn error_json(e: &Error) -> String {
    let kind = format!("{e:?}");
    let kind = kind.split(['(', ' ', '{']).next().unwrap_or("Error").to_string();
    serde_json::json!({ "error": kind, "message": e.to_string() }).to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_interpolates() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert!((percentile(&v, 90.0).unwrap() - 90.1).abs() < 1e-12);
        assert!((percentile(&v, 98.0).unwrap() - 98.02).abs() < 1e-12);
        assert_eq!(percentile(&v, 0.0).unwrap(), 1.0);
        assert_eq!(percentile(&v, 100.0).unwrap(), 100.0);
        assert!(percentile(&[], 50.0).is_err());
    }

    #[test]
    fn error_json_names_the_kind() {
        let j = error_json(&Error::MissingDependency("x".into()));
        assert!(j.contains("\"MissingDependency\""));
        assert_eq!(exit_code(&Error::MissingDependency("x".into())), 3);
    }

    #[test]
    fn cli_parses_flags() {
        let cli = Cli::try_parse_from([
            "lsr",
            "train",
            "--stage",
            "prior",
            "--data",
            "d",
            "--out",
            "m",
            "--seed",
            "5",
            "--deterministic",
            "true",
        ])
        .unwrap();
        assert_eq!(cli.global.seed, Some(5));
        assert!(matches!(
            cli.command,
            Command::Train {
                stage: Stage::Prior,
                ..
            }
        ));
        assert!(Cli::try_parse_from(["lsr", "train", "--stage", "nope", "--data", "d", "--out", "m"]).is_err());
    }
}
