//! Optimization harness: Adam, the step loop with checkpoint/resume, and the
//! three training stages (VQ-VAE, prior over frozen-codec latents, VAE baseline).

pub mod checkpoint;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::vae::Vae;
use crate::codec::{Codec, LatentGrid};
use crate::data::{augment, AugmentConfig};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::ParamStore;
use crate::prior::Prior;
use crate::rng::{self, RandomSource};
use crate::tensor::Tensor;

pub use checkpoint::{GridShape, Sidecar, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub checkpoint_interval: u64,
    pub log_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 16,
            max_steps: 5000,
            checkpoint_interval: 500,
            log_interval: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate must be > 0");
        }
        if !(0.0 < self.adam_beta1 && self.adam_beta1 < 1.0 && 0.0 < self.adam_beta2 && self.adam_beta2 < 1.0) {
            return bad("train Adam betas must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("train.adam_eps must be > 0");
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1");
        }
        if self.checkpoint_interval == 0 || self.log_interval == 0 {
            return bad("train intervals must be >= 1");
        }
        Ok(())
    }
}

/// First and second moment estimates, one tensor per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Non-finite gradients abort before any mutation.
pub fn adam_step(
    params: &mut ParamStore<f32>,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::DimensionMismatch(
            "parameter, gradient and moment counts differ".into(),
        ));
    }
    for ((name, p), g) in params.names().iter().zip(params.tensors()).zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::DimensionMismatch(format!("gradient shape for {name}")));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    let lr = cfg.learning_rate;
    let eps = cfg.adam_eps;
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = b1f * *mi + (1.0 - b1f) * gi;
            *vi = b2f * *vi + (1.0 - b2f) * gi * gi;
            let mhat = *mi as f64 / c1;
            let vhat = *vi as f64 / c2;
            *pi -= (lr * mhat / (vhat.sqrt() + eps)) as f32;
        }
    }
    Ok(())
}

/// Logged loss terms at one optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub terms: BTreeMap<String, f64>,
}

/// Where a stage writes checkpoints and whether it may resume from them.
#[derive(Clone, Debug)]
pub struct StageContext<'a> {
    pub out_dir: Option<&'a Path>,
    pub seed: u64,
    pub config_hash: String,
    pub resume: bool,
    pub verbose: bool,
}

impl<'a> StageContext<'a> {
    pub fn in_memory(seed: u64) -> Self {
        StageContext {
            out_dir: None,
            seed,
            config_hash: String::new(),
            resume: false,
            verbose: false,
        }
    }
}

struct StepOutput {
    terms: BTreeMap<String, f64>,
    grads: Vec<Tensor<f32>>,
    codes: Vec<usize>,
}

fn divergence(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Divergence { step, detail },
        other => other,
    }
}

/// Run optimizer steps until `cfg.max_steps`, checkpointing along the way.
fn optimize(
    params: &mut ParamStore<f32>,
    cfg: &TrainConfig,
    ctx: &StageContext<'_>,
    mut sidecar: Sidecar,
    codebook_size: Option<usize>,
    mut step_fn: impl FnMut(&ParamStore<f32>, u64) -> Result<StepOutput>,
) -> Result<Vec<LossPoint>> {
    cfg.validate()?;
    let stage = sidecar.stage;
    let mut state = AdamState::new(params);
    let mut curve = Vec::new();
    if let (true, Some(dir)) = (ctx.resume, ctx.out_dir) {
        if stage.checkpoint_path(dir).exists() {
            let c = checkpoint::load_checkpoint(dir, stage)?;
            // a longer budget may extend a finished run; anything else starts over
            let previous = TrainConfig {
                max_steps: cfg.max_steps,
                ..c.sidecar.train.clone()
            };
            let same_run = c.sidecar.seed == sidecar.seed
                && c.sidecar.config_hash == sidecar.config_hash
                && previous == sidecar.train
                && c.sidecar.step <= cfg.max_steps;
            if let (true, Some(adam)) = (same_run, c.adam) {
                if c.params.names() != params.names() {
                    return Err(Error::Format("checkpoint parameters do not match the model".into()));
                }
                *params = c.params;
                state = adam;
                if let Ok(previous) = checkpoint::load_curve(&stage.curve_path(dir)) {
                    curve = previous.into_iter().filter(|p| p.step < state.step).collect();
                }
            }
        }
    }
    let mut used = vec![false; codebook_size.unwrap_or(0)];
    let mut save = |params: &ParamStore<f32>, state: &AdamState, curve: &[LossPoint], finished: bool| -> Result<()> {
        if let Some(dir) = ctx.out_dir {
            sidecar.step = state.step;
            sidecar.finished = finished;
            checkpoint::save_checkpoint(dir, &sidecar, params, Some(state))?;
            checkpoint::save_curve(&stage.curve_path(dir), curve)?;
        }
        Ok(())
    };
    while state.step < cfg.max_steps {
        let step = state.step;
        let out = step_fn(params, step).map_err(|e| divergence(step, e))?;
        if out.terms.values().any(|v| !v.is_finite()) {
            return Err(Error::Divergence {
                step,
                detail: format!("{:?}", out.terms),
            });
        }
        for &c in &out.codes {
            used[c] = true;
        }
        adam_step(params, &out.grads, &mut state, cfg).map_err(|e| divergence(step, e))?;
        let last = state.step == cfg.max_steps;
        if step % cfg.log_interval == 0 || last {
            let mut terms = out.terms;
            if codebook_size.is_some() {
                // codes never selected since the previous log point
                terms.insert("unused_codes".into(), used.iter().filter(|u| !**u).count() as f64);
                used.iter_mut().for_each(|u| *u = false);
            }
            if ctx.verbose {
                let text: Vec<String> = terms.iter().map(|(k, v)| format!("{k}={v:.5}")).collect();
                eprintln!("[{}] step {step}: {}", stage.name(), text.join(" "));
            }
            curve.push(LossPoint { step, terms });
        }
        if state.step % cfg.checkpoint_interval == 0 && !last {
            save(params, &state, &curve, false)?;
        }
    }
    save(params, &state, &curve, true)?;
    Ok(curve)
}

fn draw_batch(seed: u64, stage: Stage, step: u64, n: usize, size: usize) -> Vec<usize> {
    let mut r = rng::stream(seed, "batch", &[stage as u64, step]);
    (0..size).map(|_| r.gen_range(0..n)).collect()
}

fn batch_images(
    images: &[Image],
    idx: &[usize],
    augment_cfg: &AugmentConfig,
    seed: u64,
    stage: Stage,
    step: u64,
) -> Vec<Image> {
    idx.iter()
        .enumerate()
        .map(|(k, &i)| {
            if augment_cfg.is_identity() {
                images[i].clone()
            } else {
                let mut r = rng::stream(seed, "augment", &[stage as u64, step, k as u64]);
                augment(&images[i], &mut r, augment_cfg)
            }
        })
        .collect()
}

fn dropout_rng(seed: u64, stage: Stage, step: u64) -> RandomSource {
    rng::stream(seed, "dropout", &[stage as u64, step])
}

fn base_sidecar(stage: Stage, cfg: &TrainConfig, ctx: &StageContext<'_>) -> Sidecar {
    Sidecar {
        schema_version: checkpoint::CHECKPOINT_SCHEMA_VERSION,
        stage,
        seed: ctx.seed,
        step: 0,
        finished: false,
        config_hash: ctx.config_hash.clone(),
        train: cfg.clone(),
        codec: None,
        prior: None,
        grid: None,
        codec_checkpoint: None,
    }
}

fn non_empty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::MissingInput(format!("no {what} to train on")));
    }
    Ok(())
}

pub fn train_vqvae(
    codec: &mut Codec<f32>,
    images: &[Image],
    cfg: &TrainConfig,
    augment_cfg: &AugmentConfig,
    ctx: &StageContext<'_>,
) -> Result<Vec<LossPoint>> {
    non_empty(images, "images")?;
    let stage = Stage::Vqvae;
    let mut sidecar = base_sidecar(stage, cfg, ctx);
    sidecar.codec = Some(codec.config().clone());
    let config = codec.config().clone();
    let k = config.codebook_size;
    let mut params = codec.params().clone();
    let curve = optimize(&mut params, cfg, ctx, sidecar, Some(k), |p, step| {
        let model = Codec::from_params(config.clone(), p.clone())?;
        let idx = draw_batch(ctx.seed, stage, step, images.len(), cfg.batch_size);
        let batch = batch_images(images, &idx, augment_cfg, ctx.seed, stage, step);
        let refs: Vec<&Image> = batch.iter().collect();
        let mut drop = dropout_rng(ctx.seed, stage, step);
        let (loss, grads, codes) = model.loss_and_grads(&refs, None, Some(&mut drop))?;
        Ok(StepOutput {
            terms: BTreeMap::from([
                ("reconstruction".to_string(), loss.reconstruction),
                ("codebook".to_string(), loss.codebook_term),
                ("commitment".to_string(), loss.commitment_term),
                ("total".to_string(), loss.total),
            ]),
            grads,
            codes,
        })
    })?;
    *codec = Codec::from_params(config, params)?;
    Ok(curve)
}

pub fn train_vae(
    vae: &mut Vae<f32>,
    images: &[Image],
    cfg: &TrainConfig,
    augment_cfg: &AugmentConfig,
    ctx: &StageContext<'_>,
) -> Result<Vec<LossPoint>> {
    non_empty(images, "images")?;
    let stage = Stage::Vae;
    let mut sidecar = base_sidecar(stage, cfg, ctx);
    sidecar.codec = Some(vae.config().clone());
    let config = vae.config().clone();
    let mut params = vae.params().clone();
    let curve = optimize(&mut params, cfg, ctx, sidecar, None, |p, step| {
        let model = Vae::from_params(config.clone(), p.clone())?;
        let idx = draw_batch(ctx.seed, stage, step, images.len(), cfg.batch_size);
        let batch = batch_images(images, &idx, augment_cfg, ctx.seed, stage, step);
        let refs: Vec<&Image> = batch.iter().collect();
        let noise = model.draw_noise(refs.len(), &mut rng::stream(ctx.seed, "vae-noise", &[step]));
        let mut drop = dropout_rng(ctx.seed, stage, step);
        let (loss, grads) = model.loss_and_grads(&refs, &noise, Some(&mut drop))?;
        Ok(StepOutput {
            terms: BTreeMap::from([
                ("reconstruction".to_string(), loss.reconstruction),
                ("kl".to_string(), loss.kl),
                ("total".to_string(), loss.total),
            ]),
            grads,
            codes: Vec::new(),
        })
    })?;
    *vae = Vae::from_params(config, params)?;
    Ok(curve)
}

/// Train the prior on latent grids produced by a frozen codec.
pub fn train_prior(
    prior: &mut Prior<f32>,
    grids: &[LatentGrid],
    positions: &[f64],
    cfg: &TrainConfig,
    codec_checkpoint: Option<String>,
    ctx: &StageContext<'_>,
) -> Result<Vec<LossPoint>> {
    non_empty(grids, "latent grids")?;
    if grids.len() != positions.len() {
        return Err(Error::DimensionMismatch("one slice position per latent grid".into()));
    }
    let stage = Stage::Prior;
    let mut sidecar = base_sidecar(stage, cfg, ctx);
    let order = prior.scan_order();
    sidecar.prior = Some(prior.config().clone());
    sidecar.grid = Some(GridShape {
        classes: prior.classes(),
        height: order.height,
        width: order.width,
    });
    sidecar.codec_checkpoint = codec_checkpoint;
    let (config, classes) = (prior.config().clone(), prior.classes());
    let mut params = prior.params().clone();
    let curve = optimize(&mut params, cfg, ctx, sidecar, None, |p, step| {
        let model = Prior::from_params(config.clone(), classes, order.height, order.width, p.clone())?;
        let idx = draw_batch(ctx.seed, stage, step, grids.len(), cfg.batch_size);
        let batch: Vec<&LatentGrid> = idx.iter().map(|&i| &grids[i]).collect();
        let pos: Vec<f64> = idx.iter().map(|&i| positions[i]).collect();
        let mut drop = dropout_rng(ctx.seed, stage, step);
        let (loss, grads) = model.loss_and_grads(&batch, &pos, Some(&mut drop))?;
        Ok(StepOutput {
            terms: BTreeMap::from([("nll".to_string(), loss)]),
            grads,
            codes: Vec::new(),
        })
    })?;
    *prior = Prior::from_params(config, classes, order.height, order.width, params)?;
    Ok(curve)
}

/// Encode images with a frozen codec in fixed-size chunks.
pub fn encode_corpus(codec: &Codec<f32>, images: &[Image]) -> Result<Vec<LatentGrid>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(32) {
        let refs: Vec<&Image> = chunk.iter().collect();
        out.extend(codec.latents(&refs)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f32]) -> ParamStore<f32> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::from_vec(&[values.len()], values.to_vec()));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = store(&[1.0, -2.0]);
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros(&[2])], &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(p.get("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = store(&[0.5, 0.5, 0.5]);
        let mut s = AdamState::new(&p);
        let cfg = TrainConfig::default();
        let g = Tensor::from_vec(&[3], vec![3.0, -0.02, 1e3]);
        adam_step(&mut p, &[g], &mut s, &cfg).unwrap();
        let w = p.get("w").unwrap().data();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        for (wi, gi) in w.iter().zip([3.0f64, -0.02, 1e3]) {
            let expect = 0.5 - 1e-4 * gi / (gi.abs() + 1e-8);
            assert!((*wi as f64 - expect).abs() < 1e-7, "{wi} vs {expect}");
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = store(&[1.0]);
        let mut s = AdamState::new(&p);
        let r = adam_step(
            &mut p,
            &[Tensor::from_vec(&[1], vec![f32::NAN])],
            &mut s,
            &TrainConfig::default(),
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(s.step, 0);
        assert_eq!(p.get("w").unwrap().data(), &[1.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            adam_beta1: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
