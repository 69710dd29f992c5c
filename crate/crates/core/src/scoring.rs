//! Sample-wise and pixel-wise anomaly scores.
//!
//! The sample score sums per-position NLL above a threshold. The pixel score
//! resamples improbable latent codes from the prior, decodes the restorations,
//! weights their residuals by a softmax over inverse residual mass, and smooths
//! the result with a min filter followed by a mean filter.

use serde::{Deserialize, Serialize};

use crate::codec::vae::Vae;
use crate::codec::{Codec, LatentGrid};
use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::prior::{ConditioningContext, NllMap, Prior};
use crate::rng;
use crate::tensor::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringConfig {
    pub lambda_s: f64,
    pub lambda_p: f64,
    /// Number of restorations per image.
    pub restorations: usize,
    pub k_temp: f64,
    pub eps_denom: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            lambda_s: 7.0,
            lambda_p: 5.0,
            restorations: 15,
            k_temp: 100.0,
            eps_denom: 1e-8,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        // +inf thresholds are allowed: they disable the term entirely
        if self.lambda_s.is_nan() || self.lambda_s < 0.0 || self.lambda_p.is_nan() || self.lambda_p < 0.0 {
            return Err(Error::InvalidConfig("scoring thresholds must be >= 0".into()));
        }
        if self.restorations == 0 {
            return Err(Error::InvalidConfig("scoring.restorations must be >= 1".into()));
        }
        if !(self.k_temp >= 0.0 && self.k_temp.is_finite()) {
            return Err(Error::InvalidConfig("scoring.k_temp must be finite and >= 0".into()));
        }
        if !(self.eps_denom > 0.0) {
            return Err(Error::InvalidConfig("scoring.eps_denom must be > 0".into()));
        }
        Ok(())
    }
}

/// Non-negative pixel-space anomaly scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyMap(Image);

impl AnomalyMap {
    pub fn new(image: Image) -> Result<Self> {
        if image.data().iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidArgument(
                "anomaly map entries must be finite and >= 0".into(),
            ));
        }
        Ok(AnomalyMap(image))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn into_image(self) -> Image {
        self.0
    }

    /// Mean score over pixels where `mask` equals `inside`.
    pub fn region_mean(&self, mask: &Mask, inside: bool) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (&v, &m) in self.values().iter().zip(mask.data()) {
            if m == inside {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

pub fn sample_score(nll: &NllMap, lambda_s: f64) -> f64 {
    nll.values()
        .iter()
        .filter(|&&v| v > lambda_s)
        .fold(0.0, |acc, v| acc + v)
}

pub fn restoration_mask(nll: &NllMap, lambda_p: f64) -> Mask {
    let data = nll.values().iter().map(|&v| v > lambda_p).collect();
    Mask::new(nll.height(), nll.width(), data).expect("shape from NLL map")
}

/// Softmax weights of `k_temp / max(sum |original - restoration|, eps)`.
pub fn consolidation_weights(original: &Image, restorations: &[Image], cfg: &ScoringConfig) -> Result<Vec<f64>> {
    if restorations.is_empty() {
        return Err(Error::InvalidArgument("at least one restoration required".into()));
    }
    let mut logits = Vec::with_capacity(restorations.len());
    for r in restorations {
        let mass: f64 = original.abs_diff(r)?.data().iter().sum();
        logits.push(cfg.k_temp / mass.max(cfg.eps_denom));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|a| (a - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn consolidate(original: &Image, restorations: &[Image], cfg: &ScoringConfig) -> Result<AnomalyMap> {
    let weights = consolidation_weights(original, restorations, cfg)?;
    let mut out = Image::zeros(original.height(), original.width());
    for (w, r) in weights.iter().zip(restorations) {
        let res = original.abs_diff(r)?;
        for (o, v) in out.data_mut().iter_mut().zip(res.data()) {
            *o += w * v;
        }
    }
    AnomalyMap::new(out)
}

/// Stride-1 `k x k` window reduction with edge-clamped borders.
fn window_filter(img: &Image, k: usize, reduce: impl Fn(&mut dyn Iterator<Item = f64>) -> f64) -> Image {
    let half = (k / 2) as isize;
    Image::from_fn(img.height(), img.width(), |r, c| {
        let mut it = (-half..=half)
            .flat_map(|dr| (-half..=half).map(move |dc| img.get_clamped(r as isize + dr, c as isize + dc)));
        reduce(&mut it)
    })
}

pub fn min_filter(img: &Image, k: usize) -> Image {
    window_filter(img, k, |it: &mut dyn Iterator<Item = f64>| {
        it.fold(f64::INFINITY, f64::min)
    })
}

pub fn mean_filter(img: &Image, k: usize) -> Image {
    let n = (k * k) as f64;
    window_filter(img, k, |it: &mut dyn Iterator<Item = f64>| it.sum::<f64>() / n)
}

pub fn smooth(map: &AnomalyMap) -> AnomalyMap {
    AnomalyMap(mean_filter(&min_filter(map.image(), 3), 7))
}

/// Everything computed for one image by the restoration pipeline.
#[derive(Clone, Debug)]
pub struct ImageScore {
    pub sample_score: f64,
    pub latents: LatentGrid,
    pub nll: NllMap,
    pub mask: Mask,
    pub restorations: Vec<Image>,
    pub map: AnomalyMap,
}

/// Encode, compute NLL once on the original grid, and draw restorations,
/// one independent stream per draw derived from `seed`.
pub fn restore_images<T: Scalar>(
    image: &Image,
    codec: &Codec<T>,
    prior: &Prior<T>,
    ctx: ConditioningContext,
    cfg: &ScoringConfig,
    draws: usize,
    seed: u64,
) -> Result<(LatentGrid, NllMap, Mask, Vec<Image>)> {
    let latents = codec.latents(&[image])?.remove(0);
    let nll = prior.nll_map(&latents, ctx)?;
    let mask = restoration_mask(&nll, cfg.lambda_p);
    let mut rngs: Vec<_> = (0..draws as u64)
        .map(|d| rng::stream(seed, "restoration", &[d]))
        .collect();
    let grids = prior.resample(&latents, &mask, ctx, &mut rngs, prior.config().temperature)?;
    let refs: Vec<&LatentGrid> = grids.iter().collect();
    let images = codec.decode_latents(&refs)?;
    Ok((latents, nll, mask, images))
}

pub fn restore_image<T: Scalar>(
    image: &Image,
    codec: &Codec<T>,
    prior: &Prior<T>,
    ctx: ConditioningContext,
    cfg: &ScoringConfig,
    seed: u64,
) -> Result<Image> {
    Ok(restore_images(image, codec, prior, ctx, cfg, 1, seed)?.3.remove(0))
}

/// Full pipeline: sample score plus the smoothed, consolidated pixel map.
pub fn score_image<T: Scalar>(
    image: &Image,
    codec: &Codec<T>,
    prior: &Prior<T>,
    ctx: ConditioningContext,
    cfg: &ScoringConfig,
    seed: u64,
) -> Result<ImageScore> {
    cfg.validate()?;
    let (latents, nll, mask, restorations) = restore_images(image, codec, prior, ctx, cfg, cfg.restorations, seed)?;
    let map = smooth(&consolidate(image, &restorations, cfg)?);
    Ok(ImageScore {
        sample_score: sample_score(&nll, cfg.lambda_s),
        latents,
        nll,
        mask,
        restorations,
        map,
    })
}

pub fn pixel_score<T: Scalar>(
    image: &Image,
    codec: &Codec<T>,
    prior: &Prior<T>,
    ctx: ConditioningContext,
    cfg: &ScoringConfig,
    seed: u64,
) -> Result<AnomalyMap> {
    Ok(score_image(image, codec, prior, ctx, cfg, seed)?.map)
}

/// Baseline: noise-free VAE loss and the smoothed reconstruction residual.
pub fn vae_scores<T: Scalar>(image: &Image, vae: &Vae<T>) -> Result<(f64, AnomalyMap)> {
    let (loss, recon) = vae.evaluate_mean(image)?;
    let map = AnomalyMap::new(image.abs_diff(&recon)?)?;
    Ok((loss.total, smooth(&map)))
}
