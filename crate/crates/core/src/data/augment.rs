//! Randomized image augmentations, each behind an independent gate.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::rng::RandomSource;

/// Per-transform application probabilities and magnitudes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotate_scale: f64,
    pub blur: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub noise: f64,
    pub elastic: f64,
    pub max_rotation_deg: f64,
    pub scale_range: (f64, f64),
    pub max_blur_sigma: f64,
    pub max_brightness: f64,
    pub contrast_range: (f64, f64),
    pub noise_sigma: f64,
    pub max_displacement: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotate_scale: 0.0,
            blur: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            noise: 0.0,
            elastic: 0.0,
            max_rotation_deg: 15.0,
            scale_range: (0.9, 1.1),
            max_blur_sigma: 1.5,
            max_brightness: 0.1,
            contrast_range: (0.9, 1.1),
            noise_sigma: 0.05,
            max_displacement: 3.0,
        }
    }
}

impl AugmentConfig {
    pub fn with_probability(p: f64) -> Self {
        AugmentConfig {
            rotate_scale: p,
            blur: p,
            brightness: p,
            contrast: p,
            noise: p,
            elastic: p,
            ..Default::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        [
            self.rotate_scale,
            self.blur,
            self.brightness,
            self.contrast,
            self.noise,
            self.elastic,
        ]
        .iter()
        .all(|&p| p <= 0.0)
    }
}

fn bilinear(img: &Image, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let (y0, x0) = (y0 as isize, x0 as isize);
    let g = |r: isize, c: isize| img.get_clamped(r, c);
    (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x0 + 1))
        + fy * ((1.0 - fx) * g(y0 + 1, x0) + fx * g(y0 + 1, x0 + 1))
}

fn rotate_scale(img: &Image, angle: f64, scale: f64) -> Image {
    let (cy, cx) = ((img.height() as f64 - 1.0) / 2.0, (img.width() as f64 - 1.0) / 2.0);
    let (s, c) = angle.sin_cos();
    Image::from_fn(img.height(), img.width(), |r, col| {
        let (dy, dx) = ((r as f64 - cy) / scale, (col as f64 - cx) / scale);
        bilinear(img, cy + c * dy - s * dx, cx + s * dy + c * dx)
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    if sigma < 1e-6 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let rows = Image::from_fn(img.height(), img.width(), |r, c| {
        k.iter()
            .enumerate()
            .map(|(i, w)| w * img.get_clamped(r as isize, c as isize + i as isize - radius))
            .sum()
    });
    Image::from_fn(img.height(), img.width(), |r, c| {
        k.iter()
            .enumerate()
            .map(|(i, w)| w * rows.get_clamped(r as isize + i as isize - radius, c as isize))
            .sum()
    })
}

fn elastic(img: &Image, rng: &mut RandomSource, max_disp: f64) -> Image {
    let (h, w) = img.shape();
    let mut field = || {
        let raw = Image::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0));
        gaussian_blur(&raw, 4.0)
    };
    let (dy, dx) = (field(), field());
    let peak = dy.data().iter().chain(dx.data()).fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return img.clone();
    }
    let k = max_disp / peak;
    Image::from_fn(h, w, |r, c| {
        bilinear(img, r as f64 + k * dy.get(r, c), c as f64 + k * dx.get(r, c))
    })
}

/// Apply a random, independently gated subset of transforms. Geometry first,
/// then intensity changes.
pub fn augment(image: &Image, rng: &mut RandomSource, cfg: &AugmentConfig) -> Image {
    let mut out = image.clone();
    let gate = |p: f64, rng: &mut RandomSource| p > 0.0 && rng.gen::<f64>() < p;
    if gate(cfg.rotate_scale, rng) {
        let angle = rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg).to_radians();
        let scale = rng.gen_range(cfg.scale_range.0..=cfg.scale_range.1);
        out = rotate_scale(&out, angle, scale);
    }
    if gate(cfg.elastic, rng) {
        out = elastic(&out, rng, cfg.max_displacement);
    }
    if gate(cfg.blur, rng) {
        let sigma = rng.gen_range(0.0..=cfg.max_blur_sigma);
        out = gaussian_blur(&out, sigma);
    }
    if gate(cfg.brightness, rng) {
        let b = rng.gen_range(-cfg.max_brightness..=cfg.max_brightness);
        out.data_mut().iter_mut().for_each(|v| *v += b);
    }
    if gate(cfg.contrast, rng) {
        let f = rng.gen_range(cfg.contrast_range.0..=cfg.contrast_range.1);
        let m = out.mean();
        out.data_mut().iter_mut().for_each(|v| *v = (*v - m) * f + m);
    }
    if gate(cfg.noise, rng) && cfg.noise_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.noise_sigma).expect("positive sigma");
        out.data_mut().iter_mut().for_each(|v| *v += n.sample(rng));
    }
    out
}
