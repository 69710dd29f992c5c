//! Synthetic pseudo-volumes, anomaly injection and subject-wise normalization.

pub mod augment;
pub mod corpus;

use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::rng::{self, RandomSource};

pub use augment::{augment, AugmentConfig};
pub use corpus::{Corpus, DataConfig, LabeledVolume, Manifest, SliceRecord, Split, MANIFEST_FILE};

/// Stack of slices from one synthetic subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoVolume {
    pub subject_id: u64,
    pub slices: Vec<Image>,
    pub positions: Vec<f64>,
    /// Range intensities are clamped to after injection.
    pub value_range: (f64, f64),
}

impl PseudoVolume {
    pub fn side(&self) -> usize {
        self.slices.first().map_or(0, |s| s.height())
    }

    pub fn mean_std(&self) -> (f64, f64) {
        let n: usize = self.slices.iter().map(|s| s.len()).sum();
        let mean = self.slices.iter().flat_map(|s| s.data()).sum::<f64>() / n as f64;
        let var = self
            .slices
            .iter()
            .flat_map(|s| s.data())
            .map(|v| (v - mean) * (v - mean))
            .sum::<f64>()
            / n as f64;
        (mean, var.sqrt())
    }
}

/// Evenly spaced positions spanning `[-0.5, 0.5]`.
pub fn slice_positions(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| i as f64 / (n - 1) as f64 - 0.5).collect()
}

struct Ellipse {
    cx: f64,
    cy: f64,
    drift_x: f64,
    drift_y: f64,
    radius: f64,
    aspect: f64,
    angle: f64,
    intensity: f64,
    intensity_slope: f64,
    /// Slice position of maximal extent and half-width of the extent profile.
    peak: f64,
    extent: f64,
}

impl Ellipse {
    /// Soft membership in `[0, 1]` and intensity at slice position `t`.
    fn at(&self, t: f64, u: f64, v: f64) -> (f64, f64) {
        let profile = 1.0 - ((t - self.peak) / self.extent).powi(2);
        if profile <= 0.0 {
            return (0.0, 0.0);
        }
        let r = self.radius * profile.sqrt();
        let (dx, dy) = (u - self.cx - self.drift_x * t, v - self.cy - self.drift_y * t);
        let (s, c) = self.angle.sin_cos();
        let (a, b) = (c * dx + s * dy, -s * dx + c * dy);
        let d = ((a / (r * self.aspect)).powi(2) + (b * self.aspect / r).powi(2)).sqrt();
        let soft = 1.0 / (1.0 + ((d - 1.0) / 0.06).exp());
        (soft, self.intensity + self.intensity_slope * t)
    }
}

/// Texture component: frequencies along rows, columns and slices, and a phase.
type Wave = (f64, f64, f64, f64);

fn subject_structures(rng: &mut RandomSource) -> (Ellipse, Vec<Ellipse>, Vec<Wave>) {
    let body = Ellipse {
        cx: 0.5 + rng.gen_range(-0.03..0.03),
        cy: 0.5 + rng.gen_range(-0.03..0.03),
        drift_x: 0.0,
        drift_y: rng.gen_range(-0.04..0.04),
        radius: rng.gen_range(0.36..0.43),
        aspect: rng.gen_range(0.9..1.15),
        angle: rng.gen_range(-0.3..0.3),
        intensity: rng.gen_range(0.25..0.35),
        intensity_slope: rng.gen_range(-0.08..0.08),
        peak: 0.0,
        extent: rng.gen_range(1.0..1.4),
    };
    let organs = (0..rng.gen_range(1..=3))
        .map(|_| Ellipse {
            cx: 0.5 + rng.gen_range(-0.16..0.16),
            cy: 0.5 + rng.gen_range(-0.16..0.16),
            drift_x: rng.gen_range(-0.15..0.15),
            drift_y: rng.gen_range(-0.15..0.15),
            radius: rng.gen_range(0.08..0.16),
            aspect: rng.gen_range(0.75..1.3),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
            intensity: rng.gen_range(0.55..0.95),
            intensity_slope: rng.gen_range(-0.2..0.2),
            peak: rng.gen_range(-0.3..0.3),
            extent: rng.gen_range(0.45..0.9),
        })
        .collect();
    let waves = (0..3)
        .map(|_| {
            (
                rng.gen_range(2.0..6.0),
                rng.gen_range(2.0..6.0),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(1.0..3.0),
            )
        })
        .collect();
    (body, organs, waves)
}

/// Render one subject. Content varies smoothly with slice position; values in `[0, 1]`.
pub fn generate_volume(seed: u64, subject_id: u64, n_slices: usize, side: usize) -> Result<PseudoVolume> {
    if n_slices < 2 || side < 4 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 slices and side >= 4 (got {n_slices} slices, side {side})"
        )));
    }
    let mut rng = rng::stream(seed, "subject", &[subject_id]);
    let (body, organs, waves) = subject_structures(&mut rng);
    let positions = slice_positions(n_slices);
    let slices = positions
        .iter()
        .map(|&t| {
            Image::from_fn(side, side, |r, c| {
                let (u, v) = ((c as f64 + 0.5) / side as f64, (r as f64 + 0.5) / side as f64);
                let (inside, base) = body.at(t, u, v);
                let mut value = inside * base;
                for o in &organs {
                    let (alpha, level) = o.at(t, u, v);
                    value = value * (1.0 - alpha) + level * alpha * inside;
                }
                let texture: f64 = waves
                    .iter()
                    .map(|&(fu, fv, phase, ft)| ((fu * u + fv * v + ft * t) * TAU + phase).sin())
                    .sum::<f64>()
                    * 0.012;
                (value + texture * inside).clamp(0.0, 1.0)
            })
        })
        .collect();
    Ok(PseudoVolume {
        subject_id,
        slices,
        positions,
        value_range: (0.0, 1.0),
    })
}

pub fn generate_normal(seed: u64, subject_ids: &[u64], n_slices: usize, side: usize) -> Result<Vec<PseudoVolume>> {
    subject_ids
        .iter()
        .map(|&id| generate_volume(seed, id, n_slices, side))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyShape {
    Disk,
    Square,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub shape: AnomalyShape,
    pub center_row: usize,
    pub center_col: usize,
    /// Disk radius, or half side of the square (side `2 * radius + 1`).
    pub radius: usize,
    pub intensity_delta: f64,
}

impl AnomalySpec {
    /// Pixels covered by the shape.
    pub fn region(&self, height: usize, width: usize) -> Result<Mask> {
        let (cr, cc, rad) = (self.center_row, self.center_col, self.radius);
        if cr < rad || cc < rad || cr + rad >= height || cc + rad >= width {
            return Err(Error::OutOfBounds(format!(
                "anomaly at ({cr}, {cc}) radius {rad} leaves a {height}x{width} image"
            )));
        }
        if !self.intensity_delta.is_finite() {
            return Err(Error::InvalidArgument("anomaly delta must be finite".into()));
        }
        let mut m = Mask::empty(height, width);
        for r in cr - rad..=cr + rad {
            for c in cc - rad..=cc + rad {
                let inside = match self.shape {
                    AnomalyShape::Square => true,
                    AnomalyShape::Disk => {
                        let (dr, dc) = (r as i64 - cr as i64, c as i64 - cc as i64);
                        dr * dr + dc * dc <= (rad * rad) as i64
                    }
                };
                m.set(r, c, inside);
            }
        }
        Ok(m)
    }
}

/// Shift intensities inside the shape by the spec's delta, clamped to `range`.
///
/// The returned mask is the set of pixels whose value changed; with a zero
/// delta it is the full shape.
pub fn inject_anomaly(image: &Image, spec: &AnomalySpec, range: (f64, f64)) -> Result<(Image, Mask)> {
    let region = spec.region(image.height(), image.width())?;
    if spec.intensity_delta == 0.0 {
        return Ok((image.clone(), region));
    }
    let mut out = image.clone();
    let mut changed = Mask::empty(image.height(), image.width());
    for (i, inside) in region.data().iter().enumerate() {
        if *inside {
            let before = image.data()[i];
            let after = (before + spec.intensity_delta).clamp(range.0, range.1);
            out.data_mut()[i] = after;
            if after != before {
                changed.set(i / image.width(), i % image.width(), true);
            }
        }
    }
    Ok((out, changed))
}

/// Inject into a contiguous range of slices; masks for untouched slices are empty.
pub fn inject_volume(
    volume: &PseudoVolume,
    spec: &AnomalySpec,
    slices: std::ops::Range<usize>,
) -> Result<(PseudoVolume, Vec<Mask>)> {
    if slices.end > volume.slices.len() {
        return Err(Error::OutOfBounds(format!(
            "slice range {slices:?} for a {}-slice volume",
            volume.slices.len()
        )));
    }
    let side = volume.side();
    let mut out = volume.clone();
    let mut masks = vec![Mask::empty(side, side); volume.slices.len()];
    for i in slices {
        let (img, m) = inject_anomaly(&volume.slices[i], spec, volume.value_range)?;
        out.slices[i] = img;
        masks[i] = m;
    }
    Ok((out, masks))
}

/// Shift and scale every slice by the whole-volume mean and standard deviation.
pub fn normalize(volume: &PseudoVolume) -> Result<PseudoVolume> {
    let (mean, std) = volume.mean_std();
    if !(std > 1e-12) {
        return Err(Error::ZeroVariance(format!("subject {}", volume.subject_id)));
    }
    let f = |v: f64| (v - mean) / std;
    Ok(PseudoVolume {
        subject_id: volume.subject_id,
        slices: volume
            .slices
            .iter()
            .map(|s| Image::new(s.height(), s.width(), s.data().iter().map(|&v| f(v)).collect()).expect("shape"))
            .collect(),
        positions: volume.positions.clone(),
        value_range: (f(volume.value_range.0), f(volume.value_range.1)),
    })
}
