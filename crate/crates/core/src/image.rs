//! Two-dimensional intensity grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major real-valued image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        Ok(Image { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.width + c] = v;
    }

    /// Value with coordinates clamped to the border.
    pub fn get_clamped(&self, r: isize, c: isize) -> f64 {
        let r = r.clamp(0, self.height as isize - 1) as usize;
        let c = c.clamp(0, self.width as isize - 1) as usize;
        self.get(r, c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn abs_diff(&self, other: &Image) -> Result<Image> {
        self.check_same_shape(other)?;
        Ok(Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).collect(),
        })
    }

    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        Ok(self.abs_diff(other)?.mean())
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// Row-major boolean mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width} mask",
                data.len()
            )));
        }
        Ok(Mask { height, width, data })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch("mask union".into()));
        }
        Ok(Mask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        })
    }
}
