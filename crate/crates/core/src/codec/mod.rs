//! Vector-quantized autoencoder: encoder, nearest-code quantizer, decoder and
//! the three-term training loss with straight-through gradient routing.
//! The VAE baseline lives in [`vae`].

mod backbone;
pub mod vae;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{uniform, ParamStore};
use crate::rng::{self, RandomSource};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecConfig {
    pub image_side: usize,
    /// Down/upsampling blocks; the latent grid side is `image_side / 2^blocks`.
    pub blocks: usize,
    /// Residual sub-blocks per block.
    pub res_blocks: usize,
    pub channels: usize,
    /// Hidden width inside each residual sub-block.
    pub res_channels: usize,
    pub codebook_size: usize,
    pub embedding_dim: usize,
    pub dropout: f64,
    /// Commitment weight.
    pub beta: f64,
    /// Gaussian latent size of the VAE baseline.
    pub vae_latent_dim: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            image_side: 32,
            blocks: 2,
            res_blocks: 2,
            channels: 32,
            res_channels: 32,
            codebook_size: 32,
            embedding_dim: 64,
            dropout: 0.1,
            beta: 1.0,
            vae_latent_dim: 128,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.blocks == 0 || self.blocks > 8 {
            return bad(format!("codec.blocks must be in 1..=8, got {}", self.blocks));
        }
        let factor = 1usize << self.blocks;
        if self.image_side == 0 || self.image_side % factor != 0 {
            return bad(format!(
                "image side {} is not divisible by 2^blocks = {factor}; choose a side that is a multiple of {factor}",
                self.image_side
            ));
        }
        if self.codebook_size < 2 {
            return bad("codec.codebook_size must be at least 2".into());
        }
        if self.embedding_dim == 0 || self.channels == 0 || self.res_channels == 0 {
            return bad("codec widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("codec.dropout must lie in [0, 1)".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("codec.beta must be finite and non-negative".into());
        }
        if self.vae_latent_dim == 0 {
            return bad("codec.vae_latent_dim must be positive".into());
        }
        Ok(())
    }

    pub fn downsampling(&self) -> usize {
        1 << self.blocks
    }

    pub fn latent_side(&self) -> usize {
        self.image_side / self.downsampling()
    }
}

/// `K x D` embedding dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    embeddings: Vec<f64>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, embeddings: Vec<f64>) -> Result<Self> {
        if size < 2 || dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "codebook needs K >= 2 and D >= 1, got {size}x{dim}"
            )));
        }
        if embeddings.len() != size * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {size}x{dim} codebook",
                embeddings.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("codebook entries".into()));
        }
        Ok(Codebook { size, dim, embeddings })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.embeddings[j * self.dim..][..self.dim]
    }

    pub fn embeddings(&self) -> &[f64] {
        &self.embeddings
    }
}

/// `H x W x D` encoder output (or selected embeddings), stored position-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    depth: usize,
    values: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, depth: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width * depth {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width}x{depth} feature grid",
                values.len()
            )));
        }
        Ok(FeatureGrid {
            height,
            width,
            depth,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, r: usize, c: usize) -> &[f64] {
        &self.values[(r * self.width + c) * self.depth..][..self.depth]
    }
}

/// `H x W` grid of codebook indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LatentGrid {
    height: usize,
    width: usize,
    indices: Vec<usize>,
}

impl LatentGrid {
    pub fn new(height: usize, width: usize, indices: Vec<usize>) -> Result<Self> {
        if indices.len() != height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} indices for a {height}x{width} latent grid",
                indices.len()
            )));
        }
        Ok(LatentGrid { height, width, indices })
    }

    pub fn filled(height: usize, width: usize, index: usize) -> Self {
        LatentGrid {
            height,
            width,
            indices: vec![index; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Indices in raster (row-major) order.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn indices_mut(&mut self) -> &mut [usize] {
        &mut self.indices
    }

    pub fn get(&self, r: usize, c: usize) -> usize {
        self.indices[r * self.width + c]
    }

    pub fn check_range(&self, k: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= k) {
            Some(i) => Err(Error::IndexOutOfRange(format!("latent index {i} not in [0, {k})"))),
            None => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationResult {
    pub indices: LatentGrid,
    pub quantized: FeatureGrid,
    /// Squared L2 distance to the chosen code, row-major.
    pub distances: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub codebook_term: f64,
    pub commitment_term: f64,
    pub total: f64,
}

/// Nearest code per column of a `[D, P]` matrix; ties go to the lowest index.
pub(crate) fn nearest_codes<T: Scalar>(features: &[T], table: &[T], k: usize, d: usize) -> (Vec<usize>, Vec<T>) {
    let p = features.len() / d;
    let mut column = vec![T::zero(); d];
    let mut idx = Vec::with_capacity(p);
    let mut dist = Vec::with_capacity(p);
    for pi in 0..p {
        for (di, c) in column.iter_mut().enumerate() {
            *c = features[di * p + pi];
        }
        let mut best = 0;
        let mut best_d = T::infinity();
        for j in 0..k {
            let row = &table[j * d..][..d];
            let mut acc = T::zero();
            for (f, e) in column.iter().zip(row) {
                let diff = *f - *e;
                acc += diff * diff;
            }
            if acc < best_d {
                best_d = acc;
                best = j;
            }
        }
        idx.push(best);
        dist.push(best_d);
    }
    (idx, dist)
}

/// Map every feature vector to its nearest codebook row.
pub fn quantize(features: &FeatureGrid, codebook: &Codebook) -> Result<QuantizationResult> {
    if features.depth != codebook.dim {
        return Err(Error::DimensionMismatch(format!(
            "feature depth {} vs codebook dimension {}",
            features.depth, codebook.dim
        )));
    }
    let (h, w, d) = (features.height, features.width, features.depth);
    let p = h * w;
    // transpose to [D, P] for the shared search routine
    let mut cols = vec![0.0; d * p];
    for pi in 0..p {
        for di in 0..d {
            cols[di * p + pi] = features.values[pi * d + di];
        }
    }
    let (idx, dist) = nearest_codes(&cols, &codebook.embeddings, codebook.size, d);
    let mut quantized = Vec::with_capacity(p * d);
    for &i in &idx {
        quantized.extend_from_slice(codebook.row(i));
    }
    Ok(QuantizationResult {
        indices: LatentGrid::new(h, w, idx)?,
        quantized: FeatureGrid::new(h, w, d, quantized)?,
        distances: dist,
    })
}

pub(crate) fn images_to_tensor<T: Scalar>(images: &[&Image], side: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * side * side);
    for img in images {
        if img.shape() != (side, side) {
            return Err(Error::DimensionMismatch(format!(
                "image {:?} does not match configured side {side}",
                img.shape()
            )));
        }
        if !img.is_finite() {
            return Err(Error::NonFinite("input image".into()));
        }
        data.extend(img.data().iter().map(|&v| T::from_f64_lossy(v)));
    }
    Ok(Tensor::from_vec(&[1, images.len(), side, side], data))
}

pub(crate) fn tensor_to_images<T: Scalar>(t: &Tensor<T>) -> Vec<Image> {
    let s = t.shape();
    let (n, h, w) = (s[1], s[2], s[3]);
    t.data()
        .chunks(h * w)
        .take(n)
        .map(|c| Image::new(h, w, c.iter().map(|v| v.to_f64_lossy()).collect()).expect("shape"))
        .collect()
}

/// `[D, N, h, w]` → one position-major grid per image.
pub(crate) fn tensor_to_features<T: Scalar>(t: &Tensor<T>) -> Vec<FeatureGrid> {
    let s = t.shape();
    let (d, n, h, w) = (s[0], s[1], s[2], s[3]);
    let l = h * w;
    (0..n)
        .map(|ni| {
            let mut values = vec![0.0; l * d];
            for di in 0..d {
                for q in 0..l {
                    values[q * d + di] = t.data()[(di * n + ni) * l + q].to_f64_lossy();
                }
            }
            FeatureGrid::new(h, w, d, values).expect("shape")
        })
        .collect()
}

pub(crate) fn features_to_tensor<T: Scalar>(grids: &[&FeatureGrid]) -> Result<Tensor<T>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty feature batch".into()))?;
    let (h, w, d) = (first.height, first.width, first.depth);
    let n = grids.len();
    let l = h * w;
    let mut data = vec![T::zero(); d * n * l];
    for (ni, g) in grids.iter().enumerate() {
        if (g.height, g.width, g.depth) != (h, w, d) {
            return Err(Error::DimensionMismatch("feature grids differ in shape".into()));
        }
        if g.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent features".into()));
        }
        for di in 0..d {
            for q in 0..l {
                data[(di * n + ni) * l + q] = T::from_f64_lossy(g.values[q * d + di]);
            }
        }
    }
    Ok(Tensor::from_vec(&[d, n, h, w], data))
}

/// Forward pieces of the VQ-VAE loss kept on the tape.
pub(crate) struct LossGraph {
    #[cfg_attr(not(test), allow(dead_code))]
    pub encoded: Var,
    #[cfg_attr(not(test), allow(dead_code))]
    pub straight_through: Var,
    pub reconstruction: Var,
    pub codebook_term: Var,
    pub commitment_term: Var,
    pub total: Var,
    pub indices: Vec<usize>,
}

/// VQ-VAE: encoder, codebook and decoder parameters in one store.
#[derive(Clone, Debug)]
pub struct Codec<T> {
    config: CodecConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Codec<T> {
    /// Random initialisation; the codebook is uniform on `[-1/K, 1/K]`.
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "codec-init", &[]);
        let mut params = ParamStore::new();
        backbone::init_params(&config, &mut rng, &mut params);
        let k = config.codebook_size;
        params.insert(
            "codebook",
            uniform(&mut rng, &[k, config.embedding_dim], 1.0 / k as f64),
        );
        Ok(Codec { config, params })
    }

    /// All weights, biases and codebook entries zero.
    pub fn zeroed(config: CodecConfig) -> Result<Self> {
        let mut c = Self::new(config, 0)?;
        backbone::zero_params(&mut c.params);
        Ok(c)
    }

    pub fn from_params(config: CodecConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let reference = Self::new(config.clone(), 0)?;
        check_layout(&reference.params, &params)?;
        Ok(Codec { config, params })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Codec<U> {
        Codec {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    pub fn codebook(&self) -> Codebook {
        let t = self.params.get("codebook").expect("codebook parameter");
        Codebook::new(self.config.codebook_size, self.config.embedding_dim, t.to_f64_vec()).expect("valid codebook")
    }

    fn table(&self) -> &Tensor<T> {
        self.params.get("codebook").expect("codebook parameter")
    }

    pub fn encode(&self, image: &Image) -> Result<FeatureGrid> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<FeatureGrid>> {
        let mut tape = Tape::new();
        let z = self.encode_on(&mut tape, images)?;
        Ok(tensor_to_features(tape.value(z)))
    }

    fn encode_on(&self, tape: &mut Tape<T>, images: &[&Image]) -> Result<Var> {
        let x = images_to_tensor::<T>(images, self.config.image_side)?;
        let p = self.params.bind(tape, false);
        let xv = tape.constant(x);
        Ok(backbone::encoder(&self.config, tape, &p, xv, None))
    }

    /// Encode and quantize a batch in one pass.
    pub fn latents(&self, images: &[&Image]) -> Result<Vec<LatentGrid>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let z = self.encode_on(&mut tape, images)?;
        let t = tape.value(z);
        let (k, d) = (self.config.codebook_size, self.config.embedding_dim);
        let (idx, _) = nearest_codes(t.data(), self.table().data(), k, d);
        let side = self.config.latent_side();
        Ok(idx
            .chunks(side * side)
            .map(|c| LatentGrid::new(side, side, c.to_vec()).expect("shape"))
            .collect())
    }

    pub fn quantize(&self, features: &FeatureGrid) -> Result<QuantizationResult> {
        quantize(features, &self.codebook())
    }

    pub fn decode(&self, quantized: &FeatureGrid) -> Result<Image> {
        Ok(self.decode_batch(&[quantized])?.remove(0))
    }

    pub fn decode_batch(&self, grids: &[&FeatureGrid]) -> Result<Vec<Image>> {
        let side = self.config.latent_side();
        for g in grids {
            if (g.height, g.width, g.depth) != (side, side, self.config.embedding_dim) {
                return Err(Error::DimensionMismatch(format!(
                    "decoder expects {side}x{side}x{}, got {}x{}x{}",
                    self.config.embedding_dim, g.height, g.width, g.depth
                )));
            }
        }
        let z = features_to_tensor::<T>(grids)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let zv = tape.constant(z);
        let y = backbone::decoder(&self.config, &mut tape, &p, zv, None);
        Ok(tensor_to_images(tape.value(y)))
    }

    /// Look up codebook rows for each grid and decode.
    pub fn decode_latents(&self, grids: &[&LatentGrid]) -> Result<Vec<Image>> {
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let side = self.config.latent_side();
        let mut indices = Vec::with_capacity(grids.len() * side * side);
        for g in grids {
            if (g.height, g.width) != (side, side) {
                return Err(Error::DimensionMismatch(format!(
                    "latent grid {}x{} vs expected {side}x{side}",
                    g.height, g.width
                )));
            }
            g.check_range(self.config.codebook_size)?;
            indices.extend_from_slice(&g.indices);
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let zq = tape.gather(p.var("codebook"), &indices, &[grids.len(), side, side]);
        let y = backbone::decoder(&self.config, &mut tape, &p, zq, None);
        Ok(tensor_to_images(tape.value(y)))
    }

    /// `decode(quantize(encode(x)))` together with the latent grid.
    pub fn reconstruct(&self, image: &Image) -> Result<(LatentGrid, Image)> {
        let grid = self.latents(&[image])?.remove(0);
        let rec = self.decode_latents(&[&grid])?.remove(0);
        Ok((grid, rec))
    }

    pub(crate) fn loss_graph(
        &self,
        tape: &mut Tape<T>,
        p: &crate::params::Bound<'_>,
        images: &[&Image],
        frozen: Option<&[LatentGrid]>,
        mut dropout: Option<&mut RandomSource>,
    ) -> Result<LossGraph> {
        let x = images_to_tensor::<T>(images, self.config.image_side)?;
        let xv = tape.constant(x);
        let ze = backbone::encoder(&self.config, tape, p, xv, dropout.as_deref_mut());
        let (k, d) = (self.config.codebook_size, self.config.embedding_dim);
        let side = self.config.latent_side();
        let indices = match frozen {
            Some(grids) => {
                if grids.len() != images.len() {
                    return Err(Error::DimensionMismatch("one frozen grid per image".into()));
                }
                let mut idx = Vec::with_capacity(grids.len() * side * side);
                for g in grids {
                    g.check_range(k)?;
                    idx.extend_from_slice(&g.indices);
                }
                idx
            }
            None => nearest_codes(tape.value(ze).data(), tape.value(p.var("codebook")).data(), k, d).0,
        };
        let e = tape.gather(p.var("codebook"), &indices, &[images.len(), side, side]);
        let st = tape.straight_through(ze, e);
        let y = backbone::decoder(&self.config, tape, p, st, dropout);
        let reconstruction = tape.l1_mean(y, xv);
        let ze_stopped = tape.detach(ze);
        let codebook_term = tape.sq_dist_mean(ze_stopped, e);
        let e_stopped = tape.detach(e);
        let commitment_term = tape.sq_dist_mean(e_stopped, ze);
        let weighted = tape.scale(commitment_term, T::from_f64_lossy(self.config.beta));
        let partial = tape.add(reconstruction, codebook_term);
        let total = tape.add(partial, weighted);
        Ok(LossGraph {
            encoded: ze,
            straight_through: st,
            reconstruction,
            codebook_term,
            commitment_term,
            total,
            indices,
        })
    }

    fn breakdown(tape: &Tape<T>, g: &LossGraph) -> Result<LossBreakdown> {
        let v = |x: Var| tape.value(x).item().to_f64_lossy();
        let out = LossBreakdown {
            reconstruction: v(g.reconstruction),
            codebook_term: v(g.codebook_term),
            commitment_term: v(g.commitment_term),
            total: v(g.total),
        };
        if !out.total.is_finite() {
            return Err(Error::NonFinite(format!("VQ-VAE loss {out:?}")));
        }
        Ok(out)
    }

    /// The training objective with every stop-gradient operand (encoder output
    /// and chosen embeddings) held at the values `anchor` produces, and codes
    /// pinned to `frozen`. Equals `loss` when `anchor` is `self`; its true
    /// gradient at that point is what `loss_and_grads` returns, so finite
    /// differences of this function check the straight-through gradient.
    pub fn surrogate_loss(&self, image: &Image, frozen: &LatentGrid, anchor: &Codec<T>) -> Result<f64> {
        frozen.check_range(self.config.codebook_size)?;
        let side = self.config.latent_side();
        let x = images_to_tensor::<T>(&[image], self.config.image_side)?;

        let mut tape = Tape::new();
        let a = anchor.params.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let ze0 = backbone::encoder(&anchor.config, &mut tape, &a, xv, None);
        let e0 = tape.gather(a.var("codebook"), &frozen.indices, &[1, side, side]);
        let ze0 = tape.value(ze0).clone();
        let e0 = tape.value(e0).clone();

        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let xv = tape.constant(x);
        let ze = backbone::encoder(&self.config, &mut tape, &p, xv, None);
        let e = tape.gather(p.var("codebook"), &frozen.indices, &[1, side, side]);
        let mut offset = e0.clone();
        for (o, z) in offset.data_mut().iter_mut().zip(ze0.data()) {
            *o -= *z;
        }
        let offset = tape.constant(offset);
        let st = tape.add(ze, offset);
        let y = backbone::decoder(&self.config, &mut tape, &p, st, None);
        let rec = tape.l1_mean(y, xv);
        let ze0 = tape.constant(ze0);
        let e0 = tape.constant(e0);
        let cb = tape.sq_dist_mean(ze0, e);
        let cm = tape.sq_dist_mean(e0, ze);
        let cm = tape.scale(cm, T::from_f64_lossy(self.config.beta));
        let partial = tape.add(rec, cb);
        let total = tape.add(partial, cm);
        Ok(tape.value(total).item().to_f64_lossy())
    }

    /// Loss at inference (no dropout). `frozen` pins the code assignment.
    pub fn loss(&self, image: &Image, frozen: Option<&LatentGrid>) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let frozen_vec = frozen.map(|g| vec![g.clone()]);
        let g = self.loss_graph(&mut tape, &p, &[image], frozen_vec.as_deref(), None)?;
        Self::breakdown(&tape, &g)
    }

    /// Loss and gradients for every parameter in store order.
    pub fn loss_and_grads(
        &self,
        images: &[&Image],
        frozen: Option<&[LatentGrid]>,
        dropout: Option<&mut RandomSource>,
    ) -> Result<(LossBreakdown, Vec<Tensor<T>>, Vec<usize>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let g = self.loss_graph(&mut tape, &p, images, frozen, dropout)?;
        let breakdown = Self::breakdown(&tape, &g)?;
        let mut grads = tape.backward(g.total);
        let grads = p.gradients(&tape, &mut grads);
        Ok((breakdown, grads, g.indices))
    }
}

pub(crate) fn check_layout<T: Scalar>(reference: &ParamStore<T>, actual: &ParamStore<T>) -> Result<()> {
    for (name, t) in reference.iter() {
        match actual.get(name) {
            Some(a) if a.shape() == t.shape() => {}
            Some(a) => {
                return Err(Error::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Format(format!("missing parameter {name}"))),
        }
        if !actual.get(name).is_some_and(Tensor::all_finite) {
            return Err(Error::NonFinite(format!("parameter {name}")));
        }
    }
    if actual.len() != reference.len() {
        return Err(Error::Format("unexpected extra parameters".into()));
    }
    Ok(())
}
