//! Causal autoregressive prior over latent grids, conditioned on slice position.
//!
//! Tokens are embedded, shifted one step along the raster scan, and passed
//! through blocks of raster-causal masked convolutions and strictly causal
//! single-head self-attention. Logits at scan index `i` therefore depend only
//! on tokens at indices `< i` and on the conditioning value.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{column_nll, ConvGeom, Tape, Var, NLL_CAP};
use crate::codec::{check_layout, LatentGrid};
use crate::error::{Error, Result};
use crate::image::Mask;
use crate::params::{dropout_mask, init_weight, uniform, Bound, ParamStore};
use crate::rng::{self, RandomSource};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub blocks: usize,
    pub res_blocks: usize,
    pub channels: usize,
    pub dropout: f64,
    /// Sampling temperature used for restoration draws.
    pub temperature: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            blocks: 2,
            res_blocks: 2,
            channels: 64,
            dropout: 0.1,
            temperature: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.res_blocks == 0 || self.channels == 0 {
            return Err(Error::InvalidConfig("prior sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("prior.dropout must lie in [0, 1)".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig("prior.temperature must be >= 0".into()));
        }
        Ok(())
    }
}

/// Bijection between grid positions and sequence indices (row-major raster).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanOrder {
    pub height: usize,
    pub width: usize,
}

impl ScanOrder {
    pub fn index(&self, r: usize, c: usize) -> usize {
        r * self.width + c
    }

    pub fn position(&self, i: usize) -> (usize, usize) {
        (i / self.width, i % self.width)
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningContext {
    slice_position: f64,
}

impl ConditioningContext {
    pub fn new(slice_position: f64) -> Result<Self> {
        if !(-0.5..=0.5).contains(&slice_position) {
            return Err(Error::InvalidArgument(format!(
                "slice position {slice_position} outside [-0.5, 0.5]"
            )));
        }
        Ok(ConditioningContext { slice_position })
    }

    pub fn slice_position(&self) -> f64 {
        self.slice_position
    }
}

/// Per-position negative log-likelihood in nats, raster order.
#[derive(Clone, Debug, PartialEq)]
pub struct NllMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl NllMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::DimensionMismatch("NLL map size".into()));
        }
        Ok(NllMap { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.width + c]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// `H x W x K` logits, position-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitGrid {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub values: Vec<f64>,
}

impl LogitGrid {
    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.classes..][..self.classes]
    }
}

#[derive(Clone, Debug)]
pub struct Prior<T> {
    config: PriorConfig,
    classes: usize,
    height: usize,
    width: usize,
    params: ParamStore<T>,
}

/// Raster-causal 3x3 mask: full row above, current row up to and including the centre.
fn causal_mask<T: Scalar>(cout: usize, cin: usize) -> Tensor<T> {
    let mut m = Tensor::zeros(&[cout, cin, 3, 3]);
    for block in m.data_mut().chunks_mut(9) {
        for (tap, v) in block.iter_mut().enumerate() {
            if tap < 5 {
                *v = T::one();
            }
        }
    }
    m
}

impl<T: Scalar> Prior<T> {
    pub fn new(config: PriorConfig, classes: usize, height: usize, width: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes < 2 || height == 0 || width == 0 {
            return Err(Error::InvalidConfig("prior needs K >= 2 and a non-empty grid".into()));
        }
        let mut rng = rng::stream(seed, "prior-init", &[]);
        let c = config.channels;
        let mut params = ParamStore::new();
        params.insert("embed", uniform(&mut rng, &[classes, c], 1.0));
        let relu_gain = 2f64.sqrt();
        let mut conv = |params: &mut ParamStore<T>, name: &str, cout: usize, cin: usize, k: usize, gain: f64| {
            params.insert(
                format!("{name}.w"),
                init_weight(&mut rng, &[cout, cin, k, k], cin * k * k, gain),
            );
            params.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
        };
        for b in 0..config.blocks {
            for r in 0..config.res_blocks {
                // only 5 of the 9 taps are live after masking
                conv(&mut params, &format!("b{b}.r{r}.c3"), c, c, 3, relu_gain * 1.34);
                conv(&mut params, &format!("b{b}.r{r}.c1"), c, c, 1, 0.5);
            }
            for part in ["q", "k", "v"] {
                conv(&mut params, &format!("b{b}.attn.{part}"), c, c, 1, 1.0);
            }
            conv(&mut params, &format!("b{b}.attn.o"), c, c, 1, 0.5);
        }
        conv(&mut params, "head", classes, c, 1, relu_gain);
        for b in 0..config.blocks {
            params.insert(format!("b{b}.cond.scale"), uniform(&mut rng, &[c], 0.5));
            params.insert(format!("b{b}.cond.shift"), Tensor::zeros(&[c]));
        }
        Ok(Prior {
            config,
            classes,
            height,
            width,
            params,
        })
    }

    pub fn from_params(
        config: PriorConfig,
        classes: usize,
        height: usize,
        width: usize,
        params: ParamStore<T>,
    ) -> Result<Self> {
        let reference = Self::new(config.clone(), classes, height, width, 0)?;
        check_layout(&reference.params, &params)?;
        Ok(Prior {
            config,
            classes,
            height,
            width,
            params,
        })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn scan_order(&self) -> ScanOrder {
        ScanOrder {
            height: self.height,
            width: self.width,
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> Prior<U> {
        Prior {
            config: self.config.clone(),
            classes: self.classes,
            height: self.height,
            width: self.width,
            params: self.params.cast(),
        }
    }

    fn check_grid(&self, g: &LatentGrid) -> Result<()> {
        if (g.height(), g.width()) != (self.height, self.width) {
            return Err(Error::DimensionMismatch(format!(
                "latent grid {}x{} vs prior {}x{}",
                g.height(),
                g.width(),
                self.height,
                self.width
            )));
        }
        g.check_range(self.classes)
    }

    /// Logits `[K, N, H, W]` plus the attention nodes, for inspection.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape<T>,
        p: &Bound<'_>,
        grids: &[&LatentGrid],
        positions: &[f64],
        mut dropout: Option<&mut RandomSource>,
    ) -> Result<(Var, Vec<Var>)> {
        if grids.len() != positions.len() || grids.is_empty() {
            return Err(Error::DimensionMismatch("one slice position per grid".into()));
        }
        let mut tokens = Vec::with_capacity(grids.len() * self.height * self.width);
        for g in grids {
            self.check_grid(g)?;
            tokens.extend_from_slice(g.indices());
        }
        for &s in positions {
            ConditioningContext::new(s)?;
        }
        let c = self.config.channels;
        let pos: Vec<T> = positions.iter().map(|&s| T::from_f64_lossy(s)).collect();
        let emb = tape.gather(p.var("embed"), &tokens, &[grids.len(), self.height, self.width]);
        let mut h = tape.shift_raster(emb);
        let mask = tape.constant(causal_mask(c, c));
        let mut attention = Vec::with_capacity(self.config.blocks);
        let conv = |tape: &mut Tape<T>, name: &str, x: Var| {
            tape.conv2d(
                x,
                p.var(&format!("{name}.w")),
                Some(p.var(&format!("{name}.b"))),
                ConvGeom::pointwise(),
            )
        };
        for b in 0..self.config.blocks {
            h = tape.cond_affine(
                h,
                p.var(&format!("b{b}.cond.scale")),
                p.var(&format!("b{b}.cond.shift")),
                &pos,
            );
            for r in 0..self.config.res_blocks {
                let name = format!("b{b}.r{r}");
                let a = tape.relu(h);
                let w = tape.mul(p.var(&format!("{name}.c3.w")), mask);
                let y = tape.conv2d(a, w, Some(p.var(&format!("{name}.c3.b"))), ConvGeom::same(3));
                let mut y = tape.relu(y);
                if let Some(rng) = dropout.as_deref_mut() {
                    if self.config.dropout > 0.0 {
                        let m = dropout_mask(rng, tape.value(y).shape(), self.config.dropout);
                        let m = tape.constant(m);
                        y = tape.mul(y, m);
                    }
                }
                let y = conv(tape, &format!("{name}.c1"), y);
                h = tape.add(h, y);
            }
            let q = conv(tape, &format!("b{b}.attn.q"), h);
            let k = conv(tape, &format!("b{b}.attn.k"), h);
            let v = conv(tape, &format!("b{b}.attn.v"), h);
            let att = tape.causal_attention(q, k, v);
            attention.push(att);
            let o = conv(tape, &format!("b{b}.attn.o"), att);
            h = tape.add(h, o);
        }
        let a = tape.relu(h);
        let logits = conv(tape, "head", a);
        Ok((logits, attention))
    }

    fn logits_tensor(&self, grids: &[&LatentGrid], positions: &[f64]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let (logits, _) = self.forward(&mut tape, &p, grids, positions, None)?;
        Ok(tape.value(logits).clone())
    }

    pub fn logits(&self, grid: &LatentGrid, ctx: ConditioningContext) -> Result<LogitGrid> {
        let t = self.logits_tensor(&[grid], &[ctx.slice_position])?;
        let l = self.height * self.width;
        let k = self.classes;
        let mut values = vec![0.0; l * k];
        for ki in 0..k {
            for q in 0..l {
                values[q * k + ki] = t.data()[ki * l + q].to_f64_lossy();
            }
        }
        Ok(LogitGrid {
            height: self.height,
            width: self.width,
            classes: k,
            values,
        })
    }

    pub fn nll_maps(&self, grids: &[&LatentGrid], positions: &[f64]) -> Result<Vec<NllMap>> {
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let t = self.logits_tensor(grids, positions)?;
        let (n, l, k) = (grids.len(), self.height * self.width, self.classes);
        let p = n * l;
        Ok(grids
            .iter()
            .enumerate()
            .map(|(ni, g)| {
                let values = (0..l)
                    .map(|q| {
                        let nll = column_nll(t.data(), k, p, ni * l + q, g.indices()[q]).to_f64_lossy();
                        nll.clamp(0.0, NLL_CAP)
                    })
                    .collect();
                NllMap::new(self.height, self.width, values).expect("shape")
            })
            .collect())
    }

    pub fn nll_map(&self, grid: &LatentGrid, ctx: ConditioningContext) -> Result<NllMap> {
        Ok(self.nll_maps(&[grid], &[ctx.slice_position])?.remove(0))
    }

    /// Mean NLL per token.
    pub fn ar_loss(&self, grid: &LatentGrid, ctx: ConditioningContext) -> Result<f64> {
        let m = self.nll_map(grid, ctx)?;
        let loss = m.total() / m.values.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("prior loss".into()));
        }
        Ok(loss)
    }

    pub fn loss_and_grads(
        &self,
        grids: &[&LatentGrid],
        positions: &[f64],
        dropout: Option<&mut RandomSource>,
    ) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let (logits, _) = self.forward(&mut tape, &p, grids, positions, dropout)?;
        let targets: Vec<usize> = grids.iter().flat_map(|g| g.indices().iter().copied()).collect();
        let loss = tape.softmax_xent(logits, &targets);
        let value = tape.value(loss).item().to_f64_lossy();
        if !value.is_finite() {
            return Err(Error::NonFinite("prior loss".into()));
        }
        let mut grads = tape.backward(loss);
        Ok((value, p.gradients(&tape, &mut grads)))
    }

    /// Draw a full grid in scan order. `temperature == 0` decodes greedily.
    pub fn sample(&self, ctx: ConditioningContext, rng: &mut RandomSource, temperature: f64) -> Result<LatentGrid> {
        let start = LatentGrid::filled(self.height, self.width, 0);
        let mask = Mask::full(self.height, self.width);
        Ok(self
            .resample(&start, &mask, ctx, std::slice::from_mut(rng), temperature)?
            .remove(0))
    }

    /// Replace masked positions with draws from the prior, conditioned on the
    /// current prefix; unmasked positions are copied.
    pub fn restore_latents(
        &self,
        grid: &LatentGrid,
        mask: &Mask,
        ctx: ConditioningContext,
        rng: &mut RandomSource,
    ) -> Result<LatentGrid> {
        Ok(self
            .resample(grid, mask, ctx, std::slice::from_mut(rng), self.config.temperature)?
            .remove(0))
    }

    /// One restoration per rng, computed as a batch.
    pub fn resample(
        &self,
        grid: &LatentGrid,
        mask: &Mask,
        ctx: ConditioningContext,
        rngs: &mut [RandomSource],
        temperature: f64,
    ) -> Result<Vec<LatentGrid>> {
        self.check_grid(grid)?;
        if mask.shape() != (self.height, self.width) {
            return Err(Error::DimensionMismatch("restoration mask shape".into()));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {temperature}")));
        }
        let n = rngs.len();
        let mut current: Vec<LatentGrid> = vec![grid.clone(); n];
        let positions = vec![ctx.slice_position; n];
        let (l, k) = (self.height * self.width, self.classes);
        let mut probs = vec![0.0; k];
        for i in 0..l {
            if !mask.data()[i] {
                continue;
            }
            let refs: Vec<&LatentGrid> = current.iter().collect();
            let t = self.logits_tensor(&refs, &positions)?;
            for (ni, rng) in rngs.iter_mut().enumerate() {
                let col = |ki: usize| t.data()[(ki * n + ni) * l + i].to_f64_lossy();
                let token = if temperature == 0.0 {
                    let mut best = 0;
                    for ki in 1..k {
                        if col(ki) > col(best) {
                            best = ki;
                        }
                    }
                    best
                } else {
                    let max = (0..k).map(col).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for (ki, pr) in probs.iter_mut().enumerate() {
                        *pr = ((col(ki) - max) / temperature).exp();
                        z += *pr;
                    }
                    let u: f64 = rng.gen::<f64>() * z;
                    let mut acc = 0.0;
                    let mut chosen = k - 1;
                    for (ki, pr) in probs.iter().enumerate() {
                        acc += pr;
                        if u < acc {
                            chosen = ki;
                            break;
                        }
                    }
                    chosen
                };
                current[ni].indices_mut()[i] = token;
            }
        }
        if cfg!(debug_assertions) {
            for g in &current {
                for (q, (&a, &b)) in g.indices().iter().zip(grid.indices()).enumerate() {
                    assert!(mask.data()[q] || a == b, "restoration altered unmasked position {q}");
                }
            }
        }
        Ok(current)
    }
}
