//! Convolutional encoder/decoder stacks shared by the VQ-VAE and the VAE baseline.
//!
//! Encoder: 3x3 stem, then per block a 2x2 stride-2 downsample followed by the
//! residual sub-blocks, then a 1x1 projection to the embedding depth. The
//! decoder mirrors it with residual sub-blocks followed by a 2x2 stride-2
//! transposed convolution.

use crate::autodiff::{ConvGeom, Tape, Var};
use crate::params::{dropout_mask, init_weight, Bound, ParamStore};
use crate::rng::RandomSource;
use crate::tensor::{Scalar, Tensor};

use super::CodecConfig;

pub(crate) fn init_params<T: Scalar>(cfg: &CodecConfig, rng: &mut RandomSource, store: &mut ParamStore<T>) {
    let (c, cr, d) = (cfg.channels, cfg.res_channels, cfg.embedding_dim);
    let relu_gain = 2f64.sqrt();
    let mut conv = |store: &mut ParamStore<T>, name: &str, cout: usize, cin: usize, k: usize, gain: f64| {
        store.insert(
            format!("{name}.w"),
            init_weight(&mut *rng, &[cout, cin, k, k], cin * k * k, gain),
        );
        store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    };
    conv(store, "enc.in", c, 1, 3, 1.0);
    for b in 0..cfg.blocks {
        conv(store, &format!("enc.b{b}.down"), c, c, 2, 1.0);
        for r in 0..cfg.res_blocks {
            conv(store, &format!("enc.b{b}.r{r}.c3"), cr, c, 3, relu_gain);
            conv(store, &format!("enc.b{b}.r{r}.c1"), c, cr, 1, 0.5);
        }
    }
    conv(store, "enc.out", d, c, 1, relu_gain);
    conv(store, "dec.in", c, d, 1, 1.0);
    for b in 0..cfg.blocks {
        for r in 0..cfg.res_blocks {
            conv(store, &format!("dec.b{b}.r{r}.c3"), cr, c, 3, relu_gain);
            conv(store, &format!("dec.b{b}.r{r}.c1"), c, cr, 1, 0.5);
        }
        // transposed conv weights are [Cin, Cout, 2, 2]
        conv(store, &format!("dec.b{b}.up"), c, c, 2, 1.0);
    }
    conv(store, "dec.out", 1, c, 3, relu_gain);
}

pub(crate) fn zero_params<T: Scalar>(store: &mut ParamStore<T>) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = T::zero();
        }
    }
}

fn conv<T: Scalar>(tape: &mut Tape<T>, p: &Bound<'_>, name: &str, x: Var, geom: ConvGeom) -> Var {
    let w = p.var(&format!("{name}.w"));
    let b = p.var(&format!("{name}.b"));
    tape.conv2d(x, w, Some(b), geom)
}

fn residual<T: Scalar>(
    tape: &mut Tape<T>,
    p: &Bound<'_>,
    name: &str,
    x: Var,
    dropout: Option<(&mut RandomSource, f64)>,
) -> Var {
    let a = tape.relu(x);
    let h = conv(tape, p, &format!("{name}.c3"), a, ConvGeom::same(3));
    let mut h = tape.relu(h);
    if let Some((rng, rate)) = dropout {
        if rate > 0.0 {
            let mask = dropout_mask(rng, tape.value(h).shape(), rate);
            let m = tape.constant(mask);
            h = tape.mul(h, m);
        }
    }
    let h = conv(tape, p, &format!("{name}.c1"), h, ConvGeom::pointwise());
    tape.add(x, h)
}

/// `[1, N, S, S]` image batch → `[D, N, S/2^B, S/2^B]` encoder features.
pub(crate) fn encoder<T: Scalar>(
    cfg: &CodecConfig,
    tape: &mut Tape<T>,
    p: &Bound<'_>,
    x: Var,
    mut dropout: Option<&mut RandomSource>,
) -> Var {
    let mut h = conv(tape, p, "enc.in", x, ConvGeom::same(3));
    for b in 0..cfg.blocks {
        h = conv(tape, p, &format!("enc.b{b}.down"), h, ConvGeom::patch(2));
        for r in 0..cfg.res_blocks {
            let d = dropout.as_deref_mut().map(|rng| (rng, cfg.dropout));
            h = residual(tape, p, &format!("enc.b{b}.r{r}"), h, d);
        }
    }
    let h = tape.relu(h);
    conv(tape, p, "enc.out", h, ConvGeom::pointwise())
}

/// `[D, N, s, s]` latent features → `[1, N, s*2^B, s*2^B]` image batch.
pub(crate) fn decoder<T: Scalar>(
    cfg: &CodecConfig,
    tape: &mut Tape<T>,
    p: &Bound<'_>,
    z: Var,
    mut dropout: Option<&mut RandomSource>,
) -> Var {
    let mut h = conv(tape, p, "dec.in", z, ConvGeom::pointwise());
    for b in 0..cfg.blocks {
        for r in 0..cfg.res_blocks {
            let d = dropout.as_deref_mut().map(|rng| (rng, cfg.dropout));
            h = residual(tape, p, &format!("dec.b{b}.r{r}"), h, d);
        }
        let w = p.var(&format!("dec.b{b}.up.w"));
        let bias = p.var(&format!("dec.b{b}.up.b"));
        h = tape.upsample2(h, w, bias);
    }
    let h = tape.relu(h);
    conv(tape, p, "dec.out", h, ConvGeom::same(3))
}
