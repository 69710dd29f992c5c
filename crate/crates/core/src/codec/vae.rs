//! Gaussian VAE baseline on the same convolutional backbone, with dense
//! heads for the mean and log-variance of the latent.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::{init_weight, Bound, ParamStore};
use crate::rng::{self, RandomSource};
use crate::tensor::{Scalar, Tensor};

use super::{backbone, check_layout, images_to_tensor, tensor_to_images, CodecConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeLossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct Vae<T> {
    config: CodecConfig,
    params: ParamStore<T>,
}

struct VaeGraph {
    reconstruction: Var,
    kl: Var,
    total: Var,
    output: Var,
}

impl<T: Scalar> Vae<T> {
    pub fn new(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "vae-init", &[]);
        let mut params = ParamStore::new();
        backbone::init_params(&config, &mut rng, &mut params);
        let f = config.embedding_dim * config.latent_side() * config.latent_side();
        let z = config.vae_latent_dim;
        params.insert("vae.mu.w", init_weight(&mut rng, &[z, f], f, 1.0));
        params.insert("vae.mu.b", Tensor::zeros(&[z]));
        params.insert("vae.logvar.w", init_weight(&mut rng, &[z, f], f, 0.1));
        params.insert("vae.logvar.b", Tensor::zeros(&[z]));
        params.insert("vae.expand.w", init_weight(&mut rng, &[f, z], z, 1.0));
        params.insert("vae.expand.b", Tensor::zeros(&[f]));
        Ok(Vae { config, params })
    }

    pub fn from_params(config: CodecConfig, params: ParamStore<T>) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        check_layout(&reference.params, &params)?;
        Ok(Vae { config, params })
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

    pub fn cast<U: Scalar>(&self) -> Vae<U> {
        Vae {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Standard-normal noise for a batch, drawn in row order.
    pub fn draw_noise(&self, n: usize, rng: &mut RandomSource) -> Tensor<T> {
        use rand_distr::{Distribution, StandardNormal};
        let z = self.config.vae_latent_dim;
        Tensor::from_vec(
            &[n, z],
            (0..n * z)
                .map(|_| T::from_f64_lossy(StandardNormal.sample(rng)))
                .collect(),
        )
    }

    fn graph(
        &self,
        tape: &mut Tape<T>,
        p: &Bound<'_>,
        images: &[&Image],
        noise: Option<&Tensor<T>>,
        mut dropout: Option<&mut RandomSource>,
    ) -> Result<VaeGraph> {
        let x = tape.constant(images_to_tensor::<T>(images, self.config.image_side)?);
        let ze = backbone::encoder(&self.config, tape, p, x, dropout.as_deref_mut());
        let rows = tape.to_rows(ze);
        let mu = tape.dense(rows, p.var("vae.mu.w"), p.var("vae.mu.b"));
        let logvar = tape.dense(rows, p.var("vae.logvar.w"), p.var("vae.logvar.b"));
        let z = match noise {
            Some(eps) => {
                if eps.shape() != [images.len(), self.config.vae_latent_dim] {
                    return Err(Error::DimensionMismatch("VAE noise shape".into()));
                }
                let half = tape.scale(logvar, T::from_f64_lossy(0.5));
                let sigma = tape.exp(half);
                let e = tape.constant(eps.clone());
                let spread = tape.mul(sigma, e);
                tape.add(mu, spread)
            }
            None => mu,
        };
        let expanded = tape.dense(z, p.var("vae.expand.w"), p.var("vae.expand.b"));
        let s = self.config.latent_side();
        let zd = tape.from_rows(expanded, self.config.embedding_dim, s, s);
        let output = backbone::decoder(&self.config, tape, p, zd, dropout);
        let reconstruction = tape.l1_mean(output, x);
        let kl = tape.kl_std_normal(mu, logvar);
        let total = tape.add(reconstruction, kl);
        Ok(VaeGraph {
            reconstruction,
            kl,
            total,
            output,
        })
    }

    fn breakdown(tape: &Tape<T>, g: &VaeGraph) -> Result<VaeLossBreakdown> {
        let v = |x: Var| tape.value(x).item().to_f64_lossy();
        let out = VaeLossBreakdown {
            reconstruction: v(g.reconstruction),
            kl: v(g.kl),
            total: v(g.total),
        };
        if !out.total.is_finite() {
            return Err(Error::NonFinite(format!("VAE loss {out:?}")));
        }
        Ok(out)
    }

    /// Loss with reparameterisation noise drawn from `rng`.
    pub fn loss(&self, image: &Image, rng: &mut RandomSource) -> Result<VaeLossBreakdown> {
        let eps = self.draw_noise(1, rng);
        self.loss_with_noise(image, Some(&eps))
    }

    /// Loss with explicit noise; `None` decodes the posterior mean.
    pub fn loss_with_noise(&self, image: &Image, noise: Option<&Tensor<T>>) -> Result<VaeLossBreakdown> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let g = self.graph(&mut tape, &p, &[image], noise, None)?;
        Self::breakdown(&tape, &g)
    }

    /// Noise-free loss and the reconstruction decoded from the posterior mean.
    pub fn evaluate_mean(&self, image: &Image) -> Result<(VaeLossBreakdown, Image)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let g = self.graph(&mut tape, &p, &[image], None, None)?;
        let loss = Self::breakdown(&tape, &g)?;
        Ok((loss, tensor_to_images(tape.value(g.output)).remove(0)))
    }

    pub fn loss_and_grads(
        &self,
        images: &[&Image],
        noise: &Tensor<T>,
        dropout: Option<&mut RandomSource>,
    ) -> Result<(VaeLossBreakdown, Vec<Tensor<T>>)> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, true);
        let g = self.graph(&mut tape, &p, images, Some(noise), dropout)?;
        let loss = Self::breakdown(&tape, &g)?;
        let mut grads = tape.backward(g.total);
        Ok((loss, p.gradients(&tape, &mut grads)))
    }
}
