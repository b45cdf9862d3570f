//! Small convolutional autoencoder whose frozen encoder supplies the
//! embeddings of the feature-consistency loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::blocks::LEAKY_SLOPE;
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::objectives::mse_loss;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AutoEncoder {
    pub enc1: Conv2d,
    pub enc2: Conv2d,
    pub dec1: Conv2d,
    pub dec2: Conv2d,
    pub latent: usize,
}

impl AutoEncoder {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, latent: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            enc1: Conv2d::new(store, "ae.enc1", 3, latent, 3, 1, true, rng)?,
            enc2: Conv2d::new(store, "ae.enc2", latent, latent, 3, 2, true, rng)?,
            dec1: Conv2d::new(store, "ae.dec1", latent, latent, 3, 1, true, rng)?,
            dec2: Conv2d::new(store, "ae.dec2", latent, 3, 3, 1, true, rng)?,
            latent,
        })
    }

    /// `(B,H,W,3)` → `(B,H/2,W/2,latent)`.
    pub fn encode<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let s = T::of(LEAKY_SLOPE);
        let h = g.leaky_relu(self.enc1.forward(g, p, x)?, s)?;
        g.leaky_relu(self.enc2.forward(g, p, h)?, s)
    }

    pub fn decode<T: Scalar>(&self, g: &Graph<T>, p: &Bound, z: Var) -> Result<Var> {
        let h = g.upsample2(z)?;
        let h = g.leaky_relu(self.dec1.forward(g, p, h)?, T::of(LEAKY_SLOPE))?;
        g.sigmoid(self.dec2.forward(g, p, h)?)
    }

    pub fn reconstruct<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let z = self.encode(g, p, x)?;
        self.decode(g, p, z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateConfig {
    pub latent: usize,
    pub lr: f64,
    pub max_steps: usize,
    /// Training stops once the corpus reconstruction MSE is below this.
    pub target_mse: f64,
    pub seed: u64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            latent: 8,
            lr: 1e-2,
            max_steps: 3000,
            target_mse: 0.01,
            seed: 0,
        }
    }
}

/// Trained, frozen autoencoder together with its parameters.
#[derive(Clone, Debug)]
pub struct Surrogate<T> {
    pub model: AutoEncoder,
    pub store: ParamStore<T>,
    pub final_mse: f64,
    pub steps: usize,
}

impl<T: Scalar> Surrogate<T> {
    /// Binds the frozen parameters as constants and encodes `x`.
    pub fn encode(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.model.encode(g, p, x)
    }

    pub fn bind(&self, g: &Graph<T>) -> Bound {
        self.store.bind(g, false)
    }

    /// Mean reconstruction MSE over `images`.
    pub fn reconstruction_mse(&self, images: &[Tensor<T>]) -> Result<f64> {
        reconstruction_mse(&self.model, &self.store, images)
    }
}

fn reconstruction_mse<T: Scalar>(ae: &AutoEncoder, store: &ParamStore<T>, images: &[Tensor<T>]) -> Result<f64> {
    let mut total = 0.0;
    for img in images {
        let g = Graph::new();
        let p = store.bind(&g, false);
        let x = g.constant(img.clone());
        let r = ae.reconstruct(&g, &p, x)?;
        total += mse_loss(&g, r, x).map(|l| g.value(l).item())??.as_f64();
    }
    Ok(total / images.len() as f64)
}

/// Trains the autoencoder on `(B,H,W,3)` images in `[0,1]` until the mean
/// reconstruction MSE drops below the target, then returns it frozen.
pub fn train_surrogate_autoencoder<T: Scalar>(images: &[Tensor<T>], cfg: &SurrogateConfig) -> Result<Surrogate<T>> {
    if images.is_empty() {
        return Err(Error::Data("surrogate autoencoder needs at least one image".into()));
    }
    for img in images {
        let [_, h, w, c] = img.dims4()?;
        if c != 3 || h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Data(format!(
                "autoencoder images must be (B, 2k, 2m, 3), got {:?}",
                img.shape()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let model = AutoEncoder::new(&mut store, cfg.latent, &mut rng)?;
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            beta1: 0.9,
            weight_decay: 0.0,
            ..Default::default()
        },
        &store,
    );
    let check_every = images.len().max(25);
    let mut steps = 0;
    let mut mse = reconstruction_mse(&model, &store, images)?;
    while mse >= cfg.target_mse && steps < cfg.max_steps {
        let img = &images[steps % images.len()];
        let g = Graph::new();
        let p = store.bind(&g, true);
        let x = g.constant(img.clone());
        let r = model.reconstruct(&g, &p, x)?;
        let loss = mse_loss(&g, r, x)?;
        let grads = g.backward(loss)?;
        let grads = p.collect_grads(&store, &grads);
        opt.update(&mut store, &grads)?;
        steps += 1;
        if steps % check_every == 0 || steps == cfg.max_steps {
            mse = reconstruction_mse(&model, &store, images)?;
        }
    }
    log::info!("surrogate autoencoder: reconstruction MSE {mse:.5} after {steps} steps");
    if mse >= cfg.target_mse {
        return Err(Error::Diverged(format!(
            "surrogate autoencoder reached MSE {mse:.5} after {steps} steps, target {}",
            cfg.target_mse
        )));
    }
    Ok(Surrogate {
        model,
        store,
        final_mse: mse,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_pairs;

    #[test]
    fn empty_corpus_is_rejected() {
        let r = train_surrogate_autoencoder::<f64>(&[], &SurrogateConfig::default());
        assert!(matches!(r, Err(Error::Data(_))));
    }

    #[test]
    fn reaches_target_and_encodes_deterministically() {
        let imgs: Vec<Tensor<f64>> = synthetic_pairs(4, 16, 3)
            .into_iter()
            .map(|p| p.rgb.reshape(&[1, 16, 16, 3]).unwrap())
            .collect();
        let s = train_surrogate_autoencoder(&imgs, &SurrogateConfig::default()).unwrap();
        assert!(s.final_mse < 0.01);
        assert!(s.reconstruction_mse(&imgs).unwrap() < 0.01);
        let enc = || {
            let g = Graph::new();
            let p = s.bind(&g);
            let z = s.encode(&g, &p, g.constant(imgs[0].clone())).unwrap();
            (*g.value(z)).clone()
        };
        let a = enc();
        assert_eq!(a.shape(), &[1, 8, 8, 8]);
        assert_eq!(a.data(), enc().data());
    }
}
