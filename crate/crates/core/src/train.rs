//! Alternating adversarial training.
//!
//! Each outer iteration samples a batch, runs both generators and updates
//! the critic on the fused output, then performs `n_gen` generator updates
//! on freshly drawn batches.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{self, AugmentConfig};
use crate::autodiff::Graph;
use crate::autoencoder::{train_surrogate_autoencoder, AutoEncoder, Surrogate, SurrogateConfig};
use crate::checkpoint::Checkpoint;
use crate::color::rgb_to_hsv;
use crate::data::Pair;
use crate::error::{Error, Result};
use crate::metrics;
use crate::networks::{Colorizer, Discriminator, ModelConfig};
use crate::objectives::{
    adversarial_generator_loss, adversarial_losses, feature_consistency_loss, mse_loss, total_loss, LossTerms,
    LossWeights, MsSsimConfig,
};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub batch: usize,
    /// Generator updates per critic update.
    pub n_gen: usize,
    pub seed: u64,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    pub surrogate: SurrogateConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            epochs: 100,
            batch: 4,
            n_gen: 1,
            seed: 0,
            augment: Some(AugmentConfig::default()),
            surrogate: SurrogateConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.n_gen == 0 {
            return Err(Error::Config(format!(
                "batch and n_gen must be at least 1 (batch {}, n_gen {})",
                self.batch, self.n_gen
            )));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepCounters {
    pub outer: u64,
    pub d_steps: u64,
    pub g_steps: u64,
}

/// Averages over the generator steps of one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub step: u64,
    pub loss_d: f64,
    pub loss_g: f64,
    pub loss_mse: f64,
    pub loss_fea: f64,
    pub psnr_train: f64,
}

impl fmt::Display for EpochStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} step={} loss_d={:.6} loss_g={:.6} loss_mse={:.6} loss_fea={:.6} psnr_train={:.3}",
            self.epoch, self.step, self.loss_d, self.loss_g, self.loss_mse, self.loss_fea, self.psnr_train
        )
    }
}

/// Index stream that walks shuffled permutations of `0..n`, reshuffling
/// whenever one is used up.
#[derive(Clone, Debug)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(&mut self, m: usize) -> Vec<usize> {
        (0..m)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// One assembled batch in the model's scalar type.
struct Batch<T> {
    nir: Tensor<T>,
    rgb: Tensor<T>,
    hsv: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    fn stats(&self) -> String {
        let s = |t: &Tensor<T>| {
            let d = t.to_f64_vec();
            let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
            format!("{:?} mean {mean:.4} min {lo:.4} max {hi:.4}", t.shape())
        };
        format!("nir {}, rgb {}", s(&self.nir), s(&self.rgb))
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(a.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(b.wrapping_mul(0x94D0_49BB_1331_11EB))
}

/// Generator, critic, frozen surrogate and optimizer state.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar> {
    pub model_cfg: ModelConfig,
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub model: Colorizer,
    pub gen: ParamStore<T>,
    pub disc: Discriminator,
    pub disc_store: ParamStore<T>,
    pub surrogate: Surrogate<T>,
    surrogate_snapshot: ParamStore<T>,
    pub opt_g: AdamW<T>,
    pub opt_d: AdamW<T>,
    pub counters: StepCounters,
    /// Completed epochs.
    pub epoch: usize,
}

fn stack<T: Scalar>(items: Vec<Tensor<f64>>) -> Result<Tensor<T>> {
    let cast: Vec<Tensor<T>> = items
        .into_iter()
        .map(|t| {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.cast::<T>().reshape(&shape)
        })
        .collect::<Result<_>>()?;
    Tensor::stack_batch(&cast)
}

impl<T: Scalar> Trainer<T> {
    /// Initializes all networks from the seed and trains the surrogate
    /// autoencoder on the RGB images of `data`.
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, weights: &LossWeights, data: &[Pair]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("empty corpus".into()));
        }
        let images = data
            .iter()
            .map(|p| stack::<T>(vec![p.rgb.clone()]))
            .collect::<Result<Vec<_>>>()?;
        let mut sc = cfg.surrogate;
        sc.seed = mix(cfg.seed, 3, 0);
        let surrogate = train_surrogate_autoencoder(&images, &sc)?;
        Self::with_surrogate(model_cfg, cfg, weights, surrogate)
    }

    pub fn with_surrogate(
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        weights: &LossWeights,
        surrogate: Surrogate<T>,
    ) -> Result<Self> {
        model_cfg.validate()?;
        cfg.validate()?;
        weights.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1, 0));
        let mut gen = ParamStore::new();
        let model = Colorizer::new(&mut gen, model_cfg, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 2, 0));
        let mut disc_store = ParamStore::new();
        let disc = Discriminator::new(&mut disc_store, "disc", model_cfg.disc_widths, &mut rng)?;
        Ok(Self {
            model_cfg: model_cfg.clone(),
            cfg: cfg.clone(),
            weights: *weights,
            opt_g: AdamW::new(cfg.optimizer, &gen),
            opt_d: AdamW::new(cfg.optimizer, &disc_store),
            model,
            gen,
            disc,
            disc_store,
            surrogate_snapshot: surrogate.store.clone(),
            surrogate,
            counters: StepCounters::default(),
            epoch: 0,
        })
    }

    fn batch(&self, data: &[Pair], idx: &[usize], aug_seed: u64) -> Result<Batch<T>> {
        let (h, w) = data[idx[0]].size();
        let mut nirs = Vec::with_capacity(idx.len());
        let mut rgbs = Vec::with_capacity(idx.len());
        for (k, &i) in idx.iter().enumerate() {
            let p = &data[i];
            if p.size() != (h, w) {
                return Err(Error::Data(format!(
                    "batch mixes image sizes {h}x{w} and {:?} ({})",
                    p.size(),
                    p.name
                )));
            }
            let (n, r) = match &self.cfg.augment {
                Some(a) => augment::augment(&p.nir, &p.rgb, mix(aug_seed, k as u64, 7), a)?,
                None => (p.nir.clone(), p.rgb.clone()),
            };
            nirs.push(n);
            rgbs.push(r);
        }
        let hsv = rgbs.iter().map(rgb_to_hsv).collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            nir: stack(nirs)?,
            rgb: stack(rgbs)?,
            hsv: stack(hsv)?,
        })
    }

    fn diverged(&self, what: &str, err: Error, batch: &Batch<T>) -> Error {
        match err {
            Error::NonFinite { .. } | Error::Diverged(_) => Error::Diverged(format!(
                "{what} at epoch {} (d_steps {}, g_steps {}): {err}; last batch {}",
                self.epoch + 1,
                self.counters.d_steps,
                self.counters.g_steps,
                batch.stats()
            )),
            other => other,
        }
    }

    fn critic_step(&mut self, batch: &Batch<T>) -> Result<f64> {
        let g = Graph::new();
        let gp = self.gen.bind(&g, false);
        let dp = self.disc_store.bind(&g, true);
        let nir = g.constant(batch.nir.clone());
        let real = g.constant(batch.rgb.clone());
        let fake = self.model.forward(&g, &gp, nir)?.y_rgb;
        let real_logits = self.disc.forward(&g, &dp, real)?;
        let fake_logits = self.disc.forward(&g, &dp, fake)?;
        let (loss_d, _) = adversarial_losses(&g, real_logits, fake_logits)?;
        let grads = g.backward(loss_d)?;
        let grads = dp.collect_grads(&self.disc_store, &grads);
        self.opt_d.update(&mut self.disc_store, &grads)?;
        self.counters.d_steps += 1;
        Ok(g.value(loss_d).item()?.as_f64())
    }

    /// Returns (total, mse, fea, psnr).
    fn generator_step(&mut self, batch: &Batch<T>) -> Result<[f64; 4]> {
        let g = Graph::new();
        let gp = self.gen.bind(&g, true);
        let dp = self.disc_store.bind(&g, false);
        let ep = self.surrogate.bind(&g);
        let nir = g.constant(batch.nir.clone());
        let gt = g.constant(batch.rgb.clone());
        let hsv_gt = g.constant(batch.hsv.clone());
        let out = self.model.forward(&g, &gp, nir)?;
        let mse = g.add(mse_loss(&g, out.y_rgb, gt)?, mse_loss(&g, out.b.y_hsv, hsv_gt)?)?;
        let [_, h, w, _] = batch.rgb.dims4()?;
        let ms = MsSsimConfig::fit(h, w)?;
        let fea = feature_consistency_loss(
            &g,
            out.y_rgb,
            gt,
            |v| self.surrogate.encode(&g, &ep, v),
            &self.weights,
            &ms,
        )?;
        let adv = if self.weights.lambda_adv > 0.0 {
            let logits = self.disc.forward(&g, &dp, out.y_rgb)?;
            Some(adversarial_generator_loss(&g, logits)?)
        } else {
            None
        };
        let total = total_loss(&g, &LossTerms { mse, fea, adv }, &self.weights)?;
        let grads = g.backward(total)?;
        let grads = gp.collect_grads(&self.gen, &grads);
        self.opt_g.update(&mut self.gen, &grads)?;
        self.counters.g_steps += 1;
        let pred = g.value(out.y_rgb).cast::<f64>();
        let psnr = metrics::psnr(&pred, &batch.rgb.cast::<f64>(), 1.0)?;
        let v = |x| g.value(x).item().map(Scalar::as_f64);
        Ok([v(total)?, v(mse)?, v(fea)?, psnr])
    }

    /// One pass of `ceil(N / batch)` outer iterations.
    pub fn train_epoch(&mut self, data: &[Pair]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::Data("empty corpus".into()));
        }
        let epoch = self.epoch as u64;
        let mut stream = BatchStream::new(data.len(), mix(self.cfg.seed, 4, epoch));
        let outer = data.len().div_ceil(self.cfg.batch);
        let (mut d_sum, mut sums, mut n) = (0.0, [0.0; 4], 0.0);
        for it in 0..outer as u64 {
            let idx = stream.next_batch(self.cfg.batch);
            let batch = self.batch(data, &idx, mix(self.cfg.seed, 5, epoch * 1_000_003 + it))?;
            let d_before = self.counters.d_steps;
            d_sum += self
                .critic_step(&batch)
                .map_err(|e| self.diverged("critic update", e, &batch))?;
            for k in 0..self.cfg.n_gen as u64 {
                let idx = stream.next_batch(self.cfg.batch);
                let seed = mix(self.cfg.seed, 6, (epoch * 1_000_003 + it) * 64 + k);
                let batch = self.batch(data, &idx, seed)?;
                let r = self
                    .generator_step(&batch)
                    .map_err(|e| self.diverged("generator update", e, &batch))?;
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(self.diverged("generator update", Error::Diverged(format!("losses {r:?}")), &batch));
                }
                for (s, v) in sums.iter_mut().zip(r) {
                    *s += v;
                }
                n += 1.0;
            }
            debug_assert_eq!(self.counters.d_steps, d_before + 1);
            self.counters.outer += 1;
        }
        if self
            .surrogate
            .store
            .iter()
            .zip(self.surrogate_snapshot.iter())
            .any(|(a, b)| a.2 != b.2)
        {
            return Err(Error::Contract(
                "surrogate encoder parameters changed during training".into(),
            ));
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            step: self.counters.g_steps,
            loss_d: d_sum / outer as f64,
            loss_g: sums[0] / n,
            loss_mse: sums[1] / n,
            loss_fea: sums[2] / n,
            psnr_train: sums[3] / n,
        })
    }

    /// Colorizes one `(H,W,1)` NIR image.
    pub fn predict(&self, nir: &Tensor<f64>) -> Result<Tensor<f64>> {
        predict(&self.model, &self.gen, nir)
    }

    /// Mean PSNR of the un-augmented corpus.
    pub fn evaluate_psnr(&self, data: &[Pair]) -> Result<f64> {
        let mut total = 0.0;
        for p in data {
            total += metrics::psnr(&self.predict(&p.nir)?, &p.rgb, 1.0)?;
        }
        Ok(total / data.len().max(1) as f64)
    }

    pub fn surrogate_unchanged(&self) -> bool {
        self.surrogate
            .store
            .iter()
            .zip(self.surrogate_snapshot.iter())
            .all(|(a, b)| a.2 == b.2)
    }

    /// Parameters, optimizer moments, counters and the frozen surrogate.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set("epoch", self.epoch);
        c.set("outer", self.counters.outer);
        c.set("d_steps", self.counters.d_steps);
        c.set("g_steps", self.counters.g_steps);
        c.set("opt_g.step", self.opt_g.step);
        c.set("opt_d.step", self.opt_d.step);
        c.set("seed", self.cfg.seed);
        c.set("surrogate.latent", self.surrogate.model.latent);
        c.set("surrogate.final_mse", self.surrogate.final_mse);
        c.set("surrogate.steps", self.surrogate.steps);
        c.push_store("gen", &self.gen);
        c.push_store("disc", &self.disc_store);
        c.push_store("surrogate", &self.surrogate.store);
        c.push_aligned("opt_g.m", &self.gen, &self.opt_g.m);
        c.push_aligned("opt_g.v", &self.gen, &self.opt_g.v);
        c.push_aligned("opt_d.m", &self.disc_store, &self.opt_d.m);
        c.push_aligned("opt_d.v", &self.disc_store, &self.opt_d.v);
        c
    }

    /// Rebuilds a trainer from [`Trainer::to_checkpoint`] output. Training
    /// continues where it stopped: counters, epoch and moments carry over.
    pub fn from_checkpoint(
        model_cfg: &ModelConfig,
        cfg: &TrainConfig,
        weights: &LossWeights,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let latent = ckpt.parse("surrogate.latent")?;
        let model = AutoEncoder::new(&mut store, latent, &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.restore_store("surrogate", &mut store)?;
        let surrogate = Surrogate {
            model,
            store,
            final_mse: ckpt.parse("surrogate.final_mse")?,
            steps: ckpt.parse("surrogate.steps")?,
        };
        let mut t = Self::with_surrogate(model_cfg, cfg, weights, surrogate)?;
        ckpt.restore_store("gen", &mut t.gen)?;
        ckpt.restore_store("disc", &mut t.disc_store)?;
        t.opt_g.m = ckpt.aligned("opt_g.m", &t.gen)?;
        t.opt_g.v = ckpt.aligned("opt_g.v", &t.gen)?;
        t.opt_d.m = ckpt.aligned("opt_d.m", &t.disc_store)?;
        t.opt_d.v = ckpt.aligned("opt_d.v", &t.disc_store)?;
        t.opt_g.step = ckpt.parse("opt_g.step")?;
        t.opt_d.step = ckpt.parse("opt_d.step")?;
        t.counters = StepCounters {
            outer: ckpt.parse("outer")?,
            d_steps: ckpt.parse("d_steps")?,
            g_steps: ckpt.parse("g_steps")?,
        };
        t.epoch = ckpt.parse("epoch")?;
        Ok(t)
    }
}

/// Colorizes one `(H,W,1)` NIR image with frozen parameters.
pub fn predict<T: Scalar>(model: &Colorizer, store: &ParamStore<T>, nir: &Tensor<f64>) -> Result<Tensor<f64>> {
    let [h, w, c] = match nir.shape() {
        [h, w, c] => [*h, *w, *c],
        s => return Err(Error::shape("predict", format!("expected (H, W, 1), got {s:?}"))),
    };
    let g = Graph::new();
    let p = store.bind(&g, false);
    let x = g.constant(nir.cast::<T>().reshape(&[1, h, w, c])?);
    let y = model.forward(&g, &p, x)?.y_rgb;
    g.value(y).cast::<f64>().reshape(&[h, w, 3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_pairs;

    #[test]
    fn batch_stream_covers_each_permutation() {
        let mut s = BatchStream::new(5, 1);
        let mut a = s.next_batch(5);
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3, 4]);
        let b = s.next_batch(7);
        assert_eq!(b.len(), 7);
    }

    fn tiny_trainer(n_gen: usize, lambda_adv: f64) -> (Trainer<f64>, Vec<Pair>) {
        let data = synthetic_pairs(2, 8, 0);
        let model = ModelConfig {
            depth: 2,
            widths: vec![4, 4],
            state_size: 2,
            expand: 1,
            agent_count: 4,
            tex_channels: 2,
            disc_widths: [2, 2, 2],
            ..ModelConfig::default()
        };
        let cfg = TrainConfig {
            batch: 1,
            n_gen,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..Default::default()
            },
            surrogate: SurrogateConfig {
                target_mse: 0.05,
                ..Default::default()
            },
            ..Default::default()
        };
        let weights = LossWeights {
            lambda_adv,
            ..Default::default()
        };
        (Trainer::new(&model, &cfg, &weights, &data).unwrap(), data)
    }

    #[test]
    fn step_accounting_follows_n_gen() {
        for n_gen in [1, 3] {
            let (mut t, data) = tiny_trainer(n_gen, 1.0);
            let s = t.train_epoch(&data).unwrap();
            assert_eq!(t.counters.outer, 2);
            assert_eq!(t.counters.d_steps, 2);
            assert_eq!(t.counters.g_steps, 2 * n_gen as u64);
            assert_eq!(t.opt_d.step, t.counters.d_steps);
            assert_eq!(t.opt_g.step, t.counters.g_steps);
            assert_eq!(s.step, t.counters.g_steps);
            assert!(t.surrogate_unchanged());
        }
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let run = || {
            let (mut t, data) = tiny_trainer(1, 1.0);
            for _ in 0..2 {
                t.train_epoch(&data).unwrap();
            }
            t.gen
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.2 == y.2));
    }

    #[test]
    fn resume_continues_bit_identically() {
        let (mut straight, data) = tiny_trainer(2, 1.0);
        let mut split = straight.clone();
        for _ in 0..2 {
            straight.train_epoch(&data).unwrap();
        }
        split.train_epoch(&data).unwrap();
        let bytes = split.to_checkpoint().to_bytes().unwrap();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let mut resumed = Trainer::<f64>::from_checkpoint(&split.model_cfg, &split.cfg, &split.weights, &ckpt).unwrap();
        assert_eq!(resumed.counters, split.counters);
        assert_eq!(resumed.epoch, 1);
        resumed.train_epoch(&data).unwrap();
        assert_eq!(resumed.counters, straight.counters);
        assert_eq!(resumed.opt_g.step, straight.opt_g.step);
        let same = |a: &ParamStore<f64>, b: &ParamStore<f64>| a.iter().zip(b.iter()).all(|(x, y)| x.2 == y.2);
        assert!(same(&resumed.gen, &straight.gen));
        assert!(same(&resumed.disc_store, &straight.disc_store));
        assert_eq!(resumed.opt_g.m, straight.opt_g.m);
    }

    #[test]
    fn checkpoint_for_other_model_is_rejected() {
        let (t, _) = tiny_trainer(1, 0.0);
        let ckpt = t.to_checkpoint();
        let mut other = t.model_cfg.clone();
        other.widths = vec![4, 8];
        let r = Trainer::<f64>::from_checkpoint(&other, &t.cfg, &t.weights, &ckpt);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn stats_line_format() {
        let s = EpochStats {
            epoch: 1,
            step: 2,
            loss_d: 0.5,
            loss_g: 1.0,
            loss_mse: 0.1,
            loss_fea: 0.2,
            psnr_train: 12.0,
        };
        assert_eq!(
            s.to_string(),
            "epoch=1 step=2 loss_d=0.500000 loss_g=1.000000 loss_mse=0.100000 loss_fea=0.200000 psnr_train=12.000"
        );
    }
}
