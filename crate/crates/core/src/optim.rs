//! Adaptive-moment optimizer with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied as `θ ← θ − lr·wd·θ`, outside the gradient.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.5,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Number of updates applied so far.
    pub step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: AdamWConfig, store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Applies one update given gradients aligned with `store.ids()`.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, store has {}, got {} gradients",
                self.m.len(),
                store.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powf(self.step as f64));
        let bc2 = T::of(1.0 - c.beta2.powf(self.step as f64));
        let lr = T::of(c.lr);
        let decay = T::one() - T::of(c.lr * c.weight_decay);
        let eps = T::of(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = &grads[k];
            let p = store.get_mut(id);
            if g.shape() != p.shape() {
                return Err(Error::shape("adamw", format!("{:?} vs {:?}", g.shape(), p.shape())));
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *w = *w * decay - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::from_vec(vec![1.0, -2.0])).unwrap();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.update(&mut s, &[Tensor::from_vec(vec![0.3, -5.0])]).unwrap();
        let w = s.get(s.find("w").unwrap()).data().to_vec();
        assert!((w[0] - (1.0 - 1e-4)).abs() < 1e-9);
        assert!((w[1] - (-2.0 + 1e-4)).abs() < 1e-9);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::from_vec(vec![2.0])).unwrap();
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        opt.update(&mut s, &[Tensor::from_vec(vec![0.0])]).unwrap();
        assert_eq!(s.get(s.find("w").unwrap()).data()[0], 2.0 * (1.0 - 0.05));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("w", Tensor::from_vec(vec![3.0, -4.0])).unwrap();
        let cfg = AdamWConfig {
            lr: 0.05,
            beta1: 0.9,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &s);
        for _ in 0..2000 {
            let g = s.get(id).map(|x| 2.0 * x);
            opt.update(&mut s, &[g]).unwrap();
        }
        assert!(s.get(id).max_abs() < 1e-3);
        assert_eq!(opt.step, 2000);
    }

    #[test]
    fn gradient_count_mismatch() {
        let mut s = ParamStore::<f64>::new();
        s.add("w", Tensor::zeros(&[1])).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &s);
        assert!(opt.update(&mut s, &[]).is_err());
    }
}
