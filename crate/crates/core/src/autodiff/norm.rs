//! Normalization layers.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normalizes each group given by `index(group, j)` (j in 0..n) to zero
/// mean / unit variance. Returns normalized values and per-group 1/σ.
fn normalize_groups<T: Scalar>(
    data: &[T],
    groups: usize,
    n: usize,
    eps: T,
    index: impl Fn(usize, usize) -> usize,
) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); data.len()];
    let mut inv_std = vec![T::zero(); groups];
    let nf = T::of_usize(n);
    for gi in 0..groups {
        let mean = (0..n).map(|j| data[index(gi, j)]).sum::<T>() / nf;
        let var = (0..n)
            .map(|j| {
                let d = data[index(gi, j)] - mean;
                d * d
            })
            .sum::<T>()
            / nf;
        let is = T::one() / (var + eps).sqrt();
        inv_std[gi] = is;
        for j in 0..n {
            let i = index(gi, j);
            xhat[i] = (data[i] - mean) * is;
        }
    }
    (xhat, inv_std)
}

/// Backward of [`normalize_groups`] given upstream gradient w.r.t. x̂.
fn normalize_groups_backward<T: Scalar>(
    dxhat: &[T],
    xhat: &[T],
    inv_std: &[T],
    n: usize,
    index: impl Fn(usize, usize) -> usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); dxhat.len()];
    let nf = T::of_usize(n);
    for (gi, &is) in inv_std.iter().enumerate() {
        let mean_d = (0..n).map(|j| dxhat[index(gi, j)]).sum::<T>() / nf;
        let mean_dx = (0..n)
            .map(|j| {
                let i = index(gi, j);
                dxhat[i] * xhat[i]
            })
            .sum::<T>()
            / nf;
        for j in 0..n {
            let i = index(gi, j);
            dx[i] = is * (dxhat[i] - mean_d - xhat[i] * mean_dx);
        }
    }
    dx
}

impl<T: Scalar> Graph<T> {
    /// Layer normalization over the last (channel) axis with affine
    /// `gamma`/`beta` of that length.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Domain("layer_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let c = xv.last_dim();
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gamma {:?}, beta {:?}", xv.shape(), gv.shape(), bv.shape()),
            ));
        }
        let groups = xv.numel() / c;
        let idx = move |g: usize, j: usize| g * c + j;
        let (xhat, inv_std) = normalize_groups(xv.data(), groups, c, eps, idx);
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv.data()[i % c] + bv.data()[i % c])
            .collect();
        let shape = xv.shape().to_vec();
        let out = Tensor::new(&shape, out)?;
        self.custom("layer_norm", &[x, gamma, beta], out, move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let dxhat: Vec<T> = gd.iter().enumerate().map(|(i, &v)| v * gv.data()[i % c]).collect();
                let d = normalize_groups_backward(&dxhat, &xhat, &inv_std, c, idx);
                Tensor::new(&shape, d).expect("shape")
            });
            let dgamma = needs[1].then(|| {
                let mut d = vec![T::zero(); c];
                for (i, (&gv, &xh)) in gd.iter().zip(&xhat).enumerate() {
                    d[i % c] = d[i % c] + gv * xh;
                }
                Tensor::from_vec(d)
            });
            let dbeta = needs[2].then(|| {
                let mut d = vec![T::zero(); c];
                for (i, &gv) in gd.iter().enumerate() {
                    d[i % c] = d[i % c] + gv;
                }
                Tensor::from_vec(d)
            });
            vec![dx, dgamma, dbeta]
        })
    }

    /// Parameter-free instance normalization: each channel of each image is
    /// normalized over its spatial positions.
    pub fn instance_norm(&self, x: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Domain("instance_norm eps must be positive".into()));
        }
        let xv = self.value(x);
        let [b, h, w, c] = xv.dims4()?;
        let hw = h * w;
        let idx = move |g: usize, j: usize| {
            let (bi, ci) = (g / c, g % c);
            (bi * hw + j) * c + ci
        };
        let (xhat, inv_std) = normalize_groups(xv.data(), b * c, hw, eps, idx);
        let shape = xv.shape().to_vec();
        let out = Tensor::new(&shape, xhat.clone())?;
        self.custom("instance_norm", &[x], out, move |g, _| {
            let d = normalize_groups_backward(g.data(), &xhat, &inv_std, hw, idx);
            vec![Some(Tensor::new(&shape, d).expect("shape"))]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ln(x: Tensor<f64>) -> Tensor<f64> {
        let g = Graph::new();
        let c = x.last_dim();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::ones(&[c]));
        let beta = g.constant(Tensor::zeros(&[c]));
        let y = g.layer_norm(xv, gamma, beta, 1e-5).unwrap();
        (*g.value(y)).clone()
    }

    #[test]
    fn constant_channels_normalize_to_zero() {
        let y = ln(Tensor::full(&[3, 4], 2.5));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_channel_closed_form() {
        // mean 2, var 1: (x - 2)/sqrt(1 + eps)
        let y = ln(Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap());
        let s = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + s).abs() < 1e-15);
        assert!((y.data()[1] - s).abs() < 1e-15);
    }

    #[test]
    fn random_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y = ln(Tensor::randn(&[10, 16], 10.0, &mut rng));
        for row in y.data().chunks(16) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn instance_norm_per_channel_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::randn(&[2, 3, 3, 2], 2.0, &mut rng));
        let y = g.instance_norm(x, 1e-5).unwrap();
        let yv = g.value(y);
        for b in 0..2 {
            for c in 0..2 {
                let vals: Vec<f64> = (0..9).map(|p| yv.at4(b, p / 3, p % 3, c)).collect();
                let mean = vals.iter().sum::<f64>() / 9.0;
                assert!(mean.abs() < 1e-12);
            }
        }
    }
}
