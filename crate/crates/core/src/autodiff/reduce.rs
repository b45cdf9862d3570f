//! Reductions and softmax.

use std::rc::Rc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// Sum of all elements as a scalar (shape `[]`).
    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        let out = Tensor::scalar(av.sum());
        self.custom("sum_all", &[a], out, move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let n = av.numel();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let shape = av.shape().to_vec();
        let inv = T::one() / T::of_usize(n);
        let out = Tensor::scalar(av.sum() * inv);
        self.custom("mean_all", &[a], out, move |g, _| {
            vec![Some(Tensor::full(&shape, g.data()[0] * inv))]
        })
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.ndim() == 0 {
            return Err(Error::shape("sum_last", "scalar input"));
        }
        let k = av.last_dim();
        let out_shape = av.shape()[..av.ndim() - 1].to_vec();
        let data: Vec<T> = av
            .data()
            .chunks(k.max(1))
            .map(|row| row.iter().copied().sum())
            .collect();
        let in_shape = av.shape().to_vec();
        let out = Tensor::new(&out_shape, data)?;
        self.custom("sum_last", &[a], out, move |g, _| {
            let data = g.data().iter().flat_map(|&gv| std::iter::repeat_n(gv, k)).collect();
            vec![Some(Tensor::new(&in_shape, data).expect("shape"))]
        })
    }

    /// Mean over the spatial axes of a `(B,H,W,C)` map, giving `(B,C)`.
    pub fn mean_spatial(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let [b, h, w, c] = av.dims4()?;
        let hw = h * w;
        let inv = T::one() / T::of_usize(hw);
        let mut data = vec![T::zero(); b * c];
        for bi in 0..b {
            for p in 0..hw {
                let row = &av.data()[(bi * hw + p) * c..(bi * hw + p + 1) * c];
                for (o, &x) in data[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o = *o + x;
                }
            }
        }
        data.iter_mut().for_each(|x| *x = *x * inv);
        let in_shape = av.shape().to_vec();
        let out = Tensor::new(&[b, c], data)?;
        self.custom("mean_spatial", &[a], out, move |g, _| {
            let mut d = vec![T::zero(); b * hw * c];
            for bi in 0..b {
                for p in 0..hw {
                    for ci in 0..c {
                        d[(bi * hw + p) * c + ci] = g.data()[bi * c + ci] * inv;
                    }
                }
            }
            vec![Some(Tensor::new(&in_shape, d).expect("shape"))]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let k = av.last_dim();
        if k == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let out = Tensor::new(av.shape(), softmax_rows(av.data(), k))?;
        let y = Rc::new(out.clone());
        let shape = av.shape().to_vec();
        self.custom("softmax", &[a], out, move |g, _| {
            let mut d = vec![T::zero(); y.numel()];
            for ((yr, gr), dr) in y.data().chunks(k).zip(g.data().chunks(k)).zip(d.chunks_mut(k)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::new(&shape, d).expect("shape"))]
        })
    }
}

pub(crate) fn softmax_rows<T: Scalar>(data: &[T], k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(k) {
        let m = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
        let start = out.len();
        let mut z = T::zero();
        for &x in row {
            let e = (x - m).exp();
            z = z + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_constant_is_uniform() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 5], 3.7));
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 1.7).sin() * 5.0));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_spatial_shape() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64));
        let m = g.mean_spatial(x).unwrap();
        assert_eq!(g.shape(m), vec![2, 5]);
        // channel 0 of batch 0: mean of 0,5,...,55
        assert!((g.value(m).data()[0] - 27.5).abs() < 1e-12);
    }
}
