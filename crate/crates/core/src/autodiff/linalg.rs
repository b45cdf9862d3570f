//! Matrix products.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `out[m,n] = Σ_k a[m,k] b[k,n]`, accumulated into `out`.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[k,n] += Σ_m a[m,k] g[m,n]` (aᵀ·g).
pub(crate) fn gemm_at_b_acc<T: Scalar>(a: &[T], g: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
}

/// `out[m,k] += Σ_n g[m,n] b[k,n]` (g·bᵀ).
pub(crate) fn gemm_a_bt_acc<T: Scalar>(g: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for (p, o) in orow.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let dot: T = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            *o = *o + dot;
        }
    }
}

impl<T: Scalar> Graph<T> {
    /// Matrix product of `(M,K)·(K,N)` or batched `(B,M,K)·(B,K,N)`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (batch, m, k, n) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b1, m, k], [b2, k2, n]) if k == k2 && b1 == b2 => (*b1, *m, *k, *n),
            (sa, sb) => {
                return Err(Error::shape(
                    "matmul",
                    format!("incompatible operands {sa:?} and {sb:?}"),
                ))
            }
        };
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            gemm_acc(
                &av.data()[bi * m * k..(bi + 1) * m * k],
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let out_shape = if av.ndim() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::new(&out_shape, out)?;
        self.custom("matmul", &[a, b], out, move |g, needs| {
            let gd = g.data();
            let da = needs[0].then(|| {
                let mut d = vec![T::zero(); av.numel()];
                for bi in 0..batch {
                    gemm_a_bt_acc(
                        &gd[bi * m * n..(bi + 1) * m * n],
                        &bv.data()[bi * k * n..(bi + 1) * k * n],
                        &mut d[bi * m * k..(bi + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::new(av.shape(), d).expect("shape")
            });
            let db = needs[1].then(|| {
                let mut d = vec![T::zero(); bv.numel()];
                for bi in 0..batch {
                    gemm_at_b_acc(
                        &av.data()[bi * m * k..(bi + 1) * m * k],
                        &gd[bi * m * n..(bi + 1) * m * n],
                        &mut d[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                }
                Tensor::new(bv.shape(), d).expect("shape")
            });
            vec![da, db]
        })
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose_last2(&self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (batch, r, c) = match *av.shape() {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            ref s => return Err(Error::shape("transpose_last2", format!("{s:?}"))),
        };
        let tr = |src: &[T]| {
            let mut d = vec![T::zero(); src.len()];
            for bi in 0..batch {
                let off = bi * r * c;
                for i in 0..r {
                    for j in 0..c {
                        d[off + j * r + i] = src[off + i * c + j];
                    }
                }
            }
            d
        };
        let mut shape = av.shape().to_vec();
        let nd = shape.len();
        shape.swap(nd - 2, nd - 1);
        let out = Tensor::new(&shape, tr(av.data()))?;
        let in_shape = av.shape().to_vec();
        self.custom("transpose_last2", &[a], out, move |g, _| {
            // transposing the (c, r) gradient back
            let gd = g.data();
            let mut d = vec![T::zero(); gd.len()];
            for bi in 0..batch {
                let off = bi * r * c;
                for j in 0..c {
                    for i in 0..r {
                        d[off + i * c + j] = gd[off + j * r + i];
                    }
                }
            }
            vec![Some(Tensor::new(&in_shape, d).expect("shape"))]
        })
    }

    /// Affine map over the last axis: `x[..., Cin]·w[Cin, Cout] + bias[Cout]`.
    pub fn linear(&self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let [cin, cout] = *wv.shape() else {
            return Err(Error::shape("linear", format!("weight {:?}", wv.shape())));
        };
        if xv.last_dim() != cin || xv.ndim() == 0 {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let bv = match bias {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [cout] {
                    return Err(Error::shape("linear", format!("bias {:?}", bv.shape())));
                }
                Some(bv)
            }
            None => None,
        };
        let rows = xv.numel() / cin;
        let mut out = vec![T::zero(); rows * cout];
        if let Some(bv) = &bv {
            for row in out.chunks_mut(cout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm_acc(xv.data(), wv.data(), &mut out, rows, cin, cout);
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = cout;
        let out = Tensor::new(&shape, out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        self.custom("linear", &parents, out, move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut d = vec![T::zero(); xv.numel()];
                gemm_a_bt_acc(gd, wv.data(), &mut d, rows, cin, cout);
                Tensor::new(xv.shape(), d).expect("shape")
            });
            let dw = needs[1].then(|| {
                let mut d = vec![T::zero(); wv.numel()];
                gemm_at_b_acc(xv.data(), gd, &mut d, rows, cin, cout);
                Tensor::new(wv.shape(), d).expect("shape")
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut d = vec![T::zero(); cout];
                    for row in gd.chunks(cout) {
                        for (o, &v) in d.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                    Tensor::from_vec(d)
                }));
            }
            grads
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let g = Graph::<f64>::new();
        let i3 = g.constant(Tensor::eye(3));
        let m = Tensor::from_fn(&[3, 3], |i| i as f64 * 0.5 - 1.0);
        let mv = g.constant(m.clone());
        let p = g.matmul(i3, mv).unwrap();
        assert_eq!(*g.value(p), m);
    }

    #[test]
    fn hand_checked_product() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap());
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0]);
        assert_eq!(g.shape(p), vec![2, 1]);
    }

    #[test]
    fn inner_dimension_mismatch() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn transpose_roundtrip() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
        let t = g.transpose_last2(a).unwrap();
        assert_eq!(g.shape(t), vec![2, 4, 3]);
        let tt = g.transpose_last2(t).unwrap();
        assert_eq!(*g.value(tt), *g.value(a));
    }
}
