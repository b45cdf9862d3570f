use rand::Rng;

use crate::autodiff::{softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Positions attended from `(y, x)` on an `h × w` grid: the whole row
/// followed by the rest of the column (the position itself counted once).
pub fn criss_cross_footprint(h: usize, w: usize, y: usize, x: usize) -> Vec<usize> {
    (0..w)
        .map(|xx| y * w + xx)
        .chain((0..h).filter(|&yy| yy != y).map(|yy| yy * w + x))
        .collect()
}

/// Attention weights of every position over its footprint, for queries and
/// keys of shape `(B,H,W,D)`. Returns `B·H·W` rows of length `H+W-1`.
pub fn criss_cross_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Vec<Vec<T>>> {
    let [b, h, w, d] = q.dims4()?;
    if k.dims4()? != [b, h, w, d] {
        return Err(Error::shape(
            "criss_cross",
            format!("{:?} vs {:?}", q.shape(), k.shape()),
        ));
    }
    let scale = T::one() / T::of_usize(d).sqrt();
    let mut rows = Vec::with_capacity(b * h * w);
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let qi = ((bi * h + y) * w + x) * d;
                let scores: Vec<T> = criss_cross_footprint(h, w, y, x)
                    .into_iter()
                    .map(|p| {
                        let ki = (bi * h * w + p) * d;
                        (0..d).map(|c| q.data()[qi + c] * k.data()[ki + c]).sum::<T>() * scale
                    })
                    .collect();
                rows.push(softmax_rows(&scores, scores.len()));
            }
        }
    }
    Ok(rows)
}

impl<T: Scalar> Graph<T> {
    /// Criss-cross attention: each position of `q` attends over its row and
    /// column of `k` with scaled dot products and averages `v` accordingly.
    /// `q`, `k`: `(B,H,W,D)`; `v`: `(B,H,W,C)`.
    pub fn criss_cross_attention(&self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let [b, h, w, d] = qv.dims4()?;
        let [vb, vh, vw, c] = vv.dims4()?;
        if kv.dims4()? != [b, h, w, d] || (vb, vh, vw) != (b, h, w) {
            return Err(Error::shape(
                "criss_cross_attention",
                format!("q {:?} k {:?} v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let weights = criss_cross_weights(&qv, &kv)?;
        let hw = h * w;
        let mut out = vec![T::zero(); b * hw * c];
        for bi in 0..b {
            for pos in 0..hw {
                let row = &weights[bi * hw + pos];
                let o = (bi * hw + pos) * c;
                for (&a, p) in row.iter().zip(criss_cross_footprint(h, w, pos / w, pos % w)) {
                    let vi = (bi * hw + p) * c;
                    for ch in 0..c {
                        out[o + ch] = out[o + ch] + a * vv.data()[vi + ch];
                    }
                }
            }
        }
        let out = Tensor::new(&[b, h, w, c], out)?;
        let scale = T::one() / T::of_usize(d).sqrt();
        self.custom("criss_cross_attention", &[q, k, v], out, move |g, _| {
            let gd = g.data();
            let mut dq = vec![T::zero(); qv.numel()];
            let mut dk = vec![T::zero(); kv.numel()];
            let mut dv = vec![T::zero(); vv.numel()];
            for bi in 0..b {
                for pos in 0..hw {
                    let row = &weights[bi * hw + pos];
                    let fp = criss_cross_footprint(h, w, pos / w, pos % w);
                    let go = &gd[(bi * hw + pos) * c..(bi * hw + pos + 1) * c];
                    let da: Vec<T> = fp
                        .iter()
                        .map(|&p| {
                            let vi = (bi * hw + p) * c;
                            (0..c).map(|ch| go[ch] * vv.data()[vi + ch]).sum()
                        })
                        .collect();
                    let mean: T = row.iter().zip(&da).map(|(&a, &x)| a * x).sum();
                    let qi = (bi * hw + pos) * d;
                    for ((&a, &dai), &p) in row.iter().zip(&da).zip(&fp) {
                        let vi = (bi * hw + p) * c;
                        for ch in 0..c {
                            dv[vi + ch] = dv[vi + ch] + a * go[ch];
                        }
                        let ds = a * (dai - mean) * scale;
                        let ki = (bi * hw + p) * d;
                        for j in 0..d {
                            dq[qi + j] = dq[qi + j] + ds * kv.data()[ki + j];
                            dk[ki + j] = dk[ki + j] + ds * qv.data()[qi + j];
                        }
                    }
                }
            }
            vec![
                Some(Tensor::new(qv.shape(), dq).expect("shape")),
                Some(Tensor::new(kv.shape(), dk).expect("shape")),
                Some(Tensor::new(vv.shape(), dv).expect("shape")),
            ]
        })
    }
}

/// Two rounds of criss-cross attention with queries from the generator
/// features: the first takes keys/values from the texture-enriched color
/// map, the second from the first round's output. Adds the result to the
/// generator features.
#[derive(Clone, Debug)]
pub struct CrossAttentionFuse {
    pub q1: Linear,
    pub k1: Linear,
    pub v1: Linear,
    pub q2: Linear,
    pub k2: Linear,
    pub v2: Linear,
    pub gen_channels: usize,
    pub cond_channels: usize,
}

impl CrossAttentionFuse {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        gen_channels: usize,
        cond_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = (gen_channels / 2).max(2);
        let cg = gen_channels;
        let mut lin =
            |name: &str, cin: usize, cout: usize| Linear::new(store, &format!("{prefix}.{name}"), cin, cout, true, rng);
        Ok(Self {
            q1: lin("q1", cg, d)?,
            k1: lin("k1", cond_channels, d)?,
            v1: lin("v1", cond_channels, cg)?,
            q2: lin("q2", cg, d)?,
            k2: lin("k2", cg, d)?,
            v2: lin("v2", cg, cg)?,
            gen_channels,
            cond_channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, gen: Var, cond: Var) -> Result<Var> {
        let [_, h, w, cg] = g.value(gen).dims4()?;
        let [_, ch, cw, cc] = g.value(cond).dims4()?;
        if (h, w) != (ch, cw) {
            return Err(Error::Config(format!(
                "cross-attention needs equal spatial sizes, got {h}x{w} and {ch}x{cw}"
            )));
        }
        if cg != self.gen_channels || cc != self.cond_channels {
            return Err(Error::Config(format!(
                "cross-attention built for {}/{} channels, got {cg}/{cc}",
                self.gen_channels, self.cond_channels
            )));
        }
        let a1 = g.criss_cross_attention(
            self.q1.forward(g, p, gen)?,
            self.k1.forward(g, p, cond)?,
            self.v1.forward(g, p, cond)?,
        )?;
        let a2 = g.criss_cross_attention(
            self.q2.forward(g, p, gen)?,
            self.k2.forward(g, p, a1)?,
            self.v2.forward(g, p, a1)?,
        )?;
        g.add(gen, a2)
    }
}
