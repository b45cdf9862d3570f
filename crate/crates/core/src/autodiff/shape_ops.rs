//! Reshaping, channel slicing, gathers, border padding and resampling.

use std::rc::Rc;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let out = (*xv).clone().reshape(shape)?;
        let in_shape = xv.shape().to_vec();
        self.custom("reshape", &[x], out, move |g, _| {
            vec![Some(g.clone().reshape(&in_shape).expect("same numel"))]
        })
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&self, vars: &[Var]) -> Result<Var> {
        let vals: Vec<Rc<Tensor<T>>> = vars.iter().map(|&v| self.value(v)).collect();
        let first = vals
            .first()
            .ok_or_else(|| Error::Contract("concat of empty list".into()))?;
        let lead = &first.shape()[..first.ndim().saturating_sub(1)];
        for v in &vals {
            if v.ndim() == 0 || &v.shape()[..v.ndim() - 1] != lead {
                return Err(Error::shape(
                    "concat_last",
                    format!("{:?} vs {:?}", v.shape(), first.shape()),
                ));
            }
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (v, &w) in vals.iter().zip(&widths) {
                data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let out = Tensor::new(&shape, data)?;
        let shapes: Vec<Vec<usize>> = vals.iter().map(|v| v.shape().to_vec()).collect();
        self.custom("concat_last", vars, out, move |g, needs| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(widths.len());
            for ((&w, shape), &need) in widths.iter().zip(&shapes).zip(needs) {
                grads.push(need.then(|| {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    Tensor::new(shape, d).expect("shape")
                }));
                offset += w;
            }
            grads
        })
    }

    /// Channels `start..start+len` of the last axis.
    pub fn slice_last(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        if start + len > c || xv.ndim() == 0 {
            return Err(Error::shape("slice_last", format!("{start}..{} of {c}", start + len)));
        }
        let rows = xv.numel() / c;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&xv.data()[r * c + start..r * c + start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let in_shape = xv.shape().to_vec();
        let out = Tensor::new(&shape, data)?;
        self.custom("slice_last", &[x], out, move |g, _| {
            let mut d = vec![T::zero(); rows * c];
            for r in 0..rows {
                d[r * c + start..r * c + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            vec![Some(Tensor::new(&in_shape, d).expect("shape"))]
        })
    }

    /// Row gather: treating `x` as `(B, P, C)` (middle axes flattened),
    /// returns `(B, idx.len(), C)` with `out[b, i] = x[b, idx[i]]`.
    pub fn gather_rows(&self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(Error::shape("gather_rows", format!("{:?}", xv.shape())));
        }
        let b = xv.shape()[0];
        let c = xv.last_dim();
        let p = xv.numel() / (b * c).max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= p) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of range {p}")));
        }
        let l = idx.len();
        let mut data = Vec::with_capacity(b * l * c);
        for bi in 0..b {
            for &src in idx.iter() {
                let o = (bi * p + src) * c;
                data.extend_from_slice(&xv.data()[o..o + c]);
            }
        }
        let out = Tensor::new(&[b, l, c], data)?;
        let in_shape = xv.shape().to_vec();
        self.custom("gather_rows", &[x], out, move |g, _| {
            let mut d = vec![T::zero(); b * p * c];
            for bi in 0..b {
                for (i, &src) in idx.iter().enumerate() {
                    let o = (bi * p + src) * c;
                    let gi = (bi * l + i) * c;
                    for k in 0..c {
                        d[o + k] = d[o + k] + g.data()[gi + k];
                    }
                }
            }
            vec![Some(Tensor::new(&in_shape, d).expect("shape"))]
        })
    }

    /// Surrounds a `(B,H,W,C)` map with a one-pixel border. The border holds
    /// `token` (a length-C vector) when given, zeros otherwise.
    pub fn pad_border(&self, x: Var, token: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let [b, h, w, c] = xv.dims4()?;
        let tv = match token {
            Some(t) => {
                let tv = self.value(t);
                if tv.shape() != [c] {
                    return Err(Error::shape(
                        "pad_border",
                        format!("token {:?} for {c} channels", tv.shape()),
                    ));
                }
                tv.data().to_vec()
            }
            None => vec![T::zero(); c],
        };
        let (ph, pw) = (h + 2, w + 2);
        let mut data = Vec::with_capacity(b * ph * pw * c);
        for bi in 0..b {
            for y in 0..ph {
                for x_ in 0..pw {
                    if y == 0 || x_ == 0 || y == ph - 1 || x_ == pw - 1 {
                        data.extend_from_slice(&tv);
                    } else {
                        let o = ((bi * h + y - 1) * w + x_ - 1) * c;
                        data.extend_from_slice(&xv.data()[o..o + c]);
                    }
                }
            }
        }
        let out = Tensor::new(&[b, ph, pw, c], data)?;
        let in_shape = xv.shape().to_vec();
        let mut parents = vec![x];
        parents.extend(token);
        self.custom("pad_border", &parents, out, move |g, needs| {
            let gd = g.data();
            let mut dx = vec![T::zero(); b * h * w * c];
            let mut dt = vec![T::zero(); c];
            for bi in 0..b {
                for y in 0..ph {
                    for x_ in 0..pw {
                        let gi = ((bi * ph + y) * pw + x_) * c;
                        if y == 0 || x_ == 0 || y == ph - 1 || x_ == pw - 1 {
                            for k in 0..c {
                                dt[k] = dt[k] + gd[gi + k];
                            }
                        } else {
                            let o = ((bi * h + y - 1) * w + x_ - 1) * c;
                            dx[o..o + c].copy_from_slice(&gd[gi..gi + c]);
                        }
                    }
                }
            }
            let mut grads = vec![Some(Tensor::new(&in_shape, dx).expect("shape"))];
            if needs.len() == 2 {
                grads.push(Some(Tensor::from_vec(dt)));
            }
            grads
        })
    }

    /// Removes a one-pixel border from a `(B,H,W,C)` map.
    pub fn crop_border(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, ph, pw, c] = xv.dims4()?;
        if ph < 3 || pw < 3 {
            return Err(Error::shape("crop_border", format!("{ph}x{pw} too small")));
        }
        let (h, w) = (ph - 2, pw - 2);
        let mut data = Vec::with_capacity(b * h * w * c);
        for bi in 0..b {
            for y in 0..h {
                let o = ((bi * ph + y + 1) * pw + 1) * c;
                data.extend_from_slice(&xv.data()[o..o + w * c]);
            }
        }
        let out = Tensor::new(&[b, h, w, c], data)?;
        let in_shape = xv.shape().to_vec();
        self.custom("crop_border", &[x], out, move |g, _| {
            let mut d = vec![T::zero(); b * ph * pw * c];
            for bi in 0..b {
                for y in 0..h {
                    let o = ((bi * ph + y + 1) * pw + 1) * c;
                    let gi = (bi * h + y) * w * c;
                    d[o..o + w * c].copy_from_slice(&g.data()[gi..gi + w * c]);
                }
            }
            vec![Some(Tensor::new(&in_shape, d).expect("shape"))]
        })
    }

    /// Nearest-neighbour resampling of a `(B,H,W,C)` map to `oh × ow`.
    pub fn resize_nearest(&self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, h, w, c] = xv.dims4()?;
        if oh == 0 || ow == 0 {
            return Err(Error::shape("resize_nearest", "empty target"));
        }
        if (oh, ow) == (h, w) {
            return Ok(x);
        }
        let src: Rc<Vec<usize>> = Rc::new(
            (0..oh)
                .flat_map(|y| (0..ow).map(move |x_| (y * h / oh) * w + x_ * w / ow))
                .collect(),
        );
        let gathered = self.gather_rows(x, src)?;
        self.reshape(gathered, &[b, oh, ow, c])
    }

    /// Doubles height and width by pixel replication.
    pub fn upsample2(&self, x: Var) -> Result<Var> {
        let [_, h, w, _] = self.value(x).dims4()?;
        self.resize_nearest(x, 2 * h, 2 * w)
    }

    /// Average pooling over `(H/a_h) × (W/a_w)` regions producing an
    /// `a_h × a_w` grid; region bounds are `floor(i·H/a_h)..ceil((i+1)·H/a_h)`.
    pub fn adaptive_avg_pool(&self, x: Var, ah: usize, aw: usize) -> Result<Var> {
        let xv = self.value(x);
        let [b, h, w, c] = xv.dims4()?;
        if ah == 0 || aw == 0 || ah > h || aw > w {
            return Err(Error::shape(
                "adaptive_avg_pool",
                format!("cannot pool {h}x{w} to {ah}x{aw}"),
            ));
        }
        let bounds = |i: usize, n: usize, a: usize| (i * n / a, ((i + 1) * n).div_ceil(a));
        let mut cells = Vec::with_capacity(ah * aw);
        for i in 0..ah {
            for j in 0..aw {
                cells.push((bounds(i, h, ah), bounds(j, w, aw)));
            }
        }
        let mut data = vec![T::zero(); b * ah * aw * c];
        for bi in 0..b {
            for (k, &((y0, y1), (x0, x1))) in cells.iter().enumerate() {
                let inv = T::one() / T::of_usize((y1 - y0) * (x1 - x0));
                let o = (bi * ah * aw + k) * c;
                for y in y0..y1 {
                    for x_ in x0..x1 {
                        let s = ((bi * h + y) * w + x_) * c;
                        for ci in 0..c {
                            data[o + ci] = data[o + ci] + xv.data()[s + ci] * inv;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[b, ah, aw, c], data)?;
        let in_shape = xv.shape().to_vec();
        self.custom("adaptive_avg_pool", &[x], out, move |g, _| {
            let mut d = vec![T::zero(); b * h * w * c];
            for bi in 0..b {
                for (k, &((y0, y1), (x0, x1))) in cells.iter().enumerate() {
                    let inv = T::one() / T::of_usize((y1 - y0) * (x1 - x0));
                    let o = (bi * ah * aw + k) * c;
                    for y in y0..y1 {
                        for x_ in x0..x1 {
                            let s = ((bi * h + y) * w + x_) * c;
                            for ci in 0..c {
                                d[s + ci] = d[s + ci] + g.data()[o + ci] * inv;
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&in_shape, d).expect("shape"))]
        })
    }

    /// 2×2 average pooling (odd trailing rows/columns are dropped).
    pub fn avg_pool2(&self, x: Var) -> Result<Var> {
        let [_, h, w, _] = self.value(x).dims4()?;
        if h < 2 || w < 2 {
            return Err(Error::shape("avg_pool2", format!("{h}x{w} too small")));
        }
        let (oh, ow) = (h / 2, w / 2);
        if h % 2 == 0 && w % 2 == 0 {
            return self.adaptive_avg_pool(x, oh, ow);
        }
        let xv = self.value(x);
        let [b, _, _, c] = xv.dims4()?;
        let idx: Rc<Vec<usize>> = Rc::new(
            (0..2 * oh)
                .flat_map(|y| (0..2 * ow).map(move |x_| y * w + x_))
                .collect(),
        );
        let cropped = self.gather_rows(x, idx)?;
        let cropped = self.reshape(cropped, &[b, 2 * oh, 2 * ow, c])?;
        self.adaptive_avg_pool(cropped, oh, ow)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pad_then_crop_is_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3, 4, 2], |i| i as f64));
        let t = g.constant(Tensor::from_vec(vec![-1.0, -2.0]));
        let p = g.pad_border(x, Some(t)).unwrap();
        assert_eq!(g.shape(p), vec![2, 5, 6, 2]);
        let c = g.crop_border(p).unwrap();
        assert_eq!(*g.value(c), *g.value(x));
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_fn(&[2, 2, 1], |i| i as f64));
        let b = g.constant(Tensor::from_fn(&[2, 2, 3], |i| 100.0 + i as f64));
        let cat = g.concat_last(&[a, b]).unwrap();
        assert_eq!(g.shape(cat), vec![2, 2, 4]);
        let back = g.slice_last(cat, 1, 3).unwrap();
        assert_eq!(*g.value(back), *g.value(b));
    }

    #[test]
    fn upsample_then_pool_is_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| (i * i) as f64));
        let u = g.upsample2(x).unwrap();
        assert_eq!(g.shape(u), vec![1, 6, 4, 2]);
        let p = g.avg_pool2(u).unwrap();
        assert_eq!(*g.value(p), *g.value(x));
    }

    #[test]
    fn adaptive_pool_to_full_size_is_identity() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[1, 3, 3, 2], |i| i as f64));
        let p = g.adaptive_avg_pool(x, 3, 3).unwrap();
        assert_eq!(*g.value(p), *g.value(x));
    }
}
