//! 2-D cross-correlation on `(B,H,W,C)` maps.
//!
//! Dense kernels are laid out `(kh, kw, c_in, c_out)`, depthwise kernels
//! `(kh, kw, c)`. Kernel extents must be odd; "same"-style padding of
//! `k/2` pixels is applied for [`Padding::Zero`] and [`Padding::Replicate`].

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `k/2` pixels of zeros.
    Zero,
    /// `k/2` pixels copied from the nearest edge.
    Replicate,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

impl Padding {
    fn amount(self, k: usize) -> usize {
        match self {
            Padding::Valid => 0,
            _ => k / 2,
        }
    }
}

/// `floor((in + 2p - k) / stride) + 1`.
pub fn conv2d_output_size(input: usize, k: usize, stride: usize, padding: Padding) -> usize {
    let p = padding.amount(k);
    (input + 2 * p).saturating_sub(k) / stride + 1
}

#[derive(Clone, Copy)]
struct Geometry {
    b: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: Padding,
}

impl Geometry {
    fn new(op: &'static str, x: [usize; 4], kh: usize, kw: usize, stride: usize, padding: Padding) -> Result<Self> {
        if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
            return Err(Error::Config(format!("{op}: kernel extent {kh}x{kw} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config(format!("{op}: stride must be >= 1")));
        }
        let [b, h, w, _] = x;
        if padding == Padding::Valid && (h < kh || w < kw) {
            return Err(Error::shape(op, format!("input {h}x{w} smaller than kernel {kh}x{kw}")));
        }
        Ok(Self {
            b,
            h,
            w,
            kh,
            kw,
            oh: conv2d_output_size(h, kh, stride, padding),
            ow: conv2d_output_size(w, kw, stride, padding),
            stride,
            padding,
        })
    }

    /// Input pixel read by output `(oy, ox)` at tap `(ky, kx)`, if any.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let py = self.padding.amount(self.kh) as isize;
        let px = self.padding.amount(self.kw) as isize;
        let iy = (oy * self.stride + ky) as isize - py;
        let ix = (ox * self.stride + kx) as isize - px;
        let (h, w) = (self.h as isize, self.w as isize);
        match self.padding {
            Padding::Replicate => Some((iy.clamp(0, h - 1) as usize, ix.clamp(0, w - 1) as usize)),
            _ if iy < 0 || ix < 0 || iy >= h || ix >= w => None,
            _ => Some((iy as usize, ix as usize)),
        }
    }
}

/// Dense convolution forward pass on raw tensors.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (geo, cin, cout) = dense_geometry(x, w, bias, stride, padding)?;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); geo.b * geo.oh * geo.ow * cout];
    for bi in 0..geo.b {
        for oy in 0..geo.oh {
            for ox in 0..geo.ow {
                let o = ((bi * geo.oh + oy) * geo.ow + ox) * cout;
                let orow = &mut out[o..o + cout];
                if let Some(bv) = bias {
                    orow.copy_from_slice(bv.data());
                }
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let Some((iy, ix)) = geo.source(oy, ox, ky, kx) else {
                            continue;
                        };
                        let xi = ((bi * geo.h + iy) * geo.w + ix) * cin;
                        let wk = (ky * geo.kw + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xi + ci];
                            if xv == T::zero() {
                                continue;
                            }
                            let wrow = &wd[wk + ci * cout..wk + (ci + 1) * cout];
                            for (acc, &wv) in orow.iter_mut().zip(wrow) {
                                *acc = *acc + xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[geo.b, geo.oh, geo.ow, cout], out)
}

fn dense_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<(Geometry, usize, usize)> {
    let dims = x.dims4()?;
    let [kh, kw, cin, cout] = *w.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be (kh,kw,cin,cout), got {:?}", w.shape()),
        ));
    };
    if dims[3] != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, kernel expects {cin}", dims[3]),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?}", b.shape())));
        }
    }
    Ok((Geometry::new("conv2d", dims, kh, kw, stride, padding)?, cin, cout))
}

/// Depthwise convolution forward pass on raw tensors.
pub(crate) fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (geo, c) = depthwise_geometry(x, w, bias, stride, padding)?;
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![T::zero(); geo.b * geo.oh * geo.ow * c];
    for bi in 0..geo.b {
        for oy in 0..geo.oh {
            for ox in 0..geo.ow {
                let o = ((bi * geo.oh + oy) * geo.ow + ox) * c;
                let orow = &mut out[o..o + c];
                if let Some(bv) = bias {
                    orow.copy_from_slice(bv.data());
                }
                for ky in 0..geo.kh {
                    for kx in 0..geo.kw {
                        let Some((iy, ix)) = geo.source(oy, ox, ky, kx) else {
                            continue;
                        };
                        let xi = ((bi * geo.h + iy) * geo.w + ix) * c;
                        let wk = (ky * geo.kw + kx) * c;
                        for ((acc, &xv), &wv) in orow.iter_mut().zip(&xd[xi..xi + c]).zip(&wd[wk..wk + c]) {
                            *acc = *acc + xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[geo.b, geo.oh, geo.ow, c], out)
}

fn depthwise_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: Padding,
) -> Result<(Geometry, usize)> {
    let dims = x.dims4()?;
    let [kh, kw, c] = *w.shape() else {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("kernel must be (kh,kw,c), got {:?}", w.shape()),
        ));
    };
    if dims[3] != c {
        return Err(Error::shape(
            "depthwise_conv2d",
            format!("input has {} channels, kernel has {c}", dims[3]),
        ));
    }
    if let Some(b) = bias {
        if b.shape() != [c] {
            return Err(Error::shape("depthwise_conv2d", format!("bias {:?}", b.shape())));
        }
    }
    Ok((Geometry::new("depthwise_conv2d", dims, kh, kw, stride, padding)?, c))
}

impl<T: Scalar> Graph<T> {
    /// Dense 2-D convolution (cross-correlation).
    pub fn conv2d(&self, x: Var, kernel: Var, bias: Option<Var>, stride: usize, padding: Padding) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(kernel);
        let bv = bias.map(|b| self.value(b));
        let out = conv2d_forward(&xv, &wv, bv.as_deref(), stride, padding)?;
        let (geo, cin, cout) = dense_geometry(&xv, &wv, bv.as_deref(), stride, padding)?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        self.custom("conv2d", &parents, out, move |g, needs| {
            let gd = g.data();
            let xd = xv.data();
            let wd = wv.data();
            let mut dx = needs[0].then(|| vec![T::zero(); xv.numel()]);
            let mut dw = needs[1].then(|| vec![T::zero(); wv.numel()]);
            for bi in 0..geo.b {
                for oy in 0..geo.oh {
                    for ox in 0..geo.ow {
                        let o = ((bi * geo.oh + oy) * geo.ow + ox) * cout;
                        let grow = &gd[o..o + cout];
                        for ky in 0..geo.kh {
                            for kx in 0..geo.kw {
                                let Some((iy, ix)) = geo.source(oy, ox, ky, kx) else {
                                    continue;
                                };
                                let xi = ((bi * geo.h + iy) * geo.w + ix) * cin;
                                let wk = (ky * geo.kw + kx) * cin * cout;
                                for ci in 0..cin {
                                    let wrow = &wd[wk + ci * cout..wk + (ci + 1) * cout];
                                    if let Some(dx) = dx.as_mut() {
                                        let s: T = grow.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
                                        dx[xi + ci] = dx[xi + ci] + s;
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        let xv = xd[xi + ci];
                                        let drow = &mut dw[wk + ci * cout..wk + (ci + 1) * cout];
                                        for (d, &gv) in drow.iter_mut().zip(grow) {
                                            *d = *d + xv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(xv.shape(), d).expect("shape")),
                dw.map(|d| Tensor::new(wv.shape(), d).expect("shape")),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| sum_channels(gd, cout)));
            }
            grads
        })
    }

    /// Depthwise 2-D convolution: one kernel per channel.
    pub fn depthwise_conv2d(
        &self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(kernel);
        let bv = bias.map(|b| self.value(b));
        let out = depthwise_forward(&xv, &wv, bv.as_deref(), stride, padding)?;
        let (geo, c) = depthwise_geometry(&xv, &wv, bv.as_deref(), stride, padding)?;
        let mut parents = vec![x, kernel];
        parents.extend(bias);
        self.custom("depthwise_conv2d", &parents, out, move |g, needs| {
            let gd = g.data();
            let xd = xv.data();
            let wd = wv.data();
            let mut dx = needs[0].then(|| vec![T::zero(); xv.numel()]);
            let mut dw = needs[1].then(|| vec![T::zero(); wv.numel()]);
            for bi in 0..geo.b {
                for oy in 0..geo.oh {
                    for ox in 0..geo.ow {
                        let o = ((bi * geo.oh + oy) * geo.ow + ox) * c;
                        let grow = &gd[o..o + c];
                        for ky in 0..geo.kh {
                            for kx in 0..geo.kw {
                                let Some((iy, ix)) = geo.source(oy, ox, ky, kx) else {
                                    continue;
                                };
                                let xi = ((bi * geo.h + iy) * geo.w + ix) * c;
                                let wk = (ky * geo.kw + kx) * c;
                                for ci in 0..c {
                                    if let Some(dx) = dx.as_mut() {
                                        dx[xi + ci] = dx[xi + ci] + grow[ci] * wd[wk + ci];
                                    }
                                    if let Some(dw) = dw.as_mut() {
                                        dw[wk + ci] = dw[wk + ci] + grow[ci] * xd[xi + ci];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(xv.shape(), d).expect("shape")),
                dw.map(|d| Tensor::new(wv.shape(), d).expect("shape")),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| sum_channels(gd, c)));
            }
            grads
        })
    }
}

fn sum_channels<T: Scalar>(g: &[T], c: usize) -> Tensor<T> {
    let mut d = vec![T::zero(); c];
    for row in g.chunks(c) {
        for (o, &v) in d.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    Tensor::from_vec(d)
}
