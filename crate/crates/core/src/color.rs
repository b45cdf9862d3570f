//! Color-space conversion, Laplacian texture extraction and the shallow
//! feature extraction front end.
//!
//! Images are `(H, W, C)` or `(B, H, W, C)` tensors with values in `[0, 1]`.
//! HSV hue is normalized to `[0, 1)`.

use rand::Rng;

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `(.., 3)` RGB in `[0, 1]`.
pub type ImageRgb<T> = Tensor<T>;
/// `(.., 3)` HSV: hue in `[0, 1)`, saturation and value in `[0, 1]`.
pub type ImageHsv<T> = Tensor<T>;
/// `(.., 1)` near-infrared intensity in `[0, 1]`.
pub type ImageNir<T> = Tensor<T>;

/// Result of a conversion together with how many input values had to be
/// clamped into range.
#[derive(Clone, Debug)]
pub struct Converted<T> {
    pub image: Tensor<T>,
    pub clamped: usize,
}

fn clamp_unit<T: Scalar>(x: T, clamped: &mut usize) -> T {
    if x < T::zero() || x > T::one() || x.is_nan() {
        *clamped += 1;
        if x > T::one() {
            T::one()
        } else {
            T::zero()
        }
    } else {
        x
    }
}

fn check_three(op: &'static str, img: &Tensor<impl Scalar>) -> Result<()> {
    if img.ndim() < 2 || img.last_dim() != 3 {
        return Err(Error::shape(op, format!("expected 3 channels, got {:?}", img.shape())));
    }
    Ok(())
}

/// Hexcone conversion of one pixel.
pub fn rgb_to_hsv_pixel<T: Scalar>(r: T, g: T, b: T) -> [T; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > T::zero() { delta / max } else { T::zero() };
    if delta <= T::zero() {
        return [T::zero(), s, v];
    }
    let six = T::of(6.0);
    let sector = if max == r {
        let h = (g - b) / delta;
        if h < T::zero() {
            h + six
        } else {
            h
        }
    } else if max == g {
        (b - r) / delta + T::of(2.0)
    } else {
        (r - g) / delta + T::of(4.0)
    };
    let mut h = sector / six;
    if h >= T::one() {
        h = h - T::one();
    }
    [h, s, v]
}

pub fn hsv_to_rgb_pixel<T: Scalar>(h: T, s: T, v: T) -> [T; 3] {
    if s <= T::zero() {
        return [v, v, v];
    }
    let h6 = (h - h.floor()) * T::of(6.0);
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (T::one() - s);
    let q = v * (T::one() - s * f);
    let t = v * (T::one() - s * (T::one() - f));
    match i.to_usize().unwrap_or(0) % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

pub fn rgb_to_hsv_counted<T: Scalar>(img: &ImageRgb<T>) -> Result<Converted<T>> {
    check_three("rgb_to_hsv", img)?;
    let mut clamped = 0;
    let mut out = Vec::with_capacity(img.numel());
    for px in img.data().chunks(3) {
        let [r, g, b] = [px[0], px[1], px[2]].map(|x| clamp_unit(x, &mut clamped));
        out.extend(rgb_to_hsv_pixel(r, g, b));
    }
    if clamped > 0 {
        log::warn!("rgb_to_hsv clamped {clamped} out-of-range values");
    }
    Ok(Converted {
        image: Tensor::new(img.shape(), out)?,
        clamped,
    })
}

pub fn rgb_to_hsv<T: Scalar>(img: &ImageRgb<T>) -> Result<ImageHsv<T>> {
    Ok(rgb_to_hsv_counted(img)?.image)
}

pub fn hsv_to_rgb_counted<T: Scalar>(img: &ImageHsv<T>) -> Result<Converted<T>> {
    check_three("hsv_to_rgb", img)?;
    let mut clamped = 0;
    let mut out = Vec::with_capacity(img.numel());
    for px in img.data().chunks(3) {
        let h = if px[0] < T::zero() || px[0] >= T::one() {
            clamped += 1;
            px[0] - px[0].floor()
        } else {
            px[0]
        };
        let s = clamp_unit(px[1], &mut clamped);
        let v = clamp_unit(px[2], &mut clamped);
        out.extend(hsv_to_rgb_pixel(h, s, v));
    }
    if clamped > 0 {
        log::warn!("hsv_to_rgb clamped {clamped} out-of-range values");
    }
    Ok(Converted {
        image: Tensor::new(img.shape(), out)?,
        clamped,
    })
}

pub fn hsv_to_rgb<T: Scalar>(img: &ImageHsv<T>) -> Result<ImageRgb<T>> {
    Ok(hsv_to_rgb_counted(img)?.image)
}

/// Replicates a single-channel NIR image to three channels and converts it
/// to HSV, giving `(0, 0, nir)` per pixel.
pub fn to_hsv_from_nir<T: Scalar>(nir: &ImageNir<T>) -> Result<ImageHsv<T>> {
    if nir.ndim() < 2 || nir.last_dim() != 1 {
        return Err(Error::shape("to_hsv_from_nir", format!("{:?}", nir.shape())));
    }
    let mut shape = nir.shape().to_vec();
    *shape.last_mut().unwrap() = 3;
    let rgb = Tensor::new(&shape, nir.data().iter().flat_map(|&v| [v, v, v]).collect())?;
    rgb_to_hsv(&rgb)
}

/// 4-neighbour Laplacian `[[0,1,0],[1,-4,1],[0,1,0]]` as a `(3,3,1,1)` kernel.
pub fn laplacian_kernel<T: Scalar>() -> Tensor<T> {
    Tensor::new(
        &[3, 3, 1, 1],
        [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0].map(T::of).to_vec(),
    )
    .expect("static shape")
}

impl<T: Scalar> Graph<T> {
    /// Laplacian of a single-channel `(B,H,W,1)` map with replicate padding.
    pub fn laplacian_edge(&self, x: Var) -> Result<Var> {
        let c = self.value(x).dims4()?[3];
        if c != 1 {
            return Err(Error::shape("laplacian_edge", format!("expected 1 channel, got {c}")));
        }
        let k = self.constant(laplacian_kernel());
        self.conv2d(x, k, None, 1, Padding::Replicate)
    }

    /// Differentiable [`to_hsv_from_nir`] on a `(B,H,W,1)` map. Hue and
    /// saturation are identically zero for gray input, so only the value
    /// channel carries gradient.
    pub fn nir_to_hsv(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [b, h, w, _] = xv.dims4()?;
        let hsv = to_hsv_from_nir(&xv)?.reshape(&[b, h, w, 3])?;
        let shape = xv.shape().to_vec();
        self.custom("nir_to_hsv", &[x], hsv, move |g, _| {
            let d = g.data().chunks(3).map(|px| px[2]).collect();
            vec![Some(Tensor::new(&shape, d).expect("shape"))]
        })
    }
}

/// Shallow feature extraction outputs.
#[derive(Clone, Copy, Debug)]
pub struct SfeOutput {
    pub x_hsv: Var,
    pub x_edge: Var,
    pub x_tex: Var,
    pub x_nir_hsv: Var,
}

/// `X_tex = Conv(Edge(X))`, `X_nir-hsv = Conv(Concat(X, Edge(X), HSV(X)))`.
#[derive(Clone, Debug)]
pub struct Sfe {
    pub tex_conv: Conv2d,
    pub embed_conv: Conv2d,
    pub embed: usize,
    pub tex_channels: usize,
}

impl Sfe {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        embed: usize,
        tex_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            tex_conv: Conv2d::new(store, &format!("{prefix}.tex"), 1, tex_channels, 3, 1, true, rng)?,
            embed_conv: Conv2d::new(store, &format!("{prefix}.embed"), 5, embed, 3, 1, true, rng)?,
            embed,
            tex_channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, nir: Var) -> Result<SfeOutput> {
        let x_hsv = g.nir_to_hsv(nir)?;
        let x_edge = g.laplacian_edge(nir)?;
        let x_tex = self.tex_conv.forward(g, p, x_edge)?;
        let cat = g.concat_last(&[nir, x_edge, x_hsv])?;
        let x_nir_hsv = self.embed_conv.forward(g, p, cat)?;
        Ok(SfeOutput {
            x_hsv,
            x_edge,
            x_tex,
            x_nir_hsv,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn px(r: f64, g: f64, b: f64) -> [f64; 3] {
        rgb_to_hsv_pixel(r, g, b)
    }

    #[test]
    fn pure_red_and_gray() {
        assert_eq!(px(1.0, 0.0, 0.0), [0.0, 1.0, 1.0]);
        assert_eq!(px(0.5, 0.5, 0.5), [0.0, 0.0, 0.5]);
    }

    #[test]
    fn primary_and_secondary_hues() {
        let cases = [
            ((0.0, 1.0, 0.0), 1.0 / 3.0),
            ((0.0, 0.0, 1.0), 2.0 / 3.0),
            ((1.0, 1.0, 0.0), 1.0 / 6.0),
            ((1.0, 0.0, 1.0), 5.0 / 6.0),
        ];
        for ((r, g, b), hue) in cases {
            assert!((px(r, g, b)[0] - hue).abs() < 1e-15);
        }
    }

    #[test]
    fn lattice_roundtrip() {
        let n = 17;
        let vals: Vec<f64> = (0..n * n * n)
            .flat_map(|i| [i / (n * n), (i / n) % n, i % n].map(|k| k as f64 / (n - 1) as f64))
            .collect();
        let rgb = Tensor::new(&[n * n * n, 1, 3], vals).unwrap();
        let back = hsv_to_rgb(&rgb_to_hsv(&rgb).unwrap()).unwrap();
        assert!(back.max_abs_diff(&rgb).unwrap() < 1e-6);
    }

    #[test]
    fn out_of_range_input_is_clamped_and_counted() {
        let rgb = Tensor::new(&[1, 2, 3], vec![1.2, 0.0, -0.1, 0.3, 0.3, 0.3]).unwrap();
        let c = rgb_to_hsv_counted(&rgb).unwrap();
        assert_eq!(c.clamped, 2);
        assert_eq!(&c.image.data()[..3], &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn nir_embedding() {
        let nir = Tensor::full(&[2, 2, 1], 0.7);
        let hsv = to_hsv_from_nir(&nir).unwrap();
        for p in hsv.data().chunks(3) {
            assert_eq!(p, &[0.0, 0.0, 0.7]);
        }
        let hsv = to_hsv_from_nir(&Tensor::<f64>::zeros(&[3, 3, 1])).unwrap();
        assert!(hsv.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn value_channel_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nir = Tensor::<f64>::rand_uniform(&[5, 7, 1], 0.0, 1.0, &mut rng);
        let hsv = to_hsv_from_nir(&nir).unwrap();
        for (p, &v) in hsv.data().chunks(3).zip(nir.data()) {
            assert_eq!(p[2], v);
        }
    }

    fn lap(img: Tensor<f64>) -> Tensor<f64> {
        let g = Graph::new();
        let x = g.constant(img);
        let y = g.laplacian_edge(x).unwrap();
        (*g.value(y)).clone()
    }

    #[test]
    fn laplacian_of_constant_is_zero() {
        assert!(lap(Tensor::full(&[1, 5, 6, 1], 0.4)).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_of_ramp_vanishes_inside() {
        let (h, w) = (6, 7);
        let y = lap(Tensor::from_fn(&[1, h, w, 1], |i| {
            0.1 * (i / w) as f64 + 0.05 * (i % w) as f64 + 0.2
        }));
        for r in 1..h - 1 {
            for c in 1..w - 1 {
                assert!(y.at4(0, r, c, 0).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn laplacian_impulse_response() {
        let y = lap(Tensor::from_fn(&[1, 5, 5, 1], |i| if i == 12 { 1.0 } else { 0.0 }));
        let k = laplacian_kernel::<f64>();
        for dy in 0..3 {
            for dx in 0..3 {
                assert_eq!(y.at4(0, 1 + dy, 1 + dx, 0), k.data()[dy * 3 + dx]);
            }
        }
        assert_eq!(y.data().iter().filter(|&&v| v != 0.0).count(), 5);
    }

    #[test]
    fn sfe_constant_input_concat_and_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for embed in [8, 16] {
            let mut s = ParamStore::<f64>::new();
            let sfe = Sfe::new(&mut s, "sfe", embed, 4, &mut rng).unwrap();
            let g = Graph::new();
            let p = s.bind(&g, false);
            let nir = g.constant(Tensor::full(&[1, 5, 5, 1], 0.3));
            let out = sfe.forward(&g, &p, nir).unwrap();
            let cat = g.concat_last(&[nir, out.x_edge, out.x_hsv]).unwrap();
            let cv = g.value(cat);
            for r in 1..4 {
                for c in 1..4 {
                    let i = (r * 5 + c) * 5;
                    assert_eq!(&cv.data()[i..i + 5], &[0.3, 0.0, 0.0, 0.0, 0.3]);
                }
            }
            assert_eq!(g.shape(out.x_nir_hsv), vec![1, 5, 5, embed]);
            assert_eq!(g.shape(out.x_tex), vec![1, 5, 5, 4]);
        }
    }
}
