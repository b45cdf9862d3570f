//! Paired data augmentation: random enlargement, cropping, horizontal
//! mirroring (shared by both images) and NIR-only contrast adjustment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Upper bound of the random enlargement factor (≥ 1).
    pub max_scale: f64,
    /// Contrast factor is drawn from `[1 − c, 1 + c]`.
    pub contrast: f64,
    pub mirror: bool,
    /// Output side; `None` keeps the input size.
    pub crop: Option<(usize, usize)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_scale: 1.25,
            contrast: 0.2,
            mirror: true,
            crop: None,
        }
    }
}

/// One concrete draw of augmentation parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Resized height and width before cropping.
    pub resized: (usize, usize),
    pub offset: (usize, usize),
    pub crop: (usize, usize),
    pub mirror: bool,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            resized: (h, w),
            offset: (0, 0),
            crop: (h, w),
            mirror: false,
            contrast: 1.0,
        }
    }

    pub fn sample(h: usize, w: usize, cfg: &AugmentConfig, seed: u64) -> Result<Self> {
        let (ch, cw) = cfg.crop.unwrap_or((h, w));
        if ch > h || cw > w || ch == 0 || cw == 0 {
            return Err(Error::Config(format!("crop {ch}x{cw} does not fit a {h}x{w} image")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = if cfg.max_scale > 1.0 {
            rng.random_range(1.0..=cfg.max_scale)
        } else {
            1.0
        };
        let resized = (((h as f64) * s).round() as usize, ((w as f64) * s).round() as usize);
        let offset = (
            rng.random_range(0..=resized.0 - ch),
            rng.random_range(0..=resized.1 - cw),
        );
        let mirror = cfg.mirror && rng.random_bool(0.5);
        let contrast = if cfg.contrast > 0.0 {
            rng.random_range(1.0 - cfg.contrast..=1.0 + cfg.contrast)
        } else {
            1.0
        };
        Ok(Self {
            resized,
            offset,
            crop: (ch, cw),
            mirror,
            contrast,
        })
    }
}

fn dims(img: &Tensor<f64>) -> Result<(usize, usize, usize)> {
    match img.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::shape("augment", format!("expected (H, W, C), got {s:?}"))),
    }
}

/// Nearest-neighbour resampling of an `(H,W,C)` image.
pub fn resize_nearest(img: &Tensor<f64>, oh: usize, ow: usize) -> Result<Tensor<f64>> {
    let (h, w, c) = dims(img)?;
    Ok(Tensor::from_fn(&[oh, ow, c], |i| {
        let (y, x, ch) = (i / (ow * c), (i / c) % ow, i % c);
        img.data()[((y * h / oh) * w + x * w / ow) * c + ch]
    }))
}

pub fn crop(img: &Tensor<f64>, y0: usize, x0: usize, ch: usize, cw: usize) -> Result<Tensor<f64>> {
    let (h, w, c) = dims(img)?;
    if y0 + ch > h || x0 + cw > w {
        return Err(Error::Config(format!("crop {ch}x{cw} at ({y0},{x0}) exceeds {h}x{w}")));
    }
    Ok(Tensor::from_fn(&[ch, cw, c], |i| {
        let (y, x, k) = (i / (cw * c), (i / c) % cw, i % c);
        img.data()[((y0 + y) * w + x0 + x) * c + k]
    }))
}

/// Left-right mirror.
pub fn mirror_horizontal(img: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (_, w, c) = dims(img)?;
    Ok(Tensor::from_fn(img.shape(), |i| {
        let (y, x, k) = (i / (w * c), (i / c) % w, i % c);
        img.data()[(y * w + (w - 1 - x)) * c + k]
    }))
}

/// `clamp((x − mean)·factor + mean)`.
pub fn adjust_contrast(img: &Tensor<f64>, factor: f64) -> Tensor<f64> {
    if factor == 1.0 {
        return img.clone();
    }
    let m = img.mean();
    img.map(|v| ((v - m) * factor + m).clamp(0.0, 1.0))
}

/// Applies one parameter draw to an aligned pair.
pub fn apply(nir: &Tensor<f64>, rgb: &Tensor<f64>, p: &AugmentParams) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let (h, w, _) = dims(nir)?;
    let (rh, rw, _) = dims(rgb)?;
    if (h, w) != (rh, rw) {
        return Err(Error::shape("augment", format!("NIR {h}x{w} vs RGB {rh}x{rw}")));
    }
    let geo = |img: &Tensor<f64>| -> Result<Tensor<f64>> {
        let mut x = if p.resized != (h, w) {
            resize_nearest(img, p.resized.0, p.resized.1)?
        } else {
            img.clone()
        };
        if p.crop != p.resized {
            x = crop(&x, p.offset.0, p.offset.1, p.crop.0, p.crop.1)?;
        }
        if p.mirror {
            x = mirror_horizontal(&x)?;
        }
        Ok(x)
    };
    Ok((adjust_contrast(&geo(nir)?, p.contrast), geo(rgb)?))
}

/// Samples parameters from `seed` and applies them.
pub fn augment(
    nir: &Tensor<f64>,
    rgb: &Tensor<f64>,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let (h, w, _) = dims(nir)?;
    apply(nir, rgb, &AugmentParams::sample(h, w, cfg, seed)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_pairs;

    #[test]
    fn identity_params_leave_pair_unchanged() {
        let p = &synthetic_pairs(1, 8, 0)[0];
        let (n, r) = apply(&p.nir, &p.rgb, &AugmentParams::identity(8, 8)).unwrap();
        assert_eq!((n, r), (p.nir.clone(), p.rgb.clone()));
        let off = AugmentConfig {
            max_scale: 1.0,
            contrast: 0.0,
            mirror: false,
            crop: None,
        };
        let (n, r) = augment(&p.nir, &p.rgb, 42, &off).unwrap();
        assert_eq!((n, r), (p.nir.clone(), p.rgb.clone()));
    }

    #[test]
    fn mirror_is_an_involution() {
        let p = &synthetic_pairs(1, 7, 1)[0];
        let twice = mirror_horizontal(&mirror_horizontal(&p.rgb).unwrap()).unwrap();
        assert_eq!(twice, p.rgb);
    }

    #[test]
    fn geometry_is_shared_by_both_images() {
        // Encode the pixel position in both images and check they agree
        // after any geometric draw.
        let (h, w) = (12, 10);
        let nir = Tensor::from_fn(&[h, w, 1], |i| i as f64);
        let rgb = Tensor::from_fn(&[h, w, 3], |i| (i / 3) as f64);
        let cfg = AugmentConfig {
            contrast: 0.0,
            crop: Some((8, 8)),
            ..Default::default()
        };
        for seed in 0..20 {
            let (n, r) = augment(&nir, &rgb, seed, &cfg).unwrap();
            assert_eq!(n.shape(), &[8, 8, 1]);
            for (i, &v) in n.data().iter().enumerate() {
                assert_eq!(r.data()[3 * i], v);
            }
        }
    }

    #[test]
    fn contrast_touches_nir_only_and_is_seeded() {
        let p = &synthetic_pairs(1, 8, 3)[0];
        let cfg = AugmentConfig {
            max_scale: 1.0,
            mirror: false,
            ..Default::default()
        };
        let (n, r) = augment(&p.nir, &p.rgb, 5, &cfg).unwrap();
        assert_eq!(r, p.rgb);
        assert_ne!(n, p.nir);
        assert_eq!(augment(&p.nir, &p.rgb, 5, &cfg).unwrap().0, n);
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let p = &synthetic_pairs(1, 8, 3)[0];
        let cfg = AugmentConfig {
            crop: Some((9, 8)),
            ..Default::default()
        };
        assert!(augment(&p.nir, &p.rgb, 0, &cfg).is_err());
    }
}
