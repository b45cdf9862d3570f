//! Training objectives: pixel MSE, the feature-consistency loss built on a
//! frozen encoder and MS-SSIM, the adversarial pair and their weighted sum.

use crate::autodiff::{Graph, Padding, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Clamp applied inside every adversarial logarithm.
pub const LOG_EPS: f64 = 1e-7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Per-scale exponents of five-scale MS-SSIM; shorter pyramids use a
/// renormalized prefix.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_fea: f64,
    pub lambda_adv: f64,
    /// Feature MSE weight.
    pub alpha: f64,
    /// MS-SSIM weight.
    pub beta: f64,
    /// Cosine weight.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mse: 15.0,
            lambda_fea: 15.0,
            lambda_adv: 1.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_mse,
            self.lambda_fea,
            self.lambda_adv,
            self.alpha,
            self.beta,
            self.gamma,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )));
        }
        Ok(())
    }
}

fn same_shape<T: Scalar>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn mse_loss<T: Scalar>(g: &Graph<T>, x: Var, y: Var) -> Result<Var> {
    same_shape(g, "mse_loss", x, y)?;
    let d = g.sub(x, y)?;
    let sq = g.square(d)?;
    g.mean_all(sq)
}

/// Normalized 1-D Gaussian of odd length.
pub fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Window geometry for SSIM and MS-SSIM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimWindow {
    pub size: usize,
    pub sigma: f64,
}

impl Default for SsimWindow {
    fn default() -> Self {
        Self { size: 11, sigma: 1.5 }
    }
}

impl SsimWindow {
    /// `(k, k, C)` depthwise kernel.
    fn kernel<T: Scalar>(&self, channels: usize) -> Tensor<T> {
        let g = gaussian_1d(self.size, self.sigma);
        let k = self.size;
        Tensor::from_fn(&[k, k, channels], |i| {
            let (y, x) = (i / (k * channels), (i / channels) % k);
            T::of(g[y] * g[x])
        })
    }
}

/// Per-pixel SSIM and contrast-structure maps over the valid window
/// positions, for `(B,H,W,C)` images with unit dynamic range.
pub fn ssim_maps<T: Scalar>(g: &Graph<T>, x: Var, y: Var, window: SsimWindow) -> Result<(Var, Var)> {
    same_shape(g, "ssim", x, y)?;
    let [_, h, w, c] = g.value(x).dims4()?;
    if window.size.is_multiple_of(2) || h < window.size || w < window.size {
        return Err(Error::shape(
            "ssim",
            format!("{h}x{w} image smaller than the {}-pixel window", window.size),
        ));
    }
    let k = g.constant(window.kernel(c));
    let blur = |v: Var| g.depthwise_conv2d(v, k, None, 1, Padding::Valid);
    let c1 = T::of(SSIM_K1 * SSIM_K1);
    let c2 = T::of(SSIM_K2 * SSIM_K2);
    let mx = blur(x)?;
    let my = blur(y)?;
    let mxx = g.square(mx)?;
    let myy = g.square(my)?;
    let mxy = g.mul(mx, my)?;
    let sxx = g.sub(blur(g.square(x)?)?, mxx)?;
    let syy = g.sub(blur(g.square(y)?)?, myy)?;
    let sxy = g.sub(blur(g.mul(x, y)?)?, mxy)?;

    let cs_num = g.add_scalar(g.mul_scalar(sxy, T::of(2.0))?, c2)?;
    let cs_den = g.add_scalar(g.add(sxx, syy)?, c2)?;
    let cs = g.div(cs_num, cs_den)?;
    let l_num = g.add_scalar(g.mul_scalar(mxy, T::of(2.0))?, c1)?;
    let l_den = g.add_scalar(g.add(mxx, myy)?, c1)?;
    let l = g.div(l_num, l_den)?;
    Ok((g.mul(l, cs)?, cs))
}

/// Mean single-scale SSIM, averaged over channels.
pub fn ssim<T: Scalar>(g: &Graph<T>, x: Var, y: Var, window: SsimWindow) -> Result<Var> {
    let (s, _) = ssim_maps(g, x, y, window)?;
    g.mean_all(s)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsSsimConfig {
    pub scales: usize,
    pub window: SsimWindow,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            window: SsimWindow::default(),
        }
    }
}

impl MsSsimConfig {
    /// Smallest side the configuration accepts.
    pub fn min_side(&self) -> usize {
        (1 << (self.scales - 1)) * self.window.size
    }

    /// Largest configuration not exceeding the default that fits an `h × w`
    /// image: scales are dropped first, then the window shrinks to the
    /// largest odd size that fits, with `σ` scaled alongside.
    pub fn fit(h: usize, w: usize) -> Result<Self> {
        let side = h.min(w);
        if side == 0 {
            return Err(Error::shape("ms_ssim", "empty image"));
        }
        let mut cfg = Self::default();
        while cfg.scales > 1 && side < cfg.min_side() {
            cfg.scales -= 1;
        }
        if side < cfg.window.size {
            let size = if side % 2 == 1 { side } else { side - 1 };
            cfg.window = SsimWindow {
                size,
                sigma: 1.5 * size as f64 / 11.0,
            };
        }
        Ok(cfg)
    }

    pub fn weights(&self) -> Vec<f64> {
        let w = &MS_SSIM_WEIGHTS[..self.scales];
        let s: f64 = w.iter().sum();
        w.iter().map(|v| v / s).collect()
    }
}

/// Multi-scale SSIM in `[0, 1]`. Contrast-structure means at the finer
/// scales and the full SSIM mean at the coarsest scale are raised to the
/// per-scale weights and multiplied; negative means are clamped to a small
/// positive floor first.
pub fn ms_ssim<T: Scalar>(g: &Graph<T>, x: Var, y: Var, cfg: &MsSsimConfig) -> Result<Var> {
    same_shape(g, "ms_ssim", x, y)?;
    let [_, h, w, _] = g.value(x).dims4()?;
    if cfg.scales == 0 || cfg.scales > MS_SSIM_WEIGHTS.len() {
        return Err(Error::Config(format!(
            "MS-SSIM supports 1..=5 scales, got {}",
            cfg.scales
        )));
    }
    if h.min(w) < cfg.min_side() {
        return Err(Error::shape(
            "ms_ssim",
            format!(
                "{h}x{w} image too small for {} scales with a {}-pixel window (need {})",
                cfg.scales,
                cfg.window.size,
                cfg.min_side()
            ),
        ));
    }
    let floor = T::of(1e-8);
    let weights = cfg.weights();
    let (mut xs, mut ys) = (x, y);
    let mut factors = Vec::with_capacity(cfg.scales);
    for (j, &wj) in weights.iter().enumerate() {
        let (s, cs) = ssim_maps(g, xs, ys, cfg.window)?;
        let last = j + 1 == cfg.scales;
        let m = g.mean_all(if last { s } else { cs })?;
        let m = g.clamp_min(m, floor)?;
        factors.push(g.powf(m, T::of(wj))?);
        if !last {
            xs = g.avg_pool2(xs)?;
            ys = g.avg_pool2(ys)?;
        }
    }
    let mut out = factors[0];
    for &f in &factors[1..] {
        out = g.mul(out, f)?;
    }
    g.clamp(out, T::zero(), T::one())
}

/// Mean over the batch of the cosine similarity between flattened
/// per-sample features.
pub fn cosine_similarity<T: Scalar>(g: &Graph<T>, x: Var, y: Var) -> Result<Var> {
    same_shape(g, "cosine_similarity", x, y)?;
    let shape = g.shape(x);
    let b = shape[0];
    let n: usize = shape[1..].iter().product();
    let xf = g.reshape(x, &[b, n])?;
    let yf = g.reshape(y, &[b, n])?;
    let dot = g.sum_last(g.mul(xf, yf)?)?;
    let nx = g.sum_last(g.square(xf)?)?;
    let ny = g.sum_last(g.square(yf)?)?;
    let den = g.sqrt(g.clamp_min(g.mul(nx, ny)?, T::of(1e-24))?)?;
    g.mean_all(g.div(dot, den)?)
}

/// `α·MSE(X,Y) + γ·(1 − cos(X,Y)) + β·(1 − MS-SSIM(x,y))` where `X`, `Y`
/// are encoder embeddings of the images `x`, `y`.
pub fn feature_consistency_loss<T: Scalar>(
    g: &Graph<T>,
    x_img: Var,
    y_img: Var,
    encode: impl Fn(Var) -> Result<Var>,
    weights: &LossWeights,
    ms: &MsSsimConfig,
) -> Result<Var> {
    same_shape(g, "feature_consistency_loss", x_img, y_img)?;
    let fx = encode(x_img)?;
    let fy = encode(y_img)?;
    let mse = mse_loss(g, fx, fy)?;
    let cos = g.rsub_scalar(T::one(), cosine_similarity(g, fx, fy)?)?;
    let ssim = g.rsub_scalar(T::one(), ms_ssim(g, x_img, y_img, ms)?)?;
    let terms = [
        g.mul_scalar(mse, T::of(weights.alpha))?,
        g.mul_scalar(cos, T::of(weights.gamma))?,
        g.mul_scalar(ssim, T::of(weights.beta))?,
    ];
    g.add_n(&terms)
}

fn neg_mean_log<T: Scalar>(g: &Graph<T>, p: Var) -> Result<Var> {
    let p = g.clamp(p, T::of(LOG_EPS), T::one())?;
    let l = g.mean_all(g.ln(p)?)?;
    g.neg(l)
}

/// Critic and generator losses from patch logits:
/// `loss_d = −mean log σ(real) − mean log(1 − σ(fake))`,
/// `loss_g = −mean log σ(fake)`.
pub fn adversarial_losses<T: Scalar>(g: &Graph<T>, real: Var, fake: Var) -> Result<(Var, Var)> {
    let pr = g.sigmoid(real)?;
    let pf = g.sigmoid(fake)?;
    let d = g.add(neg_mean_log(g, pr)?, neg_mean_log(g, g.rsub_scalar(T::one(), pf)?)?)?;
    let gen = neg_mean_log(g, pf)?;
    Ok((d, gen))
}

/// Generator half of [`adversarial_losses`]: `−mean log σ(fake)`.
pub fn adversarial_generator_loss<T: Scalar>(g: &Graph<T>, fake: Var) -> Result<Var> {
    let pf = g.sigmoid(fake)?;
    neg_mean_log(g, pf)
}

/// Generator loss components before weighting.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    /// Pixel MSE of the fused RGB output plus the HSV supervision MSE.
    pub mse: Var,
    pub fea: Var,
    /// `None` when the adversarial weight is zero.
    pub adv: Option<Var>,
}

/// `λ_mse·L_mse + λ_fea·L_fea + λ_adv·L_adv`.
pub fn total_loss<T: Scalar>(g: &Graph<T>, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let mut parts = vec![
        g.mul_scalar(terms.mse, T::of(w.lambda_mse))?,
        g.mul_scalar(terms.fea, T::of(w.lambda_fea))?,
    ];
    if let Some(adv) = terms.adv {
        parts.push(g.mul_scalar(adv, T::of(w.lambda_adv))?);
    }
    g.add_n(&parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn eval(f: impl FnOnce(&Graph<f64>) -> Var) -> f64 {
        let g = Graph::new();
        let v = f(&g);
        g.value(v).item().unwrap()
    }

    #[test]
    fn mse_cases() {
        let ones = Tensor::<f64>::ones(&[2, 3]);
        let zeros = Tensor::<f64>::zeros(&[2, 3]);
        assert_eq!(
            eval(|g| mse_loss(g, g.constant(ones.clone()), g.constant(ones.clone())).unwrap()),
            0.0
        );
        assert_eq!(
            eval(|g| mse_loss(g, g.constant(ones.clone()), g.constant(zeros.clone())).unwrap()),
            1.0
        );
        let a = Tensor::<f64>::randn(&[4, 5, 3], 1.0, &mut rng(1));
        let b = Tensor::<f64>::randn(&[4, 5, 3], 1.0, &mut rng(2));
        let mut naive = 0.0;
        for i in 0..a.numel() {
            naive += (a.data()[i] - b.data()[i]).powi(2);
        }
        naive /= a.numel() as f64;
        let got = eval(|g| mse_loss(g, g.constant(a.clone()), g.constant(b.clone())).unwrap());
        assert!((got - naive).abs() < 1e-12);
        let g = Graph::<f64>::new();
        assert!(mse_loss(&g, g.constant(ones), g.constant(Tensor::zeros(&[3, 2]))).is_err());
    }

    fn img(seed: u64, side: usize) -> Tensor<f64> {
        Tensor::rand_uniform(&[1, side, side, 3], 0.0, 1.0, &mut rng(seed))
    }

    #[test]
    fn ms_ssim_identity_negative_and_symmetry() {
        let cfg = MsSsimConfig::default();
        let a = img(3, 44);
        let b = img(4, 44);
        assert_eq!(
            eval(|g| ms_ssim(g, g.constant(a.clone()), g.constant(a.clone()), &cfg).unwrap()),
            1.0
        );
        let neg = a.map(|v| 1.0 - v);
        let v = eval(|g| ms_ssim(g, g.constant(a.clone()), g.constant(neg), &cfg).unwrap());
        assert!(v < 0.5, "{v}");
        let ab = eval(|g| ms_ssim(g, g.constant(a.clone()), g.constant(b.clone()), &cfg).unwrap());
        let ba = eval(|g| ms_ssim(g, g.constant(b.clone()), g.constant(a.clone()), &cfg).unwrap());
        assert!((ab - ba).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn ms_ssim_single_scale_matches_direct_formula() {
        // Direct per-window evaluation on a small instance.
        let cfg = MsSsimConfig {
            scales: 1,
            window: SsimWindow { size: 3, sigma: 0.8 },
        };
        let side = 5;
        let a = Tensor::<f64>::rand_uniform(&[1, side, side, 1], 0.0, 1.0, &mut rng(10));
        let b = Tensor::<f64>::rand_uniform(&[1, side, side, 1], 0.0, 1.0, &mut rng(11));
        let k1 = gaussian_1d(3, 0.8);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        for y in 0..side - 2 {
            for x in 0..side - 2 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..3 {
                    for dx in 0..3 {
                        let w = k1[dy] * k1[dx];
                        let (p, q) = (a.at4(0, y + dy, x + dx, 0), b.at4(0, y + dy, x + dx, 0));
                        mx += w * p;
                        my += w * q;
                        xx += w * p * p;
                        yy += w * q * q;
                        xy += w * p * q;
                    }
                }
                let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            }
        }
        let direct = total / 9.0;
        let got = eval(|g| ms_ssim(g, g.constant(a.clone()), g.constant(b.clone()), &cfg).unwrap());
        assert!((got - direct.max(1e-8)).abs() < 1e-12, "{got} vs {direct}");
    }

    #[test]
    fn ms_ssim_rejects_small_images() {
        let g = Graph::<f64>::new();
        let a = g.constant(img(1, 40));
        assert!(matches!(
            ms_ssim(&g, a, a, &MsSsimConfig::default()),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn fitted_config() {
        assert_eq!(MsSsimConfig::fit(64, 64).unwrap(), MsSsimConfig::default());
        let c = MsSsimConfig::fit(16, 16).unwrap();
        assert_eq!((c.scales, c.window.size), (1, 11));
        let c = MsSsimConfig::fit(32, 24).unwrap();
        assert_eq!((c.scales, c.window.size), (2, 11));
        let c = MsSsimConfig::fit(6, 6).unwrap();
        assert_eq!((c.scales, c.window.size), (1, 5));
        assert!(c.min_side() <= 6);
        let w = MsSsimConfig::default().weights();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn feature_loss_identity_and_orthogonal() {
        let w = LossWeights::default();
        let a = img(5, 16);
        let ms = MsSsimConfig::fit(16, 16).unwrap();
        let v = eval(|g| {
            let x = g.constant(a.clone());
            feature_consistency_loss(g, x, x, |v| g.mul_scalar(v, 2.0), &w, &ms).unwrap()
        });
        assert_eq!(v, 0.0);

        let x = Tensor::new(&[1, 1, 1, 2], vec![1.0, 0.0]).unwrap();
        let y = Tensor::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        let cos = eval(|g| cosine_similarity(g, g.constant(x), g.constant(y)).unwrap());
        assert_eq!(cos, 0.0);
    }

    #[test]
    fn adversarial_closed_forms() {
        let zeros = Tensor::<f64>::zeros(&[1, 2, 2, 1]);
        let (d, gl) = {
            let g = Graph::new();
            let (d, l) = adversarial_losses(&g, g.constant(zeros.clone()), g.constant(zeros.clone())).unwrap();
            (g.value(d).item().unwrap(), g.value(l).item().unwrap())
        };
        assert!((d + 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((gl + 0.5f64.ln()).abs() < 1e-12);

        let g = Graph::new();
        let (d, _) = adversarial_losses(
            &g,
            g.constant(Tensor::full(&[1, 2, 2, 1], 40.0)),
            g.constant(Tensor::full(&[1, 2, 2, 1], -40.0)),
        )
        .unwrap();
        assert!(g.value(d).item().unwrap() < 1e-6);

        let g = Graph::new();
        let fake = g.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let (_, l) = adversarial_losses(&g, g.constant(zeros.reshape(&[4]).unwrap()), fake).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(fake).unwrap().data().iter().all(|&v| v < 0.0));
    }

    #[test]
    fn total_loss_weighting() {
        let w = LossWeights::default();
        let v = eval(|g| {
            let t = LossTerms {
                mse: g.scalar(0.3),
                fea: g.scalar(0.7),
                adv: Some(g.scalar(1.9)),
            };
            total_loss(g, &t, &w).unwrap()
        });
        assert!((v - (15.0 * 0.3 + 15.0 * 0.7 + 1.9)).abs() < 1e-12);
        let z = eval(|g| {
            let t = LossTerms {
                mse: g.scalar(0.0),
                fea: g.scalar(0.0),
                adv: Some(g.scalar(0.0)),
            };
            total_loss(g, &t, &w).unwrap()
        });
        assert_eq!(z, 0.0);
        let mut neg = w;
        neg.lambda_adv = -1.0;
        assert!(neg.validate().is_err());
    }
}
