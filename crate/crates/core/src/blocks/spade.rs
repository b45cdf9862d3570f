use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{zero_params, Conv2d};
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;

pub const NORM_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

/// Spatially adaptive denormalization:
/// `IN(x) ⊙ (1 + γ(cond)) + β(cond)` with `γ`, `β` 3×3 convolutions of the
/// conditioning map resampled to the size of `x`.
#[derive(Clone, Debug)]
pub struct Spade {
    pub gamma: Conv2d,
    pub beta: Conv2d,
    pub channels: usize,
    pub cond_channels: usize,
}

impl Spade {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        cond_channels: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let gamma = Conv2d::new(
            store,
            &format!("{prefix}.gamma"),
            cond_channels,
            channels,
            3,
            1,
            true,
            rng,
        )?;
        let beta = Conv2d::new(
            store,
            &format!("{prefix}.beta"),
            cond_channels,
            channels,
            3,
            1,
            true,
            rng,
        )?;
        if zero_init {
            zero_params(store, &gamma.params());
            zero_params(store, &beta.params());
        }
        Ok(Self {
            gamma,
            beta,
            channels,
            cond_channels,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var, cond: Var) -> Result<Var> {
        let [_, h, w, c] = g.value(x).dims4()?;
        let [_, _, _, cc] = g.value(cond).dims4()?;
        if c != self.channels || cc != self.cond_channels {
            return Err(Error::Config(format!(
                "SPADE built for {}/{} channels, got {c}/{cc}",
                self.channels, self.cond_channels
            )));
        }
        let cond = g.resize_nearest(cond, h, w)?;
        let normed = g.instance_norm(x, T::of(NORM_EPS))?;
        let gamma = self.gamma.forward(g, p, cond)?;
        let beta = self.beta.forward(g, p, cond)?;
        let scale = g.add_scalar(gamma, T::one())?;
        let y = g.mul(normed, scale)?;
        g.add(y, beta)
    }
}

/// Residual block with two SPADE-modulated 3×3 convolutions:
///
/// ```text
/// h = Conv₁(LReLU(SPADE₁(x, cond)))
/// out = shortcut(x) + Conv₂(LReLU(SPADE₂(h, cond)))
/// ```
///
/// The shortcut is the identity when widths match and a 1×1 convolution
/// otherwise.
#[derive(Clone, Debug)]
pub struct SpadeResBlock {
    pub spade1: Spade,
    pub conv1: Conv2d,
    pub spade2: Spade,
    pub conv2: Conv2d,
    pub shortcut: Option<Conv2d>,
}

impl SpadeResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        cond_channels: usize,
        zero_init: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let spade1 = Spade::new(store, &format!("{prefix}.spade1"), cin, cond_channels, zero_init, rng)?;
        let conv1 = Conv2d::new(store, &format!("{prefix}.conv1"), cin, cout, 3, 1, true, rng)?;
        let spade2 = Spade::new(store, &format!("{prefix}.spade2"), cout, cond_channels, zero_init, rng)?;
        let conv2 = Conv2d::new(store, &format!("{prefix}.conv2"), cout, cout, 3, 1, true, rng)?;
        let shortcut = if cin != cout {
            Some(Conv2d::new(
                store,
                &format!("{prefix}.shortcut"),
                cin,
                cout,
                1,
                1,
                false,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            spade1,
            conv1,
            spade2,
            conv2,
            shortcut,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var, cond: Var) -> Result<Var> {
        let slope = T::of(LEAKY_SLOPE);
        let h = self.spade1.forward(g, p, x, cond)?;
        let h = g.leaky_relu(h, slope)?;
        let h = self.conv1.forward(g, p, h)?;
        let h = self.spade2.forward(g, p, h, cond)?;
        let h = g.leaky_relu(h, slope)?;
        let h = self.conv2.forward(g, p, h)?;
        let short = match &self.shortcut {
            Some(s) => s.forward(g, p, x)?,
            None => x,
        };
        g.add(short, h)
    }
}
