//! Parameterized layers shared by the blocks and networks.

use rand::Rng;

use crate::autodiff::{Graph, Padding, Var};
use crate::error::Result;
use crate::params::{fan_in_uniform, Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Affine map over the channel axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{prefix}.w"), fan_in_uniform(&[cin, cout], cin, rng))?;
        let b = if bias {
            Some(store.add(format!("{prefix}.b"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), self.b.map(|b| p.var(b)))
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Dense 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: Padding,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(
            format!("{prefix}.w"),
            fan_in_uniform(&[k, k, cin, cout], k * k * cin, rng),
        )?;
        let b = if bias {
            Some(store.add(format!("{prefix}.b"), Tensor::zeros(&[cout]))?)
        } else {
            None
        };
        Ok(Self {
            w,
            b,
            stride,
            padding: Padding::Zero,
        })
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.w).chain(self.b).collect()
    }
}

/// Depthwise convolution, one kernel per channel.
#[derive(Clone, Debug)]
pub struct DwConv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl DwConv2d {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{prefix}.w"), fan_in_uniform(&[k, k, c], k * k, rng))?;
        let b = Some(store.add(format!("{prefix}.b"), Tensor::zeros(&[c]))?);
        Ok(Self { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.depthwise_conv2d(x, p.var(self.w), self.b.map(|b| p.var(b)), 1, Padding::Zero)
    }
}

/// Layer normalization over channels with learnable affine.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[c]))?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[c]))?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), T::of(LAYER_NORM_EPS))
    }
}

/// `Linear(C → 2C) → SiLU → Linear(2C → C)`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const MLP_RATIO: usize = 2;

impl Mlp {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), c, MLP_RATIO * c, true, rng)?,
            fc2: Linear::new(store, &format!("{prefix}.fc2"), MLP_RATIO * c, c, true, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.silu(h)?;
        self.fc2.forward(g, p, h)
    }
}

/// Sets every listed parameter to zero.
pub fn zero_params<T: Scalar>(store: &mut ParamStore<T>, ids: &[ParamId]) {
    for &id in ids {
        store.get_mut(id).data_mut().fill(T::zero());
    }
}
