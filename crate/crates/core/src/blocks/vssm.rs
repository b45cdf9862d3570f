use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{DwConv2d, LayerNorm, Linear};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::scan2d::Scan2d;
use crate::ssm::ScanKernel;
use crate::tensor::Tensor;

/// Token mixer inside the state-space branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerKind {
    /// Four-direction selective scan.
    Scan,
    /// Depthwise-conv residual chain with a comparable parameter count.
    Conv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VssmConfig {
    pub channels: usize,
    pub state_size: usize,
    /// Inner width is `expand * channels`.
    pub expand: usize,
    pub mixer: MixerKind,
    pub padding_tokens: bool,
}

impl VssmConfig {
    pub fn new(channels: usize, state_size: usize) -> Self {
        Self {
            channels,
            state_size,
            expand: 2,
            mixer: MixerKind::Scan,
            padding_tokens: true,
        }
    }

    pub fn inner(&self) -> usize {
        self.expand * self.channels
    }
}

/// Residual stage `x + W₂ SiLU(W₁ SiLU(DWConv(x)))`.
#[derive(Clone, Debug)]
pub struct ConvMixerStage {
    pub dw: DwConv2d,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub const CONV_MIXER_STAGES: usize = 4;

#[derive(Clone, Debug)]
pub enum Mixer {
    Scan(Scan2d),
    Conv(Vec<ConvMixerStage>),
}

impl Mixer {
    fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Mixer::Scan(s) => s.forward(g, p, x),
            Mixer::Conv(stages) => {
                let mut h = x;
                for st in stages {
                    let t = st.dw.forward(g, p, h)?;
                    let t = g.silu(t)?;
                    let t = st.fc1.forward(g, p, t)?;
                    let t = g.silu(t)?;
                    let t = st.fc2.forward(g, p, t)?;
                    h = g.add(h, t)?;
                }
                Ok(h)
            }
        }
    }
}

/// Vision state-space module:
///
/// ```text
/// X₁ = LN(Crop(Scan2d(Pad(SiLU(DWConv(Linear(X)))))))
/// X₂ = SiLU(Linear(X))
/// out = Linear(X₁ ⊙ X₂) + s ⊙ X
/// ```
#[derive(Clone, Debug)]
pub struct Vssm {
    pub cfg: VssmConfig,
    pub lin_in: Linear,
    pub dw: DwConv2d,
    pub mixer: Mixer,
    pub norm: LayerNorm,
    pub lin_gate: Linear,
    pub lin_out: Linear,
    pub skip: ParamId,
}

impl Vssm {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &VssmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (c, e) = (cfg.channels, cfg.inner());
        if c == 0 || cfg.expand == 0 || cfg.state_size == 0 {
            return Err(Error::Config(format!("invalid state-space module config {cfg:?}")));
        }
        let lin_in = Linear::new(store, &format!("{prefix}.lin_in"), c, e, true, rng)?;
        let dw = DwConv2d::new(store, &format!("{prefix}.dw"), e, 3, rng)?;
        let mixer = match cfg.mixer {
            MixerKind::Scan => Mixer::Scan(Scan2d::new(
                store,
                &format!("{prefix}.scan"),
                e,
                cfg.state_size,
                cfg.padding_tokens,
                rng,
            )?),
            MixerKind::Conv => Mixer::Conv(
                (0..CONV_MIXER_STAGES)
                    .map(|i| {
                        let pre = format!("{prefix}.mix{i}");
                        Ok(ConvMixerStage {
                            dw: DwConv2d::new(store, &format!("{pre}.dw"), e, 3, rng)?,
                            fc1: Linear::new(store, &format!("{pre}.fc1"), e, e, true, rng)?,
                            fc2: Linear::new(store, &format!("{pre}.fc2"), e, e, true, rng)?,
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            cfg: cfg.clone(),
            lin_in,
            dw,
            mixer,
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), e)?,
            lin_gate: Linear::new(store, &format!("{prefix}.lin_gate"), c, e, true, rng)?,
            lin_out: Linear::new(store, &format!("{prefix}.lin_out"), e, c, true, rng)?,
            skip: store.add(format!("{prefix}.skip"), Tensor::ones(&[c]))?,
        })
    }

    pub fn set_kernel(&mut self, kernel: ScanKernel) {
        if let Mixer::Scan(s) = &mut self.mixer {
            s.kernel = kernel;
        }
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let c = g.value(x).dims4()?[3];
        if c != self.cfg.channels {
            return Err(Error::Config(format!(
                "state-space module built for {} channels, got {c}",
                self.cfg.channels
            )));
        }
        let h = self.lin_in.forward(g, p, x)?;
        let h = self.dw.forward(g, p, h)?;
        let h = g.silu(h)?;
        let h = self.mixer.forward(g, p, h)?;
        let x1 = self.norm.forward(g, p, h)?;
        let x2 = self.lin_gate.forward(g, p, x)?;
        let x2 = g.silu(x2)?;
        let gated = g.mul(x1, x2)?;
        let y = self.lin_out.forward(g, p, gated)?;
        let skip = g.mul(x, p.var(self.skip))?;
        g.add(y, skip)
    }
}
