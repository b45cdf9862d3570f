use rand::Rng;

use super::agent::{AgentAttention, DEFAULT_AGENT_COUNT};
use super::vssm::{Vssm, VssmConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, LayerNorm, Mlp};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::ScanKernel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct VssbConfig {
    pub vssm: VssmConfig,
    pub agent_count: usize,
    /// Odd kernel of the local convolutional enhancement.
    pub conv_kernel: usize,
    /// Agent attention on the enhancement branch; when off the branch is
    /// `MLP(Conv(LN(X₃)))`.
    pub attention: bool,
}

impl VssbConfig {
    pub fn new(channels: usize, state_size: usize) -> Self {
        Self {
            vssm: VssmConfig::new(channels, state_size),
            agent_count: DEFAULT_AGENT_COUNT,
            conv_kernel: 3,
            attention: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.vssm.channels
    }
}

/// Visual state-space block:
///
/// ```text
/// X₃ = VSSM(LN(X))
/// X₄ = MLP(Agent(Conv(LN(X₃))))
/// out = X₄ + s' ⊙ X₃
/// ```
#[derive(Clone, Debug)]
pub struct Vssb {
    pub cfg: VssbConfig,
    pub norm1: LayerNorm,
    pub vssm: Vssm,
    pub norm2: LayerNorm,
    pub conv: Conv2d,
    pub agent: Option<AgentAttention>,
    pub mlp: Mlp,
    pub skip: ParamId,
}

impl Vssb {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &VssbConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.channels();
        if cfg.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "enhancement kernel must be odd, got {}",
                cfg.conv_kernel
            )));
        }
        let norm1 = LayerNorm::new(store, &format!("{prefix}.norm1"), c)?;
        let vssm = Vssm::new(store, &format!("{prefix}.vssm"), &cfg.vssm, rng)?;
        let norm2 = LayerNorm::new(store, &format!("{prefix}.norm2"), c)?;
        let conv = Conv2d::new(store, &format!("{prefix}.conv"), c, c, cfg.conv_kernel, 1, true, rng)?;
        let agent = if cfg.attention {
            Some(AgentAttention::new(
                store,
                &format!("{prefix}.agent"),
                c,
                cfg.agent_count,
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            norm1,
            vssm,
            norm2,
            conv,
            agent,
            mlp: Mlp::new(store, &format!("{prefix}.mlp"), c, rng)?,
            skip: store.add(format!("{prefix}.skip"), Tensor::ones(&[c]))?,
        })
    }

    pub fn set_kernel(&mut self, kernel: ScanKernel) {
        self.vssm.set_kernel(kernel);
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, p, x)?;
        let x3 = self.vssm.forward(g, p, h)?;
        let h = self.norm2.forward(g, p, x3)?;
        let h = self.conv.forward(g, p, h)?;
        let h = match &self.agent {
            Some(a) => a.forward(g, p, h)?,
            None => h,
        };
        let x4 = self.mlp.forward(g, p, h)?;
        let skip = g.mul(x3, p.var(self.skip))?;
        g.add(x4, skip)
    }
}
