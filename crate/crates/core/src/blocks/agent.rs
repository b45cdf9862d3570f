use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamStore};
use crate::scalar::Scalar;

/// Two-stage attention through a small set of agent tokens obtained by
/// average-pooling the queries onto a square grid:
///
/// ```text
/// out = W_o · softmax(Q Aᵀ/√d) · softmax(A Kᵀ/√d) · V
/// ```
#[derive(Clone, Debug)]
pub struct AgentAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub agent_count: usize,
    pub channels: usize,
}

/// Forward result with both attention matrices exposed.
pub struct AgentTrace {
    pub out: Var,
    /// `(B, n_agents, HW)`: agents attending over tokens.
    pub agent_attn: Var,
    /// `(B, HW, n_agents)`: tokens attending over agents.
    pub token_attn: Var,
}

pub const DEFAULT_AGENT_COUNT: usize = 16;

impl AgentAttention {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        agent_count: usize,
        rng: &mut R,
    ) -> Result<Self> {
        agent_side(agent_count)?;
        let mut lin = |name: &str| Linear::new(store, &format!("{prefix}.{name}"), channels, channels, true, rng);
        Ok(Self {
            q: lin("q")?,
            k: lin("k")?,
            v: lin("v")?,
            out: lin("out")?,
            agent_count,
            channels,
        })
    }

    /// Agent grid for an `h × w` map: the square side clamped to the map.
    pub fn agent_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = agent_side(self.agent_count)?;
        Ok((s.min(h), s.min(w)))
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.trace(g, p, x)?.out)
    }

    pub fn trace<T: Scalar>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<AgentTrace> {
        let [b, h, w, c] = g.value(x).dims4()?;
        if c != self.channels {
            return Err(Error::Config(format!(
                "agent attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let (ah, aw) = self.agent_grid(h, w)?;
        let q = self.q.forward(g, p, x)?;
        let k = self.k.forward(g, p, x)?;
        let v = self.v.forward(g, p, x)?;
        let agents = g.adaptive_avg_pool(q, ah, aw)?;
        let agents = g.reshape(agents, &[b, ah * aw, c])?;
        let tok = |t: Var| g.reshape(t, &[b, h * w, c]);
        let (q, k, v) = (tok(q)?, tok(k)?, tok(v)?);
        let scale = T::one() / T::of_usize(c).sqrt();

        let kt = g.transpose_last2(k)?;
        let s1 = g.matmul(agents, kt)?;
        let agent_attn = g.softmax(g.mul_scalar(s1, scale)?)?;
        let agent_v = g.matmul(agent_attn, v)?;

        let at = g.transpose_last2(agents)?;
        let s2 = g.matmul(q, at)?;
        let token_attn = g.softmax(g.mul_scalar(s2, scale)?)?;
        let mixed = g.matmul(token_attn, agent_v)?;

        let mixed = g.reshape(mixed, &[b, h, w, c])?;
        Ok(AgentTrace {
            out: self.out.forward(g, p, mixed)?,
            agent_attn,
            token_attn,
        })
    }
}

fn agent_side(agent_count: usize) -> Result<usize> {
    if agent_count < 1 {
        return Err(Error::Config("agent count must be at least 1".into()));
    }
    let s = (agent_count as f64).sqrt().round() as usize;
    if s * s != agent_count {
        return Err(Error::Config(format!(
            "agent count {agent_count} is not a perfect square"
        )));
    }
    Ok(s)
}
