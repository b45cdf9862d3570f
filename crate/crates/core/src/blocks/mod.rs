//! Neural building blocks: the vision state-space module and block, agent
//! attention, SPADE residual blocks and criss-cross attention fusion.

mod agent;
mod cross_attention;
mod spade;
mod vssb;
mod vssm;

pub use agent::{AgentAttention, AgentTrace, DEFAULT_AGENT_COUNT};
pub use cross_attention::{criss_cross_footprint, criss_cross_weights, CrossAttentionFuse};
pub use spade::{Spade, SpadeResBlock, LEAKY_SLOPE, NORM_EPS};
pub use vssb::{Vssb, VssbConfig};
pub use vssm::{ConvMixerStage, Mixer, MixerKind, Vssm, VssmConfig, CONV_MIXER_STAGES};
