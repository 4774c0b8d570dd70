//! Parameterized building blocks shared by the decoder.

mod attention;
mod ghost;
mod linear;
mod mlp;
mod norm;
mod se;

pub use attention::{heads_for_width, Attention, AttentionOutput};
pub use ghost::GhostExpand;
pub use linear::{Conv1x1, Conv2d, Linear};
pub use mlp::MlpBlock;
pub use norm::{ChannelNorm, InstanceNorm, LayerNorm};
pub use se::SeBlock;

pub(crate) const NORM_EPS: f64 = 1e-5;
