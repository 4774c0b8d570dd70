use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamId};

/// Cheap channel multiplication: the input followed by `factor − 1`
/// depthwise-3×3 transforms of it, concatenated along channels.
#[derive(Debug, Clone)]
pub struct GhostExpand {
    /// `(factor−1)·C × 3 × 3`; absent when `factor == 1`.
    pub kernels: Option<ParamId>,
    pub channels: usize,
    pub factor: usize,
}

impl GhostExpand {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::contract("ghost expansion factor must be at least 1"));
        }
        let kernels = (factor > 1).then(|| pb.weight(format!("{name}.cheap"), &[(factor - 1) * channels, 3, 3], 9));
        Ok(GhostExpand {
            kernels,
            channels,
            factor,
        })
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        if x.rank() != 3 || x.shape()[0] != self.channels {
            return Err(Error::dim("ghost_expand", x.shape(), &[self.channels]));
        }
        let Some(k) = self.kernels else {
            return Ok(x.clone());
        };
        let copies = vec![x.clone(); self.factor - 1];
        let tiled = if copies.len() == 1 { x.clone() } else { Var::concat(&copies, 0)? };
        let ghosts = tiled.dwconv3x3(&p[k])?;
        Var::concat(&[x.clone(), ghosts], 0)
    }
}
