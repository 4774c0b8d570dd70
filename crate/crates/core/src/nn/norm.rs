use super::NORM_EPS;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamId};

/// Layer normalization over the last axis of `L×C` tokens.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: pb.ones(format!("{name}.gamma"), &[width]),
            beta: pb.zeros(format!("{name}.beta"), &[width]),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let axis = x.rank().checked_sub(1).ok_or_else(|| Error::contract("layer norm on a scalar"))?;
        x.standardize(axis, NORM_EPS)?.mul(&p[self.gamma])?.add(&p[self.beta])
    }
}

/// Per-pixel normalization across channels of a `C×H×W` map, with a
/// per-channel affine.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    channels: usize,
}

impl ChannelNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        ChannelNorm {
            gamma: pb.ones(format!("{name}.gamma"), &[channels]),
            beta: pb.zeros(format!("{name}.beta"), &[channels]),
            channels,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let c = self.channels;
        let y = x.standardize(0, NORM_EPS)?;
        y.mul(&p[self.gamma].reshape(&[c, 1, 1])?)?
            .add(&p[self.beta].reshape(&[c, 1, 1])?)
    }
}

/// Per-channel normalization over spatial positions (instance style), with a
/// per-channel affine.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    channels: usize,
}

impl InstanceNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        InstanceNorm {
            gamma: pb.ones(format!("{name}.gamma"), &[channels]),
            beta: pb.zeros(format!("{name}.beta"), &[channels]),
            channels,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let [c, h, w] = *x.shape() else {
            return Err(Error::dim("instance_norm", x.shape(), &[self.channels]));
        };
        if c != self.channels {
            return Err(Error::dim("instance_norm", x.shape(), &[self.channels]));
        }
        let y = x.reshape(&[c, h * w])?.standardize(1, NORM_EPS)?.reshape(&[c, h, w])?;
        y.mul(&p[self.gamma].reshape(&[c, 1, 1])?)?
            .add(&p[self.beta].reshape(&[c, 1, 1])?)
    }
}
