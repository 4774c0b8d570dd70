use super::Linear;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder};

/// Squeeze-and-excitation channel recalibration:
/// `out[c] = x[c] · σ(expand(gelu(reduce(mean_hw(x))))[c])`.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub reduce: Linear,
    pub expand: Linear,
    pub channels: usize,
}

pub const SE_REDUCTION: usize = 4;

impl SeBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        let hidden = (channels / SE_REDUCTION).max(1);
        SeBlock {
            reduce: Linear::new(pb, &format!("{name}.reduce"), channels, hidden),
            expand: Linear::new(pb, &format!("{name}.expand"), hidden, channels),
            channels,
        }
    }

    /// The per-channel gate in `(0, 1)`, shaped `C×1×1`.
    pub fn gate(&self, p: &Bound, x: &Var) -> Result<Var> {
        let [c, h, w] = *x.shape() else {
            return Err(Error::dim("se_forward", x.shape(), &[self.channels]));
        };
        if c != self.channels {
            return Err(Error::dim("se_forward", x.shape(), &[self.channels]));
        }
        let squeezed = x.reshape(&[c, h * w])?.mean_axis(1, false)?.reshape(&[1, c])?;
        let hidden = self.reduce.forward(p, &squeezed)?.gelu();
        self.expand.forward(p, &hidden)?.sigmoid().reshape(&[c, 1, 1])
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.mul(&self.gate(p, x)?)
    }
}
