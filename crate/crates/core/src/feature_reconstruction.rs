//! Feature reconstruction: each backbone stage is rebuilt from an intrinsic
//! branch (pointwise conv + instance norm) and a diverse branch (cheap
//! depthwise transform recalibrated by squeeze-and-excitation), fused back to
//! the stage width. The diverse branch also feeds the diversity loss.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{Conv1x1, InstanceNorm, SeBlock};
use crate::params::{Bound, ParamBuilder, ParamId};

#[derive(Debug, Clone)]
pub struct FeatureReconstruction {
    pub intrinsic: Conv1x1,
    pub norm: InstanceNorm,
    /// Depthwise 3×3 kernels of the cheap transform, `C/2×3×3`.
    pub cheap: ParamId,
    pub se: SeBlock,
    pub fuse: Conv1x1,
    pub channels: usize,
}

pub struct FrOutput {
    /// Reconstructed features, same shape as the input.
    pub y: Var,
    /// Diverse-branch features, `C/2×H×W`.
    pub y_diverse: Var,
}

impl FeatureReconstruction {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Result<Self> {
        if channels == 0 || !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "feature reconstruction needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        Ok(FeatureReconstruction {
            intrinsic: Conv1x1::new(pb, &format!("{name}.intrinsic"), channels, half),
            norm: InstanceNorm::new(pb, &format!("{name}.norm"), half),
            cheap: pb.weight(format!("{name}.cheap"), &[half, 3, 3], 9),
            se: SeBlock::new(pb, &format!("{name}.se"), half),
            fuse: Conv1x1::new(pb, &format!("{name}.fuse"), channels, channels),
            channels,
        })
    }

    pub fn forward(&self, p: &Bound, f: &Var) -> Result<FrOutput> {
        if f.rank() != 3 || f.shape()[0] != self.channels {
            return Err(Error::dim("fr_forward", f.shape(), &[self.channels]));
        }
        let y_intrinsic = self.norm.forward(p, &self.intrinsic.forward(p, f)?)?;
        let y_diverse = self.se.forward(p, &y_intrinsic.dwconv3x3(&p[self.cheap])?)?;
        let y = self.fuse.forward(p, &Var::concat(&[y_intrinsic, y_diverse.clone()], 0)?)?;
        Ok(FrOutput { y, y_diverse })
    }
}

/// `1 − (1/𝒞)·Σ_k max_j softmax_k(y_j)`: each channel is softmaxed over its
/// spatial positions, the per-position maximum across channels is summed.
/// Zero when every channel owns a distinct pixel, `1 − 1/𝒞` when all
/// channels are spatially flat.
pub fn diversity_loss(y_diverse: &Var) -> Result<Var> {
    let [c, h, w] = *y_diverse.shape() else {
        return Err(Error::dim("diversity_loss", y_diverse.shape(), &[]));
    };
    let coverage = y_diverse
        .reshape(&[c, h * w])?
        .softmax(1)?
        .max_axis(0, false)?
        .sum();
    Ok(coverage.scale(-1.0 / c as f64).add_scalar(1.0))
}
