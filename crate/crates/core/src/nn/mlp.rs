use super::Linear;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder, ParamId};

pub const MLP_RATIO: usize = 4;

/// Three-layer token MLP with a depthwise 3×3 convolution between the two
/// linear layers: `layer2(gelu(dw(gelu(layer1(x)))))`.
#[derive(Debug, Clone)]
pub struct MlpBlock {
    pub layer1: Linear,
    pub dw: ParamId,
    pub layer2: Linear,
    pub width: usize,
}

impl MlpBlock {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, width: usize) -> Self {
        let hidden = width * MLP_RATIO;
        MlpBlock {
            layer1: Linear::new(pb, &format!("{name}.fc1"), width, hidden),
            dw: pb.weight(format!("{name}.dw"), &[hidden, 3, 3], 9),
            layer2: Linear::new(pb, &format!("{name}.fc2"), hidden, width),
            width,
        }
    }

    /// `x: L×C` with `L = h·w`.
    pub fn forward(&self, p: &Bound, x: &Var, h: usize, w: usize) -> Result<Var> {
        if x.rank() != 2 || x.shape()[0] != h * w || x.shape()[1] != self.width {
            return Err(Error::dim("mlp_forward", x.shape(), &[h * w, self.width]));
        }
        let hidden = self.width * MLP_RATIO;
        let a = self.layer1.forward(p, x)?.gelu();
        let spatial = a.t()?.reshape(&[hidden, h, w])?;
        let b = spatial.dwconv3x3(&p[self.dw])?.gelu();
        let tokens = b.reshape(&[hidden, h * w])?.t()?;
        self.layer2.forward(p, &tokens)
    }
}
