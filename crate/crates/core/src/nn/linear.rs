use crate::autodiff::Var;
use crate::error::Result;
use crate::params::{Bound, ParamBuilder, ParamId};

/// Row-wise affine map `x·Wᵀ + b` on `L×in` token matrices.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: pb.weight(format!("{name}.weight"), &[d_out, d_in], d_in),
            bias: pb.zeros(format!("{name}.bias"), &[d_out]),
            d_in,
            d_out,
        }
    }

    /// Weight and bias both start at zero.
    pub fn zeroed(pb: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: pb.zero_weight(format!("{name}.weight"), &[d_out, d_in]),
            bias: pb.zeros(format!("{name}.bias"), &[d_out]),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.linear(&p[self.weight], &p[self.bias])
    }
}

/// Pointwise convolution on `C×H×W` maps.
#[derive(Debug, Clone)]
pub struct Conv1x1 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv1x1 {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, c_in: usize, c_out: usize) -> Self {
        Conv1x1 {
            weight: pb.weight(format!("{name}.weight"), &[c_out, c_in], c_in),
            bias: pb.zeros(format!("{name}.bias"), &[c_out]),
            c_in,
            c_out,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.conv1x1(&p[self.weight], &p[self.bias])
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Conv2d {
            weight: pb.weight(format!("{name}.weight"), &[c_out, c_in, kernel, kernel], c_in * kernel * kernel),
            bias: pb.zeros(format!("{name}.bias"), &[c_out]),
            kernel,
            stride,
            pad,
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        x.conv2d(&p[self.weight], &p[self.bias], self.stride, self.pad)
    }
}
