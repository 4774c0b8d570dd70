//! Small convolutional backbone producing features at 1/4, 1/8, 1/16 and
//! 1/32 of the input resolution.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::{ChannelNorm, Conv1x1, Conv2d};
use crate::params::{Bound, ParamBuilder, ParamId};

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    /// Side of the non-overlapping stem patches; the first stage sits at
    /// `1/patch` resolution.
    pub patch: usize,
    pub widths: [usize; 4],
    /// Residual blocks after each stage's downsampling.
    pub blocks: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch: 4,
            widths: [32, 64, 128, 256],
            blocks: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch != 4 {
            return Err(Error::Config(format!("encoder patch must be 4, got {}", self.patch)));
        }
        if let Some(w) = self.widths.iter().find(|&&w| w == 0 || w % 2 != 0) {
            return Err(Error::Config(format!("encoder widths must be even and positive, got {w}")));
        }
        Ok(())
    }
}

/// `x + gelu(pw(norm(dw3x3(x))))`
#[derive(Debug, Clone)]
struct ResidualBlock {
    dw: ParamId,
    norm: ChannelNorm,
    pw: Conv1x1,
}

impl ResidualBlock {
    fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        let y = self.pw.forward(p, &self.norm.forward(p, &x.dwconv3x3(&p[self.dw])?)?)?.gelu();
        x.add(&y)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Conv2d,
    norm: ChannelNorm,
    blocks: Vec<ResidualBlock>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    stages: Vec<Stage>,
    pub config: EncoderConfig,
}

/// Per-stage backbone features, finest first.
pub struct StageFeatures {
    pub stages: [Var; 4],
}

impl StageFeatures {
    /// `(H_i, W_i)` of stage `i` (0-based).
    pub fn extent(&self, i: usize) -> (usize, usize) {
        let s = self.stages[i].shape();
        (s[1], s[2])
    }
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for (i, &c) in config.widths.iter().enumerate() {
            let stage = format!("{name}.stage{}", i + 1);
            let (k, s) = if i == 0 { (config.patch, config.patch) } else { (2, 2) };
            let down = Conv2d::new(pb, &format!("{stage}.down"), c_in, c, k, s, 0);
            let norm = ChannelNorm::new(pb, &format!("{stage}.norm"), c);
            let blocks = (0..config.blocks)
                .map(|b| ResidualBlock {
                    dw: pb.weight(format!("{stage}.block{b}.dw"), &[c, 3, 3], 9),
                    norm: ChannelNorm::new(pb, &format!("{stage}.block{b}.norm"), c),
                    pw: Conv1x1::new(pb, &format!("{stage}.block{b}.pw"), c, c),
                })
                .collect();
            stages.push(Stage { down, norm, blocks });
            c_in = c;
        }
        Ok(Encoder { stages, config })
    }

    /// `image: 3×H×W` with both sides divisible by 32.
    pub fn forward(&self, p: &Bound, image: &Var) -> Result<StageFeatures> {
        match *image.shape() {
            [3, h, w] if h % 32 == 0 && w % 32 == 0 => {}
            _ => return Err(Error::dim("toy_encoder", image.shape(), &[3, 32, 32])),
        }
        let mut x = image.clone();
        let mut outs = Vec::with_capacity(4);
        for st in &self.stages {
            x = st.norm.forward(p, &st.down.forward(p, &x)?)?.gelu();
            for b in &st.blocks {
                x = b.forward(p, &x)?;
            }
            outs.push(x.clone());
        }
        let stages: [Var; 4] = outs.try_into().map_err(|_| Error::contract("encoder stage count"))?;
        Ok(StageFeatures { stages })
    }
}
