use super::Linear;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamBuilder};

/// Multi-head scaled dot-product cross-attention with separate query and
/// key/value inputs.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub width: usize,
}

pub struct AttentionOutput {
    /// `L×C` attended values after the output projection.
    pub out: Var,
    /// `L×N` head-averaged pre-softmax similarity `QKᵀ/√d_k`.
    pub sim: Var,
    /// Per-head `L×N` attention weights (rows sum to one).
    pub weights: Vec<Var>,
}

/// Head count used for a model width: one head per 32 channels.
pub fn heads_for_width(width: usize) -> usize {
    (width / 32).max(1)
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, width: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::Config(format!("width {width} not divisible into {heads} heads")));
        }
        Ok(Attention {
            q: Linear::new(pb, &format!("{name}.q"), width, width),
            k: Linear::new(pb, &format!("{name}.k"), width, width),
            v: Linear::new(pb, &format!("{name}.v"), width, width),
            out: Linear::new(pb, &format!("{name}.out"), width, width),
            heads,
            width,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn forward(&self, p: &Bound, q_in: &Var, kv_in: &Var) -> Result<AttentionOutput> {
        for v in [q_in, kv_in] {
            if v.rank() != 2 || v.shape()[1] != self.width {
                return Err(Error::dim("scaled_attention", v.shape(), &[self.width]));
            }
        }
        let q = self.q.forward(p, q_in)?;
        let k = self.k.forward(p, kv_in)?;
        let v = self.v.forward(p, kv_in)?;
        let dk = self.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut sims = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q.clone(), k.clone(), v.clone())
            } else {
                (q.narrow(1, h * dk, dk)?, k.narrow(1, h * dk, dk)?, v.narrow(1, h * dk, dk)?)
            };
            let s = qh.matmul(&kh.t()?)?.scale(scale);
            let a = s.softmax(1)?;
            outs.push(a.matmul(&vh)?);
            sims.push(s);
            weights.push(a);
        }
        let (mixed, sim) = if self.heads == 1 {
            (outs.pop().expect("one head"), sims.pop().expect("one head"))
        } else {
            let mut acc = sims[0].clone();
            for s in &sims[1..] {
                acc = acc.add(s)?;
            }
            (Var::concat(&outs, 1)?, acc.scale(1.0 / self.heads as f64))
        };
        Ok(AttentionOutput {
            out: self.out.forward(p, &mixed)?,
            sim,
            weights,
        })
    }
}
