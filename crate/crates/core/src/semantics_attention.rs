//! Semantics attention and class updater.
//!
//! Stage features act as queries against the class embeddings (keys and
//! values). The head-averaged pre-softmax similarity is reshaped into a new
//! mask stack, pooled back into fresh embeddings by the shared
//! [`ClassExtractor`], and merged into the running embeddings through a
//! sigmoid gate.

use crate::autodiff::Var;
use crate::class_extraction::{ClassExtractor, MaskStack};
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear, MlpBlock};
use crate::params::{Bound, ParamBuilder};

/// How fresh class embeddings are merged into the running ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdaterKind {
    /// `G ← σ(ψ₁(φ₃(Ĝ) ⊙ φ₄(G))) ⊙ ψ₂(Ĝ) + G`
    #[default]
    Gated,
    /// `G ← ψ₂(Ĝ) + G`
    Plus,
}

/// Fully connected layer followed by layer norm.
#[derive(Debug, Clone)]
pub struct FcNorm {
    pub fc: Linear,
    pub norm: LayerNorm,
}

impl FcNorm {
    fn forward(&self, p: &Bound, x: &Var) -> Result<Var> {
        self.norm.forward(p, &self.fc.forward(p, x)?)
    }
}

#[derive(Debug, Clone)]
pub struct ClassUpdater {
    pub kind: UpdaterKind,
    /// Present only for [`UpdaterKind::Gated`].
    pub phi3: Option<Linear>,
    pub phi4: Option<Linear>,
    pub psi1: Option<FcNorm>,
    /// Zero-initialized, so a fresh updater leaves the embeddings unchanged.
    pub psi2: FcNorm,
}

impl ClassUpdater {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, width: usize, kind: UpdaterKind) -> Self {
        let gated = kind == UpdaterKind::Gated;
        let phi3 = gated.then(|| Linear::new(pb, &format!("{name}.phi3"), width, width));
        let phi4 = gated.then(|| Linear::new(pb, &format!("{name}.phi4"), width, width));
        let psi1 = gated.then(|| FcNorm {
            fc: Linear::new(pb, &format!("{name}.psi1"), width, width),
            norm: LayerNorm::new(pb, &format!("{name}.psi1_norm"), width),
        });
        let psi2 = FcNorm {
            fc: Linear::zeroed(pb, &format!("{name}.psi2"), width, width),
            norm: LayerNorm::new(pb, &format!("{name}.psi2_norm"), width),
        };
        ClassUpdater {
            kind,
            phi3,
            phi4,
            psi1,
            psi2,
        }
    }

    /// Merge fresh embeddings `g_hat` into `g` (both `N×C`).
    pub fn forward(&self, p: &Bound, g: &Var, g_hat: &Var) -> Result<Var> {
        if g.shape() != g_hat.shape() {
            return Err(Error::dim("class_update", g.shape(), g_hat.shape()));
        }
        let projected = self.psi2.forward(p, g_hat)?;
        match (self.kind, &self.phi3, &self.phi4, &self.psi1) {
            (UpdaterKind::Gated, Some(phi3), Some(phi4), Some(psi1)) => {
                let fused = phi3.forward(p, g_hat)?.mul(&phi4.forward(p, g)?)?;
                let gate = psi1.forward(p, &fused)?.sigmoid();
                gate.mul(&projected)?.add(g)
            }
            (UpdaterKind::Plus, ..) => projected.add(g),
            _ => Err(Error::Config("gated updater is missing its gate layers".into())),
        }
    }
}

/// One semantics-attention-and-update block; one instance per stage.
#[derive(Debug, Clone)]
pub struct SemanticsAttention {
    pub norm_x: LayerNorm,
    pub norm_g: LayerNorm,
    pub attention: Attention,
    pub norm_mlp: LayerNorm,
    pub mlp: MlpBlock,
    pub updater: ClassUpdater,
    pub width: usize,
}

pub struct AttendOutput {
    /// `L×C` strengthened features.
    pub enhanced: Var,
    /// `L×N` head-averaged pre-softmax similarity.
    pub sim: Var,
    /// Per-head post-softmax attention weights.
    pub weights: Vec<Var>,
}

pub struct SauStepOutput {
    pub enhanced: Var,
    pub new_mask: MaskStack,
    pub updated_g: Var,
    pub sim: Var,
    pub weights: Vec<Var>,
}

impl SemanticsAttention {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, width: usize, heads: usize, kind: UpdaterKind) -> Result<Self> {
        Ok(SemanticsAttention {
            norm_x: LayerNorm::new(pb, &format!("{name}.norm_x"), width),
            norm_g: LayerNorm::new(pb, &format!("{name}.norm_g"), width),
            attention: Attention::new(pb, &format!("{name}.attn"), width, heads)?,
            norm_mlp: LayerNorm::new(pb, &format!("{name}.norm_mlp"), width),
            mlp: MlpBlock::new(pb, &format!("{name}.mlp"), width),
            updater: ClassUpdater::new(pb, &format!("{name}.update"), width, kind),
            width,
        })
    }

    /// Pre-norm cross-attention then pre-norm MLP, each with a residual.
    /// `x: L×C` with `L = h·w`, `g: N×C`.
    pub fn attend(&self, p: &Bound, x: &Var, g: &Var, h: usize, w: usize) -> Result<AttendOutput> {
        if x.rank() != 2 || x.shape()[0] != h * w {
            return Err(Error::dim("semantics_attention", x.shape(), &[h * w, self.width]));
        }
        let att = self
            .attention
            .forward(p, &self.norm_x.forward(p, x)?, &self.norm_g.forward(p, g)?)?;
        let x1 = x.add(&att.out)?;
        let enhanced = x1.add(&self.mlp.forward(p, &self.norm_mlp.forward(p, &x1)?, h, w)?)?;
        Ok(AttendOutput {
            enhanced,
            sim: att.sim,
            weights: att.weights,
        })
    }

    /// Attend, turn the similarity into a mask stack, extract fresh
    /// embeddings from it and merge them into `g`.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        p: &Bound,
        ece: &ClassExtractor,
        x_prev: &Var,
        g: &Var,
        h: usize,
        w: usize,
        stage: usize,
    ) -> Result<SauStepOutput> {
        let AttendOutput { enhanced, sim, weights } = self.attend(p, x_prev, g, h, w)?;
        let new_mask = MaskStack {
            logits: similarity_to_mask(&sim, h, w)?,
            stage,
        };
        let g_hat = ece.extract(p, &new_mask)?;
        let updated_g = self.updater.forward(p, g, &g_hat)?;
        Ok(SauStepOutput {
            enhanced,
            new_mask,
            updated_g,
            sim,
            weights,
        })
    }
}

/// `L×N → N×h×w`, element `(n, i, j)` taken from `sim[i·w + j, n]`.
pub fn similarity_to_mask(sim: &Var, h: usize, w: usize) -> Result<Var> {
    let [l, n] = *sim.shape() else {
        return Err(Error::dim("similarity_to_mask", sim.shape(), &[h * w]));
    };
    if l != h * w {
        return Err(Error::dim("similarity_to_mask", sim.shape(), &[h * w]));
    }
    sim.t()?.reshape(&[n, h, w])
}
