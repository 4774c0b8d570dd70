//! The full segmentation network: backbone, per-stage feature
//! reconstruction, explicit class extraction on the deepest stage, three
//! semantics-attention steps walking back up the pyramid, and the
//! ghost/pixel-shuffle aggregation head.

mod checkpoint;
mod encoder;
mod loss;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_VERSION};
pub use encoder::{Encoder, EncoderConfig, StageFeatures};
pub use loss::{
    cross_entropy_loss, dice_loss, focal_loss, mask_targets, overall_loss, LossBreakdown, LossWeights,
};

use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::class_extraction::{ClassExtractor, MaskHead, MaskStack};
use crate::error::{Error, Result};
use crate::feature_reconstruction::{diversity_loss, FeatureReconstruction};
use crate::nn::{heads_for_width, Conv1x1, GhostExpand, Linear};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::semantics_attention::{SemanticsAttention, UpdaterKind};
use crate::tensor::Tensor;

/// Pixel-shuffle factor bringing stage `i` (0-based) to 1/4 resolution.
const SHUFFLE: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub alpha: f64,
    /// Unified decoder width `C`.
    pub width: usize,
    pub heads: usize,
    pub encoder: EncoderConfig,
    /// Rebuild backbone features with feature reconstruction before
    /// unification.
    pub use_fr: bool,
    pub updater: UpdaterKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_classes: 4,
            alpha: 1.0,
            width: 64,
            heads: heads_for_width(64),
            encoder: EncoderConfig::default(),
            use_fr: true,
            updater: UpdaterKind::Gated,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(2..=255).contains(&self.n_classes) {
            return Err(Error::Config(format!("n_classes must be in 2..=255, got {}", self.n_classes)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Stable 64-bit digest of everything that determines the parameter
    /// layout and forward semantics.
    pub fn hash(&self) -> u64 {
        let canon = format!(
            "n_classes={};alpha={:?};width={};heads={};patch={};widths={:?};blocks={};fr={};updater={:?}",
            self.n_classes,
            self.alpha,
            self.width,
            self.heads,
            self.encoder.patch,
            self.encoder.widths,
            self.encoder.blocks,
            self.use_fr,
            self.updater,
        );
        let digest = Sha256::digest(canon.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

pub struct ModelOutput {
    /// `N×H×W` per-pixel class scores.
    pub seg_logits: Var,
    /// `N×H/4×W/4` sum of the four mask stacks.
    pub summed_mask: Var,
    /// `N×N`, row `n` the predicted class distribution of embedding `n`.
    pub class_probs: Var,
    /// One scalar per stage; empty without feature reconstruction.
    pub div_losses: Vec<Var>,
    /// Final class embeddings `N×C`.
    pub g: Var,
    /// Deepest stage first.
    pub masks: Vec<MaskStack>,
}

#[derive(Debug, Clone)]
pub struct EceNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub fr: Option<Vec<FeatureReconstruction>>,
    pub unify: Vec<Conv1x1>,
    pub mask_head: MaskHead,
    pub ece: ClassExtractor,
    /// For stages 3, 2, 1 in that order.
    pub sau: Vec<SemanticsAttention>,
    /// For stages 1..4.
    pub ghosts: Vec<GhostExpand>,
    pub fuse: Conv1x1,
    pub classifier: Linear,
}

impl EceNet {
    pub fn new(pb: &mut ParamBuilder<'_>, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let n = config.n_classes;
        let widths = config.encoder.widths;
        let encoder = Encoder::new(pb, "encoder", config.encoder.clone())?;
        let fr = if config.use_fr {
            Some(
                widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| FeatureReconstruction::new(pb, &format!("fr{}", i + 1), w))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let unify = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Conv1x1::new(pb, &format!("unify{}", i + 1), w, c))
            .collect();
        let mask_head = MaskHead::new(pb, "mask_head", c, n);
        let ece = ClassExtractor::new(pb, "ece", config.alpha, n, c);
        let sau = [3, 2, 1]
            .iter()
            .map(|s| SemanticsAttention::new(pb, &format!("sau{s}"), c, config.heads, config.updater))
            .collect::<Result<Vec<_>>>()?;
        let ghosts = SHUFFLE
            .iter()
            .enumerate()
            .map(|(i, &r)| GhostExpand::new(pb, &format!("ghost{}", i + 1), c, r * r))
            .collect::<Result<Vec<_>>>()?;
        let fuse = Conv1x1::new(pb, "fuse", 4 * c, n);
        let classifier = Linear::new(pb, "classifier", c, n);
        Ok(EceNet {
            config,
            encoder,
            fr,
            unify,
            mask_head,
            ece,
            sau,
            ghosts,
            fuse,
            classifier,
        })
    }

    /// Fresh model and its parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<(EceNet, ParamStore)> {
        let mut store = ParamStore::new();
        let net = EceNet::new(&mut ParamBuilder::new(&mut store, seed), config)?;
        Ok((net, store))
    }

    /// Per-stage conv1x1 to the common width.
    pub fn unify_channels(&self, p: &Bound, stages: &[Var; 4]) -> Result<[Var; 4]> {
        Ok([
            self.unify[0].forward(p, &stages[0])?,
            self.unify[1].forward(p, &stages[1])?,
            self.unify[2].forward(p, &stages[2])?,
            self.unify[3].forward(p, &stages[3])?,
        ])
    }

    /// `image: 3×H×W` with sides divisible by 32.
    pub fn forward(&self, p: &Bound, image: &Var) -> Result<ModelOutput> {
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let feats = self.encoder.forward(p, image)?;
        let mut stages = feats.stages.clone();
        let mut div_losses = Vec::new();
        if let Some(fr) = &self.fr {
            for (s, m) in stages.iter_mut().zip(fr) {
                let out = m.forward(p, s)?;
                div_losses.push(diversity_loss(&out.y_diverse)?);
                *s = out.y;
            }
        }
        let x = self.unify_channels(p, &stages)?;

        let mask4 = self.mask_head.forward(p, &x[3], 4)?;
        let mut g = self.ece.extract(p, &mask4)?;
        let mut masks = vec![mask4];
        let mut enhanced: [Option<Var>; 3] = [None, None, None];
        for (sau, stage) in self.sau.iter().zip([3usize, 2, 1]) {
            let xs = &x[stage - 1];
            let (c, hs, ws) = (xs.shape()[0], xs.shape()[1], xs.shape()[2]);
            let tokens = xs.reshape(&[c, hs * ws])?.t()?;
            let step = sau.step(p, &self.ece, &tokens, &g, hs, ws, stage)?;
            enhanced[stage - 1] = Some(step.enhanced.t()?.reshape(&[c, hs, ws])?);
            masks.push(step.new_mask);
            g = step.updated_g;
        }

        let (qh, qw) = (h / 4, w / 4);
        let mut lifted = Vec::with_capacity(4);
        for (i, ghost) in self.ghosts.iter().enumerate() {
            let src = if i < 3 { enhanced[i].as_ref().expect("stage visited") } else { &x[3] };
            lifted.push(upsample_ghost(p, ghost, src, SHUFFLE[i])?);
        }
        let base = self.fuse.forward(p, &Var::concat(&lifted, 0)?)?;

        let mut summed_mask = masks[0].logits.bilinear_resize(qh, qw)?;
        for m in &masks[1..] {
            summed_mask = summed_mask.add(&m.logits.bilinear_resize(qh, qw)?)?;
        }
        let n = self.config.n_classes;
        let class_probs = self.classifier.forward(p, &g)?.softmax(1)?;
        let enhancement = class_probs
            .t()?
            .matmul(&summed_mask.reshape(&[n, qh * qw])?)?
            .reshape(&[n, qh, qw])?;
        let seg_logits = base.add(&enhancement)?.bilinear_resize(h, w)?;
        Ok(ModelOutput {
            seg_logits,
            summed_mask,
            class_probs,
            div_losses,
            g,
            masks,
        })
    }

    /// Forward without recording gradients; returns `N×H×W` scores.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let p = store.bind(&tape);
        let out = self.forward(&p, &tape.constant(image.clone()))?;
        Ok(out.seg_logits.value().clone())
    }
}

/// Ghost-expand by `r²`, regroup so the `r²` copies of each channel are
/// adjacent, then pixel-shuffle by `r`.
fn upsample_ghost(p: &Bound, ghost: &GhostExpand, x: &Var, r: usize) -> Result<Var> {
    if r == 1 {
        return ghost.forward(p, x);
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    ghost
        .forward(p, x)?
        .reshape(&[r * r, c, h * w])?
        .permute(&[1, 0, 2])?
        .reshape(&[c * r * r, h, w])?
        .pixel_shuffle(r)
}
