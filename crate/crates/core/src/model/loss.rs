//! Pixel classification loss, mask supervision and their combination.

use super::ModelOutput;
use crate::autodiff::Var;
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_div: f64,
    pub lambda_focal: f64,
    pub lambda_dice: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_div: 0.2,
            lambda_focal: 1.0,
            lambda_dice: 1.0,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_div,
            self.lambda_focal,
            self.lambda_dice,
            self.focal_gamma,
            self.focal_alpha,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// Total loss plus the value of each component.
pub struct LossBreakdown {
    pub total: Var,
    pub ce: f64,
    /// `λ_focal·focal + λ_dice·dice`.
    pub mask: f64,
    /// Mean diversity loss over stages, before weighting.
    pub div: f64,
}

/// Mean `−log softmax(logits)[gt]` over labelled pixels. `logits: N×H×W`.
pub fn cross_entropy_loss(logits: &Var, gt: &LabelMap) -> Result<Var> {
    let [n, h, w] = *logits.shape() else {
        return Err(Error::dim("cross_entropy_loss", logits.shape(), &[gt.height, gt.width]));
    };
    if (h, w) != (gt.height, gt.width) {
        return Err(Error::dim("cross_entropy_loss", logits.shape(), &[gt.height, gt.width]));
    }
    let onehot = gt.one_hot(n)?;
    let count = onehot.sum();
    if count == 0.0 {
        return Err(Error::Data("every pixel is ignored".into()));
    }
    let picked = logits.log_softmax(0)?.mul(&logits.tape().constant(onehot))?.sum();
    Ok(picked.scale(-1.0 / count))
}

/// Sigmoid focal loss averaged over labelled class-pixels.
/// `target` is a 0/1 tensor of the logits' shape; `valid` broadcasts against
/// it and zeroes out ignored pixels.
pub fn focal_loss(logits: &Var, target: &Tensor, valid: &Tensor, gamma: f64, alpha: f64) -> Result<Var> {
    check_mask_shapes("focal_loss", logits, target)?;
    let tape = logits.tape();
    // s = x for positives, −x for negatives, so p_t = σ(s).
    let sign = target.map(|y| 2.0 * y - 1.0);
    let alpha_t = target.map(|y| if y > 0.5 { alpha } else { 1.0 - alpha });
    let s = logits.mul(&tape.constant(sign))?;
    let modulator = s.neg().sigmoid().powf(gamma);
    let per = modulator.mul(&s.log_sigmoid())?.mul(&tape.constant(alpha_t))?;
    let weighted = per.mul(&tape.constant(valid.clone()))?;
    let count = valid.sum() * (logits.value().numel() / valid.numel()) as f64;
    if count == 0.0 {
        return Err(Error::Data("every pixel is ignored".into()));
    }
    Ok(weighted.sum().scale(-1.0 / count))
}

/// `1 − mean_n (2Σ p·y + 1)/(Σ p + Σ y + 1)` with `p = σ(logits)` over
/// labelled pixels, per class slice.
pub fn dice_loss(logits: &Var, target: &Tensor, valid: &Tensor) -> Result<Var> {
    check_mask_shapes("dice_loss", logits, target)?;
    let n = logits.shape()[0];
    let tape = logits.tape();
    let p = logits.sigmoid().mul(&tape.constant(valid.clone()))?.reshape(&[n, target.numel() / n])?;
    let y = tape.constant(target.reshape(&[n, target.numel() / n])?);
    let inter = p.mul(&y)?.sum_axis(1, false)?.scale(2.0).add_scalar(1.0);
    let denom = p.sum_axis(1, false)?.add(&y.sum_axis(1, false)?)?.add_scalar(1.0);
    Ok(inter.div(&denom)?.mean().scale(-1.0).add_scalar(1.0))
}

fn check_mask_shapes(op: &'static str, logits: &Var, target: &Tensor) -> Result<()> {
    if logits.shape() != target.shape() || logits.rank() != 3 {
        return Err(Error::dim(op, logits.shape(), target.shape()));
    }
    Ok(())
}

/// One-hot and validity tensors for mask supervision at `1/factor`
/// resolution, downsampled by nearest neighbour.
pub fn mask_targets(gt: &LabelMap, n_classes: usize, factor: usize) -> Result<(Tensor, Tensor)> {
    let small = gt.downsample(factor)?;
    Ok((small.one_hot(n_classes)?, small.valid_mask()))
}

/// `CE + λ_focal·focal + λ_dice·dice + λ_div·mean(div_losses)`.
pub fn overall_loss(out: &ModelOutput, gt: &LabelMap, weights: &LossWeights) -> Result<LossBreakdown> {
    let n = out.seg_logits.shape()[0];
    let ce = cross_entropy_loss(&out.seg_logits, gt)?;
    let factor = gt.height / out.summed_mask.shape()[1];
    let (target, valid) = mask_targets(gt, n, factor)?;
    let focal = focal_loss(&out.summed_mask, &target, &valid, weights.focal_gamma, weights.focal_alpha)?;
    let dice = dice_loss(&out.summed_mask, &target, &valid)?;
    let mask = focal.scale(weights.lambda_focal).add(&dice.scale(weights.lambda_dice))?;
    let mut total = ce.add(&mask)?;
    let mut div_value = 0.0;
    if !out.div_losses.is_empty() {
        let parts: Vec<Var> = out.div_losses.iter().map(|d| d.reshape(&[1])).collect::<Result<_>>()?;
        let div = Var::concat(&parts, 0)?.mean();
        div_value = div.item();
        total = total.add(&div.scale(weights.lambda_div))?;
    }
    Ok(LossBreakdown {
        ce: ce.item(),
        mask: mask.item(),
        div: div_value,
        total,
    })
}
