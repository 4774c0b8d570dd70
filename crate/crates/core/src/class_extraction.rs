//! Mask logits from the deepest stage and explicit class embeddings pooled
//! out of any mask stack.

use std::io::Write;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv1x1, Linear};
use crate::params::{Bound, ParamBuilder};
use crate::tensor::Tensor;

/// Side lengths of the pooling pyramid: `1, 2, 4, …` while not above
/// `P_max = max(1, round(α·√N))`, then `P_max` itself if it is not a power of
/// two. Rounding is half-up.
pub fn pyramid_levels(alpha: f64, n_classes: usize) -> Vec<usize> {
    let p_max = ((alpha * (n_classes as f64).sqrt() + 0.5).floor() as usize).max(1);
    let mut levels = Vec::new();
    let mut s = 1;
    while s <= p_max {
        levels.push(s);
        s *= 2;
    }
    if levels.last() != Some(&p_max) {
        levels.push(p_max);
    }
    levels
}

/// Length of the pooled descriptor, `Σ s²`.
pub fn pooled_width(levels: &[usize]) -> usize {
    levels.iter().map(|s| s * s).sum()
}

/// Per-class mask logits `N×H×W` tagged with the stage they came from.
#[derive(Debug, Clone)]
pub struct MaskStack {
    pub logits: Var,
    /// Backbone stage (1-based) whose resolution the mask has.
    pub stage: usize,
}

impl MaskStack {
    pub fn n_classes(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Per-pixel index of the highest-scoring class, row-major.
    pub fn argmax(&self) -> Vec<u8> {
        argmax_classes(self.logits.value())
    }
}

/// Argmax over the leading (class) axis of an `N×H×W` tensor. Ties go to the
/// lowest class index.
pub fn argmax_classes(logits: &Tensor) -> Vec<u8> {
    let [n, h, w] = *logits.shape() else {
        panic!("argmax_classes expects N×H×W, got {:?}", logits.shape());
    };
    let d = logits.data();
    let plane = h * w;
    (0..plane)
        .map(|k| {
            let mut best = 0;
            for c in 1..n {
                if d[c * plane + k] > d[best * plane + k] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Binary portable graymap (`P5`), one byte per pixel, `maxval = max(1, N−1)`.
pub fn write_pgm<W: Write>(out: &mut W, labels: &[u8], height: usize, width: usize, n_classes: usize) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::dim("write_pgm", &[labels.len()], &[height, width]));
    }
    let maxval = n_classes.saturating_sub(1).clamp(1, 255);
    write!(out, "P5\n{width} {height}\n{maxval}\n")?;
    out.write_all(labels)?;
    Ok(())
}

/// `Mask(X) = φ₂(φ₁(X))`, two pointwise convolutions without activation.
#[derive(Debug, Clone)]
pub struct MaskHead {
    pub phi1: Conv1x1,
    pub phi2: Conv1x1,
}

impl MaskHead {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, width: usize, n_classes: usize) -> Self {
        MaskHead {
            phi1: Conv1x1::new(pb, &format!("{name}.phi1"), width, width),
            phi2: Conv1x1::new(pb, &format!("{name}.phi2"), width, n_classes),
        }
    }

    pub fn forward(&self, p: &Bound, x: &Var, stage: usize) -> Result<MaskStack> {
        let logits = self.phi2.forward(p, &self.phi1.forward(p, x)?)?;
        Ok(MaskStack { logits, stage })
    }
}

/// Pyramid pooling of every mask slice followed by a projection `ψ` shared by
/// all classes.
#[derive(Debug, Clone)]
pub struct ClassExtractor {
    pub psi: Linear,
    pub levels: Vec<usize>,
}

impl ClassExtractor {
    pub fn new(pb: &mut ParamBuilder<'_>, name: &str, alpha: f64, n_classes: usize, width: usize) -> Self {
        let levels = pyramid_levels(alpha, n_classes);
        ClassExtractor {
            psi: Linear::new(pb, &format!("{name}.psi"), pooled_width(&levels), width),
            levels,
        }
    }

    /// Pooled descriptors `N×D_pool`. A level larger than the mask's shorter
    /// side is pooled at that side and its bins replicated (nearest) up to the
    /// level's grid, so `D_pool` does not depend on the mask resolution.
    pub fn descriptor(&self, mask: &Var) -> Result<Var> {
        let [n, h, w] = *mask.shape() else {
            return Err(Error::dim("ece_extract", mask.shape(), &[]));
        };
        let side = h.min(w);
        let mut blocks = Vec::with_capacity(self.levels.len());
        let mut pooled_at: Vec<(usize, Var)> = Vec::new();
        for &s in &self.levels {
            let eff = s.min(side);
            let pooled = match pooled_at.iter().find(|(e, _)| *e == eff) {
                Some((_, v)) => v.clone(),
                None => {
                    let v = mask.adaptive_avg_pool2d(eff, eff)?.reshape(&[n, eff * eff])?;
                    pooled_at.push((eff, v.clone()));
                    v
                }
            };
            blocks.push(if eff == s {
                pooled
            } else {
                pooled.matmul(&replicate_matrix(mask.tape(), eff, s))?
            });
        }
        if blocks.len() == 1 {
            return Ok(blocks.pop().expect("one level"));
        }
        Var::concat(&blocks, 1)
    }

    /// Class embeddings `G = ψ(Pooling(mask))`, `N×C`.
    pub fn extract(&self, p: &Bound, mask: &MaskStack) -> Result<Var> {
        self.psi.forward(p, &self.descriptor(&mask.logits)?)
    }
}

/// `from²×to²` 0/1 matrix mapping an `from×from` grid onto a `to×to` grid by
/// nearest-neighbour replication.
fn replicate_matrix(tape: &Tape, from: usize, to: usize) -> Var {
    let mut m = vec![0.0; from * from * to * to];
    for i in 0..to {
        for j in 0..to {
            let (si, sj) = (i * from / to, j * from / to);
            m[(si * from + sj) * to * to + i * to + j] = 1.0;
        }
    }
    tape.constant(Tensor::new(&[from * from, to * to], m).expect("replicate matrix"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_schedule() {
        assert_eq!(pyramid_levels(1.0, 4), vec![1, 2]);
        assert_eq!(pyramid_levels(1.0, 150), vec![1, 2, 4, 8, 12]);
        assert_eq!(pyramid_levels(3.0, 19), vec![1, 2, 4, 8, 13]);
        assert_eq!(pyramid_levels(1.0, 1), vec![1]);
        assert_eq!(pyramid_levels(0.01, 4), vec![1]);
        assert_eq!(pooled_width(&pyramid_levels(1.0, 4)), 5);
        assert_eq!(pooled_width(&pyramid_levels(1.0, 150)), 229);
    }

    #[test]
    fn rounding_is_half_up() {
        // α·√4 = 2.5 exactly
        assert_eq!(pyramid_levels(1.25, 4), vec![1, 2, 3]);
    }

    #[test]
    fn pgm_header_and_payload() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, &[0, 1, 3, 2], 2, 2, 4).unwrap();
        assert_eq!(&buf[..9], b"P5\n2 2\n3\n");
        assert_eq!(&buf[9..], &[0, 1, 3, 2]);
    }

    #[test]
    fn argmax_ties_pick_lowest_class() {
        let t = Tensor::new(&[3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_classes(&t), vec![0, 1]);
    }

    #[test]
    fn replication_keeps_width_on_small_masks() {
        let mut store = crate::params::ParamStore::new();
        let ece = ClassExtractor::new(&mut ParamBuilder::new(&mut store, 0), "ece", 1.0, 150, 8);
        let tape = Tape::new();
        let mask = tape.constant(Tensor::arange(&[3, 2, 2]));
        let d = ece.descriptor(&mask).unwrap();
        assert_eq!(d.shape(), &[3, 229]);
        // Level 4 on a 2×2 mask: each source pixel repeated on a 2×2 patch.
        let row0 = &d.value().data()[..229];
        let lvl4 = &row0[1 + 4..1 + 4 + 16];
        assert_eq!(&lvl4[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(&lvl4[8..12], &[2.0, 2.0, 3.0, 3.0]);
    }
}
