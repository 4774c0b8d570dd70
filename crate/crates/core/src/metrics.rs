//! Confusion counts and intersection-over-union.

use crate::data::IGNORE_LABEL;
use crate::error::{Error, Result};

/// `N×N` counts, rows ground truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count one map pair. Pixels labelled [`IGNORE_LABEL`] are skipped.
    pub fn add(&mut self, gt: &[u8], pred: &[u8]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::dim("confusion", &[gt.len()], &[pred.len()]));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.n || p >= self.n {
                return Err(Error::Data(format!("class {} out of range for {} classes", g.max(p), self.n)));
            }
            self.counts[g * self.n + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n != self.n {
            return Err(Error::dim("confusion merge", &[self.n], &[other.n]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|j| self.get(c, j)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.n).map(|i| self.get(i, c)).sum()
    }

    /// `M[c,c] / (row_c + col_c − M[c,c])`; `None` when the class never
    /// occurs in the ground truth.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let row = self.row_sum(c);
        if row == 0 {
            return None;
        }
        let tp = self.get(c, c);
        Some(tp as f64 / (row + self.col_sum(c) - tp) as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over classes present in the ground truth.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::contract("mIoU of an empty confusion matrix"));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_case() {
        let mut m = ConfusionMatrix::new(2);
        m.add(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(m.iou(0), Some(0.5));
        assert_eq!(m.iou(1), Some(2.0 / 3.0));
        assert_eq!(m.miou().unwrap(), (0.5 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn ignore_and_absent_classes() {
        let mut m = ConfusionMatrix::new(3);
        m.add(&[0, IGNORE_LABEL, 0], &[0, 2, 0]).unwrap();
        assert_eq!(m.total(), 2);
        assert_eq!(m.per_class_iou(), vec![Some(1.0), None, None]);
        assert_eq!(m.miou().unwrap(), 1.0);
        assert!(ConfusionMatrix::new(2).miou().is_err());
        assert!(m.add(&[3], &[0]).is_err());
    }
}
