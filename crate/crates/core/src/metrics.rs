//! Confusion-matrix segmentation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{GpError, Result};
use crate::image::{LabelMap, IGNORE_INDEX};

/// `counts[gt * k + pred]`; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { k: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every non-ignore pixel of `y`. Predictions must be valid classes.
    pub fn accumulate(&mut self, y: &LabelMap, y_hat: &LabelMap) -> Result<()> {
        if y.width() != y_hat.width() || y.height() != y_hat.height() {
            return Err(GpError::Shape(format!(
                "label {}x{} vs prediction {}x{}",
                y.width(),
                y.height(),
                y_hat.width(),
                y_hat.height()
            )));
        }
        self.accumulate_slices(y.data(), y_hat.data())
    }

    pub fn accumulate_slices(&mut self, y: &[u8], y_hat: &[u8]) -> Result<()> {
        if y.len() != y_hat.len() {
            return Err(GpError::Shape(format!("{} labels vs {} predictions", y.len(), y_hat.len())));
        }
        for (&g, &p) in y.iter().zip(y_hat) {
            if g == IGNORE_INDEX {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.k || p >= self.k {
                return Err(GpError::InvalidArgument(format!("class index {} out of range for {} classes", g.max(p), self.k)));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(GpError::Shape(format!("merging {}-class into {}-class matrix", other.k, self.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn row(&self, c: usize) -> u64 {
        (0..self.k).map(|p| self.get(c, p)).sum()
    }

    fn col(&self, c: usize) -> u64 {
        (0..self.k).map(|g| self.get(g, c)).sum()
    }

    /// IoU per class, or `None` for a class absent from both GT and prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let (d, r, col) = (self.get(c, c), self.row(c), self.col(c));
                (r + col > 0).then(|| d as f64 / (r + col - d) as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        if self.total() == 0 {
            return Err(GpError::InvalidArgument("empty confusion matrix".into()));
        }
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(GpError::InvalidArgument("empty confusion matrix".into()));
        }
        let trace: u64 = (0..self.k).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }
}

/// Per-pixel argmax of `[K, H, W]` scores; ties go to the lowest class index.
pub fn argmax_labels(scores: &[f32], k: usize, width: usize, height: usize) -> LabelMap {
    let hw = width * height;
    let data = (0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if scores[c * hw + i] > scores[best * hw + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(width, height, data).expect("sized from inputs")
}
