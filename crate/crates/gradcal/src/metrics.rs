//! Task-quality metrics and the multi-task evaluation score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One scalar per task: classification accuracy for detection, thresholded
/// mask IoU for segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub det_accuracy: f64,
    pub seg_iou: f64,
}

/// Fraction of rows whose argmax matches the label; ties break toward the
/// lowest index.
pub fn detection_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "detection_accuracy",
            format!("{} rows", logits.rows()),
            format!("{} labels", labels.len()),
        ));
    }
    if logits.rows() == 0 {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        if argmax_row(logits, i) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

pub(crate) fn argmax_row(logits: &Tensor, row: usize) -> usize {
    let mut best = 0;
    let mut best_v = logits.get(row, 0);
    for j in 1..logits.cols() {
        let v = logits.get(row, j);
        if v > best_v {
            best_v = v;
            best = j;
        }
    }
    best
}

/// Pooled intersection-over-union over every cell of the evaluation set,
/// binarizing predictions at logit >= 0 (sigmoid >= 0.5). An empty union
/// counts as 1.0.
pub fn segmentation_iou(logits: &Tensor, masks: &Tensor) -> Result<f64> {
    if logits.shape() != masks.shape() {
        return Err(Error::shape(
            "segmentation_iou",
            format!("{}x{}", logits.rows(), logits.cols()),
            format!("{}x{}", masks.rows(), masks.cols()),
        ));
    }
    let mut counts = IouCounts::default();
    counts.accumulate(logits, masks);
    Ok(counts.value())
}

/// Streaming IoU counts so evaluation can pool over many batches.
#[derive(Debug, Default, Clone, Copy)]
pub struct IouCounts {
    pub intersection: u64,
    pub union: u64,
}

impl IouCounts {
    pub fn accumulate(&mut self, logits: &Tensor, masks: &Tensor) {
        debug_assert_eq!(logits.shape(), masks.shape());
        for (z, y) in logits.data().iter().zip(masks.data()) {
            let pred = *z >= 0.0;
            let truth = *y >= 0.5;
            if pred && truth {
                self.intersection += 1;
            }
            if pred || truth {
                self.union += 1;
            }
        }
    }

    pub fn value(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

/// Average relative performance change of a model against per-task
/// baselines: ((-1)^l / T) * sum_i (M_m,i - M_b,i) / M_b,i. With l = 1,
/// lower is better.
pub fn delta_mtl(model: &[f64], baseline: &[f64], l: u8) -> Result<f64> {
    if model.len() != baseline.len() || model.is_empty() {
        return Err(Error::shape(
            "delta_mtl",
            format!("{} model metrics", model.len()),
            format!("{} baseline metrics", baseline.len()),
        ));
    }
    if let Some(b) = baseline.iter().find(|&&b| b <= 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "baseline metric {b} must be positive"
        )));
    }
    let sign = if l % 2 == 0 { 1.0 } else { -1.0 };
    let t = model.len() as f64;
    let sum: f64 = model
        .iter()
        .zip(baseline)
        .map(|(m, b)| (m - b) / b)
        .sum();
    Ok(sign * sum / t)
}

/// `delta_mtl` on the two toy tasks.
pub fn delta_mtl_pair(model: &TaskMetrics, baseline: &TaskMetrics, l: u8) -> Result<f64> {
    delta_mtl(
        &[model.det_accuracy, model.seg_iou],
        &[baseline.det_accuracy, baseline.seg_iou],
        l,
    )
}
