use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Pixel confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    /// Counts over two equally long binary sequences.
    pub fn from_masks<T: Scalar>(pred: &[T], gt: &[T]) -> Result<Self> {
        if pred.len() != gt.len() {
            return Err(Error::shape("metrics", format!("{} predictions vs {} labels", pred.len(), gt.len())));
        }
        let bit = |v: T| -> Result<bool> {
            let f = v.to_f64();
            if f == 0.0 || f == 1.0 {
                Ok(f == 1.0)
            } else {
                Err(Error::NonBinary(f))
            }
        };
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt) {
            match (bit(p)?, bit(g)?) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    pub fn report(&self) -> MetricsReport {
        // An empty denominator means the reference set is empty: the metric is
        // perfect if the prediction agrees (no errors of the relevant kind).
        let ratio = |num: u64, den: u64, agrees: bool| {
            if den == 0 {
                if agrees {
                    1.0
                } else {
                    0.0
                }
            } else {
                num as f64 / den as f64
            }
        };
        let c = self;
        MetricsReport {
            se: ratio(c.tp, c.tp + c.fn_, c.fp == 0),
            sp: ratio(c.tn, c.tn + c.fp, c.fn_ == 0),
            acc: ratio(c.tp + c.tn, c.total(), true),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_, true),
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, true),
            confusion: *c,
        }
    }
}

/// Sensitivity, specificity, accuracy, IoU and Dice with their counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub iou: f64,
    pub dice: f64,
    pub confusion: Confusion,
}

pub fn compute_metrics<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            "metrics",
            format!("prediction {:?} vs ground truth {:?}", pred.shape(), gt.shape()),
        ));
    }
    Ok(Confusion::from_masks(pred.data(), gt.data())?.report())
}

/// Binary mask from logits: `sigmoid(z) ≥ 0.5`, i.e. `z ≥ 0`.
pub fn threshold_logits<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let data = logits
        .data()
        .iter()
        .map(|&z| T::from_f64(if z.to_f64() >= 0.0 { 1.0 } else { 0.0 }))
        .collect();
    Tensor::new(logits.shape(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[[u8; 4]; 4]) -> Tensor<f32> {
        Tensor::new(&[1, 4, 4], rows.iter().flatten().map(|&v| v as f32).collect()).unwrap()
    }

    #[test]
    fn rows_vs_columns() {
        let pred = t(&[[1, 1, 1, 1], [1, 1, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0]]);
        let gt = t(&[[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 0, 0]]);
        let m = compute_metrics(&pred, &gt).unwrap();
        assert_eq!(m.confusion, Confusion { tp: 4, fp: 4, tn: 4, fn_: 4 });
        assert!((m.iou - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!((m.dice, m.acc, m.se, m.sp), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn identical_and_disjoint() {
        let a = t(&[[1, 1, 0, 0], [0; 4], [0; 4], [0; 4]]);
        let b = t(&[[0, 0, 1, 1], [0; 4], [0; 4], [0; 4]]);
        let same = compute_metrics(&a, &a).unwrap();
        assert_eq!((same.se, same.sp, same.acc, same.iou, same.dice), (1.0, 1.0, 1.0, 1.0, 1.0));
        let d = compute_metrics(&a, &b).unwrap();
        assert_eq!((d.iou, d.dice), (0.0, 0.0));
    }

    #[test]
    fn empty_ground_truth() {
        let empty = t(&[[0; 4]; 4]);
        let m = compute_metrics(&empty, &empty).unwrap();
        assert_eq!((m.se, m.sp, m.acc, m.iou, m.dice), (1.0, 1.0, 1.0, 1.0, 1.0));
        let mut one = empty.clone();
        one.data_mut()[0] = 1.0;
        let m = compute_metrics(&one, &empty).unwrap();
        assert_eq!((m.se, m.iou, m.dice), (0.0, 0.0, 0.0));
    }

    #[test]
    fn non_binary_is_rejected() {
        let mut a = t(&[[0; 4]; 4]);
        a.data_mut()[3] = 0.5;
        assert!(matches!(compute_metrics(&a, &a), Err(Error::NonBinary(_))));
    }

    #[test]
    fn logits_threshold_at_zero() {
        let z = Tensor::new(&[3], vec![-0.1f32, 0.0, 2.0]).unwrap();
        assert_eq!(threshold_logits(&z).data(), &[0.0, 1.0, 1.0]);
    }
}
