//! IoU over visible BEV cells, accumulated as dataset-level counts.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::CameraIntrinsics;
use crate::model::{predict, ModelParams};
use crate::synthworld::Sample;
use crate::tensor::Tensor;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Per-class intersection/union counts over a set of samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalReport {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    pub n_samples: usize,
}

impl EvalReport {
    pub fn new(classes: usize) -> Self {
        EvalReport {
            intersection: vec![0; classes],
            union: vec![0; classes],
            n_samples: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.intersection.len()
    }

    /// IoU of class `c`; `None` when nothing of that class was predicted or
    /// present in any visible cell.
    pub fn iou(&self, c: usize) -> Option<f64> {
        (self.union[c] > 0).then(|| self.intersection[c] as f64 / self.union[c] as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes()).map(|c| self.iou(c)).collect()
    }

    /// Unweighted mean over the classes whose IoU is defined.
    pub fn miou(&self) -> Option<f64> {
        let defined: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Adds another report's counts.
    pub fn merge(&mut self, other: &EvalReport) -> Result<()> {
        if other.classes() != self.classes() {
            return Err(Error::InvalidValue(format!(
                "cannot merge reports over {} and {} classes",
                self.classes(),
                other.classes()
            )));
        }
        for c in 0..self.classes() {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
        self.n_samples += other.n_samples;
        Ok(())
    }
}

/// `1` where `pred ≥ threshold`, else `0`.
pub fn binarize(pred: &Tensor, threshold: f64) -> Result<Tensor> {
    check_threshold(threshold)?;
    Ok(pred.map(|v| if v >= threshold { 1.0 } else { 0.0 }))
}

pub fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidValue(format!("threshold must be in (0, 1), got {threshold}")))
    }
}

/// Adds one sample's counts. `pred` and `gt` are binary `C×Z×X`; `mask` is a
/// binary `Z×X` (or `1×Z×X`) grid and only cells where it is set count.
pub fn accumulate_iou(report: &mut EvalReport, pred: &Tensor, gt: &Tensor, mask: &Tensor) -> Result<()> {
    pred.same_shape(gt)?;
    let shape = pred.shape();
    if shape.len() != 3 || shape[0] != report.classes() {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            len: report.classes(),
        });
    }
    let cells = shape[1] * shape[2];
    if mask.numel() != cells || mask.shape()[mask.rank() - 2..] != shape[1..] {
        return Err(Error::ShapeMismatch {
            lhs: mask.shape().to_vec(),
            rhs: shape[1..].to_vec(),
        });
    }
    let m = mask.data();
    for c in 0..report.classes() {
        let p = &pred.data()[c * cells..(c + 1) * cells];
        let g = &gt.data()[c * cells..(c + 1) * cells];
        let (mut inter, mut union) = (0u64, 0u64);
        for ((&pv, &gv), &mv) in p.iter().zip(g).zip(m) {
            if mv == 0.0 {
                continue;
            }
            let (pv, gv) = (pv != 0.0, gv != 0.0);
            inter += (pv && gv) as u64;
            union += (pv || gv) as u64;
        }
        report.intersection[c] += inter;
        report.union[c] += union;
    }
    report.n_samples += 1;
    Ok(())
}

/// Evaluates `predictor` (image, intrinsics → class probabilities) over a
/// labeled set.
pub fn evaluate(
    samples: &[Sample],
    classes: usize,
    threshold: f64,
    mut predictor: impl FnMut(&Tensor, &CameraIntrinsics) -> Result<Tensor>,
) -> Result<EvalReport> {
    check_threshold(threshold)?;
    let mut report = EvalReport::new(classes);
    for s in samples {
        let gt = s.gt_bev.as_ref().ok_or(Error::EmptyDataset("evaluation sample without ground truth"))?;
        let pred = binarize(&predictor(&s.image, &s.intrinsics)?, threshold)?;
        accumulate_iou(&mut report, &pred, gt.values(), s.visibility.values())?;
    }
    Ok(report)
}

/// [`evaluate`] with the network's segmentation output as predictor.
pub fn evaluate_model(params: &ModelParams, samples: &[Sample], threshold: f64) -> Result<EvalReport> {
    evaluate(samples, params.config.classes, threshold, |img, k| {
        predict(params, img, k).map(|(_, seg)| seg)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(bits: &[u8]) -> Tensor {
        Tensor::new(vec![1, 1, bits.len()], bits.iter().map(|&b| b as f64).collect()).unwrap()
    }

    #[test]
    fn hand_counted_three_sevenths() {
        let gt = grid(&[1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
        let pred = grid(&[0, 1, 1, 1, 1, 1, 1, 0, 0, 0]);
        let mask = Tensor::full(&[1, 10], 1.0);
        let mut r = EvalReport::new(1);
        accumulate_iou(&mut r, &pred, &gt, &mask).unwrap();
        assert_eq!(r.iou(0), Some(3.0 / 7.0));
    }

    #[test]
    fn masked_error_is_ignored() {
        let gt = grid(&[1, 1, 0, 0]);
        let mask = Tensor::new(vec![1, 4], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let mut a = EvalReport::new(1);
        accumulate_iou(&mut a, &gt, &gt, &mask).unwrap();
        let mut b = EvalReport::new(1);
        accumulate_iou(&mut b, &grid(&[1, 1, 0, 1]), &gt, &mask).unwrap();
        assert_eq!(a, b);
        let mut empty = EvalReport::new(1);
        accumulate_iou(&mut empty, &gt, &gt, &Tensor::zeros(&[1, 4])).unwrap();
        assert_eq!(empty.miou(), None);
    }

    #[test]
    fn dataset_counts_not_mean_of_images() {
        let mask = Tensor::full(&[1, 4], 1.0);
        let mut r = EvalReport::new(1);
        // image 1: IoU 1/1; image 2: IoU 1/4
        accumulate_iou(&mut r, &grid(&[1, 0, 0, 0]), &grid(&[1, 0, 0, 0]), &mask).unwrap();
        accumulate_iou(&mut r, &grid(&[1, 1, 1, 1]), &grid(&[1, 0, 0, 0]), &mask).unwrap();
        assert_eq!(r.iou(0), Some(2.0 / 5.0));
        assert_ne!(r.iou(0), Some((1.0 + 0.25) / 2.0));
        assert_eq!(r.n_samples, 2);
    }

    #[test]
    fn binarize_rules() {
        let t = Tensor::full(&[2, 2], 0.4);
        assert!(binarize(&t, 0.5).unwrap().data().iter().all(|&v| v == 0.0));
        let t = Tensor::full(&[2, 2], 0.5);
        assert!(binarize(&t, 0.5).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(binarize(&t, 0.0).is_err());
        assert!(binarize(&t, 1.0).is_err());
    }

    #[test]
    fn undefined_classes_are_excluded() {
        let r = EvalReport {
            intersection: vec![1, 0, 0],
            union: vec![2, 0, 4],
            n_samples: 1,
        };
        assert_eq!(r.per_class_iou(), vec![Some(0.5), None, Some(0.0)]);
        assert_eq!(r.miou(), Some(0.25));
    }

    #[test]
    fn shape_errors() {
        let mut r = EvalReport::new(1);
        let g = grid(&[1, 0]);
        assert!(accumulate_iou(&mut r, &g, &grid(&[1, 0, 1]), &Tensor::full(&[1, 2], 1.0)).is_err());
        assert!(accumulate_iou(&mut r, &g, &g, &Tensor::full(&[1, 3], 1.0)).is_err());
        assert!(accumulate_iou(&mut EvalReport::new(2), &g, &g, &Tensor::full(&[1, 2], 1.0)).is_err());
    }
}
