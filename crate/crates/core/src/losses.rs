//! Supervised Dice loss, flip-consistency losses and their weighted sum.

use alloc::format;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Smoothing term in the Dice denominator.
pub const DICE_EPS: f64 = 1e-5;

/// Weights of the two consistency terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// Weight of the segmentation consistency loss.
    pub lambda1: f64,
    /// Weight of the feature consistency loss.
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 2e-3,
            lambda2: 2e-4,
        }
    }
}

impl LossWeights {
    pub const SUPERVISED_ONLY: LossWeights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite() && self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::InvalidValue(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }

    pub fn is_supervised_only(&self) -> bool {
        self.lambda1 == 0.0 && self.lambda2 == 0.0
    }
}

fn check_same_shape(tape: &Tape, a: Var, b: Var) -> Result<()> {
    tape.value(a).same_shape(tape.value(b))
}

/// `1 − mean_k 2·Σ pred·gt / (Σ(pred + gt) + ε)` over the leading class axis.
///
/// A class absent from both `pred` and `gt` contributes a Dice term of 0,
/// i.e. a loss of 1 for that class.
pub fn dice_loss(tape: &mut Tape, pred: Var, gt: Var) -> Result<Var> {
    check_same_shape(tape, pred, gt)?;
    let shape = tape.value(pred).shape().to_vec();
    let classes = shape[0];
    let rest: usize = shape[1..].iter().product();
    let pred = tape.reshape(pred, &[classes, rest])?;
    let gt = tape.reshape(gt, &[classes, rest])?;
    let overlap = tape.mul(pred, gt)?;
    let overlap = tape.sum(overlap, Some(&[1]))?;
    let total = tape.add(pred, gt)?;
    let total = tape.sum(total, Some(&[1]))?;
    let denom = tape.add_scalar(total, DICE_EPS);
    let ratio = tape.div(overlap, denom)?;
    let dice = tape.mean(ratio, None)?;
    let neg = tape.mul_scalar(dice, -2.0);
    Ok(tape.add_scalar(neg, 1.0))
}

fn mean_squared_difference(tape: &mut Tape, target: Var, student: Var) -> Result<Var> {
    check_same_shape(tape, target, student)?;
    let target = tape.detach(target);
    let diff = tape.sub(student, target)?;
    let sq = tape.square(diff);
    tape.mean(sq, None)
}

/// Mean squared difference between the teacher's segmentation and the
/// student's segmentation of the flipped input, already flipped back.
///
/// The teacher side is detached: no gradient reaches it.
pub fn seg_consistency(tape: &mut Tape, y_teacher: Var, y_student_flipped: Var) -> Result<Var> {
    mean_squared_difference(tape, y_teacher, y_student_flipped)
}

/// As [`seg_consistency`], applied to BEV features.
pub fn feat_consistency(tape: &mut Tape, f_teacher: Var, f_student_flipped: Var) -> Result<Var> {
    mean_squared_difference(tape, f_teacher, f_student_flipped)
}

/// `l_sup + λ₁·l_sc + λ₂·l_fc` on the tape.
pub fn total_loss(tape: &mut Tape, l_sup: Var, l_sc: Var, l_fc: Var, w: LossWeights) -> Result<Var> {
    let sc = tape.mul_scalar(l_sc, w.lambda1);
    let fc = tape.mul_scalar(l_fc, w.lambda2);
    let partial = tape.add(l_sup, sc)?;
    tape.add(partial, fc)
}

/// Scalar loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub sup: f64,
    pub sc: f64,
    pub fc: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Builds a breakdown whose total follows the weighted-sum formula.
    pub fn new(sup: f64, sc: f64, fc: f64, w: LossWeights) -> Self {
        LossBreakdown {
            sup,
            sc,
            fc,
            total: sup + w.lambda1 * sc + w.lambda2 * fc,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.sup.is_finite() && self.sc.is_finite() && self.fc.is_finite() && self.total.is_finite()
    }
}
