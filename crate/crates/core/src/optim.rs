//! Bias-corrected Adam.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment estimates for a fixed list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    /// Zero moments matching `params`.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState {
            v: m.clone(),
            m,
            step: 0,
        }
    }

    /// One update of `params` in place from `grads`, at learning rate `lr`.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ParamMismatch(format!(
                "adam state for {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            p.same_shape(g)?;
            p.same_shape(m)?;
        }
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - math::pow(BETA1, t);
        let c2 = 1.0 - math::pow(BETA2, t);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let iter = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
            for (((p, &g), m), v) in iter {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (math::sqrt(v_hat) + EPS);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::from_fn(&[3, 2], |i| i as f64)];
        let before = p.clone();
        let mut s = AdamState::new(&p);
        for _ in 0..3 {
            s.step(p.iter_mut(), &[Tensor::zeros(&[3, 2])], 0.1).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::full(&[4], 1.0)];
        let mut s = AdamState::new(&p);
        s.step(p.iter_mut(), &[Tensor::full(&[4], 0.37)], 1e-3).unwrap();
        for &x in p[0].data() {
            assert!(((1.0 - x) - 1e-3).abs() < 1e-9);
        }
        s.step(p.iter_mut(), &[Tensor::full(&[4], -2.0)], 1e-3).unwrap();
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = vec![Tensor::from_fn(&[5], |i| i as f64 * 0.3)];
            let mut s = AdamState::new(&p);
            for k in 0..20 {
                let g = Tensor::from_fn(&[5], |i| math::sin((i + k) as f64));
                s.step(p.iter_mut(), &[g], 1e-2).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatches_are_errors() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut s = AdamState::new(&p);
        assert!(s.step(p.iter_mut(), &[Tensor::zeros(&[3])], 0.1).is_err());
        assert!(s.step(p.iter_mut(), &[], 0.1).is_err());
    }
}
