//! AdamW with decoupled weight decay and a linear-warmup-then-constant schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in tensor {tensor} at index {index}")]
    NonFiniteGradient { tensor: usize, index: usize },
    #[error("tensor {tensor}: {params} parameters but {grads} gradients")]
    ShapeMismatch { tensor: usize, params: usize, grads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            step: 0,
            first: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }
}

/// One AdamW update over every tensor. Weight decay multiplies parameters by
/// `1 − lr·wd` independently of the gradient; the adaptive step uses
/// bias-corrected moments. Nothing is modified if any gradient is non-finite.
pub fn optimizer_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[&[T]],
    state: &mut OptimizerState<T>,
    lr: T,
    weight_decay: T,
    cfg: &AdamWConfig,
) -> Result<(), OptimError> {
    for (tensor, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || state.first[tensor].len() != p.len() {
            return Err(OptimError::ShapeMismatch {
                tensor,
                params: p.len(),
                grads: g.len(),
            });
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(OptimError::NonFiniteGradient { tensor, index });
        }
    }
    state.step += 1;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let eps = T::lit(cfg.eps);
    let t = state.step as i32;
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let decay = T::one() - lr * weight_decay;
    for (tensor, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.first[tensor];
        let v = &mut state.second[tensor];
        for k in 0..p.len() {
            let gk = g[k];
            m[k] = b1 * m[k] + (T::one() - b1) * gk;
            v[k] = b2 * v[k] + (T::one() - b2) * gk * gk;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] = p[k] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Number of warmup steps: `ceil(ratio · total)`.
pub fn warmup_steps(warmup_ratio: f64, total_steps: u64) -> u64 {
    // The small slack keeps e.g. 0.05·2000 from rounding up to 101.
    (warmup_ratio * total_steps as f64 - 1e-9).ceil().max(0.0) as u64
}

/// Linear ramp from 0 to `peak` over `warmup` steps, then constant.
pub fn linear_warmup(step: u64, peak: f64, warmup: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        peak
    } else {
        peak * step as f64 / warmup as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(params: &mut Vec<f64>, grads: &[f64], state: &mut OptimizerState<f64>, lr: f64, wd: f64) -> Result<(), OptimError> {
        optimizer_step(&mut [params.as_mut_slice()], &[grads], state, lr, wd, &AdamWConfig::default())
    }

    #[test]
    fn zero_grads_without_decay_leave_params() {
        let mut p = vec![0.5, -1.5, 3.0];
        let before = p.clone();
        let mut s = OptimizerState::new(&[3]);
        run(&mut p, &[0.0; 3], &mut s, 1e-3, 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn zero_grads_apply_exact_decoupled_decay() {
        let (lr, wd) = (1e-5, 0.001);
        let mut p = vec![0.5, -1.5, 3.0];
        let before = p.clone();
        let mut s = OptimizerState::new(&[3]);
        run(&mut p, &[0.0; 3], &mut s, lr, wd).unwrap();
        for (a, b) in p.iter().zip(&before) {
            assert_eq!(*a, b * (1.0 - 1e-8));
        }
        let mut expected = before.clone();
        for _ in 1..25 {
            run(&mut p, &[0.0; 3], &mut s, lr, wd).unwrap();
        }
        for _ in 0..25 {
            expected.iter_mut().for_each(|x| *x *= 1.0 - lr * wd);
        }
        assert_eq!(p, expected);
    }

    #[test]
    fn nan_gradient_is_rejected_without_side_effects() {
        let mut p = vec![1.0, 2.0];
        let mut s = OptimizerState::new(&[2]);
        let err = run(&mut p, &[0.1, f64::NAN], &mut s, 1e-3, 0.0).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient { tensor: 0, index: 1 });
        assert_eq!(p, vec![1.0, 2.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![0.0, 0.0];
        let mut s = OptimizerState::new(&[2]);
        run(&mut p, &[2.0, -0.5], &mut s, 0.01, 0.0).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn works_for_f32() {
        let mut p = vec![1.0f32];
        let mut s = OptimizerState::<f32>::new(&[1]);
        optimizer_step(&mut [p.as_mut_slice()], &[&[1.0f32][..]], &mut s, 0.1, 0.0, &AdamWConfig::default()).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-5);
    }

    #[test]
    fn warmup_schedule() {
        let w = warmup_steps(0.05, 200);
        assert_eq!(w, 10);
        assert_eq!(warmup_steps(0.05, 2000), 100);
        assert_eq!(warmup_steps(0.05, 10), 1);
        assert_eq!(linear_warmup(0, 1e-5, w), 0.0);
        assert_eq!(linear_warmup(w, 1e-5, w), 1e-5);
        assert!((linear_warmup(5, 1e-5, w) - 5e-6).abs() < 1e-20);
        assert_eq!(linear_warmup(w + 100, 1e-5, w), 1e-5);
        assert_eq!(linear_warmup(0, 1e-5, 0), 1e-5);
        // continuity at the boundary
        let before = linear_warmup(w - 1, 1e-5, w);
        assert!(before < 1e-5 && 1e-5 - before <= 1e-5 / w as f64 + 1e-20);
    }
}
