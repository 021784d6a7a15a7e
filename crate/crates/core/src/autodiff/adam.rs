use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam moment buffers and hyperparameters for one parameter list.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[&Tensor], learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Applies one bias-corrected Adam update in place, then clears the
/// gradients.
pub fn adam_step(params: &mut [&mut Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(Error::contract(format!(
            "adam state tracks {} parameters, got {}",
            state.first.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.grad().is_none() {
            return Err(Error::contract(format!("parameter {i} has no gradient")));
        }
        if p.numel() != state.first[i].len() {
            return Err(Error::shape("adam_step", p.shape(), &[state.first[i].len()]));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = p.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.first[i], &mut state.second[i]);
        for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= state.learning_rate * mhat / (vhat.sqrt() + state.epsilon);
        }
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(x: f64) -> Tensor {
        Tensor::vector(vec![x]).with_requires_grad(true)
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = scalar_param(0.7);
        let mut state = AdamState::new(&[&p], 0.1);
        for _ in 0..3 {
            p.accumulate_grad(&[0.0]);
            adam_step(&mut [&mut p], &mut state).unwrap();
        }
        assert_eq!(p.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar_param(1.0);
        let mut state = AdamState::new(&[&p], 0.001);
        p.accumulate_grad(&[1.0]);
        adam_step(&mut [&mut p], &mut state).unwrap();
        assert!((p.data()[0] - (1.0 - 0.001)).abs() < 1e-10);
        assert!(p.grad().is_none());
        assert_eq!(state.step_count(), 1);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        let mut p = scalar_param(1.0);
        let mut state = AdamState::new(&[&p], 0.1);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let x = p.data()[0];
            p.accumulate_grad(&[2.0 * x]);
            adam_step(&mut [&mut p], &mut state).unwrap();
            let now = p.data()[0].abs();
            assert!(now < prev, "|x| went from {prev} to {now}");
            prev = now;
        }
    }

    #[test]
    fn missing_gradient_is_rejected() {
        let mut p = scalar_param(1.0);
        let mut state = AdamState::new(&[&p], 0.1);
        assert!(matches!(
            adam_step(&mut [&mut p], &mut state),
            Err(Error::Contract(_))
        ));
    }
}
