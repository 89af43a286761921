//! Adam optimizer with bias correction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// First/second moment buffers for one parameter.
#[derive(Clone, Debug)]
pub struct AdamSlot<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Optimizer state shared across all parameters of one training run.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step counter; increments exactly once per `adam_step` call.
    pub step: u64,
    pub slots: BTreeMap<String, AdamSlot<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            slots: BTreeMap::new(),
        }
    }
}

impl<T: Scalar> Default for AdamState<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Applies one bias-corrected Adam update to every named parameter that has
/// an accumulated gradient, replacing each tensor with its updated value.
///
/// Parameters without a gradient are left untouched (their moments do not
/// decay either). A non-finite gradient aborts with the parameter's path.
pub fn adam_step<T: Scalar>(
    state: &mut AdamState<T>,
    params: &mut [(String, Tensor<T>)],
    lr: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step;
    let beta1 = T::of_f64(state.beta1);
    let beta2 = T::of_f64(state.beta2);
    let one_m_b1 = T::of_f64(1.0 - state.beta1);
    let one_m_b2 = T::of_f64(1.0 - state.beta2);
    let bc1 = T::of_f64(1.0 - state.beta1.powi(t as i32));
    let bc2 = T::of_f64(1.0 - state.beta2.powi(t as i32));
    let eps = T::of_f64(state.eps);
    let step_size = T::of_f64(lr);

    for (path, tensor) in params.iter_mut() {
        let grad = match tensor.grad() {
            Some(g) => g,
            None => continue,
        };
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient for parameter '{path}'"
            )));
        }
        let slot = state.slots.entry(path.clone()).or_insert_with(|| AdamSlot {
            m: vec![T::zero(); tensor.numel()],
            v: vec![T::zero(); tensor.numel()],
        });
        if slot.m.len() != tensor.numel() {
            return Err(Error::Shape(format!(
                "optimizer state for '{path}' has {} elements, parameter has {}",
                slot.m.len(),
                tensor.numel()
            )));
        }
        let mut data = tensor.data().to_vec();
        for i in 0..data.len() {
            let g = grad[i];
            slot.m[i] = beta1 * slot.m[i] + one_m_b1 * g;
            slot.v[i] = beta2 * slot.v[i] + one_m_b2 * g * g;
            let m_hat = slot.m[i] / bc1;
            let v_hat = slot.v[i] / bc2;
            data[i] = data[i] - step_size * m_hat / (v_hat.sqrt() + eps);
        }
        *tensor = Tensor::leaf(tensor.shape().to_vec(), data, true);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_with_grad(value: f64, grad: f64) -> (String, Tensor<f64>) {
        let t = Tensor::from_vec(&[1], vec![value]).unwrap().requires_grad();
        t.accumulate_leaf_grad(&[grad]);
        ("p".to_string(), t)
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t=1, g=1: m_hat = v_hat = 1, update = -lr / (1 + eps)
        let mut state = AdamState::new();
        let mut params = vec![param_with_grad(0.0, 1.0)];
        adam_step(&mut state, &mut params, 0.01).unwrap();
        let expected = -0.01 / (1.0 + 1e-8);
        assert!((params[0].1.item() - expected).abs() < 1e-15);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_grad_zero_state_no_motion() {
        let mut state = AdamState::new();
        let mut params = vec![param_with_grad(1.5, 0.0)];
        adam_step(&mut state, &mut params, 0.1).unwrap();
        assert_eq!(params[0].1.item(), 1.5);
    }

    #[test]
    fn deterministic_across_identical_runs() {
        let run = || {
            let mut state = AdamState::new();
            let mut params = vec![param_with_grad(0.3, -0.7)];
            for _ in 0..5 {
                adam_step(&mut state, &mut params, 0.05).unwrap();
                params[0].1.accumulate_leaf_grad(&[-0.7]);
            }
            params[0].1.item()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn non_finite_grad_names_parameter() {
        let mut state = AdamState::new();
        let t = Tensor::from_vec(&[1], vec![0.0f64]).unwrap().requires_grad();
        t.accumulate_leaf_grad(&[f64::NAN]);
        let mut params = vec![("encoder.stem.weight".to_string(), t)];
        let err = adam_step(&mut state, &mut params, 0.1).unwrap_err();
        assert!(err.to_string().contains("encoder.stem.weight"));
    }

    #[test]
    fn missing_grad_skips_parameter() {
        let mut state = AdamState::new();
        let t = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap().requires_grad();
        let mut params = vec![("q".to_string(), t)];
        adam_step(&mut state, &mut params, 0.1).unwrap();
        assert_eq!(params[0].1.data(), &[1.0, 2.0]);
        assert!(state.slots.is_empty());
    }
}
