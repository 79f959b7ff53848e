//! AdamW with decoupled weight decay. Non-trainable entries are never
//! touched — the freezing contract is enforced here, not at call sites.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::params::ParamStore;
use crate::numeric::scalar::Scalar;
use crate::numeric::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamWParams {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            lr: 2e-5,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
        }
    }
}

pub struct OptimState<E: Scalar = f32> {
    pub hyper: AdamWParams,
    step: u64,
    moments: HashMap<String, (Tensor<E>, Tensor<E>)>,
}

impl<E: Scalar> OptimState<E> {
    pub fn new(hyper: AdamWParams) -> Self {
        OptimState {
            hyper,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update over every trainable entry. Requires gradients for all
/// of them; moments are lazily allocated per parameter.
pub fn adamw_step<E: Scalar>(store: &mut ParamStore<E>, state: &mut OptimState<E>) -> Result<()> {
    let trainable: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in &trainable {
        if !store.get(name)?.grad_ready {
            return Err(Error::State(format!(
                "trainable parameter '{name}' has no gradient for this step"
            )));
        }
    }

    state.step += 1;
    let h = state.hyper;
    let b1 = E::from_f64(h.beta1);
    let b2 = E::from_f64(h.beta2);
    let one_m_b1 = E::from_f64(1.0 - h.beta1);
    let one_m_b2 = E::from_f64(1.0 - h.beta2);
    let bias1 = E::from_f64(1.0 - h.beta1.powi(state.step as i32));
    let bias2 = E::from_f64(1.0 - h.beta2.powi(state.step as i32));
    let lr = E::from_f64(h.lr);
    let wd = E::from_f64(h.weight_decay);
    let eps = E::from_f64(h.eps);

    for name in &trainable {
        let entry = store.get_mut(name)?;
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (Tensor::zeros(entry.tensor.shape()), Tensor::zeros(entry.tensor.shape())));
        if m.shape() != entry.tensor.shape() {
            return Err(Error::State(format!(
                "moment shape {:?} does not match parameter '{name}' {:?}",
                m.shape(),
                entry.tensor.shape()
            )));
        }
        let theta = entry.tensor.data_mut();
        let grad = entry.grad.data();
        let md = m.data_mut();
        let vd = v.data_mut();
        for i in 0..theta.len() {
            let g = grad[i];
            md[i] = b1 * md[i] + one_m_b1 * g;
            vd[i] = b2 * vd[i] + one_m_b2 * g * g;
            let m_hat = md[i] / bias1;
            let v_hat = vd[i] / bias2;
            // decoupled decay: applied to the parameter, not the gradient
            theta[i] = theta[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * theta[i]);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(theta: f64, grad: f64, trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::full(&[1], theta), trainable).unwrap();
        s.accumulate_grad("p", &Tensor::full(&[1], grad)).unwrap();
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut s = store_with(1.5, 0.0, true);
        let mut st = OptimState::new(AdamWParams {
            weight_decay: 0.0,
            ..AdamWParams::default()
        });
        adamw_step(&mut s, &mut st).unwrap();
        assert_eq!(s.tensor("p").unwrap().data()[0], 1.5);
    }

    #[test]
    fn single_step_matches_scalar_oracle() {
        // hand-rolled one-step update at the default hyperparameters
        let h = AdamWParams::default();
        let (theta0, g) = (1.0f64, 1.0f64);
        let m = (1.0 - h.beta1) * g;
        let v = (1.0 - h.beta2) * g * g;
        let m_hat = m / (1.0 - h.beta1);
        let v_hat = v / (1.0 - h.beta2);
        let want = theta0 - h.lr * (m_hat / (v_hat.sqrt() + h.eps) + h.weight_decay * theta0);

        let mut s = store_with(theta0, g, true);
        let mut st = OptimState::new(h);
        adamw_step(&mut s, &mut st).unwrap();
        assert!((s.tensor("p").unwrap().data()[0] - want).abs() < 1e-10);
    }

    #[test]
    fn frozen_entry_bit_identical_despite_gradient() {
        let mut s: ParamStore<f32> = ParamStore::new();
        s.insert("frozen", Tensor::full(&[3], -0.25), false).unwrap();
        s.insert("live", Tensor::full(&[3], 0.5), true).unwrap();
        // populate both gradient buffers
        s.accumulate_grad("frozen", &Tensor::full(&[3], 7.0)).unwrap();
        s.accumulate_grad("live", &Tensor::full(&[3], 7.0)).unwrap();
        let before = s.hash_prefix("frozen");
        let mut st = OptimState::new(AdamWParams::default());
        adamw_step(&mut s, &mut st).unwrap();
        assert_eq!(s.hash_prefix("frozen"), before);
        assert_ne!(s.tensor("live").unwrap().data()[0], 0.5);
    }

    #[test]
    fn missing_gradient_is_state_error() {
        let mut s: ParamStore<f64> = ParamStore::new();
        s.insert("p", Tensor::full(&[1], 1.0), true).unwrap();
        let mut st = OptimState::new(AdamWParams::default());
        assert!(matches!(adamw_step(&mut s, &mut st), Err(Error::State(_))));
    }

    #[test]
    fn step_counter_increments() {
        let mut s = store_with(1.0, 0.5, true);
        let mut st = OptimState::new(AdamWParams::default());
        for want in 1..=4 {
            adamw_step(&mut s, &mut st).unwrap();
            assert_eq!(st.step_count(), want);
            s.zero_grads();
            s.accumulate_grad("p", &Tensor::full(&[1], 0.5)).unwrap();
        }
    }
}
