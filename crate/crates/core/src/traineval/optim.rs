//! Adam with L2 weight decay folded into the gradient, and a step schedule.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub decay: f64,
    pub every: usize,
}

impl LrSchedule {
    /// Learning rate during 0-based `epoch`.
    pub fn at(&self, epoch: usize) -> f64 {
        let drops = epoch.checked_div(self.every).unwrap_or(0);
        self.base * self.decay.powi(drops as i32)
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamState<T> {
    pub step: u64,
    m: Vec<Option<Tensor<T>>>,
    v: Vec<Option<Tensor<T>>>,
}

impl<T: Real> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

/// One update of every trainable parameter that carries a gradient.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, weight_decay: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);
    let n = store.len();
    state.m.resize_with(n, || None);
    state.v.resize_with(n, || None);
    let (b1, b2) = (T::of(BETA1), T::of(BETA2));
    let (ob1, ob2) = (T::one() - b1, T::one() - b2);
    let (wd, lr_t, eps) = (T::of(weight_decay), T::of(lr), T::of(ADAM_EPS));
    let (bc1, bc2) = (T::of(bc1), T::of(bc2));
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let Some(g) = p.grad.as_ref() else { continue };
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(p.tensor.shape()));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(p.tensor.shape()));
        let theta = p.tensor.data_mut();
        for (((x, &gi), mi), vi) in theta
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi + wd * *x;
            *mi = b1 * *mi + ob1 * gi;
            *vi = b2 * *vi + ob2 * gi * gi;
            let mh = *mi / bc1;
            let vh = *vi / bc2;
            *x = *x - lr_t * mh / (vh.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_drops() {
        let s = LrSchedule { base: 3.5e-4, decay: 0.1, every: 40 };
        assert_eq!(s.at(0), 3.5e-4);
        assert!((s.at(85) - 3.5e-6).abs() < 1e-18);
        assert!((s.at(40) - 3.5e-5).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_no_decay_is_fixed_point() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::full(&[3], 0.7), true, None).unwrap();
        store.get_mut(id).grad = Some(Tensor::zeros(&[3]));
        let mut st = AdamState::new();
        for _ in 0..5 {
            adam_step(&mut store, &mut st, 1e-3, 0.0);
        }
        assert_eq!(store.get(id).tensor.data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn first_step_on_square() {
        // f(x) = x^2 at x = 1: g = 2, m = 0.2, v = 0.004, m_hat = 2, v_hat = 4
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::full(&[1], 1.0), true, None).unwrap();
        store.get_mut(id).grad = Some(Tensor::full(&[1], 2.0));
        let mut st = AdamState::new();
        adam_step(&mut store, &mut st, 0.01, 0.0);
        let expect = 1.0 - 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((store.get(id).tensor.data()[0] - expect).abs() < 1e-15);
    }
}
