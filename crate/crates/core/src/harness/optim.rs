//! AdamW with decoupled weight decay, and the linear learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::tensor::{Gradients, ParamId, ParamStore, Real};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Optimizer state, indexed like the parameter store. Entries appear the
/// first time a parameter receives a gradient.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamWState<T> {
    pub moments: Vec<Option<Moments<T>>>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(num_params: usize) -> Self {
        Self {
            moments: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Moments<T>> {
        self.moments.get(id.index()).and_then(|m| m.as_ref())
    }
}

/// One AdamW update of every trainable parameter that has a gradient:
///
/// ```text
/// theta <- theta - lr * wd * theta
/// m <- b1 m + (1 - b1) g          v <- b2 v + (1 - b2) g^2
/// theta <- theta - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
/// ```
pub fn adamw_step<T: Real>(
    store: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamWState<T>,
    lr: f64,
    cfg: &AdamWConfig,
) {
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    let (b1, b2) = (T::lit(cfg.beta1), T::lit(cfg.beta2));
    let one = T::one();
    let lr_t = T::lit(lr);
    let decay = one - T::lit(lr * cfg.weight_decay);
    let eps = T::lit(cfg.eps);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let Some(g) = grads.param(id) else { continue };
        if !store.is_trainable(id) {
            continue;
        }
        let n = g.len();
        let mom = state.moments[id.index()].get_or_insert_with(|| Moments {
            step: 0,
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        });
        mom.step += 1;
        let bc1 = one - b1.powi(mom.step as i32);
        let bc2 = one - b2.powi(mom.step as i32);
        let theta = store.tensor_mut(id).data_mut();
        for i in 0..n {
            mom.m[i] = b1 * mom.m[i] + (one - b1) * g[i];
            mom.v[i] = b2 * mom.v[i] + (one - b2) * g[i] * g[i];
            let m_hat = mom.m[i] / bc1;
            let v_hat = mom.v[i] / bc2;
            theta[i] = theta[i] * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// `lr0 * (1 - step / total_steps)`, never below `floor`.
pub fn lr_schedule(step: usize, total_steps: usize, lr0: f64, floor: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = step.min(total_steps) as f64 / total_steps as f64;
    (lr0 * (1.0 - frac)).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(value: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.insert("theta", Tensor::from_f64(&[1], &[value]).unwrap()).unwrap();
        (s, id)
    }

    fn grad_of(store: &ParamStore<f64>, id: ParamId, g: f64) -> Gradients<f64> {
        let mut grads = Gradients::empty(store.len());
        grads.params[id.index()] = Some(vec![g]);
        grads
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut s, id) = single(0.7);
        let mut st = AdamWState::new(1);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        for _ in 0..3 {
            let g = grad_of(&s, id, 0.0);
            adamw_step(&mut s, &g, &mut st, 1e-2, &cfg);
        }
        assert_eq!(s.tensor(id).data()[0], 0.7);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = 1, v_hat = 1 after bias correction, so the step is
        // lr / (1 + eps).
        let (mut s, id) = single(0.0);
        let mut st = AdamWState::new(1);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let lr = 5e-5;
        let g = grad_of(&s, id, 1.0);
        adamw_step(&mut s, &g, &mut st, lr, &cfg);
        let moved = s.tensor(id).data()[0];
        assert!((moved + lr / (1.0 + 1e-8)).abs() < 1e-15);
        assert!((moved.abs() - lr).abs() < 1e-6);
    }

    #[test]
    fn decay_alone_shrinks_by_exact_factor() {
        let (mut s, id) = single(2.0);
        let mut st = AdamWState::new(1);
        let cfg = AdamWConfig::default();
        let lr = 0.1;
        let g = grad_of(&s, id, 0.0);
        adamw_step(&mut s, &g, &mut st, lr, &cfg);
        assert_eq!(s.tensor(id).data()[0], 2.0 * (1.0 - lr * cfg.weight_decay));
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(lr_schedule(0, 100, 5e-5, 0.0), 5e-5);
        assert_eq!(lr_schedule(100, 100, 5e-5, 0.0), 0.0);
        assert_eq!(lr_schedule(50, 100, 5e-5, 0.0), 2.5e-5);
        assert_eq!(lr_schedule(100, 100, 5e-5, 1e-6), 1e-6);
    }
}
