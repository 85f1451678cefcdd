//! Adam optimizer over a [`ParamStore`].

use super::{NnError, ParamStore, Real};

/// Hyperparameters; defaults are lr 1e-3, betas (0.9, 0.999), eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First and second moment estimates, slot-aligned with the parameters.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn for_params(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = params.slots().iter().map(|s| vec![T::zero(); s.data.len()]).collect();
        Self { m: zeros.clone(), v: zeros }
    }
}

/// One Adam update with bias correction; `t` counts steps from 1.
pub fn adam_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &ParamStore<T>,
    state: &mut AdamState<T>,
    t: usize,
    cfg: &AdamParams,
) -> Result<(), NnError> {
    if t == 0 {
        return Err(NnError::InvalidOp("adam step count starts at 1".into()));
    }
    if !params.same_layout(grads) {
        return Err(NnError::ShapeMismatch("gradient layout differs from parameters".into()));
    }
    if state.m.len() != params.slot_count() {
        return Err(NnError::ShapeMismatch("optimizer state layout differs".into()));
    }
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let corr1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t as i32));
    let corr2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    for (si, slot) in params.slots.iter_mut().enumerate() {
        let g = &grads.slots()[si].data;
        let m = &mut state.m[si];
        let v = &mut state.v[si];
        for i in 0..slot.data.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            slot.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        let n = values.len();
        p.add_slot("w", vec![n], values).unwrap();
        p
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = store(vec![0.5, -1.25, 3.0]);
        let grads = params.zeros_like();
        let mut state = AdamState::for_params(&params);
        let before = params.clone();
        for t in 1..=10 {
            adam_step(&mut params, &grads, &mut state, t, &AdamParams::default()).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let cfg = AdamParams::default();
        let mut params = store(vec![0.0]);
        let mut grads = params.zeros_like();
        grads.slot_mut(crate::nncore::SlotId(0)).data[0] = 0.37;
        let mut state = AdamState::for_params(&params);
        let mut prev = 0.0f64;
        let mut last_step = 0.0f64;
        for t in 1..=10_000 {
            adam_step(&mut params, &grads, &mut state, t, &cfg).unwrap();
            let cur = params.slot(crate::nncore::SlotId(0)).data[0];
            last_step = (cur - prev).abs();
            prev = cur;
        }
        // positive gradient, so parameters move down by ~lr each step
        assert!(prev < 0.0);
        assert!((last_step - cfg.lr).abs() / cfg.lr < 0.01, "step {last_step}");
    }

    #[test]
    fn rejects_mismatched_layout_and_zero_t() {
        let mut params = store(vec![1.0]);
        let grads = store(vec![1.0, 2.0]);
        let mut state = AdamState::for_params(&params);
        assert!(adam_step(&mut params, &grads, &mut state, 1, &AdamParams::default()).is_err());
        let grads = params.zeros_like();
        assert!(adam_step(&mut params, &grads, &mut state, 0, &AdamParams::default()).is_err());
    }
}
