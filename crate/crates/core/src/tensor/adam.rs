use super::{ParamStore, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-9,
        }
    }
}

/// Moment buffers for every parameter of one [`ParamStore`], indexed by
/// [`ParamId`](super::ParamId).
#[derive(Debug, Clone)]
pub struct AdamState<T = f32> {
    pub step: u64,
    pub hyper: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(hyper: AdamConfig) -> Self {
        Self {
            step: 0,
            hyper,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Drops all moments and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn first_moment(&self, id: usize) -> Option<&[T]> {
        self.m.get(id).map(Vec::as_slice)
    }
}

/// One bias-corrected Adam update at the configured learning rate.
pub fn adam_step<T: Real>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    let lr = state.hyper.lr;
    adam_step_with_lr(store, state, lr)
}

/// Adam update with an explicit learning rate (used for warmup).
///
/// Frozen parameters (`requires_grad == false`) are skipped. Gradients are
/// left in place.
pub fn adam_step_with_lr<T: Real>(
    store: &mut ParamStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if let Some(p) = store
        .iter()
        .find(|p| p.tensor.requires_grad() && p.tensor.grad().is_none())
    {
        return Err(Error::UninitializedGradient(p.name.clone()));
    }
    while state.m.len() < store.len() {
        let n = store.get(state.m.len()).tensor.numel();
        state.m.push(vec![T::zero(); n]);
        state.v.push(vec![T::zero(); n]);
    }
    state.step += 1;
    let h = state.hyper;
    let (b1, b2) = (T::of(h.beta1), T::of(h.beta2));
    let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
    let bc1 = T::one() - T::of(h.beta1.powi(state.step as i32));
    let bc2 = T::one() - T::of(h.beta2.powi(state.step as i32));
    let (lr, eps) = (T::of(lr), T::of(h.epsilon));
    for (id, p) in store.iter_mut().enumerate() {
        if !p.tensor.requires_grad() {
            continue;
        }
        let grad = p.tensor.grad().expect("checked above").to_vec();
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        for (((w, &g), m), v) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
