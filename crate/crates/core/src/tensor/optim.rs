use serde::{Deserialize, Serialize};

use super::{lit, ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// First/second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<F> {
    pub m: Vec<F>,
    pub v: Vec<F>,
    pub step: u64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![F::zero(); len],
            v: vec![F::zero(); len],
            step: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias-corrected moments.
pub fn adamw_step<F: Scalar>(
    params: &mut [F],
    grads: &[F],
    state: &mut AdamState<F>,
    cfg: &AdamWConfig,
    lr: f64,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (lit::<F>(cfg.beta1), lit::<F>(cfg.beta2));
    let c1 = F::one() / (F::one() - b1.powi(t));
    let c2 = F::one() / (F::one() - b2.powi(t));
    let lr_f = lit::<F>(lr);
    let decay = F::one() - lr_f * lit::<F>(cfg.weight_decay);
    let eps = lit::<F>(cfg.eps);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (F::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (F::one() - b2) * g * g;
        let mhat = state.m[i] * c1;
        let vhat = state.v[i] * c2;
        params[i] = params[i] * decay - lr_f * mhat / (vhat.sqrt() + eps);
    }
}

/// AdamW over every trainable parameter in a store.
#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    pub states: Vec<Option<AdamState<F>>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let states = store
            .iter()
            .map(|(_, p)| p.trainable.then(|| AdamState::new(p.tensor.numel())))
            .collect();
        Self { config, states }
    }

    /// Applies one update at learning rate `lr` and clears the gradients.
    /// Parameters without a gradient this step still take the decay and
    /// moment update with a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) {
        for (p, state) in store.iter_mut().zip(&mut self.states) {
            let Some(state) = state else { continue };
            let grad = p
                .grad
                .take()
                .unwrap_or_else(|| vec![F::zero(); p.tensor.numel()]);
            let cfg = if p.decays() {
                self.config
            } else {
                AdamWConfig {
                    weight_decay: 0.0,
                    ..self.config
                }
            };
            adamw_step(p.tensor.data_mut(), &grad, state, &cfg, lr);
        }
    }
}
