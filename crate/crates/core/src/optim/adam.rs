use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;

/// Moments for one flat parameter array.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Keeps the rows at `index` (each `width` wide), in order.
    pub fn gather(&self, index: &[usize], width: usize) -> AdamState {
        AdamState {
            m: crate::appearance::gather_rows(&self.m, width, index),
            v: crate::appearance::gather_rows(&self.v, width, index),
            step: self.step,
        }
    }

    /// Appends zeroed moments for `count` new values.
    pub fn grow(&mut self, count: usize) {
        self.m.resize(self.m.len() + count, 0.0);
        self.v.resize(self.v.len() + count, 0.0);
    }
}

/// One bias-corrected Adam update. Coordinates with a non-finite gradient
/// keep both their value and their moments; their count is returned.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, eps: f64) -> usize {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), state.len());
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    let mut skipped = 0;
    for i in 0..params.len() {
        let g = grads[i];
        if !g.is_finite() {
            skipped += 1;
            continue;
        }
        let m = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        let v = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        params[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
    }
    skipped
}
