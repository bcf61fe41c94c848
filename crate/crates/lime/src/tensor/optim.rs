//! AdamW with decoupled weight decay and global-norm gradient clipping.
//!
//! The optimizer is deliberately policy-free: callers resolve the learning
//! rate and weight decay per parameter (schedules and parameter groups live
//! in the training layer) and hand them to [`AdamW::update`]. Moment
//! buffers are keyed by parameter name so they can be serialized next to
//! the parameters themselves and training can resume bit-exactly.

use std::collections::BTreeMap;

use super::Tensor;

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed optimizer steps; drives bias correction.
    pub step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW { beta1, beta2, eps, step: 0, state: BTreeMap::new() }
    }

    /// Advances the step counter; call once before the `update`s of a step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one AdamW update to `param` in place.
    pub fn update(&mut self, name: &str, param: &mut [f32], grad: &[f32], lr: f32, wd: f32) {
        assert_eq!(param.len(), grad.len(), "grad size mismatch for {}", name);
        assert!(self.step > 0, "begin_step before update");
        let mom = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        assert_eq!(mom.m.len(), param.len(), "moment size mismatch for {}", name);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        for i in 0..param.len() {
            let g = grad[i];
            mom.m[i] = b1 * mom.m[i] + (1.0 - b1) * g;
            mom.v[i] = b2 * mom.v[i] + (1.0 - b2) * g * g;
            let mhat = mom.m[i] as f64 / bc1;
            let vhat = mom.v[i] as f64 / bc2;
            let upd = mhat / (vhat.sqrt() + self.eps) + (wd * param[i]) as f64;
            param[i] -= (lr as f64 * upd) as f32;
        }
    }

    /// Moment buffers in deterministic (name-sorted) order.
    pub fn state(&self) -> impl Iterator<Item = (&String, &Moments)> {
        self.state.iter()
    }

    pub fn insert_state(&mut self, name: String, moments: Moments) {
        self.state.insert(name, moments);
    }

    pub fn state_of(&self, name: &str) -> Option<&Moments> {
        self.state.get(name)
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f32) -> f64 {
    let mut ssq = 0.0f64;
    for g in grads.values() {
        ssq += g.data.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
    }
    let norm = ssq.sqrt();
    if norm > max_norm as f64 {
        let scale = (max_norm as f64 / norm) as f32;
        for g in grads.values_mut() {
            for x in g.data.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}
