use serde::{Deserialize, Serialize};

use super::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction over an ordered list of parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    pub states: Vec<AdamState>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Adam {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step_count: 0,
            states: params.iter().map(|p| AdamState { m: vec![0.0; p.len()], v: vec![0.0; p.len()] }).collect(),
        }
    }

    /// One bias-corrected update of every parameter.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor], lr: f64) {
        self.step_count += 1;
        let t = self.step_count as f64;
        let c1 = 1.0 - self.beta1.powf(t);
        let c2 = 1.0 - self.beta2.powf(t);
        let mut n = 0;
        for ((p, g), st) in params.into_iter().zip(grads).zip(self.states.iter_mut()) {
            assert_eq!(p.len(), g.len(), "adam: gradient size mismatch");
            assert_eq!(p.len(), st.m.len(), "adam: state size mismatch");
            for (((x, &gv), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(st.m.iter_mut()).zip(st.v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * gv;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gv * gv;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
            n += 1;
        }
        assert_eq!(n, self.states.len(), "adam: parameter count mismatch");
    }
}
