//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::{Gradients, NumericsError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for every parameter of one store.
///
/// `step` counts optimizer updates. Each parameter also tracks how many
/// updates it has received, since parameters that get no gradient in a step
/// (another dataset's adapter, say) are skipped and must not be bias-corrected
/// as if they had been updated.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub param_steps: Vec<u64>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let mut s = Self { config, step: 0, m: Vec::new(), v: Vec::new(), param_steps: Vec::new() };
        s.sync(store);
        s
    }

    /// Extends the state with zero moments for parameters added to `store`
    /// after this state was created.
    pub fn sync(&mut self, store: &ParamStore) {
        for (id, _, value) in store.iter().skip(self.m.len()) {
            debug_assert_eq!(id.index(), self.m.len());
            self.m.push(Tensor::zeros(value.shape()));
            self.v.push(Tensor::zeros(value.shape()));
            self.param_steps.push(0);
        }
    }

    /// One update of every parameter that received a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), NumericsError> {
        self.sync(store);
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = grads.get(id) {
                if g.shape() != store.get(id).shape() {
                    return Err(NumericsError::shape(
                        "adam_step",
                        format!("gradient for `{}` has shape {:?}", store.name(id), g.shape()),
                    ));
                }
                if !g.all_finite() {
                    return Err(NumericsError::NonFiniteGradient { name: store.name(id).to_string() });
                }
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            self.param_steps[i] += 1;
            let t = self.param_steps[i] as i32;
            let bc1 = 1.0 - beta1.powi(t);
            let bc2 = 1.0 - beta2.powi(t);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * gk;
                v[k] = beta2 * v[k] + (1.0 - beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
