//! Adam optimizer with bias correction.

use super::Parameter;
use crate::error::Result;
use std::collections::HashMap;

/// Adam with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`. Moment state is
/// keyed by parameter name and survives freeze toggles between stages.
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one update to every trainable parameter that accumulated a
    /// gradient, then clears all gradients. A parameter whose gradient is
    /// absent or zero is left unchanged by the update rule.
    pub fn step(&mut self, params: &[Parameter]) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params {
            if !p.trainable() {
                continue;
            }
            let Some(grad) = p.tensor().grad() else {
                continue;
            };
            let n = grad.len();
            let (m, v) = self
                .moments
                .entry(p.name().to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            p.tensor().with_data_mut(|w| {
                for i in 0..n {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    w[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            });
            p.tensor().clear_grad();
        }
        Ok(())
    }
}
