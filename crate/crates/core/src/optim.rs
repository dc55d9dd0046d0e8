//! Adam with bias correction and decoupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Per-parameter first/second moments keyed by parameter name, plus the
/// shared step count.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<(String, Moments)>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    fn moments_for(&mut self, name: &str, len: usize) -> &mut Moments {
        if let Some(pos) = self.moments.iter().position(|(n, _)| n == name) {
            &mut self.moments[pos].1
        } else {
            self.moments.push((
                name.to_string(),
                Moments {
                    m: vec![0.0; len],
                    v: vec![0.0; len],
                },
            ));
            &mut self.moments.last_mut().expect("just pushed").1
        }
    }

    /// One update over every trainable parameter: decoupled weight decay
    /// `p -= lr*wd*p` first, then the bias-corrected Adam delta. Gradients
    /// are read from each tensor's accumulator and left untouched.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        for (name, tensor) in params {
            if !tensor.requires_grad() {
                continue;
            }
            let n = tensor.numel();
            let grad = match tensor.grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    op: "adam_step",
                    index: idx,
                })
                .map_err(|e| {
                    Error::Contract(format!("non-finite gradient in parameter {name:?}: {e}"))
                });
            }
            let moments = self.moments_for(&name, n);
            if moments.m.len() != n {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: vec![moments.m.len()],
                    rhs: vec![n],
                });
            }
            let data = tensor.data_mut();
            for i in 0..n {
                if weight_decay != 0.0 {
                    data[i] -= lr * weight_decay * data[i];
                }
                let g = grad[i];
                moments.m[i] = beta1 * moments.m[i] + (1.0 - beta1) * g;
                moments.v[i] = beta2 * moments.v[i] + (1.0 - beta2) * g * g;
                let m_hat = moments.m[i] / bc1;
                let v_hat = moments.v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
