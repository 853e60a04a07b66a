use std::collections::BTreeMap;

use crate::nn::Module;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adamw(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            weight_decay: 0.0,
            ..Self::adamw(lr)
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    steps: i32,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with optional decoupled weight decay. Moment buffers and step
/// counts are kept per tensor name and created on first update.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Updates every tensor whose name passes `trainable`; others are not touched.
    pub fn step(&mut self, module: &mut dyn Module, trainable: &dyn Fn(&str) -> bool) {
        self.steps += 1;
        let c = self.config;
        let state = &mut self.state;
        module.visit_mut("", &mut |tensor| {
            if !trainable(tensor.name) {
                return;
            }
            let n = tensor.value.len();
            let mom = state.entry(tensor.name.to_string()).or_insert_with(|| Moments {
                steps: 0,
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            mom.steps += 1;
            let bc1 = 1.0 - c.beta1.powi(mom.steps);
            let bc2 = 1.0 - c.beta2.powi(mom.steps);
            for i in 0..n {
                let g = tensor.grad[i];
                let p = &mut tensor.value[i];
                if c.weight_decay != 0.0 {
                    *p -= c.lr * c.weight_decay * *p;
                }
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        });
    }
}
