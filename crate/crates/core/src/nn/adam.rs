use crate::error::{Error, Result};
use crate::nn::{Gradients, PolicyParams};

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(params: &PolicyParams, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: PolicyParams::zeros(params.state_dim(), params.hidden()),
            v: PolicyParams::zeros(params.state_dim(), params.hidden()),
        }
    }

    pub fn first_moment(&self) -> &Gradients {
        &self.m
    }

    pub fn second_moment(&self) -> &Gradients {
        &self.v
    }

    /// Applies one update. A non-finite gradient leaves everything untouched.
    pub fn step(&mut self, params: &mut PolicyParams, grads: &Gradients) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.m) {
            return Err(Error::DimensionMismatch {
                expected: params.num_params(),
                got: grads.num_params(),
            });
        }
        if !grads.is_finite() {
            return Err(Error::NonFinite("gradient"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `gamma` every `step_size` iterations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLr {
    pub base_lr: f64,
    pub step_size: u64,
    pub gamma: f64,
}

impl StepLr {
    pub fn new(base_lr: f64) -> Self {
        StepLr {
            base_lr,
            step_size: 1000,
            gamma: 0.5,
        }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.base_lr * self.gamma.powi((iteration / self.step_size) as i32)
    }

    /// Sets `opt.lr` for the given count of completed iterations.
    pub fn apply(&self, opt: &mut Adam, iteration: u64) {
        opt.lr = self.lr_at(iteration);
    }
}
