use super::param::ParamStore;
use super::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay: each step also subtracts `lr * weight_decay * w`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily so that
/// parameters appended to the store after construction are picked up.
#[derive(Debug, Clone)]
pub struct Adam<S = f64> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the current gradients. Gradients are left in
    /// place; callers reset them with [`ParamStore::zero_grad`].
    pub fn step(&mut self, params: &mut ParamStore<S>) {
        self.step += 1;
        while self.m.len() < params.len() {
            let shape = params
                .get(super::param::ParamId(self.m.len()))
                .value
                .shape()
                .to_vec();
            self.m.push(Tensor::zeros(&shape));
            self.v.push(Tensor::zeros(&shape));
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = S::of(1.0 - beta1.powi(t));
        let bc2 = S::of(1.0 - beta2.powi(t));
        let (b1, b2, lr, eps) = (S::of(beta1), S::of(beta2), S::of(lr), S::of(eps));
        let decay = S::one() - lr * S::of(weight_decay);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grads = p.grad.data();
            for (((w, &g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (S::one() - b1) * g;
                *vi = b2 * *vi + (S::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                if weight_decay != 0.0 {
                    *w *= decay;
                }
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
