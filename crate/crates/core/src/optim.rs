//! Adam with a step-decayed learning rate.

use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Multiplier applied at every decay event; in `(0, 1]`.
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay_factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers and step counter for every parameter of one store.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    config: AdamConfig,
    decay_events: u32,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = |s: &ParamStore<T>| -> Vec<Tensor<T>> {
            s.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect()
        };
        Self {
            config,
            decay_events: 0,
            step: 0,
            first: zeros(store),
            second: zeros(store),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// `learning_rate · decay_factor^k` after `k` decay events.
    pub fn effective_lr(&self) -> f64 {
        self.config.learning_rate * self.config.decay_factor.powi(self.decay_events as i32)
    }

    pub fn decay(&mut self) {
        self.decay_events += 1;
    }

    pub fn decay_events(&self) -> u32 {
        self.decay_events
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update of every non-frozen parameter from its
    /// accumulated gradient. Gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let t = self.step as i32;
        let bc1 = T::one() - T::of(c.beta1.powi(t));
        let bc2 = T::one() - T::of(c.beta2.powi(t));
        let lr = T::of(self.effective_lr());
        let eps = T::of(c.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            for (((w, &g), m), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m).zip(v) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Step-decay schedule: one decay event at the end of every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepDecay {
    pub every: usize,
}

impl StepDecay {
    /// Whether a decay event fires after finishing `epoch` (0-based).
    pub fn fires_after(&self, epoch: usize) -> bool {
        self.every > 0 && (epoch + 1) % self.every == 0
    }
}
