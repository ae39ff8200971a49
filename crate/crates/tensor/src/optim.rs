use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// One parameter update from the gradients held in a [`ParamStore`].
///
/// Every trainable entry must carry a gradient; after the step all
/// gradients are cleared.
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore) -> Result<()>;
    fn learning_rate(&self) -> f64;
}

fn check_grads(params: &ParamStore) -> Result<()> {
    for id in params.ids() {
        if params.is_trainable(id) && params.grad(id).is_none() {
            return Err(TensorError::contract(
                "optimizer step",
                format!("parameter {} has no gradient", params.name(id)),
            ));
        }
    }
    Ok(())
}

/// Plain gradient descent: `p <- p - lr * grad`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Sgd {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Sgd { lr }
    }
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        check_grads(params)?;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.is_trainable(id) {
                continue;
            }
            let grad = params.take_grad(id).expect("checked above");
            for (p, g) in params.get_mut(id).data_mut().iter_mut().zip(grad.data()) {
                *p -= self.lr * g;
            }
        }
        params.zero_grad();
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}

/// Adaptive-moment variant behind the same step contract.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        assert!(lr > 0.0, "learning rate must be positive");
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        check_grads(params)?;
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        let ids: Vec<_> = params.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            if !params.is_trainable(id) {
                continue;
            }
            let grad = params.take_grad(id).expect("checked above");
            let (m, v) = self.moments[slot].get_or_insert_with(|| {
                (
                    Tensor::zeros(grad.shape().to_vec()),
                    Tensor::zeros(grad.shape().to_vec()),
                )
            });
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = grad.data()[i];
                let mi = &mut m.data_mut()[i];
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                let mhat = *mi / bc1;
                let vi = &mut v.data_mut()[i];
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let vhat = *vi / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        params.zero_grad();
        Ok(())
    }

    fn learning_rate(&self) -> f64 {
        self.lr
    }
}
