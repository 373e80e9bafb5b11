use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// SGD with classical momentum: `v ← μ·v + g`, `θ ← θ − η·v`.
#[derive(Debug)]
pub struct Sgd<T: Float> {
    params: Vec<Tensor<T>>,
    velocity: Vec<Vec<T>>,
    lr: T,
    momentum: T,
}

impl<T: Float> Sgd<T> {
    pub fn new(params: Vec<Tensor<T>>, lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        let velocity = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Ok(Sgd {
            params,
            velocity,
            lr: T::lit(lr),
            momentum: T::lit(momentum),
        })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Applies one update and clears the gradients. Fails before touching
    /// any parameter if one of them has no gradient.
    pub fn step(&mut self) -> Result<()> {
        let grads = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                p.grad().ok_or_else(|| {
                    Error::contract(format!("parameter {i} of shape {:?} has no gradient", p.shape()))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        for ((p, v), g) in self.params.iter().zip(&mut self.velocity).zip(grads) {
            let (mu, lr) = (self.momentum, self.lr);
            p.update_data(|theta| {
                for ((t, v), g) in theta.iter_mut().zip(v.iter_mut()).zip(g) {
                    *v = mu * *v + g;
                    *t -= lr * *v;
                }
            });
            p.zero_grad();
        }
        Ok(())
    }
}
