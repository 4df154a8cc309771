use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{MfsanModel, ParamGroup};
use crate::scalar::Scalar;

/// Minibatch SGD with heavy-ball momentum:
/// `v <- momentum * v - lr * multiplier * grad`, then `param <- param + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdMomentum<T> {
    pub momentum: T,
    velocities: Vec<Tensor<T>>,
    multipliers: Vec<T>,
}

impl<T: Scalar> SgdMomentum<T> {
    /// Zero velocities; `scratch_multiplier` scales the learning rate of every
    /// branch parameter, the shared extractor uses 1.
    pub fn new(model: &MfsanModel<T>, momentum: T, scratch_multiplier: T) -> Self {
        let velocities = model
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        let multipliers = model
            .param_groups()
            .into_iter()
            .map(|g| match g {
                ParamGroup::Common => T::one(),
                ParamGroup::Branch(_) => scratch_multiplier,
            })
            .collect();
        Self {
            momentum,
            velocities,
            multipliers,
        }
    }

    pub fn velocities(&self) -> &[Tensor<T>] {
        &self.velocities
    }

    pub fn multipliers(&self) -> &[T] {
        &self.multipliers
    }

    pub fn set_velocities(&mut self, v: Vec<Tensor<T>>) -> Result<()> {
        if v.len() != self.velocities.len()
            || v.iter().zip(&self.velocities).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("velocity shapes do not match the model".into()));
        }
        self.velocities = v;
        Ok(())
    }

    /// One update of every parameter with base learning rate `lr`.
    pub fn step(&mut self, model: &mut MfsanModel<T>, grads: &[Tensor<T>], lr: T) -> Result<()> {
        let params = model.params_mut();
        if params.len() != grads.len() || grads.len() != self.velocities.len() {
            return Err(Error::Contract(format!(
                "{} params, {} grads, {} velocities",
                params.len(),
                grads.len(),
                self.velocities.len()
            )));
        }
        for (((p, g), v), &mult) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.velocities)
            .zip(&self.multipliers)
        {
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd step", p.shape(), g.shape()));
            }
            let rate = lr * mult;
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv - rate * gv;
                *pv = *pv + *vv;
            }
        }
        Ok(())
    }
}
