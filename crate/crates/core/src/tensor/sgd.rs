use super::Tensor;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// Update rule per parameter `p` with gradient `g` and velocity `v`:
/// `v <- momentum * v + (g + weight_decay * p)`, then `p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate >= 0.0 && learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {weight_decay}")));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// Applies one update. `grads[i]` belongs to `params[i]` and is consumed.
    ///
    /// Velocity buffers are created as zeros on the first step and bound to
    /// the parameter order seen then.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], grads: Vec<Option<Tensor>>) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients supplied for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let grads = params
            .iter()
            .zip(grads)
            .map(|((name, p), g)| match g {
                None => Err(Error::MissingGrad(name.to_string())),
                Some(g) if g.shape() != p.shape() => Err(Error::Shape(format!(
                    "gradient for `{name}` has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                ))),
                Some(g) => Ok(g),
            })
            .collect::<Result<Vec<_>>>()?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        } else if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, (_, p))| v.shape() != p.shape())
        {
            return Err(Error::Shape("parameter set differs from the one this optimizer was bound to".into()));
        }
        for (((_, p), g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + (gv + self.weight_decay * *pv);
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}
