use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{Gradients, MlpModel};

/// Classic (heavy-ball) momentum SGD state:
/// `v ← momentum·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl OptimizerState {
    /// `sizes` gives the length of each parameter tensor.
    pub fn new(learning_rate: f64, momentum: f64, sizes: &[usize]) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            velocity: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        })
    }

    pub fn for_model(model: &MlpModel, learning_rate: f64, momentum: f64) -> Result<Self> {
        let sizes: Vec<usize> = model
            .layers()
            .iter()
            .flat_map(|l| [l.weight.values().len(), l.bias.len()])
            .collect();
        OptimizerState::new(learning_rate, momentum, &sizes)
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update to a list of parameter tensors. Nothing is modified
    /// if any gradient entry is non-finite.
    pub fn step(&mut self, mut params: Vec<&mut [f64]>, grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::shape(
                "sgd_step tensors",
                self.velocity.len(),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        for (t, ((p, g), v)) in params.iter().zip(grads).zip(&self.velocity).enumerate() {
            if p.len() != v.len() || g.len() != v.len() {
                return Err(Error::shape(
                    "sgd_step tensor",
                    v.len(),
                    format!("{} params / {} grads (tensor {t})", p.len(), g.len()),
                ));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient tensor {t}, entry {i} = {}",
                    g[i]
                )));
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            for ((pi, &gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= self.learning_rate * *vi;
            }
        }
        Ok(())
    }
}

pub fn sgd_step(model: &mut MlpModel, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    state.step(model.param_slices_mut(), &grads.slices())
}
