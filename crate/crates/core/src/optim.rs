//! SGD with heavy-ball momentum and a step-decay learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub decay_gamma: f64,
    pub decay_step: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr0: 0.05,
            momentum: 0.9,
            decay_gamma: 0.5,
            decay_step: 200,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.decay_gamma > 0.0 && self.decay_gamma <= 1.0) {
            return Err(Error::config(format!(
                "decay_gamma must be in (0,1], got {}",
                self.decay_gamma
            )));
        }
        if self.decay_step == 0 {
            return Err(Error::config("decay_step must be > 0"));
        }
        Ok(())
    }

    /// `lr0 * decay_gamma^floor(step / decay_step)`
    pub fn lr_at(&self, step: u64) -> f64 {
        let k = step / self.decay_step;
        self.lr0 * self.decay_gamma.powi(k.min(i32::MAX as u64) as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
    pub step_count: u64,
}

impl OptimState {
    /// Zero velocity buffers, one per parameter shape.
    pub fn new<'a>(config: SgdConfig, shapes: impl IntoIterator<Item = &'a [usize]>) -> Result<Self> {
        config.validate()?;
        Ok(OptimState {
            config,
            velocity: shapes.into_iter().map(Tensor::zeros).collect(),
            step_count: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.config.lr_at(self.step_count)
    }
}

/// One update of every parameter:
/// `v <- momentum * v + g`, `p <- p - lr(step) * v`; then the step counter
/// advances and `grads` are zeroed.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor>,
    grads: &mut [Tensor],
    state: &mut OptimState,
) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if grads.len() != params.len() || state.velocity.len() != params.len() {
        return Err(Error::state(format!(
            "sgd_step: {} parameters, {} gradients, {} velocity buffers",
            params.len(),
            grads.len(),
            state.velocity.len()
        )));
    }
    for (i, ((p, g), v)) in params.iter().zip(grads.iter()).zip(&state.velocity).enumerate() {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(format!(
                "sgd_step: parameter {i} has shape {:?}, gradient {:?}, velocity {:?}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    let lr = state.lr();
    let m = state.config.momentum;
    for ((p, g), v) in params.into_iter().zip(grads.iter_mut()).zip(&mut state.velocity) {
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data_mut()).zip(v.data_mut()) {
            *vv = m * *vv + *gv;
            *pv -= lr * *vv;
            *gv = 0.0;
        }
    }
    state.step_count += 1;
    Ok(())
}
