//! Parameterised building blocks recorded onto an [`autodiff::Graph`].

use autodiff::{Graph, ParamId, ParamStore, Rng, RunningStatUpdate, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Whether batch norm uses batch statistics (and updates running ones) or
/// the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    /// Weight `[inputs, outputs]` and bias drawn from `U(-1/√in, 1/√in)`.
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform(&[inputs, outputs], bound, rng))?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::uniform(&[outputs], bound, rng))?) } else { None };
        Ok(Self { weight, bias, inputs, outputs })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        Ok(match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)?
            }
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]))?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))?,
        })
    }

    /// Normalises over axis 1 of `[B, C, ...]`. Train mode queues a running
    /// statistics update on the graph.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm_train(x, gamma, beta, BN_EPS)?;
                g.push_running_update(RunningStatUpdate {
                    mean_buffer: self.running_mean,
                    var_buffer: self.running_var,
                    batch_mean: stats.mean,
                    batch_var: stats.unbiased_var,
                    momentum: BN_MOMENTUM,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                Ok(g.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)?)
            }
        }
    }
}

/// 3×3 same-padding convolution without bias (a batch norm follows).
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, rng: &mut Rng) -> Result<Self> {
        let fan_in = (in_channels * 9) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::randn(&[out_channels, in_channels, 3, 3], std, rng))?;
        Ok(Self { weight, in_channels, out_channels })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        Ok(g.conv2d(x, w, None, 1, 1)?)
    }
}
