use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Array, Gradients, ParameterSet};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
        #[serde(default)]
        weight_decay: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
        #[serde(default)]
        weight_decay: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgd {
            lr,
            momentum,
            weight_decay: 0.0,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => *lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidArgument(format!("learning rate {lr}")));
        }
        Ok(())
    }
}

/// Per-parameter optimizer moments plus the step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    /// Momentum buffer (SGD) or first moment (Adam).
    pub first: BTreeMap<String, Array>,
    /// Second moment (Adam only).
    pub second: BTreeMap<String, Array>,
}

/// Applies one update to every trainable parameter that has a gradient.
pub fn step(
    config: &OptimizerConfig,
    state: &mut OptimizerState,
    params: &mut ParameterSet,
    grads: &Gradients,
) -> Result<()> {
    config.validate()?;
    state.step += 1;
    let t = state.step as f64;
    for (name, p) in params.iter_mut() {
        if !p.trainable {
            continue;
        }
        let Some(g) = grads.get(name) else {
            continue;
        };
        if g.shape() != p.value.shape() {
            return Err(Error::shape(
                "optimizer",
                format!(
                    "`{name}`: grad {:?} vs value {:?}",
                    g.shape(),
                    p.value.shape()
                ),
            ));
        }
        let shape = p.value.shape().to_vec();
        match *config {
            OptimizerConfig::Sgd {
                lr,
                momentum,
                weight_decay,
            } => {
                let lr = lr * p.lr_mult;
                let buf = state
                    .first
                    .entry(name.clone())
                    .or_insert_with(|| Array::zeros(&shape));
                for ((w, gv), b) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(buf.data_mut())
                {
                    let d = gv + weight_decay * *w;
                    *b = momentum * *b + d;
                    *w -= lr * *b;
                }
            }
            OptimizerConfig::Adam {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let lr = lr * p.lr_mult;
                let m = state
                    .first
                    .entry(name.clone())
                    .or_insert_with(|| Array::zeros(&shape));
                let v = state
                    .second
                    .entry(name.clone())
                    .or_insert_with(|| Array::zeros(&shape));
                let c1 = 1.0 - beta1.powf(t);
                let c2 = 1.0 - beta2.powf(t);
                for (((w, gv), mv), vv) in p
                    .value
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    let d = gv + weight_decay * *w;
                    *mv = beta1 * *mv + (1.0 - beta1) * d;
                    *vv = beta2 * *vv + (1.0 - beta2) * d * d;
                    *w -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
                }
            }
        }
        if !p.value.is_finite() {
            return Err(Error::NonFinite { op: "optimizer" });
        }
    }
    Ok(())
}
