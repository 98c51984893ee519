//! Learning-rate schedule and the two optimizers.

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Grads, Param};
use crate::nn::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(Error::Config(format!("unknown optimizer `{other}` (expected adam or sgd)"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Adam => "adam",
            Self::Sgd => "sgd",
        })
    }
}

/// Step decay: `lr0 * decay^floor((epoch - 1) / every)`, epochs 1-based.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    let steps = epoch.saturating_sub(1) / config.lr_decay_every.max(1);
    config.lr0 * config.lr_decay.powf(steps as f64)
}

/// Optimizer moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState<T> {
    Adam { step: u64, m: Vec<Vec<T>>, v: Vec<Vec<T>> },
    Sgd { velocity: Vec<Vec<T>> },
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, params: &[Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect::<Vec<_>>();
        match kind {
            OptimizerKind::Adam => Self::Adam {
                step: 0,
                m: zeros(),
                v: zeros(),
            },
            OptimizerKind::Sgd => Self::Sgd { velocity: zeros() },
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Adam { .. } => OptimizerKind::Adam,
            Self::Sgd { .. } => OptimizerKind::Sgd,
        }
    }

    /// Named moment buffers, for serialization.
    pub fn buffers(&self) -> Vec<(&'static str, &Vec<Vec<T>>)> {
        match self {
            Self::Adam { m, v, .. } => vec![("adam.m", m), ("adam.v", v)],
            Self::Sgd { velocity } => vec![("sgd.velocity", velocity)],
        }
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut Vec<Vec<T>>)> {
        match self {
            Self::Adam { m, v, .. } => vec![("adam.m", m), ("adam.v", v)],
            Self::Sgd { velocity } => vec![("sgd.velocity", velocity)],
        }
    }

    pub fn step_count(&self) -> u64 {
        match self {
            Self::Adam { step, .. } => *step,
            Self::Sgd { .. } => 0,
        }
    }

    pub fn set_step_count(&mut self, n: u64) {
        if let Self::Adam { step, .. } = self {
            *step = n;
        }
    }

    /// Applies one update. Rejects non-finite gradients before touching any
    /// parameter.
    pub fn apply(&mut self, params: &mut [Param<T>], grads: &Grads<T>, rate: f64, config: &TrainConfig) -> Result<()> {
        for (p, g) in params.iter().zip(grads) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        let lr = T::of(rate);
        match self {
            Self::Adam { step, m, v } => {
                *step += 1;
                let b1 = T::of(config.adam_beta1);
                let b2 = T::of(config.adam_beta2);
                let eps = T::of(config.adam_epsilon);
                let c1 = T::one() - T::of(config.adam_beta1.powi(*step as i32));
                let c2 = T::one() - T::of(config.adam_beta2.powi(*step as i32));
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
                    for (((x, &g), m), v) in p.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = b1 * *m + (T::one() - b1) * g;
                        *v = b2 * *v + (T::one() - b2) * g * g;
                        let mhat = *m / c1;
                        let vhat = *v / c2;
                        *x -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
            Self::Sgd { velocity } => {
                let mu = T::of(config.sgd_momentum);
                for ((p, g), vel) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
                    for ((x, &g), u) in p.data.iter_mut().zip(g).zip(vel.iter_mut()) {
                        *u = mu * *u + g;
                        *x -= lr * *u;
                    }
                }
            }
        }
        Ok(())
    }
}
