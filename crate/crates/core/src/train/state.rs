//! Resumable training state: weights, optimizer moments, epoch counter and
//! the loss curve, stored in one checkpoint container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochStats, OptimizerState, TrainConfig};
use crate::error::{Error, Result};
use crate::model::checkpoint::{read_container, tensors_of, write_container, Container, TensorEntry};
use crate::model::Model;
use crate::nn::Real;

const KIND: &str = "train_state";

#[derive(Clone, Debug)]
pub struct TrainState<T> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub config: TrainConfig,
    /// Last completed epoch (0 before training).
    pub epoch: usize,
    pub curve: Vec<EpochStats>,
}

#[derive(Serialize, Deserialize)]
struct Extra {
    epoch: usize,
    optimizer_step: u64,
    train_config: TrainConfig,
    curve: Vec<EpochStats>,
}

impl<T: Real> TrainState<T> {
    pub fn new(model: Model<T>, config: TrainConfig) -> Self {
        let optimizer = OptimizerState::new(config.optimizer, model.params());
        Self {
            model,
            optimizer,
            config,
            epoch: 0,
            curve: Vec::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let params = self.model.params();
        let mut tensors = tensors_of(params, |_| true);
        for (prefix, buffers) in self.optimizer.buffers() {
            for (p, buf) in params.iter().zip(buffers) {
                tensors.push(TensorEntry {
                    name: format!("{prefix}/{}", p.name),
                    shape: p.shape.clone(),
                    data: buf.iter().map(|v| v.to_f64_lossy() as f32).collect(),
                });
            }
        }
        let extra = Extra {
            epoch: self.epoch,
            optimizer_step: self.optimizer.step_count(),
            train_config: self.config.clone(),
            curve: self.curve.clone(),
        };
        write_container(
            path,
            &Container {
                kind: KIND.into(),
                model_config: Some(self.model.config().clone()),
                tensors,
                extra: serde_json::to_value(extra).expect("state serializes"),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let container = read_container(path)?;
        if container.kind != KIND {
            return Err(Error::format(path, format!("expected a training state, found `{}`", container.kind)));
        }
        let extra: Extra = serde_json::from_value(container.extra.clone())
            .map_err(|e| Error::format(path, format!("bad training metadata: {e}")))?;
        let (params, moments): (Vec<TensorEntry>, Vec<TensorEntry>) =
            container.tensors.iter().cloned().partition(|t| !t.name.contains('/'));
        let model = Model::from_container(
            &Container {
                tensors: params,
                ..container.clone()
            },
            path,
        )?;
        let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
        let mut optimizer = OptimizerState::new(extra.train_config.optimizer, model.params());
        optimizer.set_step_count(extra.optimizer_step);
        for (prefix, buffers) in optimizer.buffers_mut() {
            for (name, buf) in names.iter().zip(buffers.iter_mut()) {
                let key = format!("{prefix}/{name}");
                let t = moments
                    .iter()
                    .find(|t| t.name == key)
                    .ok_or_else(|| Error::format(path, format!("missing optimizer buffer `{key}`")))?;
                if t.data.len() != buf.len() {
                    return Err(Error::format(path, format!("optimizer buffer `{key}` has wrong length")));
                }
                *buf = t.data.iter().map(|&v| T::of(v as f64)).collect();
            }
        }
        Ok(Self {
            model,
            optimizer,
            config: extra.train_config,
            epoch: extra.epoch,
            curve: extra.curve,
        })
    }
}
