//! Single-stage end-to-end training.

mod loss;
mod optim;
mod state;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use loss::{cross_entropy, cross_entropy_grad, l2_grad, l2_loss, total_loss, total_loss_grad, LossParts};
pub use optim::{lr_at, OptimizerKind, OptimizerState};
pub use state::TrainState;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::{Grads, Model};
use crate::nn::Real;
use crate::patch::{iterate_training, PatchRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub lambda: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub sgd_momentum: f64,
    /// Global gradient-norm clip; off unless set.
    pub grad_clip: Option<f64>,
    /// Horizontal-flip augmentation of the training patches.
    pub augment_flip: bool,
    /// Save the training state every N epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr0: 2e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_decay: 0.98,
            lr_decay_every: 3,
            lambda: 1.0,
            batch_size: 1,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            sgd_momentum: 0.9,
            grad_clip: None,
            augment_flip: true,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("adam_epsilon", self.adam_epsilon),
            ("lr_decay", self.lr_decay),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2), ("sgd_momentum", self.sgd_momentum)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config("epochs, batch_size and lr_decay_every must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Per-epoch mean losses, one line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_ld: f64,
    pub mean_ls: f64,
    pub mean_ltotal: f64,
    pub lr: f64,
}

/// Where a run writes its state and log. Both are optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    /// Directory receiving `state.qnet` (and `last_good.qnet` on divergence).
    pub dir: Option<PathBuf>,
    /// Append-only JSON-lines log of [`EpochStats`].
    pub log: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            dir: Some(dir.to_path_buf()),
            log: Some(dir.join("train.log")),
        }
    }

    fn append_log(&self, stats: &EpochStats) -> Result<()> {
        let Some(path) = &self.log else { return Ok(()) };
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(f, "{}", serde_json::to_string(stats).expect("finite stats")).map_err(|e| Error::io(path, e))
    }
}

/// Loss parts and gradients for one patch.
pub fn sample_gradient<T: Real>(model: &Model<T>, patch: &PatchRecord, lambda: f64) -> Result<(LossParts, Grads<T>)> {
    let pixels = patch.pixels.mapv(|v| T::of(v as f64));
    let (out, trace) = model.forward_train(&pixels)?;
    let out64 = out.to_f64();
    let parts = total_loss(out64.d_logits.as_deref(), patch.class, out64.s, patch.score, lambda)?;
    let (d_logits, d_s) = total_loss_grad(out64.d_logits.as_deref(), patch.class, out64.s, patch.score, lambda)?;
    let d_logits: Option<Vec<T>> = d_logits.map(|d| d.into_iter().map(T::of).collect());
    Ok((parts, model.backward(&trace, d_logits.as_deref(), T::of(d_s))))
}

/// Mean loss and gradient over a batch. Per-sample work runs under `exec`;
/// the reduction is sequential in batch order, so the result does not
/// depend on the execution mode.
pub fn batch_gradient<T: Real>(
    model: &Model<T>,
    patches: &[PatchRecord],
    batch: &[usize],
    lambda: f64,
    exec: Exec,
) -> Result<(LossParts, Grads<T>)> {
    let per_sample = exec.map(batch, |&i| sample_gradient(model, &patches[i], lambda));
    let mut grads = model.zero_grads();
    let mut parts = LossParts::default();
    let n = batch.len() as f64;
    let scale = T::of(1.0 / n);
    for r in per_sample {
        let (p, g) = r?;
        parts.distortion += p.distortion / n;
        parts.quality += p.quality / n;
        parts.total += p.total / n;
        for (dst, src) in grads.iter_mut().zip(g) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s * scale;
            }
        }
    }
    Ok((parts, grads))
}

fn clip_global_norm<T: Real>(grads: &mut Grads<T>, max_norm: f64) {
    let norm = grads
        .iter()
        .flatten()
        .map(|v| {
            let x = v.to_f64_lossy();
            x * x
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::of(max_norm / norm);
        grads.iter_mut().flatten().for_each(|v| *v *= k);
    }
}

/// Trains from a fresh optimizer state.
pub fn train<T: Real>(
    model: Model<T>,
    patches: &[PatchRecord],
    config: &TrainConfig,
    outputs: &TrainOutputs,
    exec: Exec,
) -> Result<TrainState<T>> {
    config.validate()?;
    let state = TrainState::new(model, config.clone());
    resume(state, patches, outputs, exec)
}

/// Continues a run from `state.epoch + 1` through `state.config.epochs`.
/// The epoch order depends only on `(seed, epoch)`, so a resumed run
/// follows the same trajectory as an uninterrupted one.
pub fn resume<T: Real>(mut state: TrainState<T>, patches: &[PatchRecord], outputs: &TrainOutputs, exec: Exec) -> Result<TrainState<T>> {
    let config = state.config.clone();
    config.validate()?;
    if patches.is_empty() {
        return Err(Error::Data("no training patches".into()));
    }
    let m = state.model.config().num_distortions;
    if state.model.config().variant.has_distortion_head() {
        if let Some(p) = patches.iter().find(|p| p.class == 0 || p.class > m) {
            return Err(Error::Data(format!("patch class {} outside the model's 1..={m}", p.class)));
        }
    }
    if let Some(dir) = &outputs.dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    while state.epoch < config.epochs {
        let epoch = state.epoch + 1;
        let rate = lr_at(epoch, &config);
        let last_good = state.clone();
        let mut sums = LossParts::default();
        let mut steps = 0usize;
        let mut failure = None;
        for batch in iterate_training(patches.len(), config.batch_size, config.seed, epoch) {
            let step = batch_gradient(&state.model, patches, &batch, config.lambda, exec).and_then(|(parts, mut grads)| {
                if let Some(c) = config.grad_clip {
                    clip_global_norm(&mut grads, c);
                }
                state.optimizer.apply(state.model.params_mut(), &grads, rate, &config)?;
                Ok(parts)
            });
            match step {
                Ok(parts) => {
                    sums.distortion += parts.distortion;
                    sums.quality += parts.quality;
                    sums.total += parts.total;
                    steps += 1;
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let n = steps.max(1) as f64;
        let stats = EpochStats {
            epoch,
            mean_ld: sums.distortion / n,
            mean_ls: sums.quality / n,
            mean_ltotal: sums.total / n,
            lr: rate,
        };
        if failure.is_some() || !stats.mean_ltotal.is_finite() {
            let checkpoint = match &outputs.dir {
                Some(dir) => {
                    let path = dir.join("last_good.qnet");
                    last_good.save(&path)?;
                    Some(path)
                }
                None => None,
            };
            return Err(match failure {
                Some(e @ Error::NonFiniteGradient(_)) | Some(e @ Error::Shape(_)) | Some(e @ Error::Data(_)) if checkpoint.is_none() => e,
                _ => Error::Diverged { epoch, checkpoint },
            });
        }
        state.epoch = epoch;
        state.curve.push(stats);
        outputs.append_log(&stats)?;
        if let Some(dir) = &outputs.dir {
            if config.checkpoint_every > 0 && epoch % config.checkpoint_every == 0 {
                state.save(&dir.join("state.qnet"))?;
            }
        }
    }
    if let Some(dir) = &outputs.dir {
        state.save(&dir.join("state.qnet"))?;
        state.model.save(&dir.join("model.qnet"))?;
    }
    Ok(state)
}
