//! Multi-task objective: softmax cross-entropy on the distortion logits plus
//! a weighted squared error on the quality score.

use crate::error::{Error, Result};
use crate::nn::softmax;

/// `-log softmax(logits)[class - 1]` for a 1-based class index.
pub fn cross_entropy(logits: &[f64], class: usize) -> Result<f64> {
    check_class(logits.len(), class)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    Ok(log_z - logits[class - 1])
}

/// Gradient of [`cross_entropy`] w.r.t. the logits: `softmax - onehot`.
pub fn cross_entropy_grad(logits: &[f64], class: usize) -> Result<Vec<f64>> {
    check_class(logits.len(), class)?;
    let mut g = softmax(logits);
    g[class - 1] -= 1.0;
    Ok(g)
}

fn check_class(m: usize, class: usize) -> Result<()> {
    if class == 0 || class > m {
        return Err(Error::Data(format!("class index {class} outside 1..={m}")));
    }
    Ok(())
}

pub fn l2_loss(s: f64, target: f64) -> f64 {
    (s - target) * (s - target)
}

pub fn l2_grad(s: f64, target: f64) -> f64 {
    2.0 * (s - target)
}

/// Loss terms for one sample.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub distortion: f64,
    pub quality: f64,
    pub total: f64,
}

/// `L_d + lambda * L_s`; quality-only models (no logits) use `L_s` alone.
pub fn total_loss(d_logits: Option<&[f64]>, class: usize, s: f64, target: f64, lambda: f64) -> Result<LossParts> {
    let distortion = match d_logits {
        Some(d) => cross_entropy(d, class)?,
        None => 0.0,
    };
    let quality = l2_loss(s, target);
    let total = match d_logits {
        Some(_) => distortion + lambda * quality,
        None => quality,
    };
    Ok(LossParts {
        distortion,
        quality,
        total,
    })
}

/// Output gradients of [`total_loss`]: `(dL/d_logits, dL/ds)`.
pub fn total_loss_grad(
    d_logits: Option<&[f64]>,
    class: usize,
    s: f64,
    target: f64,
    lambda: f64,
) -> Result<(Option<Vec<f64>>, f64)> {
    match d_logits {
        Some(d) => Ok((Some(cross_entropy_grad(d, class)?), lambda * l2_grad(s, target))),
        None => Ok((None, l2_grad(s, target))),
    }
}
