//! Five-parameter logistic remapping of predicted scores onto ground truth:
//! `q(x) = b1 * (1/2 - 1/(1 + exp(b2 * (x - b3)))) + b4 * x + b5`.

use nalgebra::{Matrix5, Vector5};
use serde::{Deserialize, Serialize};

use super::metrics::median;
use crate::error::{Error, Result};

const MAX_ITERS: usize = 500;
const REL_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticParams {
    pub beta: [f64; 5],
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LogisticParams {
    /// The identity-like linear map `b4 * x + b5`.
    pub fn linear(slope: f64, intercept: f64) -> Self {
        Self {
            beta: [0.0, 1.0, 0.0, slope, intercept],
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        let [b1, b2, b3, b4, b5] = self.beta;
        // 1/2 - 1/(1 + e^z) = sigmoid(z) - 1/2
        b1 * (sigmoid(b2 * (x - b3)) - 0.5) + b4 * x + b5
    }

    pub fn apply_all(&self, xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| self.apply(x)).collect()
    }

    pub fn sse(&self, xs: &[f64], ys: &[f64]) -> f64 {
        xs.iter().zip(ys).map(|(&x, &y)| (self.apply(x) - y).powi(2)).sum()
    }

    fn jacobian_row(&self, x: f64) -> Vector5<f64> {
        let [b1, b2, b3, _, _] = self.beta;
        let s = sigmoid(b2 * (x - b3));
        let ds = s * (1.0 - s);
        Vector5::new(s - 0.5, b1 * ds * (x - b3), -b1 * ds * b2, x, 1.0)
    }
}

/// Ordinary least-squares line `(slope, intercept)`; a flat line when `x`
/// has no spread.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return (0.0, my);
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Levenberg-Marquardt from one starting point.
fn refine(start: LogisticParams, x: &[f64], y: &[f64]) -> LogisticParams {
    let mut p = start;
    let mut sse = p.sse(x, y);
    let mut mu = 1e-3;
    for _ in 0..MAX_ITERS {
        let mut jtj = Matrix5::<f64>::zeros();
        let mut jtr = Vector5::<f64>::zeros();
        for (&xi, &yi) in x.iter().zip(y) {
            let j = p.jacobian_row(xi);
            let r = yi - p.apply(xi);
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut accepted = None;
        while mu < 1e16 {
            let mut a = jtj;
            for k in 0..5 {
                a[(k, k)] += mu * jtj[(k, k)].max(1e-12);
            }
            let Some(step) = a.lu().solve(&jtr) else {
                mu *= 10.0;
                continue;
            };
            let mut cand = p;
            for k in 0..5 {
                cand.beta[k] += step[k];
            }
            let cand_sse = cand.sse(x, y);
            if cand_sse.is_finite() && cand_sse <= sse {
                accepted = Some((cand, cand_sse));
                mu = (mu / 3.0).max(1e-15);
                break;
            }
            mu *= 4.0;
        }
        let Some((cand, cand_sse)) = accepted else { break };
        let change = (sse - cand_sse) / sse.max(f64::MIN_POSITIVE);
        p = cand;
        sse = cand_sse;
        if change < REL_TOL || sse == 0.0 {
            break;
        }
    }
    p
}

/// Least-squares fit of the logistic map from predictions to targets.
///
/// The primary start takes `b4, b5` from the linear fit, `b1 = range(y)`,
/// `b3 = median(x)` and `b2 = 1/std(x)`. Further deterministic starts move
/// `b3` to other quantiles of `x` and vary the sign and size of `b2`, since
/// steep off-centre curves have local minima. The result is never worse
/// than the plain linear fit.
pub fn fit_logistic(pred: &[f64], target: &[f64]) -> Result<LogisticParams> {
    if pred.len() != target.len() {
        return Err(Error::Data(format!("length mismatch: {} vs {}", pred.len(), target.len())));
    }
    if pred.len() < 6 {
        return Err(Error::Data(format!("logistic fit needs at least 6 points, got {}", pred.len())));
    }
    if pred.iter().chain(target).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in logistic fit input".into()));
    }
    let (slope, intercept) = linear_fit(pred, target);
    let linear = LogisticParams::linear(slope, intercept);
    let n = pred.len() as f64;
    let mean = pred.iter().sum::<f64>() / n;
    let std = (pred.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return Ok(linear);
    }
    let (lo, hi) = target.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let mut sorted = pred.to_vec();
    sorted.sort_by(f64::total_cmp);
    let quantile = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
    let mut centres = vec![median(pred).expect("non-empty")];
    centres.extend([0.1, 0.25, 0.75, 0.9].map(quantile));
    let mut best = linear;
    let mut best_sse = linear.sse(pred, target);
    for b3 in centres {
        for b2 in [1.0 / std, -1.0 / std, 4.0 / std, -4.0 / std] {
            let start = LogisticParams {
                beta: [hi - lo, b2, b3, slope, intercept],
            };
            let fit = refine(start, pred, target);
            let sse = fit.sse(pred, target);
            if fit.beta.iter().all(|b| b.is_finite()) && sse < best_sse {
                best = fit;
                best_sse = sse;
            }
        }
    }
    Ok(best)
}
