//! Target-encoder averaging, the latent prediction loss, the batch-variance
//! regularizer and the collapse indicator.

use crate::error::{Error, Result};
use crate::nn::Real;

pub const EMA_TAU: f64 = 0.99;
/// Mean batch variance strictly below this value counts as collapse.
pub const COLLAPSE_THRESHOLD: f64 = 1e-7;

/// Slow-moving copy of the context encoder's weights used as the target
/// encoder. It never receives optimizer gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState<R> {
    pub theta_bar: Vec<R>,
    pub tau: f64,
}

impl<R: Real> EmaState<R> {
    /// Starts from an exact copy of the context weights.
    pub fn new(theta: &[R], tau: f64) -> Self {
        EmaState {
            theta_bar: theta.to_vec(),
            tau,
        }
    }

    /// `theta_bar = tau * theta_bar + (1 - tau) * theta`, evaluated as
    /// `theta_bar + (1 - tau) * (theta - theta_bar)` so that equal inputs
    /// are an exact fixed point.
    pub fn update(&mut self, theta: &[R]) -> Result<()> {
        if theta.len() != self.theta_bar.len() {
            return Err(Error::Config(format!(
                "ema shape mismatch: {} vs {}",
                self.theta_bar.len(),
                theta.len()
            )));
        }
        let rate = R::cst(1.0 - self.tau);
        for (bar, &cur) in self.theta_bar.iter_mut().zip(theta) {
            *bar += rate * (cur - *bar);
        }
        Ok(())
    }
}

/// Batch mean of per-sample squared L2 distance, with its gradient w.r.t.
/// `pred`. `target` is treated as a constant.
pub fn jepa_loss<R: Real>(pred: &[R], target: &[R], d_emb: usize) -> (R, Vec<R>) {
    assert_eq!(pred.len(), target.len(), "jepa_loss batch shapes differ");
    let batch = pred.len() / d_emb;
    if batch == 0 {
        return (R::zero(), Vec::new());
    }
    let inv_b = R::one() / R::cst(batch as f64);
    let two = R::cst(2.0);
    let mut loss = R::zero();
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let diff = p - t;
        loss += diff * diff;
        grad.push(two * diff * inv_b);
    }
    (loss * inv_b, grad)
}

/// Unbiased per-dimension variance across the batch. Returns the
/// per-dimension means alongside. Values are shifted by the first sample
/// before accumulating, so a constant batch has exactly zero variance.
pub fn batch_variance<R: Real>(s: &[R], d_emb: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let batch = s.len() / d_emb;
    if batch < 2 {
        return Err(Error::Usage(format!(
            "batch variance needs at least 2 samples, got {batch}"
        )));
    }
    let shift: Vec<f64> = s[..d_emb].iter().map(|v| v.to_f64().unwrap()).collect();
    let mut mean_diff = vec![0.0f64; d_emb];
    for row in s.chunks_exact(d_emb) {
        for ((m, v), c) in mean_diff.iter_mut().zip(row).zip(&shift) {
            *m += v.to_f64().unwrap() - c;
        }
    }
    for m in mean_diff.iter_mut() {
        *m /= batch as f64;
    }
    let mut var = vec![0.0f64; d_emb];
    for row in s.chunks_exact(d_emb) {
        for (((acc, v), m), c) in var.iter_mut().zip(row).zip(&mean_diff).zip(&shift) {
            let d = (v.to_f64().unwrap() - c) - m;
            *acc += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= (batch - 1) as f64;
    }
    let mean = shift.iter().zip(&mean_diff).map(|(c, m)| c + m).collect();
    Ok((mean, var))
}

/// `-min(1, mean_i Var(s)_i)` and its gradient w.r.t. `s`. The gradient is
/// zero whenever the clamp is active, including exactly at the boundary.
pub fn variance_reg_loss<R: Real>(s: &[R], d_emb: usize) -> Result<(R, Vec<R>)> {
    let (mean, var) = batch_variance(s, d_emb)?;
    let batch = s.len() / d_emb;
    let mean_var = var.iter().sum::<f64>() / d_emb as f64;
    if mean_var >= 1.0 {
        return Ok((R::cst(-1.0), vec![R::zero(); s.len()]));
    }
    let scale = -2.0 / ((batch - 1) as f64 * d_emb as f64);
    let grad = s
        .iter()
        .enumerate()
        .map(|(k, v)| R::cst(scale * (v.to_f64().unwrap() - mean[k % d_emb])))
        .collect();
    Ok((R::cst(-mean_var), grad))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollapseReport {
    pub per_dim_variance: Vec<f64>,
    pub mean_variance: f64,
    pub collapsed: bool,
}

pub fn is_collapsed(mean_variance: f64) -> bool {
    mean_variance < COLLAPSE_THRESHOLD
}

pub fn collapse_metric<R: Real>(s: &[R], d_emb: usize) -> Result<CollapseReport> {
    let (_, var) = batch_variance(s, d_emb)?;
    let mean_variance = var.iter().sum::<f64>() / d_emb as f64;
    Ok(CollapseReport {
        per_dim_variance: var,
        mean_variance,
        collapsed: is_collapsed(mean_variance),
    })
}
