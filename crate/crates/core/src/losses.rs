//! Training objectives: uncertainty-aware label smoothing, logit-sampled
//! binary cross-entropy, and the cold-posterior ELBO.
//!
//! The smoothing probability for a sample/task is the gap between the MAP
//! output (sigmoid of the logit mean) and the Bayes output (mean of the
//! sigmoid-transformed logit distribution):
//!
//! ```text
//! alpha = | sig(E[h]) - E[sig(h)] |            in [0, 1]
//! y_smooth = alpha * 0.5 + (1 - alpha) * y_true
//! ```
//!
//! alpha is zero when the logit variance is zero, zero at E[h] = 0 by
//! symmetry, grows with the variance, and grows toward extreme predictions.
//! During training alpha only shapes the target; no gradient flows through
//! it, which removes any incentive to inflate the variance.
//!
//! The likelihood term samples the logit normal, pushes each draw through
//! the sigmoid separately, and averages the per-sample binary cross-entropy
//! factors. The total objective is `nll + c * kl` with the cold-posterior
//! factor `c`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::activations::{sigmoid, sigmoid_moments_scalar};
use crate::error::{Error, Result};
use crate::gaussian::GaussVar;
use crate::graph::{Var, VAR_FLOOR};

/// Loss construction selected by configuration, mirroring the four method
/// rows: point-estimate baseline, plain variational, batch-mean smoothing,
/// and uncertainty-aware smoothing. A fixed-probability variant is included
/// as a classic-label-smoothing option.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossMode {
    Base,
    Variational,
    Smooth,
    UaSmooth,
    /// Classic label smoothing with a fixed probability.
    Fixed(f64),
}

impl LossMode {
    pub fn parse(s: &str) -> Result<LossMode> {
        match s {
            "base" => Ok(LossMode::Base),
            "variational" => Ok(LossMode::Variational),
            "smooth" => Ok(LossMode::Smooth),
            "ua-smooth" => Ok(LossMode::UaSmooth),
            other => {
                if let Some(rest) = other.strip_prefix("fixed:") {
                    let a: f64 = rest
                        .parse()
                        .map_err(|_| Error::Config(format!("bad fixed smoothing value: {rest}")))?;
                    if !(0.0..=1.0).contains(&a) {
                        return Err(Error::Config(format!("fixed alpha {a} outside [0,1]")));
                    }
                    Ok(LossMode::Fixed(a))
                } else {
                    Err(Error::Config(format!(
                        "unknown loss mode '{other}' (expected base|variational|smooth|ua-smooth|fixed:<a>)"
                    )))
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match self {
            LossMode::Base => "base".into(),
            LossMode::Variational => "variational".into(),
            LossMode::Smooth => "smooth".into(),
            LossMode::UaSmooth => "ua-smooth".into(),
            LossMode::Fixed(a) => format!("fixed:{a}"),
        }
    }

    /// The point-estimate baseline trains with frozen-zero rho.
    pub fn is_point_estimate(&self) -> bool {
        matches!(self, LossMode::Base)
    }
}

static ALPHA_CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Count of out-of-range smoothing probabilities that were clamped.
pub fn alpha_clamp_events() -> u64 {
    ALPHA_CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// A per-sample, per-task smoothed label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedTarget {
    pub y_smooth: f64,
    pub alpha: f64,
    pub y_true: f64,
}

pub const Y_UNIFORM: f64 = 0.5;

/// Data-specific smoothing probability from the logit moments.
pub fn smoothing_alpha(logit_mean: f64, logit_var: f64) -> f64 {
    let y_map = sigmoid(logit_mean);
    let (y_bayes, _) = sigmoid_moments_scalar(logit_mean, logit_var.max(0.0));
    (y_map - y_bayes).abs().clamp(0.0, 1.0)
}

/// Interpolate a binary label toward the uniform distribution.
pub fn smooth_labels(y_true: f64, alpha: f64) -> SmoothedTarget {
    let alpha = if (0.0..=1.0).contains(&alpha) {
        alpha
    } else {
        ALPHA_CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        eprintln!("warning: smoothing probability {alpha} clamped into [0,1]");
        alpha.clamp(0.0, 1.0)
    };
    SmoothedTarget {
        y_smooth: alpha * Y_UNIFORM + (1.0 - alpha) * y_true,
        alpha,
        y_true,
    }
}

/// Batch-mean smoothing probability (the batch-uniform "smooth" variant).
pub fn batch_mean_alpha(alphas: &[f64]) -> Result<f64> {
    if alphas.is_empty() {
        return Err(Error::Config("batch_mean_alpha on an empty batch".into()));
    }
    Ok(alphas.iter().sum::<f64>() / alphas.len() as f64)
}

/// Stable binary cross-entropy against a soft target, from the logit:
/// `t * softplus(-z) + (1 - t) * softplus(z)`.
pub fn bce_with_logit(z: f64, target: f64) -> f64 {
    let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    target * sp(-z) + (1.0 - target) * sp(z)
}

/// Standard-normal draws for the logit sampling, fixed per step so the
/// pathwise derivative is deterministic.
pub fn logit_noise(n_samples: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n_samples).map(|_| rng.sample(StandardNormal)).collect()
}

/// Monte-Carlo binary cross-entropy over the logit normal, plain form.
pub fn sampled_bce(logit: (f64, f64), target: f64, n_samples: usize, seed: u64) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Config("sampled_bce needs n_samples >= 1".into()));
    }
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::Config(format!("target {target} outside [0,1]")));
    }
    let (mean, var) = logit;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = logit_noise(n_samples, &mut rng);
    let sd = var.max(0.0).sqrt();
    Ok(noise
        .iter()
        .map(|&u| bce_with_logit(mean + sd * u, target))
        .sum::<f64>()
        / n_samples as f64)
}

/// Taped sampled BCE with externally fixed noise; the gradient is the
/// pathwise derivative through `z = E + sqrt(V) * u`.
pub fn sampled_bce_var(logit: &GaussVar, target: f64, noise: &[f64]) -> Var {
    let k = noise.len();
    let tape = logit.mean.tape().clone();
    let u = tape.leaf(crate::tensor::Tensor::from_slice(noise));
    let sd = logit.var.max_floor(0.0).add_scalar(VAR_FLOOR * 0.0).sqrt();
    let z = u
        .mul(&sd.expand_scalar(k))
        .add(&logit.mean.expand_scalar(k));
    let pos = z.neg().softplus().mul_scalar(target);
    let neg = z.softplus().mul_scalar(1.0 - target);
    pos.add(&neg).mean_all()
}

/// Loss decomposition: `total = nll + c * kl`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub kl: f64,
    pub cold_factor: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.nll + self.cold_factor * self.kl
    }
}

/// Assemble the cold-posterior objective.
pub fn elbo_loss(nll: f64, kl: f64, cold_factor: f64) -> Result<LossBreakdown> {
    if !nll.is_finite() || !kl.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite loss terms: nll={nll}, kl={kl}"
        )));
    }
    if cold_factor < 0.0 {
        return Err(Error::Config(format!(
            "cold factor must be >= 0, got {cold_factor}"
        )));
    }
    if kl < -1e-9 {
        return Err(Error::Numerical(format!("negative KL: {kl}")));
    }
    Ok(LossBreakdown {
        nll,
        kl,
        cold_factor,
    })
}
