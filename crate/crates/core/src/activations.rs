//! Moment-matched nonlinear transforms of Gaussian tensors: ReLU and sigmoid.
//!
//! For a pre-activation `a ~ N(phi, lambda)` the ReLU moments are exact:
//!
//! ```text
//! m  = phi * Phi(phi/s) + s * pdf(phi/s)                    with s = sqrt(lambda)
//! E2 = (phi^2 + lambda) * Phi(phi/s) + phi * s * pdf(phi/s)
//! v  = E2 - m^2
//! ```
//!
//! where `Phi`/`pdf` are the standard normal CDF/PDF. The sigmoid moments use
//! the probit-style fast-dropout approximation with `alpha = 4 - 2*sqrt(2)`,
//! `beta = -ln(sqrt(2) - 1)`:
//!
//! ```text
//! theta = sig(phi / sqrt(1 + pi*lambda/8))
//! xi^2  = sig(alpha*(phi - beta) / sqrt(1 + pi*alpha^2*lambda/8)) - theta^2
//! ```
//!
//! clamped into `[0, 1/4]`, the variance range of any `[0,1]`-valued
//! variable, and additionally capped by the Lipschitz bound
//! `V[sig(a)] <= lambda / 16`: the raw approximation does not vanish as
//! `lambda -> 0` (it tends to `sig(alpha(phi-beta)) - sig(phi)^2`, about
//! 1.3e-2 at `phi = 0`), which would inject phantom variance after saturated
//! channels; the cap restores the exact limit and only binds where the raw
//! form overshoots. Variances at or below [`VAR_FLOOR`] are treated as
//! deterministic and both transforms reduce to their pointwise counterparts,
//! so a zero-variance network stays exactly zero-variance. Both output
//! moments consume both input moments, so uncertainty keeps propagating
//! through every nonlinearity.

use std::rc::Rc;

use crate::gaussian::{GaussVar, GaussianTensor};
use crate::graph::{Var, VAR_FLOOR};
use crate::tensor::Tensor;

/// Sigmoid-variance approximation constant `4 - 2*sqrt(2)`.
pub const SIG_ALPHA: f64 = 4.0 - 2.0 * std::f64::consts::SQRT_2;
/// Sigmoid-variance approximation constant `-ln(sqrt(2) - 1)`.
pub fn sig_beta() -> f64 {
    -(std::f64::consts::SQRT_2 - 1.0).ln()
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.3989422804014326779; // 1/sqrt(2*pi)

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z * INV_SQRT_2))
}

/// Exact Gaussian-ReLU mean and variance for one element.
pub fn relu_moments_scalar(mean: f64, var: f64) -> (f64, f64) {
    if var <= VAR_FLOOR {
        return (mean.max(0.0), 0.0);
    }
    let s = var.sqrt();
    let z = mean / s;
    let cdf = std_normal_cdf(z);
    let pdf = std_normal_pdf(z);
    let m = mean * cdf + s * pdf;
    let second = (mean * mean + var) * cdf + mean * s * pdf;
    (m, (second - m * m).max(0.0))
}

/// Fast-dropout sigmoid mean and variance for one element.
pub fn sigmoid_moments_scalar(mean: f64, var: f64) -> (f64, f64) {
    if var <= VAR_FLOOR {
        return (sigmoid(mean), 0.0);
    }
    let pi = std::f64::consts::PI;
    let theta = sigmoid(mean / (1.0 + pi * var / 8.0).sqrt());
    let beta = sig_beta();
    let second =
        sigmoid(SIG_ALPHA * (mean - beta) / (1.0 + pi * SIG_ALPHA * SIG_ALPHA * var / 8.0).sqrt());
    let xi2 = (second - theta * theta).clamp(0.0, 0.25).min(var / 16.0);
    (theta, xi2)
}

/// ReLU moments of a whole Gaussian tensor.
pub fn relu_moments(pre: &GaussianTensor) -> GaussianTensor {
    let n = pre.mean().numel();
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    for i in 0..n {
        let (m, v) = relu_moments_scalar(pre.mean().data()[i], pre.variance().data()[i]);
        mean[i] = m;
        var[i] = v;
    }
    let shape = pre.shape().to_vec();
    GaussianTensor::new(Tensor::new(shape.clone(), mean), Tensor::new(shape, var))
        .expect("relu moments are non-negative")
}

/// Sigmoid moments of a whole Gaussian tensor.
pub fn sigmoid_moments(pre: &GaussianTensor) -> GaussianTensor {
    let n = pre.mean().numel();
    let mut mean = vec![0.0; n];
    let mut var = vec![0.0; n];
    for i in 0..n {
        let (m, v) = sigmoid_moments_scalar(pre.mean().data()[i], pre.variance().data()[i]);
        mean[i] = m;
        var[i] = v;
    }
    let shape = pre.shape().to_vec();
    GaussianTensor::new(Tensor::new(shape.clone(), mean), Tensor::new(shape, var))
        .expect("sigmoid variance is clamped non-negative")
}

/// Mask of elements that are effectively deterministic.
fn det_mask(var: &Var) -> Rc<Vec<bool>> {
    Rc::new(var.value().data().iter().map(|&v| v <= VAR_FLOOR).collect())
}

/// Taped ReLU moments; deterministic elements take the exact pointwise branch.
pub fn relu_moments_var(pre: &GaussVar) -> GaussVar {
    let mask = det_mask(&pre.var);
    let lam = pre.var.max_floor(VAR_FLOOR);
    let s = lam.sqrt();
    let z = pre.mean.div(&s);
    let cdf = z
        .mul_scalar(INV_SQRT_2)
        .erf()
        .add_scalar(1.0)
        .mul_scalar(0.5);
    let pdf = z.square().mul_scalar(-0.5).exp().mul_scalar(INV_SQRT_2PI);
    let m = pre.mean.mul(&cdf).add(&s.mul(&pdf));
    let second = pre
        .mean
        .square()
        .add(&lam)
        .mul(&cdf)
        .add(&pre.mean.mul(&s).mul(&pdf));
    let v = second.sub(&m.square()).max_floor(0.0);

    let point_mean = pre.mean.max_floor(0.0);
    let zero = pre.var.mul_scalar(0.0);
    GaussVar {
        mean: Var::select(mask.clone(), &point_mean, &m),
        var: Var::select(mask, &zero, &v),
    }
}

/// Taped sigmoid moments; deterministic elements take the pointwise branch.
pub fn sigmoid_moments_var(pre: &GaussVar) -> GaussVar {
    let pi = std::f64::consts::PI;
    let mask = det_mask(&pre.var);
    let lam = pre.var.max_floor(VAR_FLOOR);
    let denom_mean = lam.mul_scalar(pi / 8.0).add_scalar(1.0).sqrt();
    let theta = pre.mean.div(&denom_mean).sigmoid();
    let denom_var = lam
        .mul_scalar(pi * SIG_ALPHA * SIG_ALPHA / 8.0)
        .add_scalar(1.0)
        .sqrt();
    let second = pre
        .mean
        .add_scalar(-sig_beta())
        .mul_scalar(SIG_ALPHA)
        .div(&denom_var)
        .sigmoid();
    // clamp into [0, 1/4] and under the Lipschitz bound lambda/16
    let xi2 = second.sub(&theta.square()).max_floor(0.0);
    let xi2 = xi2.neg().max_floor(-0.25).neg();
    let cap = lam.mul_scalar(1.0 / 16.0);
    let cap_mask: Rc<Vec<bool>> = Rc::new(
        xi2.value()
            .data()
            .iter()
            .zip(cap.value().data())
            .map(|(x, c)| x <= c)
            .collect(),
    );
    let xi2 = Var::select(cap_mask, &xi2, &cap);

    let point_mean = pre.mean.sigmoid();
    let zero = pre.var.mul_scalar(0.0);
    GaussVar {
        mean: Var::select(mask.clone(), &point_mean, &theta),
        var: Var::select(mask, &zero, &xi2),
    }
}
