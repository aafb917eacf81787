//! Elementwise-independent Gaussian tensors and their closed-form arithmetic.
//!
//! Every activation flowing through the network is represented by a pair of
//! tensors: an elementwise mean and an elementwise variance. The operations
//! here are exact for independent normal variables:
//!
//! - addition: means add, variances add;
//! - deterministic scaling by `c`: mean `c*m`, variance `c^2*v`;
//! - product of independent variables: mean `E[a]E[b]`, variance
//!   `(E[a]^2 + V[a])(E[b]^2 + V[b]) - E[a]^2 E[b]^2`.
//!
//! Negative variances produced by floating-point cancellation are clamped to
//! zero at construction; every clamp bumps a process-wide counter readable
//! through [`clamp_events`] so that systematic problems stay visible.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of negative-variance clamp events since process start.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// Reset the clamp counter (test support).
pub fn reset_clamp_events() {
    CLAMP_EVENTS.store(0, Ordering::Relaxed);
}

/// A tensor of elementwise-independent normal random variables.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTensor {
    mean: Tensor,
    variance: Tensor,
}

impl GaussianTensor {
    /// Build from mean and variance tensors of identical shape. Negative
    /// variance entries are clamped to zero (and counted).
    pub fn new(mean: Tensor, variance: Tensor) -> Result<Self> {
        mean.check_same_shape(&variance, "gaussian mean/variance")?;
        let mut variance = variance;
        let mut clamped = 0;
        for v in variance.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
                clamped += 1;
            }
        }
        if clamped > 0 {
            CLAMP_EVENTS.fetch_add(clamped, Ordering::Relaxed);
        }
        Ok(GaussianTensor { mean, variance })
    }

    /// Lift a deterministic tensor: variance exactly zero.
    pub fn lift(x: Tensor) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::Numerical("lift of non-finite tensor".into()));
        }
        let variance = Tensor::zeros(x.shape().to_vec());
        Ok(GaussianTensor { mean: x, variance })
    }

    /// A single scalar variable.
    pub fn scalar(mean: f64, variance: f64) -> Result<Self> {
        Self::new(Tensor::scalar(mean), Tensor::scalar(variance))
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn variance(&self) -> &Tensor {
        &self.variance
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.mean, self.variance)
    }

    /// Sum of independent Gaussians.
    pub fn add(&self, other: &GaussianTensor) -> Result<GaussianTensor> {
        self.mean.check_same_shape(&other.mean, "gaussian add")?;
        GaussianTensor::new(
            self.mean.zip(&other.mean, |a, b| a + b),
            self.variance.zip(&other.variance, |a, b| a + b),
        )
    }

    /// Deterministic elementwise scaling.
    pub fn scale(&self, c: &Tensor) -> Result<GaussianTensor> {
        self.mean.check_same_shape(c, "gaussian scale")?;
        GaussianTensor::new(
            self.mean.zip(c, |m, s| m * s),
            self.variance.zip(c, |v, s| v * s * s),
        )
    }

    /// Product of independent Gaussians, with the exact product variance.
    pub fn product(&self, other: &GaussianTensor) -> Result<GaussianTensor> {
        self.mean
            .check_same_shape(&other.mean, "gaussian product")?;
        let mean = self.mean.zip(&other.mean, |a, b| a * b);
        let n = mean.numel();
        let mut var = vec![0.0; n];
        for i in 0..n {
            let (ma, va) = (self.mean.data()[i], self.variance.data()[i]);
            let (mb, vb) = (other.mean.data()[i], other.variance.data()[i]);
            var[i] = (ma * ma + va) * (mb * mb + vb) - ma * ma * (mb * mb);
        }
        GaussianTensor::new(mean, Tensor::new(self.mean.shape().to_vec(), var))
    }

    /// Elementwise second moment `E[x^2] = V + E[x]^2`.
    pub fn second_moment(&self) -> Tensor {
        self.mean.zip(&self.variance, |m, v| v + m * m)
    }

    /// Place this value on a tape as a pair of leaves.
    pub fn to_var(&self, tape: &Tape) -> GaussVar {
        GaussVar {
            mean: tape.leaf(self.mean.clone()),
            var: tape.leaf(self.variance.clone()),
        }
    }
}

/// The taped counterpart of [`GaussianTensor`]: a mean/variance pair of graph
/// variables, used inside the differentiable forward pass.
#[derive(Clone)]
pub struct GaussVar {
    pub mean: Var,
    pub var: Var,
}

impl GaussVar {
    pub fn lift(tape: &Tape, x: Tensor) -> GaussVar {
        let var = tape.leaf(Tensor::zeros(x.shape().to_vec()));
        GaussVar {
            mean: tape.leaf(x),
            var,
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.mean.shape()
    }

    /// Concrete snapshot of the current moments.
    pub fn snapshot(&self) -> GaussianTensor {
        GaussianTensor::new(self.mean.value(), self.var.value())
            .expect("taped moments have matching shapes")
    }

    pub fn add(&self, other: &GaussVar) -> GaussVar {
        GaussVar {
            mean: self.mean.add(&other.mean),
            var: self.var.add(&other.var),
        }
    }

    /// Product of independent Gaussians (channel-broadcast form lives in the
    /// SE block; this is the same-shape form).
    pub fn product(&self, other: &GaussVar) -> GaussVar {
        let mean = self.mean.mul(&other.mean);
        let a2 = self.mean.square();
        let b2 = other.mean.square();
        let var = a2
            .add(&self.var)
            .mul(&b2.add(&other.var))
            .sub(&a2.mul(&b2))
            .max_floor(0.0);
        GaussVar { mean, var }
    }

    pub fn second_moment(&self) -> Var {
        self.mean.square().add(&self.var)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> GaussVar {
        GaussVar {
            mean: self.mean.reshape(shape.clone()),
            var: self.var.reshape(shape),
        }
    }
}
