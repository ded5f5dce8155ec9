//! Closed-form computations on diagonal Gaussians.
//!
//! Covariances are stored as elementwise log-variances so any real vector is
//! a valid parameterisation.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbedding {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: log_var.len(),
            });
        }
        if mean.iter().chain(&log_var).any(|v| !v.is_finite()) {
            return Err(Error::non_finite("gaussian embedding"));
        }
        Ok(Self { mean, log_var })
    }

    /// Builds an embedding from variances rather than log-variances.
    pub fn from_variance(mean: Vec<f64>, var: &[f64]) -> Result<Self> {
        Self::new(mean, var.iter().map(|v| v.ln()).collect())
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn view(&self) -> GaussianRef<'_> {
        GaussianRef {
            mean: &self.mean,
            log_var: &self.log_var,
        }
    }
}

/// Borrowed mean/log-variance pair, e.g. a row of an embedding table.
#[derive(Debug, Clone, Copy)]
pub struct GaussianRef<'a> {
    pub mean: &'a [f64],
    pub log_var: &'a [f64],
}

impl<'a> From<&'a GaussianEmbedding> for GaussianRef<'a> {
    fn from(g: &'a GaussianEmbedding) -> Self {
        g.view()
    }
}

fn check_dims(a: GaussianRef<'_>, b: GaussianRef<'_>) -> Result<()> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimensionMismatch {
            expected: a.mean.len(),
            actual: b.mean.len(),
        });
    }
    Ok(())
}

/// Log of the expected likelihood kernel `∫ N(x; a) N(x; b) dx`, which equals
/// the density at zero of `N(μa − μb, Σa + Σb)`.
pub fn log_el_kernel<'a, 'b>(a: impl Into<GaussianRef<'a>>, b: impl Into<GaussianRef<'b>>) -> Result<f64> {
    let (a, b) = (a.into(), b.into());
    check_dims(a, b)?;
    Ok(log_el_kernel_unchecked(a, b))
}

pub(crate) fn log_el_kernel_unchecked(a: GaussianRef<'_>, b: GaussianRef<'_>) -> f64 {
    let ln_2pi = (2.0 * PI).ln();
    let mut acc = 0.0;
    for d in 0..a.mean.len() {
        let s = a.log_var[d].exp() + b.log_var[d].exp();
        let delta = a.mean[d] - b.mean[d];
        acc -= 0.5 * (ln_2pi + s.ln()) + delta * delta / (2.0 * s);
    }
    acc
}

/// Adds `upstream * ∂ log_el_kernel(a, b)` to the four gradient buffers.
#[cfg(test)]
pub(crate) fn log_el_kernel_backward(
    a: GaussianRef<'_>,
    b: GaussianRef<'_>,
    upstream: f64,
    grad_a_mean: &mut [f64],
    grad_a_log_var: &mut [f64],
    grad_b_mean: &mut [f64],
    grad_b_log_var: &mut [f64],
) {
    for d in 0..a.mean.len() {
        let va = a.log_var[d].exp();
        let vb = b.log_var[d].exp();
        let s = va + vb;
        let delta = a.mean[d] - b.mean[d];
        let g_mean = -delta / s * upstream;
        grad_a_mean[d] += g_mean;
        grad_b_mean[d] -= g_mean;
        let g_s = (-0.5 / s + delta * delta / (2.0 * s * s)) * upstream;
        grad_a_log_var[d] += g_s * va;
        grad_b_log_var[d] += g_s * vb;
    }
}

/// `KL(N_a || N_b)` for diagonal covariances.
pub fn gaussian_kl<'a, 'b>(a: impl Into<GaussianRef<'a>>, b: impl Into<GaussianRef<'b>>) -> Result<f64> {
    let (a, b) = (a.into(), b.into());
    check_dims(a, b)?;
    Ok(gaussian_kl_unchecked(a, b))
}

pub(crate) fn gaussian_kl_unchecked(a: GaussianRef<'_>, b: GaussianRef<'_>) -> f64 {
    let mut acc = 0.0;
    for d in 0..a.mean.len() {
        let inv_vb = (-b.log_var[d]).exp();
        let delta = a.mean[d] - b.mean[d];
        acc += (a.log_var[d] - b.log_var[d]).exp() + delta * delta * inv_vb - 1.0 + b.log_var[d]
            - a.log_var[d];
    }
    (0.5 * acc).max(0.0)
}

/// Adds `upstream * ∂ KL(a || b)` to the gradient buffers.
pub(crate) fn gaussian_kl_backward(
    a: GaussianRef<'_>,
    b: GaussianRef<'_>,
    upstream: f64,
    grad_a_mean: &mut [f64],
    grad_a_log_var: &mut [f64],
    grad_b_mean: &mut [f64],
    grad_b_log_var: &mut [f64],
) {
    for d in 0..a.mean.len() {
        let inv_vb = (-b.log_var[d]).exp();
        let ratio = (a.log_var[d] - b.log_var[d]).exp();
        let delta = a.mean[d] - b.mean[d];
        let g_mean = delta * inv_vb * upstream;
        grad_a_mean[d] += g_mean;
        grad_b_mean[d] -= g_mean;
        grad_a_log_var[d] += 0.5 * (ratio - 1.0) * upstream;
        grad_b_log_var[d] += 0.5 * (1.0 - ratio - delta * delta * inv_vb) * upstream;
    }
}

/// `max(0, KL(a || b) − threshold)`: zero once `a` sits close enough inside `b`.
pub fn thresholded_divergence<'a, 'b>(
    a: impl Into<GaussianRef<'a>>,
    b: impl Into<GaussianRef<'b>>,
    threshold: f64,
) -> Result<f64> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} must be >= 0")));
    }
    Ok((gaussian_kl(a, b)? - threshold).max(0.0))
}

/// Squared norm of `max(0, y − x)`: the point order-embedding violation of
/// `x ⪯ y`. Reference only; never used in training.
pub fn order_penalty_oracle(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
        });
    }
    Ok(x.iter().zip(y).map(|(a, b)| (b - a).max(0.0).powi(2)).sum())
}
