//! Gaussian negative log-likelihood and the positivity map used for σ heads.

use crate::error::{Error, Result};

pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Lower bound added to every predicted σ, in °C.
pub const SIGMA_MIN: f64 = 1e-3;

/// `-ln N(target | mu, sigma^2)`.
pub fn gaussian_nll(mu: f64, sigma: f64, target: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let r = target - mu;
    Ok(HALF_LN_2PI + sigma.ln() + r * r / (2.0 * sigma * sigma))
}

/// Partial derivatives of [`gaussian_nll`] with respect to `mu` and `sigma`.
pub fn gaussian_nll_grad(mu: f64, sigma: f64, target: f64) -> Result<(f64, f64)> {
    check_sigma(sigma)?;
    let r = target - mu;
    let s2 = sigma * sigma;
    Ok(((mu - target) / s2, 1.0 / sigma - r * r / (s2 * sigma)))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "sigma must be positive, got {sigma}"
        )))
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Derivative of softplus, i.e. the logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw σ-head output to a valid uncertainty.
#[inline]
pub fn sigma_from_raw(raw: f64) -> f64 {
    softplus(raw) + SIGMA_MIN
}
