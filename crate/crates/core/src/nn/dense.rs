use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation. ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `out[i] = act(sum_j weights[i][j] * input[j] + bias[i])`.
pub fn dense_forward(
    input: &[f64],
    weights: &[Vec<f64>],
    bias: &[f64],
    activation: Activation,
) -> Result<Vec<f64>> {
    if weights.len() != bias.len() {
        return Err(Error::contract(format!(
            "weight rows ({}) and bias length ({}) differ",
            weights.len(),
            bias.len()
        )));
    }
    let mut flat = Vec::with_capacity(weights.len() * input.len());
    for (i, row) in weights.iter().enumerate() {
        if row.len() != input.len() {
            return Err(Error::contract(format!(
                "weight row {i} has {} columns, input has {}",
                row.len(),
                input.len()
            )));
        }
        flat.extend_from_slice(row);
    }
    let mut out = vec![0.0; bias.len()];
    affine(input, &flat, bias, &mut out);
    for v in &mut out {
        *v = activation.apply(*v);
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical("dense", "non-finite output"));
    }
    Ok(out)
}

/// Row-major `out = W x + b` with `W` of shape `(out.len(), x.len())`.
#[inline]
pub(crate) fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        let row = &w[i * n_in..(i + 1) * n_in];
        let mut acc = b[i];
        for (wij, xj) in row.iter().zip(x) {
            acc += wij * xj;
        }
        *o = acc;
    }
}
