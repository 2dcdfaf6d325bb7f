//! Fixed-topology dense networks: a trunk of stacked layers followed by one or
//! more parallel heads whose outputs are concatenated.
//!
//! Both models in this crate fit this mould:
//!
//! - estimator: `9 -> 32 relu -> 16 relu`, heads `mu: 16 -> 1`, `sigma: 16 -> 1`
//! - aggregator: `4 -> 16 relu`, head `out: 16 -> 2`
//!
//! Reverse mode runs over a [`Tape`] recorded during the forward pass.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use twofloat::TwoFloat;

use super::dense::{affine, Activation};
use super::loss::{gaussian_nll, gaussian_nll_grad, sigma_from_raw, sigmoid};
use super::params::{GradientVector, Layout, ParamVector, TensorDesc};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(name: &str, inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            name: name.to_owned(),
            inputs,
            outputs,
            activation,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input_dim: usize,
    trunk: Vec<LayerSpec>,
    heads: Vec<LayerSpec>,
    layout: Arc<Layout>,
    // (weight offset, bias offset) per trunk layer, then per head
    offsets: Vec<(usize, usize)>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `acts[0]` is the input, `acts[i + 1]` the output of trunk layer `i`.
    acts: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.output
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Outputs are `(mu, raw sigma)`; sigma passes through softplus plus floor.
    GaussianNll,
    /// `(output[0] - target)^2`.
    SquaredError,
}

impl Loss {
    pub fn value(self, output: &[f64], target: f64) -> Result<f64> {
        match self {
            Loss::GaussianNll => gaussian_nll(output[0], sigma_from_raw(output[1]), target),
            Loss::SquaredError => Ok((output[0] - target).powi(2)),
        }
    }

    /// `value(up) - value(down)` for two nearby outputs, rearranged so that
    /// only differences of outputs are ever subtracted.
    fn difference(self, up: &[TwoFloat], down: &[TwoFloat], target: f64) -> f64 {
        let dr = f64::from(up[0] - down[0]);
        let (ru, rd) = (f64::from(up[0] - target), f64::from(down[0] - target));
        match self {
            Loss::SquaredError => dr * (ru + rd),
            Loss::GaussianNll => {
                let b = f64::from(down[1]);
                // softplus(a) - softplus(b) = ln(1 + sigmoid(b) * (e^(a-b) - 1))
                let ds = (sigmoid(b) * f64::from(up[1] - down[1]).exp_m1()).ln_1p();
                let sd = sigma_from_raw(b);
                let su = sd + ds;
                // ru^2 sd^2 - rd^2 su^2 = (dr sd - rd ds)(ru sd + rd su)
                let quad = (dr * sd - rd * ds) * (ru * sd + rd * su) / (2.0 * su * su * sd * sd);
                (ds / sd).ln_1p() + quad
            }
        }
    }

    /// dLoss/dOutput.
    pub fn output_grad(self, output: &[f64], target: f64) -> Result<Vec<f64>> {
        match self {
            Loss::GaussianNll => {
                let (dmu, dsigma) =
                    gaussian_nll_grad(output[0], sigma_from_raw(output[1]), target)?;
                Ok(vec![dmu, dsigma * sigmoid(output[1])])
            }
            Loss::SquaredError => {
                let mut g = vec![0.0; output.len()];
                g[0] = 2.0 * (output[0] - target);
                Ok(g)
            }
        }
    }
}

impl Network {
    pub fn new(input_dim: usize, trunk: Vec<LayerSpec>, heads: Vec<LayerSpec>) -> Result<Self> {
        let mut width = input_dim;
        for l in &trunk {
            if l.inputs != width {
                return Err(Error::contract(format!(
                    "layer `{}` expects {} inputs but receives {width}",
                    l.name, l.inputs
                )));
            }
            width = l.outputs;
        }
        for h in &heads {
            if h.inputs != width {
                return Err(Error::contract(format!(
                    "head `{}` expects {} inputs but receives {width}",
                    h.name, h.inputs
                )));
            }
        }
        let mut tensors = Vec::new();
        let mut offsets = Vec::new();
        let mut acc = 0;
        for l in trunk.iter().chain(&heads) {
            let w = acc;
            acc += l.inputs * l.outputs;
            let b = acc;
            acc += l.outputs;
            offsets.push((w, b));
            tensors.push(TensorDesc::new(
                format!("{}.weight", l.name),
                vec![l.outputs, l.inputs],
            ));
            tensors.push(TensorDesc::new(format!("{}.bias", l.name), vec![l.outputs]));
        }
        Ok(Self {
            input_dim,
            trunk,
            heads,
            layout: Arc::new(Layout::new(tensors)),
            offsets,
        })
    }

    /// 9 phone features to `(mu, raw sigma)`.
    pub fn estimator() -> Self {
        Self::new(
            9,
            vec![
                LayerSpec::new("embed1", 9, 32, Activation::Relu),
                LayerSpec::new("embed2", 32, 16, Activation::Relu),
            ],
            vec![
                LayerSpec::new("mu_head", 16, 1, Activation::Identity),
                LayerSpec::new("sigma_head", 16, 1, Activation::Identity),
            ],
        )
        .expect("estimator shape is consistent")
    }

    /// Two answers `(mu_i, sigma_i, mu_j, sigma_j)` to `(mu, raw sigma)`.
    pub fn aggregator() -> Self {
        Self::new(
            4,
            vec![LayerSpec::new("embed1", 4, 16, Activation::Relu)],
            vec![LayerSpec::new("embed2", 16, 2, Activation::Identity)],
        )
        .expect("aggregator shape is consistent")
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        if self.heads.is_empty() {
            self.trunk.last().map_or(self.input_dim, |l| l.outputs)
        } else {
            self.heads.iter().map(|h| h.outputs).sum()
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }

    /// Uniform in `[-sqrt(1/fan_in), sqrt(1/fan_in)]` for weights and biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for l in self.trunk.iter().chain(&self.heads) {
            let bound = (1.0 / l.inputs as f64).sqrt();
            for _ in 0..(l.inputs + 1) * l.outputs {
                values.push(rng.random_range(-bound..=bound));
            }
        }
        ParamVector::new(self.layout().clone(), values).expect("init matches layout")
    }

    fn check(&self, params: &ParamVector, input: &[f64]) -> Result<()> {
        params.check_layout(self.layout())?;
        if input.len() != self.input_dim {
            return Err(Error::contract(format!(
                "network expects {} inputs, got {}",
                self.input_dim,
                input.len()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &ParamVector, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_tape(params, input)?.output)
    }

    pub fn forward_tape(&self, params: &ParamVector, input: &[f64]) -> Result<Tape> {
        self.check(params, input)?;
        let p = params.values();
        let mut acts = Vec::with_capacity(self.trunk.len() + 1);
        let mut pre = Vec::with_capacity(self.trunk.len());
        acts.push(input.to_vec());
        for (i, l) in self.trunk.iter().enumerate() {
            let (w, b) = self.offsets[i];
            let mut z = vec![0.0; l.outputs];
            affine(
                acts.last().expect("input pushed"),
                &p[w..b],
                &p[b..b + l.outputs],
                &mut z,
            );
            let a: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(&l.name, "non-finite activation"));
            }
            pre.push(z);
            acts.push(a);
        }
        let last = acts.last().expect("input pushed");
        let output = if self.heads.is_empty() {
            last.clone()
        } else {
            let mut out = Vec::with_capacity(self.output_dim());
            for (j, h) in self.heads.iter().enumerate() {
                let (w, b) = self.offsets[self.trunk.len() + j];
                let mut z = vec![0.0; h.outputs];
                affine(last, &p[w..b], &p[b..b + h.outputs], &mut z);
                for v in z {
                    let a = h.activation.apply(v);
                    if !a.is_finite() {
                        return Err(Error::numerical(&h.name, "non-finite output"));
                    }
                    out.push(a);
                }
            }
            out
        };
        Ok(Tape { acts, pre, output })
    }

    /// Accumulates dLoss/dParams into `grads` given dLoss/dOutput, and returns
    /// dLoss/dInput.
    pub fn backward_tape(
        &self,
        params: &ParamVector,
        tape: &Tape,
        d_output: &[f64],
        grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        if grads.len() != self.param_count() {
            return Err(Error::contract("gradient buffer does not match layout"));
        }
        if d_output.len() != self.output_dim() {
            return Err(Error::contract("output gradient has wrong length"));
        }
        let p = params.values();
        let last = tape.acts.last().expect("tape has input");
        let mut d_act = vec![0.0; last.len()];
        if self.heads.is_empty() {
            d_act.copy_from_slice(d_output);
        } else {
            let mut k = 0;
            for (j, h) in self.heads.iter().enumerate() {
                let (w, b) = self.offsets[self.trunk.len() + j];
                for o in 0..h.outputs {
                    let mut dz = d_output[k + o];
                    if h.activation != Activation::Identity {
                        let row = &p[w + o * h.inputs..w + (o + 1) * h.inputs];
                        let z: f64 =
                            p[b + o] + row.iter().zip(last).map(|(a, x)| a * x).sum::<f64>();
                        dz *= h.activation.derivative(z);
                    }
                    grads[b + o] += dz;
                    for (i, x) in last.iter().enumerate() {
                        grads[w + o * h.inputs + i] += dz * x;
                        d_act[i] += dz * p[w + o * h.inputs + i];
                    }
                }
                k += h.outputs;
            }
        }
        for (li, l) in self.trunk.iter().enumerate().rev() {
            let (w, b) = self.offsets[li];
            let x = &tape.acts[li];
            let z = &tape.pre[li];
            let mut d_in = vec![0.0; l.inputs];
            for o in 0..l.outputs {
                let dz = d_act[o] * l.activation.derivative(z[o]);
                if dz == 0.0 {
                    continue;
                }
                grads[b + o] += dz;
                let row = w + o * l.inputs;
                for i in 0..l.inputs {
                    grads[row + i] += dz * x[i];
                    d_in[i] += dz * p[row + i];
                }
            }
            if d_in.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(&l.name, "non-finite gradient"));
            }
            d_act = d_in;
        }
        Ok(d_act)
    }

    pub fn loss(
        &self,
        params: &ParamVector,
        input: &[f64],
        target: f64,
        loss: Loss,
    ) -> Result<f64> {
        let out = self.forward(params, input)?;
        loss.value(&out, target)
    }

    /// Outputs with parameter `index` shifted by `delta`, in double-double
    /// arithmetic, so that differences between two shifts are exact to far
    /// below f64 rounding.
    fn shifted_outputs_dd(
        &self,
        params: &ParamVector,
        index: usize,
        delta: f64,
        input: &[f64],
    ) -> Vec<TwoFloat> {
        let mut p: Vec<TwoFloat> = params.values().iter().map(|&v| TwoFloat::from(v)).collect();
        p[index] += delta;
        let layer = |x: &[TwoFloat], (w, b): (usize, usize), spec: &LayerSpec| -> Vec<TwoFloat> {
            (0..spec.outputs)
                .map(|i| {
                    let row = &p[w + i * x.len()..w + (i + 1) * x.len()];
                    let z = row
                        .iter()
                        .zip(x)
                        .fold(p[b + i], |acc, (wij, xj)| acc + *wij * *xj);
                    match spec.activation {
                        Activation::Relu if z <= 0.0 => TwoFloat::from(0.0),
                        _ => z,
                    }
                })
                .collect()
        };
        let mut x: Vec<TwoFloat> = input.iter().map(|&v| TwoFloat::from(v)).collect();
        for (i, l) in self.trunk.iter().enumerate() {
            x = layer(&x, self.offsets[i], l);
        }
        if self.heads.is_empty() {
            return x;
        }
        let k = self.trunk.len();
        self.heads
            .iter()
            .enumerate()
            .flat_map(|(j, h)| layer(&x, self.offsets[k + j], h))
            .collect()
    }
}

/// Gradient of `loss(network(input), target)` with respect to every parameter.
pub fn backward(
    network: &Network,
    params: &ParamVector,
    input: &[f64],
    target: f64,
    loss: Loss,
) -> Result<GradientVector> {
    let tape = network.forward_tape(params, input)?;
    let d_out = loss.output_grad(tape.output(), target)?;
    let mut g = vec![0.0; network.param_count()];
    network.backward_tape(params, &tape, &d_out, &mut g)?;
    if let Some(i) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::numerical(
            tensor_name_at(network.layout(), i),
            "non-finite parameter gradient",
        ));
    }
    GradientVector::new(network.layout().clone(), g)
}

fn tensor_name_at(layout: &Layout, index: usize) -> String {
    let mut acc = 0;
    for t in layout.tensors() {
        acc += t.numel();
        if index < acc {
            return t.name.clone();
        }
    }
    "<out of range>".to_owned()
}

/// Maximum relative error between [`backward`] and central finite differences,
/// using `max(|analytic|, |numeric|, 1e-8)` as the denominator.
///
/// Shifted outputs are evaluated in double-double and the loss difference is
/// formed without cancelling subtractions, so gradients near the `1e-8` floor
/// are resolved rather than lost in f64 rounding noise of order `1e-16 / h`.
pub fn grad_check(
    network: &Network,
    params: &ParamVector,
    input: &[f64],
    target: f64,
    loss: Loss,
    h: f64,
) -> Result<f64> {
    if !(1e-8..=1e-4).contains(&h) {
        return Err(Error::contract(format!("step {h} outside [1e-8, 1e-4]")));
    }
    let analytic = backward(network, params, input, target, loss)?;
    let mut worst = 0.0_f64;
    for i in 0..params.len() {
        let up = network.shifted_outputs_dd(params, i, h, input);
        let down = network.shifted_outputs_dd(params, i, -h, input);
        let numeric = loss.difference(&up, &down, target) / (2.0 * h);
        let a = analytic.values()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shapes_and_layout() {
        let est = Network::estimator();
        assert_eq!(est.param_count(), 9 * 32 + 32 + 32 * 16 + 16 + 17 + 17);
        assert_eq!(est.output_dim(), 2);
        let agg = Network::aggregator();
        assert_eq!(agg.param_count(), 4 * 16 + 16 + 16 * 2 + 2);
        let names: Vec<_> = agg
            .layout()
            .tensors()
            .iter()
            .map(|t| t.name.as_str())
            .collect();
        assert_eq!(
            names,
            [
                "embed1.weight",
                "embed1.bias",
                "embed2.weight",
                "embed2.bias"
            ]
        );
    }

    #[test]
    fn inconsistent_shapes_rejected() {
        let err = Network::new(3, vec![LayerSpec::new("a", 4, 2, Activation::Relu)], vec![]);
        assert!(err.is_err());
    }

    #[test]
    fn squared_error_single_weight() {
        let net = Network::new(
            1,
            vec![],
            vec![LayerSpec::new("out", 1, 1, Activation::Identity)],
        )
        .unwrap();
        let params = ParamVector::new(net.layout().clone(), vec![1.0, 0.0]).unwrap();
        let g = backward(&net, &params, &[1.0], 0.0, Loss::SquaredError).unwrap();
        assert_eq!(g.values(), &[2.0, 2.0]);
    }

    #[test]
    fn zero_gradient_at_analytic_minimum() {
        // mu = target and sigma chosen so that d/dsigma vanishes is not reachable
        // with zero residual, so use the squared error minimum instead.
        let net = Network::estimator();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = net.init_params(&mut rng);
        let x = [0.3, -0.2, 1.0, 0.5, -1.0, 0.1, 0.0, 0.7, -0.4];
        let out = net.forward(&params, &x).unwrap();
        params.tensor_mut("mu_head.bias").unwrap()[0] -= out[0] - 21.5;
        let g = backward(&net, &params, &x, 21.5, Loss::SquaredError).unwrap();
        assert!(g.max_abs() < 1e-8, "{}", g.max_abs());
    }

    #[test]
    fn estimator_matches_finite_differences() {
        let net = Network::estimator();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = net.init_params(&mut rng);
        let x: Vec<f64> = (0..9).map(|i| (i as f64 * 0.37).sin()).collect();
        let err = grad_check(&net, &params, &x, 1.3, Loss::GaussianNll, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn degenerate_network_has_zero_error() {
        let net = Network::new(2, vec![], vec![]).unwrap();
        let params = ParamVector::zeros(net.layout().clone());
        let err = grad_check(&net, &params, &[0.5, 0.1], 1.0, Loss::GaussianNll, 1e-6).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn step_out_of_range_rejected() {
        let net = Network::aggregator();
        let params = ParamVector::zeros(net.layout().clone());
        assert!(grad_check(&net, &params, &[0.0; 4], 0.0, Loss::GaussianNll, 1e-2).is_err());
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let net = Network::estimator();
        let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        let x = [1.0; 9];
        let a = backward(&net, &params, &x, 20.0, Loss::GaussianNll).unwrap();
        let b = backward(&net, &params, &x, 20.0, Loss::GaussianNll).unwrap();
        let bits = |g: &GradientVector| g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
