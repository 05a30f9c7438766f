use rand::Rng;
use serde::{Deserialize, Serialize};

use super::NnError;

/// Slope of the leaky rectifier on negative inputs.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu => {
                if z > 0.0 {
                    z
                } else {
                    LEAKY_SLOPE * z
                }
            }
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match (self, z > 0.0) {
            (_, true) => 1.0,
            (Activation::Relu, false) => 0.0,
            (Activation::LeakyRelu, false) => LEAKY_SLOPE,
        }
    }
}

/// Layer widths `[input, hidden.., output]`; hidden layers use `activation`,
/// the output layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self, NnError> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(NnError::BadSpec(format!("invalid widths {widths:?}")));
        }
        Ok(Self { widths, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// `(weight_offset, bias_offset, fan_in, fan_out)` per layer; weights are
    /// row-major `fan_out × fan_in`.
    pub fn layout(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let entry = (offset, offset + fan_in * fan_out, fan_in, fan_out);
                offset += fan_in * fan_out + fan_out;
                entry
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (`inputs[0]` is the network input).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    preacts: Vec<Vec<f64>>,
}

/// A multilayer perceptron over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

impl Mlp {
    /// Uniform fan-in initialisation (`±sqrt(6 / fan_in)` for hidden layers,
    /// `±sqrt(1 / fan_in)` for the output layer), zero biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut params = vec![0.0; spec.num_params()];
        let layers = spec.num_layers();
        for (l, (w_off, _, fan_in, fan_out)) in spec.layout().into_iter().enumerate() {
            let gain: f64 = if l + 1 == layers { 1.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            for w in &mut params[w_off..w_off + fan_in * fan_out] {
                *w = rng.random_range(-bound..bound);
            }
        }
        Self { spec, params }
    }

    /// Weights and biases all drawn from `±1/sqrt(fan_in)`, the common
    /// default for linear layers in deep-learning frameworks.
    pub fn new_fan_in_uniform<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let mut params = vec![0.0; spec.num_params()];
        for (w_off, b_off, fan_in, fan_out) in spec.layout() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[w_off..b_off + fan_out] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Self { spec, params }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let params = vec![0.0; spec.num_params()];
        Self { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: Vec<f64>) -> Result<Self, NnError> {
        if params.len() != spec.num_params() {
            return Err(NnError::ShapeMismatch {
                expected: spec.num_params(),
                found: params.len(),
            });
        }
        Ok(Self { spec, params })
    }

    /// Zero the output layer's weights and biases.
    pub fn zero_output_layer(&mut self) {
        let (w_off, _, fan_in, fan_out) = *self.spec.layout().last().unwrap();
        self.params[w_off..w_off + fan_in * fan_out + fan_out].fill(0.0);
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache), NnError> {
        self.check_input(input)?;
        let layout = self.spec.layout();
        let mut inputs = Vec::with_capacity(layout.len());
        let mut preacts = Vec::with_capacity(layout.len() - 1);
        let mut current = input.to_vec();
        for (l, &(w_off, b_off, fan_in, fan_out)) in layout.iter().enumerate() {
            let z = self.affine(&current, w_off, b_off, fan_in, fan_out);
            inputs.push(current);
            if l + 1 < layout.len() {
                current = z.iter().map(|&v| self.spec.activation.apply(v)).collect();
                preacts.push(z);
            } else {
                current = z;
            }
        }
        Ok((current, ForwardCache { inputs, preacts }))
    }

    /// Forward pass without keeping activations.
    pub fn predict(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        self.check_input(input)?;
        let layout = self.spec.layout();
        let mut current = input.to_vec();
        for (l, &(w_off, b_off, fan_in, fan_out)) in layout.iter().enumerate() {
            let mut z = self.affine(&current, w_off, b_off, fan_in, fan_out);
            if l + 1 < layout.len() {
                z.iter_mut().for_each(|v| *v = self.spec.activation.apply(*v));
            }
            current = z;
        }
        Ok(current)
    }

    /// Accumulate `d loss / d params` into `grad` and return `d loss / d input`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>, NnError> {
        if grad.len() != self.params.len() {
            return Err(NnError::ShapeMismatch {
                expected: self.params.len(),
                found: grad.len(),
            });
        }
        if grad_output.len() != self.spec.output_dim() || cache.inputs.len() != self.spec.num_layers()
        {
            return Err(NnError::ShapeMismatch {
                expected: self.spec.output_dim(),
                found: grad_output.len(),
            });
        }
        let layout = self.spec.layout();
        let mut delta = grad_output.to_vec();
        for l in (0..layout.len()).rev() {
            let (w_off, b_off, fan_in, fan_out) = layout[l];
            let input = &cache.inputs[l];
            let mut grad_input = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                grad[b_off + o] += d;
                let row = w_off + o * fan_in;
                let g_row = &mut grad[row..row + fan_in];
                let w_row = &self.params[row..row + fan_in];
                for i in 0..fan_in {
                    g_row[i] += d * input[i];
                    grad_input[i] += d * w_row[i];
                }
            }
            if l > 0 {
                let z = &cache.preacts[l - 1];
                for (g, &zi) in grad_input.iter_mut().zip(z) {
                    *g *= self.spec.activation.derivative(zi);
                }
            }
            delta = grad_input;
        }
        Ok(delta)
    }

    fn check_input(&self, input: &[f64]) -> Result<(), NnError> {
        if input.len() != self.spec.input_dim() {
            return Err(NnError::ShapeMismatch {
                expected: self.spec.input_dim(),
                found: input.len(),
            });
        }
        if input.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("network input".into()));
        }
        Ok(())
    }

    fn affine(&self, x: &[f64], w_off: usize, b_off: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
        let mut z = self.params[b_off..b_off + fan_out].to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &self.params[w_off + o * fan_in..w_off + (o + 1) * fan_in];
            let mut acc = 0.0;
            for (w, xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *zo += acc;
        }
        z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradient;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Straight-line evaluation written independently of `Mlp::forward`.
    fn reference_forward(widths: &[usize], act: Activation, p: &[f64], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let mut off = 0;
        for l in 0..widths.len() - 1 {
            let (n_in, n_out) = (widths[l], widths[l + 1]);
            let w = &p[off..off + n_in * n_out];
            let b = &p[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let mut next = Vec::new();
            for o in 0..n_out {
                let mut s = b[o];
                for i in 0..n_in {
                    s += w[o * n_in + i] * h[i];
                }
                if l < widths.len() - 2 {
                    s = match act {
                        Activation::Relu => if s > 0.0 { s } else { 0.0 },
                        Activation::LeakyRelu => if s > 0.0 { s } else { 0.01 * s },
                    };
                }
                next.push(s);
            }
            h = next;
        }
        h
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = Mlp::zeros(MlpSpec::new(vec![3, 4, 2], Activation::Relu).unwrap());
        assert_eq!(net.predict(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let spec = MlpSpec::new(vec![3, 3], Activation::Relu).unwrap();
        let mut params = vec![0.0; spec.num_params()];
        for i in 0..3 {
            params[i * 3 + i] = 1.0;
        }
        let net = Mlp::from_params(spec, params).unwrap();
        assert_eq!(net.predict(&[0.5, -1.5, 2.0]).unwrap(), vec![0.5, -1.5, 2.0]);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for act in [Activation::Relu, Activation::LeakyRelu] {
            for widths in [vec![2, 7, 5], vec![4, 6, 6, 3], vec![5, 1, 2]] {
                let net = Mlp::new(MlpSpec::new(widths.clone(), act).unwrap(), &mut rng);
                let x: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
                let (out, _) = net.forward(&x).unwrap();
                let want = reference_forward(&widths, act, &net.params, &x);
                for (a, b) in out.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert_eq!(net.predict(&x).unwrap(), out);
            }
        }
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(MlpSpec::new(vec![3, 2], Activation::Relu).unwrap(), &mut rng);
        let x = [0.3, -1.2, 2.0];
        let g_out = [0.7, -0.4];
        let (_, cache) = net.forward(&x).unwrap();
        let mut grad = vec![0.0; net.params.len()];
        let g_in = net.backward(&cache, &g_out, &mut grad).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                assert!((grad[o * 3 + i] - g_out[o] * x[i]).abs() < 1e-15);
            }
            assert_eq!(grad[6 + o], g_out[o]);
        }
        for i in 0..3 {
            let want = net.params[i] * g_out[0] + net.params[3 + i] * g_out[1];
            assert!((g_in[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::new(MlpSpec::new(vec![2, 5, 3], Activation::LeakyRelu).unwrap(), &mut rng);
        let (_, cache) = net.forward(&[0.1, 0.2]).unwrap();
        let mut grad = vec![0.0; net.params.len()];
        net.backward(&cache, &[0.0; 3], &mut grad).unwrap();
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn finite_difference_agreement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for act in [Activation::Relu, Activation::LeakyRelu] {
            for widths in [vec![2, 6, 4], vec![3, 5, 5, 2]] {
                let spec = MlpSpec::new(widths.clone(), act).unwrap();
                let net = Mlp::new(spec.clone(), &mut rng);
                let x: Vec<f64> = (0..widths[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
                let coeff: Vec<f64> = (0..spec.output_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let loss = |p: &[f64]| {
                    let n = Mlp::from_params(spec.clone(), p.to_vec()).unwrap();
                    let y = n.predict(&x).unwrap();
                    y.iter().zip(&coeff).map(|(a, c)| a * c + 0.5 * a * a).sum::<f64>()
                };
                let (y, cache) = net.forward(&x).unwrap();
                let g_out: Vec<f64> = y.iter().zip(&coeff).map(|(a, c)| c + a).collect();
                let mut grad = vec![0.0; net.params.len()];
                net.backward(&cache, &g_out, &mut grad).unwrap();
                let report = check_gradient(loss, &net.params, &grad, 1e-5);
                assert!(report.max_rel_error < 1e-4, "{report:?}");
            }
        }
    }

    #[test]
    fn shape_and_finiteness_errors() {
        let net = Mlp::zeros(MlpSpec::new(vec![2, 3, 1], Activation::Relu).unwrap());
        assert!(matches!(net.predict(&[1.0]), Err(NnError::ShapeMismatch { .. })));
        assert!(matches!(net.predict(&[f64::NAN, 0.0]), Err(NnError::NonFinite(_))));
        let (_, cache) = net.forward(&[1.0, 2.0]).unwrap();
        let mut short = vec![0.0; 3];
        assert!(net.backward(&cache, &[1.0], &mut short).is_err());
        assert!(MlpSpec::new(vec![3], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Relu).is_err());
    }
}
