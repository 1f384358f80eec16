//! MLP feature extractor `g(d, w)` feeding the GP kernel, with exact
//! reverse-mode gradients.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FEATURE_DIM;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `a`.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// `[9, hidden..., features]`.
    pub layer_sizes: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            layer_sizes: vec![FEATURE_DIM, 256, 64, 5],
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl MlpConfig {
    pub fn new(layer_sizes: &[usize], seed: u64) -> Self {
        MlpConfig {
            layer_sizes: layer_sizes.to_vec(),
            activation: Activation::Tanh,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(
                "mlp needs at least an input and an output size".into(),
            ));
        }
        if self.layer_sizes[0] != FEATURE_DIM {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_DIM,
                got: self.layer_sizes[0],
            });
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidArgument(
                "mlp layer sizes must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap_or(&0)
    }
}

/// One affine map `W x + b`; `weights` is `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Layer {
            weights: DMatrix::zeros(outputs, inputs),
            bias: DVector::zeros(outputs),
        }
    }
}

/// Hidden layers use `activation`; the output layer is linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Half-width of the uniform initialization: `sqrt(3 / fan_in)`, so the
/// weight standard deviation is `1 / sqrt(fan_in)`.
pub fn init_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

pub fn mlp_init(config: &MlpConfig) -> Result<MlpParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let layers = config
        .layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = init_bound(fan_in);
            // Filled column by column so the draw order is fixed.
            let weights = DMatrix::from_fn(fan_out, fan_in, |_, _| rng.random_range(-bound..bound));
            Layer {
                weights,
                bias: DVector::zeros(fan_out),
            }
        })
        .collect();
    Ok(MlpParams {
        layers,
        activation: config.activation,
    })
}

/// Activations kept from a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input batch, the last entry the output; columns are samples.
    pub activations: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.activations.last().expect("non-empty cache")
    }
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.weights.ncols())
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weights.nrows())
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn zeros_like(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .map(|l| Layer::zeros(l.weights.ncols(), l.weights.nrows()))
            .collect()
    }

    /// Forward pass over a batch whose columns are inputs.
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<ForwardCache> {
        if inputs.nrows() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: inputs.nrows(),
            });
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.clone());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = &layer.weights * activations.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += &layer.bias;
            }
            if i != last {
                let act = self.activation;
                z.apply(|v| *v = act.apply(*v));
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Reverse pass. `upstream` holds dL/d(output) with samples as columns.
    /// Returns parameter gradients (summed over the batch) and input gradients.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: &DMatrix<f64>,
    ) -> Result<(Vec<Layer>, DMatrix<f64>)> {
        let out = cache.output();
        if upstream.shape() != out.shape() {
            return Err(Error::DimensionMismatch {
                expected: out.nrows(),
                got: upstream.nrows(),
            });
        }
        let mut grads = self.zeros_like();
        let mut delta = upstream.clone();
        for i in (0..self.layers.len()).rev() {
            if i != self.layers.len() - 1 {
                let act = self.activation;
                delta.zip_apply(&cache.activations[i + 1], |g, a| {
                    *g *= act.derivative_from_output(a)
                });
            }
            grads[i].weights = &delta * cache.activations[i].transpose();
            grads[i].bias = delta.column_sum();
            delta = self.layers[i].weights.transpose() * &delta;
        }
        Ok((grads, delta))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        flatten_layers(&self.layers, &mut out);
        out
    }

    /// Overwrites parameters from `values`, returning how many were consumed.
    pub fn unflatten(&mut self, values: &[f64]) -> usize {
        let mut k = 0;
        for l in &mut self.layers {
            let n = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&values[k..k + n]);
            k += n;
            let n = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&values[k..k + n]);
            k += n;
        }
        k
    }
}

/// Column-major weights then bias, layer by layer.
pub fn flatten_layers(layers: &[Layer], out: &mut Vec<f64>) {
    for l in layers {
        out.extend_from_slice(l.weights.as_slice());
        out.extend_from_slice(l.bias.as_slice());
    }
}

pub fn mlp_forward(params: &MlpParams, d: &[f64]) -> Result<DVector<f64>> {
    let cache = params.forward_batch(&DMatrix::from_column_slice(d.len(), 1, d))?;
    Ok(cache.output().column(0).into_owned())
}

pub fn mlp_backward(
    params: &MlpParams,
    d: &[f64],
    upstream: &[f64],
) -> Result<(Vec<Layer>, DVector<f64>)> {
    let cache = params.forward_batch(&DMatrix::from_column_slice(d.len(), 1, d))?;
    if upstream.len() != params.output_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.output_dim(),
            got: upstream.len(),
        });
    }
    let up = DMatrix::from_column_slice(upstream.len(), 1, upstream);
    let (grads, dx) = params.backward_batch(&cache, &up)?;
    Ok((grads, dx.column(0).into_owned()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn input() -> Vec<f64> {
        vec![0.3, -1.2, 0.5, 0.05, -0.7, 0.01, 0.2, 1.1, -0.4]
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = MlpConfig::new(&[9, 16, 8, 3], 7);
        assert_eq!(mlp_init(&cfg).unwrap(), mlp_init(&cfg).unwrap());
        let other = mlp_init(&MlpConfig::new(&[9, 16, 8, 3], 8)).unwrap();
        assert_ne!(mlp_init(&cfg).unwrap(), other);
    }

    #[test]
    fn single_linear_layer_shape() {
        let p = mlp_init(&MlpConfig::new(&[9, 1], 0)).unwrap();
        assert_eq!(p.layers.len(), 1);
        assert_eq!(p.layers[0].weights.shape(), (1, 9));
        assert!(p.layers[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(MlpConfig::new(&[8, 4], 0).validate().is_err());
        assert!(MlpConfig::new(&[9, 0, 4], 0).validate().is_err());
        assert!(MlpConfig::new(&[9], 0).validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut p = mlp_init(&MlpConfig::new(&[9, 6, 4], 1)).unwrap();
        for l in &mut p.layers {
            l.weights.fill(0.0);
        }
        let out = mlp_forward(&p, &input()).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn selector_layer_reproduces_inputs() {
        let mut p = mlp_init(&MlpConfig::new(&[9, 3], 1)).unwrap();
        p.layers[0].weights.fill(0.0);
        p.layers[0].weights[(0, 2)] = 1.0;
        p.layers[0].weights[(1, 5)] = 1.0;
        p.layers[0].weights[(2, 8)] = 1.0;
        let d = input();
        let out = mlp_forward(&p, &d).unwrap();
        assert_eq!(out.as_slice(), &[d[2], d[5], d[8]]);
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let p = mlp_init(&MlpConfig::new(&[9, 3], 1)).unwrap();
        assert!(matches!(
            mlp_forward(&p, &[1.0; 8]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(mlp_backward(&p, &input(), &[1.0; 2]).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let p = mlp_init(&MlpConfig::new(&[9, 5, 2], 3)).unwrap();
        let (g, dx) = mlp_backward(&p, &input(), &[0.0, 0.0]).unwrap();
        let mut flat = Vec::new();
        flatten_layers(&g, &mut flat);
        assert!(flat.iter().chain(dx.iter()).all(|&v| v == 0.0));
    }

    #[test]
    fn linear_network_closed_form() {
        // One linear layer: dL/dW = g d^T, dL/db = g, dL/dd = W^T g.
        let p = mlp_init(&MlpConfig::new(&[9, 2], 4)).unwrap();
        let d = input();
        let g = [0.7, -1.3];
        let (grads, dx) = mlp_backward(&p, &d, &g).unwrap();
        for (r, gr) in g.iter().enumerate() {
            for (c, dc) in d.iter().enumerate() {
                assert_relative_eq!(grads[0].weights[(r, c)], gr * dc, max_relative = 1e-15);
            }
            assert_eq!(grads[0].bias[r], *gr);
        }
        for c in 0..9 {
            let expected = p.layers[0].weights[(0, c)] * g[0] + p.layers[0].weights[(1, c)] * g[1];
            assert_relative_eq!(dx[c], expected, max_relative = 1e-14);
        }
    }

    #[test]
    fn flatten_roundtrip() {
        let p = mlp_init(&MlpConfig::new(&[9, 4, 2], 5)).unwrap();
        let flat = p.flatten();
        assert_eq!(flat.len(), p.num_params());
        let mut q = mlp_init(&MlpConfig::new(&[9, 4, 2], 6)).unwrap();
        assert_eq!(q.unflatten(&flat), flat.len());
        assert_eq!(p, q);
    }
}
