//! A small fully connected classifier with hand-written backprop.

use rand::distr::Distribution;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{CpError, Result};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
}

/// Dense layers `dims[0] -> dims[1] -> … -> dims[L]`, activation between
/// layers, raw logits out. Parameters are one flat vector: per layer the
/// row-major `(out × in)` weights followed by the `out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TinyClassifier {
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Per-layer activations saved by the forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    // layers[0] is the input; the last entry is the logits
    layers: Vec<Vec<f64>>,
}

impl Trace {
    pub fn logits(&self) -> &[f64] {
        self.layers.last().expect("trace has an output layer")
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl TinyClassifier {
    /// Gaussian weights with std `1/sqrt(fan_in)`, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(CpError::config("classifier needs at least input and output dims, all positive"));
        }
        if *dims.last().unwrap() < 2 {
            return Err(CpError::config("classifier needs at least 2 outputs"));
        }
        let mut rng = stream(seed, "conftr/init");
        let mut params = Vec::with_capacity(param_count(dims));
        for w in dims.windows(2) {
            let scale = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..w[0] * w[1] {
                let z: f64 = StandardNormal.sample(&mut rng);
                params.push(scale * z);
            }
            params.extend(std::iter::repeat_n(0.0, w[1]));
        }
        Ok(Self {
            dims: dims.to_vec(),
            activation: Activation::Tanh,
            params,
        })
    }

    pub fn from_params(dims: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut m = Self::new(dims, 0)?;
        if params.len() != m.params.len() {
            return Err(CpError::Shape {
                expected: format!("{} parameters", m.params.len()),
                actual: format!("{} parameters", params.len()),
            });
        }
        m.params = params;
        Ok(m)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(CpError::Shape {
                expected: format!("{} features", self.input_dim()),
                actual: format!("{} features", x.len()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Trace> {
        self.check_input(x)?;
        let depth = self.dims.len() - 1;
        let mut layers = Vec::with_capacity(depth + 1);
        layers.push(x.to_vec());
        let mut offset = 0;
        for l in 0..depth {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let w = &self.params[offset..offset + n_in * n_out];
            let b = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let input = &layers[l];
            let mut out: Vec<f64> = (0..n_out)
                .map(|o| b[o] + w[o * n_in..(o + 1) * n_in].iter().zip(input).map(|(a, v)| a * v).sum::<f64>())
                .collect();
            if l + 1 < depth {
                out.iter_mut().for_each(|v| *v = v.tanh());
            }
            layers.push(out);
        }
        Ok(Trace { layers })
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x)?.layers.pop().unwrap())
    }

    /// Adds `d loss / d params` into `grad`, given `d loss / d logits`.
    pub fn backward(&self, trace: &Trace, d_logits: &[f64], grad: &mut [f64]) {
        let depth = self.dims.len() - 1;
        let mut offsets = Vec::with_capacity(depth);
        let mut offset = 0;
        for l in 0..depth {
            offsets.push(offset);
            offset += self.dims[l] * self.dims[l + 1] + self.dims[l + 1];
        }
        let mut delta = d_logits.to_vec();
        for l in (0..depth).rev() {
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let off = offsets[l];
            let input = &trace.layers[l];
            for o in 0..n_out {
                let row = off + o * n_in;
                for (g, v) in grad[row..row + n_in].iter_mut().zip(input) {
                    *g += delta[o] * v;
                }
                grad[off + n_in * n_out + o] += delta[o];
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + n_in * n_out];
            // input of this layer is tanh output of the previous one
            delta = (0..n_in)
                .map(|i| {
                    let back: f64 = (0..n_out).map(|o| w[o * n_in + i] * delta[o]).sum();
                    back * (1.0 - input[i] * input[i])
                })
                .collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_layout() {
        let m = TinyClassifier::new(&[3, 5, 2], 1).unwrap();
        assert_eq!(m.num_params(), 3 * 5 + 5 + 5 * 2 + 2);
        assert_eq!(m.logits(&[0.1, 0.2, 0.3]).unwrap().len(), 2);
        assert!(m.logits(&[0.1]).is_err());
    }

    #[test]
    fn linear_model_matches_hand_computation() {
        // W = [[1, 2], [3, 4], [5, 6]], b = [0.5, -0.5, 0]
        let m = TinyClassifier::from_params(&[2, 3], vec![1., 2., 3., 4., 5., 6., 0.5, -0.5, 0.]).unwrap();
        assert_eq!(m.logits(&[1.0, -1.0]).unwrap(), vec![-0.5, -1.5, -1.0]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut m = TinyClassifier::new(&[3, 4, 3], 9).unwrap();
        let x = [0.3, -1.2, 0.8];
        let g_out = [0.7, -0.2, 0.4];
        let f = |m: &TinyClassifier| m.logits(&x).unwrap().iter().zip(&g_out).map(|(a, b)| a * b).sum::<f64>();
        let mut grad = vec![0.0; m.num_params()];
        m.backward(&m.forward(&x).unwrap(), &g_out, &mut grad);
        for i in 0..m.num_params() {
            let orig = m.params[i];
            m.params[i] = orig + 1e-6;
            let up = f(&m);
            m.params[i] = orig - 1e-6;
            let down = f(&m);
            m.params[i] = orig;
            let fd = (up - down) / 2e-6;
            assert!((fd - grad[i]).abs() <= 1e-6 + 1e-6 * fd.abs(), "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn init_is_seeded() {
        assert_eq!(TinyClassifier::new(&[2, 3], 4).unwrap(), TinyClassifier::new(&[2, 3], 4).unwrap());
        assert_ne!(TinyClassifier::new(&[2, 3], 4).unwrap(), TinyClassifier::new(&[2, 3], 5).unwrap());
    }
}
