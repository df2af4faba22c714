use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};

pub const MLP_SLOPE: f64 = 0.2;

/// Fully connected network with leaky-ReLU hidden layers and a linear output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    /// `weights[l]` is `out × in`.
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl Mlp {
    pub fn init(input: usize, hidden: &[usize], output: usize, rng: &mut impl Rng) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (i, o) = (pair[0], pair[1]);
            let normal = Normal::new(0.0f64, (1.0 / i as f64).sqrt()).expect("positive std");
            weights.push(Tensor::matrix(o, i, (0..o * i).map(|_| normal.sample(rng)).collect()).expect("sized"));
            biases.push(Tensor::zeros(vec![o]));
        }
        Self { weights, biases }
    }

    /// Affine map `x ↦ x Wᵀ + b` with no hidden layer.
    pub fn affine(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        if weight.rank() != 2 || weight.rows() != bias.len() {
            return Err(Error::Shape(format!("weight {:?} with bias of length {}", weight.shape(), bias.len())));
        }
        Ok(Self { weights: vec![weight], biases: vec![Tensor::vector(bias)] })
    }

    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().map_or(0, Tensor::rows)
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().chain(&self.biases).map(Tensor::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() || self.weights.len() != self.biases.len() {
            return Err(Error::Shape("MLP layer lists are inconsistent".into()));
        }
        for (l, pair) in self.weights.windows(2).enumerate() {
            if pair[1].cols() != pair[0].rows() {
                return Err(Error::Shape(format!("MLP layer {} does not chain into layer {}", l, l + 1)));
            }
        }
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            if w.rank() != 2 || b.len() != w.rows() {
                return Err(Error::Shape(format!("MLP layer {l} has weight {:?} and bias {:?}", w.shape(), b.shape())));
            }
        }
        Ok(())
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("{prefix}.W{l}"), w));
            out.push((format!("{prefix}.b{l}"), b));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (l, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((format!("{prefix}.W{l}"), w));
            out.push((format!("{prefix}.b{l}"), b));
        }
        out
    }

    pub fn bind(&self, prefix: &str, bindings: &mut Bindings) {
        for (name, t) in self.named_params(prefix) {
            bindings.insert(name, t.clone());
        }
    }

    pub fn declare(&self, tape: &mut Tape, prefix: &str) -> MlpVars {
        let layers = (0..self.weights.len())
            .map(|l| {
                let w = tape.input(&format!("{prefix}.W{l}"));
                let b = tape.input(&format!("{prefix}.b{l}"));
                let b = tape.reshape(b, vec![1, self.biases[l].len()]);
                (w, b)
            })
            .collect();
        MlpVars { layers }
    }

    /// Plain forward pass over the rows of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.declare(&mut tape, "mlp");
        let xv = tape.input("x");
        let ones = tape.constant(Tensor::filled(vec![x.rows(), 1], 1.0));
        let out = vars.forward(&mut tape, xv, ones);
        let mut bind = Bindings::new();
        self.bind("mlp", &mut bind);
        bind.insert("x".into(), x.clone());
        tape.evaluate(&bind, out)
    }
}

pub struct MlpVars {
    layers: Vec<(Var, Var)>,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var, ones: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            let lin = tape.matmul_t(h, w);
            let bias = tape.matmul(ones, b);
            h = tape.add(lin, bias);
            if l < last {
                h = tape.map(h, Unary::LeakyRelu(MLP_SLOPE));
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn affine_forward() {
        let m = Mlp::affine(Tensor::matrix(1, 2, vec![2.0, -1.0]).unwrap(), vec![0.5]).unwrap();
        let y = m.forward(&Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap()).unwrap();
        assert_eq!(y.values(), &[1.5, -1.5]);
    }

    #[test]
    fn shapes_chain() {
        let m = Mlp::init(3, &[5, 4], 2, &mut ChaCha8Rng::seed_from_u64(0));
        m.validate().unwrap();
        assert_eq!(m.num_params(), 3 * 5 + 5 + 5 * 4 + 4 + 4 * 2 + 2);
        let y = m.forward(&Tensor::zeros(vec![7, 3])).unwrap();
        assert_eq!(y.shape(), &[7, 2]);
    }
}
