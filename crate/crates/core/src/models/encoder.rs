use rand::Rng;
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpVars};
use crate::data::Standardization;
use crate::diffcore::{Bindings, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const ENCODER_PREFIX: &str = "enc";

/// Amortized diagonal-Gaussian posterior `q(w | x) = N(μ(x), diag exp(ℓ(x)))`.
///
/// Inputs are standardized by a fixed affine map before entering the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub net: Mlp,
    pub latent_dim: usize,
    pub input: Standardization,
}

impl Encoder {
    pub fn init(input_dim: usize, hidden: &[usize], latent_dim: usize, rng: &mut impl Rng) -> Self {
        let mut net = Mlp::init(input_dim, hidden, 2 * latent_dim, rng);
        // Start near the prior: small output weights.
        if let Some(w) = net.weights.last_mut() {
            for v in w.values_mut() {
                *v *= 0.1;
            }
        }
        Self { net, latent_dim, input: Standardization::identity(input_dim) }
    }

    /// Linear encoder `μ = A x + a`, `ℓ = B x + b`.
    pub fn linear(mean_weight: Tensor, mean_bias: Vec<f64>, logvar_weight: Tensor, logvar_bias: Vec<f64>) -> Result<Self> {
        if mean_weight.shape() != logvar_weight.shape() || mean_bias.len() != logvar_bias.len() {
            return Err(Error::Shape("mean and log-variance heads differ in shape".into()));
        }
        let (m, d) = (mean_weight.rows(), mean_weight.cols());
        let mut vals = mean_weight.into_values();
        vals.extend(logvar_weight.into_values());
        let bias = [mean_bias, logvar_bias].concat();
        Ok(Self { net: Mlp::affine(Tensor::matrix(2 * m, d, vals)?, bias)?, latent_dim: m, input: Standardization::identity(d) })
    }

    /// Encoder that ignores `x` and always returns `N(mean, diag exp(log_var))`.
    pub fn constant(input_dim: usize, mean: &[f64], log_var: &[f64]) -> Result<Self> {
        let m = mean.len();
        Self::linear(Tensor::zeros(vec![m, input_dim]), mean.to_vec(), Tensor::zeros(vec![m, input_dim]), log_var.to_vec())
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.net.output_dim() != 2 * self.latent_dim {
            return Err(Error::Shape(format!("encoder emits {} values for a {}-dim latent", self.net.output_dim(), self.latent_dim)));
        }
        let d = self.input_dim();
        if self.input.shift.len() != d || self.input.scale.len() != d || self.input.scale.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("encoder input standardization is invalid".into()));
        }
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.net.named_params(ENCODER_PREFIX)
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.net.named_params_mut(ENCODER_PREFIX)
    }

    pub fn bind(&self, bindings: &mut Bindings) {
        self.net.bind(ENCODER_PREFIX, bindings);
    }

    pub fn declare(&self, tape: &mut Tape) -> MlpVars {
        self.net.declare(tape, ENCODER_PREFIX)
    }

    /// `(mean, log_var)` nodes, each `B×M`, from the standardized input node.
    pub fn outputs(&self, tape: &mut Tape, vars: &MlpVars, x_std: Var, ones: Var) -> (Var, Var) {
        let out = vars.forward(tape, x_std, ones);
        let mean = tape.slice(out, 1, 0, self.latent_dim);
        let log_var = tape.slice(out, 1, self.latent_dim, self.latent_dim);
        (mean, log_var)
    }

    /// Plain `(mean, log_var)` for every row of raw `x`.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        if x.rank() != 2 || x.cols() != self.input_dim() {
            return Err(Error::Shape(format!("encoder expects [n, {}], got {:?}", self.input_dim(), x.shape())));
        }
        let out = self.net.forward(&self.input.apply(x))?;
        let (n, m) = (x.rows(), self.latent_dim);
        let mut mean = Vec::with_capacity(n * m);
        let mut lv = Vec::with_capacity(n * m);
        for i in 0..n {
            let r = out.row(i);
            mean.extend_from_slice(&r[..m]);
            lv.extend_from_slice(&r[m..]);
        }
        Ok((Tensor::matrix(n, m, mean)?, Tensor::matrix(n, m, lv)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_encoder_ignores_input() {
        let e = Encoder::constant(3, &[1.0, -1.0], &[0.0, 0.5]).unwrap();
        let (m, lv) = e.forward(&Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-4.0, 0.0, 9.0]]).unwrap()).unwrap();
        assert_eq!(m.values(), &[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(lv.values(), &[0.0, 0.5, 0.0, 0.5]);
    }

    #[test]
    fn shapes() {
        let e = Encoder::init(4, &[8], 3, &mut ChaCha8Rng::seed_from_u64(0));
        e.validate().unwrap();
        let (m, lv) = e.forward(&Tensor::zeros(vec![5, 4])).unwrap();
        assert_eq!(m.shape(), &[5, 3]);
        assert_eq!(lv.shape(), &[5, 3]);
    }
}
