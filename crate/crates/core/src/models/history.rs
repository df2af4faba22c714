use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};

/// Single tanh recurrent cell summarizing the tokens seen so far:
/// `h_0 = 0`, `h_{t+1} = tanh(W_x x_t + W_h h_t + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEmbedder {
    /// `H × V`.
    pub input_weight: Tensor,
    /// `H × H`.
    pub state_weight: Tensor,
    pub bias: Tensor,
}

impl HistoryEmbedder {
    pub fn init(vocab: usize, state: usize, rng: &mut impl Rng) -> Self {
        let wx = Normal::new(0.0f64, (1.0 / vocab as f64).sqrt()).expect("positive std");
        let wh = Normal::new(0.0f64, 0.5 / (state as f64).sqrt()).expect("positive std");
        Self {
            input_weight: Tensor::matrix(state, vocab, (0..state * vocab).map(|_| wx.sample(rng)).collect()).expect("sized"),
            state_weight: Tensor::matrix(state, state, (0..state * state).map(|_| wh.sample(rng)).collect()).expect("sized"),
            bias: Tensor::zeros(vec![state]),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.bias.len()
    }

    pub fn vocab(&self) -> usize {
        self.input_weight.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, v) = (self.state_dim(), self.vocab());
        if self.input_weight.shape() != [h, v] || self.state_weight.shape() != [h, h] {
            return Err(Error::Shape("history embedder weights do not match its state size".into()));
        }
        Ok(())
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.Wx"), &self.input_weight),
            (format!("{prefix}.Wh"), &self.state_weight),
            (format!("{prefix}.b"), &self.bias),
        ]
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        vec![
            (format!("{prefix}.Wx"), &mut self.input_weight),
            (format!("{prefix}.Wh"), &mut self.state_weight),
            (format!("{prefix}.b"), &mut self.bias),
        ]
    }

    pub fn bind(&self, prefix: &str, bindings: &mut Bindings) {
        for (name, t) in self.named_params(prefix) {
            bindings.insert(name, t.clone());
        }
    }

    /// States `h_0 … h_{T-1}` for a batch of one-hot token blocks `tokens[t]`
    /// (each `B×V`); `h_t` depends only on tokens before position `t`.
    pub fn states_expr(&self, tape: &mut Tape, prefix: &str, tokens: &[Var], ones: Var, batch: usize) -> Vec<Var> {
        let wx = tape.input(&format!("{prefix}.Wx"));
        let wh = tape.input(&format!("{prefix}.Wh"));
        let b = tape.input(&format!("{prefix}.b"));
        let b = tape.reshape(b, vec![1, self.state_dim()]);
        let mut h = tape.constant(Tensor::zeros(vec![batch, self.state_dim()]));
        let mut out = Vec::with_capacity(tokens.len());
        for (t, &x) in tokens.iter().enumerate() {
            out.push(h);
            if t + 1 == tokens.len() {
                break;
            }
            let a = tape.matmul_t(x, wx);
            let r = tape.matmul_t(h, wh);
            let bias = tape.matmul(ones, b);
            let s = tape.add(a, r);
            let s = tape.add(s, bias);
            h = tape.map(s, Unary::Tanh);
        }
        out
    }

    /// Plain state update for one token index.
    pub fn step(&self, state: &[f64], token: usize) -> Vec<f64> {
        let h = self.state_dim();
        (0..h)
            .map(|i| {
                let mut s = self.bias.values()[i] + self.input_weight.get2(i, token);
                for j in 0..h {
                    s += self.state_weight.get2(i, j) * state[j];
                }
                s.tanh()
            })
            .collect()
    }

    /// Embedding of an empty history.
    pub fn empty(&self) -> Vec<f64> {
        vec![0.0; self.state_dim()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn empty_history_is_zero() {
        let f = HistoryEmbedder::init(4, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(f.empty(), vec![0.0; 3]);
    }

    #[test]
    fn tape_states_match_plain_steps() {
        let f = HistoryEmbedder::init(3, 2, &mut ChaCha8Rng::seed_from_u64(1));
        let tokens = [2usize, 0, 1];
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::filled(vec![1, 1], 1.0));
        let xs: Vec<Var> = tokens
            .iter()
            .map(|&k| {
                let mut v = vec![0.0; 3];
                v[k] = 1.0;
                tape.constant(Tensor::matrix(1, 3, v).unwrap())
            })
            .collect();
        let states = f.states_expr(&mut tape, "f", &xs, ones, 1);
        let all = tape.concat(&states, 0);
        let mut bind = Bindings::new();
        f.bind("f", &mut bind);
        let got = tape.evaluate(&bind, all).unwrap();
        let mut h = f.empty();
        for (t, &k) in tokens.iter().enumerate() {
            for j in 0..2 {
                assert!((got.get2(t, j) - h[j]).abs() < 1e-14);
            }
            h = f.step(&h, k);
        }
    }
}
