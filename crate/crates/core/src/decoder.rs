//! Injective likelihood maps `z ↦ g₂(βᵀ g₁(z))` and exponential-family heads.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{logsumexp, softplus, Bindings, Tape, Tensor, Unary, Var};
use crate::error::{Error, Result};
use crate::icnn::{IcnnParams, IcnnVars};

/// The K×D zero-one matrix with ones on the main diagonal. Only its action
/// `z ↦ βᵀz` (zero padding) is ever materialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncatedIdentity {
    pub k: usize,
    pub d: usize,
}

impl TruncatedIdentity {
    pub fn new(k: usize, d: usize) -> Result<Self> {
        if d < k {
            return Err(Error::Config(format!(
                "truncated identity needs D >= K for full column rank of its transpose, got K={k}, D={d}"
            )));
        }
        Ok(Self { k, d })
    }

    pub fn matrix(&self) -> Tensor {
        let mut t = Tensor::zeros(vec![self.k, self.d]);
        for i in 0..self.k {
            t.set2(i, i, 1.0);
        }
        t
    }

    /// `βᵀz`: `z` followed by `D-K` zeros.
    pub fn embed(&self, z: &[f64]) -> Vec<f64> {
        let mut out = z.to_vec();
        out.resize(self.d, 0.0);
        out
    }

    /// Left inverse of `embed`: the first K coordinates.
    pub fn recover(&self, x: &[f64]) -> Vec<f64> {
        x[..self.k].to_vec()
    }

    /// Row-wise embedding of a `B×K` node.
    pub fn embed_expr(&self, tape: &mut Tape, z: Var, batch: usize) -> Var {
        if self.d == self.k {
            return z;
        }
        let zeros = tape.constant(Tensor::zeros(vec![batch, self.d - self.k]));
        tape.concat(&[z, zeros], 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    /// Identity link, one global learned variance.
    Gaussian,
    /// Sigmoid link.
    Bernoulli,
    /// Softmax over the D natural parameters; observations are one-hot.
    Categorical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpFamilyHead {
    pub family: Family,
    /// Single-element log of the Gaussian emission variance σ²; unused by other families.
    pub log_var: Tensor,
}

impl ExpFamilyHead {
    pub fn gaussian(variance: f64) -> Self {
        Self { family: Family::Gaussian, log_var: Tensor::scalar(variance.ln()) }
    }

    pub fn bernoulli() -> Self {
        Self { family: Family::Bernoulli, log_var: Tensor::scalar(0.0) }
    }

    pub fn categorical() -> Self {
        Self { family: Family::Categorical, log_var: Tensor::scalar(0.0) }
    }

    pub fn variance(&self) -> f64 {
        self.log_var.item().exp()
    }

    pub fn is_trainable(&self) -> bool {
        self.family == Family::Gaussian
    }

    /// Checks that `x` lies in the family's support.
    pub fn check_support(&self, x: &[f64]) -> Result<()> {
        match self.family {
            Family::Gaussian => {
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("Gaussian observation is not finite".into()));
                }
            }
            Family::Bernoulli => {
                if let Some(v) = x.iter().find(|&&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Config(format!("Bernoulli observation {v} is not binary")));
                }
            }
            Family::Categorical => {
                let ones = x.iter().filter(|&&v| v == 1.0).count();
                let zeros = x.iter().filter(|&&v| v == 0.0).count();
                if ones != 1 || ones + zeros != x.len() {
                    return Err(Error::Config("categorical observation is not one-hot".into()));
                }
            }
        }
        Ok(())
    }

    /// Mean of the emission given natural parameters (after the link).
    pub fn mean(&self, eta: &[f64]) -> Vec<f64> {
        match self.family {
            Family::Gaussian => eta.to_vec(),
            Family::Bernoulli => eta.iter().map(|&e| crate::diffcore::sigmoid(e)).collect(),
            Family::Categorical => {
                let lse = logsumexp(eta);
                eta.iter().map(|e| (e - lse).exp()).collect()
            }
        }
    }

    /// Tape expression of the per-row log-likelihood; `eta` and `x` are `B×D`,
    /// `log_var` is a single-element node (ignored unless Gaussian). Returns `B×1`.
    pub fn log_likelihood_expr(&self, tape: &mut Tape, eta: Var, x: Var, log_var: Option<Var>, ones: Var, dim: usize) -> Var {
        match self.family {
            Family::Gaussian => {
                let lv = log_var.expect("Gaussian head needs its log-variance node");
                let diff = tape.sub(x, eta);
                let sq = tape.square(diff);
                let rows = tape.sum_axis(sq, 1);
                let neg_lv = tape.neg(lv);
                let inv_var = tape.exp(neg_lv);
                let quad = tape.scale_by(rows, inv_var);
                let lv11 = tape.reshape(lv, vec![1, 1]);
                let lv_rows = tape.matmul(ones, lv11);
                let norm = tape.scale(lv_rows, dim as f64);
                let total = tape.add(quad, norm);
                let half = tape.scale(total, -0.5);
                tape.offset(half, -0.5 * dim as f64 * (2.0 * PI).ln())
            }
            Family::Bernoulli => {
                let xe = tape.mul(x, eta);
                let sp = tape.map(eta, Unary::Softplus);
                let d = tape.sub(xe, sp);
                tape.sum_axis(d, 1)
            }
            Family::Categorical => {
                let xe = tape.mul(x, eta);
                let picked = tape.sum_axis(xe, 1);
                let lse = tape.logsumexp_rows(eta);
                tape.sub(picked, lse)
            }
        }
    }
}

/// Exact log-density of `x` under the head with natural parameters `eta`.
pub fn log_likelihood(head: &ExpFamilyHead, eta: &[f64], x: &[f64]) -> Result<f64> {
    if eta.len() != x.len() {
        return Err(Error::Shape(format!("eta has {} entries, x has {}", eta.len(), x.len())));
    }
    head.check_support(x)?;
    Ok(match head.family {
        Family::Gaussian => {
            let var = head.variance();
            let d = x.len() as f64;
            let sq: f64 = x.iter().zip(eta).map(|(a, b)| (a - b) * (a - b)).sum();
            -0.5 * (sq / var + d * (2.0 * PI * var).ln())
        }
        Family::Bernoulli => x.iter().zip(eta).map(|(xi, e)| xi * e - softplus(*e)).sum(),
        Family::Categorical => {
            let lse = logsumexp(eta);
            x.iter().zip(eta).map(|(xi, e)| xi * (e - lse)).sum()
        }
    })
}

/// One `(βₖ, gₖ)` stage after the first Brenier map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub beta: TruncatedIdentity,
    pub map: IcnnParams,
}

/// `g_n(β_nᵀ … g₂(β₂ᵀ g₁(z)))` followed by an exponential-family head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InjectiveDecoder {
    pub first: IcnnParams,
    pub stages: Vec<Stage>,
    pub head: ExpFamilyHead,
}

/// Tape handles for a decoder's parameters.
pub struct DecoderVars {
    first: IcnnVars,
    stages: Vec<(TruncatedIdentity, IcnnVars)>,
    pub log_var: Option<Var>,
}

impl InjectiveDecoder {
    /// Two-stage decoder `g₂(βᵀ g₁(·))` from `input_dim` to `output_dim`.
    pub fn two_stage(
        input_dim: usize,
        output_dim: usize,
        hidden: &[usize],
        quadratic: f64,
        head: ExpFamilyHead,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::deep(&[input_dim, output_dim], hidden, quadratic, head, rng)
    }

    /// Stacked decoder through the dimensions `dims[0] <= dims[1] <= …`.
    pub fn deep(dims: &[usize], hidden: &[usize], quadratic: f64, head: ExpFamilyHead, rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("decoder needs an input and an output dimension".into()));
        }
        let first = IcnnParams::init(dims[0], hidden, quadratic, rng);
        let mut stages = Vec::new();
        for pair in dims.windows(2) {
            stages.push(Stage {
                beta: TruncatedIdentity::new(pair[0], pair[1])?,
                map: IcnnParams::init(pair[1], hidden, quadratic, rng),
            });
        }
        Ok(Self { first, stages, head })
    }

    /// Decoder whose Brenier maps are all the identity (`(1/2)‖u‖²` potentials).
    pub fn identity(input_dim: usize, output_dim: usize, hidden: &[usize], head: ExpFamilyHead) -> Result<Self> {
        Ok(Self {
            first: IcnnParams::quadratic_only(input_dim, hidden, 1.0),
            stages: vec![Stage {
                beta: TruncatedIdentity::new(input_dim, output_dim)?,
                map: IcnnParams::quadratic_only(output_dim, hidden, 1.0),
            }],
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.first.dim
    }

    pub fn output_dim(&self) -> usize {
        self.stages.last().map_or(self.first.dim, |s| s.beta.d)
    }

    pub fn maps(&self) -> impl Iterator<Item = &IcnnParams> {
        std::iter::once(&self.first).chain(self.stages.iter().map(|s| &s.map))
    }

    pub fn maps_mut(&mut self) -> impl Iterator<Item = &mut IcnnParams> {
        std::iter::once(&mut self.first).chain(self.stages.iter_mut().map(|s| &mut s.map))
    }

    pub fn validate(&self) -> Result<()> {
        let mut dim = self.first.dim;
        self.first.validate()?;
        for (i, s) in self.stages.iter().enumerate() {
            if s.beta.k != dim || s.map.dim != s.beta.d || s.beta.d < s.beta.k {
                return Err(Error::Shape(format!(
                    "stage {} chains {} -> {}x{} -> {}",
                    i, dim, s.beta.k, s.beta.d, s.map.dim
                )));
            }
            s.map.validate()?;
            dim = s.beta.d;
        }
        Ok(())
    }

    fn map_prefix(i: usize) -> String {
        format!("g{}", i + 1)
    }

    /// Trainable tensors: every map's layers plus the Gaussian log-variance.
    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out: Vec<_> = self
            .maps()
            .enumerate()
            .flat_map(|(i, m)| m.named_params(&format!("{prefix}.{}", Self::map_prefix(i))))
            .collect();
        if self.head.is_trainable() {
            out.push((format!("{prefix}.log_var"), &self.head.log_var));
        }
        out
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let trainable = self.head.is_trainable();
        let mut out: Vec<_> = std::iter::once(&mut self.first)
            .chain(self.stages.iter_mut().map(|s| &mut s.map))
            .enumerate()
            .flat_map(|(i, m)| m.named_params_mut(&format!("{prefix}.{}", Self::map_prefix(i))))
            .collect();
        if trainable {
            out.push((format!("{prefix}.log_var"), &mut self.head.log_var));
        }
        out
    }

    pub fn bind(&self, prefix: &str, bindings: &mut Bindings) {
        for (name, t) in self.named_params(prefix) {
            bindings.insert(name, t.clone());
        }
    }

    pub fn declare(&self, tape: &mut Tape, prefix: &str) -> DecoderVars {
        let first = self.first.declare(tape, &format!("{prefix}.g1"));
        let stages = self
            .stages
            .iter()
            .enumerate()
            .map(|(i, s)| (s.beta, s.map.declare(tape, &format!("{prefix}.{}", Self::map_prefix(i + 1)))))
            .collect();
        let log_var = self.head.is_trainable().then(|| tape.input(&format!("{prefix}.log_var")));
        DecoderVars { first, stages, log_var }
    }

    /// Natural parameters for a single latent point.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.input_dim() {
            return Err(Error::Shape(format!("latent has dimension {}, decoder expects {}", z.len(), self.input_dim())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("latent is not finite".into()));
        }
        Ok(self.decode_batch(&Tensor::matrix(1, z.len(), z.to_vec())?)?.into_values())
    }

    /// Natural parameters for every row of `z`.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        self.validate()?;
        if z.rank() != 2 || z.cols() != self.input_dim() {
            return Err(Error::Shape(format!("latent batch {:?}, decoder expects [n, {}]", z.shape(), self.input_dim())));
        }
        let mut tape = Tape::new();
        let vars = self.declare(&mut tape, "dec");
        let zv = tape.input("z");
        let ones = tape.constant(Tensor::filled(vec![z.rows(), 1], 1.0));
        let out = vars.decode(&mut tape, zv, ones, z.rows());
        let mut bind = Bindings::new();
        self.bind("dec", &mut bind);
        bind.insert("z".into(), z.clone());
        tape.evaluate(&bind, out)
    }
}

impl DecoderVars {
    pub fn decode(&self, tape: &mut Tape, z: Var, ones: Var, batch: usize) -> Var {
        let mut h = self.first.gradient_map(tape, z, ones);
        for (beta, map) in &self.stages {
            let padded = beta.embed_expr(tape, h, batch);
            h = map.gradient_map(tape, padded, ones);
        }
        h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InjectivityReport {
    pub samples: usize,
    /// Smallest `‖η(z₁) − η(z₂)‖` over pairs with `‖z₁ − z₂‖ ≥ δ`.
    pub min_separation: f64,
    /// Pairs whose outputs coincide to within 1e-12.
    pub violations: usize,
}

const COLLISION_TOL: f64 = 1e-12;

/// Samples separated latent pairs and measures how far apart their outputs are.
///
/// A third of the pairs are nearby points (`‖z₁ − z₂‖ ∈ [δ, 2δ]`), a third are
/// reflections `z₂ = −z₁` and a third swap two coordinates; the last two kinds
/// catch maps that are even or symmetric in their input.
pub fn check_injectivity_of<F>(map: F, dim: usize, n_pairs: usize, delta: f64, seed: u64) -> Result<InjectivityReport>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z1 = Vec::with_capacity(n_pairs * dim);
    let mut z2 = Vec::with_capacity(n_pairs * dim);
    let mut kept = 0;
    while kept < n_pairs {
        let a: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
        let b: Vec<f64> = match kept % 3 {
            0 => {
                let dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir.iter().map(|v: &f64| v * v).sum::<f64>().sqrt().max(1e-300);
                let r = delta * rng.random_range(1.0..2.0);
                a.iter().zip(&dir).map(|(x, d)| x + r * d / norm).collect()
            }
            1 => a.iter().map(|x| -x).collect(),
            _ => {
                let mut b = a.clone();
                if dim >= 2 {
                    let i = rng.random_range(0..dim);
                    let j = (i + 1 + rng.random_range(0..dim - 1)) % dim;
                    b.swap(i, j);
                } else {
                    b[0] = -b[0];
                }
                b
            }
        };
        let sep: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        if sep < delta {
            continue;
        }
        z1.extend(a);
        z2.extend(b);
        kept += 1;
    }
    let e1 = map(&Tensor::matrix(n_pairs, dim, z1)?)?;
    let e2 = map(&Tensor::matrix(n_pairs, dim, z2)?)?;
    let mut report = InjectivityReport { samples: n_pairs, min_separation: f64::INFINITY, violations: 0 };
    for i in 0..n_pairs {
        let d: f64 = e1.row(i).iter().zip(e2.row(i)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        report.min_separation = report.min_separation.min(d);
        if d <= COLLISION_TOL {
            report.violations += 1;
        }
    }
    Ok(report)
}

pub fn check_injectivity(dec: &InjectiveDecoder, n_pairs: usize, delta: f64, seed: u64) -> Result<InjectivityReport> {
    dec.validate()?;
    check_injectivity_of(|z| dec.decode_batch(z), dec.input_dim(), n_pairs, delta, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_decoder_pads_exactly() {
        let dec = InjectiveDecoder::identity(2, 3, &[4], ExpFamilyHead::gaussian(1.0)).unwrap();
        assert_eq!(dec.decode(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0, 0.0]);
        assert_eq!(dec.decode(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn beta_rejects_rank_deficient_shape() {
        assert!(TruncatedIdentity::new(3, 2).is_err());
        let b = TruncatedIdentity::new(2, 4).unwrap();
        let z = [0.1, -7.25];
        assert_eq!(b.recover(&b.embed(&z)), z.to_vec());
        let m = b.matrix();
        assert_eq!(m.values(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn likelihood_values() {
        let g = ExpFamilyHead::gaussian(1.0);
        assert!((log_likelihood(&g, &[0.0], &[0.0]).unwrap() + 0.918_938_533_204_672_7).abs() < 1e-12);
        let want = -(2.0 * PI).ln() - 1.0;
        assert!((log_likelihood(&g, &[1.0, 1.0], &[0.0, 0.0]).unwrap() - want).abs() < 1e-12);
        let b = ExpFamilyHead::bernoulli();
        assert!((log_likelihood(&b, &[0.0], &[1.0]).unwrap() - 0.5f64.ln()).abs() < 1e-15);
        assert!(log_likelihood(&b, &[0.0], &[0.5]).is_err());
        let c = ExpFamilyHead::categorical();
        let ll = log_likelihood(&c, &[1.0, 2.0, 3.0], &[0.0, 1.0, 0.0]).unwrap();
        assert!((ll - (2.0 - logsumexp(&[1.0, 2.0, 3.0]))).abs() < 1e-15);
        assert!(log_likelihood(&c, &[1.0, 2.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn tape_likelihood_matches_direct() {
        let eta = Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.5]]).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        for head in [ExpFamilyHead::gaussian(0.7), ExpFamilyHead::bernoulli(), ExpFamilyHead::categorical()] {
            let mut tape = Tape::new();
            let ev = tape.input("eta");
            let xv = tape.input("x");
            let lv = tape.input("lv");
            let ones = tape.constant(Tensor::filled(vec![2, 1], 1.0));
            let out = head.log_likelihood_expr(&mut tape, ev, xv, Some(lv), ones, 2);
            let mut bind = Bindings::new();
            bind.insert("eta".into(), eta.clone());
            bind.insert("x".into(), x.clone());
            bind.insert("lv".into(), head.log_var.clone());
            let rows = tape.evaluate(&bind, out).unwrap();
            for r in 0..2 {
                let direct = log_likelihood(&head, eta.row(r), x.row(r)).unwrap();
                assert!((rows.values()[r] - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_injective_map_is_caught() {
        let norm_broadcast = |z: &Tensor| {
            let rows: Vec<Vec<f64>> = (0..z.rows())
                .map(|i| {
                    let n = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    vec![n; 3]
                })
                .collect();
            Tensor::from_rows(&rows)
        };
        let r = check_injectivity_of(norm_broadcast, 2, 300, 0.1, 1).unwrap();
        assert!(r.violations > 0);
    }

    #[test]
    fn identity_decoder_is_isometric() {
        let dec = InjectiveDecoder::identity(2, 4, &[4], ExpFamilyHead::gaussian(1.0)).unwrap();
        let r = check_injectivity(&dec, 600, 0.1, 2).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.min_separation >= 0.1);
    }

    #[test]
    fn dimension_mismatch() {
        let dec = InjectiveDecoder::identity(2, 4, &[4], ExpFamilyHead::gaussian(1.0)).unwrap();
        assert!(dec.decode(&[1.0]).is_err());
    }
}
