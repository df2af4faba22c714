use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::encoder::Encoder;
use super::model::{Bridge, DecoderNetVars, Model, HISTORY_PREFIX};
use crate::decoder::{ExpFamilyHead, Family};
use crate::diffcore::{logsumexp, Bindings, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// How the latent part of the bound is estimated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlMode {
    /// Closed-form KL; only the reconstruction term is sampled.
    #[default]
    Analytic,
    /// Single-sample `log q(w|x) − log p(w)` per draw, sharing the draws of the
    /// reconstruction term. Zero variance when `q` is the exact posterior.
    Sampled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboOptions {
    pub beta_weight: f64,
    pub n_mc: usize,
    pub mode: KlMode,
}

impl Default for ElboOptions {
    fn default() -> Self {
        Self { beta_weight: 1.0, n_mc: 1, mode: KlMode::Analytic }
    }
}

impl ElboOptions {
    fn validate(&self) -> Result<()> {
        if !(self.beta_weight > 0.0 && self.beta_weight.is_finite()) {
            return Err(Error::Config(format!("beta_weight must be positive, got {}", self.beta_weight)));
        }
        if self.n_mc == 0 {
            return Err(Error::Config("n_mc must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ElboEstimate {
    /// Dataset-average bound.
    pub elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub per_point: Vec<f64>,
}

/// Prior component `p(w | c)` as optional `1×M` mean and log-variance rows
/// (absent means 0).
struct Component {
    mean: Option<Var>,
    log_var: Option<Var>,
}

struct SeqNodes {
    rep: Var,
    rep_t: Var,
    states: Var,
    tokens: Var,
    ones: Var,
    rows: usize,
}

/// Reusable ELBO expression for one batch size.
pub struct ElboGraph {
    pub tape: Tape,
    /// Mean bound over the batch (scalar).
    pub objective: Var,
    pub rows: Var,
    pub recon: Var,
    pub kl: Var,
    /// `B × n_mc` log importance weights `log p(x, w_s) − log q(w_s | x)`
    /// (sampled mode only).
    pub log_weights: Option<Var>,
    pub batch: usize,
    n_mc: usize,
    code_dim: usize,
}

fn bcast(tape: &mut Tape, ones: Var, row: Var) -> Var {
    tape.matmul(ones, row)
}

/// Per-row `KL(N(μ, e^ℓ) ‖ component)`.
fn kl_rows(tape: &mut Tape, ones: Var, mu: Var, lv: Var, c: &Component, m: usize) -> Var {
    let var_q = tape.exp(lv);
    let diff = match c.mean {
        Some(pm) => {
            let pmb = bcast(tape, ones, pm);
            tape.sub(mu, pmb)
        }
        None => mu,
    };
    let sq = tape.square(diff);
    let num = tape.add(var_q, sq);
    let mut inner = match c.log_var {
        Some(plv) => {
            let plvb = bcast(tape, ones, plv);
            let neg = tape.neg(plvb);
            let inv = tape.exp(neg);
            let t = tape.mul(num, inv);
            tape.add(t, plvb)
        }
        None => num,
    };
    inner = tape.sub(inner, lv);
    let rows = tape.sum_axis(inner, 1);
    let rows = tape.offset(rows, -(m as f64));
    tape.scale(rows, 0.5)
}

/// Per-row `log N(w; component)`.
fn log_density_rows(tape: &mut Tape, ones: Var, w: Var, c: &Component, m: usize) -> Var {
    let diff = match c.mean {
        Some(pm) => {
            let pmb = bcast(tape, ones, pm);
            tape.sub(w, pmb)
        }
        None => w,
    };
    let mut sq = tape.square(diff);
    if let Some(plv) = c.log_var {
        let plvb = bcast(tape, ones, plv);
        let neg = tape.neg(plvb);
        let inv = tape.exp(neg);
        let t = tape.mul(sq, inv);
        sq = tape.add(t, plvb);
    }
    let rows = tape.sum_axis(sq, 1);
    let rows = tape.scale(rows, -0.5);
    tape.offset(rows, -0.5 * m as f64 * (2.0 * PI).ln())
}

fn declare_components(tape: &mut Tape, bridge: &Bridge) -> Vec<Component> {
    let prefix = super::model::BRIDGE_PREFIX;
    match bridge {
        Bridge::StandardNormal { .. } => vec![Component { mean: None, log_var: None }],
        Bridge::GaussianLinear { k, log_var } => {
            let m = log_var.len();
            let lv = tape.input(&format!("{prefix}.log_var"));
            let lv = tape.reshape(lv, vec![1, m]);
            let mask = tape.constant(Tensor::matrix(1, m, (0..m).map(|j| if j < *k { 1.0 } else { 0.0 }).collect()).expect("sized"));
            let e = tape.exp(lv);
            let total = tape.add(e, mask);
            vec![Component { mean: None, log_var: Some(tape.log(total)) }]
        }
        Bridge::Mixture { means, learn_means, .. } => {
            let (k, m) = (means.rows(), means.cols());
            let mv = if *learn_means { tape.input(&format!("{prefix}.means")) } else { tape.constant(means.clone()) };
            let lvs = tape.input(&format!("{prefix}.log_vars"));
            let _ = m;
            (0..k)
                .map(|c| Component { mean: Some(tape.slice(mv, 0, c, 1)), log_var: Some(tape.slice(lvs, 0, c, 1)) })
                .collect()
        }
    }
}

fn eps_name(s: usize) -> String {
    format!("eps{s}")
}

impl ElboGraph {
    pub fn build(model: &Model, encoder: &Encoder, batch: usize, opts: &ElboOptions) -> Result<Self> {
        opts.validate()?;
        model.validate()?;
        encoder.validate()?;
        let m = model.code_dim();
        if encoder.latent_dim != m {
            return Err(Error::Shape(format!("encoder latent {} vs model code {}", encoder.latent_dim, m)));
        }
        if encoder.input_dim() != model.spec.data_dim() {
            return Err(Error::Shape(format!("encoder input {} vs data dimension {}", encoder.input_dim(), model.spec.data_dim())));
        }
        if batch == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let head: ExpFamilyHead = model.head().clone();
        let mut tape = Tape::new();
        let x = tape.input("x");
        let x_enc = tape.input("x_enc");
        let ones = tape.constant(Tensor::filled(vec![batch, 1], 1.0));
        let dec = model.decoder.declare(&mut tape, super::model::DECODER_PREFIX);
        let comps = declare_components(&mut tape, &model.bridge);
        let enc = encoder.declare(&mut tape);
        let (mu, lv) = encoder.outputs(&mut tape, &enc, x_enc, ones);
        let half_lv = tape.scale(lv, 0.5);
        let sd = tape.exp(half_lv);

        let seq = match &model.history {
            None => None,
            Some(f) => {
                let (t, v) = (model.spec.seq_len, model.spec.d);
                let blocks: Vec<Var> = (0..t).map(|p| tape.slice(x, 1, p * v, v)).collect();
                let states = f.states_expr(&mut tape, HISTORY_PREFIX, &blocks, ones, batch);
                let rows = t * batch;
                let mut rep = Tensor::zeros(vec![rows, batch]);
                for p in 0..t {
                    for i in 0..batch {
                        rep.set2(p * batch + i, i, 1.0);
                    }
                }
                let rep_t = tape.constant(rep.transpose());
                Some(SeqNodes {
                    rep: tape.constant(rep),
                    rep_t,
                    states: tape.concat(&states, 0),
                    tokens: tape.concat(&blocks, 0),
                    ones: tape.constant(Tensor::filled(vec![rows, 1], 1.0)),
                    rows,
                })
            }
        };

        let recon_of = |tape: &mut Tape, w: Var, dec: &DecoderNetVars| -> Var {
            match &seq {
                None => {
                    let eta = dec.eta(tape, w, ones, batch);
                    head.log_likelihood_expr(tape, eta, x, dec.log_var(), ones, model.spec.d)
                }
                Some(s) => {
                    let wr = tape.matmul(s.rep, w);
                    let inp = tape.concat(&[wr, s.states], 1);
                    let eta = dec.eta(tape, inp, s.ones, s.rows);
                    let ll = head.log_likelihood_expr(tape, eta, s.tokens, dec.log_var(), s.ones, model.spec.d);
                    tape.matmul(s.rep_t, ll)
                }
            }
        };

        let log_prior = |tape: &mut Tape, w: Var| -> Var {
            if comps.len() == 1 {
                log_density_rows(tape, ones, w, &comps[0], m)
            } else {
                let parts: Vec<Var> = comps.iter().map(|c| log_density_rows(tape, ones, w, c, m)).collect();
                let all = tape.concat(&parts, 1);
                let lse = tape.logsumexp_rows(all);
                tape.offset(lse, -(comps.len() as f64).ln())
            }
        };

        let mut recon_sum: Option<Var> = None;
        let mut kl_sum: Option<Var> = None;
        let mut weights = Vec::new();
        for s in 0..opts.n_mc {
            let eps = tape.input(&eps_name(s));
            let noise = tape.mul(sd, eps);
            let w = tape.add(mu, noise);
            let r = recon_of(&mut tape, w, &dec);
            recon_sum = Some(match recon_sum {
                None => r,
                Some(acc) => tape.add(acc, r),
            });
            if opts.mode == KlMode::Sampled {
                // log q(w|x) = −½ Σ (ε² + ℓ + log 2π)
                let e2 = tape.square(eps);
                let q = tape.add(e2, lv);
                let q = tape.sum_axis(q, 1);
                let q = tape.scale(q, -0.5);
                let log_q = tape.offset(q, -0.5 * m as f64 * (2.0 * PI).ln());
                let log_p = log_prior(&mut tape, w);
                let k = tape.sub(log_q, log_p);
                kl_sum = Some(match kl_sum {
                    None => k,
                    Some(acc) => tape.add(acc, k),
                });
                weights.push(tape.sub(r, k));
            }
        }
        let inv_s = 1.0 / opts.n_mc as f64;
        let recon_total = recon_sum.expect("n_mc >= 1");
        let recon = tape.scale(recon_total, inv_s);
        let kl = match opts.mode {
            KlMode::Sampled => {
                let total = kl_sum.expect("n_mc >= 1");
                tape.scale(total, inv_s)
            }
            KlMode::Analytic => {
                if comps.len() == 1 {
                    kl_rows(&mut tape, ones, mu, lv, &comps[0], m)
                } else {
                    // Optimal categorical factor q(c|x) ∝ exp(−KL_c):
                    // KL = log K − logsumexp_c(−KL_c).
                    let parts: Vec<Var> = comps
                        .iter()
                        .map(|c| {
                            let k = kl_rows(&mut tape, ones, mu, lv, c, m);
                            tape.neg(k)
                        })
                        .collect();
                    let all = tape.concat(&parts, 1);
                    let lse = tape.logsumexp_rows(all);
                    let neg = tape.neg(lse);
                    tape.offset(neg, (comps.len() as f64).ln())
                }
            }
        };
        let log_weights = (!weights.is_empty()).then(|| tape.concat(&weights, 1));
        let weighted = tape.scale(kl, opts.beta_weight);
        let rows = tape.sub(recon, weighted);
        let total = tape.sum(rows);
        let objective = tape.scale(total, 1.0 / batch as f64);
        Ok(Self { tape, objective, rows, recon, kl, log_weights, batch, n_mc: opts.n_mc, code_dim: m })
    }

    /// Parameter, data and noise bindings for a batch `x` (raw coordinates).
    pub fn bindings(&self, model: &Model, encoder: &Encoder, x: &Tensor, rng: &mut impl Rng) -> Result<Bindings> {
        if x.rank() != 2 || x.rows() != self.batch || x.cols() != model.spec.data_dim() {
            return Err(Error::Shape(format!("batch {:?}, graph expects [{}, {}]", x.shape(), self.batch, model.spec.data_dim())));
        }
        if model.head().family != Family::Gaussian {
            let (d, t) = (model.spec.d, model.spec.seq_len);
            for i in 0..x.rows() {
                for p in 0..t {
                    model.head().check_support(&x.row(i)[p * d..(p + 1) * d]).map_err(|e| Error::Numeric { index: i, what: e.to_string() })?;
                }
            }
        }
        let mut b = Bindings::new();
        model.bind(&mut b);
        encoder.bind(&mut b);
        b.insert("x".into(), x.clone());
        b.insert("x_enc".into(), encoder.input.apply(x));
        for s in 0..self.n_mc {
            let vals = (0..self.batch * self.code_dim).map(|_| StandardNormal.sample(rng)).collect();
            b.insert(eps_name(s), Tensor::matrix(self.batch, self.code_dim, vals)?);
        }
        Ok(b)
    }

    fn run(&mut self, bindings: &Bindings) -> Result<()> {
        let batch = self.batch;
        self.tape.evaluate(bindings, self.objective).map_err(|e| match e {
            Error::NonFinite { op, kind, row } => {
                Error::Numeric { index: row % batch, what: format!("non-finite value in op #{op} ({kind})") }
            }
            other => other,
        })?;
        Ok(())
    }

    /// Forward evaluation; per-point values are available afterwards.
    pub fn evaluate(&mut self, bindings: &Bindings) -> Result<ElboEstimate> {
        self.run(bindings)?;
        let get = |v: Var| self.tape.value(v).expect("evaluated").values().to_vec();
        let per_point = get(self.rows);
        let n = per_point.len() as f64;
        Ok(ElboEstimate {
            elbo: per_point.iter().sum::<f64>() / n,
            recon: get(self.recon).iter().sum::<f64>() / n,
            kl: get(self.kl).iter().sum::<f64>() / n,
            per_point,
        })
    }

    /// Log importance weights from the last evaluation (sampled mode).
    pub fn log_weight_values(&self) -> Option<&Tensor> {
        self.log_weights.and_then(|v| self.tape.value(v))
    }

    /// Gradient of the batch-mean bound with respect to every bound input.
    pub fn gradients(&self) -> Result<BTreeMap<String, Tensor>> {
        self.tape.gradient_all(self.objective)
    }

    /// Evaluates and differentiates in one call.
    pub fn evaluate_with_gradients(&mut self, bindings: &Bindings) -> Result<(ElboEstimate, BTreeMap<String, Tensor>)> {
        let est = self.evaluate(bindings)?;
        Ok((est, self.gradients()?))
    }
}

/// Dataset-average bound `E_q[log p(x|w)] − β·KL(q‖p)` with closed-form KL.
pub fn elbo(model: &Model, encoder: &Encoder, batch: &Tensor, beta_weight: f64, n_mc: usize, seed: u64) -> Result<ElboEstimate> {
    elbo_with(model, encoder, batch, &ElboOptions { beta_weight, n_mc, mode: KlMode::Analytic }, seed)
}

pub fn elbo_with(model: &Model, encoder: &Encoder, batch: &Tensor, opts: &ElboOptions, seed: u64) -> Result<ElboEstimate> {
    if batch.rank() != 2 || batch.rows() == 0 {
        return Err(Error::Shape(format!("batch must be a non-empty matrix, got {:?}", batch.shape())));
    }
    let mut graph = ElboGraph::build(model, encoder, batch.rows(), opts)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = graph.bindings(model, encoder, batch, &mut rng)?;
    graph.evaluate(&b)
}

/// `KL(N(mq, e^lq) ‖ N(mp, e^lp))` for diagonal Gaussians.
pub fn diag_gaussian_kl(mq: &[f64], lq: &[f64], mp: &[f64], lp: &[f64]) -> f64 {
    let mut s = 0.0;
    for j in 0..mq.len() {
        let d = mq[j] - mp[j];
        s += ((lq[j]).exp() + d * d) * (-lp[j]).exp() - 1.0 - lq[j] + lp[j];
    }
    0.5 * s
}

/// Encoder outputs for a dataset plus, for categorical latents, the optimal
/// cluster responsibilities `q(c|x) ∝ exp(−KL(q(w|x) ‖ p(w|c)))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: Tensor,
    pub log_var: Tensor,
    pub cluster_probs: Option<Tensor>,
}

impl Posterior {
    /// Per-point `KL(q(w,c|x) ‖ p(w,c))`.
    pub fn kl_rows(&self, bridge: &Bridge) -> Vec<f64> {
        let (pm, plv) = bridge.components();
        let k = pm.rows();
        (0..self.mean.rows())
            .map(|i| {
                let (m, l) = (self.mean.row(i), self.log_var.row(i));
                let kls: Vec<f64> = (0..k).map(|c| diag_gaussian_kl(m, l, pm.row(c), plv.row(c))).collect();
                if k == 1 {
                    kls[0]
                } else {
                    let neg: Vec<f64> = kls.iter().map(|v| -v).collect();
                    ((k as f64).ln() - logsumexp(&neg)).max(0.0)
                }
            })
            .collect()
    }
}

pub fn posterior(model: &Model, encoder: &Encoder, x: &Tensor) -> Result<Posterior> {
    let (mean, log_var) = encoder.forward(x)?;
    let cluster_probs = match model.bridge.categories() {
        None => None,
        Some(k) => {
            let (pm, plv) = model.bridge.components();
            let mut probs = Vec::with_capacity(mean.rows() * k);
            for i in 0..mean.rows() {
                let neg: Vec<f64> =
                    (0..k).map(|c| -diag_gaussian_kl(mean.row(i), log_var.row(i), pm.row(c), plv.row(c))).collect();
                let lse = logsumexp(&neg);
                probs.extend(neg.iter().map(|v| (v - lse).exp()));
            }
            Some(Tensor::matrix(mean.rows(), k, probs)?)
        }
    };
    Ok(Posterior { mean, log_var, cluster_probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};

    #[test]
    fn closed_form_kl_value() {
        assert!((diag_gaussian_kl(&[1.0], &[0.0], &[0.0], &[0.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tape_kl_matches_closed_form() {
        let model = build_model(&ModelSpec::idvae(2, 3), 0).unwrap();
        let enc = Encoder::constant(3, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        let x = Tensor::zeros(vec![4, 3]);
        let est = elbo(&model, &enc, &x, 1.0, 1, 0).unwrap();
        assert!((est.kl - 0.5).abs() < 1e-12);
    }

    #[test]
    fn prior_encoder_has_zero_kl() {
        let model = build_model(&ModelSpec::idgmvae(2, 2, 2), 0).unwrap();
        let (pm, plv) = model.bridge.components();
        // q equals component 0 exactly; KL is log K − log(1 + e^{−KL_1}) ≤ log 2
        let enc = Encoder::constant(2, pm.row(0), plv.row(0)).unwrap();
        let x = Tensor::zeros(vec![3, 2]);
        let est = elbo(&model, &enc, &x, 1.0, 1, 0).unwrap();
        assert!(est.kl >= 0.0 && est.kl <= 2f64.ln());
        let m = build_model(&ModelSpec::idvae(2, 3), 0).unwrap();
        let enc = Encoder::constant(3, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(elbo(&m, &enc, &Tensor::zeros(vec![3, 3]), 1.0, 1, 0).unwrap().kl, 0.0);
    }

    #[test]
    fn beta_scales_only_kl() {
        let model = build_model(&ModelSpec::idvae(2, 3), 0).unwrap();
        let enc = Encoder::constant(3, &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        let x = Tensor::filled(vec![2, 3], 0.3);
        let a = elbo(&model, &enc, &x, 1.0, 2, 5).unwrap();
        let b = elbo(&model, &enc, &x, 0.2, 2, 5).unwrap();
        assert_eq!(a.recon, b.recon);
        assert!((a.elbo - (a.recon - a.kl)).abs() < 1e-12);
        assert!((b.elbo - (b.recon - 0.2 * b.kl)).abs() < 1e-12);
    }

    #[test]
    fn invalid_options() {
        let model = build_model(&ModelSpec::idvae(2, 3), 0).unwrap();
        let enc = Encoder::constant(3, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let x = Tensor::zeros(vec![1, 3]);
        assert!(elbo(&model, &enc, &x, 0.0, 1, 0).is_err());
        assert!(elbo(&model, &enc, &x, 1.0, 0, 0).is_err());
    }

    #[test]
    fn nan_reports_datapoint() {
        let model = build_model(&ModelSpec::idvae(2, 3), 0).unwrap();
        let enc = Encoder::constant(3, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let mut x = Tensor::zeros(vec![3, 3]);
        x.set2(2, 1, f64::NAN);
        match elbo(&model, &enc, &x, 1.0, 1, 0) {
            Err(Error::Numeric { index, .. }) => assert_eq!(index, 2),
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }

    /// The enumerated categorical KL equals the Monte-Carlo expectation of
    /// `log q(c|x) + log q(w|x) − log p(w|c) − log p(c)` under `c ~ q(c|x)`, `w ~ q(w|x)`.
    #[test]
    fn enumeration_matches_monte_carlo() {
        let model = build_model(&ModelSpec::idgmvae(2, 2, 2), 0).unwrap();
        let enc = Encoder::constant(2, &[0.6, 0.3], &[-1.0, -0.5]).unwrap();
        let x = Tensor::zeros(vec![1, 2]);
        let post = posterior(&model, &enc, &x).unwrap();
        let exact = post.kl_rows(&model.bridge)[0];
        let probs = post.cluster_probs.unwrap();
        let (pm, plv) = model.bridge.components();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let c = if rng.random::<f64>() < probs.get2(0, 0) { 0 } else { 1 };
            let mut v = probs.get2(0, c).ln() + 2f64.ln();
            for j in 0..2 {
                let (m, l) = (post.mean.get2(0, j), post.log_var.get2(0, j));
                let e: f64 = StandardNormal.sample(&mut rng);
                let w = m + (0.5 * l).exp() * e;
                let lq = -0.5 * (e * e + l + (2.0 * PI).ln());
                let d = w - pm.get2(c, j);
                let lp = -0.5 * (d * d * (-plv.get2(c, j)).exp() + plv.get2(c, j) + (2.0 * PI).ln());
                v += lq - lp;
            }
            s += v;
            s2 += v * v;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }
}
