//! Projected stochastic gradient ascent on the ELBO and importance-weighted
//! likelihood estimation.

mod optimizer;

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optimizer::{clip_global_norm, OptimizerState};

use crate::data::Dataset;
use crate::diffcore::{logsumexp, Tensor};
use crate::error::{Error, Result};
use crate::models::{ElboGraph, ElboOptions, Encoder, KlMode, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta_weight: f64,
    pub seed: u64,
    pub n_mc: usize,
    pub clip_norm: f64,
    pub kl_mode: KlMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch: 128, lr: 1e-3, beta_weight: 1.0, seed: 0, n_mc: 1, clip_norm: 10.0, kl_mode: KlMode::Analytic }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.n_mc == 0 {
            return Err(Error::Config("batch size and n_mc must be positive".into()));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.beta_weight > 0.0) {
            return Err(Error::Config("lr, clip_norm and beta_weight must be positive".into()));
        }
        Ok(())
    }

    /// Stable 64-bit FNV-1a hash of the JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub kl: f64,
    pub recon: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub seed: u64,
    pub config_hash: String,
    pub records: Vec<EpochRecord>,
}

impl TrainTrace {
    /// Equality of everything except wall-clock times.
    pub fn same_run(&self, other: &TrainTrace) -> bool {
        self.seed == other.seed
            && self.config_hash == other.config_hash
            && self.records.len() == other.records.len()
            && self
                .records
                .iter()
                .zip(&other.records)
                .all(|(a, b)| a.epoch == b.epoch && a.elbo == b.elbo && a.kl == b.kl && a.recon == b.recon)
    }
}

/// Position of a seeded ChaCha8 stream; `word_pos` is a decimal `u128`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self { seed, word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Config(format!("invalid RNG word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug)]
pub struct Trained {
    pub model: Model,
    pub encoder: Encoder,
    pub optimizer: OptimizerState,
    pub trace: TrainTrace,
    /// Training stream position at return.
    pub rng: RngState,
    /// Set when training stopped early on a non-finite value; the model and
    /// encoder are then the last parameters for which every value was finite.
    pub diverged: Option<Error>,
}

/// Encoder for `model` whose input standardization is fitted to `data`.
pub fn init_encoder(model: &Model, data: &Dataset, seed: u64) -> Encoder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut enc = Encoder::init(model.spec.data_dim(), &model.spec.encoder_hidden, model.code_dim(), &mut rng);
    enc.input = data.column_standardization();
    enc
}

pub fn train(model: &Model, encoder: &Encoder, data: &Dataset, cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    model.validate()?;
    encoder.validate()?;
    if data.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if data.dim() != model.spec.data_dim() {
        return Err(Error::Shape(format!("data has {} columns, model expects {}", data.dim(), model.spec.data_dim())));
    }
    let mut model = model.clone();
    let mut encoder = encoder.clone();
    model.project();
    let mut opt = OptimizerState::adam(cfg.lr);
    let mut trace = TrainTrace { seed: cfg.seed, config_hash: cfg.hash(), records: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opts = ElboOptions { beta_weight: cfg.beta_weight, n_mc: cfg.n_mc, mode: cfg.kl_mode };
    let mut graphs: HashMap<usize, ElboGraph> = HashMap::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let (mut elbo, mut kl, mut recon) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch) {
            let x = data.rows(chunk);
            let graph = match graphs.entry(chunk.len()) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => e.insert(ElboGraph::build(&model, &encoder, chunk.len(), &opts)?),
            };
            let bindings = graph.bindings(&model, &encoder, &x, &mut rng)?;
            let outcome = graph.evaluate_with_gradients(&bindings).and_then(|(est, grads)| {
                if grads.values().all(Tensor::all_finite) {
                    Ok((est, grads))
                } else {
                    Err(Error::Config("non-finite gradient".into()))
                }
            });
            let (est, mut grads) = match outcome {
                Ok(v) => v,
                Err(e) => {
                    return Ok(Trained {
                        model,
                        encoder,
                        optimizer: opt,
                        trace,
                        rng: RngState::capture(cfg.seed, &rng),
                        diverged: Some(Error::Diverged { epoch, step, reason: e.to_string() }),
                    })
                }
            };
            let w = chunk.len() as f64 / data.len() as f64;
            elbo += w * est.elbo;
            kl += w * est.kl;
            recon += w * est.recon;
            let names: Vec<String> =
                model.named_params().into_iter().chain(encoder.named_params()).map(|(n, _)| n).collect();
            grads.retain(|k, _| names.contains(k));
            clip_global_norm(&mut grads, cfg.clip_norm);
            let before = (model.clone(), encoder.clone());
            let mut params = model.named_params_mut();
            params.extend(encoder.named_params_mut());
            opt.ascend(params, &grads)?;
            model.project();
            let finite = model.named_params().iter().chain(encoder.named_params().iter()).all(|(_, t)| t.all_finite());
            if !finite {
                return Ok(Trained {
                    model: before.0,
                    encoder: before.1,
                    optimizer: opt,
                    trace,
                    rng: RngState::capture(cfg.seed, &rng),
                    diverged: Some(Error::Diverged { epoch, step, reason: "parameters became non-finite".into() }),
                });
            }
            step += 1;
        }
        trace.records.push(EpochRecord { epoch, elbo, kl, recon, wall_secs: start.elapsed().as_secs_f64() });
    }
    Ok(Trained { model, encoder, optimizer: opt, trace, rng: RngState::capture(cfg.seed, &rng), diverged: None })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IwEstimate {
    /// Dataset-average estimate.
    pub mean: f64,
    /// Standard error of the average across datapoints.
    pub se: f64,
    pub per_point: Vec<f64>,
}

const IW_ROW_CHUNK: usize = 256;
const IW_SAMPLE_CHUNK: usize = 50;

/// `log (1/k) Σ_j p(x, w_j) / q(w_j | x)` with `w_j ~ q(·|x)`, averaged over rows.
pub fn iw_log_likelihood(model: &Model, encoder: &Encoder, x: &Tensor, k: usize, seed: u64) -> Result<IwEstimate> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if x.rank() != 2 || x.rows() == 0 {
        return Err(Error::Shape(format!("need a non-empty data matrix, got {:?}", x.shape())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = k.min(IW_SAMPLE_CHUNK);
    let opts = ElboOptions { beta_weight: 1.0, n_mc: s, mode: KlMode::Sampled };
    let mut graphs: BTreeMap<usize, ElboGraph> = BTreeMap::new();
    let mut per_point = Vec::with_capacity(x.rows());
    let n = x.rows();
    let mut start = 0;
    while start < n {
        let rows = IW_ROW_CHUNK.min(n - start);
        let idx: Vec<usize> = (start..start + rows).collect();
        let batch = Tensor::matrix(rows, x.cols(), idx.iter().flat_map(|&i| x.row(i).to_vec()).collect())?;
        if !graphs.contains_key(&rows) {
            graphs.insert(rows, ElboGraph::build(model, encoder, rows, &opts)?);
        }
        let graph = graphs.get_mut(&rows).expect("inserted");
        let mut weights = vec![Vec::with_capacity(k); rows];
        while weights[0].len() < k {
            let b = graph.bindings(model, encoder, &batch, &mut rng)?;
            graph.evaluate(&b).map_err(|e| match e {
                Error::Numeric { index, what } => Error::Numeric { index: start + index, what },
                other => other,
            })?;
            let lw = graph.log_weight_values().expect("sampled graph");
            let take = (k - weights[0].len()).min(s);
            for (i, w) in weights.iter_mut().enumerate() {
                w.extend_from_slice(&lw.row(i)[..take]);
            }
        }
        for (i, w) in weights.iter().enumerate() {
            let v = logsumexp(w) - (k as f64).ln();
            if !v.is_finite() {
                return Err(Error::Numeric { index: start + i, what: "non-finite importance weight".into() });
            }
            per_point.push(v);
        }
        start += rows;
    }
    let mean = per_point.iter().sum::<f64>() / n as f64;
    let var = if n > 1 { per_point.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
    Ok(IwEstimate { mean, se: (var / n as f64).sqrt(), per_point })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_model, ModelSpec};

    #[test]
    fn rng_state_resumes_stream() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..37 {
            rng.random::<u64>();
        }
        let state = RngState::capture(9, &rng);
        let mut resumed = state.restore().unwrap();
        assert_eq!(rng.random::<u64>(), resumed.random::<u64>());
        assert!(RngState { seed: 0, word_pos: "x".into() }.restore().is_err());
    }

    fn setup() -> (Model, Encoder, Dataset) {
        let model = build_model(&ModelSpec::idvae(2, 3), 1).unwrap();
        let data = model.generate(200, 2).unwrap();
        let enc = init_encoder(&model, &data, 3);
        (model, enc, data)
    }

    #[test]
    fn zero_epochs_is_identity() {
        let (model, enc, data) = setup();
        let out = train(&model, &enc, &data, &TrainConfig { epochs: 0, ..Default::default() }).unwrap();
        assert_eq!(out.model, model);
        assert_eq!(out.encoder, enc);
        assert!(out.trace.records.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_feasible() {
        let (model, enc, data) = setup();
        let cfg = TrainConfig { epochs: 3, batch: 64, lr: 1e-2, ..Default::default() };
        let a = train(&model, &enc, &data, &cfg).unwrap();
        let b = train(&model, &enc, &data, &cfg).unwrap();
        assert!(a.trace.same_run(&b.trace));
        assert_eq!(a.model, b.model);
        assert!(a.diverged.is_none());
        assert_eq!(a.trace.records.len(), 3);
        a.model.validate().unwrap();
    }

    #[test]
    fn training_improves_the_bound() {
        let (model, enc, data) = setup();
        let cfg = TrainConfig { epochs: 30, batch: 50, lr: 1e-2, ..Default::default() };
        let out = train(&model, &enc, &data, &cfg).unwrap();
        let r = &out.trace.records;
        assert!(r.last().unwrap().elbo > r[0].elbo);
    }

    #[test]
    fn iw_k1_matches_sampled_elbo_in_expectation() {
        let (model, enc, data) = setup();
        let iw = iw_log_likelihood(&model, &enc, &data.x, 1, 5).unwrap();
        let opts = ElboOptions { beta_weight: 1.0, n_mc: 1, mode: KlMode::Sampled };
        let el = crate::models::elbo_with(&model, &enc, &data.x, &opts, 6).unwrap();
        assert!((iw.mean - el.elbo).abs() < 4.0 * iw.se, "{} vs {}", iw.mean, el.elbo);
        assert!(iw_log_likelihood(&model, &enc, &data.x, 0, 5).is_err());
    }
}
