use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Provenance};
use crate::decoder::ExpFamilyHead;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::models::{sample_emission, HistoryEmbedder, Mlp};

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Dimension of the synthetic mixture data.
pub const GMVAE_SYNTH_DIM: usize = 2;
/// Emission variance of the synthetic mixture: `x = w + N(0, σ² I)`.
pub const GMVAE_SYNTH_NOISE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinwheelConfig {
    pub n: usize,
    pub arms: usize,
    pub radial_std: f64,
    pub tangential_std: f64,
    pub rate: f64,
    /// Final isotropic scale applied to every point.
    pub scale: f64,
}

impl Default for PinwheelConfig {
    fn default() -> Self {
        Self { n: 2500, arms: 5, radial_std: 0.3, tangential_std: 0.05, rate: 0.25, scale: 10.0 }
    }
}

/// Spiral arms: per-arm Gaussians at radius 1, each point rotated by its
/// arm's angle plus `rate · exp(radius)`, then scaled.
pub fn gen_pinwheel(cfg: &PinwheelConfig, seed: u64) -> Result<Dataset> {
    if cfg.arms < 2 {
        return Err(Error::Config(format!("pinwheel needs at least 2 arms, got {}", cfg.arms)));
    }
    if cfg.n == 0 || cfg.radial_std < 0.0 || cfg.tangential_std < 0.0 {
        return Err(Error::Config("pinwheel needs n > 0 and non-negative spreads".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let arm = i * cfg.arms / cfg.n;
        let r = 1.0 + cfg.radial_std * gauss(&mut rng);
        let t: f64 = cfg.tangential_std * gauss(&mut rng);
        let angle = 2.0 * PI * arm as f64 / cfg.arms as f64 + cfg.rate * r.exp();
        let (s, c) = angle.sin_cos();
        points.push((vec![cfg.scale * (r * c + t * s), cfg.scale * (-r * s + t * c)], arm));
    }
    points.shuffle(&mut rng);
    let labels = points.iter().map(|p| p.1).collect();
    let rows: Vec<Vec<f64>> = points.into_iter().map(|p| p.0).collect();
    let mut ds = Dataset::new(
        Tensor::from_rows(&rows)?,
        Provenance { generator: "pinwheel".into(), params: serde_json::to_value(cfg)?, seed: Some(seed) },
    )?;
    ds.labels = Some(labels);
    Ok(ds)
}

/// Mean of cluster `c` of `k`: every coordinate equals `(c/(k−1) − ½)·separation`,
/// i.e. `±separation/2` when `k = 2`.
pub fn gmvae_cluster_mean(c: usize, k: usize, separation: f64) -> Vec<f64> {
    let v = (c as f64 / (k - 1) as f64 - 0.5) * separation;
    vec![v; GMVAE_SYNTH_DIM]
}

/// Draws from a mixture VAE with identity decoder: `c ~ Categorical(1/K)`,
/// `w ~ N(μ_c, I)`, `x ~ N(w, σ² I)`. Latents `w` and labels `c` are kept.
pub fn gen_gmvae_synthetic(n: usize, k: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if !(separation >= 0.0) || k < 2 || n == 0 {
        return Err(Error::Config("needs n > 0, K ≥ 2 and separation ≥ 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = GMVAE_SYNTH_NOISE.sqrt();
    let (mut x, mut w, mut labels) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let c = rng.random_range(0..k);
        for mu in gmvae_cluster_mean(c, k, separation) {
            let wi = mu + gauss(&mut rng);
            w.push(wi);
            x.push(wi + sd * gauss(&mut rng));
        }
        labels.push(c);
    }
    let mut ds = Dataset::new(
        Tensor::matrix(n, GMVAE_SYNTH_DIM, x)?,
        Provenance {
            generator: "gmvae-synthetic".into(),
            params: serde_json::json!({ "n": n, "k": k, "separation": separation, "noise_var": GMVAE_SYNTH_NOISE }),
            seed: Some(seed),
        },
    )?;
    ds.latents = Some(Tensor::matrix(n, GMVAE_SYNTH_DIM, w)?);
    ds.labels = Some(labels);
    Ok(ds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceConfig {
    pub n: usize,
    pub length: usize,
    pub latent_dim: usize,
    pub vocab: usize,
    /// State size of the generator's recurrent history.
    pub state: usize,
    /// Hidden width of the generator's emission network.
    pub hidden: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self { n: 1000, length: 10, latent_dim: 5, vocab: 10, state: 8, hidden: 32 }
    }
}

/// Token sequences from a randomly initialized sequential VAE: `z ~ N(0, I)`,
/// `x_t ~ Categorical(softmax(g([z, f(x_{<t})])))` with a two-layer `g` and a
/// recurrent history `f`. Rows are flattened one-hot blocks of width `vocab`.
pub fn gen_sequences(cfg: &SequenceConfig, seed: u64) -> Result<Dataset> {
    if cfg.vocab < 2 || cfg.length == 0 || cfg.n == 0 || cfg.latent_dim == 0 {
        return Err(Error::Config("sequences need vocab ≥ 2 and positive n, length and latent size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let history = HistoryEmbedder::init(cfg.vocab, cfg.state, &mut rng);
    let mut emit = Mlp::init(cfg.latent_dim + cfg.state, &[cfg.hidden], cfg.vocab, &mut rng);
    // Sharpen the emission so that the latent matters.
    for v in emit.weights[1].values_mut() {
        *v *= 3.0;
    }
    let head = ExpFamilyHead::categorical();
    let z: Vec<Vec<f64>> = (0..cfg.n).map(|_| (0..cfg.latent_dim).map(|_| gauss(&mut rng)).collect()).collect();
    let mut states = vec![history.empty(); cfg.n];
    let mut x = Tensor::zeros(vec![cfg.n, cfg.length * cfg.vocab]);
    for t in 0..cfg.length {
        let input: Vec<Vec<f64>> = (0..cfg.n).map(|i| [&z[i][..], &states[i][..]].concat()).collect();
        let eta = emit.forward(&Tensor::from_rows(&input)?)?;
        for i in 0..cfg.n {
            let tok = sample_emission(&head, eta.row(i), &mut rng);
            let k = tok.iter().position(|&v| v == 1.0).expect("one-hot");
            x.set2(i, t * cfg.vocab + k, 1.0);
            states[i] = history.step(&states[i], k);
        }
    }
    let mut ds = Dataset::new(
        x,
        Provenance { generator: "sequences".into(), params: serde_json::to_value(cfg)?, seed: Some(seed) },
    )?;
    ds.latents = Some(Tensor::from_rows(&z)?);
    Ok(ds)
}
