use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Provenance};
use crate::decoder::ExpFamilyHead;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::models::{build_model, DecoderNet, Encoder, Mlp, Model, ModelSpec};

/// Probabilistic PCA: `z ~ N(0, I_K)`, `x | z ~ N(wᵀz, σ² I_D)` with `w` of shape `K×D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpcaModel {
    pub w: Tensor,
    pub sigma2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Vec<f64>,
    /// `K×K`.
    pub cov: Tensor,
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.values())
}

fn from_na(m: &DMatrix<f64>) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect();
    Tensor::from_rows(&rows).expect("sized")
}

impl PpcaModel {
    pub fn new(w: Tensor, sigma2: f64) -> Result<Self> {
        let m = Self { w, sigma2 };
        m.validate()?;
        Ok(m)
    }

    pub fn latent_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn data_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 > 0.0) {
            return Err(Error::Config(format!("PPCA noise variance must be positive, got {}", self.sigma2)));
        }
        if self.w.rank() != 2 || !self.w.all_finite() {
            return Err(Error::Shape("PPCA loading must be a finite K×D matrix".into()));
        }
        Ok(())
    }

    /// `x = wᵀz + σ ε` for `n` draws; latents are kept.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (k, d) = (self.latent_dim(), self.data_dim());
        let sd = self.sigma2.sqrt();
        let (mut xs, mut zs) = (Vec::with_capacity(n * d), Vec::with_capacity(n * k));
        for _ in 0..n {
            let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(&mut rng)).collect();
            for j in 0..d {
                let e: f64 = StandardNormal.sample(&mut rng);
                xs.push((0..k).map(|a| z[a] * self.w.get2(a, j)).sum::<f64>() + sd * e);
            }
            zs.extend(z);
        }
        let mut ds = Dataset::new(
            Tensor::matrix(n, d, xs)?,
            Provenance {
                generator: "ppca".into(),
                params: serde_json::json!({ "w": self.w.values(), "k": k, "d": d, "sigma2": self.sigma2 }),
                seed: Some(seed),
            },
        )?;
        ds.latents = Some(Tensor::matrix(n, k, zs)?);
        Ok(ds)
    }

    /// Exact log p(x | z).
    pub fn log_likelihood(&self, x: &[f64], z: &[f64]) -> f64 {
        let d = self.data_dim();
        let sq: f64 = (0..d)
            .map(|j| {
                let mean: f64 = z.iter().enumerate().map(|(a, za)| za * self.w.get2(a, j)).sum();
                (x[j] - mean).powi(2)
            })
            .sum();
        -0.5 * (sq / self.sigma2 + d as f64 * (2.0 * PI * self.sigma2).ln())
    }
}

/// `Σ = (I + w wᵀ/σ²)⁻¹`, `μ = Σ w x / σ²`.
pub fn ppca_posterior(m: &PpcaModel, x: &[f64]) -> Result<GaussianPosterior> {
    m.validate()?;
    if x.len() != m.data_dim() {
        return Err(Error::Shape(format!("observation has {} entries, model dimension is {}", x.len(), m.data_dim())));
    }
    let w = to_na(&m.w);
    let k = m.latent_dim();
    let precision = DMatrix::<f64>::identity(k, k) + &w * w.transpose() / m.sigma2;
    let cov = precision.try_inverse().ok_or_else(|| Error::Numeric { index: 0, what: "posterior precision is singular".into() })?;
    let mean = &cov * (&w * DVector::from_column_slice(x)) / m.sigma2;
    Ok(GaussianPosterior { mean: mean.iter().copied().collect(), cov: from_na(&cov) })
}

/// `KL(N(μ, Σ) ‖ N(0, I))`.
pub fn gaussian_kl_to_standard(p: &GaussianPosterior) -> Result<f64> {
    let k = p.mean.len();
    let cov = to_na(&p.cov);
    let chol = cov.clone().cholesky().ok_or_else(|| Error::Numeric { index: 0, what: "covariance is not positive definite".into() })?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mm: f64 = p.mean.iter().map(|v| v * v).sum();
    Ok((0.5 * (cov.trace() + mm - k as f64 - log_det)).max(0.0))
}

/// Exact `Σ_i log N(x_i; 0, wᵀw + σ² I)`.
pub fn ppca_log_marginal(m: &PpcaModel, x: &Tensor) -> Result<f64> {
    m.validate()?;
    if x.rank() != 2 || x.cols() != m.data_dim() {
        return Err(Error::Shape(format!("data {:?} vs model dimension {}", x.shape(), m.data_dim())));
    }
    let w = to_na(&m.w);
    let d = m.data_dim();
    let c = w.transpose() * &w + DMatrix::<f64>::identity(d, d) * m.sigma2;
    let chol = c.cholesky().ok_or_else(|| Error::Numeric { index: 0, what: "marginal covariance is not positive definite".into() })?;
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut total = 0.0;
    for i in 0..x.rows() {
        let xi = DVector::from_column_slice(x.row(i));
        let sol = chol.solve(&xi);
        total += -0.5 * (xi.dot(&sol) + log_det + d as f64 * (2.0 * PI).ln());
    }
    Ok(total)
}

/// Mean over datapoints of `max_z − min_z log p(x_i | z)` on a square grid
/// `[-r, r]^K` with `per_axis` points per axis.
pub fn likelihood_flatness(m: &PpcaModel, x: &Tensor, r: f64, per_axis: usize) -> Result<f64> {
    let k = m.latent_dim();
    if k > 2 || per_axis < 2 {
        return Err(Error::Unsupported("flatness grid supports K ≤ 2 and ≥ 2 points per axis".into()));
    }
    let axis: Vec<f64> = (0..per_axis).map(|i| -r + 2.0 * r * i as f64 / (per_axis - 1) as f64).collect();
    let grid: Vec<Vec<f64>> = if k == 1 {
        axis.iter().map(|&a| vec![a]).collect()
    } else {
        axis.iter().flat_map(|&a| axis.iter().map(move |&b| vec![a, b])).collect()
    };
    let mut total = 0.0;
    for i in 0..x.rows() {
        let vals: Vec<f64> = grid.iter().map(|z| m.log_likelihood(x.row(i), z)).collect();
        let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        total += max - min;
    }
    Ok(total / x.rows() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub kl: f64,
    pub flatness: f64,
}

pub const FLATNESS_RADIUS: f64 = 3.0;
pub const FLATNESS_POINTS: usize = 41;

/// For each σ, draws `n` points from `PPCA(w, σ²)` and reports the mean exact
/// KL(posterior ‖ prior) and the likelihood flatness.
pub fn ppca_noise_sweep(w: &Tensor, sigmas: &[f64], n: usize, seed: u64) -> Result<Vec<SweepRow>> {
    sigmas
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let m = PpcaModel::new(w.clone(), sigma * sigma)?;
            let data = m.sample(n, seed.wrapping_add(i as u64))?;
            let mut kl = 0.0;
            for r in 0..data.len() {
                kl += gaussian_kl_to_standard(&ppca_posterior(&m, data.x.row(r))?)?;
            }
            Ok(SweepRow {
                sigma,
                kl: kl / data.len() as f64,
                flatness: likelihood_flatness(&m, &data.x, FLATNESS_RADIUS, FLATNESS_POINTS)?,
            })
        })
        .collect()
}

/// Collapsed maximizer for 1-D data: `2×D` with the first row zero and the
/// second row `w̄₁` of norm `norm` spread evenly over the `D` coordinates.
pub fn collapsed_loading(d: usize, norm: f64) -> Tensor {
    let v = norm / (d as f64).sqrt();
    let mut vals = vec![0.0; d];
    vals.extend(std::iter::repeat_n(v, d));
    Tensor::matrix(2, d, vals).expect("sized")
}

/// Row norm of the default noise-sweep loading.
pub const SWEEP_ROW_NORM: f64 = 0.4;

/// `K=2` loading with orthogonal rows `norm·e₁`, `norm·e₂`; the expected
/// exact KL is `Σ_k ½ log(1 + norm²/σ²)`.
pub fn sweep_loading(d: usize, norm: f64) -> Tensor {
    let mut w = Tensor::zeros(vec![2, d]);
    w.set2(0, 0, norm);
    w.set2(1, 1.min(d - 1), norm);
    w
}

/// PPCA as a linear-Gaussian VAE: affine decoder `z ↦ wᵀz`, fixed noise σ².
pub fn ppca_as_model(m: &PpcaModel) -> Result<Model> {
    m.validate()?;
    let (k, d) = (m.latent_dim(), m.data_dim());
    let mut spec = ModelSpec::baseline_vae(k, d);
    spec.emission_var = m.sigma2;
    let mut model = build_model(&spec, 0)?;
    model.decoder = DecoderNet::Mlp { net: Mlp::affine(m.w.transpose(), vec![0.0; d])?, head: ExpFamilyHead::gaussian(m.sigma2) };
    model.validate()?;
    Ok(model)
}

/// Linear encoder reproducing the exact posterior; requires `w wᵀ` diagonal
/// so that the posterior covariance is diagonal. `var_scale` multiplies the
/// posterior variances (1 gives the exact posterior).
pub fn ppca_encoder(m: &PpcaModel, var_scale: f64) -> Result<Encoder> {
    m.validate()?;
    let (k, d) = (m.latent_dim(), m.data_dim());
    let w = to_na(&m.w);
    let wwt = &w * w.transpose();
    for a in 0..k {
        for b in 0..k {
            if a != b && wwt[(a, b)] != 0.0 {
                return Err(Error::Unsupported("posterior covariance is not diagonal (rows of w are not orthogonal)".into()));
            }
        }
    }
    let vars: Vec<f64> = (0..k).map(|a| 1.0 / (1.0 + wwt[(a, a)] / m.sigma2)).collect();
    let mut mw = Tensor::zeros(vec![k, d]);
    for a in 0..k {
        for j in 0..d {
            mw.set2(a, j, vars[a] * m.w.get2(a, j) / m.sigma2);
        }
    }
    Encoder::linear(mw, vec![0.0; k], Tensor::zeros(vec![k, d]), vars.iter().map(|v| (v * var_scale).ln()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::quadrature::gauss_legendre_on;

    #[test]
    fn zero_loading_gives_prior() {
        let m = PpcaModel::new(Tensor::zeros(vec![2, 5]), 1.0).unwrap();
        let p = ppca_posterior(&m, &[1.0, -2.0, 0.5, 3.0, 0.0]).unwrap();
        assert_eq!(p.mean, vec![0.0, 0.0]);
        assert_eq!(p.cov, Tensor::identity(2));
        let lm = ppca_log_marginal(&m, &Tensor::zeros(vec![1, 5])).unwrap();
        assert!((lm + 2.5 * (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn collapsed_dimension_is_exact_prior() {
        let m = PpcaModel::new(collapsed_loading(5, 2.0), 0.25).unwrap();
        let p = ppca_posterior(&m, &[0.3, -1.0, 2.0, 0.1, 0.7]).unwrap();
        assert_eq!(p.mean[0], 0.0);
        assert_eq!(p.cov.get2(0, 0), 1.0);
        assert!(p.cov.get2(1, 1) < 0.5);
    }

    #[test]
    fn posterior_matches_grid_bayes() {
        let w = Tensor::from_rows(&[vec![0.8, -0.3, 0.5, 0.2, -1.1], vec![0.1, 0.9, -0.4, 0.6, 0.3]]).unwrap();
        let m = PpcaModel::new(w, 0.7).unwrap();
        let x = [0.4, -0.2, 1.3, 0.5, -0.8];
        let p = ppca_posterior(&m, &x).unwrap();
        let (s0, s1) = (p.cov.get2(0, 0).sqrt(), p.cov.get2(1, 1).sqrt());
        let (g0, w0) = gauss_legendre_on(200, p.mean[0] - 12.0 * s0, p.mean[0] + 12.0 * s0).unwrap();
        let (g1, w1) = gauss_legendre_on(200, p.mean[1] - 12.0 * s1, p.mean[1] + 12.0 * s1).unwrap();
        let mut lw = Vec::new();
        for (a, wa) in g0.iter().zip(&w0) {
            for (b, wb) in g1.iter().zip(&w1) {
                lw.push((m.log_likelihood(&x, &[*a, *b]) - 0.5 * (a * a + b * b), wa * wb, *a, *b));
            }
        }
        let mx = lw.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let (mut z, mut m0, mut m1, mut c00, mut c01, mut c11) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        for (l, w, a, b) in &lw {
            let p = w * (l - mx).exp();
            z += p;
            m0 += p * a;
            m1 += p * b;
            c00 += p * a * a;
            c01 += p * a * b;
            c11 += p * b * b;
        }
        let (m0, m1) = (m0 / z, m1 / z);
        assert!((m0 - p.mean[0]).abs() < 1e-6 && (m1 - p.mean[1]).abs() < 1e-6);
        assert!((c00 / z - m0 * m0 - p.cov.get2(0, 0)).abs() < 1e-6);
        assert!((c01 / z - m0 * m1 - p.cov.get2(0, 1)).abs() < 1e-6);
        assert!((c11 / z - m1 * m1 - p.cov.get2(1, 1)).abs() < 1e-6);
    }

    #[test]
    fn marginal_matches_monte_carlo() {
        let w = Tensor::from_rows(&[vec![0.5, 0.2, -0.3], vec![0.0, 0.4, 0.6]]).unwrap();
        let m = PpcaModel::new(w, 0.5).unwrap();
        let x = [0.3, -0.1, 0.4];
        let exact = ppca_log_marginal(&m, &Tensor::matrix(1, 3, x.to_vec()).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000;
        let lik: Vec<f64> = (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
                m.log_likelihood(&x, &z).exp()
            })
            .collect();
        let mean = lik.iter().sum::<f64>() / n as f64;
        let se = (lik.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 / n as f64).sqrt();
        // Delta method: SE of log-mean ≈ se / mean.
        assert!((mean.ln() - exact).abs() < 3.0 * se / mean, "{} vs {}", mean.ln(), exact);
    }

    #[test]
    fn sweep_kl_decreases_with_noise() {
        let rows = ppca_noise_sweep(&collapsed_loading(5, 2.0), &[0.2, 0.5, 1.0, 1.5, 100.0], 200, 1).unwrap();
        assert!(rows.windows(2).all(|p| p[1].kl < p[0].kl));
        assert!(rows.windows(2).all(|p| p[1].flatness < p[0].flatness));
        assert!(rows[4].kl < 1e-3);
    }

    #[test]
    fn sweep_loading_collapses_at_high_noise() {
        let rows = ppca_noise_sweep(&sweep_loading(5, SWEEP_ROW_NORM), &[0.2, 0.5, 1.0, 1.5], 500, 0).unwrap();
        assert!(rows.windows(2).all(|p| p[1].kl < p[0].kl));
        assert!(rows[3].kl < 0.1, "{}", rows[3].kl);
        let expected = (1.0 + SWEEP_ROW_NORM.powi(2) / 2.25).ln();
        assert!((rows[3].kl - expected).abs() < 0.02);
    }

    #[test]
    fn exact_posterior_elbo_equals_marginal() {
        use crate::models::{elbo_with, ElboOptions, KlMode};
        let m = PpcaModel::new(collapsed_loading(5, 2.0), 0.25).unwrap();
        let data = m.sample(100, 4).unwrap();
        let model = ppca_as_model(&m).unwrap();
        let enc = ppca_encoder(&m, 1.0).unwrap();
        let est = elbo_with(&model, &enc, &data.x, &ElboOptions { beta_weight: 1.0, n_mc: 1, mode: KlMode::Sampled }, 0).unwrap();
        let exact = ppca_log_marginal(&m, &data.x).unwrap();
        assert!((est.elbo * 100.0 - exact).abs() < 1e-6, "{} vs {}", est.elbo * 100.0, exact);
        let inexact = elbo_with(&model, &ppca_encoder(&m, 2.0).unwrap(), &data.x, &ElboOptions::default(), 0).unwrap();
        assert!(inexact.elbo * 100.0 < exact);
    }

    #[test]
    fn non_orthogonal_loading_has_no_diagonal_encoder() {
        let w = Tensor::from_rows(&[vec![1.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(ppca_encoder(&PpcaModel::new(w, 1.0).unwrap(), 1.0).is_err());
    }
}
