use serde::{Deserialize, Serialize};

use crate::data::{gmvae_cluster_mean, Dataset, GMVAE_SYNTH_NOISE};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Mixture VAE with identity decoder: `c ~ U{K}`, `w ~ N(μ_c, diag v_c)`,
/// `x ~ N(w, σ² I)`, so `p(c | x) ∝ N(x; μ_c, v_c + σ²)` exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmvaeOracle {
    /// `K×D`.
    pub means: Tensor,
    /// `K×D` variances of `w | c`.
    pub vars: Tensor,
    pub noise: f64,
}

impl GmvaeOracle {
    /// Parameters that generated `gen_gmvae_synthetic(_, k, separation, _)`.
    pub fn truth(k: usize, separation: f64) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..k).map(|c| gmvae_cluster_mean(c, k, separation)).collect();
        let means = Tensor::from_rows(&rows)?;
        let vars = Tensor::filled(means.shape().to_vec(), 1.0);
        Ok(Self { means, vars, noise: GMVAE_SYNTH_NOISE })
    }

    /// Maximum-likelihood single Gaussian fit copied into all `K` clusters:
    /// the collapsed solution, with the same marginal as a one-cluster model.
    pub fn one_cluster_equivalent(data: &Dataset, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("need at least one cluster".into()));
        }
        let (n, d) = (data.len(), data.dim());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(data.x.row(i)) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                var[j] += (data.x.get2(i, j) - mean[j]).powi(2) / n as f64;
            }
        }
        // Latent variance is the total minus the emission noise, floored.
        let wvar: Vec<f64> = var.iter().map(|v| (v - GMVAE_SYNTH_NOISE).max(1e-6)).collect();
        Ok(Self {
            means: Tensor::from_rows(&vec![mean; k])?,
            vars: Tensor::from_rows(&vec![wvar; k])?,
            noise: GMVAE_SYNTH_NOISE,
        })
    }

    pub fn k(&self) -> usize {
        self.means.rows()
    }

    /// `N×K` matrix of exact `p(c | x_i)`.
    pub fn cluster_posterior(&self, x: &Tensor) -> Result<Tensor> {
        let (k, d) = (self.k(), self.means.cols());
        if x.rank() != 2 || x.cols() != d {
            return Err(Error::Shape(format!("data {:?} vs cluster dimension {d}", x.shape())));
        }
        let mut out = Tensor::zeros(vec![x.rows(), k]);
        for i in 0..x.rows() {
            let logp: Vec<f64> = (0..k)
                .map(|c| {
                    (0..d)
                        .map(|j| {
                            let v = self.vars.get2(c, j) + self.noise;
                            -0.5 * ((x.get2(i, j) - self.means.get2(c, j)).powi(2) / v + v.ln())
                        })
                        .sum()
                })
                .collect();
            let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logp.iter().map(|l| (l - mx).exp()).sum();
            for (c, l) in logp.iter().enumerate() {
                out.set2(i, c, (l - mx).exp() / z);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterPosteriorSummary {
    /// Largest total-variation distance of any `p(c | x_i)` from uniform.
    pub max_tv_from_uniform: f64,
    pub mean_tv_from_uniform: f64,
    /// Mean over points of `max_c p(c | x_i)`.
    pub mean_max_prob: f64,
}

pub fn summarize(post: &Tensor) -> ClusterPosteriorSummary {
    let (n, k) = (post.rows(), post.cols());
    let (mut max_tv, mut sum_tv, mut sum_max) = (0.0f64, 0.0, 0.0);
    for i in 0..n {
        let row = post.row(i);
        let tv = 0.5 * row.iter().map(|p| (p - 1.0 / k as f64).abs()).sum::<f64>();
        max_tv = max_tv.max(tv);
        sum_tv += tv;
        sum_max += row.iter().cloned().fold(0.0, f64::max);
    }
    ClusterPosteriorSummary { max_tv_from_uniform: max_tv, mean_tv_from_uniform: sum_tv / n as f64, mean_max_prob: sum_max / n as f64 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_gmvae_synthetic;

    #[test]
    fn overlapping_clusters_collapse_at_one_cluster_fit() {
        let data = gen_gmvae_synthetic(2000, 3, 0.0, 0).unwrap();
        let o = GmvaeOracle::one_cluster_equivalent(&data, 3).unwrap();
        let s = summarize(&o.cluster_posterior(&data.x).unwrap());
        assert!(s.max_tv_from_uniform < 1e-12);
    }

    #[test]
    fn separated_clusters_are_recovered() {
        let data = gen_gmvae_synthetic(2000, 3, 10.0, 0).unwrap();
        let o = GmvaeOracle::truth(3, 10.0).unwrap();
        let post = o.cluster_posterior(&data.x).unwrap();
        let s = summarize(&post);
        assert!(s.mean_max_prob > 0.99, "{}", s.mean_max_prob);
        let labels = data.labels.as_ref().unwrap();
        let acc = (0..data.len())
            .filter(|&i| {
                let row = post.row(i);
                let best = (0..3).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                best == labels[i]
            })
            .count();
        assert!(acc as f64 / data.len() as f64 > 0.98);
    }

    #[test]
    fn posterior_rows_sum_to_one() {
        let data = gen_gmvae_synthetic(50, 4, 3.0, 2).unwrap();
        let post = GmvaeOracle::truth(4, 3.0).unwrap().cluster_posterior(&data.x).unwrap();
        for i in 0..50 {
            assert!((post.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
