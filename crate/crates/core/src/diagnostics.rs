//! Posterior-collapse metrics: active units, KL to the prior, mutual
//! information, and a probe relating likelihood flatness to collapse.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{logsumexp, Tensor};
use crate::error::{Error, Result};
use crate::inference::iw_log_likelihood;
use crate::models::{diag_gaussian_kl, posterior, Bridge, Encoder, Model, Posterior};

/// Variance threshold for an active unit.
pub const AU_EPSILON: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseThresholds {
    /// "collapsed" needs KL below this …
    pub kl_collapsed: f64,
    /// … and AU below this.
    pub au_collapsed: f64,
    /// "near-collapsed" needs KL below this.
    pub kl_near: f64,
}

impl Default for CollapseThresholds {
    fn default() -> Self {
        Self { kl_collapsed: 0.01, au_collapsed: 0.05, kl_near: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Collapsed,
    NearCollapsed,
    Active,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Collapsed => "collapsed",
            Verdict::NearCollapsed => "near-collapsed",
            Verdict::Active => "active",
        }
    }
}

/// Collapse verdict from mean KL and (when the latent is per-datapoint) AU.
pub fn collapse_verdict(kl: f64, au: Option<f64>, t: &CollapseThresholds) -> Verdict {
    if kl < t.kl_collapsed && au.is_none_or(|a| a < t.au_collapsed) {
        Verdict::Collapsed
    } else if kl < t.kl_near {
        Verdict::NearCollapsed
    } else {
        Verdict::Active
    }
}

/// Per-column sample variances (`n − 1` denominator).
pub fn column_variances(means: &Tensor) -> Result<Vec<f64>> {
    if means.rank() != 2 || means.rows() < 2 {
        return Err(Error::Config(format!("variance needs at least 2 rows, got shape {:?}", means.shape())));
    }
    let (n, d) = (means.rows(), means.cols());
    Ok((0..d)
        .map(|j| {
            let mu = (0..n).map(|i| means.get2(i, j)).sum::<f64>() / n as f64;
            (0..n).map(|i| (means.get2(i, j) - mu).powi(2)).sum::<f64>() / (n - 1) as f64
        })
        .collect())
}

/// Fraction of dimensions whose posterior mean varies across datapoints by at least `eps`.
pub fn active_units(posterior_means: &Tensor, eps: f64) -> Result<f64> {
    let v = column_variances(posterior_means)?;
    Ok(v.iter().filter(|&&x| x >= eps).count() as f64 / v.len() as f64)
}

/// Per-datapoint posterior over the latents: a diagonal Gaussian part, a
/// categorical part, or both (independent factors).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub gaussian: Option<(Tensor, Tensor)>,
    pub categorical: Option<Tensor>,
}

impl From<Posterior> for LatentPosterior {
    fn from(p: Posterior) -> Self {
        Self { gaussian: Some((p.mean, p.log_var)), categorical: p.cluster_probs }
    }
}

impl LatentPosterior {
    pub fn len(&self) -> usize {
        self.gaussian.as_ref().map(|g| g.0.rows()).or(self.categorical.as_ref().map(Tensor::rows)).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Posterior means: Gaussian means followed by category probabilities.
    pub fn means(&self) -> Result<Tensor> {
        let n = self.len();
        let mut rows = vec![Vec::new(); n];
        if let Some((m, _)) = &self.gaussian {
            for (i, r) in rows.iter_mut().enumerate() {
                r.extend_from_slice(m.row(i));
            }
        }
        if let Some(p) = &self.categorical {
            for (i, r) in rows.iter_mut().enumerate() {
                r.extend_from_slice(p.row(i));
            }
        }
        if rows.is_empty() || rows[0].is_empty() {
            return Err(Error::Config("empty posterior".into()));
        }
        Tensor::from_rows(&rows)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Prior {
    Gaussian { mean: Vec<f64>, log_var: Vec<f64> },
    Categorical { k: usize },
    /// Uniform mixture of diagonal Gaussians over a joint (categorical, Gaussian) latent.
    Mixture { means: Tensor, log_vars: Tensor },
}

impl Prior {
    pub fn standard_normal(dim: usize) -> Self {
        Prior::Gaussian { mean: vec![0.0; dim], log_var: vec![0.0; dim] }
    }

    pub fn from_bridge(bridge: &Bridge) -> Self {
        let (m, lv) = bridge.components();
        if m.rows() == 1 {
            Prior::Gaussian { mean: m.row(0).to_vec(), log_var: lv.row(0).to_vec() }
        } else {
            Prior::Mixture { means: m, log_vars: lv }
        }
    }
}

fn categorical_kl_uniform(p: &[f64]) -> f64 {
    let k = p.len() as f64;
    p.iter().filter(|&&q| q > 0.0).map(|&q| q * (q * k).ln()).sum::<f64>().max(0.0)
}

/// Per-datapoint `KL(q(z|x_i) ‖ p(z))` in closed form.
pub fn kl_rows(post: &LatentPosterior, prior: &Prior) -> Result<Vec<f64>> {
    let n = post.len();
    match (prior, &post.gaussian, &post.categorical) {
        (Prior::Gaussian { mean, log_var }, Some((m, l)), None) => {
            if m.cols() != mean.len() {
                return Err(Error::Shape(format!("posterior dimension {} vs prior {}", m.cols(), mean.len())));
            }
            Ok((0..n).map(|i| diag_gaussian_kl(m.row(i), l.row(i), mean, log_var)).collect())
        }
        (Prior::Categorical { k }, None, Some(p)) => {
            if p.cols() != *k {
                return Err(Error::Shape(format!("posterior over {} categories vs prior over {}", p.cols(), k)));
            }
            Ok((0..n).map(|i| categorical_kl_uniform(p.row(i))).collect())
        }
        (Prior::Mixture { means, log_vars }, Some((m, l)), Some(p)) => {
            let k = means.rows();
            if p.cols() != k || m.cols() != means.cols() {
                return Err(Error::Shape("posterior does not match the mixture prior".into()));
            }
            Ok((0..n)
                .map(|i| {
                    let q = p.row(i);
                    let cross: f64 = (0..k)
                        .filter(|&c| q[c] > 0.0)
                        .map(|c| q[c] * diag_gaussian_kl(m.row(i), l.row(i), means.row(c), log_vars.row(c)))
                        .sum();
                    categorical_kl_uniform(q) + cross
                })
                .collect())
        }
        _ => Err(Error::Unsupported("no closed-form KL for this posterior/prior pair".into())),
    }
}

/// Dataset-average `KL(q(z|x) ‖ p(z))`.
pub fn kl_to_prior(post: &LatentPosterior, prior: &Prior) -> Result<f64> {
    let rows = kl_rows(post, prior)?;
    if rows.is_empty() {
        return Err(Error::Config("empty posterior".into()));
    }
    Ok(rows.iter().sum::<f64>() / rows.len() as f64)
}

fn gauss_log_density(z: &[f64], m: &[f64], l: &[f64]) -> f64 {
    z.iter()
        .zip(m)
        .zip(l)
        .map(|((z, m), l)| -0.5 * ((z - m).powi(2) * (-l).exp() + l + (2.0 * PI).ln()))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub mi: f64,
    pub se: f64,
}

/// Monte-Carlo `E_x E_{q(z|x)}[log q(z|x) − log q(z)]` with the aggregate
/// posterior `q(z) = (1/n) Σ_j q(z|x_j)` over all datapoints.
pub fn mutual_information(post: &LatentPosterior, n_samples: usize, seed: u64) -> Result<MiEstimate> {
    if n_samples == 0 {
        return Err(Error::Config("n_samples must be at least 1".into()));
    }
    let n = post.len();
    if n == 0 {
        return Err(Error::Config("empty posterior".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let log_q = |z: &[f64], c: Option<usize>, j: usize| -> f64 {
        let mut v = 0.0;
        if let Some((m, l)) = &post.gaussian {
            v += gauss_log_density(z, m.row(j), l.row(j));
        }
        if let (Some(p), Some(c)) = (&post.categorical, c) {
            v += p.get2(j, c).ln();
        }
        v
    };
    let mut terms = Vec::with_capacity(n * n_samples);
    let mut buf = vec![0.0; n];
    for i in 0..n {
        for _ in 0..n_samples {
            let z: Vec<f64> = match &post.gaussian {
                Some((m, l)) => (0..m.cols())
                    .map(|j| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        m.get2(i, j) + (0.5 * l.get2(i, j)).exp() * e
                    })
                    .collect(),
                None => vec![],
            };
            let c = post.categorical.as_ref().map(|p| {
                let u: f64 = rng.random();
                let row = p.row(i);
                let mut acc = 0.0;
                row.iter().position(|q| {
                    acc += q;
                    u < acc
                })
                .unwrap_or(row.len() - 1)
            });
            for (j, b) in buf.iter_mut().enumerate() {
                *b = log_q(&z, c, j);
            }
            let own = buf[i];
            terms.push(own - (logsumexp(&buf) - (n as f64).ln()));
        }
    }
    let m = terms.len() as f64;
    let mean = terms.iter().sum::<f64>() / m;
    let var = if terms.len() > 1 { terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
    Ok(MiEstimate { mi: mean, se: (var / m).sqrt() })
}

/// Points and weights of a quadrature rule over a low-dimensional latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub points: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// `max − min` of the log-likelihood over the grid.
    pub flatness: f64,
    /// `KL(posterior ‖ prior)` under the quadrature rule.
    pub kl: f64,
    pub flat: bool,
    pub collapsed: bool,
    /// Flatness and collapse agree.
    pub equivalence_holds: bool,
    pub verdict: String,
    /// Normalized posterior density at the grid points.
    pub posterior: Vec<f64>,
    pub log_likelihood: Vec<f64>,
}

pub const FLATNESS_TOL: f64 = 1e-8;
pub const PROBE_KL_TOL: f64 = 1e-6;

/// Evaluates the log-likelihood on `grid`, forms the posterior by Bayes' rule,
/// and checks that a flat likelihood coincides with posterior = prior.
///
/// The posterior is normalized relative to the prior's quadrature mass, so a
/// constant likelihood reproduces the prior density bit for bit.
pub fn theorem1_probe(
    log_lik: impl Fn(&[f64]) -> f64,
    prior_density: impl Fn(&[f64]) -> f64,
    grid: &Grid,
    flat_tol: f64,
    kl_tol: f64,
) -> Result<ProbeReport> {
    if grid.points.is_empty() || grid.points.len() != grid.weights.len() {
        return Err(Error::Config("grid needs matching, non-empty points and weights".into()));
    }
    if grid.points[0].len() > 2 {
        return Err(Error::Unsupported("likelihood flatness is assessed for latents of dimension ≤ 2".into()));
    }
    let ll: Vec<f64> = grid.points.iter().map(|p| log_lik(p)).collect();
    let prior: Vec<f64> = grid.points.iter().map(|p| prior_density(p)).collect();
    if let Some(i) = ll.iter().chain(&prior).position(|v| !v.is_finite()) {
        return Err(Error::Numeric { index: i % grid.points.len(), what: "grid evaluation is not finite".into() });
    }
    let max = ll.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = ll.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio: Vec<f64> = ll.iter().map(|l| (l - max).exp()).collect();
    let prior_mass: f64 = grid.weights.iter().zip(&prior).map(|(w, p)| w * p).sum();
    let post_mass: f64 = grid.weights.iter().zip(&prior).zip(&ratio).map(|((w, p), r)| w * p * r).sum();
    let z = post_mass / prior_mass;
    if !(z > 0.0) {
        return Err(Error::Numeric { index: 0, what: "posterior has no mass on the grid".into() });
    }
    let post: Vec<f64> = prior.iter().zip(&ratio).map(|(p, r)| p * r / z).collect();
    let kl = grid
        .weights
        .iter()
        .zip(&post)
        .zip(&prior)
        .filter(|((_, q), _)| **q > 0.0)
        .map(|((w, q), p)| w * q * (q / p).ln())
        .sum::<f64>()
        / prior_mass;
    let kl = kl.max(0.0);
    let flatness = max - min;
    let (flat, collapsed) = (flatness <= flat_tol, kl <= kl_tol);
    let verdict = match (flat, collapsed) {
        (true, true) => "collapsed (non-identifiable)",
        (false, false) => "active (identifiable)",
        (true, false) => "inconsistent: flat likelihood but posterior moved",
        (false, true) => "inconsistent: informative likelihood but posterior equals prior",
    };
    Ok(ProbeReport {
        flatness,
        kl,
        flat,
        collapsed,
        equivalence_holds: flat == collapsed,
        verdict: verdict.into(),
        posterior: post,
        log_likelihood: ll,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub label: String,
    pub epsilon: f64,
    pub au: Option<f64>,
    pub kl: f64,
    pub mi: Option<f64>,
    pub mi_se: Option<f64>,
    pub iw_ll: Option<f64>,
    pub variances: Vec<f64>,
    pub verdict: Verdict,
    pub thresholds: CollapseThresholds,
}

pub const REPORT_CSV_HEADER: &str = "label,au,kl,mi,mi_se,iw_ll,verdict,variances";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl DiagnosticsReport {
    pub fn csv_row(&self) -> String {
        let vars: Vec<String> = self.variances.iter().map(|v| format!("{v}")).collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.label,
            fmt_opt(self.au),
            self.kl,
            fmt_opt(self.mi),
            fmt_opt(self.mi_se),
            fmt_opt(self.iw_ll),
            self.verdict.as_str(),
            vars.join(";")
        )
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: AU={} KL={:.4} MI={} IW-LL={} verdict={}",
            self.label,
            self.au.map_or("n/a".into(), |a| format!("{a:.3}")),
            self.kl,
            self.mi.map_or("n/a".into(), |m| format!("{m:.4}")),
            self.iw_ll.map_or("n/a".into(), |v| format!("{v:.4}")),
            self.verdict.as_str()
        )
    }
}

pub fn write_reports_csv(w: &mut impl Write, reports: &[DiagnosticsReport]) -> Result<()> {
    writeln!(w, "{REPORT_CSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseOptions {
    pub epsilon: f64,
    pub mi_samples: usize,
    /// Importance samples for IW-LL; 0 skips it.
    pub iw_k: usize,
    /// Added to every IW-LL value (e.g. the log-Jacobian of a data standardization).
    pub ll_offset: f64,
    pub seed: u64,
    pub thresholds: CollapseThresholds,
}

impl Default for DiagnoseOptions {
    fn default() -> Self {
        Self { epsilon: AU_EPSILON, mi_samples: 1, iw_k: 100, ll_offset: 0.0, seed: 0, thresholds: CollapseThresholds::default() }
    }
}

/// Full report for a model/encoder pair on `x`.
pub fn diagnose(label: &str, model: &Model, encoder: &Encoder, x: &Tensor, opts: &DiagnoseOptions) -> Result<DiagnosticsReport> {
    let post: LatentPosterior = posterior(model, encoder, x)?.into();
    let means = post.means()?;
    let variances = column_variances(&means)?;
    let au = variances.iter().filter(|&&v| v >= opts.epsilon).count() as f64 / variances.len() as f64;
    let kl = kl_to_prior(&post, &Prior::from_bridge(&model.bridge))?;
    let mi = mutual_information(&post, opts.mi_samples.max(1), opts.seed)?;
    let iw_ll = if opts.iw_k > 0 { Some(iw_log_likelihood(model, encoder, x, opts.iw_k, opts.seed)?.mean + opts.ll_offset) } else { None };
    Ok(DiagnosticsReport {
        label: label.into(),
        epsilon: opts.epsilon,
        au: Some(au),
        kl,
        mi: Some(mi.mi),
        mi_se: Some(mi.se),
        iw_ll,
        variances,
        verdict: collapse_verdict(kl, Some(au), &opts.thresholds),
        thresholds: opts.thresholds,
    })
}
