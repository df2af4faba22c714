use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta, Continuous};

use crate::diagnostics::{
    collapse_verdict, theorem1_probe, CollapseThresholds, DiagnosticsReport, Grid, ProbeReport, AU_EPSILON, FLATNESS_TOL, PROBE_KL_TOL,
};
use crate::error::{Error, Result};
use crate::oracles::quadrature::composite_gauss_legendre;

/// Two-component 1-D mixture `α N(μ₁, s₁²) + (1−α) N(μ₂, s₂²)` with the
/// mixture weight as latent, `α ~ Beta(a, b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub mu1: f64,
    pub mu2: f64,
    pub s1: f64,
    pub s2: f64,
    pub a: f64,
    pub b: f64,
}

impl GmmModel {
    pub fn new(mu1: f64, mu2: f64, s1: f64, s2: f64) -> Self {
        Self { mu1, mu2, s1, s2, a: 5.0, b: 5.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s1 > 0.0 && self.s2 > 0.0 && self.a > 0.0 && self.b > 0.0) {
            return Err(Error::Config("GMM scales and Beta parameters must be positive".into()));
        }
        if ![self.mu1, self.mu2, self.s1, self.s2, self.a, self.b].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("GMM parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn prior(&self) -> Result<Beta> {
        Beta::new(self.a, self.b).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sample(&self, n: usize, alpha: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let first = rng.random::<f64>() < alpha;
                let e: f64 = StandardNormal.sample(&mut rng);
                if first {
                    self.mu1 + self.s1 * e
                } else {
                    self.mu2 + self.s2 * e
                }
            })
            .collect()
    }

    fn component_logs(&self, x: &[f64]) -> Vec<(f64, f64)> {
        let ln = |v: f64, m: f64, s: f64| -0.5 * ((v - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        x.iter().map(|&v| (ln(v, self.mu1, self.s1), ln(v, self.mu2, self.s2))).collect()
    }
}

fn log_lik(logs: &[(f64, f64)], alpha: f64) -> f64 {
    let (la, lb) = (alpha.ln(), (1.0 - alpha).ln());
    logs.iter()
        .map(|&(l1, l2)| {
            let (p, q) = (la + l1, lb + l2);
            let m = p.max(q);
            m + ((p - m).exp() + (q - m).exp()).ln()
        })
        .sum()
}

/// First and second derivative of the log posterior in α.
fn log_post_derivs(m: &GmmModel, logs: &[(f64, f64)], alpha: f64) -> (f64, f64) {
    let (mut d1, mut d2) = (0.0, 0.0);
    for &(l1, l2) in logs {
        let mx = l1.max(l2);
        let (f1, f2) = ((l1 - mx).exp(), (l2 - mx).exp());
        let r = (f1 - f2) / (alpha * f1 + (1.0 - alpha) * f2);
        d1 += r;
        d2 -= r * r;
    }
    d1 += (m.a - 1.0) / alpha - (m.b - 1.0) / (1.0 - alpha);
    d2 -= (m.a - 1.0) / (alpha * alpha) + (m.b - 1.0) / ((1.0 - alpha) * (1.0 - alpha));
    (d1, d2)
}

/// Half-width of the central panel, in Laplace standard deviations.
pub const CENTRAL_PANEL_SDS: f64 = 40.0;

/// Quadrature grid on `[0, 1]` with `n_nodes` total nodes, concentrated
/// around the posterior mode: half the nodes on `mode ± 40 sd` (Laplace sd),
/// a quarter on each tail panel.
pub fn posterior_grid(m: &GmmModel, x: &[f64], n_nodes: usize) -> Result<Grid> {
    m.validate()?;
    if n_nodes < 4 {
        return Err(Error::Config("need at least 4 quadrature nodes".into()));
    }
    let logs = m.component_logs(x);
    // The log posterior is concave for a, b ≥ 1: bisect on its derivative.
    let (mut lo, mut hi) = (1e-12, 1.0 - 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if log_post_derivs(m, &logs, mid).0 > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mode = 0.5 * (lo + hi);
    let sd = (-1.0 / log_post_derivs(m, &logs, mode).1).sqrt();
    let (c_lo, c_hi) = if sd.is_finite() {
        ((mode - CENTRAL_PANEL_SDS * sd).max(0.0), (mode + CENTRAL_PANEL_SDS * sd).min(1.0))
    } else {
        (0.0, 1.0)
    };
    let mut breaks = vec![0.0];
    let mut counts = Vec::new();
    let centre = n_nodes / 2;
    let side = (n_nodes - centre) / 2;
    if c_lo > 0.0 {
        breaks.push(c_lo);
        counts.push(side);
    }
    breaks.push(c_hi);
    counts.push(centre);
    if c_hi < 1.0 {
        breaks.push(1.0);
        counts.push(side);
    }
    // Return unused side budgets to the central panel.
    let used: usize = counts.iter().sum();
    let ci = if c_lo > 0.0 { 1 } else { 0 };
    counts[ci] += n_nodes - used;
    let (nodes, weights) = composite_gauss_legendre(&breaks, &counts)?;
    Ok(Grid { points: nodes.into_iter().map(|a| vec![a]).collect(), weights })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmScenario {
    pub name: String,
    pub model: GmmModel,
    /// Mixture weight used to generate the data.
    pub alpha_true: f64,
    pub n: usize,
}

impl GmmScenario {
    /// Well-separated mixture, 0.15 / 0.85 at ±10.
    pub fn separated(n: usize) -> Self {
        Self { name: "separated".into(), model: GmmModel::new(-10.0, 10.0, 1.0, 1.0), alpha_true: 0.15, n }
    }

    /// Overlapping mixture, 0.15 / 0.85 at ±0.5.
    pub fn overlapping(n: usize) -> Self {
        Self { name: "overlapping".into(), model: GmmModel::new(-0.5, 0.5, 1.0, 1.0), alpha_true: 0.15, n }
    }

    /// Identical components at −1: the likelihood does not depend on α.
    pub fn degenerate(n: usize) -> Self {
        Self { name: "degenerate".into(), model: GmmModel::new(-1.0, -1.0, 1.0, 1.0), alpha_true: 0.15, n }
    }

    pub fn all(n: usize) -> Vec<Self> {
        vec![Self::separated(n), Self::overlapping(n), Self::degenerate(n)]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmReport {
    pub scenario: GmmScenario,
    pub seed: u64,
    pub alphas: Vec<f64>,
    pub prior_density: Vec<f64>,
    /// Grid point of maximal posterior density.
    pub mode: f64,
    pub probe: ProbeReport,
}

pub const DEFAULT_NODES: usize = 2048;

pub fn run_scenario(s: &GmmScenario, n_nodes: usize, seed: u64) -> Result<GmmReport> {
    s.model.validate()?;
    let x = s.model.sample(s.n, s.alpha_true, seed);
    let logs = s.model.component_logs(&x);
    let grid = posterior_grid(&s.model, &x, n_nodes)?;
    let prior = s.model.prior()?;
    let probe = theorem1_probe(|a| log_lik(&logs, a[0]), |a| prior.pdf(a[0]), &grid, FLATNESS_TOL, PROBE_KL_TOL)?;
    let alphas: Vec<f64> = grid.points.iter().map(|p| p[0]).collect();
    let imax = probe.posterior.iter().enumerate().fold(0, |b, (i, v)| if *v > probe.posterior[b] { i } else { b });
    Ok(GmmReport {
        scenario: s.clone(),
        seed,
        prior_density: alphas.iter().map(|&a| prior.pdf(a)).collect(),
        mode: alphas[imax],
        alphas,
        probe,
    })
}

impl GmmReport {
    pub const CURVE_HEADER: &'static str = "alpha,log_likelihood,prior_density,posterior_density";

    pub fn write_curve<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", Self::CURVE_HEADER)?;
        for i in 0..self.alphas.len() {
            writeln!(
                w,
                "{:.17e},{:.17e},{:.17e},{:.17e}",
                self.alphas[i], self.probe.log_likelihood[i], self.prior_density[i], self.probe.posterior[i]
            )?;
        }
        Ok(())
    }

    /// Exact-posterior diagnostics; AU is undefined for a single latent shared by all points.
    pub fn diagnostics_report(&self) -> DiagnosticsReport {
        let thresholds = CollapseThresholds::default();
        DiagnosticsReport {
            label: format!("gmm-{}", self.scenario.name),
            epsilon: AU_EPSILON,
            au: None,
            kl: self.probe.kl,
            mi: None,
            mi_se: None,
            iw_ll: None,
            variances: vec![],
            verdict: collapse_verdict(self.probe.kl, None, &thresholds),
            thresholds,
        }
    }

    pub const SUMMARY_HEADER: &'static str = "scenario,n,alpha_true,mode,flatness,kl,verdict";

    pub fn summary_row(&self) -> String {
        format!(
            "{},{},{},{:.10e},{:.10e},{:.10e},{}",
            self.scenario.name, self.scenario.n, self.scenario.alpha_true, self.mode, self.probe.flatness, self.probe.kl, self.probe.verdict
        )
    }

    pub fn save_curve(&self, path: &Path, header: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(header.as_bytes())?;
        self.write_curve(&mut f)?;
        f.flush()?;
        Ok(())
    }
}
