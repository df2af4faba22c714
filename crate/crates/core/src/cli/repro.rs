use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cli::output::{svg_lines, svg_scatter, OutDir, RunConfig};
use crate::data::{gen_pinwheel, PinwheelConfig};
use crate::diagnostics::{diagnose, DiagnoseOptions, DiagnosticsReport, REPORT_CSV_HEADER};
use crate::diffcore::Tensor;
use crate::error::Result;
use crate::inference::{init_encoder, train, TrainConfig, TrainTrace};
use crate::models::{build_model, posterior, ModelSpec};
use crate::oracles::gmm::{run_scenario, GmmReport, GmmScenario};
use crate::oracles::ppca::{
    collapsed_loading, ppca_noise_sweep, ppca_posterior, sweep_loading, PpcaModel, SweepRow, FLATNESS_POINTS,
    FLATNESS_RADIUS, SWEEP_ROW_NORM,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinwheelOptions {
    pub epochs: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Continuous latent size of the baseline mixture VAE.
    pub baseline_m: usize,
    pub iw_k: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for PinwheelOptions {
    fn default() -> Self {
        Self { epochs: 200, n_train: 2500, n_test: 500, baseline_m: 8, iw_k: 100, batch: 128, lr: 1e-3 }
    }
}

pub struct PinwheelOutcome {
    /// Baseline first, then the identifiable model.
    pub reports: Vec<DiagnosticsReport>,
    pub traces: Vec<(String, TrainTrace)>,
    pub diverged: Vec<String>,
}

/// Trains the baseline GMVAE and the IDGMVAE on standardized pinwheel data and
/// diagnoses both on held-out points. IW-LL is in raw data coordinates.
pub fn pinwheel(opts: &PinwheelOptions, seed: u64) -> Result<(PinwheelOutcome, Tensor, Vec<usize>)> {
    let all = gen_pinwheel(&PinwheelConfig { n: opts.n_train + opts.n_test, ..Default::default() }, seed)?;
    let (train_d, test_d) = all.split(opts.n_train)?;
    let s = train_d.column_standardization();
    let (tr, te) = (train_d.standardized(&s), test_d.standardized(&s));
    let mut out = PinwheelOutcome { reports: Vec::new(), traces: Vec::new(), diverged: Vec::new() };
    let mut clusters = Vec::new();
    for (label, spec) in [("gmvae", ModelSpec::baseline_gmvae(2, opts.baseline_m, 2)), ("idgmvae", ModelSpec::idgmvae(2, 2, 2))] {
        let model = build_model(&spec, seed)?;
        let enc = init_encoder(&model, &tr, seed.wrapping_add(1));
        let cfg = TrainConfig { epochs: opts.epochs, batch: opts.batch, lr: opts.lr, seed, ..Default::default() };
        let t = train(&model, &enc, &tr, &cfg)?;
        if let Some(e) = &t.diverged {
            out.diverged.push(format!("{label}: {e}"));
        }
        let dopts = DiagnoseOptions { iw_k: opts.iw_k, ll_offset: s.log_jacobian(), seed, ..Default::default() };
        out.reports.push(diagnose(label, &t.model, &t.encoder, &te.x, &dopts)?);
        if label == "idgmvae" {
            if let Some(p) = posterior(&t.model, &t.encoder, &te.x)?.cluster_probs {
                clusters = (0..p.rows()).map(|i| (0..p.cols()).fold(0, |b, c| if p.get2(i, c) > p.get2(i, b) { c } else { b })).collect();
            }
        }
        out.traces.push((label.to_string(), t.trace));
    }
    Ok((out, test_d.x, clusters))
}

pub fn write_pinwheel(dir: &mut OutDir, run: &RunConfig, opts: &PinwheelOptions, seed: u64) -> Result<PinwheelOutcome> {
    let (outcome, test_x, clusters) = pinwheel(opts, seed)?;
    dir.csv("pinwheel_reports.csv", run, &reports_csv(&outcome.reports))?;
    let mut traces = String::from("model,epoch,elbo,kl,recon\n");
    for (label, t) in &outcome.traces {
        for r in &t.records {
            let _ = writeln!(traces, "{label},{},{},{},{}", r.epoch, r.elbo, r.kl, r.recon);
        }
    }
    dir.csv("pinwheel_traces.csv", run, &traces)?;
    let mut assign = String::from("x0,x1,cluster\n");
    let mut pts = Vec::new();
    for i in 0..test_x.rows() {
        let c = clusters.get(i).copied().unwrap_or(0);
        let _ = writeln!(assign, "{},{},{c}", test_x.get2(i, 0), test_x.get2(i, 1));
        pts.push((test_x.get2(i, 0), test_x.get2(i, 1), c));
    }
    dir.csv("pinwheel_clusters.csv", run, &assign)?;
    dir.svg("pinwheel_clusters.svg", run, &svg_scatter("held-out pinwheel, IDGMVAE cluster assignment", &pts))?;
    Ok(outcome)
}

pub fn reports_csv(reports: &[DiagnosticsReport]) -> String {
    let mut s = format!("{REPORT_CSV_HEADER}\n");
    for r in reports {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpcaOptions {
    /// Points generated from the one-dimensional model.
    pub n: usize,
    pub loading_norm: f64,
    pub sigma_bar: f64,
    pub sigmas: Vec<f64>,
    pub sweep_norm: f64,
    pub sweep_n: usize,
}

impl Default for PpcaOptions {
    fn default() -> Self {
        Self { n: 500, loading_norm: 2.0, sigma_bar: 0.5, sigmas: vec![0.2, 0.5, 1.0, 1.5], sweep_norm: SWEEP_ROW_NORM, sweep_n: 500 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DimensionCollapse {
    /// Largest `|posterior mean|` over points, per latent dimension.
    pub max_abs_mean: Vec<f64>,
    /// Posterior variance per dimension (identical for every point).
    pub variance: Vec<f64>,
}

/// Two-dimensional PPCA at the collapsed maximizer `([0, w̄₁], σ̄₁)` evaluated on
/// data generated by the one-dimensional model.
pub fn ppca_collapse(opts: &PpcaOptions, seed: u64) -> Result<DimensionCollapse> {
    let m = PpcaModel::new(collapsed_loading(5, opts.loading_norm), opts.sigma_bar * opts.sigma_bar)?;
    let data = m.sample(opts.n, seed)?;
    let mut out = DimensionCollapse { max_abs_mean: vec![0.0; 2], variance: vec![0.0; 2] };
    for i in 0..data.len() {
        let p = ppca_posterior(&m, data.x.row(i))?;
        for k in 0..2 {
            out.max_abs_mean[k] = out.max_abs_mean[k].max(p.mean[k].abs());
            out.variance[k] = p.cov.get2(k, k);
        }
    }
    Ok(out)
}

pub fn write_ppca(dir: &mut OutDir, run: &RunConfig, opts: &PpcaOptions, seed: u64) -> Result<(DimensionCollapse, Vec<SweepRow>)> {
    let collapse = ppca_collapse(opts, seed)?;
    let mut s = String::from("dim,max_abs_posterior_mean,posterior_variance\n");
    for k in 0..2 {
        let _ = writeln!(s, "{},{:e},{:e}", k + 1, collapse.max_abs_mean[k], collapse.variance[k]);
    }
    dir.csv("ppca_dimension_collapse.csv", run, &s)?;

    let w = sweep_loading(5, opts.sweep_norm);
    let rows = ppca_noise_sweep(&w, &opts.sigmas, opts.sweep_n, seed)?;
    let mut s = String::from("sigma,kl,flatness\n");
    for r in &rows {
        let _ = writeln!(s, "{},{:e},{:e}", r.sigma, r.kl, r.flatness);
    }
    dir.csv("ppca_noise_sweep.csv", run, &s)?;

    // Likelihood surface and posterior of z₁ for the first point at each σ.
    let (mut surface, mut post) = (String::from("sigma,z1,z2,log_likelihood\n"), String::from("sigma,z1,posterior_density,prior_density\n"));
    let mut series = Vec::new();
    for (i, &sigma) in opts.sigmas.iter().enumerate() {
        let m = PpcaModel::new(w.clone(), sigma * sigma)?;
        let x = m.sample(1, seed.wrapping_add(i as u64))?.x;
        let axis: Vec<f64> =
            (0..FLATNESS_POINTS).map(|j| -FLATNESS_RADIUS + 2.0 * FLATNESS_RADIUS * j as f64 / (FLATNESS_POINTS - 1) as f64).collect();
        for &a in &axis {
            for &b in &axis {
                let _ = writeln!(surface, "{sigma},{a},{b},{:e}", m.log_likelihood(x.row(0), &[a, b]));
            }
        }
        let p = ppca_posterior(&m, x.row(0))?;
        let (mu, var) = (p.mean[0], p.cov.get2(0, 0));
        let mut pts = Vec::new();
        for &a in &axis {
            let dens = (-(a - mu).powi(2) / (2.0 * var)).exp() / (2.0 * std::f64::consts::PI * var).sqrt();
            let prior = (-(a * a) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
            let _ = writeln!(post, "{sigma},{a},{dens:e},{prior:e}");
            pts.push((a, dens));
        }
        series.push((format!("sigma={sigma}"), pts));
    }
    dir.csv("ppca_likelihood_surface.csv", run, &surface)?;
    dir.csv("ppca_posterior_z1.csv", run, &post)?;
    dir.svg("ppca_posterior_z1.svg", run, &svg_lines("posterior of z1 as noise grows", &series))?;
    Ok((collapse, rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmOptions {
    /// 1, 2, 3, or 0 for all three.
    pub scenario: usize,
    pub n: usize,
    pub nodes: usize,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self { scenario: 0, n: 100_000, nodes: crate::oracles::gmm::DEFAULT_NODES }
    }
}

pub fn gmm_scenarios(opts: &GmmOptions) -> Result<Vec<GmmScenario>> {
    let all = GmmScenario::all(opts.n);
    match opts.scenario {
        0 => Ok(all),
        i @ 1..=3 => Ok(vec![all[i - 1].clone()]),
        i => Err(crate::error::Error::Config(format!("scenario must be 1, 2, 3 or 0 (all), got {i}"))),
    }
}

pub fn write_gmm(dir: &mut OutDir, run: &RunConfig, opts: &GmmOptions, seed: u64) -> Result<Vec<GmmReport>> {
    let mut reports = Vec::new();
    let mut series = Vec::new();
    for s in gmm_scenarios(opts)? {
        let r = run_scenario(&s, opts.nodes, seed)?;
        let mut curve = Vec::new();
        r.write_curve(&mut curve)?;
        dir.csv(&format!("gmm_{}_curve.csv", s.name), run, &String::from_utf8_lossy(&curve))?;
        series.push((s.name.clone(), r.alphas.iter().copied().zip(r.probe.posterior.iter().copied()).collect::<Vec<_>>()));
        reports.push(r);
    }
    let mut summary = format!("{}\n", GmmReport::SUMMARY_HEADER);
    for r in &reports {
        summary.push_str(&r.summary_row());
        summary.push('\n');
    }
    dir.csv("gmm_summary.csv", run, &summary)?;
    let diag: Vec<DiagnosticsReport> = reports.iter().map(GmmReport::diagnostics_report).collect();
    dir.csv("gmm_reports.csv", run, &reports_csv(&diag))?;
    dir.svg("gmm_posterior.svg", run, &svg_lines("posterior of the mixture weight", &series))?;
    Ok(reports)
}
