//! Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.
//! Run with `cargo test --release --test acceptance`.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use idvae::cli::repro::{pinwheel, ppca_collapse, PinwheelOptions, PpcaOptions};
use idvae::data::gen_gmvae_synthetic;
use idvae::decoder::{check_injectivity, ExpFamilyHead, InjectiveDecoder};
use idvae::icnn::{check_brenier_fd, check_convexity, check_monotone, IcnnParams};
use idvae::inference::iw_log_likelihood;
use idvae::models::{elbo_with, ElboOptions, KlMode};
use idvae::oracles::gmm::{run_scenario, GmmScenario, DEFAULT_NODES};
use idvae::oracles::gmvae::{summarize, GmvaeOracle};
use idvae::oracles::ppca::{ppca_as_model, ppca_encoder, ppca_log_marginal, ppca_noise_sweep, sweep_loading, PpcaModel, SWEEP_ROW_NORM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 0;

// 1
const GMM_N: usize = 100_000;
const FLATNESS_MAX: f64 = 1e-8;
const COLLAPSED_KL_MAX: f64 = 1e-6;
const SEPARATED_KL_MIN: f64 = 0.5;
const MODE_TOL: f64 = 0.02;
const GMM_TIME: Duration = Duration::from_secs(60);
// 2
const PPCA_N: usize = 500;
const EXACT_TOL: f64 = 1e-10;
const ACTIVE_VAR_MAX: f64 = 0.5;
// 3
const SWEEP_SIGMAS: [f64; 4] = [0.2, 0.5, 1.0, 1.5];
const NEAR_COLLAPSE_KL: f64 = 0.1;
const SWEEP_TIME: Duration = Duration::from_secs(60);
// 4
const ICNN_SAMPLES: usize = 10_000;
const ICNN_TOL: f64 = 1e-9;
const FD_NETWORKS: u64 = 100;
const FD_POINTS: usize = 10;
const FD_STEP: f64 = 1e-6;
const FD_KINK_MARGIN: f64 = 1e-3;
const FD_REL_TOL: f64 = 1e-5;
const INJECTIVITY_DELTA: f64 = 0.1;
const ICNN_TIME: Duration = Duration::from_secs(120);
// 5
const IW_K: usize = 1000;
const IW_REL_TOL: f64 = 0.01;
const ELBO_TOL: f64 = 1e-6;
const ESTIMATOR_TIME: Duration = Duration::from_secs(60);
// 6
const PINWHEEL_AU_ID: f64 = 1.0;
const PINWHEEL_AU_BASE_MAX: f64 = 0.4;
const PINWHEEL_LL_TARGET: f64 = -6.5;
const PINWHEEL_LL_TOL: f64 = 1.0;
const PINWHEEL_TIME: Duration = Duration::from_secs(15 * 60);
// 7
const GMVAE_N: usize = 2000;
const GMVAE_K: usize = 3;
const TV_MAX: f64 = 0.02;
const MAX_PROB_MIN: f64 = 0.99;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion1() -> Outcome {
    let start = Instant::now();
    let flat = run_scenario(&GmmScenario::degenerate(GMM_N), DEFAULT_NODES, SEED).map_err(|e| e.to_string())?;
    let sep = run_scenario(&GmmScenario::separated(GMM_N), DEFAULT_NODES, SEED).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    check(
        flat.probe.flatness <= FLATNESS_MAX
            && flat.probe.kl <= COLLAPSED_KL_MAX
            && sep.probe.kl >= SEPARATED_KL_MIN
            && (sep.mode - 0.15).abs() <= MODE_TOL
            && t < GMM_TIME,
        format!(
            "identical components: flatness {:.2e}, KL {:.2e}; separated: KL {:.3}, mode {:.4}; {:.1}s",
            flat.probe.flatness,
            flat.probe.kl,
            sep.probe.kl,
            sep.mode,
            t.as_secs_f64()
        ),
    )
}

fn criterion2() -> Outcome {
    let c = ppca_collapse(&PpcaOptions { n: PPCA_N, ..Default::default() }, SEED).map_err(|e| e.to_string())?;
    check(
        c.max_abs_mean[0] < EXACT_TOL && (c.variance[0] - 1.0).abs() < EXACT_TOL && c.variance[1] < ACTIVE_VAR_MAX,
        format!("dim 1: max |mean| {:.1e}, var {}; dim 2: var {:.4}", c.max_abs_mean[0], c.variance[0], c.variance[1]),
    )
}

fn criterion3() -> Outcome {
    let start = Instant::now();
    let rows = ppca_noise_sweep(&sweep_loading(5, SWEEP_ROW_NORM), &SWEEP_SIGMAS, PPCA_N, SEED).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let kls: Vec<String> = rows.iter().map(|r| format!("{:.4}", r.kl)).collect();
    check(
        rows.windows(2).all(|p| p[1].kl < p[0].kl) && rows[3].kl < NEAR_COLLAPSE_KL && t < SWEEP_TIME,
        format!("KL over sigma {:?}: [{}]; {:.1}s", SWEEP_SIGMAS, kls.join(", "), t.as_secs_f64()),
    )
}

fn criterion4() -> Outcome {
    let start = Instant::now();
    let err = |e: idvae::Error| e.to_string();
    let net = IcnnParams::init(3, &[16, 16], 0.0, &mut ChaCha8Rng::seed_from_u64(SEED));
    let convex = check_convexity(&net, ICNN_SAMPLES, ICNN_TOL, SEED).map_err(err)?;
    let mono = check_monotone(&net, ICNN_SAMPLES, ICNN_TOL, SEED).map_err(err)?;
    let mut fd_err: f64 = 0.0;
    for s in 0..FD_NETWORKS {
        let p = IcnnParams::init(3, &[16, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(1000 + s));
        fd_err = fd_err.max(check_brenier_fd(&p, FD_POINTS, FD_STEP, FD_KINK_MARGIN, s).map_err(err)?.max_rel_err);
    }
    let dec =
        InjectiveDecoder::deep(&[2, 5], &[16, 16], 1.0, ExpFamilyHead::gaussian(1.0), &mut ChaCha8Rng::seed_from_u64(SEED)).map_err(err)?;
    let inj = check_injectivity(&dec, ICNN_SAMPLES, INJECTIVITY_DELTA, SEED).map_err(err)?;
    let t = start.elapsed();
    check(
        convex.violations == 0 && mono.violations == 0 && fd_err < FD_REL_TOL && inj.min_separation > 0.0 && t < ICNN_TIME,
        format!(
            "convexity violations {}, monotonicity violations {}, FD rel err {:.2e}, min separation {:.3e}; {:.1}s",
            convex.violations,
            mono.violations,
            fd_err,
            inj.min_separation,
            t.as_secs_f64()
        ),
    )
}

fn criterion5() -> Outcome {
    let start = Instant::now();
    let err = |e: idvae::Error| e.to_string();
    let m = PpcaModel::new(sweep_loading(5, 1.0), 0.25).map_err(err)?;
    let data = m.sample(200, SEED).map_err(err)?;
    let n = data.len() as f64;
    let exact = ppca_log_marginal(&m, &data.x).map_err(err)? / n;
    let model = ppca_as_model(&m).map_err(err)?;
    // Deliberately over-dispersed proposal so the importance weights are not constant.
    let proposal = ppca_encoder(&m, 2.0).map_err(err)?;
    let iw = iw_log_likelihood(&model, &proposal, &data.x, IW_K, SEED).map_err(err)?;
    let exact_q = ppca_encoder(&m, 1.0).map_err(err)?;
    let opts = ElboOptions { beta_weight: 1.0, n_mc: 1, mode: KlMode::Sampled };
    let elbo = elbo_with(&model, &exact_q, &data.x, &opts, SEED).map_err(err)?;
    let rel = ((iw.mean - exact) / exact).abs();
    let gap = (elbo.elbo - exact).abs() * n;
    let t = start.elapsed();
    check(
        rel < IW_REL_TOL && gap < ELBO_TOL && t < ESTIMATOR_TIME,
        format!("IW-LL {:.5} vs exact {:.5} (rel {:.2e}); exact-q ELBO gap {:.2e} nats; {:.1}s", iw.mean, exact, rel, gap, t.as_secs_f64()),
    )
}

fn criterion6() -> Outcome {
    let start = Instant::now();
    let (out, _, _) = pinwheel(&PinwheelOptions::default(), SEED).map_err(|e| e.to_string())?;
    let t = start.elapsed();
    let (base, id) = (&out.reports[0], &out.reports[1]);
    let (au_b, au_id) = (base.au.unwrap_or(f64::NAN), id.au.unwrap_or(f64::NAN));
    let ll = id.iw_ll.unwrap_or(f64::NAN);
    check(
        au_id == PINWHEEL_AU_ID
            && au_b <= PINWHEEL_AU_BASE_MAX
            && (ll - PINWHEEL_LL_TARGET).abs() <= PINWHEEL_LL_TOL
            && out.diverged.is_empty()
            && t < PINWHEEL_TIME,
        format!("IDGMVAE AU {au_id:.2}, IW-LL {ll:.3}; baseline GMVAE AU {au_b:.2}; {:.1}s", t.as_secs_f64()),
    )
}

fn criterion7() -> Outcome {
    let err = |e: idvae::Error| e.to_string();
    let overlap = gen_gmvae_synthetic(GMVAE_N, GMVAE_K, 0.0, SEED).map_err(err)?;
    let collapsed = GmvaeOracle::one_cluster_equivalent(&overlap, GMVAE_K).map_err(err)?;
    let tv = summarize(&collapsed.cluster_posterior(&overlap.x).map_err(err)?).max_tv_from_uniform;
    let separated = gen_gmvae_synthetic(GMVAE_N, GMVAE_K, 10.0, SEED).map_err(err)?;
    let truth = GmvaeOracle::truth(GMVAE_K, 10.0).map_err(err)?;
    let maxp = summarize(&truth.cluster_posterior(&separated.x).map_err(err)?).mean_max_prob;
    check(tv <= TV_MAX && maxp >= MAX_PROB_MIN, format!("separation 0: max TV from uniform {tv:.2e}; separation 10: mean max-prob {maxp:.4}"))
}

fn read_outputs(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .map(|it| {
            it.filter_map(|e| e.ok())
                .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap_or_default()))
                .collect()
        })
        .unwrap_or_default()
}

fn criterion8() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for sub in ["pinwheel", "appendix-a"] {
        let mut runs = Vec::new();
        for _ in 0..2 {
            let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
            let status = Command::new(env!("CARGO_BIN_EXE_idvae"))
                .args(["repro", sub, "--seed", "7", "--out"])
                .arg(dir.path())
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!("repro {sub} failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
            runs.push(read_outputs(dir.path()));
        }
        let csvs: Vec<&String> = runs[0].keys().filter(|k| k.ends_with(".csv")).collect();
        let same = !csvs.is_empty() && runs[0] == runs[1];
        ok &= same;
        details.push(format!("repro {sub}: {} CSVs {}", csvs.len(), if same { "identical" } else { "DIFFER" }));
    }
    check(ok, details.join("; "))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("flatness-KL equivalence on GMM oracle", criterion1),
        ("PPCA collapse by dimension", criterion2),
        ("PPCA noise sweep", criterion3),
        ("ICNN/Brenier invariants", criterion4),
        ("estimators vs PPCA oracle", criterion5),
        ("pinwheel reproduction", criterion6),
        ("GMVAE cluster-posterior scenarios", criterion7),
        ("repro determinism", criterion8),
    ];
    // `cargo test -- <filter>` passes a filter; run only criteria whose number matches.
    let filter: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if filter.as_ref().is_some_and(|f| f != &n.to_string()) {
            continue;
        }
        match f() {
            Ok(d) => println!("criterion {n} PASS  {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} FAIL  {name}: {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
