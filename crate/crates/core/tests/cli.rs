use std::path::Path;
use std::process::{Command, Output};

use idvae::cli::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
use idvae::inference::{OptimizerState, RngState, TrainTrace};
use idvae::models::{build_model, Encoder, ModelSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn idvae(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idvae")).args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn usage_errors_exit_2_runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(idvae(&["train", "--no-such-flag"], dir.path()).status.code(), Some(2));
    assert_eq!(idvae(&["frobnicate"], dir.path()).status.code(), Some(2));
    let missing = idvae(&["diagnose", "--checkpoint", "nope.json", "--data", "nope.csv"], dir.path());
    assert_eq!(missing.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(missing.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "io");
    assert_eq!(Command::new(env!("CARGO_BIN_EXE_idvae")).arg("--help").output().unwrap().status.code(), Some(0));
}

#[test]
fn gen_train_diagnose_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let g = idvae(&["gen-data", "--kind", "pinwheel", "--n", "200", "--seed", "3"], d);
    assert!(g.status.success(), "{}", String::from_utf8_lossy(&g.stderr));
    let data = std::fs::read_to_string(d.join("data.csv")).unwrap();
    assert!(data.starts_with("# idvae "));
    assert!(data.contains("# command: gen-data"));

    let data_path = d.join("data.csv");
    let t = idvae(
        &["train", "--data", data_path.to_str().unwrap(), "--model", "idgmvae", "--epochs", "3", "--batch", "50", "--standardize"],
        d,
    );
    assert!(t.status.success(), "{}", String::from_utf8_lossy(&t.stderr));
    let ck_path = d.join("checkpoint.json");
    let ck = load_checkpoint(&ck_path).unwrap();
    assert_eq!(ck.version, CHECKPOINT_VERSION);
    assert_eq!(ck.trace.records.len(), 3);
    assert!(ck.standardization.is_some());
    assert_eq!(ck.provenance["command"], "train");

    // Save → load → save is byte-identical.
    let first = std::fs::read_to_string(&ck_path).unwrap();
    let again = d.join("again.json");
    save_checkpoint(&again, &load_checkpoint(&ck_path).unwrap()).unwrap();
    assert_eq!(std::fs::read_to_string(&again).unwrap(), first);

    let r = idvae(&["diagnose", "--checkpoint", ck_path.to_str().unwrap(), "--data", data_path.to_str().unwrap(), "--iw-k", "10"], d);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report = std::fs::read_to_string(d.join("report.csv")).unwrap();
    assert!(report.lines().any(|l| l.starts_with("label,au,kl")));
    assert!(stdout(&r).contains("AU="));
}

#[test]
fn hand_edited_negative_weight_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data_path = d.join("data.csv");
    assert!(idvae(&["gen-data", "--kind", "pinwheel", "--n", "100"], d).status.success());
    assert!(idvae(&["train", "--data", data_path.to_str().unwrap(), "--epochs", "1"], d).status.success());
    let text = std::fs::read_to_string(d.join("checkpoint.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    // The first stage's second ICNN layer carries the constrained weights.
    let w1 = &mut v["model"]["decoder"]["Injective"]["first"]["w"][1]["values"][0];
    assert!(w1.is_number());
    *w1 = serde_json::json!(-1.0);
    let bad = d.join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let err = load_checkpoint(&bad).unwrap_err().to_string();
    assert!(err.contains("W1") && err.contains("negative"), "{err}");
    let r = idvae(&["diagnose", "--checkpoint", bad.to_str().unwrap(), "--data", data_path.to_str().unwrap()], d);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn prior_only_model_is_diagnosed_as_collapsed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(idvae(&["gen-data", "--kind", "pinwheel", "--n", "300"], d).status.success());
    let model = build_model(&ModelSpec::idvae(2, 2), 0).unwrap();
    let encoder = Encoder::constant(2, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        provenance: serde_json::json!({ "prior_only": true }),
        spec: model.spec.clone(),
        model,
        encoder,
        optimizer: OptimizerState::adam(1e-3),
        rng: RngState::capture(0, &ChaCha8Rng::seed_from_u64(0)),
        trace: TrainTrace { seed: 0, config_hash: String::new(), records: vec![] },
        standardization: None,
        diverged: None,
    };
    let ck_path = d.join("prior.json");
    save_checkpoint(&ck_path, &ck).unwrap();
    let r = idvae(
        &["diagnose", "--checkpoint", ck_path.to_str().unwrap(), "--data", d.join("data.csv").to_str().unwrap(), "--iw-k", "0"],
        d,
    );
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report = std::fs::read_to_string(d.join("report.csv")).unwrap();
    let row: Vec<&str> = report.lines().last().unwrap().split(',').collect();
    assert_eq!(row[1].parse::<f64>().unwrap(), 0.0, "AU");
    assert!(row[2].parse::<f64>().unwrap().abs() < 1e-12, "KL");
    assert_eq!(row[6], "collapsed");
}

#[test]
fn config_file_overrides_flags_and_env_sets_default_out() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("cfg.json");
    std::fs::write(&cfg, r#"{"scenario": 3, "n": 2000, "nodes": 256, "seed": 5}"#).unwrap();
    let out = d.join("from_env");
    let r = Command::new(env!("CARGO_BIN_EXE_idvae"))
        .args(["oracle", "gmm", "--scenario", "1", "--config"])
        .arg(&cfg)
        .env(idvae::cli::OUT_ENV, &out)
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let summary = std::fs::read_to_string(out.join("gmm_summary.csv")).unwrap();
    assert!(summary.contains("# seed: 5"));
    assert!(summary.contains("degenerate,2000"));
    assert!(stdout(&r).contains("collapsed"));

    std::fs::write(&cfg, r#"{"no_such_option": 1}"#).unwrap();
    let bad = idvae(&["oracle", "gmm", "--config", cfg.to_str().unwrap()], d);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn oracle_ppca_writes_figure_data() {
    let dir = tempfile::tempdir().unwrap();
    let r = idvae(&["oracle", "ppca", "--sigmas", "0.5,1.5", "--sweep-n", "50"], dir.path());
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let sweep = std::fs::read_to_string(dir.path().join("ppca_noise_sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "sigma,kl,flatness");
    assert_eq!(rows.len(), 3);
    assert!(std::fs::read_to_string(dir.path().join("ppca_posterior_z1.svg")).unwrap().contains("<svg"));
}
