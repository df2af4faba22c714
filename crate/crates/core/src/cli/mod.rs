//! Command-line front end. Every emitted file carries a provenance header;
//! exit codes are 0 (success), 1 (runtime failure) and 2 (usage error).

pub mod checkpoint;
pub mod output;
pub mod repro;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use output::{svg_lines, svg_scatter, OutDir, RunConfig, ARTIFACT_VERSION, OUT_ENV};
pub use repro::{GmmOptions, PinwheelOptions, PpcaOptions};

use crate::data::{
    gen_gmvae_synthetic, gen_pinwheel, gen_sequences, load_idx, Dataset, PinwheelConfig, SequenceConfig,
};
use crate::decoder::Family;
use crate::diagnostics::{diagnose, DiagnoseOptions};
use crate::error::{Error, Result};
use crate::inference::{init_encoder, train, TrainConfig};
use crate::models::{build_model, KlMode, ModelSpec};
use crate::oracles::ppca::{collapsed_loading, PpcaModel};

#[derive(Parser, Debug)]
#[command(name = "idvae", version, about = "Latent-identifiable VAEs, collapse diagnostics and exact-inference oracles")]
struct Cli {
    /// Seed for every random stream of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: $IDVAE_OUT, else ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON object whose keys override the subcommand's options (and `seed`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate or convert a dataset to CSV.
    GenData(GenDataArgs),
    /// Train a model on a CSV dataset and write a checkpoint.
    Train(TrainArgs),
    /// Compute collapse diagnostics for a checkpoint on a dataset.
    Diagnose(DiagnoseArgs),
    /// Exact-inference reference experiments.
    #[command(subcommand)]
    Oracle(OracleCommand),
    /// End-to-end reproductions.
    #[command(subcommand)]
    Repro(ReproCommand),
}

#[derive(Subcommand, Debug)]
enum OracleCommand {
    /// PPCA dimension collapse and noise sweep.
    Ppca(PpcaArgs),
    /// Mixture-weight posterior scenarios.
    Gmm(GmmArgs),
}

#[derive(Subcommand, Debug)]
enum ReproCommand {
    /// Baseline GMVAE vs IDGMVAE on pinwheel data.
    Pinwheel(PinwheelArgs),
    /// PPCA and mixture-weight reference experiments.
    AppendixA(AppendixArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum DataKind {
    Pinwheel,
    GmvaeSynth,
    Sequences,
    Ppca,
    Idx,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "pinwheel")]
    kind: DataKind,
    #[arg(long, default_value_t = 2500)]
    n: usize,
    /// Clusters (gmvae-synth) or pinwheel arms.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 10.0)]
    separation: f64,
    /// Sequence length (sequences).
    #[arg(long, default_value_t = 10)]
    length: usize,
    #[arg(long, default_value_t = 10)]
    vocab: usize,
    /// IDX file to convert (idx).
    #[arg(long)]
    path: Option<PathBuf>,
    #[arg(long, default_value = "data.csv")]
    name: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModelKind {
    Idvae,
    Idgmvae,
    Idsvae,
    Vae,
    Gmvae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum FamilyArg {
    Gaussian,
    Bernoulli,
    Categorical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum KlArg {
    Analytic,
    Sampled,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "idvae")]
    model: ModelKind,
    /// Latent size (continuous) or number of clusters (mixtures).
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// Continuous latent size of mixture models.
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// History state size (idsvae).
    #[arg(long, default_value_t = 8)]
    h: usize,
    /// Vocabulary size (idsvae); the data width must be vocab × length.
    #[arg(long, default_value_t = 10)]
    vocab: usize,
    #[arg(long, value_enum)]
    family: Option<FamilyArg>,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1.0)]
    beta_weight: f64,
    #[arg(long, value_enum, default_value = "analytic")]
    kl_mode: KlArg,
    /// Standardize columns before training (stored in the checkpoint).
    #[arg(long)]
    standardize: bool,
    #[arg(long, default_value = "checkpoint.json")]
    name: String,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "model")]
    label: String,
    #[arg(long, default_value_t = 100)]
    iw_k: usize,
    #[arg(long, default_value_t = 1)]
    mi_samples: usize,
    #[arg(long, default_value = "report.csv")]
    name: String,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PpcaArgs {
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 2.0)]
    loading_norm: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma_bar: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.5, 1.0, 1.5])]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = crate::oracles::ppca::SWEEP_ROW_NORM)]
    sweep_norm: f64,
    #[arg(long, default_value_t = 500)]
    sweep_n: usize,
}

impl PpcaArgs {
    fn options(&self) -> PpcaOptions {
        PpcaOptions {
            n: self.n,
            loading_norm: self.loading_norm,
            sigma_bar: self.sigma_bar,
            sigmas: self.sigmas.clone(),
            sweep_norm: self.sweep_norm,
            sweep_n: self.sweep_n,
        }
    }
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GmmArgs {
    /// 1 (separated), 2 (overlapping), 3 (identical components) or 0 for all.
    #[arg(long, default_value_t = 0)]
    scenario: usize,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = crate::oracles::gmm::DEFAULT_NODES)]
    nodes: usize,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PinwheelArgs {
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 2500)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
    #[arg(long, default_value_t = 8)]
    baseline_m: usize,
    #[arg(long, default_value_t = 100)]
    iw_k: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
}

#[derive(Args, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AppendixArgs {
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 2.0)]
    loading_norm: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma_bar: f64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.5, 1.0, 1.5])]
    sigmas: Vec<f64>,
    #[arg(long, default_value_t = crate::oracles::ppca::SWEEP_ROW_NORM)]
    sweep_norm: f64,
    #[arg(long, default_value_t = 500)]
    sweep_n: usize,
    #[arg(long, default_value_t = 100_000)]
    gmm_n: usize,
    #[arg(long, default_value_t = crate::oracles::gmm::DEFAULT_NODES)]
    nodes: usize,
}

impl AppendixArgs {
    fn ppca_options(&self) -> PpcaOptions {
        PpcaOptions {
            n: self.n,
            loading_norm: self.loading_norm,
            sigma_bar: self.sigma_bar,
            sigmas: self.sigmas.clone(),
            sweep_norm: self.sweep_norm,
            sweep_n: self.sweep_n,
        }
    }
}

/// Applies the JSON object in `config` on top of `args`; `seed` is taken out first.
fn merge_config<T: Serialize + DeserializeOwned>(args: T, seed: &mut Option<u64>, config: Option<&Path>) -> Result<T> {
    let Some(path) = config else { return Ok(args) };
    let text = std::fs::read_to_string(path)?;
    let serde_json::Value::Object(mut overrides) = serde_json::from_str(&text)? else {
        return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
    };
    if let Some(s) = overrides.remove("seed") {
        *seed = Some(s.as_u64().ok_or_else(|| Error::Config("`seed` must be a non-negative integer".into()))?);
    }
    overrides.remove("out");
    let mut value = serde_json::to_value(&args)?;
    let obj = value.as_object_mut().expect("argument structs serialize to objects");
    for (k, v) in overrides {
        obj.insert(k, v);
    }
    serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::read_csv(&std::fs::read_to_string(path)?)
}

fn default_out() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out"))
}

/// Stable name of an error kind for the structured error line.
pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Shape(_) => "shape",
        Error::Op { .. } => "op",
        Error::NonFinite { .. } => "non_finite",
        Error::Unbound(_) => "unbound",
        Error::NonScalarOutput(_) => "non_scalar_output",
        Error::Constraint(_) => "constraint",
        Error::Config(_) => "config",
        Error::Numeric { .. } => "numeric",
        Error::Diverged { .. } => "diverged",
        Error::Parse { .. } => "parse",
        Error::Checkpoint(_) => "checkpoint",
        Error::Unsupported(_) => "unsupported",
        Error::Io(_) => "io",
        Error::Json(_) => "json",
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": error_kind(&e), "message": e.to_string() }));
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut seed = cli.seed;
    let config = cli.config.as_deref();
    let mut dir = OutDir::create(&cli.out.clone().unwrap_or_else(default_out))?;
    match cli.command {
        Command::GenData(a) => {
            let a = merge_config(a, &mut seed, config)?;
            let seed = seed.unwrap_or(0);
            let run = RunConfig { command: "gen-data".into(), seed, params: serde_json::to_value(&a)? };
            let data = match a.kind {
                DataKind::Pinwheel => gen_pinwheel(&PinwheelConfig { n: a.n, arms: a.k, ..Default::default() }, seed)?,
                DataKind::GmvaeSynth => gen_gmvae_synthetic(a.n, a.k, a.separation, seed)?,
                DataKind::Sequences => gen_sequences(&SequenceConfig { n: a.n, length: a.length, vocab: a.vocab, ..Default::default() }, seed)?,
                DataKind::Ppca => PpcaModel::new(collapsed_loading(5, 2.0), 0.25)?.sample(a.n, seed)?,
                DataKind::Idx => load_idx(a.path.as_ref().ok_or_else(|| Error::Config("--path is required for idx".into()))?)?,
            };
            let mut body = Vec::new();
            data.write_csv(&mut body)?;
            let path = dir.csv(&a.name, &run, &String::from_utf8_lossy(&body))?;
            println!("wrote {} rows × {} columns to {}", data.len(), data.dim(), path.display());
        }
        Command::Train(a) => {
            let a = merge_config(a, &mut seed, config)?;
            let seed = seed.unwrap_or(0);
            let run = RunConfig { command: "train".into(), seed, params: serde_json::to_value(&a)? };
            let raw = read_dataset(&a.data)?;
            let standardization = a.standardize.then(|| raw.column_standardization());
            let data = standardization.as_ref().map_or_else(|| raw.clone(), |s| raw.standardized(s));
            let d = data.dim();
            let mut spec = match a.model {
                ModelKind::Idvae => ModelSpec::idvae(a.k, d),
                ModelKind::Idgmvae => ModelSpec::idgmvae(a.k, a.m, d),
                ModelKind::Idsvae => {
                    if a.vocab == 0 || d % a.vocab != 0 {
                        return Err(Error::Shape(format!("data width {d} is not a multiple of vocab {}", a.vocab)));
                    }
                    ModelSpec::idsvae(a.k, a.h, a.vocab, d / a.vocab)
                }
                ModelKind::Vae => ModelSpec::baseline_vae(a.k, d),
                ModelKind::Gmvae => ModelSpec::baseline_gmvae(a.k, a.m, d),
            };
            if let Some(f) = a.family {
                spec.family = match f {
                    FamilyArg::Gaussian => Family::Gaussian,
                    FamilyArg::Bernoulli => Family::Bernoulli,
                    FamilyArg::Categorical => Family::Categorical,
                };
            }
            let model = build_model(&spec, seed)?;
            let enc = init_encoder(&model, &data, seed.wrapping_add(1));
            let kl_mode = match a.kl_mode {
                KlArg::Analytic => KlMode::Analytic,
                KlArg::Sampled => KlMode::Sampled,
            };
            let cfg = TrainConfig { epochs: a.epochs, batch: a.batch, lr: a.lr, beta_weight: a.beta_weight, seed, kl_mode, ..Default::default() };
            let t = train(&model, &enc, &data, &cfg)?;
            let mut ck = Checkpoint::from_trained(&t, run.to_json());
            ck.standardization = standardization;
            let path = dir.root.join(&a.name);
            save_checkpoint(&path, &ck)?;
            let mut trace = String::from("epoch,elbo,kl,recon\n");
            for r in &t.trace.records {
                trace.push_str(&format!("{},{},{},{}\n", r.epoch, r.elbo, r.kl, r.recon));
            }
            dir.csv("trace.csv", &run, &trace)?;
            if let Some(last) = t.trace.records.last() {
                println!("epoch {}: elbo {:.4}, kl {:.4}", last.epoch, last.elbo, last.kl);
            }
            println!("wrote {}", path.display());
            if let Some(e) = t.diverged {
                return Err(e);
            }
        }
        Command::Diagnose(a) => {
            let a = merge_config(a, &mut seed, config)?;
            let seed = seed.unwrap_or(0);
            let run = RunConfig { command: "diagnose".into(), seed, params: serde_json::to_value(&a)? };
            let ck = load_checkpoint(&a.checkpoint)?;
            let raw = read_dataset(&a.data)?;
            let (x, offset) = match &ck.standardization {
                Some(s) => (s.apply(&raw.x), s.log_jacobian()),
                None => (raw.x.clone(), 0.0),
            };
            let opts = DiagnoseOptions { iw_k: a.iw_k, mi_samples: a.mi_samples, ll_offset: offset, seed, ..Default::default() };
            let r = diagnose(&a.label, &ck.model, &ck.encoder, &x, &opts)?;
            dir.csv(&a.name, &run, &repro::reports_csv(std::slice::from_ref(&r)))?;
            println!("{}", r.summary());
        }
        Command::Oracle(OracleCommand::Ppca(a)) => {
            let a = merge_config(a, &mut seed, config)?;
            let seed = seed.unwrap_or(0);
            let run = RunConfig { command: "oracle ppca".into(), seed, params: serde_json::to_value(&a)? };
            let (collapse, rows) = repro::write_ppca(&mut dir, &run, &a.options(), seed)?;
            print_ppca(&collapse, &rows);
        }
        Command::Oracle(OracleCommand::Gmm(a)) => {
            let a = merge_config(a, &mut seed, config)?;
            let seed = seed.unwrap_or(0);
            let run = RunConfig { command: "oracle gmm".into(), seed, params: serde_json::to_value(&a)? };
            let opts = GmmOptions { scenario: a.scenario, n: a.n, nodes: a.nodes };
            for r in repro::write_gmm(&mut dir, &run, &opts, seed)? {
                print_gmm(&r);
            }
        }
        Command::Repro(ReproCommand::Pinwheel(a)) => {
            let a = merge_config(a, &mut seed, config)?;
            let seed = seed.unwrap_or(0);
            let run = RunConfig { command: "repro pinwheel".into(), seed, params: serde_json::to_value(&a)? };
            let opts = PinwheelOptions {
                epochs: a.epochs,
                n_train: a.n_train,
                n_test: a.n_test,
                baseline_m: a.baseline_m,
                iw_k: a.iw_k,
                batch: a.batch,
                lr: a.lr,
            };
            let outcome = repro::write_pinwheel(&mut dir, &run, &opts, seed)?;
            for r in &outcome.reports {
                println!("{}", r.summary());
            }
            for d in &outcome.diverged {
                eprintln!("warning: {d}");
            }
        }
        Command::Repro(ReproCommand::AppendixA(a)) => {
            let a = merge_config(a, &mut seed, config)?;
            let seed = seed.unwrap_or(0);
            let run = RunConfig { command: "repro appendix-a".into(), seed, params: serde_json::to_value(&a)? };
            let (collapse, rows) = repro::write_ppca(&mut dir, &run, &a.ppca_options(), seed)?;
            print_ppca(&collapse, &rows);
            for r in repro::write_gmm(&mut dir, &run, &GmmOptions { scenario: 0, n: a.gmm_n, nodes: a.nodes }, seed)? {
                print_gmm(&r);
            }
        }
    }
    for p in &dir.written {
        println!("  {}", p.display());
    }
    Ok(())
}

fn print_ppca(c: &repro::DimensionCollapse, rows: &[crate::oracles::ppca::SweepRow]) {
    for k in 0..2 {
        println!("ppca dim {}: max |mean| {:.3e}, variance {:.6}", k + 1, c.max_abs_mean[k], c.variance[k]);
    }
    for r in rows {
        println!("ppca sigma {}: KL {:.5}, flatness {:.4}", r.sigma, r.kl, r.flatness);
    }
}

fn print_gmm(r: &crate::oracles::gmm::GmmReport) {
    println!(
        "gmm {}: mode {:.4}, flatness {:.3e}, KL {:.3e}, verdict {}",
        r.scenario.name, r.mode, r.probe.flatness, r.probe.kl, r.probe.verdict
    );
}
