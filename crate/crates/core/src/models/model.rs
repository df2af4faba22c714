use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::history::HistoryEmbedder;
use super::mlp::{Mlp, MlpVars};
use super::spec::{LatentKind, ModelSpec, Variant};
use crate::data::{Dataset, Provenance};
use crate::decoder::{DecoderVars, ExpFamilyHead, Family, InjectiveDecoder};
use crate::diffcore::{logsumexp, sigmoid, Bindings, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::icnn::project_convex_in_place;

/// Distribution of the continuous code `w` that enters the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bridge {
    /// `w = z ~ N(0, I)`.
    StandardNormal { dim: usize },
    /// `z ~ N(0, I_k)`, `w | z ~ N(βᵀz, diag exp(log_var))`; marginally
    /// `w ~ N(0, diag(1[j<k] + exp(log_var_j)))`.
    GaussianLinear { k: usize, log_var: Tensor },
    /// `z ~ Categorical(1/K)`, `w | z ~ N(means[z], diag exp(log_vars[z]))`.
    Mixture { means: Tensor, log_vars: Tensor, learn_means: bool },
}

impl Bridge {
    pub fn code_dim(&self) -> usize {
        match self {
            Bridge::StandardNormal { dim } => *dim,
            Bridge::GaussianLinear { log_var, .. } => log_var.len(),
            Bridge::Mixture { means, .. } => means.cols(),
        }
    }

    /// Number of categories for a categorical latent.
    pub fn categories(&self) -> Option<usize> {
        match self {
            Bridge::Mixture { means, .. } => Some(means.rows()),
            _ => None,
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        match self {
            Bridge::StandardNormal { .. } => vec![],
            Bridge::GaussianLinear { log_var, .. } => vec![(format!("{prefix}.log_var"), log_var)],
            Bridge::Mixture { means, log_vars, learn_means } => {
                let mut out = vec![(format!("{prefix}.log_vars"), log_vars)];
                if *learn_means {
                    out.push((format!("{prefix}.means"), means));
                }
                out
            }
        }
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        match self {
            Bridge::StandardNormal { .. } => vec![],
            Bridge::GaussianLinear { log_var, .. } => vec![(format!("{prefix}.log_var"), log_var)],
            Bridge::Mixture { means, log_vars, learn_means } => {
                let mut out = vec![(format!("{prefix}.log_vars"), log_vars)];
                if *learn_means {
                    out.push((format!("{prefix}.means"), means));
                }
                out
            }
        }
    }

    /// Per-component means and log-variances of `p(w | z = c)`; a single
    /// component for continuous latents (the marginal of `w`).
    pub fn components(&self) -> (Tensor, Tensor) {
        match self {
            Bridge::StandardNormal { dim } => (Tensor::zeros(vec![1, *dim]), Tensor::zeros(vec![1, *dim])),
            Bridge::GaussianLinear { k, log_var } => {
                let m = log_var.len();
                let lv = log_var
                    .values()
                    .iter()
                    .enumerate()
                    .map(|(j, l)| (if j < *k { 1.0 } else { 0.0 } + l.exp()).ln())
                    .collect();
                (Tensor::zeros(vec![1, m]), Tensor::matrix(1, m, lv).expect("sized"))
            }
            Bridge::Mixture { means, log_vars, .. } => (means.clone(), log_vars.clone()),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Bridge::StandardNormal { dim } if *dim == 0 => Err(Error::Shape("empty latent".into())),
            Bridge::GaussianLinear { k, log_var } if log_var.rank() != 1 || log_var.len() < *k => {
                Err(Error::Shape(format!("bridge log-variance {:?} cannot embed {} latents", log_var.shape(), k)))
            }
            Bridge::Mixture { means, log_vars, .. } if means.rank() != 2 || means.shape() != log_vars.shape() => {
                Err(Error::Shape(format!("mixture means {:?} vs log-variances {:?}", means.shape(), log_vars.shape())))
            }
            _ => Ok(()),
        }
    }

    /// Draws `n` codes; returns `(w, ground-truth latents, labels)`.
    fn sample(&self, n: usize, rng: &mut impl Rng) -> (Tensor, Tensor, Option<Vec<usize>>) {
        let m = self.code_dim();
        let mut w = Vec::with_capacity(n * m);
        match self {
            Bridge::StandardNormal { .. } => {
                w.extend((0..n * m).map(|_| -> f64 { StandardNormal.sample(rng) }));
                let w = Tensor::matrix(n, m, w).expect("sized");
                (w.clone(), w, None)
            }
            Bridge::GaussianLinear { k, log_var } => {
                let mut z = Vec::with_capacity(n * k);
                for _ in 0..n {
                    let zi: Vec<f64> = (0..*k).map(|_| StandardNormal.sample(rng)).collect();
                    for j in 0..m {
                        let e: f64 = StandardNormal.sample(rng);
                        let mean = if j < *k { zi[j] } else { 0.0 };
                        w.push(mean + (0.5 * log_var.values()[j]).exp() * e);
                    }
                    z.extend(zi);
                }
                (Tensor::matrix(n, m, w).expect("sized"), Tensor::matrix(n, *k, z).expect("sized"), None)
            }
            Bridge::Mixture { means, log_vars, .. } => {
                let kk = means.rows();
                let mut labels = Vec::with_capacity(n);
                let mut onehot = Vec::with_capacity(n * kk);
                for _ in 0..n {
                    let c = rng.random_range(0..kk);
                    for j in 0..m {
                        let e: f64 = StandardNormal.sample(rng);
                        w.push(means.get2(c, j) + (0.5 * log_vars.get2(c, j)).exp() * e);
                    }
                    onehot.extend((0..kk).map(|i| if i == c { 1.0 } else { 0.0 }));
                    labels.push(c);
                }
                (Tensor::matrix(n, m, w).expect("sized"), Tensor::matrix(n, kk, onehot).expect("sized"), Some(labels))
            }
        }
    }
}

/// Map from the decoder input to the emission's natural parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum DecoderNet {
    Injective(InjectiveDecoder),
    Mlp { net: Mlp, head: ExpFamilyHead },
}

pub enum DecoderNetVars {
    Injective(DecoderVars),
    Mlp { net: MlpVars, log_var: Option<Var> },
}

impl DecoderNet {
    pub fn head(&self) -> &ExpFamilyHead {
        match self {
            DecoderNet::Injective(d) => &d.head,
            DecoderNet::Mlp { head, .. } => head,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            DecoderNet::Injective(d) => d.input_dim(),
            DecoderNet::Mlp { net, .. } => net.input_dim(),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            DecoderNet::Injective(d) => d.output_dim(),
            DecoderNet::Mlp { net, .. } => net.output_dim(),
        }
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        match self {
            DecoderNet::Injective(d) => d.named_params(prefix),
            DecoderNet::Mlp { net, head } => {
                let mut out = net.named_params(&format!("{prefix}.mlp"));
                if head.is_trainable() {
                    out.push((format!("{prefix}.log_var"), &head.log_var));
                }
                out
            }
        }
    }

    pub fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        match self {
            DecoderNet::Injective(d) => d.named_params_mut(prefix),
            DecoderNet::Mlp { net, head } => {
                let trainable = head.is_trainable();
                let mut out = net.named_params_mut(&format!("{prefix}.mlp"));
                if trainable {
                    out.push((format!("{prefix}.log_var"), &mut head.log_var));
                }
                out
            }
        }
    }

    pub fn declare(&self, tape: &mut Tape, prefix: &str) -> DecoderNetVars {
        match self {
            DecoderNet::Injective(d) => DecoderNetVars::Injective(d.declare(tape, prefix)),
            DecoderNet::Mlp { net, head } => DecoderNetVars::Mlp {
                net: net.declare(tape, &format!("{prefix}.mlp")),
                log_var: head.is_trainable().then(|| tape.input(&format!("{prefix}.log_var"))),
            },
        }
    }

    /// Natural parameters for every row of `input`.
    pub fn eta_batch(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            DecoderNet::Injective(d) => d.decode_batch(input),
            DecoderNet::Mlp { net, .. } => net.forward(input),
        }
    }
}

impl DecoderNetVars {
    pub fn eta(&self, tape: &mut Tape, input: Var, ones: Var, batch: usize) -> Var {
        match self {
            DecoderNetVars::Injective(d) => d.decode(tape, input, ones, batch),
            DecoderNetVars::Mlp { net, .. } => net.forward(tape, input, ones),
        }
    }

    pub fn log_var(&self) -> Option<Var> {
        match self {
            DecoderNetVars::Injective(d) => d.log_var,
            DecoderNetVars::Mlp { log_var, .. } => *log_var,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub spec: ModelSpec,
    pub bridge: Bridge,
    pub decoder: DecoderNet,
    pub history: Option<HistoryEmbedder>,
}

pub const DECODER_PREFIX: &str = "dec";
pub const BRIDGE_PREFIX: &str = "prior";
pub const HISTORY_PREFIX: &str = "hist";

/// Smallest hidden width `h` for which an MLP with `layers` hidden layers of
/// width `h` has at least `target` parameters.
pub fn matched_width(target: usize, input: usize, output: usize, layers: usize) -> usize {
    let count = |h: usize| input * h + h + (layers.saturating_sub(1)) * (h * h + h) + h * output + output;
    (1..).find(|&h| count(h) >= target).expect("unbounded search")
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = match spec.family {
        Family::Gaussian => ExpFamilyHead::gaussian(spec.emission_var),
        Family::Bernoulli => ExpFamilyHead::bernoulli(),
        Family::Categorical => ExpFamilyHead::categorical(),
    };
    let lv = spec.bridge_var.ln();
    let bridge = match (spec.variant, spec.latent) {
        (Variant::IdVae | Variant::IdSVae | Variant::BaselineVae, _) => Bridge::StandardNormal { dim: spec.k },
        (Variant::GeneralIdVae, LatentKind::Continuous) => {
            Bridge::GaussianLinear { k: spec.k, log_var: Tensor::filled(vec![spec.m], lv) }
        }
        (Variant::IdGmVae | Variant::GeneralIdVae, _) => {
            // Component means are the fixed embeddings βᵀ e_k.
            let mut means = Tensor::zeros(vec![spec.k, spec.m]);
            for c in 0..spec.k {
                means.set2(c, c, 1.0);
            }
            Bridge::Mixture { means, log_vars: Tensor::filled(vec![spec.k, spec.m], lv), learn_means: false }
        }
        (Variant::BaselineGmVae, _) => {
            let normal = Normal::new(0.0f64, 1.0).expect("unit std");
            let means = Tensor::matrix(spec.k, spec.m, (0..spec.k * spec.m).map(|_| normal.sample(&mut rng)).collect())?;
            Bridge::Mixture { means, log_vars: Tensor::filled(vec![spec.k, spec.m], lv), learn_means: true }
        }
    };
    let input = spec.decoder_input();
    let decoder = if spec.variant.is_identifiable() {
        DecoderNet::Injective(InjectiveDecoder::two_stage(input, spec.d, &spec.decoder_hidden, spec.quadratic, head, &mut rng)?)
    } else {
        // Same parameter budget as the injective decoder of matching shape.
        let reference = InjectiveDecoder::two_stage(input, spec.d.max(input), &spec.decoder_hidden, 0.0, head.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let target: usize = reference.maps().map(|m| m.num_params()).sum();
        let layers = spec.decoder_hidden.len().max(1);
        let width = matched_width(target, input, spec.d, layers);
        DecoderNet::Mlp { net: Mlp::init(input, &vec![width; layers], spec.d, &mut rng), head }
    };
    let history = (spec.h > 0).then(|| HistoryEmbedder::init(spec.d, spec.h, &mut rng));
    let model = Model { spec: spec.clone(), bridge, decoder, history };
    model.validate()?;
    Ok(model)
}

impl Model {
    pub fn head(&self) -> &ExpFamilyHead {
        self.decoder.head()
    }

    pub fn code_dim(&self) -> usize {
        self.bridge.code_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.bridge.validate()?;
        if self.spec.variant.is_identifiable() != matches!(self.decoder, DecoderNet::Injective(_)) {
            return Err(Error::Config(format!(
                "{} must {}use an injective decoder",
                self.spec.variant.name(),
                if self.spec.variant.is_identifiable() { "" } else { "not " }
            )));
        }
        match &self.decoder {
            DecoderNet::Injective(d) => d.validate()?,
            DecoderNet::Mlp { net, .. } => net.validate()?,
        }
        if self.decoder.input_dim() != self.spec.decoder_input() || self.decoder.output_dim() != self.spec.d {
            return Err(Error::Shape(format!(
                "decoder maps {} -> {}, spec needs {} -> {}",
                self.decoder.input_dim(),
                self.decoder.output_dim(),
                self.spec.decoder_input(),
                self.spec.d
            )));
        }
        if self.code_dim() != self.spec.m {
            return Err(Error::Shape(format!("latent code has dimension {}, spec says {}", self.code_dim(), self.spec.m)));
        }
        match (&self.history, self.spec.h) {
            (None, 0) => {}
            (Some(f), h) if f.state_dim() == h && f.vocab() == self.spec.d => f.validate()?,
            _ => return Err(Error::Shape("history embedder does not match the spec".into())),
        }
        Ok(())
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.decoder.named_params(DECODER_PREFIX);
        out.extend(self.bridge.named_params(BRIDGE_PREFIX));
        if let Some(f) = &self.history {
            out.extend(f.named_params(HISTORY_PREFIX));
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.decoder.named_params_mut(DECODER_PREFIX);
        out.extend(self.bridge.named_params_mut(BRIDGE_PREFIX));
        if let Some(f) = &mut self.history {
            out.extend(f.named_params_mut(HISTORY_PREFIX));
        }
        out
    }

    pub fn bind(&self, bindings: &mut Bindings) {
        for (name, t) in self.named_params() {
            bindings.insert(name, t.clone());
        }
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Restores feasibility of every ICNN (`W_l ≥ 0`).
    pub fn project(&mut self) {
        if let DecoderNet::Injective(d) = &mut self.decoder {
            for m in d.maps_mut() {
                project_convex_in_place(m);
            }
        }
    }

    /// Ancestral sampling; ground-truth latents (and labels for categorical
    /// latents) are kept on the dataset.
    pub fn generate(&self, n: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        if n == 0 {
            return Err(Error::Config("cannot generate an empty dataset".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, latents, labels) = self.bridge.sample(n, &mut rng);
        let (d, t) = (self.spec.d, self.spec.seq_len);
        let mut x = Tensor::zeros(vec![n, d * t]);
        let mut states: Vec<Vec<f64>> = match &self.history {
            Some(f) => vec![f.empty(); n],
            None => vec![],
        };
        for pos in 0..t {
            let input = match &self.history {
                None => w.clone(),
                Some(_) => {
                    let rows: Vec<Vec<f64>> = (0..n).map(|i| [w.row(i), &states[i][..]].concat()).collect();
                    Tensor::from_rows(&rows)?
                }
            };
            let eta = self.decoder.eta_batch(&input)?;
            for i in 0..n {
                let sample = sample_emission(self.head(), eta.row(i), &mut rng);
                if let Some(f) = &self.history {
                    let tok = sample.iter().position(|&v| v == 1.0).expect("one-hot");
                    states[i] = f.step(&states[i], tok);
                }
                for (j, v) in sample.into_iter().enumerate() {
                    x.set2(i, pos * d + j, v);
                }
            }
        }
        let mut ds = Dataset::new(
            x,
            Provenance {
                generator: format!("model:{}", self.spec.variant.name()),
                params: serde_json::to_value(&self.spec)?,
                seed: Some(seed),
            },
        )?;
        ds.latents = Some(latents);
        ds.labels = labels;
        Ok(ds)
    }
}

/// One draw from the emission distribution with natural parameters `eta`.
pub fn sample_emission(head: &ExpFamilyHead, eta: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    match head.family {
        Family::Gaussian => {
            let sd = head.variance().sqrt();
            eta.iter().map(|e| { let n: f64 = StandardNormal.sample(rng); e + sd * n }).collect()
        }
        Family::Bernoulli => eta.iter().map(|&e| if rng.random::<f64>() < sigmoid(e) { 1.0 } else { 0.0 }).collect(),
        Family::Categorical => {
            let lse = logsumexp(eta);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = eta.len() - 1;
            for (j, e) in eta.iter().enumerate() {
                acc += (e - lse).exp();
                if u < acc {
                    pick = j;
                    break;
                }
            }
            (0..eta.len()).map(|j| if j == pick { 1.0 } else { 0.0 }).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idvae_chain_dimensions() {
        let m = build_model(&ModelSpec::idvae(2, 5), 0).unwrap();
        let DecoderNet::Injective(d) = &m.decoder else { panic!("ID variant must be injective") };
        assert_eq!(d.first.dim, 2);
        assert_eq!((d.stages[0].beta.k, d.stages[0].beta.d, d.stages[0].map.dim), (2, 5, 5));
    }

    #[test]
    fn rank_violation() {
        assert!(build_model(&ModelSpec::idvae(2, 1), 0).is_err());
    }

    #[test]
    fn baseline_has_mlp_of_matched_size() {
        let id = build_model(&ModelSpec::idgmvae(2, 2, 2), 0).unwrap();
        let base = build_model(&ModelSpec::baseline_gmvae(2, 2, 2), 0).unwrap();
        assert!(matches!(base.decoder, DecoderNet::Mlp { .. }));
        let (a, b) = (id.num_params() as f64, base.num_params() as f64);
        assert!((a - b).abs() / a < 0.2, "{a} vs {b}");
    }

    #[test]
    fn generation_is_deterministic() {
        let m = build_model(&ModelSpec::idgmvae(2, 2, 2), 3).unwrap();
        let a = m.generate(50, 9).unwrap();
        let b = m.generate(50, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.as_ref().unwrap().len(), 50);
    }

    #[test]
    fn zero_noise_samples_lie_on_decoded_prior_draws() {
        let mut spec = ModelSpec::idvae(2, 3);
        spec.emission_var = 1e-16;
        let m = build_model(&spec, 1).unwrap();
        let ds = m.generate(20, 2).unwrap();
        let eta = m.decoder.eta_batch(ds.latents.as_ref().unwrap()).unwrap();
        for (a, b) in ds.x.values().iter().zip(eta.values()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn sequence_generation_is_one_hot() {
        let m = build_model(&ModelSpec::idsvae(2, 3, 6, 4), 0).unwrap();
        let ds = m.generate(10, 1).unwrap();
        assert_eq!(ds.dim(), 24);
        for i in 0..10 {
            for t in 0..4 {
                let block = &ds.x.row(i)[t * 6..(t + 1) * 6];
                assert_eq!(block.iter().sum::<f64>(), 1.0);
            }
        }
    }
}
