//! Generative-model variants, amortized encoders and the evidence lower bound.

mod elbo;
mod encoder;
mod history;
mod mlp;
mod model;
mod spec;

pub use elbo::{diag_gaussian_kl, elbo, elbo_with, posterior, ElboEstimate, ElboGraph, ElboOptions, KlMode, Posterior};
pub use encoder::{Encoder, ENCODER_PREFIX};
pub use history::HistoryEmbedder;
pub use mlp::{Mlp, MlpVars, MLP_SLOPE};
pub use model::{
    build_model, matched_width, sample_emission, Bridge, DecoderNet, DecoderNetVars, Model, BRIDGE_PREFIX, DECODER_PREFIX,
    HISTORY_PREFIX,
};
pub use spec::{LatentKind, ModelSpec, Variant};
