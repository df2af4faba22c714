use serde::{Deserialize, Serialize};

use crate::decoder::Family;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    IdVae,
    IdGmVae,
    IdSVae,
    GeneralIdVae,
    BaselineVae,
    BaselineGmVae,
}

impl Variant {
    pub fn is_identifiable(self) -> bool {
        !matches!(self, Variant::BaselineVae | Variant::BaselineGmVae)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::IdVae => "idvae",
            Variant::IdGmVae => "idgmvae",
            Variant::IdSVae => "idsvae",
            Variant::GeneralIdVae => "general-idvae",
            Variant::BaselineVae => "vae",
            Variant::BaselineGmVae => "gmvae",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LatentKind {
    /// `z ~ N(0, I_K)`.
    Continuous,
    /// `z ~ Categorical(1/K)`.
    Categorical,
}

/// Everything needed to construct a model.
///
/// `k` is the latent dimension (or number of categories), `m` the dimension of
/// the continuous code fed to the decoder, `h` the history-state size (0 for
/// i.i.d. data), `d` the per-position observation dimension and `seq_len` the
/// number of positions per datapoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub latent: LatentKind,
    pub k: usize,
    pub m: usize,
    pub d: usize,
    pub h: usize,
    pub seq_len: usize,
    pub family: Family,
    pub decoder_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    /// Strong-convexity weight added to every ICNN potential.
    pub quadratic: f64,
    /// Initial Gaussian emission variance.
    pub emission_var: f64,
    /// Initial variance of `w | z` for variants with a Gaussian bridge.
    pub bridge_var: f64,
}

impl ModelSpec {
    fn base(variant: Variant, latent: LatentKind, k: usize, m: usize, d: usize) -> Self {
        Self {
            variant,
            latent,
            k,
            m,
            d,
            h: 0,
            seq_len: 1,
            family: Family::Gaussian,
            decoder_hidden: vec![32, 32],
            encoder_hidden: vec![64, 64],
            quadratic: 1.0,
            emission_var: 0.1,
            bridge_var: 0.1,
        }
    }

    pub fn idvae(k: usize, d: usize) -> Self {
        Self::base(Variant::IdVae, LatentKind::Continuous, k, k, d)
    }

    pub fn idgmvae(k: usize, m: usize, d: usize) -> Self {
        Self::base(Variant::IdGmVae, LatentKind::Categorical, k, m, d)
    }

    /// Sequence model over `vocab` tokens with `h`-dimensional history state.
    pub fn idsvae(k: usize, h: usize, vocab: usize, seq_len: usize) -> Self {
        Self { h, seq_len, family: Family::Categorical, ..Self::base(Variant::IdSVae, LatentKind::Continuous, k, k, vocab) }
    }

    pub fn general_idvae(latent: LatentKind, k: usize, m: usize, d: usize) -> Self {
        Self::base(Variant::GeneralIdVae, latent, k, m, d)
    }

    pub fn baseline_vae(k: usize, d: usize) -> Self {
        Self::base(Variant::BaselineVae, LatentKind::Continuous, k, k, d)
    }

    pub fn baseline_gmvae(k: usize, m: usize, d: usize) -> Self {
        Self::base(Variant::BaselineGmVae, LatentKind::Categorical, k, m, d)
    }

    /// Width of a flattened datapoint.
    pub fn data_dim(&self) -> usize {
        self.d * self.seq_len
    }

    /// Decoder input width: the continuous code plus the history state.
    pub fn decoder_input(&self) -> usize {
        self.m + self.h
    }

    pub fn validate(&self) -> Result<()> {
        let expected_latent = match self.variant {
            Variant::IdVae | Variant::IdSVae | Variant::BaselineVae => Some(LatentKind::Continuous),
            Variant::IdGmVae | Variant::BaselineGmVae => Some(LatentKind::Categorical),
            Variant::GeneralIdVae => None,
        };
        if let Some(kind) = expected_latent {
            if kind != self.latent {
                return Err(Error::Config(format!("{} requires a {:?} latent", self.variant.name(), kind)));
            }
        }
        if self.k == 0 || self.m == 0 || self.d == 0 || self.seq_len == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.latent == LatentKind::Categorical && self.k < 2 {
            return Err(Error::Config("a categorical latent needs at least 2 categories".into()));
        }
        if matches!(self.variant, Variant::IdVae | Variant::IdSVae | Variant::BaselineVae) && self.m != self.k {
            return Err(Error::Config(format!("{} feeds z directly to the decoder, so M must equal K", self.variant.name())));
        }
        if (self.h > 0 || self.seq_len > 1) && self.variant != Variant::IdSVae {
            return Err(Error::Config("only the sequence variant takes a history".into()));
        }
        if self.variant == Variant::IdSVae {
            if self.h == 0 {
                return Err(Error::Config("the sequence variant needs a positive history size".into()));
            }
            if self.family != Family::Categorical {
                return Err(Error::Config("the sequence variant emits categorical tokens".into()));
            }
        }
        if self.variant.is_identifiable() {
            // Full-rank requirement: every truncated identity must be K×D with D ≥ K.
            let gaussian_bridge = matches!(self.variant, Variant::IdGmVae | Variant::GeneralIdVae);
            if gaussian_bridge && self.m < self.k {
                return Err(Error::Config(format!(
                    "full-rank requirement violated: code dimension M={} is below latent dimension K={}",
                    self.m, self.k
                )));
            }
            if self.d < self.decoder_input() {
                return Err(Error::Config(format!(
                    "full-rank requirement violated: observation dimension D={} is below decoder input dimension {}",
                    self.d,
                    self.decoder_input()
                )));
            }
            if self.quadratic < 0.0 {
                return Err(Error::Config("quadratic weight must be non-negative".into()));
            }
        }
        if !(self.emission_var > 0.0 && self.bridge_var > 0.0) {
            return Err(Error::Config("initial variances must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_violation_is_rejected() {
        let err = ModelSpec::idvae(2, 1).validate().unwrap_err();
        assert!(err.to_string().contains("full-rank"));
        assert!(ModelSpec::idgmvae(3, 2, 5).validate().is_err());
        assert!(ModelSpec::idsvae(2, 4, 5, 3).validate().is_err());
        ModelSpec::idsvae(2, 4, 6, 3).validate().unwrap();
    }

    #[test]
    fn baselines_skip_rank_checks() {
        ModelSpec::baseline_vae(4, 2).validate().unwrap();
        ModelSpec::baseline_gmvae(2, 8, 2).validate().unwrap();
    }

    #[test]
    fn latent_kind_must_match_variant() {
        let mut s = ModelSpec::idvae(2, 3);
        s.latent = LatentKind::Categorical;
        assert!(s.validate().is_err());
    }
}
