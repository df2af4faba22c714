use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Standardization;
use crate::error::{Error, Result};
use crate::inference::{OptimizerState, RngState, TrainTrace, Trained};
use crate::models::{DecoderNet, Encoder, Model, ModelSpec, DECODER_PREFIX};

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON container for a trained model. Every tensor carries its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub provenance: serde_json::Value,
    pub spec: ModelSpec,
    pub model: Model,
    pub encoder: Encoder,
    pub optimizer: OptimizerState,
    pub rng: RngState,
    pub trace: TrainTrace,
    /// Column standardization applied to the data before training.
    pub standardization: Option<Standardization>,
    /// Message of the divergence error if training stopped early.
    pub diverged: Option<String>,
}

impl Checkpoint {
    pub fn from_trained(t: &Trained, provenance: serde_json::Value) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            provenance,
            spec: t.model.spec.clone(),
            model: t.model.clone(),
            encoder: t.encoder.clone(),
            optimizer: t.optimizer.clone(),
            rng: t.rng.clone(),
            trace: t.trace.clone(),
            standardization: None,
            diverged: t.diverged.as_ref().map(ToString::to_string),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("version {} is not supported (expected {CHECKPOINT_VERSION})", self.version)));
        }
        if self.model.spec != self.spec {
            return Err(Error::Checkpoint("field `model.spec` disagrees with `spec`".into()));
        }
        let params = self.model.named_params().into_iter().map(|(n, t)| (format!("model.{n}"), t));
        let enc = self.encoder.named_params().into_iter().map(|(n, t)| (format!("encoder.{n}"), t));
        for (name, t) in params.chain(enc) {
            let expected: usize = t.shape().iter().product();
            if expected != t.len() {
                return Err(Error::Checkpoint(format!("field `{name}` has shape {:?} but {} values", t.shape(), t.len())));
            }
            if !t.all_finite() {
                return Err(Error::Checkpoint(format!("field `{name}` contains non-finite values")));
            }
        }
        if let DecoderNet::Injective(_) = &self.model.decoder {
            let hidden = format!("{DECODER_PREFIX}.");
            for (name, t) in self.model.named_params() {
                let is_w = name.starts_with(&hidden)
                    && name.rsplit('.').next().is_some_and(|last| last.len() > 1 && last.starts_with('W') && last[1..].bytes().all(|b| b.is_ascii_digit()));
                if let Some(pos) = t.values().iter().position(|v| *v < 0.0).filter(|_| is_w) {
                    return Err(Error::Checkpoint(format!("field `model.{name}` entry {pos} is negative ({})", t.values()[pos])));
                }
            }
        }
        self.model.validate().map_err(|e| Error::Checkpoint(format!("field `model`: {e}")))?;
        self.encoder.validate().map_err(|e| Error::Checkpoint(format!("field `encoder`: {e}")))?;
        if self.encoder.input_dim() != self.spec.data_dim() || self.encoder.latent_dim != self.model.code_dim() {
            return Err(Error::Checkpoint("field `encoder` does not match the model dimensions".into()));
        }
        for (name, t) in self.optimizer.first.iter().chain(&self.optimizer.second) {
            if t.shape().iter().product::<usize>() != t.len() || !t.all_finite() {
                return Err(Error::Checkpoint(format!("field `optimizer.{name}` is malformed")));
            }
        }
        if let Some(s) = &self.standardization {
            if s.shift.len() != self.spec.data_dim() || s.scale.len() != s.shift.len() || s.scale.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::Checkpoint("field `standardization` is malformed".into()));
            }
        }
        self.rng.restore().map_err(|e| Error::Checkpoint(format!("field `rng`: {e}")))?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("version") {
            None => return Err(Error::Checkpoint("missing field `version`".into())),
            Some(v) if v.as_u64() != Some(CHECKPOINT_VERSION as u64) => {
                return Err(Error::Checkpoint(format!("version {v} is not supported (expected {CHECKPOINT_VERSION})")))
            }
            _ => {}
        }
        let ck: Checkpoint = serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        ck.validate()?;
        Ok(ck)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    ck.validate()?;
    std::fs::write(path, ck.to_json()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_pinwheel, PinwheelConfig};
    use crate::inference::{init_encoder, train, TrainConfig};
    use crate::models::build_model;

    fn trained() -> Checkpoint {
        let data = gen_pinwheel(&PinwheelConfig { n: 64, ..Default::default() }, 0).unwrap();
        let model = build_model(&ModelSpec::idgmvae(2, 2, 2), 0).unwrap();
        let enc = init_encoder(&model, &data, 1);
        let t = train(&model, &enc, &data, &TrainConfig { epochs: 2, batch: 32, ..Default::default() }).unwrap();
        Checkpoint::from_trained(&t, serde_json::json!({ "test": true }))
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = trained();
        let first = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&first).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), first);
    }

    #[test]
    fn negative_convex_weight_is_rejected_by_name() {
        let ck = trained();
        let mut v: serde_json::Value = serde_json::from_str(&ck.to_json().unwrap()).unwrap();
        let w1 = ck.model.named_params().into_iter().find(|(n, _)| n.ends_with(".W1")).unwrap().0;
        // Locate the tensor inside the serialized model by value and flip one entry.
        let target = ck.model.named_params().into_iter().find(|(n, _)| *n == w1).unwrap().1.clone();
        fn flip(v: &mut serde_json::Value, target: &serde_json::Value) -> bool {
            if v == target {
                let vals = v.get_mut("values").unwrap().as_array_mut().unwrap();
                vals[0] = serde_json::json!(-0.5);
                return true;
            }
            match v {
                serde_json::Value::Object(m) => m.values_mut().any(|c| flip(c, target)),
                serde_json::Value::Array(a) => a.iter_mut().any(|c| flip(c, target)),
                _ => false,
            }
        }
        assert!(flip(v.get_mut("model").unwrap(), &serde_json::to_value(&target).unwrap()));
        let err = Checkpoint::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("W1") && err.contains("negative"), "{err}");
    }

    #[test]
    fn missing_or_wrong_version_is_rejected() {
        let mut v: serde_json::Value = serde_json::from_str(&trained().to_json().unwrap()).unwrap();
        v["version"] = serde_json::json!(99);
        assert!(Checkpoint::from_json(&v.to_string()).unwrap_err().to_string().contains("version"));
        v.as_object_mut().unwrap().remove("version");
        assert!(Checkpoint::from_json(&v.to_string()).unwrap_err().to_string().contains("missing field `version`"));
    }
}
