//! Datasets: synthetic generators, IDX ingestion and CSV export.

mod idx;
mod synthetic;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub use idx::{load_idx, parse_idx, IdxKind};
pub use synthetic::{
    gen_gmvae_synthetic, gen_pinwheel, gen_sequences, gmvae_cluster_mean, PinwheelConfig, SequenceConfig, GMVAE_SYNTH_DIM,
    GMVAE_SYNTH_NOISE,
};

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    pub params: serde_json::Value,
    pub seed: Option<u64>,
}

/// Per-column affine standardization `(x - shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Self { shift: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let c = x.cols();
        let mut out = x.clone();
        for (i, v) in out.values_mut().iter_mut().enumerate() {
            let j = i % c;
            *v = (*v - self.shift[j]) / self.scale[j];
        }
        out
    }

    /// `log |det|` of the map from raw to standardized coordinates; add it to a
    /// standardized-space log-density to get the raw-space log-density.
    pub fn log_jacobian(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// `n × D` design matrix.
    pub x: Tensor,
    /// Ground-truth latents, one row per datapoint, when known.
    pub latents: Option<Tensor>,
    pub labels: Option<Vec<usize>>,
    pub provenance: Provenance,
    /// Set when `x` has been standardized; records the transform applied.
    pub standardization: Option<Standardization>,
}

impl Dataset {
    pub fn new(x: Tensor, provenance: Provenance) -> Result<Self> {
        if x.rank() != 2 || x.rows() == 0 {
            return Err(Error::Shape(format!("dataset needs a non-empty n×D matrix, got {:?}", x.shape())));
        }
        Ok(Self { x, latents: None, labels: None, provenance, standardization: None })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows `idx` as a new matrix.
    pub fn rows(&self, idx: &[usize]) -> Tensor {
        let c = self.dim();
        let mut vals = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            vals.extend_from_slice(self.x.row(i));
        }
        Tensor::matrix(idx.len(), c, vals).expect("sized")
    }

    /// Contiguous split into `(first n, rest)`.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::Config(format!("cannot split {} rows at {}", self.len(), n)));
        }
        let part = |range: std::ops::Range<usize>, tag: &str| {
            let idx: Vec<usize> = range.collect();
            let mut d = Dataset::new(
                self.rows(&idx),
                Provenance {
                    generator: format!("{}[{}]", self.provenance.generator, tag),
                    params: self.provenance.params.clone(),
                    seed: self.provenance.seed,
                },
            )
            .expect("non-empty");
            d.labels = self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect());
            d.latents = self.latents.as_ref().map(|t| {
                let c = t.cols();
                let vals = idx.iter().flat_map(|&i| t.row(i).to_vec()).collect();
                Tensor::matrix(idx.len(), c, vals).expect("sized")
            });
            d.standardization = self.standardization.clone();
            d
        };
        Ok((part(0..n, "train"), part(n..self.len(), "test")))
    }

    /// Column statistics of this dataset as a standardization.
    pub fn column_standardization(&self) -> Standardization {
        let (n, c) = (self.len() as f64, self.dim());
        let mut shift = vec![0.0; c];
        for i in 0..self.len() {
            for (s, v) in shift.iter_mut().zip(self.x.row(i)) {
                *s += v / n;
            }
        }
        let mut scale = vec![0.0; c];
        for i in 0..self.len() {
            for j in 0..c {
                let d = self.x.get2(i, j) - shift[j];
                scale[j] += d * d / n;
            }
        }
        let scale = scale.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Standardization { shift, scale }
    }

    /// Copy with `x` standardized by `s`; the transform is recorded.
    pub fn standardized(&self, s: &Standardization) -> Dataset {
        let mut d = self.clone();
        d.x = s.apply(&self.x);
        d.standardization = Some(s.clone());
        d
    }

    /// CSV with a `#` provenance header, then `x0..x{D-1}` and optional `label`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "# generator: {}", self.provenance.generator)?;
        writeln!(w, "# params: {}", self.provenance.params)?;
        if let Some(seed) = self.provenance.seed {
            writeln!(w, "# seed: {seed}")?;
        }
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        if self.labels.is_some() {
            header.push("label".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut fields: Vec<String> = self.x.row(i).iter().map(|v| format!("{v}")).collect();
            if let Some(l) = &self.labels {
                fields.push(l[i].to_string());
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }

    /// Reads the CSV layout written by [`Dataset::write_csv`].
    pub fn read_csv(text: &str) -> Result<Dataset> {
        let mut generator = "csv".to_string();
        let mut params = serde_json::Value::Null;
        let mut seed = None;
        let mut header: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut offset = 0;
        for line in text.lines() {
            let line_offset = offset;
            offset += line.len() + 1;
            if let Some(meta) = line.strip_prefix('#') {
                let meta = meta.trim();
                if let Some(g) = meta.strip_prefix("generator:") {
                    generator = g.trim().to_string();
                } else if let Some(p) = meta.strip_prefix("params:") {
                    params = serde_json::from_str(p.trim()).unwrap_or(serde_json::Value::Null);
                } else if let Some(s) = meta.strip_prefix("seed:") {
                    seed = s.trim().parse().ok();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let Some(h) = &header else {
                header = Some(fields.iter().map(|s| s.trim().to_string()).collect());
                continue;
            };
            if fields.len() != h.len() {
                return Err(Error::Parse { offset: line_offset, msg: format!("expected {} fields, got {}", h.len(), fields.len()) });
            }
            let has_label = h.last().is_some_and(|s| s == "label");
            let n_x = if has_label { h.len() - 1 } else { h.len() };
            let mut row = Vec::with_capacity(n_x);
            for f in &fields[..n_x] {
                row.push(f.trim().parse::<f64>().map_err(|e| Error::Parse { offset: line_offset, msg: e.to_string() })?);
            }
            if has_label {
                labels.push(fields[n_x].trim().parse::<usize>().map_err(|e| Error::Parse { offset: line_offset, msg: e.to_string() })?);
            }
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse { offset, msg: "no data rows".into() });
        }
        let mut d = Dataset::new(Tensor::from_rows(&rows)?, Provenance { generator, params, seed })?;
        if !labels.is_empty() {
            d.labels = Some(labels);
        }
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut d = Dataset::new(
            Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 3.0]]).unwrap(),
            Provenance { generator: "t".into(), params: serde_json::json!({"a": 1}), seed: Some(4) },
        )
        .unwrap();
        d.labels = Some(vec![0, 1]);
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(back.x, d.x);
        assert_eq!(back.labels, d.labels);
        assert_eq!(back.provenance, d.provenance);
    }

    #[test]
    fn standardization_jacobian() {
        let d = Dataset::new(
            Tensor::from_rows(&[vec![0.0, 10.0], vec![2.0, 30.0]]).unwrap(),
            Provenance { generator: "t".into(), params: serde_json::Value::Null, seed: None },
        )
        .unwrap();
        let s = d.column_standardization();
        assert_eq!(s.shift, vec![1.0, 20.0]);
        assert_eq!(s.scale, vec![1.0, 10.0]);
        assert!((s.log_jacobian() + 10f64.ln()).abs() < 1e-15);
        let z = d.standardized(&s);
        assert_eq!(z.x.values(), &[-1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let p = Provenance { generator: "t".into(), params: serde_json::Value::Null, seed: None };
        assert!(Dataset::new(Tensor::zeros(vec![0, 2]), p).is_err());
    }
}
