use std::path::Path;

use super::{Dataset, Provenance};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let b = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| Error::Parse { offset: bytes.len(), msg: format!("truncated header: need 4 bytes at offset {offset}") })?;
    Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parses an unsigned-byte IDX image (`n×rows×cols`, scaled to `[0, 1]`) or
/// label (`n`) file. Labels become an `n×1` matrix and are also kept as labels.
pub fn parse_idx(bytes: &[u8], source: &str) -> Result<(IdxKind, Dataset)> {
    let magic = read_u32(bytes, 0)?;
    let kind = match magic {
        IMAGES_MAGIC => IdxKind::Images,
        LABELS_MAGIC => IdxKind::Labels,
        other => return Err(Error::Parse { offset: 0, msg: format!("bad IDX magic 0x{other:08x}") }),
    };
    let dims: Vec<usize> = match kind {
        IdxKind::Images => vec![read_u32(bytes, 4)? as usize, read_u32(bytes, 8)? as usize, read_u32(bytes, 12)? as usize],
        IdxKind::Labels => vec![read_u32(bytes, 4)? as usize],
    };
    let header = 4 + 4 * dims.len();
    let n = dims[0];
    let width: usize = dims[1..].iter().product();
    let need = n.checked_mul(width).ok_or_else(|| Error::Parse { offset: 4, msg: "dimensions overflow".into() })?;
    if bytes.len() < header + need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated payload: header promises {need} bytes after offset {header}"),
        });
    }
    if n == 0 {
        return Err(Error::Parse { offset: 4, msg: "IDX file holds no items".into() });
    }
    let payload = &bytes[header..header + need];
    let provenance = Provenance {
        generator: "idx".into(),
        params: serde_json::json!({ "source": source, "dims": dims }),
        seed: None,
    };
    let ds = match kind {
        IdxKind::Images => Dataset::new(Tensor::matrix(n, width, payload.iter().map(|&b| b as f64 / 255.0).collect())?, provenance)?,
        IdxKind::Labels => {
            let mut d = Dataset::new(Tensor::matrix(n, 1, payload.iter().map(|&b| b as f64).collect())?, provenance)?;
            d.labels = Some(payload.iter().map(|&b| b as usize).collect());
            d
        }
    };
    Ok((kind, ds))
}

pub fn load_idx(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    Ok(parse_idx(&bytes, &path.display().to_string())?.1)
}
