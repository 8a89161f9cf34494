//! Binary model files.
//!
//! ```text
//! "DPCN" | version u16 | layer count u16
//! per layer: p k d n (u32) | 11 hyperparameters (f64) | A | B | C
//! ```
//!
//! All integers and floats are little-endian; matrices are row-major.

use std::fs;
use std::path::Path;

use super::{Network, NetworkLayer};
use crate::error::{DpcnError, Result};
use crate::model::{HyperParams, LayerDims, LayerModel};
use crate::tensor::Matrix;

const MAGIC: &[u8; 4] = b"DPCN";
const VERSION: u16 = 1;

fn hp_to_array(hp: &HyperParams) -> [f64; 11] {
    [
        hp.mu,
        hp.lambda,
        hp.gamma,
        hp.beta,
        hp.m_smooth,
        hp.clamp_state,
        hp.clamp_cause,
        hp.i_s as f64,
        hp.j_s as f64,
        hp.inner_tol,
        hp.max_inner_iter as f64,
    ]
}

fn count_from_f64(v: f64, name: &str) -> Result<usize> {
    if v.is_finite() && v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(53) {
        Ok(v as usize)
    } else {
        Err(DpcnError::Format(format!("{name} = {v} is not a count")))
    }
}

fn hp_from_array(v: &[f64; 11]) -> Result<HyperParams> {
    Ok(HyperParams {
        mu: v[0],
        lambda: v[1],
        gamma: v[2],
        beta: v[3],
        m_smooth: v[4],
        clamp_state: v[5],
        clamp_cause: v[6],
        i_s: count_from_f64(v[7], "i_s")?,
        j_s: count_from_f64(v[8], "j_s")?,
        inner_tol: v[9],
        max_inner_iter: count_from_f64(v[10], "max_inner_iter")?,
    })
}

/// Serialize a network.
pub fn network_to_bytes(network: &Network) -> Result<Vec<u8>> {
    network.validate()?;
    let count = u16::try_from(network.layers.len())
        .map_err(|_| DpcnError::Shape("more than 65535 layers".into()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for layer in &network.layers {
        let d = &layer.dims;
        for v in [d.p, d.k, d.d, d.n] {
            let v = u32::try_from(v).map_err(|_| DpcnError::Shape(format!("dimension {v} too large")))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in hp_to_array(&layer.hp) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for m in [&layer.model.a, &layer.model.b, &layer.model.c] {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len()).ok_or_else(|| {
            DpcnError::Format(format!("truncated file: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let len = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| DpcnError::Shape(format!("{rows}x{cols} matrix too large")))?;
        let raw = self.take(len)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// Parse a network written by [`network_to_bytes`].
pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(DpcnError::Format("bad magic, not a DPCN model file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(DpcnError::Format(format!("unsupported version {version}")));
    }
    let count = r.u16()? as usize;
    if count == 0 {
        return Err(DpcnError::Shape("model file has no layers".into()));
    }
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32()? as usize;
        }
        let dims = LayerDims {
            p: dims[0],
            k: dims[1],
            d: dims[2],
            n: dims[3],
        };
        dims.validate().map_err(|e| DpcnError::Shape(e.to_string()))?;
        let mut hp = [0.0; 11];
        for v in &mut hp {
            *v = r.f64()?;
        }
        let hp = hp_from_array(&hp)?;
        let a = r.matrix(dims.k, dims.k)?;
        let b = r.matrix(dims.k, dims.d)?;
        let c = r.matrix(dims.p, dims.k)?;
        layers.push(NetworkLayer {
            dims,
            hp,
            model: LayerModel { a, b, c },
        });
    }
    if r.pos != bytes.len() {
        return Err(DpcnError::Format(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - r.pos
        )));
    }
    let network = Network { layers };
    network.validate().map_err(|e| match e {
        DpcnError::Shape(_) => e,
        other => DpcnError::Shape(other.to_string()),
    })?;
    Ok(network)
}

pub fn save_network(network: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, network_to_bytes(network)?)?;
    Ok(())
}

pub fn load_network(path: impl AsRef<Path>) -> Result<Network> {
    network_from_bytes(&fs::read(path)?)
}
