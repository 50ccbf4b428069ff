//! Versioned binary checkpoints plus a lossless text export.
//!
//! Layout: magic string, format version (u32 LE), kind tag (u8), a
//! length-prefixed JSON descriptor (dims, widths, masks, activation tag),
//! then the flat parameter vector as little-endian 64-bit floats.
//! Writes go through a temp file and rename, so a checkpoint is never
//! half-written.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::flow::CouplingFlowSpec;
use crate::mlp::MlpSpec;
use crate::scalar::Scalar;
use crate::tape::Activation;

const MAGIC: &[u8; 14] = b"DRIFTFLOW_CKPT";
const VERSION: u32 = 1;
const KIND_FLOW: u8 = 1;
const KIND_MLP: u8 = 2;

#[derive(Debug, Serialize, Deserialize)]
struct FlowDescriptor {
    dim: usize,
    n_layers: usize,
    hidden: Vec<usize>,
    activation: u8,
    masks: Vec<(Vec<usize>, Vec<usize>)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MlpDescriptor {
    widths: Vec<usize>,
    activation: u8,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn encode<F: Scalar>(kind: u8, descriptor: &[u8], params: &[F]) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + 1 + 4 + descriptor.len() + 8 + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for p in params {
        out.extend_from_slice(&p.to_f64_c().to_le_bytes());
    }
    out
}

struct Decoder<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Error> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, Error> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, Error> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode<F: Scalar>(bytes: &[u8], expect_kind: u8) -> Result<(Vec<u8>, Vec<F>), Error> {
    let mut dec = Decoder { bytes, pos: 0 };
    if dec.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic string".into()));
    }
    let version = dec.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let kind = dec.take(1)?[0];
    if kind != expect_kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint kind {kind} does not match expected {expect_kind}"
        )));
    }
    let desc_len = dec.u32()? as usize;
    let descriptor = dec.take(desc_len)?.to_vec();
    let count = dec.u64()? as usize;
    let raw = dec.take(count * 8)?;
    if dec.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    let params = raw
        .chunks_exact(8)
        .map(|c| F::c(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok((descriptor, params))
}

pub fn save_flow<F: Scalar>(
    path: &Path,
    spec: &CouplingFlowSpec,
    params: &[F],
) -> Result<(), Error> {
    let desc = FlowDescriptor {
        dim: spec.dim,
        n_layers: spec.n_layers,
        hidden: spec.hidden.clone(),
        activation: spec.activation.tag(),
        masks: (0..spec.n_layers).map(|k| spec.masks(k)).collect(),
    };
    let desc_bytes = serde_json::to_vec(&desc).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, &encode(KIND_FLOW, &desc_bytes, params))
}

pub fn load_flow<F: Scalar>(path: &Path) -> Result<(CouplingFlowSpec, Vec<F>), Error> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (desc_bytes, params) = decode::<F>(&bytes, KIND_FLOW)?;
    let desc: FlowDescriptor =
        serde_json::from_slice(&desc_bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let activation = Activation::from_tag(desc.activation)
        .ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {}", desc.activation)))?;
    let spec = CouplingFlowSpec::new(desc.dim, desc.n_layers, desc.hidden, activation)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    for (k, stored) in desc.masks.iter().enumerate() {
        if *stored != spec.masks(k) {
            return Err(Error::Checkpoint(format!("mask mismatch at layer {k}")));
        }
    }
    if params.len() != spec.param_count() {
        return Err(Error::Checkpoint(format!(
            "parameter count {} does not match spec ({})",
            params.len(),
            spec.param_count()
        )));
    }
    Ok((spec, params))
}

pub fn save_mlp<F: Scalar>(path: &Path, spec: &MlpSpec, params: &[F]) -> Result<(), Error> {
    let desc = MlpDescriptor { widths: spec.widths.clone(), activation: spec.activation.tag() };
    let desc_bytes = serde_json::to_vec(&desc).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_atomic(path, &encode(KIND_MLP, &desc_bytes, params))
}

pub fn load_mlp<F: Scalar>(path: &Path) -> Result<(MlpSpec, Vec<F>), Error> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let (desc_bytes, params) = decode::<F>(&bytes, KIND_MLP)?;
    let desc: MlpDescriptor =
        serde_json::from_slice(&desc_bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let activation = Activation::from_tag(desc.activation)
        .ok_or_else(|| Error::Checkpoint(format!("unknown activation tag {}", desc.activation)))?;
    let spec = MlpSpec::new(desc.widths, activation).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if params.len() != spec.param_count() {
        return Err(Error::Checkpoint(format!(
            "parameter count {} does not match spec ({})",
            params.len(),
            spec.param_count()
        )));
    }
    Ok((spec, params))
}

/// Text export: one value per line, 17 significant digits.
pub fn write_params_text<F: Scalar>(path: &Path, params: &[F]) -> Result<(), Error> {
    let mut out = String::with_capacity(params.len() * 24);
    for p in params {
        out.push_str(&crate::traj::fmt_g17(*p));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_params_text<F: Scalar>(path: &Path) -> Result<Vec<F>, Error> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.trim()
                .parse::<f64>()
                .map(F::c)
                .map_err(|e| Error::Checkpoint(format!("bad parameter line `{l}`: {e}")))
        })
        .collect()
}
