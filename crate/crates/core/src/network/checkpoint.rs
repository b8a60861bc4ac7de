//! Binary checkpoint container.
//!
//! ```text
//! "SNUC" | u32 version | u32 len | JSON config | u32 count
//! count × ( u16 len | name | u8 rank | rank × u32 dim | f32 payload )
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchConfig, Model};
use crate::error::{CheckpointError, Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"SNUC";
const MAX_CONFIG_BYTES: usize = 1 << 20;
/// Upper bounds on a stored header, so a forged one cannot request an
/// arbitrarily large allocation before any tensor data has been read.
const MAX_SIDE: usize = 8192;
const MAX_CHANNELS: usize = 512;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    height: usize,
    width: usize,
}

pub fn write_checkpoint<W: Write>(model: &Model, mut out: W) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        arch: model.config.clone(),
        height: model.height,
        width: model.width,
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    out.write_all(MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(model.params.len() as u32).to_le_bytes())?;
    for (name, t) in model.named_params() {
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => CheckpointError::Truncated.into(),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a checkpoint and rebuilds the model it describes with fresh states.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Model> {
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        }
        .into());
    }
    let len = read_u32(&mut r)? as usize;
    if len > MAX_CONFIG_BYTES {
        return Err(CheckpointError::Config(format!("config block of {len} bytes")).into());
    }
    let mut json = vec![0u8; len];
    read_exact(&mut r, &mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| CheckpointError::Config(e.to_string()))?;
    if header.height > MAX_SIDE
        || header.width > MAX_SIDE
        || header.arch.base_channels > MAX_CHANNELS
        || header.arch.n_in > MAX_CHANNELS
    {
        return Err(CheckpointError::Config(format!(
            "{}x{} input with {} base channels and {} input channels exceeds the supported size",
            header.height, header.width, header.arch.base_channels, header.arch.n_in
        ))
        .into());
    }
    let mut model = Model::build(header.arch, header.height, header.width, 0)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;

    let count = read_u32(&mut r)? as usize;
    if count != model.params.len() {
        return Err(CheckpointError::TensorCount {
            found: count,
            expected: model.params.len(),
        }
        .into());
    }
    for i in 0..count {
        let mut b2 = [0u8; 2];
        read_exact(&mut r, &mut b2)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        read_exact(&mut r, &mut name)?;
        let name = String::from_utf8_lossy(&name).into_owned();
        if name != model.names[i] {
            return Err(CheckpointError::TensorMismatch(format!(
                "tensor {i} is '{name}', expected '{}'",
                model.names[i]
            ))
            .into());
        }
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let rank = rank[0] as usize;
        if rank > MAX_RANK {
            return Err(CheckpointError::TensorMismatch(format!("'{name}' has rank {rank}")).into());
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        if shape != model.params[i].shape() {
            return Err(CheckpointError::TensorMismatch(format!(
                "'{name}' has shape {shape:?}, expected {:?}",
                model.params[i].shape()
            ))
            .into());
        }
        let mut bytes = vec![0u8; 4 * model.params[i].numel()];
        read_exact(&mut r, &mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        model.params[i] = Tensor::new(&shape, data)?;
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
