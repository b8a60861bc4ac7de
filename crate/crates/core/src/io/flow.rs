//! Middlebury `.flo` files: f32 tag 202021.25, i32 width, i32 height,
//! then interleaved (u, v) f32 pairs in row-major order, little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::tensor::Tensor;

pub const FLO_TAG: f32 = 202021.25;
/// Largest accepted field, in pixels.
pub const MAX_FLOW_PIXELS: u64 = 1 << 28;

fn format_err(offset: u64, kind: FormatError) -> Error {
    Error::Format { offset, kind }
}

/// Fills `buf`; a short read is reported at the start of the first
/// incomplete `unit`-byte item.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8], offset: u64, unit: usize) -> Result<()> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) => return Err(format_err(offset + (got - got % unit) as u64, FormatError::Truncated)),
            Ok(k) => got += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

/// Reads a flow field as a 2×H×W tensor (channel 0 = u, channel 1 = v).
pub fn read_flow_from<R: Read>(mut r: R) -> Result<Tensor> {
    let mut h = [0u8; 12];
    read_full(&mut r, &mut h[..4], 0, 4)?;
    if h[..4] != FLO_TAG.to_le_bytes() {
        return Err(format_err(0, FormatError::BadMagic));
    }
    read_full(&mut r, &mut h[4..], 4, 8)?;
    let width = i32::from_le_bytes(h[4..8].try_into().expect("4 bytes")) as i64;
    let height = i32::from_le_bytes(h[8..12].try_into().expect("4 bytes")) as i64;
    if width <= 0 || height <= 0 || (width * height) as u64 > MAX_FLOW_PIXELS {
        return Err(format_err(4, FormatError::BadDimensions { width, height }));
    }
    let (w, hh) = (width as usize, height as usize);
    let n = w * hh;
    // grow with the data actually read, so a forged header on a short
    // file cannot force a large allocation
    let cap = n.min(1 << 16);
    let (mut u, mut v) = (Vec::with_capacity(cap), Vec::with_capacity(cap));
    let mut buf = vec![0u8; 8 * n.min(4096)];
    let mut done = 0;
    while done < n {
        let take = (n - done).min(4096);
        let offset = 12 + 8 * done as u64;
        read_full(&mut r, &mut buf[..8 * take], offset, 8)?;
        for (i, px) in buf[..8 * take].chunks_exact(8).enumerate() {
            let a = f32::from_le_bytes(px[..4].try_into().expect("4 bytes"));
            let b = f32::from_le_bytes(px[4..].try_into().expect("4 bytes"));
            if !a.is_finite() || !b.is_finite() {
                return Err(format_err(offset + 8 * i as u64, FormatError::NonFinite));
            }
            u.push(a);
            v.push(b);
        }
        done += take;
    }
    u.extend_from_slice(&v);
    let data = u;
    Tensor::new(&[2, hh, w], data)
}

pub fn read_flow(path: impl AsRef<Path>) -> Result<Tensor> {
    read_flow_from(BufReader::new(File::open(path)?))
}

pub fn write_flow_to<W: Write>(mut out: W, flow: &Tensor) -> Result<()> {
    let (h, w) = match flow.chw() {
        Some((2, h, w)) if h > 0 && w > 0 && h <= i32::MAX as usize && w <= i32::MAX as usize => (h, w),
        _ => {
            return Err(Error::shape(
                "write_flow",
                format!("expected 2xHxW, got {:?}", flow.shape()),
            ))
        }
    };
    if flow.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("flow contains non-finite values".into()));
    }
    out.write_all(&FLO_TAG.to_le_bytes())?;
    out.write_all(&(w as i32).to_le_bytes())?;
    out.write_all(&(h as i32).to_le_bytes())?;
    let (u, v) = (flow.channel(0), flow.channel(1));
    let mut row = Vec::with_capacity(8 * w);
    for y in 0..h {
        row.clear();
        for x in 0..w {
            row.extend_from_slice(&u[y * w + x].to_le_bytes());
            row.extend_from_slice(&v[y * w + x].to_le_bytes());
        }
        out.write_all(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_flow(path: impl AsRef<Path>, flow: &Tensor) -> Result<()> {
    write_flow_to(BufWriter::new(File::create(path)?), flow)
}
