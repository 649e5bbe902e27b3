//! MKT1 tensor files: magic `MKT1`, u32 rank, rank × u64 dims, then the
//! row-major f64 payload, all little-endian.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use imind_core::Tensor;

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"MKT1";

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> io::Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            "truncated MKT1 file",
        ));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

pub fn decode(mut bytes: &[u8]) -> io::Result<Tensor> {
    let bad = |m: String| io::Error::new(io::ErrorKind::InvalidData, m);
    if take(&mut bytes, 4)? != MAGIC {
        return Err(bad("missing MKT1 magic".into()));
    }
    let rank = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes")) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes"));
        shape.push(usize::try_from(d).map_err(|_| bad(format!("dimension {d} too large")))?);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad("element count overflows".into()))?;
    if bytes.len() != n * 8 {
        return Err(bad(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            bytes.len(),
            n * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| bad(e.to_string()))
}

pub fn write(path: &Path, t: &Tensor) -> CliResult<()> {
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&encode(t)).map_err(|e| CliError::io(path, e))
}

pub fn read(path: &Path) -> CliResult<Tensor> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| CliError::io(path, e))?;
    decode(&buf).map_err(|e| CliError::io(path, e))
}
