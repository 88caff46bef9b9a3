//! BTKS binary tensor files.
//!
//! Layout: magic `BTKS`, version byte (1), rank byte, one little-endian `u32`
//! per extent, then the row-major payload as little-endian `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const BTKS_MAGIC: &[u8; 4] = b"BTKS";
pub const BTKS_VERSION: u8 = 1;

pub fn write_btks_to<T: Real, W: Write>(tensor: &Tensor<T>, mut out: W) -> std::io::Result<()> {
    let rank = u8::try_from(tensor.rank()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "rank exceeds 255")
    })?;
    out.write_all(BTKS_MAGIC)?;
    out.write_all(&[BTKS_VERSION, rank])?;
    for &extent in tensor.shape() {
        let extent = u32::try_from(extent).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "extent exceeds u32")
        })?;
        out.write_all(&extent.to_le_bytes())?;
    }
    for &v in tensor.data() {
        out.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
    }
    out.flush()
}

pub fn write_btks<T: Real>(tensor: &Tensor<T>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_btks_to(tensor, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn read_btks_from<T: Real, R: Read>(mut input: R) -> std::result::Result<Tensor<T>, String> {
    let mut header = [0u8; 6];
    input
        .read_exact(&mut header)
        .map_err(|e| format!("truncated header: {e}"))?;
    if &header[..4] != BTKS_MAGIC {
        return Err("bad magic".into());
    }
    if header[4] != BTKS_VERSION {
        return Err(format!("unsupported version {}", header[4]));
    }
    let rank = header[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut word = [0u8; 4];
    for _ in 0..rank {
        input
            .read_exact(&mut word)
            .map_err(|e| format!("truncated extents: {e}"))?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let n: usize = shape.iter().product();
    let mut payload = vec![0u8; n * 4];
    input
        .read_exact(&mut payload)
        .map_err(|e| format!("truncated payload: {e}"))?;
    let mut rest = Vec::new();
    input.read_to_end(&mut rest).map_err(|e| e.to_string())?;
    if !rest.is_empty() {
        return Err(format!("{} trailing bytes", rest.len()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::from_vec(&shape, data).map_err(|e| e.to_string())
}

pub fn read_btks<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_btks_from(BufReader::new(file)).map_err(|reason| Error::Format {
        path: path.to_path_buf(),
        reason,
    })
}
