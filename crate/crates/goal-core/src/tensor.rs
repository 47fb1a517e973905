//! The GOALT1 tensor file format.
//!
//! Layout: ASCII magic `GOALT1\n`, one ASCII line `ndim d0 d1 ...\n`, then
//! the raw little-endian 32-bit floats in row-major order. Used for maps,
//! masks (stored as floats 0/1) and model outputs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, ArrayViewD, IxDyn};
use thiserror::Error;

const MAGIC: &[u8] = b"GOALT1\n";

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad tensor file: {0}")]
    Format(String),
}

/// Writes a tensor of any rank.
pub fn save_tensor<P: AsRef<Path>>(path: P, tensor: ArrayViewD<'_, f32>) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
    writeln!(w, "{} {}", tensor.ndim(), dims.join(" "))?;
    // Row-major element order regardless of the view's memory layout.
    for &v in tensor.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a tensor of any rank.
pub fn load_tensor<P: AsRef<Path>>(path: P) -> Result<ArrayD<f32>, TensorError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 7];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(TensorError::Format("missing GOALT1 magic".into()));
    }

    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        if header.len() > 256 {
            return Err(TensorError::Format("unterminated header line".into()));
        }
        header.push(byte[0]);
    }
    let header = String::from_utf8(header).map_err(|_| TensorError::Format("non-utf8 header".into()))?;
    let mut fields = header.split_whitespace();
    let ndim: usize = fields
        .next()
        .ok_or_else(|| TensorError::Format("empty header".into()))?
        .parse()
        .map_err(|_| TensorError::Format("bad ndim".into()))?;
    let dims: Vec<usize> = fields
        .map(|f| f.parse().map_err(|_| TensorError::Format(format!("bad dim `{f}`"))))
        .collect::<Result<_, _>>()?;
    if dims.len() != ndim {
        return Err(TensorError::Format(format!(
            "header promises {ndim} dims, lists {}",
            dims.len()
        )));
    }

    let count: usize = dims.iter().product();
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(TensorError::Format("trailing bytes after payload".into()));
    }

    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(&dims), data)
        .map_err(|e| TensorError::Format(format!("shape mismatch: {e}")))
}
