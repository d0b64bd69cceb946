//! Self-describing binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!   magic              6 bytes, b"PSNET1"
//!   repeated until EOF:
//!     name_len         u32
//!     name             name_len bytes, UTF-8
//!     rank             u32
//!     dims             rank x u64
//!     data             product(dims) x f64 bits
//!
//! There is no count field; readers consume records until end of file.

use super::tensor::Tensor;
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"PSNET1";

#[derive(Debug)]
pub enum CheckpointError {
    Io(io::Error),
    BadMagic,
    Truncated(&'static str),
    BadName,
    /// Dimension product overflows or is absurdly large for this file.
    BadShape(Vec<u64>),
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::Io(e) => write!(f, "checkpoint I/O error: {e}"),
            CheckpointError::BadMagic => write!(f, "not a checkpoint file (bad magic)"),
            CheckpointError::Truncated(what) => write!(f, "truncated checkpoint while reading {what}"),
            CheckpointError::BadName => write!(f, "tensor name is not valid UTF-8"),
            CheckpointError::BadShape(dims) => write!(f, "unreasonable tensor dims {dims:?}"),
        }
    }
}

impl std::error::Error for CheckpointError {}

impl From<io::Error> for CheckpointError {
    fn from(e: io::Error) -> Self {
        CheckpointError::Io(e)
    }
}

pub fn write_checkpoint_to<W: Write>(mut w: W, entries: &[(String, &Tensor)]) -> io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, tensor) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &d in tensor.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in tensor.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint_to(&mut w, entries)?;
    w.flush()
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool, CheckpointError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(CheckpointError::Truncated("record header"));
        }
        filled += n;
    }
    Ok(true)
}

fn read_all<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|_| CheckpointError::Truncated(what))
}

pub fn read_checkpoint_from<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut magic = [0u8; 6];
    read_all(&mut r, &mut magic, "magic")?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut entries = Vec::new();
    loop {
        let mut len4 = [0u8; 4];
        if !read_exact_or_eof(&mut r, &mut len4)? {
            break;
        }
        let name_len = u32::from_le_bytes(len4) as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_all(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;

        let mut rank4 = [0u8; 4];
        read_all(&mut r, &mut rank4, "rank")?;
        let rank = u32::from_le_bytes(rank4) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d8 = [0u8; 8];
            read_all(&mut r, &mut d8, "dims")?;
            dims.push(u64::from_le_bytes(d8));
        }
        let count = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&c| c <= (1 << 32))
            .ok_or_else(|| CheckpointError::BadShape(dims.clone()))?;

        let mut data = vec![0.0f64; count as usize];
        for x in data.iter_mut() {
            let mut b = [0u8; 8];
            read_all(&mut r, &mut b, "tensor data")?;
            *x = f64::from_le_bytes(b);
        }
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        entries.push((name, Tensor::from_vec(&shape, data)));
    }
    Ok(entries)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    read_checkpoint_from(BufReader::new(File::open(path)?))
}
