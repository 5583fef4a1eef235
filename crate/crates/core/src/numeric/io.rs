//! Binary tensor records.
//!
//! Layout (little endian): the 8-byte magic `FSETNSR1`, a `u32` rank, `rank`
//! `u32` dimensions, then the row-major values as `f32`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"FSETNSR1";

pub fn write_tensor<W: Write>(out: &mut W, t: &Tensor) -> std::io::Result<()> {
    out.write_all(TENSOR_MAGIC)?;
    out.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for &v in t.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

fn read_u32<R: Read>(input: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one tensor record. `what` names the source in error messages.
pub fn read_tensor<R: Read>(input: &mut R, what: &Path) -> Result<Tensor> {
    let fmt = |detail: String| Error::Format {
        path: what.to_path_buf(),
        detail,
    };
    let mut magic = [0u8; 8];
    input
        .read_exact(&mut magic)
        .map_err(|e| fmt(format!("missing magic: {e}")))?;
    if &magic != TENSOR_MAGIC {
        return Err(fmt(format!("bad magic {magic:?}")));
    }
    let rank = read_u32(input).map_err(|e| fmt(e.to_string()))? as usize;
    if rank == 0 || rank > 8 {
        return Err(fmt(format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(input).map_err(|e| fmt(e.to_string()))? as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * 4];
    input
        .read_exact(&mut raw)
        .map_err(|e| fmt(format!("truncated data: {e}")))?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(shape, data).map_err(|e| fmt(e.to_string()))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut cursor = bytes.as_slice();
    let t = read_tensor(&mut cursor, path)?;
    if !cursor.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes", cursor.len()),
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..8], b"FSETNSR1");
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..16], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &3u32.to_le_bytes());
        assert_eq!(&buf[20..24], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 20 + 12);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let p = Path::new("mem");
        let mut bad: &[u8] = b"NOTATNSR\x01\0\0\0";
        assert!(read_tensor(&mut bad, p).is_err());
        let t = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.pop();
        assert!(read_tensor(&mut buf.as_slice(), p).is_err());
    }
}
