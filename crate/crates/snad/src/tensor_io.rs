//! Binary tensor files.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   4 bytes  "SNAD"
//! version u16      1
//! dtype   u8       1 = f64
//! shape   4 x u32  (B, C, H, W)
//! payload B*C*H*W x f64
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SNAD";
const VERSION: u16 = 1;
const DTYPE_F64: u8 = 1;

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    write_tensor_to(&mut w, t).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn write_tensor_to(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F64])?;
    for dim in t.shape() {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    read_tensor_from(&mut bytes.as_slice()).map_err(|(offset, detail)| Error::Parse {
        path: path.display().to_string(),
        offset,
        detail,
    })
}

/// Parses a tensor from a reader. Errors carry `(byte_offset, detail)`.
pub fn read_tensor_from(r: &mut impl Read) -> std::result::Result<Tensor, (usize, String)> {
    let mut offset = 0usize;
    let mut take = |buf: &mut [u8], what: &str| -> std::result::Result<(), (usize, String)> {
        r.read_exact(buf)
            .map_err(|_| (offset, format!("truncated while reading {what}")))?;
        offset += buf.len();
        Ok(())
    };

    let mut magic = [0u8; 4];
    take(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err((0, format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let mut ver = [0u8; 2];
    take(&mut ver, "version")?;
    let version = u16::from_le_bytes(ver);
    if version != VERSION {
        return Err((4, format!("unsupported version {version}")));
    }
    let mut dt = [0u8; 1];
    take(&mut dt, "dtype")?;
    if dt[0] != DTYPE_F64 {
        return Err((6, format!("unsupported dtype tag {}", dt[0])));
    }
    let mut shape = [0usize; 4];
    for slot in shape.iter_mut() {
        let mut b = [0u8; 4];
        take(&mut b, "shape")?;
        *slot = u32::from_le_bytes(b) as usize;
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let mut b = [0u8; 8];
        take(&mut b, "payload")?;
        data.push(f64::from_le_bytes(b));
    }
    Tensor::from_vec(shape, data).map_err(|e| (offset, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_tensor, rng};

    #[test]
    fn round_trip_preserves_bits() {
        let t = rand_tensor([2, 3, 4, 5], &mut rng(31));
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &t).unwrap();
        let back = read_tensor_from(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn bad_magic_rejected_at_offset_zero() {
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &Tensor::scalar(1.0)).unwrap();
        buf[0] = b'X';
        let err = read_tensor_from(&mut buf.as_slice()).unwrap_err();
        assert_eq!(err.0, 0);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut buf = Vec::new();
        write_tensor_to(&mut buf, &rand_tensor([1, 1, 2, 2], &mut rng(32))).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_tensor_from(&mut buf.as_slice()).unwrap_err();
        assert!(err.1.contains("payload"), "{err:?}");
    }
}
