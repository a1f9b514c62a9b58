//! `HTFE` feature files.
//!
//! | offset | size | content |
//! |--------|------|---------|
//! | 0 | 4 | magic `HTFE` |
//! | 4 | 2 | version, u16 LE (currently 1) |
//! | 6 | 4 | frames L, u32 LE |
//! | 10 | 4 | dimension D, u32 LE |
//! | 14 | 4·L·D | row-major f32 LE |
//!
//! Values are widened to `f64` on read, so a matrix whose entries are
//! already representable as `f32` roundtrips bit-exactly.

use std::fs;
use std::path::Path;

use super::write_atomic;
use crate::error::{Error, Result};
use crate::tensorgrad::Matrix;

pub const MAGIC: &[u8; 4] = b"HTFE";
pub const VERSION: u16 = 1;
const HEADER: usize = 14;

pub fn encode_features(m: &Matrix) -> Result<Vec<u8>> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidArgument(format!(
            "refusing to write an empty {}x{} feature matrix",
            m.rows(),
            m.cols()
        )));
    }
    let l = u32::try_from(m.rows()).map_err(|_| Error::OutOfRange("too many frames".into()))?;
    let d = u32::try_from(m.cols()).map_err(|_| Error::OutOfRange("feature dimension too large".into()))?;
    if !m.is_finite() {
        return Err(Error::NonFinite("features to write".into()));
    }
    let mut out = Vec::with_capacity(HEADER + 4 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&l.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let fail = |msg: String| Error::format(path, msg);
    if bytes.len() < HEADER {
        return Err(fail(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail("bad magic (expected HTFE)".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let l = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes")) as usize;
    if l == 0 || d == 0 {
        return Err(fail(format!("empty shape {l}x{d}")));
    }
    let payload = l
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail(format!("shape {l}x{d} overflows")))?;
    if bytes.len() - HEADER != payload {
        return Err(fail(format!(
            "payload is {} bytes, expected {payload} for {l}x{d}",
            bytes.len() - HEADER
        )));
    }
    let data = bytes[HEADER..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::from_vec(l, d, data)
}

pub fn write_features(path: &Path, m: &Matrix) -> Result<()> {
    write_atomic(path, &encode_features(m)?)
}

pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_exact_for_f32_values() {
        let m = Matrix::from_fn(3, 5, |i, j| ((i * 5 + j) as f32 * 0.37 - 1.0) as f64);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.htfe");
        write_features(&p, &m).unwrap();
        assert_eq!(read_features(&p).unwrap(), m);
        assert_eq!(fs::read(&p).unwrap().len(), HEADER + 4 * 15);
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.htfe");
        let good = encode_features(&Matrix::filled(2, 2, 1.0)).unwrap();

        let mut wrong_magic = good.clone();
        wrong_magic[0] = b'X';
        fs::write(&p, &wrong_magic).unwrap();
        let err = read_features(&p).unwrap_err();
        assert!(err.to_string().contains("bad.htfe") && err.to_string().contains("magic"), "{err}");

        fs::write(&p, &good[..good.len() - 1]).unwrap();
        assert!(read_features(&p).is_err());

        let mut huge = good.clone();
        huge[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        huge[10..14].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(decode_features(&huge, &p).is_err());

        assert!(write_features(&p, &Matrix::zeros(0, 3)).is_err());
    }
}
