//! Flat binary weight container.
//!
//! Layout: `b"RDMW"`, `u32` version, then records until end of input:
//! `u32` name length, UTF-8 name, `u32` rank, `rank x u64` dims, then the
//! values as little-endian `f64`. All integers are little-endian.

use std::fs;
use std::path::Path;

use super::matrix::Matrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RDMW";
pub const VERSION: u32 = 1;

pub fn encode(tensors: &[(String, Matrix)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, m) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::parse(
                self.path,
                0,
                format!("truncated {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Decodes a container; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<(String, Matrix)>> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(path, 0, "bad magic, expected RDMW"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(path, 0, format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::parse(path, 0, format!("record at byte {start}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")?;
        let dims = (0..rank)
            .map(|_| r.u64("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => {
                return Err(Error::parse(
                    path,
                    0,
                    format!("{name}: rank {rank} tensors are not supported"),
                ))
            }
        };
        let count = rows
            .checked_mul(cols)
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::parse(path, 0, format!("{name}: dims overflow")))?;
        let raw = r.take(count * 8, "values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Matrix::from_vec(rows, cols, values)?));
    }
    Ok(out)
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Matrix)]) -> Result<()> {
    fs::write(path, encode(tensors)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Matrix)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let bytes = encode(&[("a".into(), Matrix::scalar(1.5))]);
        assert_eq!(&bytes[..4], b"RDMW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes[12], b'a');
        assert_eq!(bytes.len(), 8 + 4 + 1 + 4 + 16 + 8);
    }

    #[test]
    fn rejects_corruption() {
        let p = Path::new("mem");
        assert!(decode(b"XXXX\x01\0\0\0", p).is_err());
        let mut bytes = encode(&[("w".into(), Matrix::zeros(2, 2))]);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes, p), Err(Error::Parse { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            tensors in prop::collection::vec(
                ("[a-z.]{1,12}", 1usize..5, 1usize..5, prop::collection::vec(any::<f64>(), 16)),
                0..6,
            )
        ) {
            let tensors: Vec<(String, Matrix)> = tensors
                .into_iter()
                .map(|(n, r, c, vals)| (n, Matrix::from_vec(r, c, vals[..r * c].to_vec()).unwrap()))
                .collect();
            let back = decode(&encode(&tensors), Path::new("mem")).unwrap();
            prop_assert_eq!(back.len(), tensors.len());
            for ((n1, m1), (n2, m2)) in tensors.iter().zip(&back) {
                prop_assert_eq!(n1, n2);
                prop_assert_eq!(m1.shape(), m2.shape());
                for (a, b) in m1.as_slice().iter().zip(m2.as_slice()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }
}
