//! Binary tensor files: magic `ANNT`, then little-endian `u32` version,
//! `u32` rank, `rank` × `u64` dims, and the `f64` values in row-major order.

use std::io::{self, Read, Write};
use std::path::Path;

use ann_core::Tensor;

pub const MAGIC: &[u8; 4] = b"ANNT";
pub const VERSION: u32 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * (t.rank() + t.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn decode(mut bytes: &[u8]) -> io::Result<Tensor> {
    let mut magic = [0u8; 4];
    bytes.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid("not an ANNT file"));
    }
    let mut word = [0u8; 4];
    bytes.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(invalid(format!("unsupported ANNT version {version}")));
    }
    bytes.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    let mut long = [0u8; 8];
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        bytes.read_exact(&mut long)?;
        shape.push(
            usize::try_from(u64::from_le_bytes(long))
                .map_err(|_| invalid("dimension overflows"))?,
        );
    }
    let count = shape.iter().product::<usize>();
    if bytes.len() != count * 8 {
        return Err(invalid(format!(
            "expected {count} values, found {} bytes",
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::from_vec(&shape, values).map_err(|e| invalid(e.to_string()))
}

pub fn write(path: &Path, t: &Tensor) -> io::Result<()> {
    std::fs::File::create(path)?.write_all(&encode(t))
}

pub fn read(path: &Path) -> io::Result<Tensor> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let t = Tensor::from_values(&[1, 2], &[1.5, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"ANNT");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..20], &1u64.to_le_bytes());
        assert_eq!(&b[28..36], &1.5f64.to_le_bytes());
        assert_eq!(b.len(), 12 + 16 + 16);
    }

    #[test]
    fn round_trip_is_exact() {
        let t =
            Tensor::seeded_fill(&[3, 4, 5], 9, ann_core::tensor::Distribution::Gaussian).unwrap();
        assert_eq!(decode(&encode(&t)).unwrap(), t);
    }

    #[test]
    fn truncated_and_foreign_files_rejected() {
        let t = Tensor::full(&[2, 2], 1.0).unwrap();
        let b = encode(&t);
        assert!(decode(&b[..b.len() - 1]).is_err());
        assert!(decode(b"NOPE\x01\0\0\0").is_err());
    }
}
