//! DRFT binary tensor files.
//!
//! Layout: magic `b"DRFT"`, version byte (1), dtype byte (0 = f32,
//! 1 = f64), rank byte, `rank` little-endian u32 dims, then the values in
//! row-major order as little-endian floats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"DRFT";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::format("DRFT", format!("unknown dtype code {other}"))),
        }
    }
}

pub fn encode_tensor(t: &Tensor, dtype: Dtype) -> Result<Vec<u8>> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::format("DRFT", format!("rank {} exceeds 255", t.rank())))?;
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let mut out = Vec::with_capacity(7 + 4 * t.rank() + width * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d)
            .map_err(|_| Error::format("DRFT", format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F32 => {
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Dtype::F64 => {
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, Dtype)> {
    let bad = |d: &str| Error::format("DRFT", d.to_string());
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(bad("missing DRFT magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(bad("truncated header"));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let body = &bytes[header..];
    let data: Vec<f64> = match dtype {
        Dtype::F32 => {
            if body.len() != 4 * n {
                return Err(bad("payload length does not match shape"));
            }
            body.chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect()
        }
        Dtype::F64 => {
            if body.len() != 8 * n {
                return Err(bad("payload length does not match shape"));
            }
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        }
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

pub fn save_tensor(path: &Path, t: &Tensor, dtype: Dtype) -> Result<()> {
    let bytes = encode_tensor(t, dtype)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_tensor(&bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = encode_tensor(&t, Dtype::F64).unwrap();
        assert_eq!(&b[..4], b"DRFT");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 1);
        assert_eq!(b[6], 2);
        assert_eq!(&b[7..11], &2u32.to_le_bytes());
        assert_eq!(&b[11..15], &3u32.to_le_bytes());
        assert_eq!(b.len(), 15 + 48);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_tensor(b"NOPE\x01\x01\x00").is_err());
        assert!(decode_tensor(b"DRFT\x01\x07\x00").is_err());
        let mut b = encode_tensor(&Tensor::from_vec(vec![1.0, 2.0]), Dtype::F32).unwrap();
        b.pop();
        assert!(decode_tensor(&b).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let mut rng = crate::numerics::Rng::new(seed);
            let n: usize = dims.iter().product();
            let t = Tensor::new(dims, (0..n).map(|_| rng.gaussian() * 1e3).collect()).unwrap();
            let bytes = encode_tensor(&t, Dtype::F64).unwrap();
            let (back, dtype) = decode_tensor(&bytes).unwrap();
            prop_assert_eq!(dtype, Dtype::F64);
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(encode_tensor(&back, Dtype::F64).unwrap(), bytes);
        }

        #[test]
        fn f32_files_round_trip_bit_exact(vals in prop::collection::vec(-1e6f32..1e6, 1..32)) {
            let t = Tensor::from_vec(vals.iter().map(|&v| v as f64).collect());
            let bytes = encode_tensor(&t, Dtype::F32).unwrap();
            let (back, _) = decode_tensor(&bytes).unwrap();
            prop_assert_eq!(encode_tensor(&back, Dtype::F32).unwrap(), bytes);
        }
    }
}
