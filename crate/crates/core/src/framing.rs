//! Little-endian binary framing shared by every artifact file.
//!
//! A tensor is written as `rank: u32`, `dims: u32 × rank`, then the payload
//! as `f64` values. Strings are `len: u32` followed by UTF-8 bytes.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_u8(w: &mut impl Write, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_usize(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    write_u32(w, v)
}

pub fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_usize(w, s.len())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    write_usize(w, t.rank())?;
    for &d in t.shape() {
        write_usize(w, d)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

pub fn read_u8(r: &mut impl Read) -> Result<u8> {
    Ok(read_exact::<1>(r, "u8")?[0])
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, "u32")?))
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact(r, "u64")?))
}

pub fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(read_exact(r, "f64")?))
}

pub fn read_usize(r: &mut impl Read) -> Result<usize> {
    Ok(read_u32(r)? as usize)
}

pub fn read_str(r: &mut impl Read) -> Result<String> {
    let n = read_usize(r)?;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| Error::Format(format!("truncated string: {e}")))?;
    String::from_utf8(buf).map_err(|e| Error::Format(format!("string is not utf-8: {e}")))
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rank = read_usize(r)?;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank).map(|_| read_usize(r)).collect::<Result<Vec<_>>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor size overflows".into()))?;
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated tensor payload: {e}")))?;
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn expect_magic(r: &mut impl Read, magic: &[u8; 8]) -> Result<()> {
    let got: [u8; 8] = read_exact(r, "magic")?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn tensor_framing_is_bit_exact(
            shape in prop::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n as u64)
                .map(|i| f64::from_bits((seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15)) & !(0x7ffu64 << 52) | (0x3ffu64 << 52)))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let t = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
