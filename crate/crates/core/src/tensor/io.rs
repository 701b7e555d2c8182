//! Little-endian binary container for named tensors.
//!
//! ```text
//! magic        4 bytes  "GNNW"
//! version      u32
//! header_len   u32      followed by header_len bytes of UTF-8 (hyperparameters)
//! count        u32
//! per tensor:
//!   name_len   u32, name bytes
//!   rank       u32, rank x u64 extents
//!   data       product(extents) x f64
//! ```

use std::io::{self, Read, Write};

use super::Tensor;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"GNNW";
pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

/// Free-form header carried alongside the tensors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorFileHeader {
    pub version: u32,
    pub text: String,
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn write_tensors<W: Write>(
    mut w: W,
    header: &str,
    tensors: &[(String, Tensor)],
) -> io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for e in t.shape() {
            w.write_all(&(*e as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> io::Result<String> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| invalid(format!("non UTF-8 string: {e}")))
}

pub fn read_tensors<R: Read>(mut r: R) -> io::Result<(TensorFileHeader, Vec<(String, Tensor)>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(invalid(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != WEIGHTS_FORMAT_VERSION {
        return Err(invalid(format!(
            "unsupported weights format version {version} (expected {WEIGHTS_FORMAT_VERSION})"
        )));
    }
    let header_len = read_u32(&mut r)? as usize;
    let text = read_string(&mut r, header_len)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let name = read_string(&mut r, name_len)?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(invalid(format!("tensor {name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, e| acc.checked_mul(*e))
            .filter(|n| *n <= 1 << 28)
            .ok_or_else(|| invalid(format!("tensor {name}: implausible shape {shape:?}")))?;
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| invalid(e.to_string()))?;
        tensors.push((name, t));
    }
    Ok((TensorFileHeader { version, text }, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(proptest::num::f64::ANY, 1..40),
            header in "[a-z0-9 =]{0,30}",
        ) {
            let t = Tensor::new(vec![values.len()], values.clone()).unwrap();
            let tensors = vec![("layer.w".to_string(), t), ("s".to_string(), Tensor::scalar(-0.0))];
            let mut buf = Vec::new();
            write_tensors(&mut buf, &header, &tensors).unwrap();
            let (h, back) = read_tensors(buf.as_slice()).unwrap();
            prop_assert_eq!(h.text, header);
            prop_assert_eq!(back.len(), 2);
            for (a, b) in back[0].1.data().iter().zip(&values) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back[1].1.data()[0].to_bits(), (-0.0f64).to_bits());
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, "", &[("a".into(), Tensor::zeros(&[2, 2]))]).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert_eq!(
            read_tensors(bad.as_slice()).unwrap_err().kind(),
            io::ErrorKind::InvalidData
        );
        let short = &buf[..buf.len() - 3];
        assert_eq!(
            read_tensors(short).unwrap_err().kind(),
            io::ErrorKind::UnexpectedEof
        );
        let mut wrong_version = buf.clone();
        wrong_version[4] = 9;
        assert!(read_tensors(wrong_version.as_slice()).is_err());
    }
}
