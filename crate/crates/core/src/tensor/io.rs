//! Flat binary tensor format: the magic `RSTN`, a little-endian `u32` rank,
//! `rank` little-endian `u32` dims, then the values as little-endian `f64`
//! in row-major order.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"RSTN";

pub fn write_tensor(out: &mut impl Write, t: &Tensor) -> Result<usize> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::format("tensor", format!("dim {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(buf.len())
}

pub fn read_tensor(input: &mut impl Read) -> Result<Tensor> {
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    if &word != TENSOR_MAGIC {
        return Err(Error::format("tensor", format!("bad magic {word:?}")));
    }
    input.read_exact(&mut word)?;
    let rank = u32::from_le_bytes(word) as usize;
    if rank > 8 {
        return Err(Error::format("tensor", format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input.read_exact(&mut word)?;
        shape.push(u32::from_le_bytes(word) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut raw = vec![0u8; numel * 8];
    input.read_exact(&mut raw)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = b"RSTN".to_vec();
        for w in [2u32, 1, 2] {
            expect.extend_from_slice(&w.to_le_bytes());
        }
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-0.5f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"XXXX\0\0\0\0".to_vec();
        assert!(matches!(read_tensor(&mut buf.as_slice()), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn roundtrip(shape in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 7)) as f64).sin()).collect();
            let t = Tensor::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            prop_assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
        }
    }
}
