//! Little-endian tensor records.
//!
//! Layout: magic `ESSM`, format version `u32`, rank `u32`, one `u64` per
//! extent, dtype tag `u8` (0 = f32, 1 = f64), then the raw elements.

use std::io::{Read, Write};

use super::{DType, Element, Result, Tensor, TensorError};

pub const TENSOR_MAGIC: &[u8; 4] = b"ESSM";
pub const TENSOR_VERSION: u32 = 1;

pub fn write_tensor<T: Element, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(17 + 8 * t.rank() + t.numel() * T::DTYPE.size());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.push(T::DTYPE as u8);
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Format(format!("truncated {what}")),
        _ => TensorError::Io(e),
    })?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact(r, 4, what)?.try_into().unwrap()))
}

/// Reads one record, converting to `T` if the stored dtype differs.
pub fn read_tensor<T: Element, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let magic = read_exact(r, 4, "magic")?;
    if magic != TENSOR_MAGIC {
        return Err(TensorError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(r, "version")?;
    if version != TENSOR_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let rank = read_u32(r, "rank")? as usize;
    if rank > 16 {
        return Err(TensorError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(read_exact(r, 8, "extent")?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| TensorError::Format("extent overflow".into()))?);
    }
    let tag = read_exact(r, 1, "dtype")?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| TensorError::Format(format!("unknown dtype tag {tag}")))?;
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::Format("element count overflow".into()))?;
    let bytes = read_exact(r, n * dtype.size(), "data")?;
    let data: Vec<T> = match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    Tensor::from_vec(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::from_vec(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"ESSM");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(buf[12..20].try_into().unwrap()), 2);
        assert_eq!(buf[20], 0);
        assert_eq!(buf.len(), 21 + 8);
        assert_eq!(f32::from_le_bytes(buf[25..29].try_into().unwrap()), -2.0);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::ones(vec![3, 2]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        for cut in [0, 3, 10, 20, buf.len() - 1] {
            assert!(read_tensor::<f64, _>(&mut &buf[..cut]).is_err(), "cut {cut}");
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_tensor::<f64, _>(&mut bad.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            shape in proptest::collection::vec(0usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2)).collect();
            let t = Tensor::from_vec(shape.clone(), data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back: Tensor<f64> = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
