//! `NRTF` tensor files: magic, `u16` version, `u8` rank, `u32` dims, then
//! little-endian `f64` values in row-major order.

use std::path::Path;

use super::IoError;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"NRTF";
pub const TENSOR_VERSION: u16 = 1;

pub fn encode_tensor(x: &Tensor) -> Result<Vec<u8>, IoError> {
    let rank = u8::try_from(x.shape().len()).map_err(|_| IoError::Unsupported("rank above 255".into()))?;
    let mut out = Vec::with_capacity(7 + 4 * rank as usize + 8 * x.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(rank);
    for &d in x.shape() {
        let d = u32::try_from(d).map_err(|_| IoError::Unsupported(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in x.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, IoError> {
    if bytes.len() < 7 || &bytes[..4] != TENSOR_MAGIC {
        return Err(IoError::Format("missing NRTF magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_VERSION {
        return Err(IoError::Unsupported(format!("tensor file version {version}")));
    }
    let rank = bytes[6] as usize;
    let header = 7 + 4 * rank;
    if bytes.len() < header {
        return Err(IoError::Format("truncated dimensions".into()));
    }
    let shape: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| IoError::Format("element count overflows".into()))?;
    let payload = &bytes[header..];
    if Some(payload.len()) != n.checked_mul(8) {
        return Err(IoError::Format(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            n.saturating_mul(8)
        )));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(shape, data).map_err(|e| IoError::Format(e.to_string()))
}

pub fn write_tensor(path: &Path, x: &Tensor) -> Result<(), IoError> {
    std::fs::write(path, encode_tensor(x)?)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor, IoError> {
    decode_tensor(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let x = Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap();
        let b = encode_tensor(&x).unwrap();
        assert_eq!(&b[..7], b"NRTF\x01\x00\x02");
        assert_eq!(&b[7..15], &[2, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(b.len(), 15 + 16);
    }

    #[test]
    fn rejects_corruption() {
        let b = encode_tensor(&Tensor::zeros(vec![3])).unwrap();
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        assert!(decode_tensor(b"NRTX\x01\x00\x00").is_err());
        let mut v = b.clone();
        v[4] = 9;
        assert!(matches!(decode_tensor(&v), Err(IoError::Unsupported(_))));
    }

    proptest! {
        #[test]
        fn round_trip_bit_exact(shape in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let mut rng = crate::rng::NoiseRng::new(seed, 0);
            let data: Vec<f64> = (0..n).map(|_| f64::from_bits(rng.next_u64())).collect();
            let x = Tensor::new(shape, data).unwrap();
            let back = decode_tensor(&encode_tensor(&x).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), x.shape());
            for (a, b) in back.data().iter().zip(x.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
