//! TNSR binary tensor files.
//!
//! Layout (little-endian throughout):
//!
//! | bytes        | field                          |
//! |--------------|--------------------------------|
//! | 0..4         | magic `TNSR`                   |
//! | 4            | version, always 1              |
//! | 5            | dtype, 0 = f32                 |
//! | 6            | ndim in 1..=4                  |
//! | 7..7+4*ndim  | dims as u32                    |
//! | rest         | row-major f32 payload          |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: [u8; 4] = *b"TNSR";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn header_len(ndim: usize) -> usize {
    7 + 4 * ndim
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(header_len(t.rank()) + 4 * t.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 7 {
        return Err(Error::TruncatedPayload {
            expected: 7,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("length checked");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::UnsupportedDtype(bytes[5]));
    }
    let ndim = bytes[6] as usize;
    if ndim == 0 || ndim > MAX_RANK {
        return Err(Error::BadRank(ndim));
    }
    let head = header_len(ndim);
    if bytes.len() < head {
        return Err(Error::TruncatedPayload {
            expected: head,
            found: bytes.len(),
        });
    }
    let shape: Vec<usize> = bytes[7..head]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")) as usize)
        .collect();
    let count: usize = shape.iter().product();
    let expected = head + 4 * count;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::InvalidShape {
            shape,
            len: (bytes.len() - head) / 4,
        });
    }
    let data = bytes[head..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
        .collect();
    Tensor::new(shape, data)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    decode(&fs::read(path)?)
}

pub fn write_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(t))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_scalar_is_fifteen_bytes() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(bytes.len(), 15);
        assert_eq!(&bytes[..7], b"TNSR\x01\x00\x01");
        assert_eq!(&bytes[7..11], &[1, 0, 0, 0]);
        assert_eq!(&bytes[11..], &[0, 0, 0, 0]);
    }

    #[test]
    fn matrix_header_and_payload() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(bytes[6], 2);
        assert_eq!(&bytes[7..15], &[2, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(bytes.len() - header_len(2), 16);
        assert_eq!(&bytes[15..19], &1.0f32.to_le_bytes());
    }

    #[test]
    fn decodes_vector() {
        let mut bytes = b"TNSR\x01\x00\x01".to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&2.0f32.to_le_bytes());
        let t = decode(&bytes).unwrap();
        assert_eq!(t.shape(), &[2]);
        assert_eq!(t.data(), &[1.0, 2.0]);
    }

    #[test]
    fn distinct_errors() {
        let good = encode(&Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        let e = decode(&bad).unwrap_err();
        assert!(matches!(e, Error::BadMagic(_)));
        assert_eq!(e.code(), "bad_magic");

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad), Err(Error::UnsupportedVersion(2))));

        let e = decode(&good[..good.len() - 1]).unwrap_err();
        assert!(matches!(e, Error::TruncatedPayload { .. }));
        assert_eq!(e.code(), "truncated_payload");

        assert!(matches!(
            decode(b"TNS"),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tnsr");
        let t = Tensor::new(vec![1, 2, 3], (0..6).map(|v| v as f32 * 0.25).collect()).unwrap();
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        proptest::collection::vec(1usize..5, 1..=4).prop_flat_map(|shape| {
            let len = shape.iter().product::<usize>();
            proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), len)
                .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn round_trip_is_bit_identical(t in arb_tensor()) {
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
