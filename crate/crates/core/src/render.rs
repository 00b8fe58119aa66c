//! Grayscale rendering of activation maps.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Min-max scale a rank-2 map to 8-bit; a constant map renders black.
pub fn to_gray8(map: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = map.dims2()?;
    let (lo, hi) = (map.min(), map.max());
    let span = hi - lo;
    let pixels = map
        .data()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                (((v - lo) / span) * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok((h, w, pixels))
}

/// Binary PGM (`P5`) bytes.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w, pixels) = to_gray8(map)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels);
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(map)?).map_err(Error::from)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scales_to_full_range() {
        let t = Tensor::new(vec![1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        assert_eq!(to_gray8(&t).unwrap().2, vec![0, 128, 255]);
        let bytes = encode_pgm(&t).unwrap();
        assert!(bytes.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(bytes.len(), 11 + 3);
    }

    #[test]
    fn constant_map_is_black() {
        let t = Tensor::new(vec![2, 2], vec![4.0; 4]).unwrap();
        assert_eq!(to_gray8(&t).unwrap().2, vec![0; 4]);
    }
}
