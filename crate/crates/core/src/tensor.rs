//! Dense row-major `f32` tensors and the numeric helpers shared by every
//! other module.
//!
//! Tensors are immutable once built: every constructor validates that the
//! shape matches the data length and that all values are finite.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor from `f64` values, rounding each to `f32`.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, vec![0.0; len])
    }

    pub fn scalar_vec(data: Vec<f32>) -> Result<Self> {
        let len = data.len();
        Self::new(vec![len], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape, self.data.len())?;
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    /// Row-major flat offset of a full index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| acc * extent + i)
    }

    pub fn get(&self, index: &[usize]) -> f32 {
        self.data[self.offset(index)]
    }

    /// Spatial extents `(m, n, p)` of a rank-3 feature map.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [m, n, p] => Ok((m, n, p)),
            _ => Err(Error::shape(
                None,
                format!("expected rank-3 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::shape(
                None,
                format!("expected rank-2 tensor, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    /// Flat index of the first (row-major) maximum.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.len() > MAX_RANK {
        return Err(Error::BadRank(shape.len()));
    }
    if shape.contains(&0) || shape.iter().product::<usize>() != len {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn dot_f32(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

pub fn l2_norm_f32(v: &[f32]) -> f64 {
    dot_f32(v, v).sqrt()
}

/// Corner-aligned source coordinate for output index `dst`.
pub fn corner_aligned_source(dst: usize, in_len: usize, out_len: usize) -> f64 {
    if out_len <= 1 || in_len <= 1 {
        0.0
    } else {
        dst as f64 * (in_len - 1) as f64 / (out_len - 1) as f64
    }
}

/// Nearest input cell for an output coordinate under the corner-aligned
/// mapping; the inverse of [`corner_aligned_source`] on the grid.
pub fn nearest_source_cell(dst: usize, out_len: usize, in_len: usize) -> usize {
    let src = corner_aligned_source(dst, in_len, out_len);
    (src.round() as usize).min(in_len - 1)
}

/// Sample a row-major `h x w` grid (`stride` values per cell, channel
/// `channel`) at fractional coordinates.
pub(crate) fn bilinear_sample(
    data: &[f64],
    h: usize,
    w: usize,
    stride: usize,
    channel: usize,
    sy: f64,
    sx: f64,
) -> f64 {
    let y0 = (sy.floor() as usize).min(h - 1);
    let x0 = (sx.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let at = |y: usize, x: usize| data[(y * w + x) * stride + channel];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize of a rank-2 map with corner-aligned sampling
/// (`src = dst * (in - 1) / (out - 1)`).
pub fn bilinear_resize(map: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::shape(
            None,
            format!("bilinear_resize expects rank 2, got {:?}", map.shape()),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::EmptyInput);
    }
    let (h, w) = map.dims2()?;
    if (h, w) == (out_h, out_w) {
        return Ok(map.clone());
    }
    let src = map.to_f64();
    let mut out = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let sy = corner_aligned_source(oy, h, out_h);
        for ox in 0..out_w {
            let sx = corner_aligned_source(ox, w, out_w);
            out.push(bilinear_sample(&src, h, w, 1, 0, sy, sx) as f32);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(Error::InvalidShape { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![], vec![]),
            Err(Error::BadRank(0))
        ));
        assert!(matches!(
            Tensor::new(vec![1, 1, 1, 1, 1], vec![0.0]),
            Err(Error::BadRank(5))
        ));
        assert!(matches!(
            Tensor::new(vec![1], vec![f32::NAN]),
            Err(Error::NonFinite(0))
        ));
    }

    #[test]
    fn resize_constant() {
        let t = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let r = bilinear_resize(&t, 3, 3).unwrap();
        assert_eq!(r.shape(), &[3, 3]);
        assert!(r.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn resize_row() {
        let t = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let r = bilinear_resize(&t, 1, 3).unwrap();
        assert_eq!(r.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn resize_identity_and_errors() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        assert_eq!(bilinear_resize(&t, 2, 3).unwrap(), t);
        assert!(matches!(bilinear_resize(&t, 0, 3), Err(Error::EmptyInput)));
        let v = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        assert!(bilinear_resize(&v, 2, 2).is_err());
    }

    #[test]
    fn nearest_cell_inverts_corner_mapping() {
        // 7 pixels over a 4-cell grid: cells sit at pixels 0, 2, 4, 6.
        let cells: Vec<_> = (0..7).map(|px| nearest_source_cell(px, 7, 4)).collect();
        assert_eq!(cells, vec![0, 1, 1, 2, 2, 3, 3]);
        assert_eq!(nearest_source_cell(5, 9, 1), 0);
    }

    proptest! {
        #[test]
        fn resize_stays_within_bounds(
            h in 1usize..5, w in 1usize..5, oh in 1usize..9, ow in 1usize..9,
            seed in proptest::collection::vec(-10.0f32..10.0, 16)
        ) {
            let t = Tensor::new(vec![h, w], seed[..h * w].to_vec()).unwrap();
            let r = bilinear_resize(&t, oh, ow).unwrap();
            let (lo, hi) = (t.min(), t.max());
            for &v in r.data() {
                prop_assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
            }
            // corners are preserved
            prop_assert!((r.get(&[0, 0]) - t.get(&[0, 0])).abs() < 1e-6);
            if oh > 1 && ow > 1 {
                prop_assert!((r.get(&[oh - 1, ow - 1]) - t.get(&[h - 1, w - 1])).abs() < 1e-5);
            }
        }

        #[test]
        fn resize_of_constant_is_constant(
            h in 1usize..5, w in 1usize..5, oh in 1usize..9, ow in 1usize..9, c in -5.0f32..5.0
        ) {
            let t = Tensor::new(vec![h, w], vec![c; h * w]).unwrap();
            let r = bilinear_resize(&t, oh, ow).unwrap();
            prop_assert!(r.data().iter().all(|&v| (v - c).abs() <= 1e-6));
        }
    }
}
