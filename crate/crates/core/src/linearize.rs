//! Folding a model head into one affine map at an operating point.
//!
//! Every supported head layer is affine once its masks are fixed: pooling
//! becomes a transformation matrix, GMP is GAP restricted to the per-channel
//! maximum, and ReLU is a 0/1 row mask on its pre-activation. Composing them
//! gives per-position blocks `W[i,j]` (`l x p`) and a bias `B` such that
//! `sum_ij W[i,j] A[i,j] + B` equals the head output for that exact `A`.

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{read_tensor, write_tensor};
use crate::nn::{batchnorm_affine, ForwardTrace, Layer, Model};
use crate::tensor::Tensor;

/// `T*_GAP` reshaped to `[p, m, n, p]`: `1/(mn)` where the output channel
/// equals the input channel, zero elsewhere.
pub fn gap_matrix(m: usize, n: usize, p: usize) -> Result<Tensor> {
    if m == 0 || n == 0 || p == 0 {
        return Err(Error::EmptyInput);
    }
    let w = 1.0 / (m * n) as f32;
    let mut data = vec![0f32; p * m * n * p];
    for k_out in 0..p {
        for pos in 0..m * n {
            data[(k_out * m * n + pos) * p + k_out] = w;
        }
    }
    Tensor::new(vec![p, m, n, p], data)
}

/// One-hot-per-channel indicator of each channel's maximum.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxMask {
    pub mask: Tensor,
}

impl MaxMask {
    /// `(i, j)` of the selected maximum for each channel.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        let (m, n, p) = self.mask.dims3().expect("mask is rank 3");
        let d = self.mask.data();
        (0..p)
            .map(|k| {
                let pos = (0..m * n)
                    .find(|&pos| d[pos * p + k] == 1.0)
                    .expect("each channel has one selected position");
                (pos / n, pos % n)
            })
            .collect()
    }

    /// `T*_GMP = mn (T*_GAP ⊙ M)`, shape `[p, m, n, p]`.
    pub fn transformation_matrix(&self) -> Result<Tensor> {
        let (m, n, p) = self.mask.dims3()?;
        let gap = gap_matrix(m, n, p)?;
        let scale = (m * n) as f32;
        let mask = self.mask.data();
        let data = gap
            .data()
            .iter()
            .enumerate()
            .map(|(idx, &g)| scale * g * mask[idx % (m * n * p)])
            .collect();
        Tensor::new(vec![p, m, n, p], data)
    }
}

/// Per channel, marks the first row-major position holding the maximum.
pub fn gmp_mask(a: &Tensor) -> Result<MaxMask> {
    let (m, n, p) = a.dims3()?;
    let x = a.data();
    let mut data = vec![0f32; m * n * p];
    for k in 0..p {
        let mut best = 0;
        for pos in 1..m * n {
            if x[pos * p + k] > x[best * p + k] {
                best = pos;
            }
        }
        data[best * p + k] = 1.0;
    }
    Ok(MaxMask {
        mask: Tensor::new(vec![m, n, p], data)?,
    })
}

/// Active units of a ReLU at its operating point.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReluMask {
    pub mask: Vec<bool>,
}

impl ReluMask {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if x.len() != self.mask.len() {
            return Err(Error::shape(None, "relu mask length differs from input"));
        }
        let data = x
            .data()
            .iter()
            .zip(&self.mask)
            .map(|(&v, &on)| if on { v } else { 0.0 })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Zero pre-activations count as inactive.
pub fn relu_mask(pre_activation: &Tensor) -> ReluMask {
    ReluMask {
        mask: pre_activation.data().iter().map(|&v| v > 0.0).collect(),
    }
}

/// Multiplies a `[p_out, m, n, p]` pooling matrix with the flattened `A`.
pub fn apply_pooling_matrix(matrix: &Tensor, a: &Tensor) -> Result<Tensor> {
    let (m, n, p) = a.dims3()?;
    let cols = m * n * p;
    if matrix.rank() != 4 || matrix.shape()[1..] != [m, n, p] {
        return Err(Error::shape(
            None,
            format!(
                "matrix {:?} incompatible with A {:?}",
                matrix.shape(),
                a.shape()
            ),
        ));
    }
    let rows = matrix.shape()[0];
    let out = (0..rows)
        .map(|r| crate::tensor::dot_f32(&matrix.data()[r * cols..(r + 1) * cols], a.data()) as f32)
        .collect();
    Tensor::new(vec![rows], out)
}

/// Identifier binding a linearization to the feature map it was built on.
pub fn operating_point_id(a: &Tensor) -> u64 {
    let mut h = DefaultHasher::new();
    a.shape().hash(&mut h);
    for v in a.data() {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

/// The head as `E = sum_ij W[i,j] A[i,j] + B` at one operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearizedHead {
    /// `[m, n, l, p]`.
    pub weights: Tensor,
    /// `[l]`.
    pub bias: Tensor,
    /// `None` for heads loaded from disk.
    pub operating_point: Option<u64>,
}

impl LinearizedHead {
    pub fn grid(&self) -> (usize, usize) {
        (self.weights.shape()[0], self.weights.shape()[1])
    }

    pub fn embedding_len(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.weights.shape()[3]
    }

    /// The `l x p` block for position `(i, j)`, row-major.
    pub fn block(&self, i: usize, j: usize) -> &[f32] {
        let (_, n) = self.grid();
        let size = self.embedding_len() * self.channels();
        let start = (i * n + j) * size;
        &self.weights.data()[start..start + size]
    }

    pub fn bias_f64(&self) -> Vec<f64> {
        self.bias.to_f64()
    }

    /// Errors unless `a` has the grid and channel count of this head and,
    /// when known, is the feature map the head was linearized at.
    pub fn check_feature(&self, a: &Tensor) -> Result<()> {
        let (m, n, p) = a.dims3()?;
        if (m, n) != self.grid() || p != self.channels() {
            return Err(Error::shape(
                None,
                format!(
                    "feature {:?} does not fit head grid {:?} with {} channels",
                    a.shape(),
                    self.grid(),
                    self.channels()
                ),
            ));
        }
        if let Some(id) = self.operating_point {
            if id != operating_point_id(a) {
                return Err(Error::OperatingPointMismatch);
            }
        }
        Ok(())
    }

    /// `W[i,j] A[i,j]` for every position, as `m*n` rows of length `l`.
    pub fn position_features(&self, a: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.check_feature(a)?;
        let (m, n) = self.grid();
        let (l, p) = (self.embedding_len(), self.channels());
        let x = a.data();
        Ok((0..m * n)
            .map(|pos| {
                let block = self.block(pos / n, pos % n);
                let feat = &x[pos * p..(pos + 1) * p];
                (0..l)
                    .map(|o| crate::tensor::dot_f32(&block[o * p..(o + 1) * p], feat))
                    .collect()
            })
            .collect())
    }

    /// `sum_ij W[i,j] A[i,j] + B`.
    pub fn apply(&self, a: &Tensor) -> Result<Vec<f64>> {
        let mut e = self.bias_f64();
        for f in self.position_features(a)? {
            for (acc, v) in e.iter_mut().zip(f) {
                *acc += v;
            }
        }
        Ok(e)
    }

    /// Writes `<stem>_w.tnsr` and `<stem>_b.tnsr`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_tensor(&self.weights, dir.join(format!("{stem}_w.tnsr")))?;
        write_tensor(&self.bias, dir.join(format!("{stem}_b.tnsr")))
    }

    pub fn load(dir: impl AsRef<Path>, stem: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let weights = read_tensor(dir.join(format!("{stem}_w.tnsr")))?;
        let bias = read_tensor(dir.join(format!("{stem}_b.tnsr")))?;
        if weights.rank() != 4 || bias.shape() != [weights.shape()[2]] {
            return Err(Error::shape(None, "inconsistent linearized head files"));
        }
        Ok(Self {
            weights,
            bias,
            operating_point: None,
        })
    }
}

/// Affine map from the flattened feature map (`mnp` inputs) to the current
/// activation, tracked in the cheapest exact form for each stage.
enum Affine {
    /// Elementwise `scale * A + shift`, still shaped like `A`.
    Spatial { scale: Vec<f64>, shift: Vec<f64> },
    /// Elementwise map followed by flatten.
    Flat { scale: Vec<f64>, shift: Vec<f64> },
    /// `rows x mnp` matrix plus bias.
    Dense {
        w: Vec<f64>,
        b: Vec<f64>,
        rows: usize,
    },
}

/// Composes every layer after the feature layer into a [`LinearizedHead`]
/// using the masks implied by `trace`. A trailing `l2_normalize` is left
/// out: the result describes `E` before normalization.
pub fn linearize_head(model: &Model, trace: &ForwardTrace) -> Result<LinearizedHead> {
    let [m, n, p] = model.feature_shape();
    let cols = m * n * p;
    let a = &trace.conv_feature;
    if a.shape() != [m, n, p] || trace.layer_outputs.len() != model.layers.len() {
        return Err(Error::shape(None, "trace does not belong to this model"));
    }
    let mut state = Affine::Spatial {
        scale: vec![1.0; cols],
        shift: vec![0.0; cols],
    };
    for (offset, layer) in model.head_layers().iter().enumerate() {
        let idx = model.last_conv_index + 1 + offset;
        let input = &trace.layer_outputs[idx - 1];
        state = match (state, layer) {
            (
                Affine::Spatial {
                    mut scale,
                    mut shift,
                },
                Layer::Relu,
            ) => {
                for (on, (s, t)) in relu_mask(input)
                    .mask
                    .iter()
                    .zip(scale.iter_mut().zip(shift.iter_mut()))
                {
                    if !on {
                        *s = 0.0;
                        *t = 0.0;
                    }
                }
                Affine::Spatial { scale, shift }
            }
            (
                Affine::Spatial {
                    mut scale,
                    mut shift,
                },
                Layer::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                },
            ) => {
                let (bs, bt) = batchnorm_affine(gamma, beta, mean, var, *eps);
                for e in 0..cols {
                    let k = e % p;
                    scale[e] *= bs[k];
                    shift[e] = bs[k] * shift[e] + bt[k];
                }
                Affine::Spatial { scale, shift }
            }
            (Affine::Spatial { scale, shift }, Layer::GlobalAvgPool) => {
                let inv = 1.0 / (m * n) as f64;
                let mut w = vec![0.0; p * cols];
                let mut b = vec![0.0; p];
                for e in 0..cols {
                    let k = e % p;
                    w[k * cols + e] = scale[e] * inv;
                    b[k] += shift[e] * inv;
                }
                Affine::Dense { w, b, rows: p }
            }
            (Affine::Spatial { scale, shift }, Layer::GlobalMaxPool) => {
                let mask = gmp_mask(input)?;
                let mut w = vec![0.0; p * cols];
                let mut b = vec![0.0; p];
                for (k, (i, j)) in mask.positions().into_iter().enumerate() {
                    let e = (i * n + j) * p + k;
                    w[k * cols + e] = scale[e];
                    b[k] = shift[e];
                }
                Affine::Dense { w, b, rows: p }
            }
            (Affine::Spatial { scale, shift }, Layer::Flatten) => Affine::Flat { scale, shift },
            (Affine::Flat { scale, shift }, Layer::FullyConnected { weight, bias }) => {
                let out = weight.shape()[0];
                let wd = weight.data();
                let mut w = vec![0.0; out * cols];
                let mut b = bias.to_f64();
                for o in 0..out {
                    for e in 0..cols {
                        let v = f64::from(wd[o * cols + e]);
                        w[o * cols + e] = v * scale[e];
                        b[o] += v * shift[e];
                    }
                }
                Affine::Dense { w, b, rows: out }
            }
            (Affine::Dense { w, b, rows }, Layer::FullyConnected { weight, bias }) => {
                let out = weight.shape()[0];
                let wd = weight.data();
                let mut w2 = vec![0.0; out * cols];
                let mut b2 = bias.to_f64();
                for o in 0..out {
                    let dst = &mut w2[o * cols..(o + 1) * cols];
                    for r in 0..rows {
                        let coef = f64::from(wd[o * rows + r]);
                        if coef == 0.0 {
                            continue;
                        }
                        b2[o] += coef * b[r];
                        for (d, &s) in dst.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                            *d += coef * s;
                        }
                    }
                }
                Affine::Dense {
                    w: w2,
                    b: b2,
                    rows: out,
                }
            }
            (Affine::Flat { scale, shift }, Layer::Relu) => {
                let mut state = (scale, shift);
                for (on, (s, t)) in relu_mask(input)
                    .mask
                    .iter()
                    .zip(state.0.iter_mut().zip(state.1.iter_mut()))
                {
                    if !on {
                        *s = 0.0;
                        *t = 0.0;
                    }
                }
                Affine::Flat {
                    scale: state.0,
                    shift: state.1,
                }
            }
            (
                Affine::Flat {
                    mut scale,
                    mut shift,
                },
                Layer::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                },
            ) => {
                let (bs, bt) = batchnorm_affine(gamma, beta, mean, var, *eps);
                for e in 0..cols {
                    scale[e] *= bs[e];
                    shift[e] = bs[e] * shift[e] + bt[e];
                }
                Affine::Flat { scale, shift }
            }
            (Affine::Dense { mut w, mut b, rows }, Layer::Relu) => {
                for (r, on) in relu_mask(input).mask.into_iter().enumerate() {
                    if !on {
                        w[r * cols..(r + 1) * cols].fill(0.0);
                        b[r] = 0.0;
                    }
                }
                Affine::Dense { w, b, rows }
            }
            (
                Affine::Dense { mut w, mut b, rows },
                Layer::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                },
            ) => {
                let (bs, bt) = batchnorm_affine(gamma, beta, mean, var, *eps);
                for r in 0..rows {
                    w[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .for_each(|v| *v *= bs[r]);
                    b[r] = bs[r] * b[r] + bt[r];
                }
                Affine::Dense { w, b, rows }
            }
            (state, Layer::L2Normalize) => state,
            (_, other) => {
                return Err(Error::UnsupportedHead(format!(
                    "{} at layer {idx} cannot be linearized",
                    other.kind()
                )))
            }
        };
    }
    let (w, b, rows) = match state {
        Affine::Dense { w, b, rows } => (w, b, rows),
        Affine::Flat { scale, shift } => {
            let mut w = vec![0.0; cols * cols];
            for e in 0..cols {
                w[e * cols + e] = scale[e];
            }
            (w, shift, cols)
        }
        Affine::Spatial { .. } => {
            return Err(Error::UnsupportedHead(
                "head never reduces the feature map".into(),
            ))
        }
    };
    // Dense row-major [l, m, n, p] -> [m, n, l, p].
    let mut blocks = vec![0f32; rows * cols];
    for o in 0..rows {
        for pos in 0..m * n {
            for k in 0..p {
                blocks[(pos * rows + o) * p + k] = w[o * cols + pos * p + k] as f32;
            }
        }
    }
    Ok(LinearizedHead {
        weights: Tensor::new(vec![m, n, rows, p], blocks)?,
        bias: Tensor::from_f64(vec![rows], &b)?,
        operating_point: Some(operating_point_id(a)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, global_pool, head_forward, PoolMode};
    use crate::synth::{random_feature_model, random_tensor, HeadKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn gap_matrix_small_cases() {
        assert_eq!(gap_matrix(1, 1, 1).unwrap().data(), &[1.0]);
        let g = gap_matrix(2, 1, 1).unwrap();
        assert_eq!(g.shape(), &[1, 2, 1, 1]);
        assert_eq!(g.data(), &[0.5, 0.5]);
        let g = gap_matrix(1, 2, 2).unwrap();
        // T(k', i, j, k)
        assert_eq!(g.get(&[0, 0, 1, 0]), 0.5);
        assert_eq!(g.get(&[0, 0, 1, 1]), 0.0);
        assert_eq!(g.get(&[1, 0, 0, 1]), 0.5);
    }

    #[test]
    fn gap_matrix_matches_pooling_exactly_on_power_of_two_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, n, p) in [(2, 2, 3), (4, 2, 5), (1, 8, 2)] {
            let a = random_tensor(&mut rng, &[m, n, p], 2.0);
            let viag = apply_pooling_matrix(&gap_matrix(m, n, p).unwrap(), &a).unwrap();
            assert_eq!(viag, global_pool(&a, PoolMode::Avg).unwrap());
        }
    }

    #[test]
    fn gmp_mask_unique_max_and_ties() {
        let mask = gmp_mask(&t(&[2, 2, 1], &[1.0, 3.0, 2.0, 0.0])).unwrap();
        assert_eq!(mask.mask.data(), &[0.0, 1.0, 0.0, 0.0]);
        let tmat = mask.transformation_matrix().unwrap();
        let a = t(&[2, 2, 1], &[1.0, 3.0, 2.0, 0.0]);
        assert_eq!(apply_pooling_matrix(&tmat, &a).unwrap().data(), &[3.0]);

        let tie = gmp_mask(&t(&[2, 2, 1], &[5.0; 4])).unwrap();
        assert_eq!(tie.mask.data(), &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(tie.positions(), vec![(0, 0)]);
    }

    #[test]
    fn gmp_matrix_exact_on_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = random_tensor(&mut rng, &[3, 5, 4], 3.0);
            let mask = gmp_mask(&a).unwrap();
            let sums: Vec<f32> = (0..4)
                .map(|k| mask.mask.data().iter().skip(k).step_by(4).sum())
                .collect();
            assert_eq!(sums, vec![1.0; 4]);
            let pooled = apply_pooling_matrix(&mask.transformation_matrix().unwrap(), &a).unwrap();
            assert_eq!(pooled, global_pool(&a, PoolMode::Max).unwrap());
        }
    }

    #[test]
    fn relu_mask_rules() {
        assert_eq!(relu_mask(&t(&[2], &[-1.0, 2.0])).mask, vec![false, true]);
        assert_eq!(relu_mask(&t(&[2], &[0.0, 0.0])).mask, vec![false, false]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_tensor(&mut rng, &[17], 1.0);
        assert_eq!(
            relu_mask(&x).apply(&x).unwrap(),
            x.map(|v| v.max(0.0)).unwrap()
        );
    }

    #[test]
    fn gap_only_head_is_scaled_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_feature_model(&mut rng, [2, 3, 4], HeadKind::Gap, 0, false);
        let a = random_tensor(&mut rng, &[2, 3, 4], 1.0);
        let trace = crate::synth::trace_from_feature(&model, a).unwrap();
        let head = linearize_head(&model, &trace).unwrap();
        assert_eq!(head.bias.data(), &[0.0; 4]);
        let inv = (1.0f64 / 6.0) as f32;
        for i in 0..2 {
            for j in 0..3 {
                let block = head.block(i, j);
                for o in 0..4 {
                    for k in 0..4 {
                        let want = if o == k { inv } else { 0.0 };
                        assert_eq!(block[o * 4 + k], want);
                    }
                }
            }
        }
    }

    #[test]
    fn flatten_fc_head_reindexes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_feature_model(&mut rng, [2, 2, 3], HeadKind::FlattenFc, 5, true);
        let a = random_tensor(&mut rng, &[2, 2, 3], 1.0);
        let trace = crate::synth::trace_from_feature(&model, a).unwrap();
        let head = linearize_head(&model, &trace).unwrap();
        let Layer::FullyConnected { weight, bias } = &model.head_layers()[1] else {
            panic!("expected fc");
        };
        assert_eq!(&head.bias, bias);
        for i in 0..2 {
            for j in 0..2 {
                let block = head.block(i, j);
                for o in 0..5 {
                    for k in 0..3 {
                        assert_eq!(block[o * 3 + k], weight.get(&[o, (i * 2 + j) * 3 + k]));
                    }
                }
            }
        }
    }

    #[test]
    fn all_heads_reproduce_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in HeadKind::ALL {
            for _ in 0..5 {
                let model = random_feature_model(&mut rng, [3, 2, 4], kind, 6, true);
                let a = random_tensor(&mut rng, &[3, 2, 4], 1.0);
                let trace = crate::synth::trace_from_feature(&model, a.clone()).unwrap();
                let head = linearize_head(&model, &trace).unwrap();
                let lin = head.apply(&a).unwrap();
                let direct = head_forward(&a, &model).unwrap();
                for (x, y) in lin.iter().zip(direct.data()) {
                    assert!((x - f64::from(*y)).abs() <= 1e-6, "{kind:?}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn gap_and_flatten_paths_agree() {
        // GAP expressed through flatten + FC with the reshaped T_GAP matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, n, p) = (2, 2, 3);
        let gap_model = random_feature_model(&mut rng, [m, n, p], HeadKind::Gap, 0, false);
        let tgap = gap_matrix(m, n, p)
            .unwrap()
            .reshape(vec![p, m * n * p])
            .unwrap();
        let flat_model = Model::new(
            "flat-gap",
            [m, n, p],
            vec![
                Layer::Relu,
                Layer::Flatten,
                Layer::FullyConnected {
                    weight: tgap,
                    bias: Tensor::zeros(vec![p]).unwrap(),
                },
            ],
            0,
        )
        .unwrap();
        let a = random_tensor(&mut rng, &[m, n, p], 1.0)
            .map(f32::abs)
            .unwrap();
        let h1 = linearize_head(
            &gap_model,
            &crate::synth::trace_from_feature(&gap_model, a.clone()).unwrap(),
        )
        .unwrap();
        let h2 = linearize_head(
            &flat_model,
            &crate::synth::trace_from_feature(&flat_model, a).unwrap(),
        )
        .unwrap();
        assert_eq!(h1.weights, h2.weights);
        assert_eq!(h1.bias, h2.bias);
    }

    #[test]
    fn operating_point_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = random_feature_model(&mut rng, [2, 2, 2], HeadKind::GmpFc, 3, true);
        let a = random_tensor(&mut rng, &[2, 2, 2], 1.0);
        let head = linearize_head(
            &model,
            &crate::synth::trace_from_feature(&model, a).unwrap(),
        )
        .unwrap();
        let other = random_tensor(&mut rng, &[2, 2, 2], 1.0);
        assert!(matches!(
            head.apply(&other),
            Err(Error::OperatingPointMismatch)
        ));
    }

    #[test]
    fn persisted_head_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_feature_model(&mut rng, [2, 2, 2], HeadKind::FlattenFcRelu, 3, true);
        let a = random_tensor(&mut rng, &[2, 2, 2], 1.0);
        let head = linearize_head(
            &model,
            &crate::synth::trace_from_feature(&model, a.clone()).unwrap(),
        )
        .unwrap();
        head.save(dir.path(), "head").unwrap();
        let back = LinearizedHead::load(dir.path(), "head").unwrap();
        assert_eq!(back.weights, head.weights);
        assert_eq!(back.apply(&a).unwrap(), head.apply(&a).unwrap());
    }

    #[test]
    fn full_model_trace_linearizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model =
            crate::synth::random_model(&mut rng, [6, 6, 3], 4, HeadKind::GmpFcReluFc, 5, true);
        let img = random_tensor(&mut rng, &[6, 6, 3], 1.0);
        let trace = forward(&model, &img).unwrap();
        let head = linearize_head(&model, &trace).unwrap();
        let lin = head.apply(&trace.conv_feature).unwrap();
        for (x, y) in lin.iter().zip(trace.embedding.data()) {
            assert!((x - f64::from(*y)).abs() <= 1e-6);
        }
    }
}
