//! Activation decomposition of a similarity score.
//!
//! With both heads linearized, the unnormalized similarity expands into
//!
//! ```text
//! E_q . E_r = sum_{ij,xy} (W_q[ij] A_q[ij]) . (W_r[xy] A_r[xy])   point-to-point
//!           + sum_ij (W_q[ij] A_q[ij]) . B_r                       query bias term
//!           + sum_xy (W_r[xy] A_r[xy]) . B_q                       ref bias term
//!           + B_q . B_r                                             pure bias
//! ```
//!
//! and dividing by `Z = |E_q| |E_r|` gives the cosine similarity. Overall
//! maps marginalize the point-to-point tensor over the other image;
//! point-specific maps are single slices of it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linearize::LinearizedHead;
use crate::tensor::{bilinear_resize, dot, l2_norm, nearest_source_cell, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapVariant {
    Cam,
    OverallDecomp,
    OverallDecompBias,
    PointSpecific,
    Gradcam,
    GradcamNonorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Query,
    Ref,
}

impl Side {
    pub fn other(self) -> Self {
        match self {
            Side::Query => Side::Ref,
            Side::Ref => Side::Query,
        }
    }
}

/// A signed 2-D heatmap. Negative values are kept; callers clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub values: Tensor,
    pub variant: MapVariant,
    pub query_point: Option<(usize, usize)>,
    pub upsampled: bool,
}

impl ActivationMap {
    pub fn new(values: Tensor, variant: MapVariant) -> Self {
        Self {
            values,
            variant,
            query_point: None,
            upsampled: false,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.values.shape()[0], self.values.shape()[1])
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values.get(&[row, col])
    }

    pub fn sum(&self) -> f64 {
        self.values.data().iter().map(|&v| f64::from(v)).sum()
    }

    /// Bilinear (corner-aligned) resize to image resolution.
    pub fn upsample(&self, height: usize, width: usize) -> Result<Self> {
        Ok(Self {
            values: bilinear_resize(&self.values, height, width)?,
            variant: self.variant,
            query_point: self.query_point,
            upsampled: self.upsampled || (height, width) != self.dims(),
        })
    }

    /// Negative values set to zero.
    pub fn clipped(&self) -> Self {
        Self {
            values: self
                .values
                .map(|v| v.max(0.0))
                .expect("clipping keeps values finite"),
            ..self.clone()
        }
    }

    /// `(row, col)` of the first row-major maximum.
    pub fn argmax(&self) -> (usize, usize) {
        let idx = self.values.argmax();
        let (_, w) = self.dims();
        (idx / w, idx % w)
    }
}

/// Cosine similarity and the equivalent squared distance between the
/// L2-normalized embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    #[serde(rename = "S")]
    pub similarity: f64,
    #[serde(rename = "D")]
    pub distance: f64,
}

impl SimilarityReport {
    pub fn from_embeddings(e_q: &[f64], e_r: &[f64]) -> Result<Self> {
        if e_q.len() != e_r.len() {
            return Err(Error::EmbeddingLengthMismatch {
                query: e_q.len(),
                reference: e_r.len(),
            });
        }
        let (nq, nr) = (l2_norm(e_q), l2_norm(e_r));
        for n in [nq, nr] {
            if n <= 1e-12 {
                return Err(Error::DegenerateEmbedding(n));
            }
        }
        let distance = e_q
            .iter()
            .zip(e_r)
            .map(|(a, b)| (a / nq - b / nr).powi(2))
            .sum();
        Ok(Self {
            similarity: dot(e_q, e_r) / (nq * nr),
            distance,
        })
    }

    pub fn from_tensors(e_q: &Tensor, e_r: &Tensor) -> Result<Self> {
        Self::from_embeddings(&e_q.to_f64(), &e_r.to_f64())
    }
}

/// Class activation map: `map(i,j) = sum_k w[k,c] A[i,j,k]`, so that the
/// mean of the map is the (bias-free) class score.
pub fn cam(a: &Tensor, fc_weights: &Tensor, class_idx: usize) -> Result<ActivationMap> {
    let (m, n, p) = a.dims3()?;
    let &[wp, classes] = fc_weights.shape() else {
        return Err(Error::shape(None, "CAM weights must be [p, classes]"));
    };
    if wp != p {
        return Err(Error::shape(
            None,
            format!("CAM weights have {wp} channels, feature map has {p}"),
        ));
    }
    if class_idx >= classes {
        return Err(Error::ClassOutOfRange {
            index: class_idx,
            classes,
        });
    }
    let w = fc_weights.data();
    let x = a.data();
    let values = (0..m * n)
        .map(|pos| {
            (0..p)
                .map(|k| f64::from(w[k * classes + class_idx]) * f64::from(x[pos * p + k]))
                .sum::<f64>() as f32
        })
        .collect();
    Ok(ActivationMap::new(
        Tensor::new(vec![m, n], values)?,
        MapVariant::Cam,
    ))
}

/// Single-stream decomposition of one output unit of a linearized head:
/// `map(i,j) = W[i,j][c] . A[i,j]`. The map sums to the output minus its
/// bias; on a GAP+FC classifier it is CAM divided by `mn`.
pub fn class_decomposition(
    head: &LinearizedHead,
    a: &Tensor,
    class_idx: usize,
) -> Result<ActivationMap> {
    let l = head.embedding_len();
    if class_idx >= l {
        return Err(Error::ClassOutOfRange {
            index: class_idx,
            classes: l,
        });
    }
    let (m, n) = head.grid();
    let feats = head.position_features(a)?;
    let values: Vec<f64> = feats.iter().map(|f| f[class_idx]).collect();
    Ok(ActivationMap::new(
        Tensor::from_f64(vec![m, n], &values)?,
        MapVariant::Cam,
    ))
}

/// All four terms of the decomposed similarity for one image pair.
#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionResult {
    /// `[m, n, x, y]` point-to-point terms (not divided by `Z`).
    pub p2p: Tensor,
    /// `[m, n]`: `W_q A_q[ij] . B_r`.
    pub query_bias_term: Tensor,
    /// `[x, y]`: `W_r A_r[xy] . B_q`.
    pub ref_bias_term: Tensor,
    /// `B_q . B_r`.
    pub pure_bias: f64,
    /// `|E_q| |E_r|`.
    pub z: f64,
    /// Embeddings reconstructed from the linearized heads.
    pub embedding_q: Vec<f64>,
    pub embedding_r: Vec<f64>,
}

pub fn decompose_pair(
    head_q: &LinearizedHead,
    a_q: &Tensor,
    head_r: &LinearizedHead,
    a_r: &Tensor,
) -> Result<DecompositionResult> {
    if head_q.embedding_len() != head_r.embedding_len() {
        return Err(Error::EmbeddingLengthMismatch {
            query: head_q.embedding_len(),
            reference: head_r.embedding_len(),
        });
    }
    let fq = head_q.position_features(a_q)?;
    let fr = head_r.position_features(a_r)?;
    let bq = head_q.bias_f64();
    let br = head_r.bias_f64();
    let sum_features = |feats: &[Vec<f64>], bias: &[f64]| {
        let mut e = bias.to_vec();
        for f in feats {
            e.iter_mut().zip(f).for_each(|(acc, v)| *acc += v);
        }
        e
    };
    let embedding_q = sum_features(&fq, &bq);
    let embedding_r = sum_features(&fr, &br);
    let z = l2_norm(&embedding_q) * l2_norm(&embedding_r);
    if z <= 1e-24 {
        return Err(Error::DegenerateEmbedding(z.sqrt()));
    }

    let (m, n) = head_q.grid();
    let (x, y) = head_r.grid();
    let p2p: Vec<f64> = fq
        .iter()
        .flat_map(|q| fr.iter().map(move |r| dot(q, r)))
        .collect();
    let query_bias: Vec<f64> = fq.iter().map(|q| dot(q, &br)).collect();
    let ref_bias: Vec<f64> = fr.iter().map(|r| dot(r, &bq)).collect();

    Ok(DecompositionResult {
        p2p: Tensor::from_f64(vec![m, n, x, y], &p2p)?,
        query_bias_term: Tensor::from_f64(vec![m, n], &query_bias)?,
        ref_bias_term: Tensor::from_f64(vec![x, y], &ref_bias)?,
        pure_bias: dot(&bq, &br),
        z,
        embedding_q,
        embedding_r,
    })
}

impl DecompositionResult {
    pub fn query_grid(&self) -> (usize, usize) {
        (self.p2p.shape()[0], self.p2p.shape()[1])
    }

    pub fn ref_grid(&self) -> (usize, usize) {
        (self.p2p.shape()[2], self.p2p.shape()[3])
    }

    pub fn grid(&self, side: Side) -> (usize, usize) {
        match side {
            Side::Query => self.query_grid(),
            Side::Ref => self.ref_grid(),
        }
    }

    /// Cosine similarity of the reconstructed embeddings.
    pub fn similarity(&self) -> SimilarityReport {
        SimilarityReport::from_embeddings(&self.embedding_q, &self.embedding_r)
            .expect("z > 0 was checked at construction")
    }

    /// Sum of all four terms, i.e. `E_q . E_r`.
    pub fn total(&self) -> f64 {
        let sum = |t: &Tensor| t.data().iter().map(|&v| f64::from(v)).sum::<f64>();
        sum(&self.p2p) + sum(&self.query_bias_term) + sum(&self.ref_bias_term) + self.pure_bias
    }

    /// `p2p[i,j,x,y]` as `f64`.
    fn term(&self, ij: usize, xy: usize) -> f64 {
        let (x, y) = self.ref_grid();
        f64::from(self.p2p.data()[ij * x * y + xy])
    }

    /// Overall map of one image: point-to-point terms summed over the other
    /// image (plus the cross bias term when `with_bias`), divided by `Z`.
    pub fn overall_map(&self, side: Side, with_bias: bool) -> ActivationMap {
        let (m, n) = self.query_grid();
        let (x, y) = self.ref_grid();
        let (own, other, bias) = match side {
            Side::Query => (m * n, x * y, &self.query_bias_term),
            Side::Ref => (x * y, m * n, &self.ref_bias_term),
        };
        let values: Vec<f64> = (0..own)
            .map(|a| {
                let marginal: f64 = (0..other)
                    .map(|b| match side {
                        Side::Query => self.term(a, b),
                        Side::Ref => self.term(b, a),
                    })
                    .sum();
                let extra = if with_bias {
                    f64::from(bias.data()[a])
                } else {
                    0.0
                };
                (marginal + extra) / self.z
            })
            .collect();
        let (h, w) = self.grid(side);
        let variant = if with_bias {
            MapVariant::OverallDecompBias
        } else {
            MapVariant::OverallDecomp
        };
        ActivationMap::new(
            Tensor::from_f64(vec![h, w], &values).expect("finite map"),
            variant,
        )
    }

    /// Map over the *other* image for one point of `side`, divided by `Z`,
    /// optionally resized to `target_resolution`.
    pub fn point_specific_map(
        &self,
        side: Side,
        point: (usize, usize),
        target_resolution: Option<(usize, usize)>,
    ) -> Result<ActivationMap> {
        let (h, w) = self.grid(side);
        if point.0 >= h || point.1 >= w {
            return Err(Error::PointOutOfRange {
                row: point.0,
                col: point.1,
                height: h,
                width: w,
            });
        }
        let own = point.0 * w + point.1;
        let (oh, ow) = self.grid(side.other());
        let values: Vec<f64> = (0..oh * ow)
            .map(|b| match side {
                Side::Query => self.term(own, b),
                Side::Ref => self.term(b, own),
            })
            .map(|v| v / self.z)
            .collect();
        let mut map = ActivationMap::new(
            Tensor::from_f64(vec![oh, ow], &values)?,
            MapVariant::PointSpecific,
        );
        map.query_point = Some(point);
        match target_resolution {
            Some((th, tw)) => map.upsample(th, tw),
            None => Ok(map),
        }
    }
}

/// Feature cell under pixel `(row, col)` of an `image_h x image_w` image,
/// inverting the corner-aligned upsampling of a `grid_h x grid_w` map.
pub fn pixel_to_cell(
    row: usize,
    col: usize,
    image: (usize, usize),
    grid: (usize, usize),
) -> Result<(usize, usize)> {
    if row >= image.0 || col >= image.1 {
        return Err(Error::PointOutOfRange {
            row,
            col,
            height: image.0,
            width: image.1,
        });
    }
    Ok((
        nearest_source_cell(row, image.0, grid.0),
        nearest_source_cell(col, image.1, grid.1),
    ))
}
