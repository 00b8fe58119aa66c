//! Embedding index with overall and region-restricted (interactive) retrieval.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{read_tensor, write_tensor};
use crate::linearize::LinearizedHead;
use crate::nn::{forward, Model};
use crate::tensor::{
    bilinear_sample, corner_aligned_source, dot, l2_norm, nearest_source_cell, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct IndexEntry {
    pub id: String,
    pub image_path: PathBuf,
    /// Embedding before any l2 normalization.
    pub embedding: Vec<f32>,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub embedding_len: usize,
    pub entries: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexMeta {
    ids: Vec<String>,
    image_paths: Vec<PathBuf>,
    l: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
}

impl EmbeddingIndex {
    pub fn new(embedding_len: usize) -> Self {
        Self {
            embedding_len,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, id: String, image_path: PathBuf, embedding: Vec<f32>) -> Result<()> {
        if embedding.len() != self.embedding_len {
            return Err(Error::EmbeddingLengthMismatch {
                query: embedding.len(),
                reference: self.embedding_len,
            });
        }
        let norm = crate::tensor::l2_norm_f32(&embedding);
        if !(norm > 0.0) {
            return Err(Error::DegenerateEmbedding(norm));
        }
        self.entries.push(IndexEntry {
            id,
            image_path,
            embedding,
            norm,
        });
        Ok(())
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.id == id)
    }

    /// Writes `embeddings.tnsr`, `norms.tnsr` and `meta.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        if !self.is_empty() {
            let flat: Vec<f32> = self
                .entries
                .iter()
                .flat_map(|e| e.embedding.iter().copied())
                .collect();
            write_tensor(
                &Tensor::new(vec![self.len(), self.embedding_len], flat)?,
                dir.join("embeddings.tnsr"),
            )?;
            let norms: Vec<f64> = self.entries.iter().map(|e| e.norm).collect();
            write_tensor(
                &Tensor::from_f64(vec![self.len()], &norms)?,
                dir.join("norms.tnsr"),
            )?;
        }
        let meta = IndexMeta {
            ids: self.entries.iter().map(|e| e.id.clone()).collect(),
            image_paths: self.entries.iter().map(|e| e.image_path.clone()).collect(),
            l: self.embedding_len,
        };
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    /// Norms are recomputed from the stored embeddings in full precision.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: IndexMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        if meta.ids.len() != meta.image_paths.len() {
            return Err(Error::Manifest(format!(
                "index meta lists {} ids but {} image paths",
                meta.ids.len(),
                meta.image_paths.len()
            )));
        }
        let mut index = Self::new(meta.l);
        if meta.ids.is_empty() {
            return Ok(index);
        }
        let embeddings = read_tensor(dir.join("embeddings.tnsr"))?;
        if embeddings.shape() != [meta.ids.len(), meta.l] {
            return Err(Error::Manifest(format!(
                "embeddings.tnsr has shape {:?}, meta expects [{}, {}]",
                embeddings.shape(),
                meta.ids.len(),
                meta.l
            )));
        }
        for ((id, path), row) in meta
            .ids
            .into_iter()
            .zip(meta.image_paths)
            .zip(embeddings.data().chunks(meta.l))
        {
            index.push(id, path, row.to_vec())?;
        }
        Ok(index)
    }
}

/// Embeds every image; images that fail are skipped and reported.
pub fn build_index(
    model: &Model,
    images: &[(String, PathBuf)],
) -> (EmbeddingIndex, Vec<(String, Error)>) {
    let mut index = EmbeddingIndex::new(model.embedding_len());
    let mut failures = Vec::new();
    for (id, path) in images {
        let outcome = read_tensor(path)
            .and_then(|image| forward(model, &image))
            .and_then(|trace| index.push(id.clone(), path.clone(), trace.embedding.into_data()));
        if let Err(e) = outcome {
            failures.push((id.clone(), e));
        }
    }
    (index, failures)
}

fn rank(scores: Vec<(usize, f64)>, index: &EmbeddingIndex, k: usize) -> Vec<Ranked> {
    let mut scores = scores;
    // stable: equal scores keep index order
    scores.sort_by(|a, b| b.1.total_cmp(&a.1));
    scores
        .into_iter()
        .take(k)
        .map(|(i, score)| Ranked {
            id: index.entries[i].id.clone(),
            score,
        })
        .collect()
}

fn check_query(index: &EmbeddingIndex, len: usize, k: usize) -> Result<()> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if len != index.embedding_len {
        return Err(Error::EmbeddingLengthMismatch {
            query: len,
            reference: index.embedding_len,
        });
    }
    Ok(())
}

/// Top-`k` entries by cosine similarity to `query`.
pub fn retrieve_overall(index: &EmbeddingIndex, query: &[f64], k: usize) -> Result<Vec<Ranked>> {
    check_query(index, query.len(), k)?;
    let qn = l2_norm(query);
    if !(qn > 0.0) {
        return Err(Error::DegenerateEmbedding(qn));
    }
    let scores = index
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (i, dot_mixed(query, &e.embedding) / (qn * e.norm)))
        .collect();
    Ok(rank(scores, index, k))
}

fn dot_mixed(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| x * f64::from(y)).sum()
}

/// Region of the query the partial feature is gathered from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Roi {
    /// Feature-grid positions `(i, j)`.
    Cells { cells: Vec<(usize, usize)> },
    /// One image pixel; per-position features are bilinearly interpolated.
    Pixel {
        row: usize,
        col: usize,
        image_h: usize,
        image_w: usize,
    },
    /// Image pixels, gathered as the set of feature cells they fall in.
    Pixels {
        points: Vec<(usize, usize)>,
        image_h: usize,
        image_w: usize,
    },
}

impl Roi {
    pub fn all_cells(grid: (usize, usize)) -> Self {
        let (m, n) = grid;
        Roi::Cells {
            cells: (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect(),
        }
    }
}

fn check_pixel(row: usize, col: usize, height: usize, width: usize) -> Result<()> {
    if row >= height || col >= width {
        return Err(Error::PointOutOfRange {
            row,
            col,
            height,
            width,
        });
    }
    Ok(())
}

/// Sorted, de-duplicated cells covered by `roi`, or `None` for a pixel RoI.
pub fn roi_cells(roi: &Roi, grid: (usize, usize)) -> Result<Option<Vec<(usize, usize)>>> {
    let (m, n) = grid;
    let mut cells = match roi {
        Roi::Pixel { .. } => return Ok(None),
        Roi::Cells { cells } => {
            for &(i, j) in cells {
                check_pixel(i, j, m, n)?;
            }
            cells.clone()
        }
        Roi::Pixels {
            points,
            image_h,
            image_w,
        } => {
            let mut cells = Vec::with_capacity(points.len());
            for &(r, c) in points {
                check_pixel(r, c, *image_h, *image_w)?;
                cells.push((
                    nearest_source_cell(r, *image_h, m),
                    nearest_source_cell(c, *image_w, n),
                ));
            }
            cells
        }
    };
    if cells.is_empty() {
        return Err(Error::InvalidArgument("empty region of interest".into()));
    }
    cells.sort_unstable();
    cells.dedup();
    Ok(Some(cells))
}

/// `sum over the RoI of W[i,j] A[i,j]`, without the bias.
pub fn partial_feature(head: &LinearizedHead, a: &Tensor, roi: &Roi) -> Result<Vec<f64>> {
    let grid = head.grid();
    let features = head.position_features(a)?;
    let l = head.embedding_len();
    if let Roi::Pixel {
        row,
        col,
        image_h,
        image_w,
    } = *roi
    {
        check_pixel(row, col, image_h, image_w)?;
        let (m, n) = grid;
        let flat: Vec<f64> = features.into_iter().flatten().collect();
        let sy = corner_aligned_source(row, m, image_h);
        let sx = corner_aligned_source(col, n, image_w);
        return Ok((0..l)
            .map(|o| bilinear_sample(&flat, m, n, l, o, sy, sx))
            .collect());
    }
    let cells = roi_cells(roi, grid)?.expect("non-pixel roi");
    let mut out = vec![0.0; l];
    for (i, j) in cells {
        for (acc, v) in out.iter_mut().zip(&features[i * grid.1 + j]) {
            *acc += v;
        }
    }
    Ok(out)
}

/// Ranks the index by `partial . E_r / (|E_q| |E_r|)`, where `E_q` is the
/// full query embedding.
pub fn retrieve_interactive(
    index: &EmbeddingIndex,
    head: &LinearizedHead,
    a: &Tensor,
    roi: &Roi,
    k: usize,
) -> Result<Vec<Ranked>> {
    check_query(index, head.embedding_len(), k)?;
    let partial = partial_feature(head, a, roi)?;
    let qn = l2_norm(&head.apply(a)?);
    if !(qn > 0.0) {
        return Err(Error::DegenerateEmbedding(qn));
    }
    let scores = index
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| (i, dot_mixed(&partial, &e.embedding) / (qn * e.norm)))
        .collect();
    Ok(rank(scores, index, k))
}

/// Partial similarity of `partial` against one reference embedding.
pub fn partial_similarity(partial: &[f64], query_norm: f64, reference: &[f64]) -> f64 {
    dot(partial, reference) / (query_norm * l2_norm(reference))
}
