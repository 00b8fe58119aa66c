//! Request handlers as plain functions over a [`Workspace`].

use std::io::Cursor;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use metric_lens::decompose::{pixel_to_cell, ActivationMap, Side};
use metric_lens::retrieval::{retrieve_interactive, retrieve_overall, Roi};
use metric_lens::Tensor;
use serde::{Deserialize, Serialize};

use crate::pipeline::{analyze, analyze_pair, ExplainVariant, PairAnalysis};
use crate::workspace::Workspace;

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("unknown image id {0:?}")]
    UnknownId(String),
    #[error("{0}")]
    VariantUnsupported(#[from] crate::pipeline::UnsupportedVariant),
    #[error("no embedding index is loaded")]
    NoIndex,
    #[error("{0}")]
    Core(#[from] metric_lens::Error),
    #[error("rendering failed: {0}")]
    Render(String),
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        use metric_lens::Error as E;
        match self {
            ServiceError::UnknownId(_) => 404,
            ServiceError::VariantUnsupported(_) => 400,
            ServiceError::NoIndex => 409,
            ServiceError::Render(_) => 500,
            ServiceError::Core(e) => match e {
                E::PointOutOfRange { .. } | E::InvalidArgument(_) => 400,
                E::EmptyIndex => 409,
                E::ShapeMismatch { .. }
                | E::EmbeddingLengthMismatch { .. }
                | E::DegenerateEmbedding(_)
                | E::UnsupportedHead(_) => 422,
                _ => 500,
            },
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ServiceError::UnknownId(_) => "unknown_id",
            ServiceError::VariantUnsupported(_) => "variant_unsupported",
            ServiceError::NoIndex => "empty_index",
            ServiceError::Render(_) => "render_failed",
            ServiceError::Core(e) => e.code(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapPayload {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f32>,
    pub min: f32,
    pub max: f32,
}

impl From<&ActivationMap> for MapPayload {
    fn from(map: &ActivationMap) -> Self {
        let (h, w) = map.dims();
        Self {
            h,
            w,
            values: map.values.data().to_vec(),
            min: map.values.min(),
            max: map.values.max(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: String,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplainRequest {
    pub query_id: String,
    pub ref_id: String,
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default)]
    pub with_bias: bool,
}

fn default_variant() -> String {
    "decomposition".into()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplainResponse {
    #[serde(rename = "S")]
    pub similarity: f64,
    #[serde(rename = "D")]
    pub distance: f64,
    pub variant: ExplainVariant,
    pub overall_query: MapPayload,
    pub overall_ref: MapPayload,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointRequest {
    pub query_id: String,
    pub ref_id: String,
    /// Pixel column in the clicked image.
    pub x: usize,
    /// Pixel row in the clicked image.
    pub y: usize,
    #[serde(default = "default_side")]
    pub side: Side,
}

fn default_side() -> Side {
    Side::Query
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PointResponse {
    pub side: Side,
    pub clicked_feature_cell: (usize, usize),
    /// Point-specific map over the other image, at its image resolution.
    pub map: MapPayload,
    /// The same map at feature resolution.
    pub feature_map: MapPayload,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrieveRequest {
    pub query_id: String,
    #[serde(default)]
    pub roi: Option<Vec<Pixel>>,
    #[serde(default = "default_k")]
    pub k: usize,
}

fn default_k() -> usize {
    10
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub id: String,
    pub score: f64,
    pub image: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RetrieveResponse {
    pub mode: String,
    pub results: Vec<RetrievalHit>,
}

fn image<'a>(ws: &'a Workspace, id: &str) -> Result<&'a Tensor, ServiceError> {
    ws.images
        .get(id)
        .ok_or_else(|| ServiceError::UnknownId(id.to_string()))
}

fn pair(ws: &Workspace, query_id: &str, ref_id: &str) -> Result<PairAnalysis, ServiceError> {
    let q = image(ws, query_id)?;
    let r = image(ws, ref_id)?;
    Ok(analyze_pair(&ws.model, q, ws.ref_model(), r)?)
}

pub fn list_images(ws: &Workspace) -> Vec<ImageInfo> {
    ws.images
        .iter()
        .map(|(id, t)| {
            let s = t.shape();
            ImageInfo {
                id: id.clone(),
                h: s[0],
                w: s.get(1).copied().unwrap_or(1),
                c: s.get(2).copied().unwrap_or(1),
            }
        })
        .collect()
}

pub fn handle_explain(
    ws: &Workspace,
    req: &ExplainRequest,
) -> Result<ExplainResponse, ServiceError> {
    let variant: ExplainVariant = req.variant.parse()?;
    let analysis = pair(ws, &req.query_id, &req.ref_id)?;
    let sim = analysis.similarity()?;
    let q = analysis.overall_upsampled(Side::Query, variant, req.with_bias)?;
    let r = analysis.overall_upsampled(Side::Ref, variant, req.with_bias)?;
    Ok(ExplainResponse {
        similarity: sim.similarity,
        distance: sim.distance,
        variant,
        overall_query: (&q).into(),
        overall_ref: (&r).into(),
    })
}

pub fn handle_point(ws: &Workspace, req: &PointRequest) -> Result<PointResponse, ServiceError> {
    let analysis = pair(ws, &req.query_id, &req.ref_id)?;
    let clicked = analysis.stream(req.side);
    let other = analysis.stream(req.side.other());
    let d = &analysis.decomposition;
    let cell = pixel_to_cell(req.y, req.x, clicked.image_hw, d.grid(req.side))?;
    let feature_map = d.point_specific_map(req.side, cell, None)?;
    let (h, w) = other.image_hw;
    let map = feature_map.upsample(h, w)?;
    Ok(PointResponse {
        side: req.side,
        clicked_feature_cell: cell,
        map: (&map).into(),
        feature_map: (&feature_map).into(),
    })
}

pub fn handle_retrieve(
    ws: &Workspace,
    req: &RetrieveRequest,
) -> Result<RetrieveResponse, ServiceError> {
    let index = ws.index.as_ref().ok_or(ServiceError::NoIndex)?;
    let stream = analyze(&ws.model, image(ws, &req.query_id)?)?;
    let (mode, ranked) = match &req.roi {
        None => (
            "overall",
            retrieve_overall(index, &stream.trace.embedding.to_f64(), req.k)?,
        ),
        Some(points) => {
            let (image_h, image_w) = stream.image_hw;
            let roi = match points.as_slice() {
                [p] => Roi::Pixel {
                    row: p.y,
                    col: p.x,
                    image_h,
                    image_w,
                },
                _ => Roi::Pixels {
                    points: points.iter().map(|p| (p.y, p.x)).collect(),
                    image_h,
                    image_w,
                },
            };
            (
                "interactive",
                retrieve_interactive(index, &stream.head, &stream.trace.conv_feature, &roi, req.k)?,
            )
        }
    };
    Ok(RetrieveResponse {
        mode: mode.into(),
        results: ranked
            .into_iter()
            .map(|r| RetrievalHit {
                image: format!("/api/image/{}", r.id),
                id: r.id,
                score: r.score,
            })
            .collect(),
    })
}

fn to_u8(v: f32, lo: f32, hi: f32) -> u8 {
    if hi > lo {
        (((v - lo) / (hi - lo)) * 255.0).round() as u8
    } else {
        0
    }
}

/// PNG rendering of an image tensor: three channels as RGB, anything else
/// as the channel mean in grayscale, min-max scaled.
pub fn render_png(t: &Tensor) -> Result<Vec<u8>, ServiceError> {
    let s = t.shape();
    let (h, w) = (s[0], s.get(1).copied().unwrap_or(1));
    let c = t.len() / (h * w);
    let x = t.data();
    let img = if c == 3 {
        let (lo, hi) = (t.min(), t.max());
        let px = x.iter().map(|&v| to_u8(v, lo, hi)).collect();
        DynamicImage::ImageRgb8(
            RgbImage::from_raw(w as u32, h as u32, px)
                .ok_or_else(|| ServiceError::Render("rgb buffer".into()))?,
        )
    } else {
        let mean: Vec<f32> = x
            .chunks(c)
            .map(|p| p.iter().sum::<f32>() / c as f32)
            .collect();
        let lo = mean.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = mean.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let px = mean.iter().map(|&v| to_u8(v, lo, hi)).collect();
        DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, px)
                .ok_or_else(|| ServiceError::Render("gray buffer".into()))?,
        )
    };
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png)
        .map_err(|e| ServiceError::Render(e.to_string()))?;
    Ok(out.into_inner())
}

pub fn image_png(ws: &Workspace, id: &str) -> Result<Vec<u8>, ServiceError> {
    render_png(image(ws, id)?)
}
