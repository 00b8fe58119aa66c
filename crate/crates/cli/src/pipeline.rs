//! Forward, linearize and decompose one image pair.

use std::str::FromStr;

use metric_lens::decompose::{
    decompose_pair, ActivationMap, DecompositionResult, Side, SimilarityReport,
};
use metric_lens::gradcam::gradcam_metric;
use metric_lens::linearize::{linearize_head, LinearizedHead};
use metric_lens::nn::{forward, ForwardTrace, Model};
use metric_lens::{Result, Tensor};
use serde::{Deserialize, Serialize};

/// Map families exposed to users.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainVariant {
    Decomposition,
    Gradcam,
    GradcamNonorm,
}

#[derive(Debug, thiserror::Error)]
#[error("unsupported map variant {0:?} (expected decomposition, gradcam or gradcam_nonorm)")]
pub struct UnsupportedVariant(pub String);

impl FromStr for ExplainVariant {
    type Err = UnsupportedVariant;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "decomposition" => Ok(Self::Decomposition),
            "gradcam" => Ok(Self::Gradcam),
            "gradcam_nonorm" => Ok(Self::GradcamNonorm),
            other => Err(UnsupportedVariant(other.to_string())),
        }
    }
}

pub struct Stream {
    pub trace: ForwardTrace,
    pub head: LinearizedHead,
    pub image_hw: (usize, usize),
}

pub fn analyze(model: &Model, image: &Tensor) -> Result<Stream> {
    let trace = forward(model, image)?;
    let head = linearize_head(model, &trace)?;
    Ok(Stream {
        trace,
        head,
        image_hw: (model.input_shape[0], model.input_shape[1]),
    })
}

pub struct PairAnalysis {
    pub query: Stream,
    pub reference: Stream,
    pub decomposition: DecompositionResult,
}

pub fn analyze_pair(
    query_model: &Model,
    query: &Tensor,
    ref_model: &Model,
    reference: &Tensor,
) -> Result<PairAnalysis> {
    let query = analyze(query_model, query)?;
    let reference = analyze(ref_model, reference)?;
    let decomposition = decompose_pair(
        &query.head,
        &query.trace.conv_feature,
        &reference.head,
        &reference.trace.conv_feature,
    )?;
    Ok(PairAnalysis {
        query,
        reference,
        decomposition,
    })
}

impl PairAnalysis {
    /// Similarity of the network's own embeddings.
    pub fn similarity(&self) -> Result<SimilarityReport> {
        SimilarityReport::from_tensors(&self.query.trace.embedding, &self.reference.trace.embedding)
    }

    pub fn stream(&self, side: Side) -> &Stream {
        match side {
            Side::Query => &self.query,
            Side::Ref => &self.reference,
        }
    }

    /// Feature-resolution overall map of one side.
    pub fn overall(
        &self,
        side: Side,
        variant: ExplainVariant,
        with_bias: bool,
    ) -> Result<ActivationMap> {
        let d = &self.decomposition;
        let (own, other) = match side {
            Side::Query => (&d.embedding_q, &d.embedding_r),
            Side::Ref => (&d.embedding_r, &d.embedding_q),
        };
        let s = self.stream(side);
        match variant {
            ExplainVariant::Decomposition => Ok(d.overall_map(side, with_bias)),
            ExplainVariant::Gradcam => {
                gradcam_metric(&s.head, &s.trace.conv_feature, own, other, true)
            }
            ExplainVariant::GradcamNonorm => {
                gradcam_metric(&s.head, &s.trace.conv_feature, own, other, false)
            }
        }
    }

    pub fn overall_upsampled(
        &self,
        side: Side,
        variant: ExplainVariant,
        with_bias: bool,
    ) -> Result<ActivationMap> {
        let (h, w) = self.stream(side).image_hw;
        self.overall(side, variant, with_bias)?.upsample(h, w)
    }
}
