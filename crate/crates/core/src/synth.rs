//! Seeded toy models and inputs.
//!
//! Real checkpoints can be exported into the manifest format; these small
//! randomized models cover every supported head pattern so the whole
//! pipeline can be exercised without one.

use rand::Rng;

use crate::error::Result;
use crate::nn::{head_outputs, ForwardTrace, Layer, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Gap,
    GapFc,
    GapFcBn,
    Gmp,
    GmpFc,
    GmpFcReluFc,
    FlattenFc,
    FlattenFcRelu,
    FlattenFcReluBn,
}

impl HeadKind {
    pub const ALL: [HeadKind; 9] = [
        HeadKind::Gap,
        HeadKind::GapFc,
        HeadKind::GapFcBn,
        HeadKind::Gmp,
        HeadKind::GmpFc,
        HeadKind::GmpFcReluFc,
        HeadKind::FlattenFc,
        HeadKind::FlattenFcRelu,
        HeadKind::FlattenFcReluBn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Gap => "gap",
            HeadKind::GapFc => "gap_fc",
            HeadKind::GapFcBn => "gap_fc_bn",
            HeadKind::Gmp => "gmp",
            HeadKind::GmpFc => "gmp_fc",
            HeadKind::GmpFcReluFc => "gmp_fc_relu_fc",
            HeadKind::FlattenFc => "flatten_fc",
            HeadKind::FlattenFcRelu => "flatten_fc_relu",
            HeadKind::FlattenFcReluBn => "flatten_fc_relu_bn",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Pure pooling heads keep `l == p`.
    pub fn embedding_len(self, channels: usize, requested: usize) -> usize {
        match self {
            HeadKind::Gap | HeadKind::Gmp => channels,
            _ => requested,
        }
    }
}

/// Uniform values in `[-scale, scale]`.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f32) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-scale..=scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid random tensor")
}

fn uniform(rng: &mut impl Rng, shape: &[usize], scale: f32) -> Tensor {
    random_tensor(rng, shape, scale)
}

fn fc(rng: &mut impl Rng, out: usize, inp: usize, bias: bool) -> Layer {
    let s = (3.0 / inp as f32).sqrt();
    Layer::FullyConnected {
        weight: uniform(rng, &[out, inp], s),
        bias: if bias {
            uniform(rng, &[out], 0.1)
        } else {
            Tensor::zeros(vec![out]).expect("non-empty")
        },
    }
}

fn conv(rng: &mut impl Rng, cin: usize, cout: usize, stride: usize) -> Layer {
    let s = (3.0 / (9 * cin) as f32).sqrt();
    Layer::Conv2d {
        weight: uniform(rng, &[3, 3, cin, cout], s),
        bias: uniform(rng, &[cout], 0.1),
        stride,
        padding: 1,
    }
}

fn bn(rng: &mut impl Rng, c: usize, bias: bool) -> Layer {
    let gamma = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    let var = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    let (beta, mean) = if bias {
        (
            (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect(),
            (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        )
    } else {
        (vec![0.0; c], vec![0.0; c])
    };
    Layer::BatchNorm {
        gamma: Tensor::scalar_vec(gamma).expect("non-empty"),
        beta: Tensor::scalar_vec(beta).expect("non-empty"),
        mean: Tensor::scalar_vec(mean).expect("non-empty"),
        var: Tensor::scalar_vec(var).expect("non-empty"),
        eps: 1e-5,
    }
}

/// Head layers for a `[m, n, p]` feature map.
pub fn random_head(
    rng: &mut impl Rng,
    feature: [usize; 3],
    kind: HeadKind,
    embedding_len: usize,
    bias: bool,
) -> Vec<Layer> {
    let [m, n, p] = feature;
    let flat = m * n * p;
    let l = kind.embedding_len(p, embedding_len);
    let hidden = 2 * l;
    match kind {
        HeadKind::Gap => vec![Layer::GlobalAvgPool],
        HeadKind::GapFc => vec![Layer::GlobalAvgPool, fc(rng, l, p, bias)],
        HeadKind::GapFcBn => vec![Layer::GlobalAvgPool, fc(rng, l, p, bias), bn(rng, l, bias)],
        HeadKind::Gmp => vec![Layer::GlobalMaxPool],
        HeadKind::GmpFc => vec![Layer::GlobalMaxPool, fc(rng, l, p, bias)],
        HeadKind::GmpFcReluFc => vec![
            Layer::GlobalMaxPool,
            fc(rng, hidden, p, bias),
            Layer::Relu,
            fc(rng, l, hidden, bias),
        ],
        HeadKind::FlattenFc => vec![Layer::Flatten, fc(rng, l, flat, bias)],
        HeadKind::FlattenFcRelu => vec![
            Layer::Flatten,
            fc(rng, hidden, flat, bias),
            Layer::Relu,
            fc(rng, l, hidden, bias),
        ],
        HeadKind::FlattenFcReluBn => vec![
            Layer::Flatten,
            fc(rng, hidden, flat, bias),
            Layer::Relu,
            fc(rng, l, hidden, bias),
            bn(rng, l, bias),
        ],
    }
}

/// A model whose input *is* the feature map: layer 0 is a ReLU marking the
/// feature layer, followed by the head. Use with [`trace_from_feature`].
pub fn random_feature_model(
    rng: &mut impl Rng,
    feature: [usize; 3],
    kind: HeadKind,
    embedding_len: usize,
    bias: bool,
) -> Model {
    let mut layers = vec![Layer::Relu];
    layers.extend(random_head(rng, feature, kind, embedding_len, bias));
    Model::new(format!("feature-{}", kind.name()), feature, layers, 0)
        .expect("generated head is valid")
}

/// A small conv backbone (`conv3x3 -> relu -> conv3x3/2 -> relu`) plus head.
pub fn random_model(
    rng: &mut impl Rng,
    input_shape: [usize; 3],
    channels: usize,
    kind: HeadKind,
    embedding_len: usize,
    bias: bool,
) -> Model {
    let [h, w, c] = input_shape;
    let mut layers = vec![
        conv(rng, c, channels, 1),
        Layer::Relu,
        conv(rng, channels, channels, 2),
        Layer::Relu,
    ];
    let feature = [(h - 1) / 2 + 1, (w - 1) / 2 + 1, channels];
    layers.extend(random_head(rng, feature, kind, embedding_len, bias));
    Model::new(format!("toy-{}", kind.name()), input_shape, layers, 3)
        .expect("generated model is valid")
}

pub fn with_l2_normalize(model: Model) -> Model {
    let mut layers = model.layers;
    layers.push(Layer::L2Normalize);
    Model::new(model.name, model.input_shape, layers, model.last_conv_index)
        .expect("appending l2_normalize keeps the model valid")
}

/// Trace for a feature-level fixture: `a` stands in for every backbone
/// output and the head is run on it.
pub fn trace_from_feature(model: &Model, a: Tensor) -> Result<ForwardTrace> {
    let head = head_outputs(&a, model)?;
    let embedding = if model.ends_with_l2() {
        head[head.len() - 2].clone()
    } else {
        head[head.len() - 1].clone()
    };
    let mut layer_outputs = vec![a.clone(); model.last_conv_index + 1];
    layer_outputs.extend(head);
    Ok(ForwardTrace {
        conv_feature: a,
        embedding,
        layer_outputs,
    })
}
