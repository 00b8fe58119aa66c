//! Minimal deterministic CNN inference.
//!
//! Tensors use `[h, w, c]` layout for feature maps, `[kh, kw, c_in, c_out]`
//! for convolution kernels and `[out, in]` for fully connected weights.
//! Accumulation happens in `f64` and results are rounded to `f32` once per
//! layer, so repeated runs are bit-identical.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{read_tensor, write_tensor};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Avg,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        mean: Tensor,
        var: Tensor,
        eps: f32,
    },
    GlobalAvgPool,
    GlobalMaxPool,
    Flatten,
    FullyConnected {
        weight: Tensor,
        bias: Tensor,
    },
    L2Normalize,
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::BatchNorm { .. } => "batchnorm",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::GlobalMaxPool => "global_max_pool",
            Layer::Flatten => "flatten",
            Layer::FullyConnected { .. } => "fully_connected",
            Layer::L2Normalize => "l2_normalize",
        }
    }

    fn is_reduction(&self) -> bool {
        matches!(
            self,
            Layer::GlobalAvgPool | Layer::GlobalMaxPool | Layer::Flatten
        )
    }

    /// Output shape for a given input shape, or a description of why the
    /// layer cannot accept it.
    fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let &[h, w, c] = input else {
                    return Err(format!("conv2d needs [h,w,c], got {input:?}"));
                };
                let &[kh, kw, cin, cout] = weight.shape() else {
                    return Err(format!(
                        "conv2d weight must be rank 4, got {:?}",
                        weight.shape()
                    ));
                };
                if cin != c {
                    return Err(format!("conv2d expects {cin} input channels, got {c}"));
                }
                if bias.shape() != [cout] {
                    return Err(format!(
                        "conv2d bias must be [{cout}], got {:?}",
                        bias.shape()
                    ));
                }
                if *stride == 0 {
                    return Err("conv2d stride must be >= 1".into());
                }
                if kh > h + 2 * padding || kw > w + 2 * padding {
                    return Err(format!("kernel {kh}x{kw} larger than padded input {h}x{w}"));
                }
                Ok(vec![
                    (h + 2 * padding - kh) / stride + 1,
                    (w + 2 * padding - kw) / stride + 1,
                    cout,
                ])
            }
            Layer::Relu | Layer::L2Normalize => Ok(input.to_vec()),
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                ..
            } => {
                let c = *input.last().ok_or("batchnorm on empty shape")?;
                for (name, t) in [
                    ("gamma", gamma),
                    ("beta", beta),
                    ("mean", mean),
                    ("var", var),
                ] {
                    if t.shape() != [c] {
                        return Err(format!(
                            "batchnorm {name} must be [{c}], got {:?}",
                            t.shape()
                        ));
                    }
                }
                if var.data().iter().any(|&v| v < 0.0) {
                    return Err("batchnorm variance must be non-negative".into());
                }
                Ok(input.to_vec())
            }
            Layer::GlobalAvgPool | Layer::GlobalMaxPool => match input {
                &[_, _, p] => Ok(vec![p]),
                _ => Err(format!("{} needs [m,n,p], got {input:?}", self.kind())),
            },
            Layer::Flatten => match input {
                &[m, n, p] => Ok(vec![m * n * p]),
                _ => Err(format!("flatten needs [m,n,p], got {input:?}")),
            },
            Layer::FullyConnected { weight, bias } => {
                let &[d] = input else {
                    return Err(format!("fully_connected needs a vector, got {input:?}"));
                };
                let &[out, inp] = weight.shape() else {
                    return Err(format!(
                        "fc weight must be [out,in], got {:?}",
                        weight.shape()
                    ));
                };
                if inp != d {
                    return Err(format!("fc expects {inp} inputs, got {d}"));
                }
                if bias.shape() != [out] {
                    return Err(format!("fc bias must be [{out}], got {:?}", bias.shape()));
                }
                Ok(vec![out])
            }
        }
    }

    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => conv2d(input, weight, bias, *stride, *padding),
            Layer::Relu => input.map(|v| v.max(0.0)),
            Layer::BatchNorm {
                gamma,
                beta,
                mean,
                var,
                eps,
            } => batchnorm(input, gamma, beta, mean, var, *eps),
            Layer::GlobalAvgPool => global_pool(input, PoolMode::Avg),
            Layer::GlobalMaxPool => global_pool(input, PoolMode::Max),
            Layer::Flatten => {
                input.dims3()?;
                let len = input.len();
                input.clone().reshape(vec![len])
            }
            Layer::FullyConnected { weight, bias } => fully_connected(input, weight, bias),
            Layer::L2Normalize => {
                let norm = crate::tensor::l2_norm_f32(input.data());
                if norm <= 1e-12 {
                    return Err(Error::DegenerateEmbedding(norm));
                }
                input.map(|v| (f64::from(v) / norm) as f32)
            }
        }
    }
}

/// Standard zero-padded cross-correlation.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let layer = Layer::Conv2d {
        weight: weight.clone(),
        bias: bias.clone(),
        stride,
        padding,
    };
    let out_shape = layer
        .output_shape(input.shape())
        .map_err(|d| Error::shape(None, d))?;
    let (h, w, cin) = input.dims3()?;
    let (kh, kw, cout) = (weight.shape()[0], weight.shape()[1], weight.shape()[3]);
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let x = input.data();
    let k = weight.data();
    let mut out = Vec::with_capacity(oh * ow * cout);
    let mut acc = vec![0f64; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for (a, &b) in acc.iter_mut().zip(bias.data()) {
                *a = f64::from(b);
            }
            for dy in 0..kh {
                let iy = (oy * stride + dy) as isize - padding as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for dx in 0..kw {
                    let ix = (ox * stride + dx) as isize - padding as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let base_in = (iy as usize * w + ix as usize) * cin;
                    for ci in 0..cin {
                        let v = f64::from(x[base_in + ci]);
                        let base_k = ((dy * kw + dx) * cin + ci) * cout;
                        for (co, a) in acc.iter_mut().enumerate() {
                            *a += v * f64::from(k[base_k + co]);
                        }
                    }
                }
            }
            out.extend(acc.iter().map(|&a| a as f32));
        }
    }
    Tensor::new(out_shape, out)
}

/// Per-channel mean or maximum over the spatial axes of `[m, n, p]`.
pub fn global_pool(input: &Tensor, mode: PoolMode) -> Result<Tensor> {
    let (m, n, p) = input.dims3()?;
    let x = input.data();
    let pooled = (0..p)
        .map(|k| {
            let channel = (0..m * n).map(|pos| x[pos * p + k]);
            match mode {
                PoolMode::Avg => (channel.map(f64::from).sum::<f64>() / (m * n) as f64) as f32,
                PoolMode::Max => channel.fold(f32::NEG_INFINITY, f32::max),
            }
        })
        .collect();
    Tensor::new(vec![p], pooled)
}

pub fn fully_connected(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let &[out, inp] = weight.shape() else {
        return Err(Error::shape(None, "fc weight must be rank 2"));
    };
    if input.shape() != [inp] || bias.shape() != [out] {
        return Err(Error::shape(
            None,
            format!(
                "fc [{out}x{inp}] cannot take input {:?} with bias {:?}",
                input.shape(),
                bias.shape()
            ),
        ));
    }
    let w = weight.data();
    let x = input.data();
    let y = (0..out)
        .map(|o| {
            let row = &w[o * inp..(o + 1) * inp];
            (f64::from(bias.data()[o]) + crate::tensor::dot_f32(row, x)) as f32
        })
        .collect();
    Tensor::new(vec![out], y)
}

/// Inference-time batch normalization over the last axis.
pub fn batchnorm(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> Result<Tensor> {
    let c = *input.shape().last().expect("tensors have rank >= 1");
    if [gamma, beta, mean, var].iter().any(|t| t.shape() != [c]) {
        return Err(Error::shape(
            None,
            format!("batchnorm parameters must be [{c}]"),
        ));
    }
    let (scale, shift) = batchnorm_affine(gamma, beta, mean, var, eps);
    let data = input
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| (f64::from(v) * scale[i % c] + shift[i % c]) as f32)
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Per-channel `(scale, shift)` such that `bn(x) = scale * x + shift`.
pub fn batchnorm_affine(
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
    eps: f32,
) -> (Vec<f64>, Vec<f64>) {
    let mut scale = Vec::with_capacity(gamma.len());
    let mut shift = Vec::with_capacity(gamma.len());
    for c in 0..gamma.len() {
        let s = f64::from(gamma.data()[c]) / (f64::from(var.data()[c]) + f64::from(eps)).sqrt();
        scale.push(s);
        shift.push(f64::from(beta.data()[c]) - s * f64::from(mean.data()[c]));
    }
    (scale, shift)
}

/// A validated model: backbone up to `last_conv_index`, head after it.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub name: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
    pub last_conv_index: usize,
    shapes: Vec<Vec<usize>>,
}

impl Model {
    pub fn new(
        name: impl Into<String>,
        input_shape: [usize; 3],
        layers: Vec<Layer>,
        last_conv_index: usize,
    ) -> Result<Self> {
        if last_conv_index >= layers.len() {
            return Err(Error::Manifest(format!(
                "last_conv_index {last_conv_index} out of range for {} layers",
                layers.len()
            )));
        }
        let (backbone, head) = layers.split_at(last_conv_index + 1);
        if backbone.iter().any(|l| {
            !matches!(
                l,
                Layer::Conv2d { .. } | Layer::Relu | Layer::BatchNorm { .. }
            )
        }) {
            return Err(Error::Manifest(
                "only conv2d, relu and batchnorm may precede the feature layer".into(),
            ));
        }
        if head.iter().filter(|l| l.is_reduction()).count() != 1 {
            return Err(Error::Manifest(
                "head needs exactly one global pooling or flatten layer".into(),
            ));
        }
        if let Some(pos) = head.iter().position(|l| matches!(l, Layer::L2Normalize)) {
            if pos + 1 != head.len() {
                return Err(Error::Manifest(
                    "l2_normalize must be the last layer".into(),
                ));
            }
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            current = layer
                .output_shape(&current)
                .map_err(|d| Error::shape(Some(i), d))?;
            shapes.push(current.clone());
        }
        if shapes[last_conv_index].len() != 3 {
            return Err(Error::Manifest("feature layer must output [m,n,p]".into()));
        }
        Ok(Self {
            name: name.into(),
            input_shape,
            layers,
            last_conv_index,
            shapes,
        })
    }

    /// Output shape of every layer.
    pub fn layer_shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    /// `[m, n, p]` of the feature map `A`.
    pub fn feature_shape(&self) -> [usize; 3] {
        let s = &self.shapes[self.last_conv_index];
        [s[0], s[1], s[2]]
    }

    pub fn head_layers(&self) -> &[Layer] {
        &self.layers[self.last_conv_index + 1..]
    }

    pub fn ends_with_l2(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::L2Normalize))
    }

    /// Length of `E` (or number of classes for a classifier head).
    pub fn embedding_len(&self) -> usize {
        let idx = if self.ends_with_l2() {
            self.layers.len() - 2
        } else {
            self.layers.len() - 1
        };
        self.shapes[idx][0]
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let doc: ManifestDoc = serde_json::from_slice(&fs::read(path)?)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        doc.into_model(base)
    }

    /// Writes `<dir>/<file_stem>.json` plus one TNSR file per parameter.
    pub fn save(&self, dir: impl AsRef<Path>, file_stem: &str) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let put = |suffix: &str, t: &Tensor| -> Result<String> {
                let name = format!("{file_stem}_l{i}_{suffix}.tnsr");
                write_tensor(t, dir.join(&name))?;
                Ok(name)
            };
            layers.push(match layer {
                Layer::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => LayerDoc::Conv2d {
                    weights: put("w", weight)?,
                    bias: put("b", bias)?,
                    stride: *stride,
                    padding: *padding,
                },
                Layer::Relu => LayerDoc::Relu,
                Layer::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => LayerDoc::Batchnorm {
                    gamma: put("gamma", gamma)?,
                    beta: put("beta", beta)?,
                    mean: put("mean", mean)?,
                    var: put("var", var)?,
                    eps: *eps,
                },
                Layer::GlobalAvgPool => LayerDoc::GlobalAvgPool,
                Layer::GlobalMaxPool => LayerDoc::GlobalMaxPool,
                Layer::Flatten => LayerDoc::Flatten,
                Layer::FullyConnected { weight, bias } => LayerDoc::FullyConnected {
                    weights: put("w", weight)?,
                    bias: put("b", bias)?,
                },
                Layer::L2Normalize => LayerDoc::L2Normalize,
            });
        }
        let doc = ManifestDoc {
            name: self.name.clone(),
            input_shape: self.input_shape,
            layers,
            last_conv_index: self.last_conv_index,
        };
        let path = dir.join(format!("{file_stem}.json"));
        fs::write(&path, serde_json::to_vec_pretty(&doc)?)?;
        Ok(path)
    }
}

/// JSON form of a model; tensor paths are relative to the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestDoc {
    pub name: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerDoc>,
    pub last_conv_index: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDoc {
    Conv2d {
        weights: String,
        bias: String,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Batchnorm {
        gamma: String,
        beta: String,
        mean: String,
        var: String,
        #[serde(default = "default_eps")]
        eps: f32,
    },
    GlobalAvgPool,
    GlobalMaxPool,
    Flatten,
    FullyConnected {
        weights: String,
        bias: String,
    },
    L2Normalize,
}

fn one() -> usize {
    1
}

fn default_eps() -> f32 {
    1e-5
}

impl ManifestDoc {
    pub fn into_model(self, base: &Path) -> Result<Model> {
        let load = |rel: &str| read_tensor(base.join(rel));
        let layers = self
            .layers
            .iter()
            .map(|doc| {
                Ok(match doc {
                    LayerDoc::Conv2d {
                        weights,
                        bias,
                        stride,
                        padding,
                    } => Layer::Conv2d {
                        weight: load(weights)?,
                        bias: load(bias)?,
                        stride: *stride,
                        padding: *padding,
                    },
                    LayerDoc::Relu => Layer::Relu,
                    LayerDoc::Batchnorm {
                        gamma,
                        beta,
                        mean,
                        var,
                        eps,
                    } => Layer::BatchNorm {
                        gamma: load(gamma)?,
                        beta: load(beta)?,
                        mean: load(mean)?,
                        var: load(var)?,
                        eps: *eps,
                    },
                    LayerDoc::GlobalAvgPool => Layer::GlobalAvgPool,
                    LayerDoc::GlobalMaxPool => Layer::GlobalMaxPool,
                    LayerDoc::Flatten => Layer::Flatten,
                    LayerDoc::FullyConnected { weights, bias } => Layer::FullyConnected {
                        weight: load(weights)?,
                        bias: load(bias)?,
                    },
                    LayerDoc::L2Normalize => Layer::L2Normalize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Model::new(self.name, self.input_shape, layers, self.last_conv_index)
    }
}

/// Everything recorded during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `A`: output of the feature layer, `[m, n, p]`.
    pub conv_feature: Tensor,
    /// `E`: head output before any L2 normalization.
    pub embedding: Tensor,
    pub layer_outputs: Vec<Tensor>,
}

pub fn forward(model: &Model, image: &Tensor) -> Result<ForwardTrace> {
    if image.shape() != model.input_shape {
        return Err(Error::shape(
            Some(0),
            format!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                model.input_shape
            ),
        ));
    }
    let mut outputs: Vec<Tensor> = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        let input = outputs.last().unwrap_or(image);
        let out = layer.apply(input).map_err(|e| match e {
            Error::ShapeMismatch { detail, .. } => Error::shape(Some(i), detail),
            other => other,
        })?;
        outputs.push(out);
    }
    let embedding_idx = if model.ends_with_l2() {
        outputs.len() - 2
    } else {
        outputs.len() - 1
    };
    Ok(ForwardTrace {
        conv_feature: outputs[model.last_conv_index].clone(),
        embedding: outputs[embedding_idx].clone(),
        layer_outputs: outputs,
    })
}

/// Runs only the head layers on a feature map; returns `E` (pre-L2).
pub fn head_forward(feature: &Tensor, model: &Model) -> Result<Tensor> {
    head_outputs(feature, model).map(|mut outs| {
        if model.ends_with_l2() {
            outs.pop();
        }
        outs.pop().expect("head has at least one layer")
    })
}

/// Output of every head layer, in order.
pub fn head_outputs(feature: &Tensor, model: &Model) -> Result<Vec<Tensor>> {
    let expected = model.feature_shape();
    if feature.shape() != expected {
        return Err(Error::shape(
            Some(model.last_conv_index + 1),
            format!(
                "feature {:?} does not match {:?}",
                feature.shape(),
                expected
            ),
        ));
    }
    let mut outs: Vec<Tensor> = Vec::new();
    for (offset, layer) in model.head_layers().iter().enumerate() {
        let input = outs.last().unwrap_or(feature);
        let out = layer.apply(input).map_err(|e| match e {
            Error::ShapeMismatch { detail, .. } => {
                Error::shape(Some(model.last_conv_index + 1 + offset), detail)
            }
            other => other,
        })?;
        outs.push(out);
    }
    Ok(outs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn identity_conv() -> Layer {
        Layer::Conv2d {
            weight: t(&[1, 1, 1, 1], &[1.0]),
            bias: t(&[1], &[0.0]),
            stride: 1,
            padding: 0,
        }
    }

    #[test]
    fn scalar_conv() {
        let out = conv2d(
            &t(&[1, 1, 1], &[5.0]),
            &t(&[1, 1, 1, 1], &[3.0]),
            &t(&[1], &[1.0]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(out.data(), &[16.0]);
    }

    #[test]
    fn zero_input_gives_bias() {
        let out = conv2d(
            &Tensor::zeros(vec![4, 4, 2]).unwrap(),
            &t(&[3, 3, 2, 3], &[0.7; 54]),
            &t(&[3], &[1.0, -2.0, 0.5]),
            2,
            1,
        )
        .unwrap();
        assert_eq!(out.shape(), &[2, 2, 3]);
        for px in out.data().chunks(3) {
            assert_eq!(px, &[1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let err = conv2d(
            &t(&[1, 1, 1], &[1.0]),
            &t(&[3, 3, 1, 1], &[1.0; 9]),
            &t(&[1], &[0.0]),
            1,
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn pooling() {
        let a = t(&[2, 2, 1], &[1.0, 3.0, 2.0, 0.0]);
        assert_eq!(global_pool(&a, PoolMode::Avg).unwrap().data(), &[1.5]);
        assert_eq!(global_pool(&a, PoolMode::Max).unwrap().data(), &[3.0]);
    }

    #[test]
    fn identity_forward() {
        let model = Model::new(
            "id",
            [1, 1, 1],
            vec![identity_conv(), Layer::GlobalAvgPool],
            0,
        )
        .unwrap();
        let trace = forward(&model, &t(&[1, 1, 1], &[2.0])).unwrap();
        assert_eq!(trace.conv_feature.data(), &[2.0]);
    }

    #[test]
    fn gap_forward_is_mean() {
        let model = Model::new(
            "gap",
            [2, 2, 1],
            vec![identity_conv(), Layer::GlobalAvgPool],
            0,
        )
        .unwrap();
        let trace = forward(&model, &t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(trace.embedding.data(), &[2.5]);
        assert_eq!(
            head_forward(&trace.conv_feature, &model).unwrap(),
            trace.embedding
        );
    }

    #[test]
    fn identity_fc_head() {
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let model = Model::new(
            "flat",
            [2, 1, 2],
            vec![
                Layer::Relu,
                Layer::Flatten,
                Layer::FullyConnected {
                    weight: t(&[4, 4], &eye),
                    bias: t(&[4], &[0.0; 4]),
                },
            ],
            0,
        )
        .unwrap();
        let f = t(&[2, 1, 2], &[0.5, 1.5, 2.5, 3.5]);
        assert_eq!(head_forward(&f, &model).unwrap().data(), f.data());
    }

    #[test]
    fn batchnorm_matches_direct_formula() {
        let x = t(&[2, 1, 2], &[1.0, -2.0, 0.5, 4.0]);
        let gamma = t(&[2], &[2.0, 0.5]);
        let beta = t(&[2], &[0.1, -1.0]);
        let mean = t(&[2], &[0.5, 1.0]);
        let var = t(&[2], &[4.0, 0.25]);
        let y = batchnorm(&x, &gamma, &beta, &mean, &var, 1e-5).unwrap();
        for (i, &v) in y.data().iter().enumerate() {
            let c = i % 2;
            let direct = gamma.data()[c] as f64 * (x.data()[i] as f64 - mean.data()[c] as f64)
                / (var.data()[c] as f64 + 1e-5f32 as f64).sqrt()
                + beta.data()[c] as f64;
            assert!((v as f64 - direct).abs() < 1e-6);
        }
    }

    #[test]
    fn manifest_validation() {
        // two reductions
        assert!(matches!(
            Model::new(
                "bad",
                [1, 1, 1],
                vec![identity_conv(), Layer::GlobalAvgPool, Layer::Flatten],
                0
            ),
            Err(Error::Manifest(_) | Error::ShapeMismatch { .. })
        ));
        // l2 not last
        let fc = Layer::FullyConnected {
            weight: t(&[1, 1], &[1.0]),
            bias: t(&[1], &[0.0]),
        };
        assert!(matches!(
            Model::new(
                "bad",
                [1, 1, 1],
                vec![
                    identity_conv(),
                    Layer::GlobalAvgPool,
                    Layer::L2Normalize,
                    fc
                ],
                0
            ),
            Err(Error::Manifest(_))
        ));
        // wrong channel count reports the layer index
        let err = Model::new(
            "bad",
            [1, 1, 2],
            vec![identity_conv(), Layer::GlobalAvgPool],
            0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { layer: Some(0), .. }));
    }

    #[test]
    fn forward_rejects_wrong_image() {
        let model = Model::new(
            "id",
            [1, 1, 1],
            vec![identity_conv(), Layer::GlobalAvgPool],
            0,
        )
        .unwrap();
        assert!(matches!(
            forward(&model, &t(&[2, 1, 1], &[1.0, 2.0])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let model = Model::new(
            "rt",
            [2, 2, 1],
            vec![
                identity_conv(),
                Layer::Relu,
                Layer::GlobalMaxPool,
                Layer::BatchNorm {
                    gamma: t(&[1], &[1.5]),
                    beta: t(&[1], &[0.1]),
                    mean: t(&[1], &[0.2]),
                    var: t(&[1], &[0.9]),
                    eps: 1e-3,
                },
                Layer::L2Normalize,
            ],
            1,
        )
        .unwrap();
        let path = model.save(dir.path(), "model").unwrap();
        let loaded = Model::load(&path).unwrap();
        assert_eq!(loaded, model);
    }
}
