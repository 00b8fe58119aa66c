//! Closed-form Grad-CAM variants, for comparison with decomposition maps.
//!
//! Once a head is linearized, the gradient of any output with respect to
//! `A[i,j]` is just the corresponding row of `W[i,j]`, so no autodiff is
//! needed. Grad-CAM averages that gradient over positions before weighting
//! the features; skipping the average gives back the decomposition.

use crate::decompose::{ActivationMap, MapVariant};
use crate::error::{Error, Result};
use crate::linearize::LinearizedHead;
use crate::tensor::{l2_norm, Tensor};

/// `d(E/|E|)/dE`, an `l x l` symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Jacobian {
    pub matrix: Tensor,
}

fn jacobian_entries(e: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(e);
    if norm <= 1e-12 {
        return Err(Error::DegenerateEmbedding(norm));
    }
    let l = e.len();
    let n3 = norm.powi(3);
    let mut out = vec![0.0; l * l];
    for i in 0..l {
        for j in 0..l {
            out[i * l + j] = if i == j {
                (1.0 - e[i] * e[i] / (norm * norm)) / norm
            } else {
                -e[i] * e[j] / n3
            };
        }
    }
    Ok(out)
}

pub fn l2norm_jacobian(e: &[f64]) -> Result<Jacobian> {
    let l = e.len();
    Ok(Jacobian {
        matrix: Tensor::from_f64(vec![l, l], &jacobian_entries(e)?)?,
    })
}

/// Gradient of the cosine similarity with respect to `E_q`.
///
/// With `l2_jacobian` this is `J(E_q) E_r / |E_r|`. Without it the
/// normalization is treated as constant, giving the gradient of
/// `E_q . E_r` scaled by `1 / (|E_q| |E_r|)`.
pub fn embedding_channel_weights(e_q: &[f64], e_r: &[f64], l2_jacobian: bool) -> Result<Vec<f64>> {
    if e_q.len() != e_r.len() {
        return Err(Error::EmbeddingLengthMismatch {
            query: e_q.len(),
            reference: e_r.len(),
        });
    }
    let (nq, nr) = (l2_norm(e_q), l2_norm(e_r));
    if nr <= 1e-12 {
        return Err(Error::DegenerateEmbedding(nr));
    }
    if l2_jacobian {
        let l = e_q.len();
        let jac = jacobian_entries(e_q)?;
        Ok((0..l)
            .map(|i| (0..l).map(|j| jac[i * l + j] * e_r[j]).sum::<f64>() / nr)
            .collect())
    } else {
        if nq <= 1e-12 {
            return Err(Error::DegenerateEmbedding(nq));
        }
        Ok(e_r.iter().map(|v| v / (nq * nr)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradCamOptions {
    /// Differentiate through the L2 normalization of `E_q`.
    pub l2_jacobian: bool,
    /// Average the gradient over positions (the Grad-CAM step).
    pub pool_gradient: bool,
}

impl GradCamOptions {
    pub const GRADCAM: Self = Self {
        l2_jacobian: true,
        pool_gradient: true,
    };
    pub const NO_NORM: Self = Self {
        l2_jacobian: false,
        pool_gradient: true,
    };
    /// Neither step: reduces to the Decomposition+Bias overall map.
    pub const GRADIENT_TIMES_FEATURE: Self = Self {
        l2_jacobian: false,
        pool_gradient: false,
    };
}

/// Weights `G[i,j] = v^T W[i,j]` for an embedding-space vector `v`.
fn position_gradients(head: &LinearizedHead, v: &[f64]) -> Vec<Vec<f64>> {
    let (m, n) = head.grid();
    let (l, p) = (head.embedding_len(), head.channels());
    (0..m * n)
        .map(|pos| {
            let block = head.block(pos / n, pos % n);
            (0..p)
                .map(|k| (0..l).map(|o| v[o] * f64::from(block[o * p + k])).sum())
                .collect()
        })
        .collect()
}

fn weight_features(
    head: &LinearizedHead,
    a: &Tensor,
    grads: Vec<Vec<f64>>,
    pool: bool,
    variant: MapVariant,
) -> Result<ActivationMap> {
    head.check_feature(a)?;
    let (m, n) = head.grid();
    let p = head.channels();
    let x = a.data();
    let grads = if pool {
        let mut mean = vec![0.0; p];
        for g in &grads {
            mean.iter_mut().zip(g).for_each(|(acc, v)| *acc += v);
        }
        mean.iter_mut().for_each(|v| *v /= (m * n) as f64);
        vec![mean; m * n]
    } else {
        grads
    };
    let values: Vec<f64> = (0..m * n)
        .map(|pos| {
            (0..p)
                .map(|k| grads[pos][k] * f64::from(x[pos * p + k]))
                .sum()
        })
        .collect();
    Ok(ActivationMap::new(
        Tensor::from_f64(vec![m, n], &values)?,
        variant,
    ))
}

/// Gradient-weighted map of the query image for a metric model.
pub fn gradient_map(
    head_q: &LinearizedHead,
    a_q: &Tensor,
    e_q: &[f64],
    e_r: &[f64],
    options: GradCamOptions,
) -> Result<ActivationMap> {
    let v = embedding_channel_weights(e_q, e_r, options.l2_jacobian)?;
    if v.len() != head_q.embedding_len() {
        return Err(Error::EmbeddingLengthMismatch {
            query: head_q.embedding_len(),
            reference: v.len(),
        });
    }
    let variant = if options.l2_jacobian {
        MapVariant::Gradcam
    } else {
        MapVariant::GradcamNonorm
    };
    weight_features(
        head_q,
        a_q,
        position_gradients(head_q, &v),
        options.pool_gradient,
        variant,
    )
}

/// Grad-CAM for metric learning; `normalized = false` is "no norm".
pub fn gradcam_metric(
    head_q: &LinearizedHead,
    a_q: &Tensor,
    e_q: &[f64],
    e_r: &[f64],
    normalized: bool,
) -> Result<ActivationMap> {
    let options = if normalized {
        GradCamOptions::GRADCAM
    } else {
        GradCamOptions::NO_NORM
    };
    gradient_map(head_q, a_q, e_q, e_r, options)
}

/// Grad-CAM of output unit `class_idx`: `sum_k A[i,j,k] GAP(dS_c/dA_k)`.
pub fn gradcam_classification(
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
    let mut unit = vec![0.0; l];
    unit[class_idx] = 1.0;
    weight_features(
        head,
        a,
        position_gradients(head, &unit),
        true,
        MapVariant::Gradcam,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::class_decomposition;
    use crate::linearize::linearize_head;
    use crate::synth::{random_feature_model, random_tensor, trace_from_feature, HeadKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn normalize(e: &[f64]) -> Vec<f64> {
        let n = l2_norm(e);
        e.iter().map(|v| v / n).collect()
    }

    #[test]
    fn jacobian_hand_values() {
        let j = l2norm_jacobian(&[3.0, 4.0]).unwrap();
        let want = [0.128, -0.096, -0.096, 0.072];
        for (got, want) in j.matrix.data().iter().zip(want) {
            assert!((f64::from(*got) - want).abs() < 1e-7);
        }
        let axis = l2norm_jacobian(&[1.0, 0.0]).unwrap();
        assert_eq!(axis.matrix.data(), &[0.0, 0.0, 0.0, 1.0]);
        assert!(matches!(
            l2norm_jacobian(&[0.0, 0.0]),
            Err(Error::DegenerateEmbedding(_))
        ));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let e = [3.0, 4.0];
        let j = jacobian_entries(&e).unwrap();
        let h = 1e-3;
        for col in 0..2 {
            let mut plus = e;
            let mut minus = e;
            plus[col] += h;
            minus[col] -= h;
            let (np, nm) = (normalize(&plus), normalize(&minus));
            for row in 0..2 {
                let fd = (np[row] - nm[row]) / (2.0 * h);
                assert!((fd - j[row * 2 + col]).abs() <= 1e-4);
            }
        }
    }

    #[test]
    fn jacobian_is_symmetric_and_orthogonal_to_e() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let e: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let j = jacobian_entries(&e).unwrap();
            for r in 0..6 {
                let je: f64 = (0..6).map(|c| j[r * 6 + c] * e[c]).sum();
                assert!(je.abs() <= 1e-6 * l2_norm(&e));
                for c in 0..6 {
                    assert_eq!(j[r * 6 + c], j[c * 6 + r]);
                }
            }
        }
    }

    #[test]
    fn flatten_head_with_position_constant_weights_matches_decomposition() {
        // FC weight identical for every position: GAP(W_k) == W_k.
        let (m, n, p, classes) = (2, 3, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let per_channel = random_tensor(&mut rng, &[classes, p], 1.0);
        let mut w = Vec::new();
        for c in 0..classes {
            for _ in 0..m * n {
                w.extend_from_slice(&per_channel.data()[c * p..(c + 1) * p]);
            }
        }
        let model = crate::nn::Model::new(
            "flat",
            [m, n, p],
            vec![
                crate::nn::Layer::Relu,
                crate::nn::Layer::Flatten,
                crate::nn::Layer::FullyConnected {
                    weight: Tensor::new(vec![classes, m * n * p], w).unwrap(),
                    bias: Tensor::zeros(vec![classes]).unwrap(),
                },
            ],
            0,
        )
        .unwrap();
        let a = random_tensor(&mut rng, &[m, n, p], 1.0);
        let head = linearize_head(&model, &trace_from_feature(&model, a.clone()).unwrap()).unwrap();
        for c in 0..classes {
            let g = gradcam_classification(&head, &a, c).unwrap();
            let d = class_decomposition(&head, &a, c).unwrap();
            assert_eq!(g.values, d.values);
        }
    }

    #[test]
    fn gmp_gradcam_is_dense_while_decomposition_is_sparse() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (m, n, p) = (3, 3, 2);
        let model = random_feature_model(&mut rng, [m, n, p], HeadKind::GmpFc, 4, false);
        let a = random_tensor(&mut rng, &[m, n, p], 1.0)
            .map(|v| v.abs() + 0.1)
            .unwrap();
        let head = linearize_head(&model, &trace_from_feature(&model, a.clone()).unwrap()).unwrap();
        let maxima = crate::linearize::gmp_mask(&a).unwrap().positions();
        for c in 0..4 {
            let d = class_decomposition(&head, &a, c).unwrap();
            let g = gradcam_classification(&head, &a, c).unwrap();
            let support_d: Vec<_> = (0..m * n)
                .filter(|&pos| d.values.data()[pos] != 0.0)
                .map(|pos| (pos / n, pos % n))
                .collect();
            assert!(support_d.iter().all(|cell| maxima.contains(cell)));
            let support_g = g.values.data().iter().filter(|&&v| v != 0.0).count();
            assert_eq!(support_g, m * n);
            // GMP case: (1/mn) sum_k A w_kc
            let crate::nn::Layer::FullyConnected { weight, .. } = &model.head_layers()[1] else {
                unreachable!()
            };
            for pos in 0..m * n {
                let want: f64 = (0..p)
                    .map(|k| f64::from(a.data()[pos * p + k]) * f64::from(weight.get(&[c, k])))
                    .sum::<f64>()
                    / (m * n) as f64;
                assert!((f64::from(g.values.data()[pos]) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_features_give_zero_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_feature_model(&mut rng, [2, 2, 3], HeadKind::FlattenFc, 3, true);
        let a = Tensor::zeros(vec![2, 2, 3]).unwrap();
        let head = linearize_head(&model, &trace_from_feature(&model, a.clone()).unwrap()).unwrap();
        let g = gradcam_classification(&head, &a, 1).unwrap();
        assert!(g.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dominant_channel_is_down_weighted_by_normalization() {
        let e_q = [10.0, 1.0, 1.0, 1.0];
        let e_r = [8.0, 1.5, 0.5, 1.0];
        let with = embedding_channel_weights(&e_q, &e_r, true).unwrap();
        let without = embedding_channel_weights(&e_q, &e_r, false).unwrap();
        assert!(with[0].abs() < without[0].abs());
    }
}
