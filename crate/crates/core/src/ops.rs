//! Elementary transforms: channel softmax, hard pseudo-labels, mixup.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::types::{ClsLogits, ImageBatch, IndexMask, LabelVector, OneHotMask, ProbMap, SegLogits};

/// Default threshold for turning label scores into binary labels.
pub const CLS_THRESHOLD: f64 = 0.5;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the class axis of a `[B, C, H, W]` tensor.
pub(crate) fn softmax_channels(t: &Tensor) -> Tensor {
    let (b, c, hw) = (t.dim(0), t.dim(1), t.dim(2) * t.dim(3));
    let mut out = Tensor::zeros(t.shape());
    let src = t.data();
    let dst = out.data_mut();
    for bi in 0..b {
        let base = bi * c * hw;
        for px in 0..hw {
            let mut mx = f64::NEG_INFINITY;
            for ci in 0..c {
                mx = mx.max(src[base + ci * hw + px]);
            }
            let mut s = 0.0;
            for ci in 0..c {
                let e = (src[base + ci * hw + px] - mx).exp();
                dst[base + ci * hw + px] = e;
                s += e;
            }
            for ci in 0..c {
                dst[base + ci * hw + px] /= s;
            }
        }
    }
    out
}

/// Pulls a gradient with respect to softmax probabilities back to the
/// logits: `dz_c = p_c (g_c - sum_k p_k g_k)`.
pub fn softmax_backward(p: &Tensor, dp: &Tensor) -> Tensor {
    let (b, c, hw) = (p.dim(0), p.dim(1), p.dim(2) * p.dim(3));
    let mut dz = Tensor::zeros(p.shape());
    let (pd, gd) = (p.data(), dp.data());
    let out = dz.data_mut();
    for bi in 0..b {
        let base = bi * c * hw;
        for px in 0..hw {
            let mut dot = 0.0;
            for ci in 0..c {
                let i = base + ci * hw + px;
                dot += pd[i] * gd[i];
            }
            for ci in 0..c {
                let i = base + ci * hw + px;
                out[i] = pd[i] * (gd[i] - dot);
            }
        }
    }
    dz
}

/// Per-pixel class distribution of segmentation logits.
pub fn softmax_seg(logits: &SegLogits) -> ProbMap {
    ProbMap::from_tensor_unchecked(softmax_channels(logits.tensor()))
}

/// Index of the highest-probability class per pixel; ties go to the lowest
/// class index.
pub fn argmax_mask(p: &ProbMap) -> IndexMask {
    argmax_channels(p.tensor())
}

pub(crate) fn argmax_channels(t: &Tensor) -> IndexMask {
    let (b, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
    let hw = h * w;
    let d = t.data();
    let mut out = vec![0u8; b * hw];
    for bi in 0..b {
        for px in 0..hw {
            let mut best = 0;
            let mut bv = d[bi * c * hw + px];
            for ci in 1..c {
                let v = d[(bi * c + ci) * hw + px];
                if v > bv {
                    bv = v;
                    best = ci;
                }
            }
            out[bi * hw + px] = best as u8;
        }
    }
    IndexMask::new([b, h, w], c, out).expect("argmax stays in class range")
}

/// Hard one-hot pseudo-label of a probability map. The result is plain data
/// and carries no gradient path back to `p`.
pub fn one_hot_argmax(p: &ProbMap) -> OneHotMask {
    argmax_mask(p).encode()
}

/// Label `k` is on iff `sigmoid(logit_k) >= threshold`.
pub fn binarize_cls(logits: &ClsLogits, threshold: f64) -> Result<LabelVector> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Invalid(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    Ok(binarize_tensor(logits.tensor(), threshold))
}

pub(crate) fn binarize_tensor(t: &Tensor, threshold: f64) -> LabelVector {
    // sigmoid(z) >= t compared in logit space; rounding in the sigmoid
    // itself would otherwise flip exact ties such as z = ln 9, t = 0.9.
    let cut = threshold.ln() - (-threshold).ln_1p();
    let data = t
        .data()
        .iter()
        .map(|&z| u8::from(z >= cut))
        .collect();
    LabelVector::new(t.dim(0), t.dim(1), data).expect("shape carried from logits")
}

/// `sigma * a + (1 - sigma) * b`, elementwise.
pub(crate) fn mix_tensors(a: &Tensor, b: &Tensor, sigma: f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "mix: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Invalid(format!("mix ratio {sigma} outside [0,1]")));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| sigma * x + (1.0 - sigma) * y)
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Mixup of two image batches.
pub fn mix(xi: &ImageBatch, xj: &ImageBatch, sigma: f64) -> Result<ImageBatch> {
    Ok(ImageBatch::from_tensor_unchecked(mix_tensors(
        xi.tensor(),
        xj.tensor(),
        sigma,
    )?))
}

/// Mixup of two probability maps; convex combinations stay valid
/// distributions.
pub fn mix_probs(pi: &ProbMap, pj: &ProbMap, sigma: f64) -> Result<ProbMap> {
    Ok(ProbMap::from_tensor_unchecked(mix_tensors(
        pi.tensor(),
        pj.tensor(),
        sigma,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg(shape: &[usize], v: Vec<f64>) -> SegLogits {
        SegLogits::new(Tensor::from_vec(shape, v).unwrap()).unwrap()
    }

    fn probs(shape: &[usize], v: Vec<f64>) -> ProbMap {
        ProbMap::new(Tensor::from_vec(shape, v).unwrap()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let p = softmax_seg(&seg(&[1, 4, 2, 2], vec![0.0; 16]));
        assert!(p.tensor().data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_saturates_without_overflow() {
        let p = softmax_seg(&seg(&[1, 2, 1, 1], vec![1000.0, 0.0]));
        assert!((p.tensor().data()[0] - 1.0).abs() < 1e-12);
        assert!(p.tensor().data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_ln3_case() {
        let p = softmax_seg(&seg(&[1, 2, 1, 1], vec![3f64.ln(), 0.0]));
        assert!((p.tensor().data()[0] - 0.75).abs() < 1e-9);
        assert!((p.tensor().data()[1] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn argmax_picks_max_and_breaks_ties_low() {
        let oh = one_hot_argmax(&probs(&[1, 3, 1, 1], vec![0.1, 0.7, 0.2]));
        assert_eq!(oh.tensor().data(), &[0.0, 1.0, 0.0]);
        let oh = one_hot_argmax(&probs(&[1, 2, 1, 1], vec![0.5, 0.5]));
        assert_eq!(oh.tensor().data(), &[1.0, 0.0]);
    }

    #[test]
    fn binarize_threshold_conventions() {
        let z = ClsLogits::new(Tensor::zeros(&[1, 7])).unwrap();
        assert_eq!(binarize_cls(&z, 0.5).unwrap().data(), &[1; 7]);
        let z = ClsLogits::new(Tensor::from_vec(&[1, 2], vec![-10.0, 10.0]).unwrap()).unwrap();
        assert_eq!(binarize_cls(&z, 0.5).unwrap().data(), &[0, 1]);
        let z = ClsLogits::new(Tensor::from_vec(&[1, 1], vec![9f64.ln()]).unwrap()).unwrap();
        assert_eq!(binarize_cls(&z, 0.9).unwrap().data(), &[1]);
        assert!(binarize_cls(&z, 1.0).is_err());
        assert!(binarize_cls(&z, 0.0).is_err());
    }

    #[test]
    fn mix_identities() {
        let zeros = ImageBatch::new(Tensor::zeros(&[2, 1, 3, 3])).unwrap();
        let ones = ImageBatch::new(Tensor::full(&[2, 1, 3, 3], 1.0)).unwrap();
        assert_eq!(mix(&zeros, &ones, 1.0).unwrap(), zeros);
        let half = mix(&zeros, &ones, 0.5).unwrap();
        assert!(half.tensor().data().iter().all(|&v| v == 0.5));
        let other = ImageBatch::new(Tensor::zeros(&[1, 1, 3, 3])).unwrap();
        assert!(mix(&zeros, &other, 0.5).is_err());

        let a = probs(&[1, 2, 1, 1], vec![1.0, 0.0]);
        let b = probs(&[1, 2, 1, 1], vec![0.0, 1.0]);
        let m = mix_probs(&a, &b, 0.5).unwrap();
        assert_eq!(m.tensor().data(), &[0.5, 0.5]);
        ProbMap::new(m.into_tensor()).unwrap();
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(
            b in 1usize..3, c in 1usize..6, h in 1usize..4, w in 1usize..4,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let n = b * c * h * w;
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let p = softmax_seg(&seg(&[b, c, h, w], v));
            prop_assert!(ProbMap::new(p.into_tensor()).is_ok());
        }

        #[test]
        fn mix_of_distributions_is_a_distribution(
            x in proptest::collection::vec(0.0f64..1.0, 12),
            y in proptest::collection::vec(0.0f64..1.0, 12),
            sigma in 0.0f64..=1.0,
        ) {
            let norm = |v: &[f64]| -> Vec<f64> {
                let mut out = Vec::new();
                for chunk in [&v[0..3], &v[3..6], &v[6..9], &v[9..12]] {
                    let s: f64 = chunk.iter().sum::<f64>() + 1e-9;
                    out.extend(chunk.iter().map(|a| (a + 1e-9 / 3.0) / s));
                }
                out
            };
            // layout [1, 3, 2, 2]: reorder pixel-major chunks into class-major
            let to_cm = |v: Vec<f64>| -> Vec<f64> {
                let mut o = vec![0.0; 12];
                for px in 0..4 { for c in 0..3 { o[c * 4 + px] = v[px * 3 + c]; } }
                o
            };
            let a = probs(&[1, 3, 2, 2], to_cm(norm(&x)));
            let b = probs(&[1, 3, 2, 2], to_cm(norm(&y)));
            let m = mix_probs(&a, &b, sigma).unwrap();
            prop_assert!(ProbMap::new(m.into_tensor()).is_ok());
        }

        #[test]
        fn one_hot_is_idempotent(v in proptest::collection::vec(0u8..4, 6)) {
            let m = IndexMask::new([1, 2, 3], 4, v).unwrap();
            let oh = m.encode();
            prop_assert_eq!(one_hot_argmax(&oh.as_probs()), oh);
        }

        #[test]
        fn binarize_is_monotone(z in proptest::collection::vec(-8.0f64..8.0, 7), k in 0usize..7, bump in 0.0f64..5.0) {
            let before = binarize_tensor(&Tensor::from_vec(&[1, 7], z.clone()).unwrap(), 0.5);
            let mut raised = z;
            raised[k] += bump;
            let after = binarize_tensor(&Tensor::from_vec(&[1, 7], raised).unwrap(), 0.5);
            for i in 0..7 {
                prop_assert!(after.data()[i] >= before.data()[i]);
            }
        }
    }
}
