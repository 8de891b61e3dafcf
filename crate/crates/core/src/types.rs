//! Array vocabulary shared by every module: logits, probability maps,
//! masks, label vectors and image batches.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on the per-pixel sum of a [`ProbMap`].
pub const PROB_SUM_TOL: f64 = 1e-5;

fn check_rank(t: &Tensor, rank: usize, what: &str) -> Result<()> {
    if t.shape().len() != rank || t.shape().iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!(
            "{what} needs {rank} positive dims, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let per = t.len() / t.dim(0);
    if let Some(pos) = t.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: what.to_string(),
            batch: pos / per,
        });
    }
    Ok(())
}

/// Per-pixel class scores `[B, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegLogits(Tensor);

impl SegLogits {
    pub fn new(t: Tensor) -> Result<Self> {
        check_rank(&t, 4, "seg logits")?;
        check_finite(&t, "seg logits")?;
        Ok(SegLogits(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dim(0)
    }

    pub fn classes(&self) -> usize {
        self.0.dim(1)
    }
}

/// Per-pixel categorical distributions `[B, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap(Tensor);

impl ProbMap {
    pub fn new(t: Tensor) -> Result<Self> {
        check_rank(&t, 4, "prob map")?;
        let (b, c, h, w) = (t.dim(0), t.dim(1), t.dim(2), t.dim(3));
        let hw = h * w;
        let d = t.data();
        for bi in 0..b {
            for px in 0..hw {
                let mut s = 0.0;
                for ci in 0..c {
                    let v = d[(bi * c + ci) * hw + px];
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::Invalid(format!(
                            "probability {v} outside [0,1] at batch {bi}"
                        )));
                    }
                    s += v;
                }
                if (s - 1.0).abs() > PROB_SUM_TOL {
                    return Err(Error::Invalid(format!(
                        "distribution sums to {s} at batch {bi}, pixel {px}"
                    )));
                }
            }
        }
        Ok(ProbMap(t))
    }

    pub(crate) fn from_tensor_unchecked(t: Tensor) -> Self {
        ProbMap(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dim(0)
    }

    pub fn classes(&self) -> usize {
        self.0.dim(1)
    }

    pub fn height(&self) -> usize {
        self.0.dim(2)
    }

    pub fn width(&self) -> usize {
        self.0.dim(3)
    }
}

/// Integer class-id mask `[B, H, W]`; class 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexMask {
    shape: [usize; 3],
    classes: usize,
    data: Vec<u8>,
}

impl IndexMask {
    pub fn new(shape: [usize; 3], classes: usize, data: Vec<u8>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "mask shape {shape:?} with {} values",
                data.len()
            )));
        }
        if classes == 0 || classes > 256 {
            return Err(Error::Invalid(format!("class count {classes}")));
        }
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::ClassId {
                id: bad as usize,
                classes,
            });
        }
        Ok(IndexMask {
            shape,
            classes,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn height(&self) -> usize {
        self.shape[1]
    }

    pub fn width(&self) -> usize {
        self.shape[2]
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// The mask of a single batch entry.
    pub fn image(&self, b: usize) -> &[u8] {
        let hw = self.shape[1] * self.shape[2];
        &self.data[b * hw..(b + 1) * hw]
    }

    pub fn concat(parts: &[&IndexMask]) -> Result<IndexMask> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero masks".into()))?;
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            if p.shape[1..] != first.shape[1..] || p.classes != first.classes {
                return Err(Error::Shape("mask concat: differing shapes".into()));
            }
            b += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        IndexMask::new([b, first.shape[1], first.shape[2]], first.classes, data)
    }

    /// One-hot encodes into `[B, C, H, W]`.
    pub fn encode(&self) -> OneHotMask {
        let [b, h, w] = self.shape;
        let hw = h * w;
        let c = self.classes;
        let mut t = Tensor::zeros(&[b, c, h, w]);
        let d = t.data_mut();
        for bi in 0..b {
            for px in 0..hw {
                let k = self.data[bi * hw + px] as usize;
                d[(bi * c + k) * hw + px] = 1.0;
            }
        }
        OneHotMask(t)
    }
}

/// One-hot class indicator `[B, C, H, W]` with exactly one 1 per pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotMask(Tensor);

impl OneHotMask {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Recovers the class-id mask.
    pub fn to_index(&self) -> IndexMask {
        let (b, c, h, w) = (
            self.0.dim(0),
            self.0.dim(1),
            self.0.dim(2),
            self.0.dim(3),
        );
        let hw = h * w;
        let d = self.0.data();
        let mut out = vec![0u8; b * hw];
        for bi in 0..b {
            for px in 0..hw {
                for ci in 0..c {
                    if d[(bi * c + ci) * hw + px] == 1.0 {
                        out[bi * hw + px] = ci as u8;
                        break;
                    }
                }
            }
        }
        IndexMask {
            shape: [b, h, w],
            classes: c,
            data: out,
        }
    }

    /// Reading a one-hot map as probabilities: it is a valid distribution.
    pub fn as_probs(&self) -> ProbMap {
        ProbMap(self.0.clone())
    }
}

/// Per-image multi-label scores `[B, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsLogits(Tensor);

impl ClsLogits {
    pub fn new(t: Tensor) -> Result<Self> {
        check_rank(&t, 2, "cls logits")?;
        check_finite(&t, "cls logits")?;
        Ok(ClsLogits(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dim(0)
    }

    pub fn labels(&self) -> usize {
        self.0.dim(1)
    }
}

/// Binary multi-label targets or predictions `[B, K]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVector {
    batch: usize,
    labels: usize,
    data: Vec<u8>,
}

impl LabelVector {
    pub fn new(batch: usize, labels: usize, data: Vec<u8>) -> Result<Self> {
        if batch * labels != data.len() || labels == 0 {
            return Err(Error::Shape(format!(
                "label vector [{batch}, {labels}] with {} values",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Invalid("label entries must be 0 or 1".into()));
        }
        Ok(LabelVector {
            batch,
            labels,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn row(&self, b: usize) -> &[u8] {
        &self.data[b * self.labels..(b + 1) * self.labels]
    }

    pub fn concat(parts: &[&LabelVector]) -> Result<LabelVector> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero label vectors".into()))?;
        let mut data = Vec::new();
        let mut b = 0;
        for p in parts {
            if p.labels != first.labels {
                return Err(Error::Shape("label concat: differing K".into()));
            }
            b += p.batch;
            data.extend_from_slice(&p.data);
        }
        LabelVector::new(b, first.labels, data)
    }
}

/// Grayscale images `[B, 1, H, W]` with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch(Tensor);

impl ImageBatch {
    pub fn new(t: Tensor) -> Result<Self> {
        check_rank(&t, 4, "image batch")?;
        if t.dim(1) != 1 {
            return Err(Error::Shape(format!(
                "image batch must be single-channel, got {:?}",
                t.shape()
            )));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("intensity {v} outside [0,1]")));
        }
        Ok(ImageBatch(t))
    }

    pub(crate) fn from_tensor_unchecked(t: Tensor) -> Self {
        ImageBatch(t)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn batch(&self) -> usize {
        self.0.dim(0)
    }

    pub fn height(&self) -> usize {
        self.0.dim(2)
    }

    pub fn width(&self) -> usize {
        self.0.dim(3)
    }

    pub fn slice(&self, start: usize, end: usize) -> ImageBatch {
        ImageBatch(self.0.batch_slice(start, end))
    }

    pub fn concat(parts: &[&ImageBatch]) -> Result<ImageBatch> {
        let ts: Vec<&Tensor> = parts.iter().map(|p| &p.0).collect();
        Ok(ImageBatch(Tensor::concat_batch(&ts)?))
    }
}
