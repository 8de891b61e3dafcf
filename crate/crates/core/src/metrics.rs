//! Evaluation: per-class Dice, Normalized Surface Dice, macro-F1 and the
//! weighted overall score. All values are percentages.

use crate::error::{Error, Result};
use crate::types::{IndexMask, LabelVector};

pub const DEFAULT_NSD_TOLERANCE: f64 = 1.0;

/// How a class that is empty in both prediction and ground truth counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EmptyPolicy {
    /// Left out of the per-image mean.
    #[default]
    Exclude,
    /// Scored as 100.
    Perfect,
}

/// Per-class scores averaged over images plus the overall mean.
#[derive(Clone, Debug, PartialEq)]
pub struct SegScores {
    /// One entry per foreground class; `None` when no image contributed.
    pub per_class: Vec<Option<f64>>,
    /// Mean over images of each image's mean over contributing classes.
    pub mean: f64,
}

fn check_pair(pred: &IndexMask, gt: &IndexMask, c_seg: usize) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.shape(),
            gt.shape()
        )));
    }
    for m in [pred, gt] {
        if let Some(&bad) = m.data().iter().find(|&&v| v as usize >= c_seg) {
            return Err(Error::ClassId {
                id: bad as usize,
                classes: c_seg,
            });
        }
    }
    Ok(())
}

/// Dice of each foreground class on one image; `None` marks empty/empty.
pub fn dice_image(pred: &[u8], gt: &[u8], c_seg: usize, policy: EmptyPolicy) -> Vec<Option<f64>> {
    let mut p = vec![0usize; c_seg];
    let mut g = vec![0usize; c_seg];
    let mut both = vec![0usize; c_seg];
    for (&a, &b) in pred.iter().zip(gt) {
        p[a as usize] += 1;
        g[b as usize] += 1;
        if a == b {
            both[a as usize] += 1;
        }
    }
    (1..c_seg)
        .map(|c| {
            if p[c] + g[c] == 0 {
                match policy {
                    EmptyPolicy::Exclude => None,
                    EmptyPolicy::Perfect => Some(100.0),
                }
            } else {
                Some(100.0 * 2.0 * both[c] as f64 / (p[c] + g[c]) as f64)
            }
        })
        .collect()
}

/// Foreground pixels of class `c` with a 4-neighbour outside the class or
/// on the image border.
pub fn boundary(mask: &[u8], h: usize, w: usize, c: u8) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] != c {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || mask[(y - 1) * w + x] != c
                || mask[(y + 1) * w + x] != c
                || mask[y * w + x - 1] != c
                || mask[y * w + x + 1] != c;
            out[y * w + x] = edge;
        }
    }
    out
}

fn offsets_within(tol: f64) -> Vec<(isize, isize)> {
    let r = tol.floor() as isize;
    let t2 = tol * tol;
    let mut v = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= t2 {
                v.push((dy, dx));
            }
        }
    }
    v
}

fn count_close(from: &[bool], to: &[bool], h: usize, w: usize, offs: &[(isize, isize)]) -> usize {
    let mut n = 0;
    for y in 0..h {
        for x in 0..w {
            if !from[y * w + x] {
                continue;
            }
            let hit = offs.iter().any(|&(dy, dx)| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                yy >= 0
                    && xx >= 0
                    && (yy as usize) < h
                    && (xx as usize) < w
                    && to[yy as usize * w + xx as usize]
            });
            n += usize::from(hit);
        }
    }
    n
}

/// NSD of each foreground class on one image at pixel tolerance `tol`.
pub fn nsd_image(
    pred: &[u8],
    gt: &[u8],
    h: usize,
    w: usize,
    c_seg: usize,
    tol: f64,
    policy: EmptyPolicy,
) -> Vec<Option<f64>> {
    let offs = offsets_within(tol);
    (1..c_seg)
        .map(|c| {
            let bp = boundary(pred, h, w, c as u8);
            let bg = boundary(gt, h, w, c as u8);
            let np = bp.iter().filter(|&&b| b).count();
            let ng = bg.iter().filter(|&&b| b).count();
            match (np, ng) {
                (0, 0) => match policy {
                    EmptyPolicy::Exclude => None,
                    EmptyPolicy::Perfect => Some(100.0),
                },
                (0, _) | (_, 0) => Some(0.0),
                _ => {
                    let close = count_close(&bp, &bg, h, w, &offs) + count_close(&bg, &bp, h, w, &offs);
                    Some(100.0 * close as f64 / (np + ng) as f64)
                }
            }
        })
        .collect()
}

fn mean_of(v: &[Option<f64>]) -> Option<f64> {
    let xs: Vec<f64> = v.iter().flatten().copied().collect();
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Running per-class and per-image sums; aggregation is order-independent
/// up to floating-point summation order, which is fixed by insertion order.
#[derive(Clone, Debug)]
struct SegAccumulator {
    class_sum: Vec<f64>,
    class_n: Vec<usize>,
    image_sum: f64,
    image_n: usize,
}

impl SegAccumulator {
    fn new(c_seg: usize) -> Self {
        SegAccumulator {
            class_sum: vec![0.0; c_seg - 1],
            class_n: vec![0; c_seg - 1],
            image_sum: 0.0,
            image_n: 0,
        }
    }

    fn add(&mut self, per: &[Option<f64>]) -> Option<f64> {
        for (i, v) in per.iter().enumerate() {
            if let Some(v) = v {
                self.class_sum[i] += v;
                self.class_n[i] += 1;
            }
        }
        let m = mean_of(per);
        if let Some(m) = m {
            self.image_sum += m;
            self.image_n += 1;
        }
        m
    }

    fn finish(&self) -> SegScores {
        SegScores {
            per_class: self
                .class_sum
                .iter()
                .zip(&self.class_n)
                .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
                .collect(),
            // nothing to segment anywhere counts as full agreement
            mean: if self.image_n == 0 {
                100.0
            } else {
                self.image_sum / self.image_n as f64
            },
        }
    }
}

/// Dice over a batch of masks.
pub fn dice_metric(pred: &IndexMask, gt: &IndexMask, c_seg: usize, policy: EmptyPolicy) -> Result<SegScores> {
    check_pair(pred, gt, c_seg)?;
    let mut acc = SegAccumulator::new(c_seg);
    for b in 0..pred.batch() {
        acc.add(&dice_image(pred.image(b), gt.image(b), c_seg, policy));
    }
    Ok(acc.finish())
}

/// Normalized Surface Dice over a batch of masks.
pub fn nsd_metric(
    pred: &IndexMask,
    gt: &IndexMask,
    tolerance_px: f64,
    c_seg: usize,
    policy: EmptyPolicy,
) -> Result<SegScores> {
    check_pair(pred, gt, c_seg)?;
    if !(tolerance_px >= 0.0 && tolerance_px.is_finite()) {
        return Err(Error::Invalid(format!("NSD tolerance {tolerance_px}")));
    }
    let (h, w) = (pred.height(), pred.width());
    let mut acc = SegAccumulator::new(c_seg);
    for b in 0..pred.batch() {
        acc.add(&nsd_image(pred.image(b), gt.image(b), h, w, c_seg, tolerance_px, policy));
    }
    Ok(acc.finish())
}

/// Per-label true/false positive and false negative counts.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct LabelCounts {
    tp: Vec<usize>,
    fp: Vec<usize>,
    fneg: Vec<usize>,
}

impl LabelCounts {
    fn new(k: usize) -> Self {
        LabelCounts {
            tp: vec![0; k],
            fp: vec![0; k],
            fneg: vec![0; k],
        }
    }

    fn add(&mut self, pred: &[u8], gt: &[u8]) {
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            match (p, g) {
                (1, 1) => self.tp[i] += 1,
                (1, 0) => self.fp[i] += 1,
                (0, 1) => self.fneg[i] += 1,
                _ => {}
            }
        }
    }

    fn macro_f1(&self) -> f64 {
        let k = self.tp.len();
        let sum: f64 = (0..k)
            .map(|i| {
                let den = 2 * self.tp[i] + self.fp[i] + self.fneg[i];
                if den == 0 {
                    1.0
                } else {
                    2.0 * self.tp[i] as f64 / den as f64
                }
            })
            .sum();
        100.0 * sum / k as f64
    }
}

/// Macro-averaged F1 over labels, counts pooled over the whole set. A label
/// with no positives in either prediction or ground truth scores 1.
pub fn f1_metric(pred: &LabelVector, gt: &LabelVector) -> Result<f64> {
    if pred.batch() != gt.batch() || pred.labels() != gt.labels() {
        return Err(Error::Shape(format!(
            "label predictions [{}, {}] vs ground truth [{}, {}]",
            pred.batch(),
            pred.labels(),
            gt.batch(),
            gt.labels()
        )));
    }
    let mut c = LabelCounts::new(gt.labels());
    for b in 0..gt.batch() {
        c.add(pred.row(b), gt.row(b));
    }
    Ok(c.macro_f1())
}

/// `0.45 * f1 + 0.45 * (dsc + nsd) / 2 + 0.1 * s_time`.
pub fn overall_score(dsc: f64, nsd: f64, f1: f64, s_time: f64) -> Result<f64> {
    for (name, v) in [("dsc", dsc), ("nsd", nsd), ("f1", f1), ("s_time", s_time)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::Invalid(format!("{name} = {v} outside [0, 100]")));
        }
    }
    Ok(0.45 * f1 + 0.45 * (dsc + nsd) / 2.0 + 0.1 * s_time)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub id: String,
    pub dsc: Option<f64>,
    pub nsd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub dsc: f64,
    pub nsd: f64,
    pub f1: f64,
    pub s_time: f64,
    /// Score including the time term.
    pub score: f64,
    /// `0.45 * f1 + 0.45 * (dsc + nsd) / 2`.
    pub score_no_time: f64,
    pub nsd_tolerance: f64,
    pub per_class_dsc: Vec<Option<f64>>,
    pub per_class_nsd: Vec<Option<f64>>,
    pub per_image: Vec<ImageScore>,
}

/// Streams images one at a time into a [`MetricsReport`].
#[derive(Clone, Debug)]
pub struct MetricsAccumulator {
    c_seg: usize,
    tolerance: f64,
    policy: EmptyPolicy,
    dice: SegAccumulator,
    nsd: SegAccumulator,
    labels: Option<LabelCounts>,
    images: Vec<ImageScore>,
}

impl MetricsAccumulator {
    pub fn new(c_seg: usize, tolerance_px: f64, policy: EmptyPolicy) -> Result<Self> {
        if !(tolerance_px >= 0.0 && tolerance_px.is_finite()) {
            return Err(Error::Invalid(format!("NSD tolerance {tolerance_px}")));
        }
        if c_seg < 2 {
            return Err(Error::Invalid(format!("class count {c_seg}")));
        }
        Ok(MetricsAccumulator {
            c_seg,
            tolerance: tolerance_px,
            policy,
            dice: SegAccumulator::new(c_seg),
            nsd: SegAccumulator::new(c_seg),
            labels: None,
            images: Vec::new(),
        })
    }

    /// Adds one image: masks as `[H, W]` slices, labels as length-K rows.
    #[allow(clippy::too_many_arguments)]
    pub fn add(
        &mut self,
        id: &str,
        pred_mask: &[u8],
        gt_mask: &[u8],
        h: usize,
        w: usize,
        pred_labels: &[u8],
        gt_labels: &[u8],
    ) -> Result<()> {
        if pred_mask.len() != h * w || gt_mask.len() != h * w {
            return Err(Error::Shape(format!(
                "{id}: masks of {} and {} pixels for {h}x{w}",
                pred_mask.len(),
                gt_mask.len()
            )));
        }
        if pred_labels.len() != gt_labels.len() {
            return Err(Error::Shape(format!("{id}: label rows differ in length")));
        }
        if let Some(&bad) = pred_mask.iter().chain(gt_mask).find(|&&v| v as usize >= self.c_seg) {
            return Err(Error::ClassId {
                id: bad as usize,
                classes: self.c_seg,
            });
        }
        let labels = self
            .labels
            .get_or_insert_with(|| LabelCounts::new(gt_labels.len()));
        if labels.tp.len() != gt_labels.len() {
            return Err(Error::Shape(format!("{id}: label count changed mid-stream")));
        }
        labels.add(pred_labels, gt_labels);
        let d = self.dice.add(&dice_image(pred_mask, gt_mask, self.c_seg, self.policy));
        let n = self.nsd.add(&nsd_image(
            pred_mask,
            gt_mask,
            h,
            w,
            self.c_seg,
            self.tolerance,
            self.policy,
        ));
        self.images.push(ImageScore {
            id: id.to_string(),
            dsc: d,
            nsd: n,
        });
        Ok(())
    }

    pub fn finish(&self, s_time: f64) -> Result<MetricsReport> {
        let dice = self.dice.finish();
        let nsd = self.nsd.finish();
        let f1 = self.labels.as_ref().map_or(100.0, LabelCounts::macro_f1);
        Ok(MetricsReport {
            dsc: dice.mean,
            nsd: nsd.mean,
            f1,
            s_time,
            score: overall_score(dice.mean, nsd.mean, f1, s_time)?,
            score_no_time: overall_score(dice.mean, nsd.mean, f1, 0.0)?,
            nsd_tolerance: self.tolerance,
            per_class_dsc: dice.per_class,
            per_class_nsd: nsd.per_class,
            per_image: self.images.clone(),
        })
    }
}
