//! Loss terms of the co-training objective and their analytic gradients.
//!
//! Every pixel or batch sum is reduced as a mean, so values do not depend on
//! image resolution. Gradient functions return derivatives with respect to
//! the argument named in their doc comment; segmentation terms that take a
//! [`ProbMap`] differentiate with respect to probabilities, and
//! [`softmax_backward`] carries them to logits.

use crate::error::{Error, Result};
use crate::nn::DualHeadOutput;
use crate::ops::{argmax_channels, binarize_tensor, mix_tensors, sigmoid, softmax_channels, CLS_THRESHOLD};
use crate::tensor::Tensor;
use crate::types::{ClsLogits, IndexMask, LabelVector, ProbMap, SegLogits};

pub use crate::ops::softmax_backward;

/// Floor applied to probabilities inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-8;
/// Smoothing added to the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_cps: f64,
    pub tau_ict: f64,
    pub beta_dac: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cps: 5.0,
            tau_ict: 1.0,
            beta_dac: 5.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        LossWeights {
            lambda_cps: 0.0,
            tau_ict: 0.0,
            beta_dac: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_cps", self.lambda_cps),
            ("tau_ict", self.tau_ict),
            ("beta_dac", self.beta_dac),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("loss weight {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term loss values of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub sup1: f64,
    pub sup2: f64,
    pub cps: f64,
    pub ict: f64,
    pub dac_align: f64,
    pub dac_conf: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("sup1", self.sup1),
            ("sup2", self.sup2),
            ("cps", self.cps),
            ("ict", self.ict),
            ("dac_align", self.dac_align),
            ("dac_conf", self.dac_conf),
        ]
    }
}

/// `(sup1 + sup2) + lambda * cps + tau * ict + beta * (align + conf)`.
pub fn total_loss(parts: &LossReport, w: &LossWeights) -> Result<f64> {
    for (name, v) in parts.terms() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("loss term {name}"),
                batch: 0,
            });
        }
    }
    Ok((parts.sup1 + parts.sup2)
        + w.lambda_cps * parts.cps
        + w.tau_ict * parts.ict
        + w.beta_dac * (parts.dac_align + parts.dac_conf))
}

fn check_seg_target(p: &Tensor, y: &IndexMask) -> Result<()> {
    let s = p.shape();
    if s[0] != y.batch() || s[2] != y.height() || s[3] != y.width() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs mask {:?}",
            s,
            y.shape()
        )));
    }
    if let Some(&bad) = y.data().iter().find(|&&v| v as usize >= s[1]) {
        return Err(Error::ClassId {
            id: bad as usize,
            classes: s[1],
        });
    }
    Ok(())
}

fn ce_impl(p: &Tensor, y: &IndexMask, want_grad: bool) -> (f64, Option<Tensor>) {
    let (b, c, hw) = (p.dim(0), p.dim(1), p.dim(2) * p.dim(3));
    let n = (b * hw) as f64;
    let pd = p.data();
    let mut grad = want_grad.then(|| Tensor::zeros(p.shape()));
    let mut sum = 0.0;
    for bi in 0..b {
        let labels = y.image(bi);
        for px in 0..hw {
            let i = (bi * c + labels[px] as usize) * hw + px;
            let v = pd[i].clamp(PROB_FLOOR, 1.0);
            sum -= v.ln();
            if let Some(g) = grad.as_mut() {
                if pd[i] >= PROB_FLOOR && pd[i] <= 1.0 {
                    g.data_mut()[i] = -1.0 / (n * pd[i]);
                }
            }
        }
    }
    (sum / n, grad)
}

/// Mean pixel cross-entropy `-ln p[y]`.
pub fn ce_seg(p: &ProbMap, y: &IndexMask) -> Result<f64> {
    check_seg_target(p.tensor(), y)?;
    Ok(ce_impl(p.tensor(), y, false).0)
}

/// [`ce_seg`] and its gradient with respect to `p`.
pub fn ce_seg_grad(p: &ProbMap, y: &IndexMask) -> Result<(f64, Tensor)> {
    check_seg_target(p.tensor(), y)?;
    let (v, g) = ce_impl(p.tensor(), y, true);
    Ok((v, g.expect("requested")))
}

struct DiceSums {
    inter: Vec<f64>,
    pred: Vec<f64>,
    target: Vec<f64>,
}

fn dice_sums(p: &Tensor, y: &IndexMask) -> DiceSums {
    let (b, c, hw) = (p.dim(0), p.dim(1), p.dim(2) * p.dim(3));
    let pd = p.data();
    let mut s = DiceSums {
        inter: vec![0.0; c],
        pred: vec![0.0; c],
        target: vec![0.0; c],
    };
    for bi in 0..b {
        let labels = y.image(bi);
        for ci in 0..c {
            let row = &pd[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
            s.pred[ci] += row.iter().sum::<f64>();
        }
        for px in 0..hw {
            let k = labels[px] as usize;
            s.target[k] += 1.0;
            s.inter[k] += pd[(bi * c + k) * hw + px];
        }
    }
    s
}

/// Soft Dice loss `1 - dice_c` for each class, sums taken over batch and
/// pixels.
pub fn dice_per_class(p: &ProbMap, y: &IndexMask) -> Result<Vec<f64>> {
    check_seg_target(p.tensor(), y)?;
    let s = dice_sums(p.tensor(), y);
    Ok((0..p.classes())
        .map(|c| 1.0 - (2.0 * s.inter[c] + DICE_EPS) / (s.pred[c] + s.target[c] + DICE_EPS))
        .collect())
}

/// Soft Dice loss averaged over all classes.
pub fn dice_loss(p: &ProbMap, y: &IndexMask) -> Result<f64> {
    let per = dice_per_class(p, y)?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

fn dice_impl(p: &Tensor, y: &IndexMask) -> (f64, Tensor) {
    let (b, c, hw) = (p.dim(0), p.dim(1), p.dim(2) * p.dim(3));
    let s = dice_sums(p, y);
    let cf = c as f64;
    let mut loss = 0.0;
    // d(loss)/dp = -(1/C) * (2 y D - N) / D^2 per class
    let mut on = vec![0.0; c];
    let mut off = vec![0.0; c];
    for ci in 0..c {
        let num = 2.0 * s.inter[ci] + DICE_EPS;
        let den = s.pred[ci] + s.target[ci] + DICE_EPS;
        loss += 1.0 - num / den;
        on[ci] = -(2.0 * den - num) / (den * den) / cf;
        off[ci] = num / (den * den) / cf;
    }
    let mut g = Tensor::zeros(p.shape());
    let gd = g.data_mut();
    for bi in 0..b {
        let labels = y.image(bi);
        for ci in 0..c {
            let base = (bi * c + ci) * hw;
            for px in 0..hw {
                gd[base + px] = if labels[px] as usize == ci { on[ci] } else { off[ci] };
            }
        }
    }
    (loss / cf, g)
}

/// [`dice_loss`] and its gradient with respect to `p`.
pub fn dice_loss_grad(p: &ProbMap, y: &IndexMask) -> Result<(f64, Tensor)> {
    check_seg_target(p.tensor(), y)?;
    Ok(dice_impl(p.tensor(), y))
}

fn check_cls(z: &Tensor, c: &LabelVector) -> Result<()> {
    if z.dim(0) != c.batch() || z.dim(1) != c.labels() {
        return Err(Error::Shape(format!(
            "cls logits {:?} vs labels [{}, {}]",
            z.shape(),
            c.batch(),
            c.labels()
        )));
    }
    Ok(())
}

fn bce_impl(z: &Tensor, c: &LabelVector) -> (f64, Tensor) {
    let n = z.len() as f64;
    let mut g = Tensor::zeros(z.shape());
    let mut sum = 0.0;
    for (i, (&zi, &ci)) in z.data().iter().zip(c.data()).enumerate() {
        let t = ci as f64;
        sum += zi.max(0.0) - zi * t + (-zi.abs()).exp().ln_1p();
        g.data_mut()[i] = (sigmoid(zi) - t) / n;
    }
    (sum / n, g)
}

/// Mean binary cross-entropy on logits, `max(z,0) - z c + ln(1 + e^-|z|)`.
pub fn bce_cls(z: &ClsLogits, c: &LabelVector) -> Result<f64> {
    check_cls(z.tensor(), c)?;
    Ok(bce_impl(z.tensor(), c).0)
}

/// [`bce_cls`] and its gradient with respect to the logits.
pub fn bce_cls_grad(z: &ClsLogits, c: &LabelVector) -> Result<(f64, Tensor)> {
    check_cls(z.tensor(), c)?;
    Ok(bce_impl(z.tensor(), c))
}

/// Gradient of a loss with respect to both heads' logits.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputGrad {
    pub seg: Tensor,
    pub cls: Tensor,
}

impl OutputGrad {
    pub fn zeros_like(out: &DualHeadOutput) -> Self {
        OutputGrad {
            seg: Tensor::zeros(out.seg.tensor().shape()),
            cls: Tensor::zeros(out.cls.tensor().shape()),
        }
    }

    pub fn add_scaled(&mut self, other: &OutputGrad, s: f64) {
        for (a, b) in self.seg.data_mut().iter_mut().zip(other.seg.data()) {
            *a += s * b;
        }
        for (a, b) in self.cls.data_mut().iter_mut().zip(other.cls.data()) {
            *a += s * b;
        }
    }
}

/// CE + Dice + BCE of one network's logits against hard targets, with the
/// gradient at the logits.
fn hard_target_terms(
    seg: &Tensor,
    probs: &Tensor,
    cls: &Tensor,
    y: &IndexMask,
    c: &LabelVector,
) -> Result<(f64, OutputGrad)> {
    check_seg_target(probs, y)?;
    check_cls(cls, c)?;
    debug_assert_eq!(seg.shape(), probs.shape());
    let (ce, dp) = ce_impl(probs, y, true);
    let mut dp = dp.expect("requested");
    let (dice, dd) = dice_impl(probs, y);
    dp.add_assign(&dd);
    let (bce, dz) = bce_impl(cls, c);
    Ok((
        ce + dice + bce,
        OutputGrad {
            seg: softmax_backward(probs, &dp),
            cls: dz,
        },
    ))
}

/// Supervised loss `CE + Dice + BCE` on a labeled batch.
pub fn sup_loss(out: &DualHeadOutput, y: &IndexMask, c: &LabelVector) -> Result<f64> {
    Ok(sup_loss_grad(out, y, c)?.0)
}

/// [`sup_loss`] and its gradient with respect to both heads' logits.
pub fn sup_loss_grad(
    out: &DualHeadOutput,
    y: &IndexMask,
    c: &LabelVector,
) -> Result<(f64, OutputGrad)> {
    let probs = softmax_channels(out.seg.tensor());
    hard_target_terms(out.seg.tensor(), &probs, out.cls.tensor(), y, c)
}

/// Hard pseudo-labels of one network's outputs: per-pixel argmax and
/// thresholded label scores. Plain data, so no gradient reaches the source.
pub fn pseudo_labels(out: &DualHeadOutput) -> (IndexMask, LabelVector) {
    let probs = softmax_channels(out.seg.tensor());
    (
        argmax_channels(&probs),
        binarize_tensor(out.cls.tensor(), CLS_THRESHOLD),
    )
}

/// Cross-pseudo supervision, summed over both directions.
pub fn cps_loss(out1: &DualHeadOutput, out2: &DualHeadOutput) -> Result<f64> {
    Ok(cps_loss_grad(out1, out2)?.0)
}

/// [`cps_loss`] and the gradients reaching each network's own logits. Each
/// network only receives gradient through its role as the supervised
/// student; its pseudo-labels are constants.
pub fn cps_loss_grad(
    out1: &DualHeadOutput,
    out2: &DualHeadOutput,
) -> Result<(f64, OutputGrad, OutputGrad)> {
    if out1.seg.tensor().shape() != out2.seg.tensor().shape()
        || out1.cls.tensor().shape() != out2.cls.tensor().shape()
    {
        return Err(Error::Shape(format!(
            "cps: outputs {:?} vs {:?}",
            out1.seg.tensor().shape(),
            out2.seg.tensor().shape()
        )));
    }
    let p1 = softmax_channels(out1.seg.tensor());
    let p2 = softmax_channels(out2.seg.tensor());
    let y1 = argmax_channels(&p1);
    let y2 = argmax_channels(&p2);
    let c1 = binarize_tensor(out1.cls.tensor(), CLS_THRESHOLD);
    let c2 = binarize_tensor(out2.cls.tensor(), CLS_THRESHOLD);
    let (l1, g1) = hard_target_terms(out1.seg.tensor(), &p1, out1.cls.tensor(), &y2, &c2)?;
    let (l2, g2) = hard_target_terms(out2.seg.tensor(), &p2, out2.cls.tensor(), &y1, &c1)?;
    Ok((l1 + l2, g1, g2))
}

/// One direction of [`cps_loss_grad`]: `student` supervised by the hard
/// labels of `source`.
pub fn cps_direction_grad(
    student: &DualHeadOutput,
    source: &DualHeadOutput,
) -> Result<(f64, OutputGrad)> {
    let (y, c) = pseudo_labels(source);
    let p = softmax_channels(student.seg.tensor());
    hard_target_terms(student.seg.tensor(), &p, student.cls.tensor(), &y, &c)
}

/// Interpolation consistency: mean squared difference between the student's
/// probabilities on the mixed input and the mix of the teacher's
/// probabilities on the two halves.
pub fn ict_loss(
    student_on_mixed: &SegLogits,
    teacher_i: &SegLogits,
    teacher_j: &SegLogits,
    sigma: f64,
) -> Result<f64> {
    Ok(ict_loss_grad(student_on_mixed, teacher_i, teacher_j, sigma)?.0)
}

/// [`ict_loss`] and its gradient with respect to the student logits.
pub fn ict_loss_grad(
    student_on_mixed: &SegLogits,
    teacher_i: &SegLogits,
    teacher_j: &SegLogits,
    sigma: f64,
) -> Result<(f64, Tensor)> {
    let ti = softmax_channels(teacher_i.tensor());
    let tj = softmax_channels(teacher_j.tensor());
    let target = mix_tensors(&ti, &tj, sigma)?;
    if target.shape() != student_on_mixed.tensor().shape() {
        return Err(Error::Shape(format!(
            "ict: student {:?} vs teacher {:?}",
            student_on_mixed.tensor().shape(),
            target.shape()
        )));
    }
    let ps = softmax_channels(student_on_mixed.tensor());
    let n = ps.len() as f64;
    let mut dp = Tensor::zeros(ps.shape());
    let mut sum = 0.0;
    for (i, (&a, &b)) in ps.data().iter().zip(target.data()).enumerate() {
        let d = a - b;
        sum += d * d;
        dp.data_mut()[i] = 2.0 * d / n;
    }
    Ok((sum / n, softmax_backward(&ps, &dp)))
}

/// Gradients of the two agreement terms with respect to both probability
/// maps.
#[derive(Clone, Debug)]
pub struct DacGrad {
    pub align_p: Tensor,
    pub align_q: Tensor,
    pub conf_p: Tensor,
    pub conf_q: Tensor,
}

fn check_pair(p: &ProbMap, q: &ProbMap) -> Result<()> {
    if p.tensor().shape() != q.tensor().shape() {
        return Err(Error::Shape(format!(
            "dac: {:?} vs {:?}",
            p.tensor().shape(),
            q.tensor().shape()
        )));
    }
    Ok(())
}

fn plogp_terms(v: f64) -> (f64, f64) {
    // (ln of floored value, indicator that the floor is inactive)
    if v >= PROB_FLOOR {
        (v.ln(), 1.0)
    } else {
        (PROB_FLOOR.ln(), 0.0)
    }
}

pub(crate) fn dac_impl(p: &Tensor, q: &Tensor, want_grad: bool) -> ((f64, f64), Option<DacGrad>) {
    let (b, c, hw) = (p.dim(0), p.dim(1), p.dim(2) * p.dim(3));
    let n = (b * hw) as f64;
    let (pd, qd) = (p.data(), q.data());
    let mut grads = want_grad.then(|| DacGrad {
        align_p: Tensor::zeros(p.shape()),
        align_q: Tensor::zeros(p.shape()),
        conf_p: Tensor::zeros(p.shape()),
        conf_q: Tensor::zeros(p.shape()),
    });
    let mut align = 0.0;
    let mut conf = 0.0;
    for bi in 0..b {
        for px in 0..hw {
            let mut kl = 0.0;
            let (mut hp, mut hq, mut hm) = (0.0, 0.0, 0.0);
            for ci in 0..c {
                let i = (bi * c + ci) * hw + px;
                let (pv, qv) = (pd[i], qd[i]);
                let mv = 0.5 * (pv + qv);
                let (lp, ip) = plogp_terms(pv);
                let (lq, iq) = plogp_terms(qv);
                let (lm, im) = plogp_terms(mv);
                kl += pv * (lp - lq);
                hp -= pv * lp;
                hq -= qv * lq;
                hm -= mv * lm;
                if let Some(g) = grads.as_mut() {
                    g.align_p.data_mut()[i] = (lp - lq + ip) / n;
                    g.align_q.data_mut()[i] = -pv * iq / qv.max(PROB_FLOOR) / n;
                    let dhm = -0.5 * (lm + im);
                    g.conf_p.data_mut()[i] = (-(lp + ip) - dhm) / n;
                    g.conf_q.data_mut()[i] = (-(lq + iq) - dhm) / n;
                }
            }
            align += kl;
            conf += hp + hq - hm;
        }
    }
    ((align / n, conf / n), grads)
}

/// Dual-agreement terms `(L_align, L_conf)`: mean pixel `KL(p || q)` and
/// mean pixel `H(p) + H(q) - H((p + q) / 2)`, natural log.
pub fn dac_loss(p: &ProbMap, q: &ProbMap) -> Result<(f64, f64)> {
    check_pair(p, q)?;
    Ok(dac_impl(p.tensor(), q.tensor(), false).0)
}

/// [`dac_loss`] and the gradients of both terms with respect to `p` and `q`.
pub fn dac_loss_grad(p: &ProbMap, q: &ProbMap) -> Result<((f64, f64), DacGrad)> {
    check_pair(p, q)?;
    let (v, g) = dac_impl(p.tensor(), q.tensor(), true);
    Ok((v, g.expect("requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::softmax_seg;

    fn probs(shape: &[usize], v: Vec<f64>) -> ProbMap {
        ProbMap::new(Tensor::from_vec(shape, v).unwrap()).unwrap()
    }

    fn uniform(b: usize, c: usize, h: usize, w: usize) -> ProbMap {
        probs(&[b, c, h, w], vec![1.0 / c as f64; b * c * h * w])
    }

    #[test]
    fn ce_closed_forms() {
        let y = IndexMask::new([2, 2, 2], 4, vec![0, 1, 2, 3, 3, 2, 1, 0]).unwrap();
        assert!((ce_seg(&uniform(2, 4, 2, 2), &y).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(ce_seg(&y.encode().as_probs(), &y).unwrap() <= 1e-7);

        let y = IndexMask::new([1, 1, 2], 2, vec![0, 1]).unwrap();
        let p = probs(&[1, 2, 1, 2], vec![0.75, 0.25, 0.25, 0.75]);
        assert!((ce_seg(&p, &y).unwrap() - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn ce_rejects_class_beyond_prob_channels() {
        let y = IndexMask::new([1, 1, 1], 5, vec![4]).unwrap();
        assert!(matches!(
            ce_seg(&uniform(1, 4, 1, 1), &y),
            Err(Error::ClassId { id: 4, classes: 4 })
        ));
    }

    #[test]
    fn dice_cases() {
        let y = IndexMask::new([1, 2, 2], 3, vec![0, 1, 2, 1]).unwrap();
        assert!(dice_loss(&y.encode().as_probs(), &y).unwrap() <= 1e-5);

        // 2 predicted pixels vs 1 true pixel for class 1
        let y = IndexMask::new([1, 1, 4], 2, vec![1, 0, 0, 0]).unwrap();
        let pred = IndexMask::new([1, 1, 4], 2, vec![1, 1, 0, 0]).unwrap();
        let per = dice_per_class(&pred.encode().as_probs(), &y).unwrap();
        assert!((per[1] - 1.0 / 3.0).abs() < 1e-4);

        // disjoint: every class either empty in one map or non-overlapping
        let y = IndexMask::new([1, 1, 4], 2, vec![1, 1, 0, 0]).unwrap();
        let pred = IndexMask::new([1, 1, 4], 2, vec![0, 0, 1, 1]).unwrap();
        assert!(dice_loss(&pred.encode().as_probs(), &y).unwrap() >= 1.0 - 1e-3);
    }

    #[test]
    fn bce_cases() {
        let c = LabelVector::new(2, 7, (0..14).map(|i| (i % 2) as u8).collect()).unwrap();
        let z = ClsLogits::new(Tensor::zeros(&[2, 7])).unwrap();
        assert!((bce_cls(&z, &c).unwrap() - 2f64.ln()).abs() < 1e-12);

        let zv: Vec<f64> = c.data().iter().map(|&v| if v == 1 { 30.0 } else { -30.0 }).collect();
        let z = ClsLogits::new(Tensor::from_vec(&[2, 7], zv).unwrap()).unwrap();
        assert!(bce_cls(&z, &c).unwrap() <= 1e-9);

        let zeros = LabelVector::new(2, 7, vec![0; 14]).unwrap();
        let z = ClsLogits::new(Tensor::full(&[2, 7], 30.0)).unwrap();
        let want = 30.0 + (-30f64).exp().ln_1p();
        assert!((bce_cls(&z, &zeros).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn dac_cases() {
        let u = uniform(1, 4, 2, 2);
        let (a, c) = dac_loss(&u, &u).unwrap();
        assert_eq!(a, 0.0);
        assert!((c - 4f64.ln()).abs() < 1e-12);

        let p = probs(&[1, 2, 1, 1], vec![0.75, 0.25]);
        let q = probs(&[1, 2, 1, 1], vec![0.5, 0.5]);
        let (a, _) = dac_loss(&p, &q).unwrap();
        assert!((a - 0.130812).abs() < 1e-6);

        let p = probs(&[1, 2, 1, 1], vec![1.0, 0.0]);
        let q = probs(&[1, 2, 1, 1], vec![0.0, 1.0]);
        let (_, c) = dac_loss(&p, &q).unwrap();
        assert!((c + 2f64.ln()).abs() < 1e-12);
        let (a, c) = dac_loss(&p, &p).unwrap();
        assert_eq!((a, c), (0.0, 0.0));
    }

    #[test]
    fn ict_cases() {
        // student prob [1,0] everywhere, teachers mix to [0.5,0.5]
        let s = SegLogits::new(Tensor::from_vec(&[1, 2, 1, 2], vec![1000.0, 1000.0, 0.0, 0.0]).unwrap()).unwrap();
        let ti = SegLogits::new(Tensor::from_vec(&[1, 2, 1, 2], vec![1000.0, 1000.0, 0.0, 0.0]).unwrap()).unwrap();
        let tj = SegLogits::new(Tensor::from_vec(&[1, 2, 1, 2], vec![0.0, 0.0, 1000.0, 1000.0]).unwrap()).unwrap();
        assert!((ict_loss(&s, &ti, &tj, 0.5).unwrap() - 0.25).abs() < 1e-12);
        assert!(ict_loss(&s, &s, &s, 0.5).unwrap() < 1e-7);
        // sigma = 1 reduces to teacher-student MSE on the first half
        let v = ict_loss(&s, &tj, &ti, 1.0).unwrap();
        let ps = softmax_seg(&s);
        let pt = softmax_seg(&tj);
        let mse: f64 = ps.tensor().data().iter().zip(pt.tensor().data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 4.0;
        assert!((v - mse).abs() < 1e-15);
    }

    #[test]
    fn total_loss_arithmetic() {
        let ones = LossReport {
            sup1: 1.0,
            sup2: 1.0,
            cps: 1.0,
            ict: 1.0,
            dac_align: 1.0,
            dac_conf: 1.0,
            total: 0.0,
        };
        assert_eq!(total_loss(&ones, &LossWeights::default()).unwrap(), 18.0);
        assert_eq!(total_loss(&ones, &LossWeights::zero()).unwrap(), 2.0);
        let mut bumped = ones;
        bumped.cps += 0.25;
        let d = total_loss(&bumped, &LossWeights::default()).unwrap() - 18.0;
        assert!((d - 1.25).abs() < 1e-12);
        bumped.ict = f64::INFINITY;
        let err = total_loss(&bumped, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("ict"));
    }
}
