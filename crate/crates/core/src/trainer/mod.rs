//! Joint optimization of the two networks, validation, checkpoints and
//! inference.

mod checkpoint;
mod fit;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

pub use checkpoint::{Checkpoint, EpochRecord, CHECKPOINT_MAGIC, METRICS_HEADER, STEPS_HEADER};
pub use fit::{
    fit, load_samples, predict, predict_one, validate, FitOptions, FitOutcome, BEST_CHECKPOINT, CONFIG_FILE,
    LAST_CHECKPOINT, METRICS_FILE, STEPS_FILE, WeightImport,
};

use crate::config::{LrSchedule, TrainConfig};
use crate::data::mix_seed;
use crate::error::{Error, Result};
use crate::losses::{
    cps_loss_grad, dac_loss_grad, ict_loss_grad, sup_loss_grad, total_loss, LossReport, LossWeights, OutputGrad,
};
use crate::nn::{ForwardPass, Grads, Mode, Network};
use crate::ops::{mix, softmax_backward, softmax_seg};
use crate::optim::{AdamW, GroupHyper};
use crate::teacher::EmaState;
use crate::tensor::Tensor;
use crate::types::{ImageBatch, IndexMask, LabelVector, SegLogits};

const TAG_INIT_F1: u64 = 0x6631;
const TAG_INIT_F2: u64 = 0x6632;
const TAG_STEP: u64 = 0x7374_6570;

/// Images with their ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub images: ImageBatch,
    pub masks: IndexMask,
    pub labels: LabelVector,
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// The network used at inference.
    pub f1: Network,
    /// The convolutional partner, whose average is the teacher.
    pub f2: Network,
    pub ema: EmaState,
    pub opt1: AdamW,
    pub opt2: AdamW,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimization steps.
    pub global_step: u64,
}

pub(crate) fn optimizers(cfg: &TrainConfig, f1: &Network, f2: &Network) -> Result<(AdamW, AdamW)> {
    Ok((
        AdamW::new(
            f1.params(),
            GroupHyper::new(cfg.lr_backbone_f1, cfg.wd_f1),
            GroupHyper::new(cfg.lr_heads_f1, cfg.wd_f1),
        )?,
        AdamW::new(
            f2.params(),
            GroupHyper::new(cfg.lr_f2, cfg.wd_f2),
            GroupHyper::new(cfg.lr_f2, cfg.wd_f2),
        )?,
    ))
}

impl TrainState {
    /// Fresh networks initialized from the configured seed.
    pub fn new(cfg: &TrainConfig) -> Result<TrainState> {
        cfg.validate()?;
        let f1 = Network::build(cfg.f1.clone(), mix_seed(&[cfg.seed, TAG_INIT_F1]))?;
        let f2 = Network::build(cfg.f2.clone(), mix_seed(&[cfg.seed, TAG_INIT_F2]))?;
        let ema = EmaState::init(f2.params(), cfg.ema_decay)?;
        let (opt1, opt2) = optimizers(cfg, &f1, &f2)?;
        Ok(TrainState {
            f1,
            f2,
            ema,
            opt1,
            opt2,
            epoch: 0,
            global_step: 0,
        })
    }
}

/// Per-step quantities derived from the schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepControl {
    /// Multiplier on every learning rate.
    pub lr_scale: f64,
    /// Multiplier on the three semi-supervised weights.
    pub weight_scale: f64,
    /// Mixing ratio of the interpolation-consistency term.
    pub sigma: f64,
    /// Seed for dropout in this step's forward passes.
    pub seed: u64,
}

impl StepControl {
    /// The controls of global step `global_step` in a run of
    /// `steps_per_epoch`-step epochs.
    pub fn for_step(cfg: &TrainConfig, global_step: u64, steps_per_epoch: usize) -> StepControl {
        let seed = mix_seed(&[cfg.seed, TAG_STEP, global_step]);
        let total = (cfg.epochs * steps_per_epoch).max(1) as f64;
        let lr_scale = match cfg.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * global_step as f64 / total).cos()),
        };
        let weight_scale = if cfg.rampup_epochs == 0 {
            1.0
        } else {
            let t = (global_step as f64 / (cfg.rampup_epochs * steps_per_epoch.max(1)) as f64).min(1.0);
            (-5.0 * (1.0 - t) * (1.0 - t)).exp()
        };
        let sigma = if cfg.mix_beta_alpha > 0.0 {
            let beta = Beta::new(cfg.mix_beta_alpha, cfg.mix_beta_alpha).expect("alpha validated positive");
            beta.sample(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 6])))
        } else {
            cfg.mix_sigma
        };
        StepControl {
            lr_scale,
            weight_scale,
            sigma,
            seed,
        }
    }
}

fn scaled_weights(w: &LossWeights, s: f64) -> LossWeights {
    LossWeights {
        lambda_cps: w.lambda_cps * s,
        tau_ict: w.tau_ict * s,
        beta_dac: w.beta_dac * s,
    }
}

fn clip(g: &mut Grads, max_norm: f64) {
    if max_norm > 0.0 {
        let n = g.norm();
        if n > max_norm {
            g.scale(max_norm / n);
        }
    }
}

fn scaled(t: &Tensor, s: f64) -> Tensor {
    let mut t = t.clone();
    t.scale(s);
    t
}

/// One optimization step of both networks on the full objective.
///
/// Order: supervised passes of both networks on the labeled batch; both
/// networks on the unlabeled batch for cross-pseudo supervision and the
/// agreement term; teacher on the two unlabeled halves and the student
/// partner on their mix for interpolation consistency; then one optimizer
/// step per network and the teacher update.
///
/// Terms whose effective weight is zero are neither evaluated nor allowed
/// to touch normalization statistics; they are reported as 0. If any term
/// or gradient is non-finite the step is abandoned with `state` untouched.
///
/// Forward pass `k` runs in `Mode::Train { seed: mix_seed(&[ctl.seed, k]) }`
/// with k = 1 (f1, labeled), 2 (f2, labeled), 3 (f1, unlabeled),
/// 4 (f2, unlabeled), 5 (f2, mixed).
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    lab: &LabeledBatch,
    unl: &ImageBatch,
    ctl: &StepControl,
) -> Result<LossReport> {
    let b = unl.batch();
    if b < 2 || b % 2 != 0 {
        return Err(Error::Invalid(format!("unlabeled batch of {b} cannot be split into mixup halves")));
    }
    let w = scaled_weights(&cfg.weights, ctl.weight_scale);
    let mode = |k: u64| Mode::Train {
        seed: mix_seed(&[ctl.seed, k]),
    };
    let (f1, f2) = (&state.f1, &state.f2);
    let mut g1 = Grads::zeros_like(f1.params());
    let mut g2 = Grads::zeros_like(f2.params());
    let mut used: (Vec<ForwardPass>, Vec<ForwardPass>) = (Vec::new(), Vec::new());
    let mut rep = LossReport::default();

    let p = f1.forward_pass(&lab.images, mode(1))?;
    let (sup1, d) = sup_loss_grad(&p.output, &lab.masks, &lab.labels)?;
    f1.backward(&p, &d, &mut g1);
    used.0.push(p);
    let p = f2.forward_pass(&lab.images, mode(2))?;
    let (sup2, d) = sup_loss_grad(&p.output, &lab.masks, &lab.labels)?;
    f2.backward(&p, &d, &mut g2);
    used.1.push(p);
    rep.sup1 = sup1;
    rep.sup2 = sup2;

    if w.lambda_cps > 0.0 || w.beta_dac > 0.0 {
        let p1 = f1.forward_pass(unl, mode(3))?;
        let p2 = f2.forward_pass(unl, mode(4))?;
        let mut d1 = OutputGrad::zeros_like(&p1.output);
        let mut d2 = OutputGrad::zeros_like(&p2.output);
        if w.lambda_cps > 0.0 {
            let (v, c1, c2) = cps_loss_grad(&p1.output, &p2.output)?;
            rep.cps = v;
            d1.add_scaled(&c1, w.lambda_cps);
            d2.add_scaled(&c2, w.lambda_cps);
        }
        if w.beta_dac > 0.0 {
            let pp = softmax_seg(&p1.output.seg);
            let qq = softmax_seg(&p2.output.seg);
            let ((align, conf), g) = dac_loss_grad(&pp, &qq)?;
            rep.dac_align = align;
            rep.dac_conf = cfg.conf_sign * conf;
            let s = cfg.conf_sign;
            let mut dp = g.align_p.clone();
            dp.add_assign(&scaled(&g.conf_p, s));
            let mut dq = g.align_q.clone();
            dq.add_assign(&scaled(&g.conf_q, s));
            let zp = softmax_backward(pp.tensor(), &dp);
            let zq = softmax_backward(qq.tensor(), &dq);
            d1.seg.add_assign(&scaled(&zp, w.beta_dac));
            d2.seg.add_assign(&scaled(&zq, w.beta_dac));
        }
        f1.backward(&p1, &d1, &mut g1);
        f2.backward(&p2, &d2, &mut g2);
        used.0.push(p1);
        used.1.push(p2);
    }

    if w.tau_ict > 0.0 {
        let half = b / 2;
        let (xi, xj) = (unl.slice(0, half), unl.slice(half, b));
        let teacher = state.ema.predict(f2, unl)?;
        let t = teacher.seg.tensor();
        let ti = SegLogits::new(t.batch_slice(0, half))?;
        let tj = SegLogits::new(t.batch_slice(half, b))?;
        let xm = mix(&xi, &xj, ctl.sigma)?;
        let pm = f2.forward_pass(&xm, mode(5))?;
        let (v, dz) = ict_loss_grad(&pm.output.seg, &ti, &tj, ctl.sigma)?;
        rep.ict = v;
        let d = OutputGrad {
            seg: scaled(&dz, w.tau_ict),
            cls: Tensor::zeros(pm.output.cls.tensor().shape()),
        };
        f2.backward(&pm, &d, &mut g2);
        used.1.push(pm);
    }

    rep.total = total_loss(&rep, &w)?;
    for (g, name) in [(&g1, "f1"), (&g2, "f2")] {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                what: format!("gradient of {name}"),
                batch: 0,
            });
        }
    }
    clip(&mut g1, cfg.grad_clip);
    clip(&mut g2, cfg.grad_clip);

    for p in &used.0 {
        state.f1.apply_stats(p);
    }
    for p in &used.1 {
        state.f2.apply_stats(p);
    }
    state.opt1.step(state.f1.params_mut(), &g1, ctl.lr_scale);
    state.opt2.step(state.f2.params_mut(), &g2, ctl.lr_scale);
    state.ema.update(state.f2.params())?;
    state.global_step += 1;
    Ok(rep)
}
