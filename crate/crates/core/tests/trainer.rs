use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fmdacl::config::{Selection, TrainConfig};
use fmdacl::data::{gen_synthetic, mix_seed, Dataset, GenConfig, Split};
use fmdacl::losses::{sup_loss_grad, LossWeights};
use fmdacl::nn::{BackboneKind, BackboneSpec, Grads, Kind, Mode, ParamStore};
use fmdacl::tensor::Tensor;
use fmdacl::trainer::{
    fit, train_step, Checkpoint, FitOptions, LabeledBatch, StepControl, TrainState, BEST_CHECKPOINT, METRICS_FILE,
    STEPS_FILE,
};
use fmdacl::types::{ImageBatch, IndexMask, LabelVector};

fn tiny_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.epochs = 2;
    cfg.seed = 3;
    cfg.augment.target_size = (16, 16);
    cfg.f1 = BackboneSpec::new(BackboneKind::PatchAttention, 8, 2);
    cfg.f2 = BackboneSpec::new(BackboneKind::ConvUnet, 8, 2);
    cfg
}

fn batches(seed: u64, cfg: &TrainConfig) -> (LabeledBatch, ImageBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = cfg.augment.target_size;
    let img = |rng: &mut ChaCha8Rng, b: usize| {
        ImageBatch::new(Tensor::from_vec(&[b, 1, h, w], (0..b * h * w).map(|_| rng.random()).collect()).unwrap())
            .unwrap()
    };
    let lab = LabeledBatch {
        images: img(&mut rng, 1),
        masks: IndexMask::new([1, h, w], 15, (0..h * w).map(|_| rng.random_range(0..15)).collect()).unwrap(),
        labels: LabelVector::new(1, 7, (0..7).map(|_| rng.random_range(0..2)).collect()).unwrap(),
    };
    (lab, img(&mut rng, 4))
}

fn learnables(s: &ParamStore) -> Vec<(String, Tensor)> {
    s.iter()
        .filter(|p| p.kind == Kind::Learnable)
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Plain AdamW with decoupled weight decay.
struct RefAdam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl RefAdam {
    fn new(s: &ParamStore) -> Self {
        RefAdam {
            m: s.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            v: s.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, s: &mut ParamStore, g: &Grads, lr_of: impl Fn(bool) -> (f64, f64)) {
        self.t += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        for (i, (p, gt)) in s.iter_mut().zip(g.iter()).enumerate() {
            if p.kind != Kind::Learnable {
                continue;
            }
            let (lr, wd) = lr_of(p.group.is_head());
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = gt.data()[j];
                self.m[i][j] = b1 * self.m[i][j] + (1.0 - b1) * gj;
                self.v[i][j] = b2 * self.v[i][j] + (1.0 - b2) * gj * gj;
                let mh = self.m[i][j] / (1.0 - b1.powi(self.t));
                let vh = self.v[i][j] / (1.0 - b2.powi(self.t));
                *w -= lr * wd * *w + lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

fn assert_close_stores(a: &ParamStore, b: &ParamStore, tol: f64) {
    for (p, q) in a.iter().zip(b.iter()) {
        assert_eq!(p.name, q.name);
        for (x, y) in p.value.data().iter().zip(q.value.data()) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{}: {x} vs {y}", p.name);
        }
    }
}

#[test]
fn frozen_partner_reduces_to_supervised_baseline() {
    let mut cfg = tiny_config();
    cfg.weights = LossWeights::zero();
    cfg.lr_f2 = 0.0;
    let mut state = TrainState::new(&cfg).unwrap();
    let f2_before = learnables(state.f2.params());
    let ema_before = state.ema.shadow().clone();

    let mut f1 = state.f1.clone();
    let mut opt = RefAdam::new(f1.params());
    for step in 0..5u64 {
        let (lab, unl) = batches(step, &cfg);
        let ctl = StepControl::for_step(&cfg, step, 10);
        let rep = train_step(&mut state, &cfg, &lab, &unl, &ctl).unwrap();
        assert_eq!((rep.cps, rep.ict, rep.dac_align, rep.dac_conf), (0.0, 0.0, 0.0, 0.0));

        let pass = f1
            .forward_pass(&lab.images, Mode::Train { seed: mix_seed(&[ctl.seed, 1]) })
            .unwrap();
        let (loss, d) = sup_loss_grad(&pass.output, &lab.masks, &lab.labels).unwrap();
        assert!((loss - rep.sup1).abs() <= 1e-12 * loss, "step {step}: {loss} vs {}", rep.sup1);
        assert_eq!(rep.total, rep.sup1 + rep.sup2);
        let mut g = Grads::zeros_like(f1.params());
        f1.backward(&pass, &d, &mut g);
        f1.apply_stats(&pass);
        opt.step(f1.params_mut(), &g, |head| {
            (if head { cfg.lr_heads_f1 } else { cfg.lr_backbone_f1 }, cfg.wd_f1)
        });
        assert_close_stores(state.f1.params(), f1.params(), 1e-12);
    }
    for ((i, m), v) in state.opt1.first_moments().iter().enumerate().zip(state.opt1.second_moments()) {
        for (j, (&a, &b)) in m.data().iter().zip(v.data()).enumerate() {
            assert!((a - opt.m[i][j]).abs() <= 1e-12 * (1.0 + a.abs()));
            assert!((b - opt.v[i][j]).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
    assert_eq!(learnables(state.f2.params()), f2_before, "frozen partner moved");
    assert_eq!(state.opt1.steps(), 5);
    assert_eq!(state.ema.step(), 5);
    // the teacher follows a frozen student, so its weights stay put
    for ((_, a), (_, b)) in learnables(state.ema.shadow()).iter().zip(learnables(&ema_before).iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-14 * (1.0 + y.abs()));
        }
    }
}

#[test]
fn full_objective_steps_are_deterministic() {
    let cfg = tiny_config();
    let run = || {
        let mut s = TrainState::new(&cfg).unwrap();
        let mut reps = Vec::new();
        for step in 0..10u64 {
            let (lab, unl) = batches(100 + step, &cfg);
            let ctl = StepControl::for_step(&cfg, step, 10);
            reps.push(train_step(&mut s, &cfg, &lab, &unl, &ctl).unwrap());
        }
        (reps, s)
    };
    let (ra, sa) = run();
    let (rb, sb) = run();
    assert_eq!(ra, rb);
    assert_eq!(sa.f1.params(), sb.f1.params());
    assert_eq!(sa.f2.params(), sb.f2.params());
    assert_eq!(sa.ema, sb.ema);
    assert_eq!(sa.opt1, sb.opt1);
    assert!(ra.iter().all(|r| r.cps > 0.0 && r.ict > 0.0 && r.dac_align >= 0.0));
    assert_ne!(learnables(sa.f2.params()), learnables(TrainState::new(&cfg).unwrap().f2.params()));
}

#[test]
fn non_finite_input_leaves_state_untouched() {
    let cfg = tiny_config();
    let mut s = TrainState::new(&cfg).unwrap();
    let (lab, unl) = batches(1, &cfg);
    let first = s.f1.params_mut().iter_mut().find(|p| p.kind == Kind::Learnable).unwrap();
    first.value.fill(f64::MAX);
    let before = s.clone();
    let ctl = StepControl::for_step(&cfg, 0, 10);
    assert!(train_step(&mut s, &cfg, &lab, &unl, &ctl).is_err());
    assert_eq!(s.f1.params(), before.f1.params());
    assert_eq!(s.f2.params(), before.f2.params());
    assert_eq!(s.opt2, before.opt2);
    assert_eq!(s.global_step, 0);
}

#[test]
fn odd_unlabeled_batch_is_rejected() {
    let cfg = tiny_config();
    let mut s = TrainState::new(&cfg).unwrap();
    let (lab, unl) = batches(1, &cfg);
    let ctl = StepControl::for_step(&cfg, 0, 10);
    assert!(train_step(&mut s, &cfg, &lab, &unl.slice(0, 3), &ctl).is_err());
}

#[test]
fn checkpoint_round_trip_continues_identically() {
    let cfg = tiny_config();
    let mut s = TrainState::new(&cfg).unwrap();
    for step in 0..3u64 {
        let (lab, unl) = batches(step, &cfg);
        train_step(&mut s, &cfg, &lab, &unl, &StepControl::for_step(&cfg, step, 10)).unwrap();
    }
    s.epoch = 1;
    let ck = Checkpoint {
        config: cfg.clone(),
        state: s.clone(),
        history: Vec::new(),
        best: None,
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert_eq!(back.config, cfg);
    assert_eq!(back.state.global_step, 3);
    assert_eq!(back.state.epoch, 1);
    let mut r = back.state;
    assert_eq!(r.f1.params(), s.f1.params());
    assert_eq!(r.ema, s.ema);
    assert_eq!(r.opt1, s.opt1);
    assert_eq!(r.opt2, s.opt2);

    let (lab, unl) = batches(3, &cfg);
    let ctl = StepControl::for_step(&cfg, 3, 10);
    let a = train_step(&mut s, &cfg, &lab, &unl, &ctl).unwrap();
    let b = train_step(&mut r, &cfg, &lab, &unl, &ctl).unwrap();
    assert_eq!(a, b);
    assert_eq!(r.f2.params(), s.f2.params());
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let ck = Checkpoint {
        config: tiny_config(),
        state: TrainState::new(&tiny_config()).unwrap(),
        history: Vec::new(),
        best: None,
    };
    let bytes = ck.to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 10]).is_err());
    assert!(Checkpoint::from_bytes(b"not a checkpoint").is_err());
}

fn tiny_data(root: &Path, n: usize) -> std::path::PathBuf {
    let data = root.join("data");
    gen_synthetic(&GenConfig::new(n, 16, 4), &data).unwrap();
    data
}

#[test]
fn one_epoch_over_eight_unlabeled_images_takes_two_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 11);
    let ds = Dataset::open(&data).unwrap();
    assert_eq!(ds.count(Split::Unlabeled), 8);
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    let out = tmp.path().join("run");
    let o = fit(&cfg, &data, &out, &FitOptions::default()).unwrap();
    assert_eq!(o.steps_run, 2);
    assert_eq!(o.history.len(), 1);
    let steps = fs::read_to_string(out.join(STEPS_FILE)).unwrap();
    assert_eq!(steps.lines().count(), 3);
}

#[test]
fn best_checkpoint_has_the_highest_validation_score() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tiny_data(tmp.path(), 16);
    let mut cfg = tiny_config();
    cfg.epochs = 3;
    cfg.select_by = Selection::Score;
    let out = tmp.path().join("run");
    let o = fit(&cfg, &data, &out, &FitOptions::default()).unwrap();
    let scores: Vec<f64> = o.history.iter().map(|r| r.val_score).collect();
    let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(o.best_value, top);
    assert_eq!(o.best_epoch, 1 + scores.iter().position(|&s| s == top).unwrap());
    let best = Checkpoint::load(&out.join(BEST_CHECKPOINT)).unwrap();
    assert_eq!(best.state.epoch, o.best_epoch);
    assert_eq!(best.metrics().unwrap().val_score, top);
    let metrics = fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.lines().count(), 4);

    // only annotated records ever have their masks opened
    let ds = Dataset::open(&data).unwrap();
    let unlabeled: HashSet<String> = ds.split(Split::Unlabeled).iter().map(|r| r.id.clone()).collect();
    assert!(!o.masks_read.is_empty());
    assert!(o.masks_read.iter().all(|id| !unlabeled.contains(id)));
}

#[test]
fn dataset_without_validation_records_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let mut g = GenConfig::new(10, 16, 0);
    g.val_frac = 0.0;
    gen_synthetic(&g, &data).unwrap();
    let mut cfg = tiny_config();
    cfg.epochs = 1;
    assert!(fit(&cfg, &data, &tmp.path().join("run"), &FitOptions::default()).is_err());
}
