//! Epoch loop, validation, best-checkpoint selection and inference.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{Checkpoint, EpochRecord, METRICS_HEADER, STEPS_HEADER};
use super::{train_step, LabeledBatch, StepControl, TrainState};
use crate::archive::{import_weights, parse_name_map, TensorArchive};
use crate::config::{Selection, TrainConfig};
use crate::data::{augment, make_batches, resize_bilinear, resize_nearest, BatchPlan, Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::nn::{Mode, Network};
use crate::ops::{argmax_mask, binarize_cls, softmax_seg, CLS_THRESHOLD};
use crate::teacher::EmaState;
use crate::tensor::Tensor;
use crate::types::{ImageBatch, IndexMask, LabelVector};

pub const CONFIG_FILE: &str = "config.resolved.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// External weights to copy into a freshly built network.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightImport {
    /// Tensor archive holding the external parameters.
    pub archive: PathBuf,
    /// Name map, one `external_name internal_path` pair per line.
    pub name_map: PathBuf,
}

impl WeightImport {
    /// Applies the import to `store`, returning the number of tensors copied.
    pub fn apply(&self, store: &mut crate::nn::ParamStore) -> Result<usize> {
        let a = TensorArchive::load(&self.archive)?;
        let text = fs::read_to_string(&self.name_map).map_err(|e| Error::io(&self.name_map, e))?;
        import_weights(store, &a, &parse_name_map(&text)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FitOptions {
    /// Continue from this checkpoint instead of starting fresh; its stored
    /// configuration is used.
    pub resume: Option<PathBuf>,
    /// Initial weights for the first network; ignored when resuming.
    pub init_f1: Option<WeightImport>,
    /// Initial weights for the second network (and its teacher); ignored
    /// when resuming.
    pub init_f2: Option<WeightImport>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_value: f64,
    pub best_checkpoint: PathBuf,
    /// Optimization steps executed by this call (failed steps excluded).
    pub steps_run: u64,
    pub steps_failed: u64,
    /// Ids whose ground-truth masks were read, in order.
    pub masks_read: Vec<String>,
}

/// Decodes every record of `split`.
pub fn load_samples(ds: &Dataset, split: Split, c_seg: usize) -> Result<Vec<Sample>> {
    ds.load_split(split, c_seg)
}

fn image_tensor(images: Vec<Vec<f64>>, h: usize, w: usize) -> Result<ImageBatch> {
    let b = images.len();
    let data: Vec<f64> = images.into_iter().flatten().collect();
    ImageBatch::new(Tensor::from_vec(&[b, 1, h, w], data)?)
}

fn assemble(
    cfg: &TrainConfig,
    plan: &BatchPlan,
    sb: &crate::data::StepBatch,
    labeled: &[Sample],
    unlabeled: &[Sample],
) -> Result<(LabeledBatch, ImageBatch)> {
    let (th, tw) = cfg.augment.target_size;
    let mut imgs = Vec::new();
    let mut masks = Vec::new();
    let mut labels = Vec::new();
    for (slot, &i) in sb.labeled.iter().enumerate() {
        let s = &labeled[i];
        let mut rng = ChaCha8Rng::seed_from_u64(plan.sample_seed(sb.global_step, true, slot));
        let mask = s.mask.as_deref().expect("labeled samples carry masks");
        let (img, m) = augment(&s.image, Some(mask), s.height, s.width, &cfg.augment, &mut rng);
        imgs.push(img);
        masks.extend(m.expect("mask augmented alongside"));
        labels.push(s.labels.clone().expect("labeled samples carry labels"));
    }
    let lab = LabeledBatch {
        images: image_tensor(imgs, th, tw)?,
        masks: IndexMask::new([sb.labeled.len(), th, tw], cfg.f1.c_seg, masks)?,
        labels: LabelVector::concat(&labels.iter().collect::<Vec<_>>())?,
    };
    let mut uimgs = Vec::new();
    for (slot, &i) in sb.unlabeled.iter().enumerate() {
        let s = &unlabeled[i];
        let mut rng = ChaCha8Rng::seed_from_u64(plan.sample_seed(sb.global_step, false, slot));
        uimgs.push(augment(&s.image, None, s.height, s.width, &cfg.augment, &mut rng).0);
    }
    Ok((lab, image_tensor(uimgs, th, tw)?))
}

/// Inference with one network on one image: resize to `target`, evaluation
/// forward, per-pixel argmax and label threshold, mask resized back to the
/// image's own size.
pub fn predict_one(
    net: &Network,
    image: &[f64],
    h: usize,
    w: usize,
    target: (usize, usize),
) -> Result<(Vec<u8>, Vec<u8>)> {
    let (th, tw) = target;
    if (h, w) != target {
        log::debug!("resizing {h}x{w} input to {th}x{tw}");
    }
    let x = image_tensor(vec![resize_bilinear(image, h, w, th, tw)], th, tw)?;
    let out = net.forward(&x, Mode::Eval)?;
    let mask = argmax_mask(&softmax_seg(&out.seg));
    let labels = binarize_cls(&out.cls, CLS_THRESHOLD)?;
    Ok((resize_nearest(mask.data(), th, tw, h, w), labels.data().to_vec()))
}

/// Inference with the first network of a checkpoint only; the partner
/// network and the teacher are never consulted.
pub fn predict(ckpt: &Checkpoint, images: &[(usize, usize, Vec<f64>)]) -> Result<Vec<(Vec<u8>, Vec<u8>)>> {
    images
        .iter()
        .map(|(h, w, img)| predict_one(&ckpt.state.f1, img, *h, *w, ckpt.config.augment.target_size))
        .collect()
}

/// Validation metrics of `net` on annotated samples, at each sample's own
/// resolution.
pub fn validate(net: &Network, samples: &[Sample], cfg: &TrainConfig) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    let mut acc = MetricsAccumulator::new(cfg.f1.c_seg, cfg.nsd_tolerance, cfg.empty_policy)?;
    for s in samples {
        let gt = s
            .mask
            .as_deref()
            .ok_or_else(|| Error::Dataset(format!("validation record {} has no mask", s.id)))?;
        let gl = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("validation record {} has no labels", s.id)))?;
        let (pm, pl) = predict_one(net, &s.image, s.height, s.width, cfg.augment.target_size)?;
        acc.add(&s.id, &pm, gt, s.height, s.width, &pl, gl.data())?;
    }
    acc.finish(0.0)
}

fn selection_value(cfg: &TrainConfig, r: &EpochRecord) -> f64 {
    match cfg.select_by {
        Selection::Score => r.val_score,
        Selection::Dsc => r.val_dsc,
    }
}

fn mean_report(sum: &LossReport, n: u64) -> LossReport {
    let d = n.max(1) as f64;
    LossReport {
        sup1: sum.sup1 / d,
        sup2: sum.sup2 / d,
        cps: sum.cps / d,
        ict: sum.ict / d,
        dac_align: sum.dac_align / d,
        dac_conf: sum.dac_conf / d,
        total: sum.total / d,
    }
}

fn add_report(a: &mut LossReport, b: &LossReport) {
    a.sup1 += b.sup1;
    a.sup2 += b.sup2;
    a.cps += b.cps;
    a.ict += b.ict;
    a.dac_align += b.dac_align;
    a.dac_conf += b.dac_conf;
    a.total += b.total;
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains on the dataset at `data_root`, writing the resolved configuration,
/// `metrics.csv`, `steps.csv` and checkpoints into `out_dir`.
///
/// After every epoch the first network is validated; the checkpoint with
/// the highest selection value is kept as `best.ckpt` (ties keep the earlier
/// epoch). A step whose loss turns non-finite is logged and skipped.
pub fn fit(cfg: &TrainConfig, data_root: &Path, out_dir: &Path, opts: &FitOptions) -> Result<FitOutcome> {
    let (cfg, mut state, mut history, mut best) = match &opts.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            log::info!("resuming from {} after epoch {}", p.display(), ck.state.epoch);
            (ck.config, ck.state, ck.history, ck.best)
        }
        None => {
            let mut state = TrainState::new(cfg)?;
            if let Some(w) = &opts.init_f1 {
                let n = w.apply(state.f1.params_mut())?;
                log::info!("imported {n} tensors into f1 from {}", w.archive.display());
            }
            if let Some(w) = &opts.init_f2 {
                let n = w.apply(state.f2.params_mut())?;
                log::info!("imported {n} tensors into f2 from {}", w.archive.display());
                state.ema = EmaState::init(state.f2.params(), cfg.ema_decay)?;
            }
            (cfg.clone(), state, Vec::new(), None)
        }
    };
    if opts.resume.is_some() && (opts.init_f1.is_some() || opts.init_f2.is_some()) {
        log::warn!("weight imports are ignored when resuming");
    }
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let resolved = format!(
        "{}data.root={}\noutput.dir={}\n",
        cfg.to_text(),
        data_root.display(),
        out_dir.display()
    );
    write_text(&out_dir.join(CONFIG_FILE), &resolved)?;

    let ds = Dataset::open(data_root)?;
    let plan = make_batches(ds.records(), cfg.batch_labeled, cfg.batch_unlabeled, cfg.seed)?;
    let c_seg = cfg.f1.c_seg;
    if cfg.f2.c_seg != c_seg || cfg.f2.k_cls != cfg.f1.k_cls {
        return Err(Error::Config {
            key: "model".into(),
            msg: "both networks must share class and label counts".into(),
        });
    }
    let labeled = load_samples(&ds, Split::Labeled, c_seg)?;
    let unlabeled = load_samples(&ds, Split::Unlabeled, c_seg)?;
    let val = load_samples(&ds, Split::Val, c_seg)?;
    if let Some(k) = labeled.first().and_then(|s| s.labels.as_ref()).map(LabelVector::labels) {
        if k != cfg.f1.k_cls {
            return Err(Error::Config {
                key: "model.k_cls".into(),
                msg: format!("dataset has {k} labels, configuration {}", cfg.f1.k_cls),
            });
        }
    }
    let spe = plan.steps_per_epoch();
    log::info!(
        "{} labeled, {} unlabeled, {} val records; {spe} steps per epoch",
        labeled.len(),
        unlabeled.len(),
        val.len()
    );

    let mut metrics = format!("{METRICS_HEADER}\n");
    for r in &history {
        metrics.push_str(&r.to_csv_row());
        metrics.push('\n');
    }
    write_text(&out_dir.join(METRICS_FILE), &metrics)?;
    let steps_path = out_dir.join(STEPS_FILE);
    let mut steps = fs::File::create(&steps_path).map_err(|e| Error::io(&steps_path, e))?;
    writeln!(steps, "{STEPS_HEADER}").map_err(|e| Error::io(&steps_path, e))?;

    let best_path = out_dir.join(BEST_CHECKPOINT);
    if let (Some(src), Some((be, _))) = (&opts.resume, best) {
        if be == state.epoch {
            fs::copy(src, &best_path).map_err(|e| Error::io(&best_path, e))?;
        } else if let Some(prev) = src.parent().map(|d| d.join(BEST_CHECKPOINT)).filter(|p| p.is_file()) {
            if prev != best_path {
                fs::copy(&prev, &best_path).map_err(|e| Error::io(&best_path, e))?;
            }
        } else {
            log::warn!("best checkpoint of epoch {be} not found next to the resume checkpoint");
        }
    }

    let mut steps_run = 0;
    let mut steps_failed = 0;
    for epoch in state.epoch..cfg.epochs {
        let mut sum = LossReport::default();
        let mut ok = 0u64;
        for sb in plan.epoch(epoch) {
            let ctl = StepControl::for_step(&cfg, sb.global_step, spe);
            let (lab, unl) = assemble(&cfg, &plan, &sb, &labeled, &unlabeled)?;
            match train_step(&mut state, &cfg, &lab, &unl, &ctl) {
                Ok(r) => {
                    add_report(&mut sum, &r);
                    ok += 1;
                    writeln!(
                        steps,
                        "{},{},{},{},{},{},{},{},{},{}",
                        epoch + 1,
                        sb.step,
                        sb.global_step,
                        r.sup1,
                        r.sup2,
                        r.cps,
                        r.ict,
                        r.dac_align,
                        r.dac_conf,
                        r.total
                    )
                    .map_err(|e| Error::io(&steps_path, e))?;
                }
                Err(e @ Error::NonFinite { .. }) => {
                    log::warn!("epoch {} step {}: skipped, {e}", epoch + 1, sb.step);
                    steps_failed += 1;
                }
                Err(e) => return Err(e),
            }
            // A skipped step still consumes its slot in the schedule.
            state.global_step = sb.global_step + 1;
        }
        steps_run += ok;
        state.epoch = epoch + 1;

        let report = validate(&state.f1, &val, &cfg)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            losses: mean_report(&sum, ok),
            val_dsc: report.dsc,
            val_nsd: report.nsd,
            val_f1: report.f1,
            val_score: report.score,
        };
        log::info!(
            "epoch {}: total {:.4}, val dsc {:.2} nsd {:.2} f1 {:.2} score {:.2} (nsd tolerance {} px)",
            rec.epoch,
            rec.losses.total,
            rec.val_dsc,
            rec.val_nsd,
            rec.val_f1,
            rec.val_score,
            report.nsd_tolerance
        );
        history.push(rec);
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(out_dir.join(METRICS_FILE))
            .map_err(|e| Error::io(out_dir.join(METRICS_FILE), e))?;
        writeln!(f, "{}", rec.to_csv_row()).map_err(|e| Error::io(out_dir.join(METRICS_FILE), e))?;

        let value = selection_value(&cfg, &rec);
        let improved = best.is_none_or(|(_, b)| value > b);
        if improved {
            best = Some((rec.epoch, value));
        }
        let ck = Checkpoint {
            config: cfg.clone(),
            state: state.clone(),
            history: history.clone(),
            best,
        };
        ck.save(&out_dir.join(LAST_CHECKPOINT))?;
        if improved {
            ck.save(&best_path)?;
        }
        if cfg.save_every > 0 && rec.epoch % cfg.save_every == 0 {
            ck.save(&out_dir.join(format!("epoch_{:04}.ckpt", rec.epoch)))?;
        }
    }
    let (best_epoch, best_value) = best.ok_or_else(|| Error::Invalid("no epoch was run".into()))?;
    Ok(FitOutcome {
        history,
        best_epoch,
        best_value,
        best_checkpoint: best_path,
        steps_run,
        steps_failed,
        masks_read: ds.mask_reads(),
    })
}
