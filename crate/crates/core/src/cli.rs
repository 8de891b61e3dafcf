//! Command-line front end. This is the only module that writes to the
//! console; everything else reports through `log`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{apply_seed_env, RunConfig, SEED_ENV};
use crate::data::io::{read_image, read_mask, to_unit, write_gray, Gray8};
use crate::data::{
    check_id, gen_synthetic, read_labels, write_labels, Dataset, GenConfig, Split, LABELS_FILE, MASKS_DIR,
};
use crate::error::{Error, Result};
use crate::metrics::{EmptyPolicy, MetricsAccumulator, MetricsReport, DEFAULT_NSD_TOLERANCE};
use crate::trainer::{fit, predict, validate, Checkpoint, FitOptions, WeightImport};
use crate::types::LabelVector;

#[derive(Debug, Parser)]
#[command(name = "fmdacl", version, about = "Dual-network semi-supervised segmentation and classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset.
    GenData(GenDataArgs),
    /// Train both networks and keep the best checkpoint.
    Train(TrainArgs),
    /// Score predictions or a checkpoint against ground truth.
    Eval(EvalArgs),
    /// Predict masks and labels for a directory of images.
    Predict(PredictArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: usize,
    /// Image height and width in pixels.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.2)]
    pub labeled_frac: f64,
    #[arg(long, default_value_t = 0.1)]
    pub val_frac: f64,
    #[arg(long, default_value_t = 0.0)]
    pub test_frac: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Key-value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root; overrides `data.root`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Run directory; overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Tensor archive with initial weights for the first network.
    #[arg(long, requires = "init_f1_map")]
    pub init_f1: Option<PathBuf>,
    /// Name map for `--init-f1`.
    #[arg(long, requires = "init_f1")]
    pub init_f1_map: Option<PathBuf>,
    /// Tensor archive with initial weights for the second network.
    #[arg(long, requires = "init_f2_map")]
    pub init_f2: Option<PathBuf>,
    /// Name map for `--init-f2`.
    #[arg(long, requires = "init_f2")]
    pub init_f2_map: Option<PathBuf>,
}

fn weight_import(archive: &Option<PathBuf>, map: &Option<PathBuf>) -> Option<WeightImport> {
    match (archive, map) {
        (Some(a), Some(m)) => Some(WeightImport {
            archive: a.clone(),
            name_map: m.clone(),
        }),
        _ => None,
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory with `masks/<id>.png` and `labels.csv` predictions.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "val")]
    pub split: String,
    /// Boundary tolerance of the surface Dice, in pixels.
    #[arg(long, default_value_t = DEFAULT_NSD_TOLERANCE)]
    pub nsd_tol: f64,
    /// Time score entering the overall score, in [0, 100].
    #[arg(long, default_value_t = 0.0)]
    pub s_time: f64,
    /// Count classes absent from both masks as perfect instead of skipping.
    #[arg(long)]
    pub empty_as_perfect: bool,
    /// CSV report path.
    #[arg(long, default_value = "eval_report.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory of PNG images.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Runs a parsed command line. `seed_env` is the value of `FMDACL_SEED`.
pub fn run(cli: Cli, seed_env: Option<&str>) -> Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a, seed_env),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = GenConfig {
        n: a.n,
        height: a.size,
        width: a.size,
        seed: a.seed,
        labeled_frac: a.labeled_frac,
        val_frac: a.val_frac,
        test_frac: a.test_frac,
    };
    let s = gen_synthetic(&cfg, &a.out)?;
    println!(
        "wrote {} records to {}: labeled={} unlabeled={} val={} test={}",
        a.n,
        a.out.display(),
        s.labeled,
        s.unlabeled,
        s.val,
        s.test
    );
    Ok(())
}

pub fn cmd_train(a: &TrainArgs, seed_env: Option<&str>) -> Result<()> {
    let mut run = match &a.config {
        Some(p) => RunConfig::from_text(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => RunConfig::default(),
    };
    apply_seed_env(&mut run.train, seed_env)?;
    let data = a.data.clone().or(run.data_root.clone()).ok_or_else(|| Error::Config {
        key: "data.root".into(),
        msg: "no dataset given (--data or data.root)".into(),
    })?;
    let out = a.out.clone().or(run.output_dir.clone()).ok_or_else(|| Error::Config {
        key: "output.dir".into(),
        msg: "no output directory given (--out or output.dir)".into(),
    })?;
    if seed_env.is_some() && a.resume.is_some() {
        log::warn!("{SEED_ENV} is ignored when resuming; the checkpoint's seed is used");
    }
    let opts = FitOptions {
        resume: a.resume.clone(),
        init_f1: weight_import(&a.init_f1, &a.init_f1_map),
        init_f2: weight_import(&a.init_f2, &a.init_f2_map),
    };
    let o = fit(&run.train, &data, &out, &opts)?;
    let best = &o.history[o.best_epoch - 1];
    println!(
        "trained {} epochs ({} steps, {} skipped); best epoch {}: dsc={:.2} nsd={:.2} f1={:.2} score={:.2}",
        o.history.len(),
        o.steps_run,
        o.steps_failed,
        o.best_epoch,
        best.val_dsc,
        best.val_nsd,
        best.val_f1,
        best.val_score
    );
    println!("best checkpoint: {}", o.best_checkpoint.display());
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV report: one row per image, then an `ALL` aggregate row carrying the
/// overall score both with and without the time term.
pub fn report_csv(r: &MetricsReport) -> String {
    let mut s = String::from("id,dsc,nsd,f1,s_time,score_with_time,score_no_time,nsd_tolerance\n");
    for i in &r.per_image {
        s.push_str(&format!("{},{},{},,,,,\n", i.id, opt(i.dsc), opt(i.nsd)));
    }
    s.push_str(&format!(
        "ALL,{},{},{},{},{},{},{}\n",
        r.dsc, r.nsd, r.f1, r.s_time, r.score, r.score_no_time, r.nsd_tolerance
    ));
    s
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let split = Split::parse(&a.split)
        .filter(|s| s.annotated())
        .ok_or_else(|| Error::Invalid(format!("--split must be labeled, val or test, got {:?}", a.split)))?;
    let ds = Dataset::open(&a.data)?;
    let policy = if a.empty_as_perfect {
        EmptyPolicy::Perfect
    } else {
        EmptyPolicy::Exclude
    };
    let report = if let Some(ck) = &a.checkpoint {
        let ck = Checkpoint::load(ck)?;
        let mut cfg = ck.config.clone();
        cfg.nsd_tolerance = a.nsd_tol;
        cfg.empty_policy = policy;
        let samples = ds.load_split(split, cfg.f1.c_seg)?;
        let r = validate(&ck.state.f1, &samples, &cfg)?;
        with_time(r, a.s_time)?
    } else {
        let dir = a.predictions.as_ref().expect("clap requires one source");
        let (_, pred_labels) = read_labels(&dir.join(LABELS_FILE))?;
        let recs = ds.split(split);
        let c_seg = crate::nn::DEFAULT_SEG_CLASSES;
        let mut acc = MetricsAccumulator::new(c_seg, a.nsd_tol, policy)?;
        for r in recs {
            let (h, w, gt) = ds.read_mask(r, c_seg)?;
            let pm = read_mask(&dir.join(MASKS_DIR).join(format!("{}.png", r.id)))?;
            if (pm.height, pm.width) != (h, w) {
                return Err(Error::Shape(format!(
                    "prediction for {} is {}x{}, ground truth {h}x{w}",
                    r.id, pm.height, pm.width
                )));
            }
            let pl = pred_labels
                .get(&r.id)
                .ok_or_else(|| Error::Dataset(format!("predicted labels missing for {}", r.id)))?;
            let gl = r.labels.as_ref().expect("annotated split");
            acc.add(&r.id, &pm.pixels, &gt, h, w, pl.data(), gl.data())?;
        }
        acc.finish(a.s_time)?
    };
    fs::write(&a.out, report_csv(&report)).map_err(|e| Error::io(&a.out, e))?;
    println!(
        "split={} images={} dsc={:.3} nsd={:.3} f1={:.3} s_time={} score_with_time={:.3} score_no_time={:.3} nsd_tolerance={}",
        split.as_str(),
        report.per_image.len(),
        report.dsc,
        report.nsd,
        report.f1,
        report.s_time,
        report.score,
        report.score_no_time,
        report.nsd_tolerance
    );
    println!("report: {}", a.out.display());
    Ok(())
}

fn with_time(mut r: MetricsReport, s_time: f64) -> Result<MetricsReport> {
    r.s_time = s_time;
    r.score = crate::metrics::overall_score(r.dsc, r.nsd, r.f1, s_time)?;
    Ok(r)
}

fn png_files(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|x| x.to_str()) == Some("png") {
            let stem = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Dataset(format!("unusable file name {}", p.display())))?
                .to_string();
            check_id(&stem)?;
            out.push((stem, p));
        }
    }
    out.sort();
    Ok(out)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let files = png_files(&a.images)?;
    let mask_dir = a.out.join(MASKS_DIR);
    fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
    let mut labels = BTreeMap::new();
    let k = ck.config.f1.k_cls;
    for (id, path) in &files {
        let g = read_image(path)?;
        let (mask, lab) = predict(&ck, &[(g.height, g.width, to_unit(&g.pixels))])?
            .pop()
            .expect("one image in, one prediction out");
        write_gray(
            &mask_dir.join(format!("{id}.png")),
            &Gray8 {
                height: g.height,
                width: g.width,
                pixels: mask,
            },
        )?;
        labels.insert(id.clone(), LabelVector::new(1, k, lab)?);
    }
    write_labels(&a.out.join(LABELS_FILE), k, &labels)?;
    println!("predicted {} images into {}", files.len(), a.out.display());
    Ok(())
}

/// One-line, machine-parsable error description.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ").replace('"', "'");
    format!("error kind={} msg=\"{msg}\"", e.kind())
}
