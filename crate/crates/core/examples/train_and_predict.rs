// Train both networks on a small synthetic set, then predict with the
// first network of the best checkpoint and score the validation split.

use fmdacl::cli::{cmd_eval, cmd_predict, EvalArgs, PredictArgs};
use fmdacl::config::TrainConfig;
use fmdacl::data::{gen_synthetic, GenConfig, IMAGES_DIR};
use fmdacl::nn::{BackboneKind, BackboneSpec};
use fmdacl::trainer::{fit, FitOptions};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let data = tmp.path().join("data");
    gen_synthetic(&GenConfig::new(16, 32, 0), &data)?;

    let mut cfg = TrainConfig::default();
    cfg.epochs = 2;
    cfg.augment.target_size = (32, 32);
    cfg.f1 = BackboneSpec::new(BackboneKind::PatchAttention, 8, 2);
    cfg.f2 = BackboneSpec::new(BackboneKind::ConvUnet, 8, 2);
    let run = tmp.path().join("run");
    let o = fit(&cfg, &data, &run, &FitOptions::default())?;
    for r in &o.history {
        println!("epoch {}: loss {:.3}, val dsc {:.2}, score {:.2}", r.epoch, r.losses.total, r.val_dsc, r.val_score);
    }

    let preds = tmp.path().join("preds");
    cmd_predict(&PredictArgs {
        checkpoint: o.best_checkpoint.clone(),
        images: data.join(IMAGES_DIR),
        out: preds.clone(),
    })?;
    cmd_eval(&EvalArgs {
        checkpoint: None,
        predictions: Some(preds),
        data,
        split: "val".into(),
        nsd_tol: 1.0,
        s_time: 0.0,
        empty_as_perfect: false,
        out: tmp.path().join("report.csv"),
    })?;
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
