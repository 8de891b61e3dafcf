// Interrupt a run and resume it from a periodic checkpoint; the metrics
// log comes out the same as the uninterrupted run's.

use fmdacl::config::TrainConfig;
use fmdacl::data::{gen_synthetic, GenConfig};
use fmdacl::nn::{BackboneKind, BackboneSpec};
use fmdacl::trainer::{fit, FitOptions, METRICS_FILE};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let data = tmp.path().join("data");
    gen_synthetic(&GenConfig::new(12, 16, 2), &data)?;
    let mut cfg = TrainConfig::default();
    cfg.epochs = 2;
    cfg.save_every = 1;
    cfg.augment.target_size = (16, 16);
    cfg.f1 = BackboneSpec::new(BackboneKind::PatchAttention, 8, 2);
    cfg.f2 = BackboneSpec::new(BackboneKind::ConvUnet, 8, 2);

    let full = tmp.path().join("full");
    fit(&cfg, &data, &full, &FitOptions::default())?;
    let resumed = tmp.path().join("resumed");
    let opts = FitOptions {
        resume: Some(full.join("epoch_0001.ckpt")),
        ..FitOptions::default()
    };
    fit(&cfg, &data, &resumed, &opts)?;
    let a = std::fs::read_to_string(full.join(METRICS_FILE))?;
    let b = std::fs::read_to_string(resumed.join(METRICS_FILE))?;
    print!("{b}");
    assert_eq!(a, b);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
