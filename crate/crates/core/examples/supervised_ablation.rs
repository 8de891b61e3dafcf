// Switch off the three semi-supervised terms and freeze the partner
// network: what remains is plain supervised training of the first network.

use fmdacl::config::TrainConfig;
use fmdacl::losses::LossWeights;
use fmdacl::nn::{BackboneKind, BackboneSpec, Kind};
use fmdacl::tensor::Tensor;
use fmdacl::trainer::{train_step, LabeledBatch, StepControl, TrainState};
use fmdacl::types::{ImageBatch, IndexMask, LabelVector};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = TrainConfig::default();
    cfg.weights = LossWeights::zero();
    cfg.lr_f2 = 0.0;
    cfg.f1 = BackboneSpec::new(BackboneKind::PatchAttention, 8, 2);
    cfg.f2 = BackboneSpec::new(BackboneKind::ConvUnet, 8, 2);
    let mut state = TrainState::new(&cfg)?;
    let frozen: Vec<Tensor> = state
        .f2
        .params()
        .iter()
        .filter(|p| p.kind == Kind::Learnable)
        .map(|p| p.value.clone())
        .collect();

    let (h, w) = (16, 16);
    let mask: Vec<u8> = (0..h * w).map(|i| if (i % w) < w / 2 { 3 } else { 0 }).collect();
    let images: Vec<f64> = mask.iter().map(|&c| if c > 0 { 0.8 } else { 0.1 }).collect();
    let lab = LabeledBatch {
        images: ImageBatch::new(Tensor::from_vec(&[1, 1, h, w], images.clone())?)?,
        masks: IndexMask::new([1, h, w], 15, mask)?,
        labels: LabelVector::new(1, 7, vec![1, 0, 0, 0, 0, 1, 0])?,
    };
    let unl = ImageBatch::new(Tensor::from_vec(&[4, 1, h, w], images.repeat(4))?)?;
    for step in 0..5 {
        let r = train_step(&mut state, &cfg, &lab, &unl, &StepControl::for_step(&cfg, step, 5))?;
        println!("step {step}: sup1 {:.4} sup2 {:.4} cps {} ict {} dac {}", r.sup1, r.sup2, r.cps, r.ict, r.dac_align);
    }
    let still: Vec<Tensor> = state
        .f2
        .params()
        .iter()
        .filter(|p| p.kind == Kind::Learnable)
        .map(|p| p.value.clone())
        .collect();
    assert_eq!(frozen, still);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
