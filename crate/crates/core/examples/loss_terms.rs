// Evaluate every term of the training objective on random network outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fmdacl::losses::{cps_loss, dac_loss, ict_loss, sup_loss, total_loss, LossReport, LossWeights};
use fmdacl::nn::DualHeadOutput;
use fmdacl::ops::softmax_seg;
use fmdacl::tensor::Tensor;
use fmdacl::types::{ClsLogits, IndexMask, LabelVector, SegLogits};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()).unwrap()
}

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (b, c, k, h, w) = (2, 4, 3, 8, 8);
    let out = |rng: &mut ChaCha8Rng| -> Result<DualHeadOutput, fmdacl::Error> {
        Ok(DualHeadOutput {
            seg: SegLogits::new(random(rng, &[b, c, h, w]))?,
            cls: ClsLogits::new(random(rng, &[b, k]))?,
        })
    };
    let (o1, o2) = (out(&mut rng)?, out(&mut rng)?);
    let y = IndexMask::new([b, h, w], c, (0..b * h * w).map(|_| rng.random_range(0..c as u8)).collect())?;
    let labels = LabelVector::new(b, k, vec![1, 0, 1, 0, 0, 1])?;

    let (align, conf) = dac_loss(&softmax_seg(&o1.seg), &softmax_seg(&o2.seg))?;
    let teacher = SegLogits::new(random(&mut rng, &[1, c, h, w]))?;
    let other = SegLogits::new(random(&mut rng, &[1, c, h, w]))?;
    let student = SegLogits::new(o1.seg.tensor().batch_slice(0, 1))?;
    let parts = LossReport {
        sup1: sup_loss(&o1, &y, &labels)?,
        sup2: sup_loss(&o2, &y, &labels)?,
        cps: cps_loss(&o1, &o2)?,
        ict: ict_loss(&student, &teacher, &other, 0.5)?,
        dac_align: align,
        dac_conf: conf,
        total: 0.0,
    };
    for (name, v) in parts.terms() {
        println!("{name:>9} = {v:.5}");
    }
    println!("    total = {:.5}", total_loss(&parts, &LossWeights::default())?);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
