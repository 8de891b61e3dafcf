// Build both backbones and run them on a batch.

use fmdacl::nn::{BackboneKind, BackboneSpec, Mode, Network};
use fmdacl::tensor::Tensor;
use fmdacl::types::ImageBatch;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let x = ImageBatch::new(Tensor::full(&[2, 1, 32, 32], 0.5))?;
    for spec in [
        BackboneSpec::new(BackboneKind::PatchAttention, 16, 2),
        BackboneSpec::new(BackboneKind::ConvUnet, 16, 3),
    ] {
        let net = Network::build(spec.clone(), 0)?;
        let out = net.forward(&x, Mode::Eval)?;
        let groups = net.param_groups();
        println!(
            "{}: {} learnable values, {} head tensors, seg {:?}, cls {:?}",
            spec.kind.as_str(),
            net.params().learnable_count(),
            groups.heads.len(),
            out.seg.tensor().shape(),
            out.cls.tensor().shape()
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
