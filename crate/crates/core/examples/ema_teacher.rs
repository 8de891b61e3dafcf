// Follow a student with an exponential-moving-average teacher.

use fmdacl::nn::{BackboneKind, BackboneSpec, Kind, Network};
use fmdacl::teacher::EmaState;

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let mut student = Network::build(BackboneSpec::new(BackboneKind::ConvUnet, 8, 2), 0)?;
    let mut ema = EmaState::init(student.params(), 0.99)?;
    for p in student.params_mut().iter_mut().filter(|p| p.kind == Kind::Learnable) {
        p.value.fill(1.0);
    }
    for step in 1..=50 {
        ema.update(student.params())?;
        if step % 10 == 0 {
            let v = ema.shadow().iter().find(|p| p.kind == Kind::Learnable).unwrap().value.data()[0];
            println!("step {step}: first teacher weight {v:.6}");
        }
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
