// Read a run configuration from key-value text, override the seed from
// the environment, and write the resolved form back out.

use fmdacl::config::{apply_seed_env, RunConfig, SEED_ENV};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let text = "\
train.epochs=20
train.seed=1
loss.lambda_cps=5.0
augment.height=64
augment.width=64
f1.width=16
data.root=data
output.dir=runs/demo
";
    let mut run = RunConfig::from_text(text)?;
    apply_seed_env(&mut run.train, std::env::var(SEED_ENV).ok().as_deref())?;
    println!("{}", run.to_text());
    assert!(RunConfig::from_text("train.epochs=0\n").is_err());
    assert!(RunConfig::from_text("train.no_such_key=1\n").is_err());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
