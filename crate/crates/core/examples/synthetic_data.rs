// Generate a small synthetic dataset and look at its splits and labels.

use fmdacl::data::{gen_synthetic, Dataset, GenConfig, Split};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let root = tmp.path().join("data");
    let summary = gen_synthetic(&GenConfig::new(30, 32, 7), &root)?;
    println!(
        "labeled={} unlabeled={} val={} test={}",
        summary.labeled, summary.unlabeled, summary.val, summary.test
    );

    let ds = Dataset::open(&root)?;
    for rec in ds.split(Split::Labeled) {
        let s = ds.load(rec, 15)?;
        let classes: std::collections::BTreeSet<u8> =
            s.mask.as_deref().unwrap_or(&[]).iter().copied().filter(|&c| c > 0).collect();
        println!("{} {}x{} classes={classes:?} labels={:?}", s.id, s.height, s.width, s.labels.unwrap().data());
    }
    // unlabeled records come without masks
    let u = ds.split(Split::Unlabeled)[0];
    assert!(ds.load(u, 15)?.mask.is_none());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
