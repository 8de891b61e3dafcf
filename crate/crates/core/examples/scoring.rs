// Score predicted masks and labels with Dice, surface Dice, macro-F1 and
// the weighted overall score.

use fmdacl::metrics::{dice_metric, f1_metric, nsd_metric, overall_score, EmptyPolicy};
use fmdacl::types::{IndexMask, LabelVector};

pub fn run_example() -> Result<(), Box<dyn std::error::Error>> {
    let (h, w) = (6, 6);
    let mut gt = vec![0u8; h * w];
    let mut pred = vec![0u8; h * w];
    for y in 1..4 {
        for x in 1..4 {
            gt[y * w + x] = 1;
            pred[y * w + x + 1] = 1;
        }
    }
    let gt = IndexMask::new([1, h, w], 3, gt)?;
    let pred = IndexMask::new([1, h, w], 3, pred)?;
    let dsc = dice_metric(&pred, &gt, 3, EmptyPolicy::Exclude)?.mean;
    let nsd = nsd_metric(&pred, &gt, 1.0, 3, EmptyPolicy::Exclude)?.mean;
    let f1 = f1_metric(
        &LabelVector::new(2, 2, vec![1, 0, 1, 1])?,
        &LabelVector::new(2, 2, vec![1, 0, 0, 1])?,
    )?;
    println!("dsc={dsc:.2} nsd={nsd:.2} f1={f1:.2}");
    println!("score without time term = {:.2}", overall_score(dsc, nsd, f1, 0.0)?);
    println!("score with s_time = 80  = {:.2}", overall_score(dsc, nsd, f1, 80.0)?);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
