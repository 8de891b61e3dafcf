//! Deterministic labeled/unlabeled batch schedule.
//!
//! Every quantity is a pure function of `(seed, epoch, step)`, so a run can
//! be resumed at any step without replaying the stream.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{SampleRecord, Split};
use crate::error::{Error, Result};

pub const DEFAULT_BATCH_LABELED: usize = 1;
pub const DEFAULT_BATCH_UNLABELED: usize = 4;

const TAG_UNLABELED: u64 = 0x756e_6c61;
const TAG_LABELED: u64 = 0x6c61_6265;
const TAG_SAMPLE: u64 = 0x7361_6d70;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashes a sequence of words into one seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x243f_6a88_85a3_08d3, |h, &p| splitmix(h ^ splitmix(p)))
}

fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

/// Record positions for one optimization step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepBatch {
    pub epoch: usize,
    pub step: usize,
    pub global_step: u64,
    /// Positions into [`BatchPlan::labeled_ids`].
    pub labeled: Vec<usize>,
    /// Positions into [`BatchPlan::unlabeled_ids`].
    pub unlabeled: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    labeled_ids: Vec<String>,
    unlabeled_ids: Vec<String>,
    batch_labeled: usize,
    batch_unlabeled: usize,
    seed: u64,
}

/// Builds the batch schedule over the labeled and unlabeled records.
pub fn make_batches(
    records: &[SampleRecord],
    batch_labeled: usize,
    batch_unlabeled: usize,
    seed: u64,
) -> Result<BatchPlan> {
    let ids = |s: Split| -> Vec<String> {
        records
            .iter()
            .filter(|r| r.split == s)
            .map(|r| r.id.clone())
            .collect()
    };
    BatchPlan::new(ids(Split::Labeled), ids(Split::Unlabeled), batch_labeled, batch_unlabeled, seed)
}

impl BatchPlan {
    pub fn new(
        labeled_ids: Vec<String>,
        unlabeled_ids: Vec<String>,
        batch_labeled: usize,
        batch_unlabeled: usize,
        seed: u64,
    ) -> Result<Self> {
        if batch_labeled == 0 {
            return Err(Error::Invalid("labeled batch size must be at least 1".into()));
        }
        if batch_unlabeled < 2 || batch_unlabeled % 2 != 0 {
            return Err(Error::Invalid(format!(
                "unlabeled batch size {batch_unlabeled} must be even and at least 2 (mixup pairs halves)"
            )));
        }
        if labeled_ids.is_empty() {
            return Err(Error::Dataset("labeled split is empty".into()));
        }
        if unlabeled_ids.len() < 2 {
            return Err(Error::Dataset(format!(
                "unlabeled split has {} records, need at least 2",
                unlabeled_ids.len()
            )));
        }
        Ok(BatchPlan {
            labeled_ids,
            unlabeled_ids,
            batch_labeled,
            batch_unlabeled,
            seed,
        })
    }

    pub fn labeled_ids(&self) -> &[String] {
        &self.labeled_ids
    }

    pub fn unlabeled_ids(&self) -> &[String] {
        &self.unlabeled_ids
    }

    pub fn batch_labeled(&self) -> usize {
        self.batch_labeled
    }

    pub fn batch_unlabeled(&self) -> usize {
        self.batch_unlabeled
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.unlabeled_ids.len().div_ceil(self.batch_unlabeled)
    }

    /// The batch of step `step` within `epoch`. The last batch of an epoch
    /// is topped up with the first records of that epoch's order.
    pub fn step(&self, epoch: usize, step: usize) -> StepBatch {
        let spe = self.steps_per_epoch();
        assert!(step < spe, "step {step} beyond epoch length {spe}");
        let u = self.unlabeled_ids.len();
        let perm = permutation(u, mix_seed(&[self.seed, TAG_UNLABELED, epoch as u64]));
        let unlabeled = (0..self.batch_unlabeled)
            .map(|j| perm[(step * self.batch_unlabeled + j) % u])
            .collect();
        let global_step = (epoch * spe + step) as u64;
        let l = self.labeled_ids.len() as u64;
        let labeled = (0..self.batch_labeled as u64)
            .map(|j| {
                let k = global_step * self.batch_labeled as u64 + j;
                let cycle = k / l;
                let perm = permutation(l as usize, mix_seed(&[self.seed, TAG_LABELED, cycle]));
                perm[(k % l) as usize]
            })
            .collect();
        StepBatch {
            epoch,
            step,
            global_step,
            labeled,
            unlabeled,
        }
    }

    /// All steps of one epoch in order.
    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = StepBatch> + '_ {
        (0..self.steps_per_epoch()).map(move |s| self.step(epoch, s))
    }

    /// Seed for the augmentation of one batch slot.
    pub fn sample_seed(&self, global_step: u64, labeled: bool, slot: usize) -> u64 {
        mix_seed(&[self.seed, TAG_SAMPLE, global_step, labeled as u64, slot as u64])
    }
}
