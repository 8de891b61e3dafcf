//! Dataset format, splits, augmentation, batch schedule and the synthetic
//! generator.

mod augment;
mod batches;
pub mod io;
mod manifest;
mod synth;

use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub use augment::{
    augment, hflip, resize_bilinear, resize_nearest, rotate_bilinear, rotate_nearest, AugmentPolicy, DEFAULT_TARGET,
};
pub use batches::{make_batches, mix_seed, BatchPlan, StepBatch, DEFAULT_BATCH_LABELED, DEFAULT_BATCH_UNLABELED};
pub use manifest::{
    check_id, image_path, load_manifest, mask_path, read_labels, write_labels, write_manifest, SampleRecord, Split,
    IMAGES_DIR, LABELS_FILE, MANIFEST_FILE, MASKS_DIR,
};
pub use synth::{
    class_intensity, gen_synthetic, label_bits, render, GenConfig, GenSummary, SynthSample, FOREGROUND_FRAC,
    SMALL_AREA_FRAC, STRUCTURE_CLASSES, SYNTH_LABELS,
};

use crate::error::{Error, Result};
use crate::types::LabelVector;

/// A decoded record at its native resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub height: usize,
    pub width: usize,
    /// Intensities in `[0, 1]`, row-major.
    pub image: Vec<f64>,
    /// Present only for annotated splits.
    pub mask: Option<Vec<u8>>,
    pub labels: Option<LabelVector>,
}

/// A dataset root with its validated records. Every mask read goes through
/// [`Dataset::read_mask`], which keeps an audit trail of the ids read.
#[derive(Debug)]
pub struct Dataset {
    root: PathBuf,
    records: Vec<SampleRecord>,
    mask_reads: Mutex<Vec<String>>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        Ok(Dataset {
            root: root.to_path_buf(),
            records: load_manifest(root)?,
            mask_reads: Mutex::new(Vec::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn read_image(&self, rec: &SampleRecord) -> Result<(usize, usize, Vec<f64>)> {
        let g = io::read_image(&rec.image_path)?;
        Ok((g.height, g.width, io::to_unit(&g.pixels)))
    }

    /// Reads the ground-truth mask of an annotated record, checking class
    /// ids against `classes`.
    pub fn read_mask(&self, rec: &SampleRecord, classes: usize) -> Result<(usize, usize, Vec<u8>)> {
        let path = rec
            .mask_path
            .as_ref()
            .ok_or_else(|| Error::Dataset(format!("record {} ({}) has no mask", rec.id, rec.split.as_str())))?;
        self.mask_reads.lock().expect("audit lock").push(rec.id.clone());
        let g = io::read_mask(path)?;
        if let Some(&bad) = g.pixels.iter().find(|&&v| v as usize >= classes) {
            return Err(Error::Dataset(format!(
                "mask of {} has class id {bad}, expected < {classes}",
                rec.id
            )));
        }
        Ok((g.height, g.width, g.pixels))
    }

    /// Ids whose masks have been read so far, in order.
    pub fn mask_reads(&self) -> Vec<String> {
        self.mask_reads.lock().expect("audit lock").clone()
    }

    /// Decodes one record; the mask is read only for annotated splits.
    pub fn load(&self, rec: &SampleRecord, classes: usize) -> Result<Sample> {
        let (h, w, image) = self.read_image(rec)?;
        let mask = if rec.split.annotated() {
            let (mh, mw, m) = self.read_mask(rec, classes)?;
            if (mh, mw) != (h, w) {
                return Err(Error::Dataset(format!(
                    "record {}: mask {mh}x{mw} but image {h}x{w}",
                    rec.id
                )));
            }
            Some(m)
        } else {
            None
        };
        Ok(Sample {
            id: rec.id.clone(),
            height: h,
            width: w,
            image,
            mask,
            labels: rec.labels.clone(),
        })
    }

    /// Decodes every record of a split.
    pub fn load_split(&self, split: Split, classes: usize) -> Result<Vec<Sample>> {
        self.split(split).into_iter().map(|r| self.load(r, classes)).collect()
    }
}
