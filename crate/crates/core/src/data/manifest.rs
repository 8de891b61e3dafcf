//! Dataset root layout: `manifest.csv`, `labels.csv`, `images/`, `masks/`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::types::LabelVector;

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Labeled, Split::Unlabeled, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|v| v.as_str() == s)
    }

    /// Whether records of this split carry ground truth.
    pub fn annotated(self) -> bool {
        self != Split::Unlabeled
    }
}

/// One dataset entry. Annotated splits carry a mask path and labels;
/// unlabeled records carry neither.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub labels: Option<LabelVector>,
    pub split: Split,
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join(IMAGES_DIR).join(format!("{id}.png"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join(MASKS_DIR).join(format!("{id}.png"))
}

/// Ids become file names, so only a conservative character set is allowed.
pub fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::Dataset(format!("invalid record id {id:?}")))
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(f))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Dataset(format!("{}: {e}", path.display()))
}

/// Reads `labels.csv`: header `id,c0,...,c{K-1}`, binary values.
pub fn read_labels(path: &Path) -> Result<(usize, BTreeMap<String, LabelVector>)> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let k = header.len().saturating_sub(1);
    let expected: Vec<String> = std::iter::once("id".to_string())
        .chain((0..k).map(|i| format!("c{i}")))
        .collect();
    if k == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::Dataset(format!(
            "{}: header must be id,c0..c{{K-1}}, found {:?}",
            path.display(),
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = BTreeMap::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let id = row[0].to_string();
        let bits = row
            .iter()
            .skip(1)
            .map(|v| match v.trim() {
                "0" => Ok(0u8),
                "1" => Ok(1u8),
                other => Err(Error::Dataset(format!("labels for {id}: value {other:?} is not 0/1"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        let lv = LabelVector::new(1, k, bits)?;
        if out.insert(id.clone(), lv).is_some() {
            return Err(Error::Dataset(format!("labels.csv: duplicate id {id}")));
        }
    }
    Ok((k, out))
}

pub fn write_labels(path: &Path, k: usize, rows: &BTreeMap<String, LabelVector>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let header: Vec<String> = std::iter::once("id".to_string())
        .chain((0..k).map(|i| format!("c{i}")))
        .collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (id, lv) in rows {
        let mut rec = vec![id.clone()];
        rec.extend(lv.data().iter().map(|b| b.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_manifest(root: &Path, rows: &[(String, Split)]) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    w.write_record(["id", "split"]).map_err(|e| csv_err(&path, e))?;
    for (id, s) in rows {
        w.write_record([id.as_str(), s.as_str()]).map_err(|e| csv_err(&path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Dataset(e.to_string()))?;
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

/// Loads and validates the records of a dataset root.
pub fn load_manifest(root: &Path) -> Result<Vec<SampleRecord>> {
    let path = root.join(MANIFEST_FILE);
    let mut rdr = csv_reader(&path)?;
    let header = rdr.headers().map_err(|e| csv_err(&path, e))?.clone();
    if header.iter().ne(["id", "split"]) {
        return Err(Error::Dataset(format!("{}: header must be `id,split`", path.display())));
    }
    let labels_path = root.join(LABELS_FILE);
    let labels = if labels_path.exists() {
        Some(read_labels(&labels_path)?.1)
    } else {
        None
    };
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(&path, e))?;
        let id = row[0].to_string();
        check_id(&id)?;
        if !seen.insert(id.clone()) {
            return Err(Error::Dataset(format!("duplicate id {id}")));
        }
        let split = Split::parse(&row[1])
            .ok_or_else(|| Error::Dataset(format!("record {id}: unknown split tag {:?}", &row[1])))?;
        let image = image_path(root, &id);
        if !image.is_file() {
            return Err(Error::Dataset(format!("record {id}: unreadable image {}", image.display())));
        }
        let (mask, lv) = if split.annotated() {
            let m = mask_path(root, &id);
            if !m.is_file() {
                return Err(Error::Dataset(format!(
                    "record {id} ({}) is missing its mask {}",
                    split.as_str(),
                    m.display()
                )));
            }
            let lv = labels
                .as_ref()
                .and_then(|l| l.get(&id))
                .cloned()
                .ok_or_else(|| Error::Dataset(format!("record {id} ({}) has no labels row", split.as_str())))?;
            (Some(m), Some(lv))
        } else {
            (None, None)
        };
        out.push(SampleRecord {
            id,
            image_path: image,
            mask_path: mask,
            labels: lv,
            split,
        });
    }
    Ok(out)
}
