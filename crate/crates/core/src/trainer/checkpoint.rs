//! Single-file checkpoints: a plain-text header followed by a tensor archive.
//!
//! ```text
//! FMDACL-CKPT 1
//! epoch=3
//! global_step=105
//! ...
//! history=1,0.93,...
//! config.train.epochs=20
//! ...
//! END-HEADER
//! <tensor archive bytes>
//! ```

use std::fs;
use std::path::Path;

use crate::archive::TensorArchive;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::nn::{Network, ParamStore};
use crate::optim::AdamW;
use crate::teacher::EmaState;
use crate::tensor::Tensor;

use super::{optimizers, TrainState};

pub const CHECKPOINT_MAGIC: &str = "FMDACL-CKPT 1";
const HEADER_END: &str = "END-HEADER";

pub const METRICS_HEADER: &str = "epoch,sup1,sup2,cps,ict,dac_align,dac_conf,total,val_dsc,val_nsd,val_f1,val_score";
pub const STEPS_HEADER: &str = "epoch,step,global_step,sup1,sup2,cps,ict,dac_align,dac_conf,total";

/// One row of the metrics log: mean losses over the epoch's steps and the
/// validation metrics after it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub losses: LossReport,
    pub val_dsc: f64,
    pub val_nsd: f64,
    pub val_f1: f64,
    pub val_score: f64,
}

impl EpochRecord {
    pub fn to_csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            l.sup1,
            l.sup2,
            l.cps,
            l.ict,
            l.dac_align,
            l.dac_conf,
            l.total,
            self.val_dsc,
            self.val_nsd,
            self.val_f1,
            self.val_score
        )
    }

    pub fn parse_csv_row(row: &str) -> Result<EpochRecord> {
        let f: Vec<&str> = row.trim().split(',').collect();
        let bad = || Error::Checkpoint(format!("malformed metrics row {row:?}"));
        if f.len() != 12 {
            return Err(bad());
        }
        let r = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            losses: LossReport {
                sup1: r(1)?,
                sup2: r(2)?,
                cps: r(3)?,
                ict: r(4)?,
                dac_align: r(5)?,
                dac_conf: r(6)?,
                total: r(7)?,
            },
            val_dsc: r(8)?,
            val_nsd: r(9)?,
            val_f1: r(10)?,
            val_score: r(11)?,
        })
    }
}

/// Full training state at an epoch boundary plus the run's history.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
    /// Metrics log rows up to and including `state.epoch`.
    pub history: Vec<EpochRecord>,
    /// `(epoch, selection value)` of the best epoch so far.
    pub best: Option<(usize, f64)>,
}

fn moments_into(a: &mut TensorArchive, prefix: &str, store: &ParamStore, opt: &AdamW) -> Result<()> {
    for ((p, m), v) in store.iter().zip(opt.first_moments()).zip(opt.second_moments()) {
        a.insert(format!("{prefix}.m.{}", p.name), m.clone())?;
        a.insert(format!("{prefix}.v.{}", p.name), v.clone())?;
    }
    Ok(())
}

fn moments_from(a: &TensorArchive, prefix: &str, store: &ParamStore) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut m = Vec::new();
    let mut v = Vec::new();
    for p in store.iter() {
        m.push(a.require(&format!("{prefix}.m.{}", p.name))?.clone());
        v.push(a.require(&format!("{prefix}.v.{}", p.name))?.clone());
    }
    Ok((m, v))
}

impl Checkpoint {
    /// Latest metrics row, if any epoch has completed.
    pub fn metrics(&self) -> Option<&EpochRecord> {
        self.history.last()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.state;
        let mut h = String::new();
        h.push_str(CHECKPOINT_MAGIC);
        h.push('\n');
        h.push_str(&format!("epoch={}\n", s.epoch));
        h.push_str(&format!("global_step={}\n", s.global_step));
        h.push_str(&format!("opt1.steps={}\n", s.opt1.steps()));
        h.push_str(&format!("opt2.steps={}\n", s.opt2.steps()));
        h.push_str(&format!("ema.step={}\n", s.ema.step()));
        h.push_str(&format!("ema.decay={}\n", s.ema.decay()));
        if let Some((e, v)) = self.best {
            h.push_str(&format!("best.epoch={e}\nbest.value={v}\n"));
        }
        if let Some(m) = self.metrics() {
            h.push_str(&format!(
                "metric.val_dsc={}\nmetric.val_nsd={}\nmetric.val_f1={}\nmetric.val_score={}\n",
                m.val_dsc, m.val_nsd, m.val_f1, m.val_score
            ));
        }
        for r in &self.history {
            h.push_str(&format!("history={}\n", r.to_csv_row()));
        }
        for (k, v) in self.config.entries() {
            h.push_str(&format!("config.{k}={v}\n"));
        }
        h.push_str(HEADER_END);
        h.push('\n');

        let mut a = TensorArchive::new();
        a.insert_store("f1", s.f1.params())?;
        a.insert_store("f2", s.f2.params())?;
        a.insert_store("ema", s.ema.shadow())?;
        moments_into(&mut a, "opt1", s.f1.params(), &s.opt1)?;
        moments_into(&mut a, "opt2", s.f2.params(), &s.opt2)?;
        let mut out = h.into_bytes();
        a.write_to(&mut out).expect("writing to memory");
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |m: String| Error::Checkpoint(m);
        let marker = format!("\n{HEADER_END}\n");
        let end = bytes
            .windows(marker.len())
            .position(|w| w == marker.as_bytes())
            .ok_or_else(|| bad("header terminator not found".into()))?;
        let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
        let mut lines = header.lines();
        if lines.next() != Some(CHECKPOINT_MAGIC) {
            return Err(bad(format!("not a checkpoint, or unsupported version (expected {CHECKPOINT_MAGIC:?})")));
        }
        let mut config_text = String::new();
        let mut history = Vec::new();
        let mut fields = std::collections::HashMap::new();
        for line in lines {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("malformed header line {line:?}")))?;
            if let Some(ck) = k.strip_prefix("config.") {
                config_text.push_str(&format!("{ck}={v}\n"));
            } else if k == "history" {
                history.push(EpochRecord::parse_csv_row(v)?);
            } else {
                fields.insert(k.to_string(), v.to_string());
            }
        }
        let config = TrainConfig::from_text(&config_text)?;
        let get = |k: &str| -> Result<&String> { fields.get(k).ok_or_else(|| bad(format!("header lacks {k}"))) };
        let int = |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("header {k} is not an integer"))) };
        let epoch = int("epoch")? as usize;
        let global_step = int("global_step")?;
        let decay: f64 = get("ema.decay")?
            .parse()
            .map_err(|_| bad("header ema.decay is not a number".into()))?;
        let best = match (fields.get("best.epoch"), fields.get("best.value")) {
            (Some(e), Some(v)) => Some((
                e.parse().map_err(|_| bad("bad best.epoch".into()))?,
                v.parse().map_err(|_| bad("bad best.value".into()))?,
            )),
            _ => None,
        };

        let a = TensorArchive::read_from(&mut &bytes[end + marker.len()..])?;
        let mut f1 = Network::build(config.f1.clone(), 0)?;
        let mut f2 = Network::build(config.f2.clone(), 0)?;
        let s1 = a.extract_store("f1", f1.params())?;
        let s2 = a.extract_store("f2", f2.params())?;
        let shadow = a.extract_store("ema", f2.params())?;
        f1.set_params(s1)?;
        f2.set_params(s2)?;
        let ema = EmaState::from_parts(shadow, decay, int("ema.step")?)?;
        let (o1, o2) = optimizers(&config, &f1, &f2)?;
        let (m1, v1) = moments_from(&a, "opt1", f1.params())?;
        let (m2, v2) = moments_from(&a, "opt2", f2.params())?;
        let opt1 = AdamW::from_parts(f1.params(), o1.hyper(false), o1.hyper(true), m1, v1, int("opt1.steps")?)?;
        let opt2 = AdamW::from_parts(f2.params(), o2.hyper(false), o2.hyper(true), m2, v2, int("opt2.steps")?)?;
        Ok(Checkpoint {
            config,
            state: TrainState {
                f1,
                f2,
                ema,
                opt1,
                opt2,
                epoch,
                global_step,
            },
            history,
            best,
        })
    }

    /// Writes through a temporary file and a rename so a crash never leaves
    /// a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
