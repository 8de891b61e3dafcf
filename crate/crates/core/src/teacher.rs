//! Exponential-moving-average teacher of the convolutional network.

use crate::error::{Error, Result};
use crate::nn::{DualHeadOutput, Kind, Mode, Network, ParamStore};
use crate::types::ImageBatch;

pub const DEFAULT_EMA_DECAY: f64 = 0.99;

/// Shadow copy of a student's parameters.
///
/// Learnable parameters are averaged, `shadow = decay * shadow + (1 - decay)
/// * student`; normalization running statistics are copied verbatim so the
/// teacher is usable in evaluation mode.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    shadow: ParamStore,
    decay: f64,
    step: u64,
}

impl EmaState {
    /// Starts the teacher as an exact copy of the student.
    pub fn init(student: &ParamStore, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Invalid(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(EmaState {
            shadow: student.clone(),
            decay,
            step: 0,
        })
    }

    /// Restores a saved teacher.
    pub fn from_parts(shadow: ParamStore, decay: f64, step: u64) -> Result<Self> {
        let mut s = EmaState::init(&shadow, decay)?;
        s.step = step;
        Ok(s)
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// One averaging step toward the current student parameters.
    pub fn update(&mut self, student: &ParamStore) -> Result<()> {
        self.shadow
            .check_compatible(student)
            .map_err(|e| Error::Shape(format!("EMA shadow drifted from student: {e}")))?;
        let d = self.decay;
        for (sh, st) in self.shadow.iter_mut().zip(student.iter()) {
            match sh.kind {
                Kind::Learnable => {
                    for (a, &b) in sh.value.data_mut().iter_mut().zip(st.value.data()) {
                        *a = d * *a + (1.0 - d) * b;
                    }
                }
                Kind::Buffer => sh.value.data_mut().copy_from_slice(st.value.data()),
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Evaluation-mode forward of `arch` with the shadow parameters. The
    /// outputs are plain values with no path back into any network.
    pub fn predict(&self, arch: &Network, x: &ImageBatch) -> Result<DualHeadOutput> {
        Ok(arch.forward_with(&self.shadow, x, Mode::Eval)?.output)
    }
}
