use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const TRUTH_FORMAT: &str = "slicemil-ground-truth";
pub const TRUTH_VERSION: u32 = 1;

/// Per-slice lesion annotations for a generated dataset.
///
/// Boxes are half-open pixel rectangles `[x0, y0, x1, y1]` in the coordinates
/// of the stored slice image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub format: String,
    pub version: u32,
    pub patients: Vec<PatientTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTruth {
    pub patient_id: String,
    pub label: u8,
    pub domain: String,
    pub slices: Vec<SliceTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceTruth {
    pub lesion: bool,
    pub boxes: Vec<[usize; 4]>,
}

impl GroundTruth {
    pub fn new(patients: Vec<PatientTruth>) -> Self {
        Self {
            format: TRUTH_FORMAT.to_string(),
            version: TRUTH_VERSION,
            patients,
        }
    }

    pub fn patient(&self, id: &str) -> Option<&PatientTruth> {
        self.patients.iter().find(|p| p.patient_id == id)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let truth: GroundTruth = serde_json::from_str(&fs::read_to_string(path)?)?;
        if truth.format != TRUTH_FORMAT || truth.version != TRUTH_VERSION {
            return Err(Error::invalid(format!(
                "unsupported ground truth {} v{}",
                truth.format, truth.version
            )));
        }
        Ok(truth)
    }
}

impl PatientTruth {
    /// Maximal runs of consecutive lesioned slices, as `start..end`.
    pub fn lesion_runs(&self) -> Vec<std::ops::Range<usize>> {
        let mut runs = Vec::new();
        let mut start = None;
        for (i, s) in self.slices.iter().enumerate() {
            match (s.lesion, start) {
                (true, None) => start = Some(i),
                (false, Some(s0)) => {
                    runs.push(s0..i);
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s0) = start {
            runs.push(s0..self.slices.len());
        }
        runs
    }
}
