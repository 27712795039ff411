//! Patient volumes: manifests on disk, the synthetic multi-domain generator,
//! ground-truth sidecars and preprocessing/augmentation.

mod augment;
mod manifest;
mod synthetic;
mod truth;

pub(crate) use augment::augment_normalized;
pub use augment::{
    augment, prepare_volume, resize_bilinear, zscore_volume, AugmentationConfig, VolumeAugmentation,
};
pub use manifest::{
    load_dataset, load_volume, load_volumes, read_slice_png, write_manifest, write_slice_png, PatientRecord,
    INTENSITY_SCALE, MANIFEST_FORMAT, MANIFEST_VERSION,
};
pub use synthetic::{
    checksum_dir, generate_synthetic, generate_volumes, DomainParams, LesionPlacement, SyntheticSpec,
    SyntheticVolume,
};
pub use truth::{GroundTruth, PatientTruth, SliceTruth, TRUTH_FORMAT, TRUTH_VERSION};

use ndarray::Array2;

/// A patient's slice stack in raw intensity units, in anatomical order.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub patient_id: String,
    pub label: u8,
    pub domain: String,
    pub slices: Vec<Array2<f64>>,
}

impl Volume {
    pub fn len(&self) -> usize {
        self.slices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Keeps volumes whose domain is (or is not, with `exclude`) in `domains`.
pub fn filter_domains(volumes: Vec<Volume>, domains: &[String], exclude: bool) -> Vec<Volume> {
    volumes
        .into_iter()
        .filter(|v| domains.iter().any(|d| d == &v.domain) != exclude)
        .collect()
}
