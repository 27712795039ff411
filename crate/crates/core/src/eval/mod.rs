//! Metrics, ROC/AUC, section profiles and CAM box extraction, plus a full
//! evaluation pass over a set of volumes.

mod boxes;
mod explain;
mod metrics;
mod roc;

pub use boxes::{cam_to_boxes, iou, localization_score, LesionBox, LocalizationScore};
pub use explain::{explain_volume, write_overlay_png, Explanation, SliceExplanation};
pub use metrics::{compute_metrics, MetricsReport};
pub use roc::{roc_auc, RocCurve};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{prepare_volume, GroundTruth, Volume};
use crate::model::{Model, VolumeOutput};
use crate::trainer::TrainerConfig;
use crate::{sigmoid, Error, Result, NEGATIVE, POSITIVE};

/// Per-section `(P(positive | S), P(negative | S))`, in section order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionProfile {
    pub sections: Vec<(f64, f64)>,
}

impl SectionProfile {
    pub fn from_output(out: &VolumeOutput) -> Self {
        Self {
            sections: out
                .sam
                .section_probabilities()
                .iter()
                .map(|p| (p.0[POSITIVE], p.0[NEGATIVE]))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    /// `section,p_positive,p_negative` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,p_positive,p_negative\n");
        for (i, (p, n)) in self.sections.iter().enumerate() {
            s.push_str(&format!("{i},{p},{n}\n"));
        }
        s
    }
}

/// Section probabilities of a raw volume, from the same pooling path used by
/// the classification loss.
pub fn section_profile(model: &Model, volume: &Volume, settings: &EvalSettings) -> Result<SectionProfile> {
    let slices = prepare_volume(&volume.slices, None, settings.input_size)?;
    let out = model.predict_volume(&slices, settings.section_len, settings.k)?;
    Ok(SectionProfile::from_output(&out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub section_len: usize,
    pub k: usize,
    pub input_size: usize,
    /// Decision threshold for accuracy-type metrics.
    pub threshold: f64,
    /// Relative CAM threshold for box extraction.
    pub box_threshold: f64,
    pub hit_iou: f64,
    /// Extract boxes only on slices predicted positive.
    pub gate_boxes: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self::from_config(&TrainerConfig::default())
    }
}

impl EvalSettings {
    pub fn from_config(c: &TrainerConfig) -> Self {
        Self {
            section_len: c.section_len,
            k: c.k,
            input_size: c.input_size(),
            threshold: 0.5,
            box_threshold: 0.5,
            hit_iou: 0.3,
            gate_boxes: true,
        }
    }
}

/// Per-patient outputs kept in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    pub patient_id: String,
    pub domain: String,
    pub label: u8,
    /// Patient-level P(positive).
    pub probability: f64,
    /// σ(s_positive) per slice.
    pub slice_probabilities: Vec<f64>,
    /// Probability of the section containing each slice.
    pub slice_section_probabilities: Vec<f64>,
    /// Noise-adapted P(noisy label positive) per slice; diagnostic only.
    pub slice_noisy_probabilities: Vec<f64>,
    pub profile: SectionProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub hit_iou: f64,
    pub gated: bool,
    /// Lesioned slices of positive patients that were predicted positive.
    pub true_positive_slices: usize,
    pub score: LocalizationScore,
    /// The same score over every lesioned slice, without gating.
    pub score_all_lesioned: LocalizationScore,
    pub negative_slices: usize,
    pub false_boxes: usize,
    pub mean_false_boxes: f64,
    /// False boxes per negative slice if every slice produced boxes.
    pub mean_false_boxes_ungated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub patient: MetricsReport,
    /// Slices scored by σ(s_positive) against the lesion flags.
    pub image: Option<MetricsReport>,
    /// Slices scored by their section's pooled probability.
    pub image_section_path: Option<MetricsReport>,
    pub localization: Option<LocalizationReport>,
    pub patients: Vec<PatientPrediction>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = self.patient.to_text("patient level");
        if let Some(m) = &self.image {
            s += &m.to_text("image level (slice head)");
        }
        if let Some(m) = &self.image_section_path {
            s += &m.to_text("image level (section path)");
        }
        if let Some(l) = &self.localization {
            s += &format!(
                "localization (IoU >= {})\n  hit rate     {:.4} over {} boxes on {} slices\n  mean IoU     {:.4}\n  ungated hit  {:.4}\n  false boxes  {:.4} per negative slice ({} slices), ungated {:.4}\n",
                l.hit_iou,
                l.score.hit_rate,
                l.score.boxes,
                l.true_positive_slices,
                l.score.mean_iou,
                l.score_all_lesioned.hit_rate,
                l.mean_false_boxes,
                l.negative_slices,
                l.mean_false_boxes_ungated
            );
        }
        s
    }

    pub fn patient_roc(&self) -> Result<RocCurve> {
        let (p, y): (Vec<f64>, Vec<u8>) = self.patients.iter().map(|p| (p.probability, p.label)).unzip();
        roc_auc(&p, &y)
    }
}

/// Bilinearly resamples a class map onto the stored slice grid.
///
/// With 3×3, padding-1 convolutions, feature cell `j` of a backbone with total
/// stride `downsample` is centred on network-input pixel `downsample · j`; the
/// network input is the slice resized to `input_size`.
pub fn cam_to_slice(map: &Array2<f64>, downsample: usize, input_size: usize, slice_dims: (usize, usize)) -> Array2<f64> {
    let (mh, mw) = map.dim();
    let (h, w) = slice_dims;
    let coord = |p: usize, n: usize, m: usize| {
        let q = (p as f64 + 0.5) * input_size as f64 / n as f64 - 0.5;
        let u = (q / downsample as f64).clamp(0.0, (m - 1) as f64);
        let i0 = u.floor() as usize;
        (i0, (i0 + 1).min(m - 1), u - i0 as f64)
    };
    let xs: Vec<_> = (0..w).map(|x| coord(x, w, mw)).collect();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y0, y1, fy) = coord(y, h, mh);
        let (x0, x1, fx) = xs[x];
        let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
        let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Boxes of a positive-class map in slice pixel coordinates.
pub fn slice_boxes(
    map: &Array2<f64>,
    downsample: usize,
    input_size: usize,
    slice_dims: (usize, usize),
    rel_threshold: f64,
) -> Vec<LesionBox> {
    let up = cam_to_slice(map, downsample, input_size, slice_dims);
    boxes::boxes_from_array(&up, POSITIVE, rel_threshold)
}

struct LocalizationTally {
    tp_slices: usize,
    hits_all: (usize, usize, f64),
    hits: (usize, usize, f64),
    negative_slices: usize,
    false_boxes: usize,
    false_boxes_ungated: usize,
}

fn accumulate(acc: &mut (usize, usize, f64), s: LocalizationScore) {
    acc.0 += s.boxes;
    acc.1 += s.hits;
    acc.2 += s.mean_iou * s.boxes as f64;
}

fn finish(acc: (usize, usize, f64)) -> LocalizationScore {
    let n = acc.0;
    LocalizationScore {
        boxes: n,
        hits: acc.1,
        mean_iou: if n == 0 { 0.0 } else { acc.2 / n as f64 },
        hit_rate: if n == 0 { 0.0 } else { acc.1 as f64 / n as f64 },
    }
}

/// Runs the model over every volume (no augmentation) and scores patient-level
/// metrics and, when ground truth is available, slice-level metrics and
/// localization.
pub fn evaluate(
    model: &Model,
    volumes: &[Volume],
    truth: Option<&GroundTruth>,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let mut patients = Vec::new();
    let mut slice_scores = Vec::new();
    let mut section_scores = Vec::new();
    let mut slice_labels = Vec::new();
    let mut tally = LocalizationTally {
        tp_slices: 0,
        hits_all: (0, 0, 0.0),
        hits: (0, 0, 0.0),
        negative_slices: 0,
        false_boxes: 0,
        false_boxes_ungated: 0,
    };
    let downsample = model.backbone.arch.downsample();
    for v in volumes {
        if v.is_empty() {
            log::warn!("skipping patient `{}`: empty volume", v.patient_id);
            continue;
        }
        let slices = prepare_volume(&v.slices, None, settings.input_size)?;
        let out = model.predict_volume(&slices, settings.section_len, settings.k)?;
        let profile = SectionProfile::from_output(&out);
        let slice_p: Vec<f64> = out.slices.iter().map(|s| sigmoid(s.scores[POSITIVE])).collect();
        let section_p: Vec<f64> = (0..v.len())
            .map(|i| profile.sections[out.sam.partition.section_of(i).expect("covered")].0)
            .collect();
        let noisy_p: Vec<f64> = out
            .transitions
            .iter()
            .zip(&slice_p)
            .map(|(q, &p)| {
                let q = &q[POSITIVE].q;
                q[1][0] * (1.0 - p) + q[1][1] * p
            })
            .collect();

        if let Some(gt) = truth {
            let pt = gt
                .patient(&v.patient_id)
                .ok_or_else(|| Error::invalid(format!("no ground truth for patient `{}`", v.patient_id)))?;
            if pt.slices.len() != v.len() {
                return Err(Error::shape(format!(
                    "ground truth for `{}` has {} slices, volume has {}",
                    v.patient_id,
                    pt.slices.len(),
                    v.len()
                )));
            }
            let dims = v.slices[0].dim();
            for (i, st) in pt.slices.iter().enumerate() {
                slice_labels.push(u8::from(st.lesion));
                let predicted_positive = slice_p[i] >= settings.threshold;
                let needs_boxes = st.lesion || v.label == 0;
                if !needs_boxes {
                    continue;
                }
                let map = out.slices[i].maps.index_axis(ndarray::Axis(0), POSITIVE).to_owned();
                let found: Vec<[usize; 4]> = slice_boxes(&map, downsample, settings.input_size, dims, settings.box_threshold)
                    .into_iter()
                    .map(|b| b.bbox)
                    .collect();
                let emitted = !settings.gate_boxes || predicted_positive;
                if st.lesion && v.label == 1 {
                    accumulate(&mut tally.hits_all, localization_score(&found, &st.boxes, settings.hit_iou));
                    if predicted_positive {
                        tally.tp_slices += 1;
                        accumulate(&mut tally.hits, localization_score(&found, &st.boxes, settings.hit_iou));
                    }
                } else if v.label == 0 && !st.lesion {
                    tally.negative_slices += 1;
                    tally.false_boxes_ungated += found.len();
                    if emitted {
                        tally.false_boxes += found.len();
                    }
                }
            }
            slice_scores.extend(&slice_p);
            section_scores.extend(&section_p);
        }

        patients.push(PatientPrediction {
            patient_id: v.patient_id.clone(),
            domain: v.domain.clone(),
            label: v.label,
            probability: out.patient.0[POSITIVE],
            slice_probabilities: slice_p,
            slice_section_probabilities: section_p,
            slice_noisy_probabilities: noisy_p,
            profile,
        });
    }
    if patients.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let (p, y): (Vec<f64>, Vec<u8>) = patients.iter().map(|p| (p.probability, p.label)).unzip();
    let patient = compute_metrics(&p, &y, settings.threshold)?;
    let (image, image_section_path, localization) = if truth.is_some() {
        let neg = tally.negative_slices;
        (
            Some(compute_metrics(&slice_scores, &slice_labels, settings.threshold)?),
            Some(compute_metrics(&section_scores, &slice_labels, settings.threshold)?),
            Some(LocalizationReport {
                hit_iou: settings.hit_iou,
                gated: settings.gate_boxes,
                true_positive_slices: tally.tp_slices,
                score: finish(tally.hits),
                score_all_lesioned: finish(tally.hits_all),
                negative_slices: neg,
                false_boxes: tally.false_boxes,
                mean_false_boxes: if neg == 0 { 0.0 } else { tally.false_boxes as f64 / neg as f64 },
                mean_false_boxes_ungated: if neg == 0 {
                    0.0
                } else {
                    tally.false_boxes_ungated as f64 / neg as f64
                },
            }),
        )
    } else {
        (None, None, None)
    };
    Ok(EvalReport {
        patient,
        image,
        image_section_path,
        localization,
        patients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_volumes, SyntheticSpec};
    use crate::model::BackboneArch;

    fn settings() -> EvalSettings {
        EvalSettings {
            section_len: 4,
            k: 2,
            input_size: 32,
            ..EvalSettings::default()
        }
    }

    #[test]
    fn report_has_both_levels_and_profile_lengths() {
        let spec = SyntheticSpec {
            patients: 4,
            volume_length: (10, 14),
            lesion_run: (3, 6),
            ..SyntheticSpec::default()
        };
        let generated = generate_volumes(&spec).unwrap();
        let volumes: Vec<Volume> = generated.iter().map(|g| g.volume.clone()).collect();
        let truth = GroundTruth::new(generated.iter().map(|g| g.truth.clone()).collect());
        let model = Model::init(BackboneArch::from_id("tiny-cnn-desk").unwrap(), 4);
        let r = evaluate(&model, &volumes, Some(&truth), &settings()).unwrap();
        assert!(r.image.is_some() && r.image_section_path.is_some() && r.localization.is_some());
        assert_eq!(r.patients.len(), 4);
        for (p, v) in r.patients.iter().zip(&volumes) {
            let count = crate::sam::partition_sections(v.len(), 4).unwrap().len();
            assert_eq!(p.profile.len(), count);
            assert_eq!(p.slice_probabilities.len(), v.len());
            let direct = section_profile(&model, v, &settings()).unwrap();
            assert_eq!(direct, p.profile);
        }
        let again = evaluate(&model, &volumes, Some(&truth), &settings()).unwrap();
        assert_eq!(r, again);
        let text = r.to_text();
        assert!(text.contains("patient level") && text.contains("image level"));
    }

    #[test]
    fn missing_truth_is_an_error() {
        let spec = SyntheticSpec {
            patients: 2,
            volume_length: (8, 8),
            lesion_run: (3, 4),
            ..SyntheticSpec::default()
        };
        let generated = generate_volumes(&spec).unwrap();
        let volumes: Vec<Volume> = generated.iter().map(|g| g.volume.clone()).collect();
        let model = Model::init(BackboneArch::from_id("tiny-cnn-desk").unwrap(), 4);
        let empty = GroundTruth::new(Vec::new());
        assert!(evaluate(&model, &volumes, Some(&empty), &settings()).is_err());
        assert!(evaluate(&model, &volumes, None, &settings()).unwrap().image.is_none());
    }

    #[test]
    fn cam_cells_land_on_their_centres() {
        // one hot cell at (2, 5) of an 8×8 map with stride 4 peaks at pixel (8, 20)
        let mut m = Array2::zeros((8, 8));
        m[[2, 5]] = 1.0;
        let up = cam_to_slice(&m, 4, 32, (32, 32));
        assert_eq!(up[[8, 20]], 1.0);
        assert!(up[[9, 21]] < 1.0);
        // a slice stored at twice the input resolution
        let up = cam_to_slice(&m, 4, 32, (64, 64));
        let (mut best, mut at) = (0.0, (0, 0));
        for ((y, x), &v) in up.indexed_iter() {
            if v > best {
                best = v;
                at = (y, x);
            }
        }
        assert!((at.0 as f64 - 16.5).abs() <= 1.0 && (at.1 as f64 - 40.5).abs() <= 1.0, "{at:?}");
    }

    #[test]
    fn profile_follows_section_block_reordering() {
        let spec = SyntheticSpec {
            patients: 2,
            volume_length: (12, 12),
            lesion_run: (3, 4),
            ..SyntheticSpec::default()
        };
        let v = generate_volumes(&spec).unwrap().remove(1).volume;
        let model = Model::init(BackboneArch::from_id("tiny-cnn-desk").unwrap(), 6);
        let order = [2usize, 0, 1];
        let mut shuffled = v.clone();
        shuffled.slices = order.iter().flat_map(|&b| v.slices[4 * b..4 * b + 4].to_vec()).collect();
        let a = section_profile(&model, &v, &settings()).unwrap();
        let b = section_profile(&model, &shuffled, &settings()).unwrap();
        for (i, &src) in order.iter().enumerate() {
            assert!((b.sections[i].0 - a.sections[src].0).abs() < 1e-12);
            assert!((b.sections[i].1 - a.sections[src].1).abs() < 1e-12);
        }
    }

    #[test]
    fn profile_csv_has_one_row_per_section() {
        let p = SectionProfile {
            sections: vec![(0.9, 0.1), (0.2, 0.8)],
        };
        assert_eq!(p.to_csv().lines().count(), 3);
    }
}
