use std::path::Path;

use image::{ImageBuffer, Rgb};
use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use super::{cam_to_slice, slice_boxes, EvalSettings, LesionBox, SectionProfile};
use crate::data::{prepare_volume, Volume};
use crate::model::Model;
use crate::{sigmoid, Result, NUM_CLASSES, POSITIVE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceExplanation {
    pub index: usize,
    pub probability: f64,
    /// Positive-class boxes in slice pixels; empty unless the slice is
    /// predicted positive (or gating is off).
    pub boxes: Vec<LesionBox>,
}

/// Per-slice class maps on the stored slice grid, boxes and the section profile.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub patient_id: String,
    /// `maps[slice][class]`, same size as the raw slice.
    pub maps: Vec<[Array2<f64>; NUM_CLASSES]>,
    pub slices: Vec<SliceExplanation>,
    pub profile: SectionProfile,
}

pub fn explain_volume(model: &Model, volume: &Volume, settings: &EvalSettings) -> Result<Explanation> {
    let slices = prepare_volume(&volume.slices, None, settings.input_size)?;
    let out = model.predict_volume(&slices, settings.section_len, settings.k)?;
    let downsample = model.backbone.arch.downsample();
    let mut maps = Vec::with_capacity(volume.len());
    let mut explained = Vec::with_capacity(volume.len());
    for (i, (raw, s)) in volume.slices.iter().zip(&out.slices).enumerate() {
        let dims = raw.dim();
        let class_map = |c: usize| s.maps.index_axis(Axis(0), c).to_owned();
        maps.push(std::array::from_fn(|c| {
            cam_to_slice(&class_map(c), downsample, settings.input_size, dims)
        }));
        let probability = sigmoid(s.scores[POSITIVE]);
        let boxes = if !settings.gate_boxes || probability >= settings.threshold {
            slice_boxes(&class_map(POSITIVE), downsample, settings.input_size, dims, settings.box_threshold)
        } else {
            Vec::new()
        };
        explained.push(SliceExplanation {
            index: i,
            probability,
            boxes,
        });
    }
    Ok(Explanation {
        patient_id: volume.patient_id.clone(),
        maps,
        slices: explained,
        profile: SectionProfile::from_output(&out),
    })
}

/// Grey slice with the positive part of `cam` blended in red and `boxes`
/// outlined in green.
pub fn write_overlay_png(
    path: impl AsRef<Path>,
    slice: &Array2<f64>,
    cam: &Array2<f64>,
    boxes: &[LesionBox],
) -> Result<()> {
    let (h, w) = slice.dim();
    let lo = slice.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let peak = cam.iter().copied().fold(0.0, f64::max);
    let mut img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let g = (slice[[y, x]] - lo) / span;
        let a = if peak > 0.0 { 0.6 * (cam[[y, x]] / peak).clamp(0.0, 1.0) } else { 0.0 };
        let px = |v: f64| (255.0 * v).round().clamp(0.0, 255.0) as u8;
        Rgb([px(g + a * (1.0 - g)), px(g * (1.0 - a)), px(g * (1.0 - a))])
    });
    for b in boxes {
        let [x0, y0, x1, y1] = b.bbox;
        for x in x0..x1 {
            img.put_pixel(x as u32, y0 as u32, Rgb([0, 255, 0]));
            img.put_pixel(x as u32, (y1 - 1) as u32, Rgb([0, 255, 0]));
        }
        for y in y0..y1 {
            img.put_pixel(x0 as u32, y as u32, Rgb([0, 255, 0]));
            img.put_pixel((x1 - 1) as u32, y as u32, Rgb([0, 255, 0]));
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
