use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::model::ActivationMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionBox {
    pub class_index: usize,
    /// Half-open `[x0, y0, x1, y1]` in map pixel coordinates.
    pub bbox: [usize; 4],
    pub peak: f64,
}

/// Boxes around 4-connected regions where the map reaches `rel_threshold`
/// of its maximum, strongest region first.
pub fn cam_to_boxes(map: &ActivationMap, rel_threshold: f64) -> Vec<LesionBox> {
    boxes_from_array(&map.map, map.class_index, rel_threshold)
}

pub(crate) fn boxes_from_array(map: &Array2<f64>, class_index: usize, rel_threshold: f64) -> Vec<LesionBox> {
    let max = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Vec::new();
    }
    let cut = rel_threshold * max;
    let (h, w) = map.dim();
    let on = map.mapv(|v| v >= cut);
    let mut seen = Array2::from_elem((h, w), false);
    let mut boxes = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !on[[y, x]] || seen[[y, x]] {
                continue;
            }
            let (mut x0, mut y0, mut x1, mut y1) = (x, y, x + 1, y + 1);
            let mut peak = f64::NEG_INFINITY;
            seen[[y, x]] = true;
            stack.push((y, x));
            while let Some((cy, cx)) = stack.pop() {
                peak = peak.max(map[[cy, cx]]);
                x0 = x0.min(cx);
                y0 = y0.min(cy);
                x1 = x1.max(cx + 1);
                y1 = y1.max(cy + 1);
                let mut visit = |ny: usize, nx: usize| {
                    if on[[ny, nx]] && !seen[[ny, nx]] {
                        seen[[ny, nx]] = true;
                        stack.push((ny, nx));
                    }
                };
                if cy > 0 {
                    visit(cy - 1, cx);
                }
                if cy + 1 < h {
                    visit(cy + 1, cx);
                }
                if cx > 0 {
                    visit(cy, cx - 1);
                }
                if cx + 1 < w {
                    visit(cy, cx + 1);
                }
            }
            boxes.push(LesionBox {
                class_index,
                bbox: [x0, y0, x1, y1],
                peak,
            });
        }
    }
    boxes.sort_by(|a, b| b.peak.total_cmp(&a.peak));
    boxes
}

/// Intersection over union of half-open boxes.
pub fn iou(a: &[usize; 4], b: &[usize; 4]) -> f64 {
    let area = |r: &[usize; 4]| r[2].saturating_sub(r[0]) * r[3].saturating_sub(r[1]);
    let ix = a[2].min(b[2]).saturating_sub(a[0].max(b[0]));
    let iy = a[3].min(b[3]).saturating_sub(a[1].max(b[1]));
    let inter = ix * iy;
    let union = area(a) + area(b) - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalizationScore {
    /// Ground-truth boxes scored.
    pub boxes: usize,
    pub hits: usize,
    pub mean_iou: f64,
    pub hit_rate: f64,
}

/// Each ground-truth box is matched to its best-overlapping prediction; a hit
/// is IoU ≥ `hit_iou`. An empty ground truth scores zero boxes.
pub fn localization_score(predicted: &[[usize; 4]], truth: &[[usize; 4]], hit_iou: f64) -> LocalizationScore {
    let best: Vec<f64> = truth
        .iter()
        .map(|t| predicted.iter().map(|p| iou(p, t)).fold(0.0, f64::max))
        .collect();
    let hits = best.iter().filter(|&&v| v >= hit_iou).count();
    let n = best.len();
    LocalizationScore {
        boxes: n,
        hits,
        mean_iou: if n == 0 { 0.0 } else { best.iter().sum::<f64>() / n as f64 },
        hit_rate: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
    }
}
