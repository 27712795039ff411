//! Preprocessing: per-volume z-score, then (training only) a random crop,
//! horizontal flip and brightness/contrast jitter, and a bilinear resize to the
//! network input size.
//!
//! Random parameters are drawn once per volume, so every slice of a volume
//! shares the same crop window, flip decision and intensity factors.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sides smaller than this are upscaled before cropping.
const MIN_SIDE: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub flip_probability: f64,
    pub aspect_ratio: (f64, f64),
    pub crop_area: (f64, f64),
    pub output_size: usize,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_probability: 0.5,
            aspect_ratio: (3.0 / 4.0, 4.0 / 3.0),
            crop_area: (0.90, 1.00),
            output_size: 224,
            brightness: (0.9, 1.1),
            contrast: (0.9, 1.1),
        }
    }
}

impl AugmentationConfig {
    /// No randomness: full-frame crop, no flip, unit factors.
    pub fn identity(output_size: usize) -> Self {
        Self {
            flip_probability: 0.0,
            aspect_ratio: (1.0, 1.0),
            crop_area: (1.0, 1.0),
            output_size,
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a > 0.0 && a <= b;
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::invalid("flip probability must lie in [0, 1]"));
        }
        if !ordered(self.aspect_ratio) || !ordered(self.brightness) || !ordered(self.contrast) {
            return Err(Error::invalid("augmentation ranges must be positive and ordered"));
        }
        if !ordered(self.crop_area) || self.crop_area.1 > 1.0 {
            return Err(Error::invalid("crop area range must lie in (0, 1]"));
        }
        if self.output_size == 0 {
            return Err(Error::invalid("output size must be positive"));
        }
        Ok(())
    }

    fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
        if lo == hi {
            lo
        } else {
            rng.gen_range(lo..hi)
        }
    }

    /// Draws one set of volume-level augmentation parameters for an `h × w` slice.
    pub fn sample<R: Rng>(&self, h: usize, w: usize, rng: &mut R) -> VolumeAugmentation {
        let area = (h * w) as f64;
        let mut crop = (0.0, 0.0, w as f64, h as f64);
        for _ in 0..10 {
            let target = area * Self::uniform(rng, self.crop_area);
            let (la, lb) = (self.aspect_ratio.0.ln(), self.aspect_ratio.1.ln());
            let ratio = Self::uniform(rng, (la, lb)).exp();
            let cw = (target * ratio).sqrt();
            let ch = (target / ratio).sqrt();
            if cw <= w as f64 && ch <= h as f64 {
                let x0 = Self::uniform(rng, (0.0, w as f64 - cw));
                let y0 = Self::uniform(rng, (0.0, h as f64 - ch));
                crop = (x0, y0, cw, ch);
                break;
            }
        }
        VolumeAugmentation {
            crop,
            flip: rng.gen::<f64>() < self.flip_probability,
            brightness: Self::uniform(rng, self.brightness),
            contrast: Self::uniform(rng, self.contrast),
        }
    }
}

/// Augmentation parameters shared by every slice of one volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeAugmentation {
    /// `(x0, y0, width, height)` in input pixels.
    pub crop: (f64, f64, f64, f64),
    pub flip: bool,
    pub brightness: f64,
    pub contrast: f64,
}

impl VolumeAugmentation {
    pub fn apply(&self, slice: &Array2<f64>, output_size: usize) -> Array2<f64> {
        let (x0, y0, cw, ch) = self.crop;
        let mut out = resample(slice, (x0, y0, cw, ch), output_size, output_size);
        if self.flip {
            out.invert_axis(ndarray::Axis(1));
            out = out.as_standard_layout().into_owned();
        }
        if self.brightness != 1.0 {
            out.mapv_inplace(|v| v * self.brightness);
        }
        if self.contrast != 1.0 {
            let mean = out.mean().unwrap_or(0.0);
            out.mapv_inplace(|v| mean + (v - mean) * self.contrast);
        }
        out
    }
}

/// Bilinear sampling of the window `(x0, y0, w, h)` onto an `oh × ow` grid,
/// aligning pixel centres. Edges are clamped.
fn resample(src: &Array2<f64>, (x0, y0, cw, ch): (f64, f64, f64, f64), oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let sx = cw / ow as f64;
    let sy = ch / oh as f64;
    let coord = |o: usize, start: f64, scale: f64, n: usize| {
        let c = (start + (o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = c.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, c - i0 as f64)
    };
    let xs: Vec<_> = (0..ow).map(|o| coord(o, x0, sx, w)).collect();
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let (y0i, y1i, fy) = coord(oy, y0, sy, h);
        let (x0i, x1i, fx) = xs[ox];
        let top = src[[y0i, x0i]] * (1.0 - fx) + src[[y0i, x1i]] * fx;
        let bottom = src[[y1i, x0i]] * (1.0 - fx) + src[[y1i, x1i]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

pub fn resize_bilinear(slice: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = slice.dim();
    if (h, w) == (oh, ow) {
        return slice.clone();
    }
    resample(slice, (0.0, 0.0, w as f64, h as f64), oh, ow)
}

fn upscale_if_degenerate(slice: &Array2<f64>, output_size: usize) -> Array2<f64> {
    let (h, w) = slice.dim();
    if h < MIN_SIDE || w < MIN_SIDE {
        log::warn!("slice of {h}×{w} is smaller than the minimal crop; upscaling before cropping");
        resize_bilinear(slice, output_size.max(MIN_SIDE), output_size.max(MIN_SIDE))
    } else {
        slice.clone()
    }
}

/// Augments a single slice with parameters drawn from `seed`.
pub fn augment(slice: &Array2<f64>, config: &AugmentationConfig, seed: u64) -> Result<Array2<f64>> {
    config.validate()?;
    if slice.is_empty() {
        return Err(Error::shape("empty slice"));
    }
    let slice = upscale_if_degenerate(slice, config.output_size);
    let (h, w) = slice.dim();
    let params = config.sample(h, w, &mut ChaCha8Rng::seed_from_u64(seed));
    Ok(params.apply(&slice, config.output_size))
}

/// Z-scores a volume in place using the mean and standard deviation of all its
/// pixels. A constant volume is only centred (its deviation is zero).
pub fn zscore_volume(slices: &mut [Array2<f64>]) -> Result<()> {
    let count: usize = slices.iter().map(|s| s.len()).sum();
    if count == 0 {
        return Err(Error::EmptyVolume);
    }
    let mean = slices.iter().map(|s| s.sum()).sum::<f64>() / count as f64;
    let var = slices
        .iter()
        .map(|s| s.iter().map(|v| (v - mean).powi(2)).sum::<f64>())
        .sum::<f64>()
        / count as f64;
    let std = var.sqrt();
    let scale = if std > 0.0 {
        1.0 / std
    } else {
        log::warn!("constant volume; z-score leaves it centred at zero");
        1.0
    };
    for s in slices.iter_mut() {
        s.mapv_inplace(|v| (v - mean) * scale);
    }
    Ok(())
}

/// Full preprocessing of one volume: z-score, then either augmentation (when
/// `augmentation` is given) or a plain resize to `output_size`.
pub fn prepare_volume(
    raw: &[Array2<f64>],
    augmentation: Option<(&AugmentationConfig, u64)>,
    output_size: usize,
) -> Result<Vec<Array2<f64>>> {
    let mut slices = raw.to_vec();
    zscore_volume(&mut slices)?;
    augment_normalized(&slices, augmentation, output_size)
}

/// Like [`prepare_volume`] for a volume that is already z-scored.
pub(crate) fn augment_normalized(
    slices: &[Array2<f64>],
    augmentation: Option<(&AugmentationConfig, u64)>,
    output_size: usize,
) -> Result<Vec<Array2<f64>>> {
    match augmentation {
        None => Ok(slices
            .iter()
            .map(|s| resize_bilinear(s, output_size, output_size))
            .collect()),
        Some((config, seed)) => {
            config.validate()?;
            let first = upscale_if_degenerate(&slices[0], output_size);
            let (h, w) = first.dim();
            let params = config.sample(h, w, &mut ChaCha8Rng::seed_from_u64(seed));
            Ok(slices
                .iter()
                .map(|s| params.apply(&upscale_if_degenerate(s, output_size), output_size))
                .collect())
        }
    }
}
