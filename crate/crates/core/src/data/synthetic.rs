//! Synthetic chest-like slice stacks with controllable per-domain intensity shift.
//!
//! Each slice shows a body ellipse with two darker lung fields whose size
//! varies smoothly along the stack. Positive patients carry one or more
//! lesions: a Gaussian blob inside a lung that persists over a contiguous run
//! of slices. Isolated tiny bright dots ("distractors") appear in both classes.
//! A domain maps the clean rendering through `offset + gain · v^gamma` and adds
//! Gaussian noise, which mimics scanner-dependent brightness and contrast.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::manifest::{write_manifest, write_slice_png, PatientRecord};
use super::truth::{GroundTruth, PatientTruth, SliceTruth};
use super::Volume;
use crate::{derive_seed, Error, Result};

/// Lesion pixels are those where the blob reaches this fraction of its peak.
const MASK_FRACTION: f64 = 0.2;
const BACKGROUND: f64 = 0.1;
const BODY: f64 = 0.55;
const LUNG: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    pub name: String,
    pub offset: f64,
    pub gain: f64,
    pub noise: f64,
    /// Exponent applied to the clean intensities; changes the histogram shape.
    pub gamma: f64,
}

impl DomainParams {
    /// Built-in domain `i`, named `A`, `B`, ... .
    pub fn preset(i: usize) -> Self {
        let name = domain_name(i);
        let (offset, gain, noise, gamma) = match i {
            0 => (0.0, 1.0, 0.04, 1.0),
            1 => (0.4, 1.15, 0.05, 0.9),
            2 => (-0.05, 0.85, 0.03, 1.15),
            3 => (0.25, 1.3, 0.06, 0.8),
            _ => (
                0.1 * (i % 5) as f64,
                0.8 + 0.1 * (i % 6) as f64,
                0.03 + 0.01 * (i % 4) as f64,
                0.85 + 0.05 * (i % 5) as f64,
            ),
        };
        Self {
            name,
            offset,
            gain,
            noise,
            gamma,
        }
    }

    fn apply(&self, clean: f64, noise: f64) -> f64 {
        self.offset + self.gain * clean.max(0.0).powf(self.gamma) + self.noise * noise
    }
}

fn domain_name(i: usize) -> String {
    let mut name = String::new();
    let mut n = i;
    loop {
        name.insert(0, (b'A' + (n % 26) as u8) as char);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    name
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionPlacement {
    /// Lesion runs start anywhere in the stack.
    Uniform,
    /// Runs lie in the first half of the stack.
    Upper,
    /// Runs lie in the second half of the stack.
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    /// Total patients, assigned to domains round-robin.
    pub patients: usize,
    pub domains: Vec<DomainParams>,
    pub positive_fraction: f64,
    /// Inclusive slice-count range.
    pub volume_length: (usize, usize),
    pub slice_size: usize,
    /// Inclusive lesion-count range for positive patients.
    pub lesion_count: (usize, usize),
    /// Inclusive range of consecutive slices a lesion spans.
    pub lesion_run: (usize, usize),
    /// Blob standard deviation as a fraction of the slice size.
    pub lesion_sigma: (f64, f64),
    /// Peak added intensity.
    pub lesion_intensity: (f64, f64),
    pub placement: LesionPlacement,
    /// Per-slice probability of a distractor dot.
    pub distractor_rate: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            patients: 40,
            domains: (0..3).map(DomainParams::preset).collect(),
            positive_fraction: 0.5,
            volume_length: (32, 48),
            slice_size: 32,
            lesion_count: (1, 2),
            lesion_run: (6, 14),
            lesion_sigma: (0.10, 0.14),
            lesion_intensity: (0.3, 0.5),
            placement: LesionPlacement::Uniform,
            distractor_rate: 0.05,
        }
    }
}

impl SyntheticSpec {
    pub fn with_preset_domains(mut self, count: usize) -> Self {
        self.domains = (0..count).map(DomainParams::preset).collect();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ordered_usize = |(a, b): (usize, usize), what: &str| {
            if a == 0 || a > b {
                Err(Error::invalid(format!("{what} range {a}..={b} must be positive and ordered")))
            } else {
                Ok(())
            }
        };
        let ordered_f64 = |(a, b): (f64, f64), what: &str| {
            if !(a.is_finite() && b.is_finite()) || a <= 0.0 || a > b {
                Err(Error::invalid(format!("{what} range {a}..={b} must be positive and ordered")))
            } else {
                Ok(())
            }
        };
        if self.patients == 0 {
            return Err(Error::invalid("at least one patient is required"));
        }
        if self.domains.is_empty() {
            return Err(Error::invalid("at least one domain is required"));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(Error::invalid("positive fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) {
            return Err(Error::invalid("distractor rate must lie in [0, 1]"));
        }
        ordered_usize(self.volume_length, "volume length")?;
        ordered_usize(self.lesion_count, "lesion count")?;
        ordered_usize(self.lesion_run, "lesion run")?;
        ordered_f64(self.lesion_sigma, "lesion sigma")?;
        ordered_f64(self.lesion_intensity, "lesion intensity")?;
        if self.slice_size < 8 {
            return Err(Error::invalid("slice size must be at least 8 pixels"));
        }
        if self.lesion_run.1 > self.volume_length.0 {
            return Err(Error::invalid(format!(
                "lesion runs of up to {} slices do not fit volumes of {} slices",
                self.lesion_run.1, self.volume_length.0
            )));
        }
        // a lesion's ±2σ footprint has to fit inside the slice
        if 4.0 * self.lesion_sigma.1 >= 1.0 {
            return Err(Error::invalid(format!(
                "lesion sigma {} (fraction of the slice) makes lesions larger than the slice",
                self.lesion_sigma.1
            )));
        }
        for d in &self.domains {
            if !(d.offset.is_finite() && d.gain > 0.0 && d.noise >= 0.0 && d.gamma > 0.0) {
                return Err(Error::invalid(format!("domain `{}` has invalid parameters", d.name)));
            }
        }
        Ok(())
    }

    fn label_for(&self, position_in_domain: usize) -> u8 {
        // spreads positives evenly through each domain's patient list
        let f = self.positive_fraction;
        let j = position_in_domain as f64;
        u8::from(((j + 1.0) * f).floor() > (j * f).floor())
    }
}

/// One generated patient with its annotations and per-slice lesion masks.
#[derive(Debug, Clone)]
pub struct SyntheticVolume {
    pub volume: Volume,
    pub truth: PatientTruth,
    pub masks: Vec<Array2<bool>>,
    /// The same volume rendered without lesions (identical noise).
    pub lesion_free: Vec<Array2<f64>>,
}

struct Lesion {
    start: usize,
    len: usize,
    cx: f64,
    cy: f64,
    sigma: f64,
    amplitude: f64,
}

impl Lesion {
    fn profile(&self, slice: usize) -> Option<(f64, f64)> {
        if slice < self.start || slice >= self.start + self.len {
            return None;
        }
        let t = (slice - self.start) as f64 + 0.5;
        let shape = (std::f64::consts::PI * t / self.len as f64).sin();
        Some((self.amplitude * (0.6 + 0.4 * shape), self.sigma * (0.8 + 0.2 * shape)))
    }
}

struct Anatomy {
    lung_scale: f64,
    texture_phase: (f64, f64),
}

fn uniform_f(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

fn uniform_u(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.gen_range(lo..=hi)
}

fn lung_geometry(size: f64, z: f64, anatomy: &Anatomy) -> [(f64, f64, f64, f64); 2] {
    let r = anatomy.lung_scale * (0.75 + 0.25 * (std::f64::consts::PI * z).sin());
    let (rx, ry) = (0.15 * size * r, 0.28 * size * r);
    [
        (0.5 * size - 0.2 * size, 0.5 * size, rx, ry),
        (0.5 * size + 0.2 * size, 0.5 * size, rx, ry),
    ]
}

fn inside((cx, cy, rx, ry): (f64, f64, f64, f64), x: f64, y: f64) -> bool {
    let dx = (x - cx) / rx;
    let dy = (y - cy) / ry;
    dx * dx + dy * dy <= 1.0
}

fn clean_pixel(size: f64, x: f64, y: f64, z: f64, anatomy: &Anatomy) -> f64 {
    let body = (0.5 * size, 0.5 * size, 0.46 * size, 0.40 * size);
    if !inside(body, x, y) {
        return BACKGROUND;
    }
    let lungs = lung_geometry(size, z, anatomy);
    if lungs.iter().any(|&l| inside(l, x, y)) {
        let (px, py) = anatomy.texture_phase;
        LUNG + 0.03 * ((x / size * 9.0 + px).sin() * (y / size * 7.0 + py).cos())
    } else {
        BODY
    }
}

fn generate_patient(spec: &SyntheticSpec, index: usize) -> SyntheticVolume {
    let domain_index = index % spec.domains.len();
    let domain = &spec.domains[domain_index];
    let label = spec.label_for(index / spec.domains.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, 0x5EED, index as u64]));
    let size = spec.slice_size;
    let sf = size as f64;
    let n = uniform_u(&mut rng, spec.volume_length);
    let anatomy = Anatomy {
        lung_scale: rng.gen_range(0.9..1.1),
        texture_phase: (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU)),
    };

    let mut lesions = Vec::new();
    if label == 1 {
        for _ in 0..uniform_u(&mut rng, spec.lesion_count) {
            let len = uniform_u(&mut rng, spec.lesion_run).min(n);
            let (lo, hi) = match spec.placement {
                LesionPlacement::Uniform => (0, n - len),
                LesionPlacement::Upper => (0, (n / 2).saturating_sub(len)),
                LesionPlacement::Lower => ((n / 2).min(n - len), n - len),
            };
            let start = rng.gen_range(lo..=hi.max(lo));
            let z = (start as f64 + len as f64 / 2.0) / n as f64;
            let lung = lung_geometry(sf, z, &anatomy)[rng.gen_range(0..2)];
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let radius = rng.gen_range(0.0..0.55);
            lesions.push(Lesion {
                start,
                len,
                cx: lung.0 + radius * lung.2 * angle.cos(),
                cy: lung.1 + radius * lung.3 * angle.sin(),
                sigma: uniform_f(&mut rng, spec.lesion_sigma) * sf,
                amplitude: uniform_f(&mut rng, spec.lesion_intensity),
            });
        }
    }

    let mut slices = Vec::with_capacity(n);
    let mut lesion_free = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut truth_slices = Vec::with_capacity(n);
    for s in 0..n {
        let z = if n > 1 { s as f64 / (n - 1) as f64 } else { 0.5 };
        // drawn for every slice so streams do not depend on earlier outcomes
        let dot_roll: f64 = rng.gen();
        let dot_lung = lung_geometry(sf, z, &anatomy)[rng.gen_range(0..2)];
        let (da, dr) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..0.8));
        let dot = (dot_roll < spec.distractor_rate)
            .then(|| (dot_lung.0 + dr * dot_lung.2 * da.cos(), dot_lung.1 + dr * dot_lung.3 * da.sin()));

        let active: Vec<(f64, f64, f64, f64)> = lesions
            .iter()
            .filter_map(|l| l.profile(s).map(|(a, sg)| (l.cx, l.cy, a, sg)))
            .collect();
        let mut img = Array2::zeros((size, size));
        let mut free = Array2::zeros((size, size));
        let mut mask = Array2::from_elem((size, size), false);
        let mut boxes = Vec::new();
        let mut lesion_boxes: Vec<Option<[usize; 4]>> = vec![None; active.len()];
        for y in 0..size {
            for x in 0..size {
                let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut v = clean_pixel(sf, fx, fy, z, &anatomy);
                if let Some((dx, dy)) = dot {
                    let d2 = (fx - dx).powi(2) + (fy - dy).powi(2);
                    v += 0.5 * (-d2 / (2.0 * 0.6 * 0.6)).exp();
                }
                let noise: f64 = StandardNormal.sample(&mut rng);
                free[[y, x]] = domain.apply(v, noise);
                let mut add = 0.0;
                for (li, &(cx, cy, a, sg)) in active.iter().enumerate() {
                    let g = (-((fx - cx).powi(2) + (fy - cy).powi(2)) / (2.0 * sg * sg)).exp();
                    add += a * g;
                    if g >= MASK_FRACTION {
                        mask[[y, x]] = true;
                        let b = lesion_boxes[li].get_or_insert([x, y, x + 1, y + 1]);
                        b[0] = b[0].min(x);
                        b[1] = b[1].min(y);
                        b[2] = b[2].max(x + 1);
                        b[3] = b[3].max(y + 1);
                    }
                }
                img[[y, x]] = domain.apply(v + add, noise);
            }
        }
        boxes.extend(lesion_boxes.into_iter().flatten());
        truth_slices.push(SliceTruth {
            lesion: !boxes.is_empty(),
            boxes,
        });
        slices.push(img);
        lesion_free.push(free);
        masks.push(mask);
    }

    let patient_id = format!("p{index:04}");
    SyntheticVolume {
        volume: Volume {
            patient_id: patient_id.clone(),
            label,
            domain: domain.name.clone(),
            slices,
        },
        truth: PatientTruth {
            patient_id,
            label,
            domain: domain.name.clone(),
            slices: truth_slices,
        },
        masks,
        lesion_free,
    }
}

/// Generates every patient in memory. Each patient draws from its own stream
/// derived from the master seed, so the result does not depend on order.
pub fn generate_volumes(spec: &SyntheticSpec) -> Result<Vec<SyntheticVolume>> {
    spec.validate()?;
    Ok((0..spec.patients).map(|i| generate_patient(spec, i)).collect())
}

/// Writes slices, `manifest.jsonl`, `ground_truth.json` and
/// `synthetic_spec.json` under `out_dir`. Returns the manifest path.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    let generated = generate_volumes(spec)?;
    fs::create_dir_all(out_dir)?;
    let mut records = Vec::with_capacity(generated.len());
    for g in &generated {
        let dir = out_dir.join("slices").join(&g.volume.patient_id);
        fs::create_dir_all(&dir)?;
        let mut paths = Vec::with_capacity(g.volume.len());
        for (i, s) in g.volume.slices.iter().enumerate() {
            let p = dir.join(format!("{i:03}.png"));
            write_slice_png(&p, s)?;
            paths.push(p);
        }
        records.push(PatientRecord {
            patient_id: g.volume.patient_id.clone(),
            label: g.volume.label,
            domain: g.volume.domain.clone(),
            slices: paths,
        });
    }
    let manifest = out_dir.join("manifest.jsonl");
    write_manifest(&manifest, &records)?;
    GroundTruth::new(generated.into_iter().map(|g| g.truth).collect()).save(out_dir.join("ground_truth.json"))?;
    fs::write(
        out_dir.join("synthetic_spec.json"),
        serde_json::to_string_pretty(spec)? + "\n",
    )?;
    Ok(manifest)
}

/// SHA-256 over every file under `dir` (relative path and contents), visited in
/// sorted order.
pub fn checksum_dir(dir: impl AsRef<Path>) -> Result<String> {
    fn walk(root: &Path, dir: &Path, files: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, files)?;
            } else {
                files.push(path.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
        Ok(())
    }
    let root = dir.as_ref();
    let mut files = Vec::new();
    walk(root, root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        hasher.update(f.to_string_lossy().as_bytes());
        hasher.update([0]);
        hasher.update(fs::read(root.join(&f))?);
    }
    Ok(format!("{:x}", hasher.finalize()))
}
