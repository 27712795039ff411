//! Line-delimited JSON manifest, one patient per line after a header line:
//!
//! ```text
//! {"format":"slicemil-manifest","version":1}
//! {"patient_id":"p0000","label":1,"domain":"A","slices":["slices/p0000/000.png", ...]}
//! ```
//!
//! Slice paths are relative to the manifest's directory. Slices are 16-bit
//! grayscale PNGs storing `round(intensity * INTENSITY_SCALE)`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::Volume;
use crate::{Error, Result};

pub const MANIFEST_FORMAT: &str = "slicemil-manifest";
pub const MANIFEST_VERSION: u32 = 1;

/// Stored pixel value per unit of intensity.
pub const INTENSITY_SCALE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    pub patient_id: String,
    pub label: u8,
    pub domain: String,
    /// Paths as resolved against the manifest directory.
    pub slices: Vec<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::ManifestParse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads and validates a manifest. Records keep file order.
pub fn load_dataset(manifest: impl AsRef<Path>) -> Result<Vec<PatientRecord>> {
    let manifest = manifest.as_ref();
    let text = fs::read_to_string(manifest)?;
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let Some((line, header)) = lines.next() else {
        log::warn!("manifest {} is empty", manifest.display());
        return Ok(Vec::new());
    };
    let header: Header = serde_json::from_str(header).map_err(|e| parse_error(manifest, line, e.to_string()))?;
    if header.format != MANIFEST_FORMAT {
        return Err(parse_error(manifest, line, format!("unexpected format `{}`", header.format)));
    }
    if header.version != MANIFEST_VERSION {
        return Err(parse_error(manifest, line, format!("unsupported version {}", header.version)));
    }

    let mut records = Vec::new();
    for (line, text) in lines {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| parse_error(manifest, line, e.to_string()))?;
        if let Some(label) = raw.get("label") {
            if label.as_u64().is_none_or(|l| l > 1) {
                return Err(Error::invalid(format!(
                    "{}:{line}: label {label} is not 0 or 1",
                    manifest.display()
                )));
            }
        }
        let mut record: PatientRecord =
            serde_json::from_value(raw).map_err(|e| parse_error(manifest, line, e.to_string()))?;
        if record.slices.is_empty() {
            return Err(Error::invalid(format!(
                "{}:{line}: patient `{}` has no slices",
                manifest.display(),
                record.patient_id
            )));
        }
        for slice in &mut record.slices {
            *slice = base.join(&*slice);
            if !slice.is_file() {
                return Err(Error::MissingSlice {
                    patient: record.patient_id.clone(),
                    path: slice.clone(),
                });
            }
        }
        records.push(record);
    }
    if records.is_empty() {
        log::warn!("manifest {} lists no patients", manifest.display());
    }
    Ok(records)
}

/// Writes a manifest; slice paths are stored relative to the manifest directory
/// when possible.
pub fn write_manifest(path: impl AsRef<Path>, records: &[PatientRecord]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut out = Vec::new();
    serde_json::to_writer(
        &mut out,
        &Header {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
        },
    )?;
    out.push(b'\n');
    for r in records {
        let rel = PatientRecord {
            slices: r
                .slices
                .iter()
                .map(|s| s.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| s.clone()))
                .collect(),
            ..r.clone()
        };
        serde_json::to_writer(&mut out, &rel)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

pub fn write_slice_png(path: impl AsRef<Path>, slice: &Array2<f64>) -> Result<()> {
    let (h, w) = slice.dim();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = (slice[[y as usize, x as usize]] * INTENSITY_SCALE).round();
        Luma([v.clamp(0.0, u16::MAX as f64) as u16])
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn read_slice_png(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let img = image::open(path)?.into_luma16();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32)[0] as f64 / INTENSITY_SCALE
    }))
}

pub fn load_volume(record: &PatientRecord) -> Result<Volume> {
    let slices = record
        .slices
        .iter()
        .map(|p| {
            read_slice_png(p).map_err(|e| match e {
                Error::Io(_) | Error::Image(_) if !p.is_file() => Error::MissingSlice {
                    patient: record.patient_id.clone(),
                    path: p.clone(),
                },
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dims = slices[0].dim();
    if slices.iter().any(|s| s.dim() != dims) {
        return Err(Error::shape(format!(
            "patient `{}` mixes slice sizes",
            record.patient_id
        )));
    }
    Ok(Volume {
        patient_id: record.patient_id.clone(),
        label: record.label,
        domain: record.domain.clone(),
        slices,
    })
}

pub fn load_volumes(manifest: impl AsRef<Path>) -> Result<Vec<Volume>> {
    load_dataset(manifest)?.iter().map(load_volume).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_slices(dir: &Path, id: &str, n: usize) -> Vec<PathBuf> {
        fs::create_dir_all(dir.join(id)).unwrap();
        (0..n)
            .map(|i| {
                let p = dir.join(id).join(format!("{i:03}.png"));
                write_slice_png(&p, &Array2::from_elem((4, 4), 0.25 * i as f64)).unwrap();
                p
            })
            .collect()
    }

    #[test]
    fn two_patient_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            PatientRecord {
                patient_id: "pos".into(),
                label: 1,
                domain: "A".into(),
                slices: write_slices(dir.path(), "pos", 20),
            },
            PatientRecord {
                patient_id: "neg".into(),
                label: 0,
                domain: "B".into(),
                slices: write_slices(dir.path(), "neg", 15),
            },
        ];
        let manifest = dir.path().join("manifest.jsonl");
        write_manifest(&manifest, &records).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        assert!(text.contains("\"pos/000.png\""), "paths are stored relative");
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded, records);
        let v = load_volume(&loaded[0]).unwrap();
        assert_eq!(v.len(), 20);
        assert_eq!(v.slices[4][[0, 0]], 1.0);
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        fs::write(&m, "").unwrap();
        assert!(load_dataset(&m).unwrap().is_empty());
        fs::write(&m, "{\"format\":\"slicemil-manifest\",\"version\":1}\n").unwrap();
        assert!(load_dataset(&m).unwrap().is_empty());
    }

    #[test]
    fn bad_label_and_syntax_are_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let slices = write_slices(dir.path(), "a", 1);
        let m = dir.path().join("m.jsonl");
        let header = "{\"format\":\"slicemil-manifest\",\"version\":1}";
        let rec = format!(
            "{{\"patient_id\":\"a\",\"label\":2,\"domain\":\"A\",\"slices\":[\"{}\"]}}",
            slices[0].display()
        );
        fs::write(&m, format!("{header}\n{rec}\n")).unwrap();
        let err = load_dataset(&m).unwrap_err();
        assert!(matches!(err, Error::Invalid(_)), "{err}");
        assert!(err.to_string().contains(":2:"));

        fs::write(&m, format!("{header}\n\n{{not json\n")).unwrap();
        match load_dataset(&m).unwrap_err() {
            Error::ManifestParse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn missing_slice_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.jsonl");
        fs::write(
            &m,
            "{\"format\":\"slicemil-manifest\",\"version\":1}\n{\"patient_id\":\"x\",\"label\":0,\"domain\":\"A\",\"slices\":[\"nope.png\"]}\n",
        )
        .unwrap();
        match load_dataset(&m).unwrap_err() {
            Error::MissingSlice { patient, path } => {
                assert_eq!(patient, "x");
                assert!(path.ends_with("nope.png"));
            }
            other => panic!("unexpected {other}"),
        }
    }
}
