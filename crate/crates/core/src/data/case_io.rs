//! `case_<id>/manifest.json` plus one TGV image and mask per session.
//!
//! Images are stored as raw f32 intensities; [`load_case`] z-scores them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tgv::{load_tgv, save_tgv, write_atomic, TgvArray, TgvData};
use super::{BinaryMask, LongitudinalCase, Session};
use crate::denoiser::Treatment;
use crate::diffusion::{ImageTensor, Shape};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEntry {
    pub day: u32,
    pub treatment: u8,
    pub image: String,
    pub mask: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub case_id: String,
    pub sessions: Vec<SessionEntry>,
}

pub fn case_dir_name(case_id: &str) -> String {
    format!("case_{case_id}")
}

/// Writes `case` under `root/case_<id>/` and returns that directory.
pub fn write_case(root: &Path, case: &LongitudinalCase) -> Result<PathBuf> {
    let dir = root.join(case_dir_name(&case.case_id));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::with_capacity(case.len());
    for (i, s) in case.sessions.iter().enumerate() {
        let shape = s.image.shape();
        let image_name = format!("session_{i:02}_image.tgv");
        let mask_name = format!("session_{i:02}_mask.tgv");
        let img = TgvArray::f32(
            vec![shape.channels, shape.height, shape.width],
            s.image.data().iter().map(|&v| v as f32).collect(),
        )?;
        save_tgv(&img, &dir.join(&image_name))?;
        let mask = TgvArray::u8(
            vec![s.mask.height(), s.mask.width()],
            s.mask.data().to_vec(),
        )?;
        save_tgv(&mask, &dir.join(&mask_name))?;
        entries.push(SessionEntry {
            day: s.day,
            treatment: s.treatment.code(),
            image: image_name,
            mask: mask_name,
        });
    }
    let manifest = Manifest {
        case_id: case.case_id.clone(),
        sessions: entries,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join("manifest.json"), &json)?;
    Ok(dir)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

/// Loads one case directory, z-scoring each session image.
pub fn load_case(dir: &Path) -> Result<LongitudinalCase> {
    let manifest = read_manifest(dir)?;
    let mut sessions = Vec::with_capacity(manifest.sessions.len());
    for entry in &manifest.sessions {
        let img = load_tgv(&dir.join(&entry.image))?;
        if img.dims.len() != 3 || !matches!(img.data, TgvData::F32(_) | TgvData::F64(_)) {
            return Err(Error::Data(format!(
                "{}: expected a float C x H x W array",
                entry.image
            )));
        }
        let shape = Shape::new(img.dims[0], img.dims[1], img.dims[2]);
        let image = ImageTensor::new(shape, img.to_f64())?;
        let m = load_tgv(&dir.join(&entry.mask))?;
        let mask = match (&m.data, m.dims.as_slice()) {
            (TgvData::U8(v), &[h, w]) => BinaryMask::new(h, w, v.clone())?,
            _ => {
                return Err(Error::Data(format!(
                    "{}: expected a u8 H x W array",
                    entry.mask
                )))
            }
        };
        sessions.push(Session {
            image,
            mask,
            treatment: Treatment::try_from(entry.treatment)?,
            day: entry.day,
        });
    }
    Ok(LongitudinalCase::new(manifest.case_id, sessions)?.normalized())
}

/// Case directories (`case_*` containing a manifest) under `root`, sorted.
pub fn list_case_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let path = entry.path();
        let is_case = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("case_"));
        if is_case && path.join("manifest.json").is_file() {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_cases(root: &Path) -> Result<Vec<LongitudinalCase>> {
    list_case_dirs(root)?.iter().map(|d| load_case(d)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_raw_case, SynthConfig};

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::default();
        let raw = generate_raw_case(&cfg, 2).unwrap();
        let case_dir = write_case(dir.path(), &raw).unwrap();
        assert!(case_dir.ends_with("case_002"));
        let manifest = read_manifest(&case_dir).unwrap();
        assert_eq!(manifest.sessions.len(), raw.len());
        let loaded = load_case(&case_dir).unwrap();
        assert_eq!(loaded.case_id, "002");
        for (a, b) in loaded.sessions.iter().zip(&raw.sessions) {
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.day, b.day);
            assert_eq!(a.treatment, b.treatment);
            let z = crate::data::zscore_normalize(&b.image);
            assert!(a
                .image
                .data()
                .iter()
                .zip(z.data())
                .all(|(x, y)| (x - y).abs() < 1e-5));
        }
        assert_eq!(list_case_dirs(dir.path()).unwrap(), vec![case_dir]);
    }

    #[test]
    fn manifest_rejects_unknown_fields() {
        let bad = r#"{"case_id":"1","sessions":[],"extra":1}"#;
        assert!(serde_json::from_str::<Manifest>(bad).is_err());
    }
}
