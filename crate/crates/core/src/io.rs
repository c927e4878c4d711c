//! On-disk format: `<name>.f32raw` (little-endian f32, x fastest) plus a
//! `<name>.json` sidecar, and `study.json` manifests that tie a study's
//! files together.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{BinaryMask, Geometry, Gridded, Modality, Spacing, Study, StudyIssue, Target, Volume, VolumeError};

pub const RAW_EXTENSION: &str = "f32raw";
pub const SIDECAR_EXTENSION: &str = "json";
pub const STUDY_MANIFEST: &str = "study.json";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("missing sidecar {0}")]
    MissingSidecar(PathBuf),
    #[error("missing data file {0}")]
    MissingData(PathBuf),
    #[error("payload of {found} floats does not match dims {dims:?} ({expected} voxels) in {path}")]
    PayloadSize {
        path: PathBuf,
        dims: [usize; 3],
        expected: usize,
        found: usize,
    },
    #[error("payload length {0} is not a multiple of 4 bytes")]
    TruncatedPayload(usize),
    #[error("unknown modality {0:?}")]
    UnknownModality(String),
    #[error("invalid volume in {path}: {source}")]
    Volume { path: PathBuf, source: VolumeError },
    #[error("invalid study {dir}: {}", issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; "))]
    Study { dir: PathBuf, issues: Vec<StudyIssue> },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl IoError {
    /// True for errors caused by absent inputs rather than malformed ones.
    pub fn is_missing(&self) -> bool {
        match self {
            IoError::MissingSidecar(_) | IoError::MissingData(_) => true,
            IoError::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        }
    }
}

/// JSON sidecar schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub modality: String,
}

fn stem_path(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some(RAW_EXTENSION) | Some(SIDECAR_EXTENSION) => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Writes `<stem>.f32raw` and `<stem>.json`. `path` may carry either
/// extension or none.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<(), IoError> {
    let stem = stem_path(path.as_ref());
    let raw = with_ext(&stem, RAW_EXTENSION);
    let side = with_ext(&stem, SIDECAR_EXTENSION);
    if let Some(parent) = raw.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut bytes = Vec::with_capacity(v.voxels().len() * 4);
    for value in v.voxels() {
        bytes.extend_from_slice(&value.to_le_bytes());
    }
    fs::write(&raw, bytes).map_err(io_err(&raw))?;
    let g = v.geometry();
    let sidecar = Sidecar {
        dims: g.dims,
        spacing_mm: g.spacing.as_array(),
        origin_mm: g.origin,
        modality: v.modality().as_str().to_string(),
    };
    write_json(&side, &sidecar)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume, IoError> {
    let stem = stem_path(path.as_ref());
    let raw = with_ext(&stem, RAW_EXTENSION);
    let side = with_ext(&stem, SIDECAR_EXTENSION);
    if !side.exists() {
        return Err(IoError::MissingSidecar(side));
    }
    if !raw.exists() {
        return Err(IoError::MissingData(raw));
    }
    let sidecar: Sidecar = read_json(&side)?;
    let modality =
        Modality::parse(&sidecar.modality).ok_or_else(|| IoError::UnknownModality(sidecar.modality.clone()))?;
    let bytes = fs::read(&raw).map_err(io_err(&raw))?;
    if bytes.len() % 4 != 0 {
        return Err(IoError::TruncatedPayload(bytes.len()));
    }
    let voxels: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let expected = sidecar.dims.iter().product::<usize>();
    if voxels.len() != expected {
        return Err(IoError::PayloadSize {
            path: raw,
            dims: sidecar.dims,
            expected,
            found: voxels.len(),
        });
    }
    let wrap = |source| IoError::Volume {
        path: raw.clone(),
        source,
    };
    let [dx, dy, dz] = sidecar.spacing_mm;
    let spacing = Spacing::new(dx, dy, dz).map_err(wrap)?;
    let geometry = Geometry::new(sidecar.dims, spacing, sidecar.origin_mm).map_err(wrap)?;
    Volume::new(geometry, modality, voxels).map_err(wrap)
}

/// `study.json` contents: modality and mask names mapped to file stems
/// relative to the study directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub patient_id: String,
    pub volumes: BTreeMap<String, String>,
    #[serde(default)]
    pub masks: BTreeMap<String, String>,
}

pub fn save_study(s: &Study, dir: impl AsRef<Path>) -> Result<(), IoError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = StudyManifest {
        patient_id: s.patient_id.clone(),
        volumes: BTreeMap::new(),
        masks: BTreeMap::new(),
    };
    for (m, v) in &s.volumes {
        let stem = m.as_str().to_ascii_lowercase();
        save_volume(v, dir.join(&stem))?;
        manifest.volumes.insert(m.as_str().to_string(), stem);
    }
    for (t, mask) in &s.masks {
        let stem = format!("mask_{}", t.as_str().to_ascii_lowercase());
        save_volume(&mask.to_volume(), dir.join(&stem))?;
        manifest.masks.insert(t.as_str().to_string(), stem);
    }
    write_json(&dir.join(STUDY_MANIFEST), &manifest)
}

pub fn load_study(dir: impl AsRef<Path>) -> Result<Study, IoError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(STUDY_MANIFEST);
    if !manifest_path.exists() {
        return Err(IoError::MissingData(manifest_path));
    }
    let manifest: StudyManifest = read_json(&manifest_path)?;
    let mut volumes = BTreeMap::new();
    for (name, stem) in &manifest.volumes {
        let m = Modality::parse(name).ok_or_else(|| IoError::UnknownModality(name.clone()))?;
        volumes.insert(m, load_volume(dir.join(stem))?);
    }
    let mut masks = BTreeMap::new();
    for (name, stem) in &manifest.masks {
        let t = Target::parse(name).ok_or_else(|| IoError::UnknownModality(name.clone()))?;
        masks.insert(t, load_volume(dir.join(stem))?);
    }
    Study::assemble(manifest.patient_id, volumes, masks).map_err(|issues| IoError::Study {
        dir: dir.to_path_buf(),
        issues,
    })
}

/// Study directories (those holding a `study.json`) directly under `root`,
/// sorted by path.
pub fn list_studies(root: impl AsRef<Path>) -> Result<Vec<PathBuf>, IoError> {
    let root = root.as_ref();
    if root.join(STUDY_MANIFEST).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(io_err(root))? {
        let entry = entry.map_err(io_err(root))?;
        let p = entry.path();
        if p.is_dir() && p.join(STUDY_MANIFEST).exists() {
            dirs.push(p);
        }
    }
    dirs.sort();
    Ok(dirs)
}

pub fn load_studies(root: impl AsRef<Path>) -> Result<Vec<Study>, IoError> {
    let root = root.as_ref();
    let dirs = list_studies(root)?;
    if dirs.is_empty() {
        return Err(IoError::MissingData(root.join("*").join(STUDY_MANIFEST)));
    }
    dirs.iter().map(load_study).collect()
}

/// Convenience for writing a mask with its target tag.
pub fn save_mask(m: &BinaryMask, path: impl AsRef<Path>) -> Result<(), IoError> {
    save_volume(&m.to_volume(), path)
}

pub fn load_mask(path: impl AsRef<Path>, target: Target) -> Result<BinaryMask, IoError> {
    let path = path.as_ref();
    let v = load_volume(path)?;
    BinaryMask::from_volume(&v, target).map_err(|source| IoError::Volume {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2_volume() -> Volume {
        let g = Geometry::new([4, 4, 4], Spacing::new(0.75, 0.75, 5.0).unwrap(), [1.0, -2.0, 3.5]).unwrap();
        Volume::filled(g, Modality::T2, 1.0).unwrap()
    }

    #[test]
    fn roundtrip_constant_volume() {
        let dir = tempfile::tempdir().unwrap();
        let v = t2_volume();
        save_volume(&v, dir.path().join("t2")).unwrap();
        let back = load_volume(dir.path().join("t2.f32raw")).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.spacing().dz, 5.0);
    }

    #[test]
    fn short_payload_is_size_error() {
        let dir = tempfile::tempdir().unwrap();
        save_volume(&t2_volume(), dir.path().join("v")).unwrap();
        let raw = dir.path().join("v.f32raw");
        let bytes = fs::read(&raw).unwrap();
        fs::write(&raw, &bytes[..63 * 4]).unwrap();
        match load_volume(&raw) {
            Err(IoError::PayloadSize { expected, found, .. }) => {
                assert_eq!((expected, found), (64, 63));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        save_volume(&t2_volume(), dir.path().join("v")).unwrap();
        fs::remove_file(dir.path().join("v.json")).unwrap();
        let err = load_volume(dir.path().join("v")).unwrap_err();
        assert!(matches!(err, IoError::MissingSidecar(_)));
        assert!(err.is_missing());
    }

    #[test]
    fn non_finite_payload_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_volume(&t2_volume(), dir.path().join("v")).unwrap();
        let raw = dir.path().join("v.f32raw");
        let mut bytes = fs::read(&raw).unwrap();
        bytes[8..12].copy_from_slice(&f32::INFINITY.to_le_bytes());
        fs::write(&raw, bytes).unwrap();
        assert!(matches!(
            load_volume(&raw),
            Err(IoError::Volume {
                source: VolumeError::NonFinite { index: 2, .. },
                ..
            })
        ));
    }

    #[test]
    fn sidecar_schema_field_names() {
        let dir = tempfile::tempdir().unwrap();
        save_volume(&t2_volume(), dir.path().join("v")).unwrap();
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join("v.json")).unwrap()).unwrap();
        assert_eq!(json["dims"], serde_json::json!([4, 4, 4]));
        assert_eq!(json["spacing_mm"], serde_json::json!([0.75, 0.75, 5.0]));
        assert_eq!(json["origin_mm"], serde_json::json!([1.0, -2.0, 3.5]));
        assert_eq!(json["modality"], "T2");
    }
}
