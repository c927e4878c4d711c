//! Geometric data model: volumes, binary masks and co-registered studies.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance (mm) used when comparing spacing and origin components.
pub const GEOMETRY_TOLERANCE_MM: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VolumeError {
    #[error("dims {dims:?} must all be positive")]
    EmptyDims { dims: [usize; 3] },
    #[error("spacing {0:?} must be strictly positive and finite")]
    BadSpacing([f64; 3]),
    #[error("voxel count {found} does not match dims {dims:?} (expected {expected})")]
    SizeMismatch {
        dims: [usize; 3],
        expected: usize,
        found: usize,
    },
    #[error("voxel {index} is not finite ({value})")]
    NonFinite { index: usize, value: f32 },
    #[error("mask voxel {index} has value {value}, expected 0 or 1")]
    NonBinary { index: usize, value: f32 },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
}

/// Imaging modality tag carried by every [`Volume`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T2,
    CT,
    PET,
    /// Probability map produced by a model.
    PROB,
}

impl Modality {
    pub const IMAGING: [Modality; 4] = [Modality::T1, Modality::T2, Modality::CT, Modality::PET];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::T1 => "T1",
            Modality::T2 => "T2",
            Modality::CT => "CT",
            Modality::PET => "PET",
            Modality::PROB => "PROB",
        }
    }

    pub fn parse(s: &str) -> Option<Modality> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Some(Modality::T1),
            "T2" => Some(Modality::T2),
            "CT" => Some(Modality::CT),
            "PET" => Some(Modality::PET),
            "PROB" => Some(Modality::PROB),
            _ => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Modality a segmentation mask is delineated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Target {
    T2,
    PET,
}

impl Target {
    pub const ALL: [Target; 2] = [Target::T2, Target::PET];

    pub fn modality(self) -> Modality {
        match self {
            Target::T2 => Modality::T2,
            Target::PET => Modality::PET,
        }
    }

    pub fn as_str(self) -> &'static str {
        self.modality().as_str()
    }

    pub fn parse(s: &str) -> Option<Target> {
        match Modality::parse(s)? {
            Modality::T2 => Some(Target::T2),
            Modality::PET => Some(Target::PET),
            _ => None,
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Physical voxel size in millimeters. Anisotropy is expected (`dz ≫ dx`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self, VolumeError> {
        let s = Spacing { dx, dy, dz };
        s.check()?;
        Ok(s)
    }

    pub fn isotropic(d: f64) -> Result<Self, VolumeError> {
        Self::new(d, d, d)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    fn check(&self) -> Result<(), VolumeError> {
        let a = self.as_array();
        if a.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(VolumeError::BadSpacing(a))
        }
    }
}

/// Grid description shared by volumes and masks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: Spacing,
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: Spacing, origin: [f64; 3]) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::EmptyDims { dims });
        }
        spacing.check()?;
        Ok(Geometry {
            dims,
            spacing,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Linear index of `(x, y, z)`; x varies fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Physical position (mm) of the center of voxel `(x, y, z)`.
    pub fn position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let s = self.spacing.as_array();
        [
            self.origin[0] + x as f64 * s[0],
            self.origin[1] + y as f64 * s[1],
            self.origin[2] + z as f64 * s[2],
        ]
    }

    pub fn approx_eq(&self, other: &Geometry) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .as_array()
                .iter()
                .zip(other.spacing.as_array())
                .all(|(a, b)| (a - b).abs() <= GEOMETRY_TOLERANCE_MM)
            && self
                .origin
                .iter()
                .zip(other.origin)
                .all(|(a, b)| (a - b).abs() <= GEOMETRY_TOLERANCE_MM)
    }
}

/// Anything laid out on a [`Geometry`].
pub trait Gridded {
    fn geometry(&self) -> &Geometry;

    fn dims(&self) -> [usize; 3] {
        self.geometry().dims
    }

    fn spacing(&self) -> Spacing {
        self.geometry().spacing
    }
}

/// Grid-backed container whose voxels can be copied around generically
/// (used by cropping, padding and patch extraction).
pub trait VoxelGrid: Gridded + Sized {
    type Elem: Copy + Default + PartialEq + fmt::Debug;

    fn elems(&self) -> &[Self::Elem];

    /// Same kind and tag, new grid and voxels.
    fn rebuild(&self, geometry: Geometry, elems: Vec<Self::Elem>) -> Result<Self, VolumeError>;
}

/// True iff dims match exactly and spacing/origin agree within
/// [`GEOMETRY_TOLERANCE_MM`].
pub fn geometry_equal(a: &impl Gridded, b: &impl Gridded) -> bool {
    a.geometry().approx_eq(b.geometry())
}

/// Dense 3D scalar field with a fixed modality tag.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    modality: Modality,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, modality: Modality, voxels: Vec<f32>) -> Result<Self, VolumeError> {
        let expected = geometry.len();
        if voxels.len() != expected {
            return Err(VolumeError::SizeMismatch {
                dims: geometry.dims,
                expected,
                found: voxels.len(),
            });
        }
        if let Some((index, &value)) = voxels.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index, value });
        }
        Ok(Volume {
            geometry,
            modality,
            voxels,
        })
    }

    pub fn filled(geometry: Geometry, modality: Modality, value: f32) -> Result<Self, VolumeError> {
        Self::new(geometry, modality, vec![value; geometry.len()])
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.geometry.index(x, y, z)]
    }

    /// New volume on the same grid and modality with replaced voxels.
    pub fn with_voxels(&self, voxels: Vec<f32>) -> Result<Self, VolumeError> {
        Volume::new(self.geometry, self.modality, voxels)
    }

    pub fn with_geometry(&self, geometry: Geometry, voxels: Vec<f32>) -> Result<Self, VolumeError> {
        Volume::new(geometry, self.modality, voxels)
    }
}

impl Gridded for Volume {
    fn geometry(&self) -> &Geometry {
        &self.geometry
    }
}

impl VoxelGrid for Volume {
    type Elem = f32;

    fn elems(&self) -> &[f32] {
        &self.voxels
    }

    fn rebuild(&self, geometry: Geometry, elems: Vec<f32>) -> Result<Self, VolumeError> {
        self.with_geometry(geometry, elems)
    }
}

/// `{0,1}` volume aligned with a reference image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    geometry: Geometry,
    target: Target,
    voxels: Vec<u8>,
}

// Geometry holds f64 but is never NaN once validated.
impl Eq for Geometry {}

impl BinaryMask {
    pub fn new(geometry: Geometry, target: Target, voxels: Vec<u8>) -> Result<Self, VolumeError> {
        if voxels.len() != geometry.len() {
            return Err(VolumeError::SizeMismatch {
                dims: geometry.dims,
                expected: geometry.len(),
                found: voxels.len(),
            });
        }
        if let Some((index, &v)) = voxels.iter().enumerate().find(|(_, v)| **v > 1) {
            return Err(VolumeError::NonBinary {
                index,
                value: v as f32,
            });
        }
        Ok(BinaryMask {
            geometry,
            target,
            voxels,
        })
    }

    pub fn empty(geometry: Geometry, target: Target) -> Self {
        BinaryMask {
            geometry,
            target,
            voxels: vec![0; geometry.len()],
        }
    }

    /// Builds a mask from float voxels that must be exactly 0.0 or 1.0.
    pub fn from_volume(v: &Volume, target: Target) -> Result<Self, VolumeError> {
        let mut voxels = Vec::with_capacity(v.voxels().len());
        for (index, &value) in v.voxels().iter().enumerate() {
            if value == 0.0 {
                voxels.push(0);
            } else if value == 1.0 {
                voxels.push(1);
            } else {
                return Err(VolumeError::NonBinary { index, value });
            }
        }
        Ok(BinaryMask {
            geometry: *v.geometry(),
            target,
            voxels,
        })
    }

    /// `value >= threshold` becomes foreground.
    pub fn threshold(v: &Volume, target: Target, threshold: f32) -> Self {
        BinaryMask {
            geometry: *v.geometry(),
            target,
            voxels: v.voxels().iter().map(|&p| u8::from(p >= threshold)).collect(),
        }
    }

    /// Float copy with values 0.0/1.0, tagged with the target modality.
    pub fn to_volume(&self) -> Volume {
        Volume {
            geometry: self.geometry,
            modality: self.target.modality(),
            voxels: self.voxels.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn target(&self) -> Target {
        self.target
    }

    pub fn voxels(&self) -> &[u8] {
        &self.voxels
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> bool {
        self.voxels[self.geometry.index(x, y, z)] == 1
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v == 1).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0)
    }

    pub fn with_voxels(&self, voxels: Vec<u8>) -> Result<Self, VolumeError> {
        BinaryMask::new(self.geometry, self.target, voxels)
    }

    pub fn with_geometry(&self, geometry: Geometry, voxels: Vec<u8>) -> Result<Self, VolumeError> {
        BinaryMask::new(geometry, self.target, voxels)
    }

    pub fn retarget(mut self, target: Target) -> Self {
        self.target = target;
        self
    }
}

impl Gridded for BinaryMask {
    fn geometry(&self) -> &Geometry {
        &self.geometry
    }
}

impl VoxelGrid for BinaryMask {
    type Elem = u8;

    fn elems(&self) -> &[u8] {
        &self.voxels
    }

    fn rebuild(&self, geometry: Geometry, elems: Vec<u8>) -> Result<Self, VolumeError> {
        self.with_geometry(geometry, elems)
    }
}

/// One patient's co-registered images and ground-truth masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub patient_id: String,
    pub volumes: BTreeMap<Modality, Volume>,
    pub masks: BTreeMap<Target, BinaryMask>,
}

/// One violated study invariant.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StudyIssue {
    #[error("{what} is not on the study grid")]
    GeometryMismatch { what: String },
    #[error("mask {0} has no matching volume")]
    MaskWithoutVolume(Target),
    #[error("mask {target} is not binary: {source}")]
    NonBinaryMask { target: Target, source: VolumeError },
    #[error("volume keyed {key} carries modality {found}")]
    ModalityKeyMismatch { key: Modality, found: Modality },
    #[error("study has no volumes")]
    NoVolumes,
}

impl Study {
    /// Assembles a study from float mask volumes, reporting every violated
    /// invariant (including non-binary mask values) instead of stopping at the
    /// first one.
    pub fn assemble(
        patient_id: impl Into<String>,
        volumes: BTreeMap<Modality, Volume>,
        mask_volumes: BTreeMap<Target, Volume>,
    ) -> Result<Study, Vec<StudyIssue>> {
        let mut issues = Vec::new();
        let mut masks = BTreeMap::new();
        for (target, v) in mask_volumes {
            match BinaryMask::from_volume(&v, target) {
                Ok(m) => {
                    masks.insert(target, m);
                }
                Err(source) => issues.push(StudyIssue::NonBinaryMask { target, source }),
            }
        }
        let study = Study {
            patient_id: patient_id.into(),
            volumes,
            masks,
        };
        issues.extend(validate_study(&study));
        if issues.is_empty() {
            Ok(study)
        } else {
            Err(issues)
        }
    }

    /// Grid shared by all members (taken from the first volume).
    pub fn geometry(&self) -> Option<&Geometry> {
        self.volumes
            .values()
            .map(|v| v.geometry())
            .next()
            .or_else(|| self.masks.values().map(|m| m.geometry()).next())
    }

    pub fn volume(&self, m: Modality) -> Option<&Volume> {
        self.volumes.get(&m)
    }

    pub fn mask(&self, t: Target) -> Option<&BinaryMask> {
        self.masks.get(&t)
    }
}

/// Checks every study invariant; an empty list means the study is well formed.
pub fn validate_study(s: &Study) -> Vec<StudyIssue> {
    let mut issues = Vec::new();
    if s.volumes.is_empty() {
        issues.push(StudyIssue::NoVolumes);
    }
    let reference = s.geometry().copied();
    for (key, v) in &s.volumes {
        if v.modality() != *key {
            issues.push(StudyIssue::ModalityKeyMismatch {
                key: *key,
                found: v.modality(),
            });
        }
        if let Some(g) = &reference {
            if !g.approx_eq(v.geometry()) {
                issues.push(StudyIssue::GeometryMismatch {
                    what: format!("volume {key}"),
                });
            }
        }
    }
    for (target, m) in &s.masks {
        if !s.volumes.contains_key(&target.modality()) {
            issues.push(StudyIssue::MaskWithoutVolume(*target));
        }
        if let Some(g) = &reference {
            if !g.approx_eq(m.geometry()) {
                issues.push(StudyIssue::GeometryMismatch {
                    what: format!("mask {target}"),
                });
            }
        }
    }
    issues
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(dims: [usize; 3], dx: f64) -> Geometry {
        Geometry::new(dims, Spacing::new(dx, dx, 5.0).unwrap(), [0.0; 3]).unwrap()
    }

    fn vol(dims: [usize; 3], m: Modality) -> Volume {
        Volume::filled(geom(dims, 0.75), m, 1.0).unwrap()
    }

    #[test]
    fn geometry_equal_cases() {
        let a = vol([4, 4, 4], Modality::T2);
        assert!(geometry_equal(&a, &a));
        let b = vol([4, 4, 5], Modality::T2);
        assert!(!geometry_equal(&a, &b));
        let c = Volume::filled(geom([4, 4, 4], 0.75 + 1e-9), Modality::T2, 0.0).unwrap();
        assert!(geometry_equal(&a, &c));
        assert!(geometry_equal(&c, &a));
        let d = Volume::filled(geom([4, 4, 4], 0.76), Modality::T2, 0.0).unwrap();
        assert!(!geometry_equal(&a, &d));
    }

    #[test]
    fn volume_rejects_bad_input() {
        let g = geom([4, 4, 4], 1.0);
        assert!(matches!(
            Volume::new(g, Modality::T1, vec![0.0; 63]),
            Err(VolumeError::SizeMismatch { expected: 64, found: 63, .. })
        ));
        let mut v = vec![0.0; 64];
        v[7] = f32::NAN;
        assert!(matches!(
            Volume::new(g, Modality::T1, v),
            Err(VolumeError::NonFinite { index: 7, .. })
        ));
        assert!(Spacing::new(0.0, 1.0, 1.0).is_err());
        assert!(Geometry::new([0, 1, 1], Spacing::isotropic(1.0).unwrap(), [0.0; 3]).is_err());
    }

    #[test]
    fn index_roundtrip_is_x_fastest() {
        let g = geom([3, 4, 5], 1.0);
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 3);
        assert_eq!(g.index(0, 0, 1), 12);
        for i in 0..g.len() {
            let [x, y, z] = g.coords(i);
            assert_eq!(g.index(x, y, z), i);
        }
    }

    fn mask_vol(dims: [usize; 3], fill: f32) -> Volume {
        Volume::filled(geom(dims, 0.75), Modality::PROB, fill).unwrap()
    }

    #[test]
    fn well_formed_study_has_no_issues() {
        let mut volumes = BTreeMap::new();
        for m in [Modality::T1, Modality::T2, Modality::PET] {
            volumes.insert(m, vol([4, 4, 4], m));
        }
        let mut masks = BTreeMap::new();
        masks.insert(Target::T2, mask_vol([4, 4, 4], 1.0));
        masks.insert(Target::PET, mask_vol([4, 4, 4], 0.0));
        let s = Study::assemble("p0", volumes, masks).unwrap();
        assert!(validate_study(&s).is_empty());
    }

    #[test]
    fn mask_without_target_volume_is_one_issue() {
        let mut volumes = BTreeMap::new();
        volumes.insert(Modality::T2, vol([4, 4, 4], Modality::T2));
        let mut masks = BTreeMap::new();
        masks.insert(Target::T2, mask_vol([4, 4, 4], 1.0));
        masks.insert(Target::PET, mask_vol([4, 4, 4], 1.0));
        let issues = Study::assemble("p0", volumes, masks).unwrap_err();
        assert_eq!(issues, vec![StudyIssue::MaskWithoutVolume(Target::PET)]);
    }

    #[test]
    fn non_binary_mask_is_one_issue() {
        let mut volumes = BTreeMap::new();
        volumes.insert(Modality::T2, vol([4, 4, 4], Modality::T2));
        let mut masks = BTreeMap::new();
        masks.insert(Target::T2, mask_vol([4, 4, 4], 0.5));
        let issues = Study::assemble("p0", volumes, masks).unwrap_err();
        assert_eq!(issues.len(), 1);
        assert!(matches!(issues[0], StudyIssue::NonBinaryMask { target: Target::T2, .. }));
    }

    #[test]
    fn geometry_mismatch_is_reported() {
        let mut volumes = BTreeMap::new();
        volumes.insert(Modality::T1, vol([4, 4, 4], Modality::T1));
        volumes.insert(Modality::T2, vol([4, 4, 5], Modality::T2));
        let issues = Study::assemble("p0", volumes, BTreeMap::new()).unwrap_err();
        assert_eq!(issues.len(), 1);
    }
}
