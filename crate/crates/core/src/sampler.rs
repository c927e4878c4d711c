//! Tumor-aware patch extraction with aligned windows across modalities.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preprocess::{crop, CropBox, PreprocessError};
use crate::volume::{BinaryMask, Geometry, Study, Target, VolumeError, VoxelGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("patch size {0:?} must be positive on every axis")]
    InvalidSpec([usize; 3]),
    #[error("study {0} has no {1} mask")]
    MissingMask(String, Target),
    #[error("reference mask of study {0} is empty")]
    EmptyReference(String),
    #[error("patch {patch:?} is larger than the padded volume {dims:?}")]
    PatchTooLarge { patch: [usize; 3], dims: [usize; 3] },
    #[error("study {0} has no volumes")]
    EmptyStudy(String),
    #[error(transparent)]
    Crop(#[from] PreprocessError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Which mask must show tumor inside every sampled patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TumorReference {
    #[default]
    UnionOfMasks,
    T2Mask,
    PetMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    pub size: [usize; 3],
    pub require_tumor: bool,
    pub tumor_reference: TumorReference,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            size: [256, 256, 16],
            require_tumor: true,
            tumor_reference: TumorReference::UnionOfMasks,
        }
    }
}

impl PatchSpec {
    pub fn with_size(size: [usize; 3]) -> Self {
        PatchSpec {
            size,
            ..PatchSpec::default()
        }
    }
}

/// Aligned crops of every volume and mask of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    /// Window corner in the (padded) source grid.
    pub offset: [usize; 3],
    pub study: Study,
}

/// Reflect-pads along z (without repeating the edge slice) until the stack
/// has `min_z` slices. Slices are appended after the last one.
pub fn pad_to_min_depth<V: VoxelGrid>(v: &V, min_z: usize) -> Result<V, VolumeError> {
    let g = v.geometry();
    let [nx, ny, nz] = g.dims;
    if nz >= min_z {
        return v.rebuild(*g, v.elems().to_vec());
    }
    let slice = nx * ny;
    let mut out = Vec::with_capacity(slice * min_z);
    for z in 0..min_z {
        let src = reflect(z, nz);
        out.extend_from_slice(&v.elems()[src * slice..(src + 1) * slice]);
    }
    let geometry = Geometry::new([nx, ny, min_z], g.spacing, g.origin)?;
    v.rebuild(geometry, out)
}

fn reflect(k: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = k % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Pads every member of a study to at least `min_z` slices.
pub fn pad_study(s: &Study, min_z: usize) -> Result<Study, VolumeError> {
    let volumes = s
        .volumes
        .iter()
        .map(|(k, v)| Ok((*k, pad_to_min_depth(v, min_z)?)))
        .collect::<Result<BTreeMap<_, _>, VolumeError>>()?;
    let masks = s
        .masks
        .iter()
        .map(|(k, m)| Ok((*k, pad_to_min_depth(m, min_z)?)))
        .collect::<Result<BTreeMap<_, _>, VolumeError>>()?;
    Ok(Study {
        patient_id: s.patient_id.clone(),
        volumes,
        masks,
    })
}

/// Reference mask voxels used for the tumor-visibility guarantee.
pub fn reference_mask(s: &Study, reference: TumorReference) -> Result<Vec<u8>, SamplerError> {
    let get = |t: Target| s.mask(t).ok_or_else(|| SamplerError::MissingMask(s.patient_id.clone(), t));
    Ok(match reference {
        TumorReference::T2Mask => get(Target::T2)?.voxels().to_vec(),
        TumorReference::PetMask => get(Target::PET)?.voxels().to_vec(),
        TumorReference::UnionOfMasks => {
            let masks: Vec<&BinaryMask> = s.masks.values().collect();
            let Some(first) = masks.first() else {
                return Err(SamplerError::MissingMask(s.patient_id.clone(), Target::T2));
            };
            let mut u = first.voxels().to_vec();
            for m in &masks[1..] {
                for (a, &b) in u.iter_mut().zip(m.voxels()) {
                    *a |= b;
                }
            }
            u
        }
    })
}

/// Samples patches from one study; padding and the foreground index list
/// are computed once.
#[derive(Debug, Clone)]
pub struct PatchSampler {
    study: Study,
    spec: PatchSpec,
    dims: [usize; 3],
    foreground: Vec<usize>,
}

impl PatchSampler {
    pub fn new(study: &Study, spec: PatchSpec) -> Result<Self, SamplerError> {
        if spec.size.contains(&0) {
            return Err(SamplerError::InvalidSpec(spec.size));
        }
        let padded = pad_study(study, spec.size[2])?;
        let dims = padded
            .geometry()
            .ok_or_else(|| SamplerError::EmptyStudy(study.patient_id.clone()))?
            .dims;
        if (0..3).any(|a| spec.size[a] > dims[a]) {
            return Err(SamplerError::PatchTooLarge {
                patch: spec.size,
                dims,
            });
        }
        let foreground = if spec.require_tumor {
            let r = reference_mask(&padded, spec.tumor_reference)?;
            let fg: Vec<usize> = r.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect();
            if fg.is_empty() {
                return Err(SamplerError::EmptyReference(study.patient_id.clone()));
            }
            fg
        } else {
            Vec::new()
        };
        Ok(PatchSampler {
            study: padded,
            spec,
            dims,
            foreground,
        })
    }

    /// Padded study the windows refer to.
    pub fn padded(&self) -> &Study {
        &self.study
    }

    pub fn spec(&self) -> &PatchSpec {
        &self.spec
    }

    /// Draws a window corner: a uniform foreground voxel, then a uniform
    /// window containing it (or a uniform window when no tumor is required).
    pub fn sample_offset<R: Rng + ?Sized>(&self, rng: &mut R) -> [usize; 3] {
        let p = self.spec.size;
        let n = self.dims;
        if self.foreground.is_empty() {
            return [0, 1, 2].map(|a| rng.random_range(0..=n[a] - p[a]));
        }
        let idx = self.foreground[rng.random_range(0..self.foreground.len())];
        let v = [idx % n[0], (idx / n[0]) % n[1], idx / (n[0] * n[1])];
        [0, 1, 2].map(|a| {
            let lo = (v[a] + 1).saturating_sub(p[a]);
            let hi = v[a].min(n[a] - p[a]);
            rng.random_range(lo..=hi)
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Patch, SamplerError> {
        let offset = self.sample_offset(rng);
        self.extract(offset)
    }

    /// Crops every member at the window starting at `offset`.
    pub fn extract(&self, offset: [usize; 3]) -> Result<Patch, SamplerError> {
        let b = CropBox {
            min: offset,
            max: [0, 1, 2].map(|a| offset[a] + self.spec.size[a] - 1),
        };
        let volumes = self
            .study
            .volumes
            .iter()
            .map(|(k, v)| Ok((*k, crop(v, &b)?)))
            .collect::<Result<BTreeMap<_, _>, SamplerError>>()?;
        let masks = self
            .study
            .masks
            .iter()
            .map(|(k, m)| Ok((*k, crop(m, &b)?)))
            .collect::<Result<BTreeMap<_, _>, SamplerError>>()?;
        Ok(Patch {
            offset,
            study: Study {
                patient_id: self.study.patient_id.clone(),
                volumes,
                masks,
            },
        })
    }
}

/// One-shot convenience wrapper around [`PatchSampler`].
pub fn sample_patch<R: Rng + ?Sized>(s: &Study, spec: &PatchSpec, rng: &mut R) -> Result<Patch, SamplerError> {
    PatchSampler::new(s, *spec)?.sample(rng)
}
