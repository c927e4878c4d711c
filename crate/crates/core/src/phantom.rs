//! Synthetic multimodal studies with an ellipsoidal tumor and optional
//! necrotic core that is part of the T2 tumor but dark on PET.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{BinaryMask, Geometry, Modality, Spacing, Study, Target, Volume, VolumeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhantomError {
    #[error("necrosis fraction {0} must lie in [0, 1)")]
    BadNecrosis(f64),
    #[error("tumor radii {0:?} must be positive")]
    BadRadii([f64; 3]),
    #[error("tumor does not fit inside the volume along {0}")]
    TumorOutside(char),
    #[error("noise std for {0} must be non-negative")]
    BadNoise(Modality),
    #[error("no modalities requested")]
    NoModalities,
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Piecewise-constant intensities plus additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntensityModel {
    pub background: f32,
    pub tumor: f32,
    pub necrosis: f32,
    pub noise_std: f32,
}

impl IntensityModel {
    pub fn default_for(m: Modality) -> Self {
        let (background, tumor, necrosis, noise_std) = match m {
            Modality::T1 => (100.0, 140.0, 120.0, 5.0),
            Modality::T2 => (100.0, 220.0, 260.0, 8.0),
            Modality::CT => (40.0, 60.0, 30.0, 5.0),
            Modality::PET => (1.0, 8.0, 0.5, 0.2),
            Modality::PROB => (0.0, 1.0, 1.0, 0.0),
        };
        IntensityModel {
            background,
            tumor,
            necrosis,
            noise_std,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Tumor center in mm relative to the origin; `None` centers it.
    pub center_mm: Option<[f64; 3]>,
    pub radii_mm: [f64; 3],
    /// Core radius as a fraction of the tumor radius.
    pub necrosis_fraction: f64,
    /// Uniform random shift of the center, in mm per axis.
    pub center_jitter_mm: [f64; 3],
    pub modalities: Vec<Modality>,
    pub intensity: BTreeMap<Modality, IntensityModel>,
    pub seed: u64,
    pub patient_id: Option<String>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let modalities = vec![Modality::T1, Modality::T2, Modality::CT, Modality::PET];
        PhantomSpec {
            dims: [64, 64, 16],
            spacing: [0.75, 0.75, 5.0],
            center_mm: None,
            radii_mm: [12.0, 10.0, 25.0],
            necrosis_fraction: 0.5,
            center_jitter_mm: [0.0; 3],
            intensity: modalities.iter().map(|&m| (m, IntensityModel::default_for(m))).collect(),
            modalities,
            seed: 0,
            patient_id: None,
        }
    }
}

impl PhantomSpec {
    fn geometry(&self) -> Result<Geometry, VolumeError> {
        let [dx, dy, dz] = self.spacing;
        Geometry::new(self.dims, Spacing::new(dx, dy, dz)?, [0.0; 3])
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(0.0..1.0).contains(&self.necrosis_fraction) {
            return Err(PhantomError::BadNecrosis(self.necrosis_fraction));
        }
        if self.radii_mm.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(PhantomError::BadRadii(self.radii_mm));
        }
        if self.modalities.is_empty() {
            return Err(PhantomError::NoModalities);
        }
        for m in &self.modalities {
            let model = self.model(*m);
            if !(model.noise_std >= 0.0) {
                return Err(PhantomError::BadNoise(*m));
            }
        }
        self.geometry()?;
        let center = self.nominal_center();
        for a in 0..3 {
            let hi = (self.dims[a] - 1) as f64 * self.spacing[a];
            let reach = self.radii_mm[a] + self.center_jitter_mm[a].abs();
            if center[a] - reach < -self.spacing[a] / 2.0 || center[a] + reach > hi + self.spacing[a] / 2.0 {
                return Err(PhantomError::TumorOutside(['x', 'y', 'z'][a]));
            }
        }
        Ok(())
    }

    fn nominal_center(&self) -> [f64; 3] {
        self.center_mm
            .unwrap_or_else(|| [0, 1, 2].map(|a| (self.dims[a] - 1) as f64 * self.spacing[a] / 2.0))
    }

    fn model(&self, m: Modality) -> IntensityModel {
        self.intensity
            .get(&m)
            .copied()
            .unwrap_or_else(|| IntensityModel::default_for(m))
    }
}

/// Voxel labels before intensities are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Tumor,
    Necrosis,
}

pub fn generate_study(spec: &PhantomSpec) -> Result<Study, PhantomError> {
    spec.validate()?;
    let g = spec.geometry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nominal = spec.nominal_center();
    let center: [f64; 3] = [0, 1, 2].map(|a| {
        let j = spec.center_jitter_mm[a].abs();
        if j > 0.0 {
            nominal[a] + rng.random_range(-j..=j)
        } else {
            nominal[a]
        }
    });
    let f = spec.necrosis_fraction;
    let mut tissue = Vec::with_capacity(g.len());
    for z in 0..g.dims[2] {
        for y in 0..g.dims[1] {
            for x in 0..g.dims[0] {
                let p = g.position(x, y, z);
                let r2: f64 = (0..3).map(|a| ((p[a] - center[a]) / spec.radii_mm[a]).powi(2)).sum();
                tissue.push(if r2 > 1.0 {
                    Tissue::Background
                } else if f > 0.0 && r2 <= f * f {
                    Tissue::Necrosis
                } else {
                    Tissue::Tumor
                });
            }
        }
    }
    let mut volumes = BTreeMap::new();
    for &m in &spec.modalities {
        let model = spec.model(m);
        let noise = Normal::new(0.0f32, model.noise_std).map_err(|_| PhantomError::BadNoise(m))?;
        let data = tissue
            .iter()
            .map(|t| {
                let base = match t {
                    Tissue::Background => model.background,
                    Tissue::Tumor => model.tumor,
                    Tissue::Necrosis => model.necrosis,
                };
                if model.noise_std > 0.0 {
                    base + noise.sample(&mut rng)
                } else {
                    base
                }
            })
            .collect();
        volumes.insert(m, Volume::new(g, m, data)?);
    }
    let mut masks = BTreeMap::new();
    let t2: Vec<u8> = tissue.iter().map(|&t| u8::from(t != Tissue::Background)).collect();
    let pet: Vec<u8> = tissue.iter().map(|&t| u8::from(t == Tissue::Tumor)).collect();
    if volumes.contains_key(&Modality::T2) {
        masks.insert(Target::T2, BinaryMask::new(g, Target::T2, t2)?);
    }
    if volumes.contains_key(&Modality::PET) {
        masks.insert(Target::PET, BinaryMask::new(g, Target::PET, pet)?);
    }
    Ok(Study {
        patient_id: spec
            .patient_id
            .clone()
            .unwrap_or_else(|| format!("phantom_{:03}", spec.seed)),
        volumes,
        masks,
    })
}

/// `n` phantoms with consecutive seeds starting at `spec.seed`.
pub fn generate_cohort(spec: &PhantomSpec, n: usize) -> Result<Vec<Study>, PhantomError> {
    (0..n)
        .map(|i| {
            let s = PhantomSpec {
                seed: spec.seed + i as u64,
                patient_id: spec.patient_id.as_ref().map(|p| format!("{p}_{i:03}")),
                ..spec.clone()
            };
            generate_study(&s)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dsc;
    use crate::volume::validate_study;

    fn unit_spec(fraction: f64) -> PhantomSpec {
        PhantomSpec {
            dims: [24, 24, 24],
            spacing: [1.0, 1.0, 1.0],
            radii_mm: [8.0, 8.0, 8.0],
            necrosis_fraction: fraction,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn no_necrosis_means_equal_masks() {
        let s = generate_study(&unit_spec(0.0)).unwrap();
        assert_eq!(s.mask(Target::T2).unwrap().voxels(), s.mask(Target::PET).unwrap().voxels());
        assert!(validate_study(&s).is_empty());
    }

    #[test]
    fn half_core_volume_ratio() {
        let s = generate_study(&unit_spec(0.5)).unwrap();
        let t2 = s.mask(Target::T2).unwrap();
        let pet = s.mask(Target::PET).unwrap();
        assert!(pet.voxels().iter().zip(t2.voxels()).all(|(&p, &t)| p <= t));
        assert!(pet.count() < t2.count());
        let ratio = pet.count() as f64 / t2.count() as f64;
        assert!((ratio - 0.875).abs() <= 0.875 * 0.03, "{ratio}");
        // DSC between the two masks matches the analytic value
        let analytic = 2.0 * 0.875 / 1.875;
        let d = dsc(t2, pet).unwrap();
        assert!((d - analytic).abs() < 0.02, "{d}");
    }

    #[test]
    fn pet_is_dark_in_the_core() {
        let s = generate_study(&unit_spec(0.5)).unwrap();
        let pet = s.volume(Modality::PET).unwrap();
        assert!(pet.at(12, 12, 12) < 3.0);
        assert!(pet.at(12, 12, 18) > 5.0);
    }

    #[test]
    fn same_seed_same_study() {
        let spec = PhantomSpec {
            center_jitter_mm: [3.0, 3.0, 5.0],
            seed: 4,
            ..PhantomSpec::default()
        };
        assert_eq!(generate_study(&spec).unwrap(), generate_study(&spec).unwrap());
        let other = PhantomSpec { seed: 5, ..spec.clone() };
        assert_ne!(generate_study(&spec).unwrap(), generate_study(&other).unwrap());
        let cohort = generate_cohort(&spec, 3).unwrap();
        assert_eq!(cohort.len(), 3);
        assert_eq!(cohort[0], generate_study(&spec).unwrap());
        assert!(cohort.iter().all(|s| validate_study(s).is_empty()));
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert_eq!(generate_study(&unit_spec(1.0)).unwrap_err(), PhantomError::BadNecrosis(1.0));
        let big = PhantomSpec {
            radii_mm: [40.0, 5.0, 5.0],
            ..PhantomSpec::default()
        };
        assert_eq!(generate_study(&big).unwrap_err(), PhantomError::TumorOutside('x'));
    }
}
