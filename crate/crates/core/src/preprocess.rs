//! In-plane resampling, cropping and intensity normalization of studies.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{
    BinaryMask, Geometry, Gridded, Modality, Spacing, Study, Target, Volume, VolumeError, VoxelGrid,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PreprocessError {
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("resampling gives {extent} voxels along {axis}")]
    DegenerateDims { axis: char, extent: i64 },
    #[error("z-score needs at least two voxels, got {0}")]
    TooFewVoxels(usize),
    #[error("volume has zero variance")]
    ZeroVariance,
    #[error("SUV normalization expects a PET volume, got {0}")]
    NotPet(Modality),
    #[error("{what} must be positive and finite, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("crop box {min:?}..={max:?} does not fit dims {dims:?}")]
    BoxOutOfRange {
        min: [usize; 3],
        max: [usize; 3],
        dims: [usize; 3],
    },
    #[error("study has no {0} volume")]
    MissingModality(Modality),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImageInterp {
    #[default]
    CubicBspline,
    Trilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaskInterp {
    #[default]
    Nearest,
    /// Linear interpolation of the 0/1 field followed by `>= 0.5`.
    LinearThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResamplePlan {
    /// Output in-plane spacing in millimeters.
    pub target_inplane: f64,
    pub image_interp: ImageInterp,
    pub mask_interp: MaskInterp,
}

impl Default for ResamplePlan {
    fn default() -> Self {
        ResamplePlan {
            target_inplane: 0.75,
            image_interp: ImageInterp::CubicBspline,
            mask_interp: MaskInterp::Nearest,
        }
    }
}

impl ResamplePlan {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if !(self.target_inplane.is_finite() && self.target_inplane > 0.0) {
            return Err(PreprocessError::InvalidPlan(format!(
                "target_inplane must be positive, got {}",
                self.target_inplane
            )));
        }
        Ok(())
    }
}

/// Inclusive voxel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl CropBox {
    pub fn full(dims: [usize; 3]) -> Self {
        CropBox {
            min: [0; 3],
            max: dims.map(|d| d - 1),
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.max[a] - self.min[a] + 1)
    }
}

/// Types that can be resampled in-plane.
pub trait Resample: VoxelGrid {
    fn resample_inplane(&self, plan: &ResamplePlan) -> Result<Self, PreprocessError>;
}

/// Output grid and per-axis sampling positions for an in-plane resample.
struct InplaneGrid {
    geometry: Geometry,
    /// Continuous source index for each output index, per in-plane axis.
    coords: [Vec<f64>; 2],
}

fn inplane_grid(g: &Geometry, plan: &ResamplePlan) -> Result<InplaneGrid, PreprocessError> {
    plan.validate()?;
    let t = plan.target_inplane;
    let sp = g.spacing.as_array();
    let mut dims = g.dims;
    let mut origin = g.origin;
    let mut coords: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for a in 0..2 {
        let n = (g.dims[a] as f64 * sp[a] / t).round() as i64;
        if n < 1 {
            return Err(PreprocessError::DegenerateDims {
                axis: ['x', 'y'][a],
                extent: n,
            });
        }
        dims[a] = n as usize;
        // Output voxels tile the same physical extent, starting at the
        // outer edge of the first input voxel.
        origin[a] = g.origin[a] - sp[a] / 2.0 + t / 2.0;
        coords[a] = (0..dims[a])
            .map(|i| ((i as f64 + 0.5) * t - sp[a] / 2.0) / sp[a])
            .collect();
    }
    let spacing = Spacing::new(t, t, sp[2])?;
    Ok(InplaneGrid {
        geometry: Geometry::new(dims, spacing, origin)?,
        coords,
    })
}

/// Applies a 1D resampler along x then along y.
fn separable(
    src: &[f64],
    dims: [usize; 3],
    out_dims: [usize; 3],
    mut line: impl FnMut(usize, &[f64], &mut [f64]),
) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let [mx, my, _] = out_dims;
    let mut tmp = vec![0.0; mx * ny * nz];
    let mut out_line = vec![0.0; mx];
    for row in 0..ny * nz {
        line(0, &src[row * nx..(row + 1) * nx], &mut out_line);
        tmp[row * mx..(row + 1) * mx].copy_from_slice(&out_line);
    }
    let mut out = vec![0.0; mx * my * nz];
    let mut in_col = vec![0.0; ny];
    let mut out_col = vec![0.0; my];
    for z in 0..nz {
        for x in 0..mx {
            for y in 0..ny {
                in_col[y] = tmp[x + mx * (y + ny * z)];
            }
            line(1, &in_col, &mut out_col);
            for y in 0..my {
                out[x + mx * (y + my * z)] = out_col[y];
            }
        }
    }
    out
}

fn linear_at(s: &[f64], u: f64) -> f64 {
    let n = s.len();
    if n == 1 {
        return s[0];
    }
    let u = u.clamp(0.0, (n - 1) as f64);
    let i = (u.floor() as usize).min(n - 2);
    let f = u - i as f64;
    s[i] * (1.0 - f) + s[i + 1] * f
}

fn nearest_index(n: usize, u: f64) -> usize {
    ((u + 0.5).floor().max(0.0) as usize).min(n - 1)
}

/// Mirror-extends index `k` into `0..n` (whole-sample symmetry).
fn mirror(k: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = k.rem_euclid(period);
    (if m < n as i64 { m } else { period - m }) as usize
}

/// Cubic B-spline coefficients interpolating `s` under mirror boundaries,
/// obtained by solving the tridiagonal system `(c[k-1] + 4c[k] + c[k+1]) / 6 = s[k]`.
pub fn bspline_coefficients(s: &[f64]) -> Vec<f64> {
    let n = s.len();
    if n < 2 {
        return s.to_vec();
    }
    let mut sub = vec![1.0; n];
    let diag = vec![4.0; n];
    let mut sup = vec![1.0; n];
    sup[0] = 2.0;
    sub[n - 1] = 2.0;
    let rhs: Vec<f64> = s.iter().map(|v| 6.0 * v).collect();
    // Thomas algorithm
    let mut cp = vec![0.0; n];
    let mut dp = vec![0.0; n];
    cp[0] = sup[0] / diag[0];
    dp[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - sub[i] * cp[i - 1];
        cp[i] = if i + 1 < n { sup[i] / m } else { 0.0 };
        dp[i] = (rhs[i] - sub[i] * dp[i - 1]) / m;
    }
    let mut c = vec![0.0; n];
    c[n - 1] = dp[n - 1];
    for i in (0..n - 1).rev() {
        c[i] = dp[i] - cp[i] * c[i + 1];
    }
    c
}

fn bspline3(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + a * a * a / 2.0
    } else if a < 2.0 {
        let b = 2.0 - a;
        b * b * b / 6.0
    } else {
        0.0
    }
}

fn bspline_at(c: &[f64], u: f64) -> f64 {
    let base = u.floor() as i64;
    (base - 1..=base + 2)
        .map(|k| c[mirror(k, c.len())] * bspline3(u - k as f64))
        .sum()
}

impl Resample for Volume {
    fn resample_inplane(&self, plan: &ResamplePlan) -> Result<Self, PreprocessError> {
        let grid = inplane_grid(self.geometry(), plan)?;
        let src: Vec<f64> = self.voxels().iter().map(|&v| v as f64).collect();
        let coords = &grid.coords;
        let out = match plan.image_interp {
            ImageInterp::Trilinear => separable(&src, self.dims(), grid.geometry.dims, |a, s, o| {
                for (dst, &u) in o.iter_mut().zip(&coords[a]) {
                    *dst = linear_at(s, u);
                }
            }),
            ImageInterp::CubicBspline => separable(&src, self.dims(), grid.geometry.dims, |a, s, o| {
                let c = bspline_coefficients(s);
                for (dst, &u) in o.iter_mut().zip(&coords[a]) {
                    *dst = bspline_at(&c, u);
                }
            }),
        };
        Ok(self.with_geometry(grid.geometry, out.into_iter().map(|v| v as f32).collect())?)
    }
}

impl Resample for BinaryMask {
    fn resample_inplane(&self, plan: &ResamplePlan) -> Result<Self, PreprocessError> {
        let grid = inplane_grid(self.geometry(), plan)?;
        let src: Vec<f64> = self.voxels().iter().map(|&v| v as f64).collect();
        let coords = &grid.coords;
        let out = match plan.mask_interp {
            MaskInterp::Nearest => separable(&src, self.dims(), grid.geometry.dims, |a, s, o| {
                for (dst, &u) in o.iter_mut().zip(&coords[a]) {
                    *dst = s[nearest_index(s.len(), u)];
                }
            }),
            MaskInterp::LinearThreshold => separable(&src, self.dims(), grid.geometry.dims, |a, s, o| {
                for (dst, &u) in o.iter_mut().zip(&coords[a]) {
                    *dst = linear_at(s, u);
                }
            }),
        };
        let bits = out.into_iter().map(|v| u8::from(v >= 0.5)).collect();
        Ok(self.with_geometry(grid.geometry, bits)?)
    }
}

/// Resamples x and y to `plan.target_inplane`; z and its spacing are kept.
pub fn resample_inplane<V: Resample>(v: &V, plan: &ResamplePlan) -> Result<V, PreprocessError> {
    v.resample_inplane(plan)
}

/// Copies the voxels inside `b` (inclusive) into a new grid whose origin
/// is moved to the box corner.
pub fn crop<V: VoxelGrid>(v: &V, b: &CropBox) -> Result<V, PreprocessError> {
    let g = v.geometry();
    let dims = g.dims;
    if (0..3).any(|a| b.min[a] > b.max[a] || b.max[a] >= dims[a]) {
        return Err(PreprocessError::BoxOutOfRange {
            min: b.min,
            max: b.max,
            dims,
        });
    }
    let ext = b.extent();
    let sp = g.spacing.as_array();
    let origin = [0, 1, 2].map(|a| g.origin[a] + b.min[a] as f64 * sp[a]);
    let geometry = Geometry::new(ext, g.spacing, origin)?;
    let src = v.elems();
    let mut out = Vec::with_capacity(geometry.len());
    for z in b.min[2]..=b.max[2] {
        for y in b.min[1]..=b.max[1] {
            let start = g.index(b.min[0], y, z);
            out.extend_from_slice(&src[start..start + ext[0]]);
        }
    }
    Ok(v.rebuild(geometry, out)?)
}

/// Per-volume z-score with the population standard deviation.
pub fn zscore_normalize(v: &Volume) -> Result<Volume, PreprocessError> {
    let n = v.voxels().len();
    if n < 2 {
        return Err(PreprocessError::TooFewVoxels(n));
    }
    let mean = v.voxels().iter().map(|&x| x as f64).sum::<f64>() / n as f64;
    let var = v
        .voxels()
        .iter()
        .map(|&x| (x as f64 - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if std == 0.0 || std <= mean.abs() * 1e-12 {
        return Err(PreprocessError::ZeroVariance);
    }
    Ok(v.with_voxels(
        v.voxels()
            .iter()
            .map(|&x| ((x as f64 - mean) / std) as f32)
            .collect(),
    )?)
}

/// Body-weight SUV from decay-corrected activity concentration (Bq/ml).
pub fn suv_normalize(pet: &Volume, body_weight_kg: f64, injected_dose_bq: f64) -> Result<Volume, PreprocessError> {
    if pet.modality() != Modality::PET {
        return Err(PreprocessError::NotPet(pet.modality()));
    }
    for (what, value) in [("body weight", body_weight_kg), ("injected dose", injected_dose_bq)] {
        if !(value.is_finite() && value > 0.0) {
            return Err(PreprocessError::NonPositive { what, value });
        }
    }
    let factor = body_weight_kg * 1000.0 / injected_dose_bq;
    Ok(pet.with_voxels(
        pet.voxels()
            .iter()
            .map(|&c| (c as f64 * factor) as f32)
            .collect(),
    )?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuvParams {
    pub body_weight_kg: f64,
    pub injected_dose_bq: f64,
}

/// Ordered pipeline applied to a whole study: resample, crop, normalize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessPlan {
    pub resample: Option<ResamplePlan>,
    pub crop: Option<CropBox>,
    pub zscore: Vec<Modality>,
    pub suv: Option<SuvParams>,
}

impl Default for PreprocessPlan {
    fn default() -> Self {
        PreprocessPlan {
            resample: Some(ResamplePlan::default()),
            crop: None,
            zscore: vec![Modality::T1, Modality::T2],
            suv: None,
        }
    }
}

pub fn preprocess_study(s: &Study, plan: &PreprocessPlan) -> Result<Study, PreprocessError> {
    let mut volumes: BTreeMap<Modality, Volume> = s.volumes.clone();
    let mut masks: BTreeMap<Target, BinaryMask> = s.masks.clone();
    if let Some(r) = &plan.resample {
        for v in volumes.values_mut() {
            *v = v.resample_inplane(r)?;
        }
        for m in masks.values_mut() {
            *m = m.resample_inplane(r)?;
        }
    }
    if let Some(b) = &plan.crop {
        for v in volumes.values_mut() {
            *v = crop(v, b)?;
        }
        for m in masks.values_mut() {
            *m = crop(m, b)?;
        }
    }
    for m in &plan.zscore {
        let v = volumes.get_mut(m).ok_or(PreprocessError::MissingModality(*m))?;
        *v = zscore_normalize(v)?;
    }
    if let Some(p) = &plan.suv {
        let v = volumes
            .get_mut(&Modality::PET)
            .ok_or(PreprocessError::MissingModality(Modality::PET))?;
        *v = suv_normalize(v, p.body_weight_kg, p.injected_dose_bq)?;
    }
    Ok(Study {
        patient_id: s.patient_id.clone(),
        volumes,
        masks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn geom(dims: [usize; 3], dx: f64, dz: f64) -> Geometry {
        Geometry::new(dims, Spacing::new(dx, dx, dz).unwrap(), [0.0; 3]).unwrap()
    }

    fn plan(t: f64) -> ResamplePlan {
        ResamplePlan {
            target_inplane: t,
            ..ResamplePlan::default()
        }
    }

    #[test]
    fn factor_two_geometry() {
        let v = Volume::filled(geom([4, 4, 4], 1.5, 3.0), Modality::T2, 1.0).unwrap();
        let r = resample_inplane(&v, &plan(0.75)).unwrap();
        assert_eq!(r.dims(), [8, 8, 4]);
        assert_eq!(r.spacing().as_array(), [0.75, 0.75, 3.0]);
        // first output voxel sits a quarter input voxel before the old center
        assert!((r.geometry().origin[0] + 0.375).abs() < 1e-12);
    }

    #[test]
    fn constants_are_reproduced() {
        for interp in [ImageInterp::CubicBspline, ImageInterp::Trilinear] {
            for t in [0.3, 0.75, 1.1, 2.9] {
                let v = Volume::filled(geom([7, 5, 3], 1.2, 4.0), Modality::T1, 5.0).unwrap();
                let p = ResamplePlan {
                    target_inplane: t,
                    image_interp: interp,
                    ..ResamplePlan::default()
                };
                let r = resample_inplane(&v, &p).unwrap();
                assert!(r.voxels().iter().all(|&x| (x - 5.0).abs() < 1e-5));
                assert_eq!(r.dims()[2], 3);
            }
        }
    }

    #[test]
    fn bspline_interpolates_samples() {
        let s = [0.3, -1.0, 2.5, 4.0, 0.0, 1.0];
        let c = bspline_coefficients(&s);
        for (k, &v) in s.iter().enumerate() {
            assert!((bspline_at(&c, k as f64) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_box_upsample_quadruples_count() {
        let g = geom([10, 9, 3], 1.5, 5.0);
        let mut bits = vec![0u8; g.len()];
        let (lo, hi) = ([2, 3, 0], [6, 5, 1]);
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    bits[g.index(x, y, z)] = 1;
                }
            }
        }
        let m = BinaryMask::new(g, Target::T2, bits).unwrap();
        let r = resample_inplane(&m, &plan(0.75)).unwrap();
        // brute-force oracle: output voxel center maps inside an input box voxel
        let rg = *r.geometry();
        let mut expected = 0;
        for z in 0..rg.dims[2] {
            for y in 0..rg.dims[1] {
                for x in 0..rg.dims[0] {
                    let p = rg.position(x, y, z);
                    let inside = (0..2).all(|a| {
                        let src = (p[a] - g.origin[a]) / 1.5;
                        let k = (src + 0.5).floor() as i64;
                        k >= lo[a] as i64 && k <= hi[a] as i64
                    }) && z >= lo[2] && z <= hi[2];
                    if inside {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(r.count(), expected);
        assert_eq!(r.count(), m.count() * 4);
    }

    #[test]
    fn linear_threshold_mask_is_binary() {
        let g = geom([6, 6, 2], 1.0, 2.0);
        let bits: Vec<u8> = (0..g.len()).map(|i| (i % 3 == 0) as u8).collect();
        let m = BinaryMask::new(g, Target::PET, bits).unwrap();
        let p = ResamplePlan {
            target_inplane: 0.4,
            mask_interp: MaskInterp::LinearThreshold,
            ..ResamplePlan::default()
        };
        let r = resample_inplane(&m, &p).unwrap();
        assert!(r.voxels().iter().all(|&b| b <= 1));
        assert_eq!(r.dims()[2], 2);
    }

    #[test]
    fn degenerate_target_is_rejected() {
        let v = Volume::filled(geom([2, 2, 2], 1.0, 1.0), Modality::T1, 0.0).unwrap();
        assert!(matches!(
            resample_inplane(&v, &plan(100.0)),
            Err(PreprocessError::DegenerateDims { axis: 'x', .. })
        ));
        assert!(matches!(resample_inplane(&v, &plan(0.0)), Err(PreprocessError::InvalidPlan(_))));
    }

    #[test]
    fn zscore_examples() {
        let g = geom([3, 1, 1], 1.0, 1.0);
        let v = Volume::new(g, Modality::T1, vec![1.0, 2.0, 3.0]).unwrap();
        let z = zscore_normalize(&v).unwrap();
        let e = [-1.224745, 0.0, 1.224745];
        for (a, b) in z.voxels().iter().zip(e) {
            assert!((a - b).abs() < 1e-5);
        }
        let again = zscore_normalize(&z).unwrap();
        for (a, b) in again.voxels().iter().zip(z.voxels()) {
            assert!((a - b).abs() < 1e-5);
        }
        let c = Volume::filled(g, Modality::T1, 4.0).unwrap();
        assert_eq!(zscore_normalize(&c), Err(PreprocessError::ZeroVariance));
        let one = Volume::filled(geom([1, 1, 1], 1.0, 1.0), Modality::T1, 4.0).unwrap();
        assert_eq!(zscore_normalize(&one), Err(PreprocessError::TooFewVoxels(1)));
    }

    #[test]
    fn suv_examples() {
        let g = geom([4, 4, 2], 1.0, 1.0);
        let pet = Volume::filled(g, Modality::PET, 5000.0).unwrap();
        let s = suv_normalize(&pet, 70.0, 3.5e8).unwrap();
        assert!(s.voxels().iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert_eq!(s.modality(), Modality::PET);
        let zero = Volume::filled(g, Modality::PET, 0.0).unwrap();
        assert!(suv_normalize(&zero, 70.0, 3.5e8).unwrap().voxels().iter().all(|&v| v == 0.0));
        let half = suv_normalize(&pet, 70.0, 7e8).unwrap();
        assert!(half.voxels().iter().all(|&v| (v - 0.5).abs() < 1e-7));
        assert!(matches!(suv_normalize(&pet, 0.0, 1.0), Err(PreprocessError::NonPositive { .. })));
        assert!(matches!(suv_normalize(&pet, 70.0, -1.0), Err(PreprocessError::NonPositive { .. })));
        let t2 = Volume::filled(g, Modality::T2, 1.0).unwrap();
        assert_eq!(suv_normalize(&t2, 70.0, 1.0), Err(PreprocessError::NotPet(Modality::T2)));
    }

    #[test]
    fn crop_examples() {
        let g = Geometry::new([10, 10, 10], Spacing::new(0.5, 0.7, 2.0).unwrap(), [1.0, 2.0, 3.0]).unwrap();
        let v = Volume::new(g, Modality::CT, (0..1000).map(|i| i as f32).collect()).unwrap();
        assert_eq!(crop(&v, &CropBox::full(g.dims)).unwrap(), v);
        let b = CropBox {
            min: [2, 0, 0],
            max: [5, 9, 9],
        };
        let c = crop(&v, &b).unwrap();
        assert_eq!(c.dims(), [4, 10, 10]);
        assert!((c.geometry().origin[0] - 2.0).abs() < 1e-12);
        assert_eq!(c.at(0, 3, 4), v.at(2, 3, 4));
        let bad = CropBox {
            min: [0, 0, 0],
            max: [10, 1, 1],
        };
        assert!(matches!(crop(&v, &bad), Err(PreprocessError::BoxOutOfRange { .. })));
        let m = BinaryMask::threshold(&v, Target::T2, 500.0);
        let cm = crop(&m, &b).unwrap();
        assert!(cm.voxels().iter().all(|&x| x <= 1));
    }

    #[test]
    fn study_pipeline_keeps_alignment() {
        let g = geom([8, 8, 3], 1.5, 5.0);
        let mut volumes = BTreeMap::new();
        for (m, off) in [(Modality::T1, 0.0), (Modality::T2, 1.0), (Modality::PET, 2.0)] {
            let data = (0..g.len()).map(|i| (i % 7) as f32 + off).collect();
            volumes.insert(m, Volume::new(g, m, data).unwrap());
        }
        let mut masks = BTreeMap::new();
        let bits: Vec<u8> = (0..g.len()).map(|i| (i % 5 == 0) as u8).collect();
        masks.insert(Target::T2, BinaryMask::new(g, Target::T2, bits).unwrap());
        let s = Study {
            patient_id: "p".into(),
            volumes,
            masks,
        };
        let plan = PreprocessPlan {
            crop: Some(CropBox {
                min: [1, 1, 0],
                max: [12, 10, 2],
            }),
            suv: Some(SuvParams {
                body_weight_kg: 70.0,
                injected_dose_bq: 3.5e8,
            }),
            ..PreprocessPlan::default()
        };
        let out = preprocess_study(&s, &plan).unwrap();
        assert!(crate::volume::validate_study(&out).is_empty());
        assert_eq!(out.geometry().unwrap().dims, [12, 10, 3]);
    }

    proptest! {
        #[test]
        fn zscore_statistics(vals in proptest::collection::vec(-1000.0f32..1000.0, 2..200)) {
            let n = vals.len();
            let g = geom([n, 1, 1], 1.0, 1.0);
            let v = Volume::new(g, Modality::T1, vals).unwrap();
            match zscore_normalize(&v) {
                Ok(z) => {
                    let m = z.voxels().iter().map(|&x| x as f64).sum::<f64>() / n as f64;
                    let s = (z.voxels().iter().map(|&x| (x as f64 - m).powi(2)).sum::<f64>() / n as f64).sqrt();
                    prop_assert!(m.abs() < 1e-5);
                    prop_assert!((s - 1.0).abs() < 1e-4);
                }
                Err(e) => prop_assert_eq!(e, PreprocessError::ZeroVariance),
            }
        }

        #[test]
        fn suv_is_linear(c in 0.0f32..1e5, k in 1u32..50) {
            let g = geom([2, 1, 1], 1.0, 1.0);
            let a = Volume::filled(g, Modality::PET, c).unwrap();
            let b = Volume::filled(g, Modality::PET, c * k as f32).unwrap();
            let sa = suv_normalize(&a, 70.0, 3.5e8).unwrap().voxels()[0] as f64;
            let sb = suv_normalize(&b, 70.0, 3.5e8).unwrap().voxels()[0] as f64;
            prop_assert!((sb - sa * k as f64).abs() <= 1e-5 * sb.abs().max(1.0));
        }

        #[test]
        fn resample_keeps_z(nx in 1usize..9, ny in 1usize..9, nz in 1usize..5, t in 0.3f64..2.0) {
            let g = geom([nx, ny, nz], 1.0, 3.0);
            let v = Volume::new(g, Modality::T2, (0..g.len()).map(|i| i as f32).collect()).unwrap();
            if let Ok(r) = resample_inplane(&v, &plan(t)) {
                prop_assert_eq!(r.dims()[2], nz);
                prop_assert_eq!(r.spacing().dz, 3.0);
                let ext = r.dims()[0] as f64 * t;
                prop_assert!((ext - nx as f64).abs() <= t / 2.0 + 1e-9);
            }
        }
    }
}
