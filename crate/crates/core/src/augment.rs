//! Geometric augmentation applied identically to every member of a patch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::sampler::Patch;
use crate::volume::{Gridded, VolumeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

/// Coarse random displacement field, in voxels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub control_spacing: f64,
    pub max_displacement: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub scale: [f64; 2],
    pub rotation_deg: [f64; 2],
    pub mirror_axes: Vec<Axis>,
    /// Probability of flipping along each listed axis.
    pub mirror_probability: f64,
    pub elastic: ElasticParams,
    pub rng_seed: u64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            scale: [0.9, 1.1],
            rotation_deg: [-15.0, 15.0],
            mirror_axes: vec![Axis::X, Axis::Y],
            mirror_probability: 0.5,
            elastic: ElasticParams {
                control_spacing: 32.0,
                max_displacement: 4.0,
            },
            rng_seed: 0,
        }
    }
}

impl AugmentParams {
    /// Parameters whose transform maps every voxel onto itself.
    pub fn identity() -> Self {
        AugmentParams {
            scale: [1.0, 1.0],
            rotation_deg: [0.0, 0.0],
            mirror_axes: vec![],
            mirror_probability: 0.0,
            elastic: ElasticParams {
                control_spacing: 32.0,
                max_displacement: 0.0,
            },
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.scale[0] > 0.0 && self.scale[0] <= self.scale[1]) {
            return Err(format!("scale range {:?} must be positive and ordered", self.scale));
        }
        if self.rotation_deg[0] > self.rotation_deg[1] {
            return Err(format!("rotation range {:?} is not ordered", self.rotation_deg));
        }
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return Err(format!("mirror probability {} outside [0, 1]", self.mirror_probability));
        }
        let e = self.elastic;
        if !(e.control_spacing > 0.0 && e.max_displacement >= 0.0 && e.max_displacement < e.control_spacing) {
            return Err(format!(
                "elastic displacement {} must be below control spacing {}",
                e.max_displacement, e.control_spacing
            ));
        }
        Ok(())
    }
}

/// A sampled in-plane transform; maps output voxels to source positions.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialTransform {
    dims: [usize; 3],
    scale: f64,
    angle: f64,
    mirror: [bool; 2],
    /// Control-point grid (`gx × gy`, x fastest) of (dx, dy) displacements.
    grid: [usize; 2],
    control_spacing: f64,
    displacements: Vec<[f64; 2]>,
}

impl SpatialTransform {
    pub fn sample<R: Rng + ?Sized>(dims: [usize; 3], params: &AugmentParams, rng: &mut R) -> Self {
        let scale = rng.random_range(params.scale[0]..=params.scale[1]);
        let angle = rng.random_range(params.rotation_deg[0]..=params.rotation_deg[1]).to_radians();
        let mut mirror = [false; 2];
        for axis in &params.mirror_axes {
            let flip = rng.random_bool(params.mirror_probability);
            mirror[*axis as usize] = flip;
        }
        let e = params.elastic;
        let grid = [0, 1].map(|a| ((dims[a].max(2) - 1) as f64 / e.control_spacing).ceil() as usize + 1);
        let displacements = if e.max_displacement > 0.0 {
            (0..grid[0] * grid[1])
                .map(|_| {
                    [
                        rng.random_range(-e.max_displacement..=e.max_displacement),
                        rng.random_range(-e.max_displacement..=e.max_displacement),
                    ]
                })
                .collect()
        } else {
            vec![[0.0; 2]; grid[0] * grid[1]]
        };
        SpatialTransform {
            dims,
            scale,
            angle,
            mirror,
            grid,
            control_spacing: e.control_spacing,
            displacements,
        }
    }

    fn displacement(&self, x: f64, y: f64) -> [f64; 2] {
        let [gx, gy] = self.grid;
        let u = (x / self.control_spacing).clamp(0.0, (gx - 1) as f64);
        let v = (y / self.control_spacing).clamp(0.0, (gy - 1) as f64);
        let (i, j) = ((u.floor() as usize).min(gx.saturating_sub(2)), (v.floor() as usize).min(gy.saturating_sub(2)));
        let (fu, fv) = (u - i as f64, v - j as f64);
        let at = |a: usize, b: usize| self.displacements[a.min(gx - 1) + gx * b.min(gy - 1)];
        let mut d = [0.0; 2];
        for (c, dc) in d.iter_mut().enumerate() {
            *dc = at(i, j)[c] * (1.0 - fu) * (1.0 - fv)
                + at(i + 1, j)[c] * fu * (1.0 - fv)
                + at(i, j + 1)[c] * (1.0 - fu) * fv
                + at(i + 1, j + 1)[c] * fu * fv;
        }
        d
    }

    /// Source in-plane position for output voxel `(x, y)`.
    pub fn source(&self, x: usize, y: usize) -> [f64; 2] {
        let cx = (self.dims[0] as f64 - 1.0) / 2.0;
        let cy = (self.dims[1] as f64 - 1.0) / 2.0;
        let mut qx = x as f64 - cx;
        let mut qy = y as f64 - cy;
        if self.mirror[0] {
            qx = -qx;
        }
        if self.mirror[1] {
            qy = -qy;
        }
        let (s, c) = self.angle.sin_cos();
        let rx = (c * qx + s * qy) / self.scale;
        let ry = (-s * qx + c * qy) / self.scale;
        let d = self.displacement(x as f64, y as f64);
        [rx + cx + d[0], ry + cy + d[1]]
    }

    fn source_map(&self) -> Vec<[f64; 2]> {
        let [nx, ny, _] = self.dims;
        let mut out = Vec::with_capacity(nx * ny);
        for y in 0..ny {
            for x in 0..nx {
                out.push(self.source(x, y));
            }
        }
        out
    }

    /// Resamples `data` with bilinear in-plane interpolation (border clamped).
    pub fn apply_linear(&self, data: &[f32]) -> Vec<f32> {
        let [nx, ny, nz] = self.dims;
        let map = self.source_map();
        let mut out = vec![0.0; data.len()];
        for z in 0..nz {
            let plane = &data[z * nx * ny..(z + 1) * nx * ny];
            for (k, &[sx, sy]) in map.iter().enumerate() {
                let u = sx.clamp(0.0, (nx - 1) as f64);
                let v = sy.clamp(0.0, (ny - 1) as f64);
                let i = (u.floor() as usize).min(nx.saturating_sub(2));
                let j = (v.floor() as usize).min(ny.saturating_sub(2));
                let (fu, fv) = (u - i as f64, v - j as f64);
                let at = |a: usize, b: usize| plane[a.min(nx - 1) + nx * b.min(ny - 1)] as f64;
                let val = at(i, j) * (1.0 - fu) * (1.0 - fv)
                    + at(i + 1, j) * fu * (1.0 - fv)
                    + at(i, j + 1) * (1.0 - fu) * fv
                    + at(i + 1, j + 1) * fu * fv;
                out[z * nx * ny + k] = val as f32;
            }
        }
        out
    }

    /// Resamples `data` by nearest neighbour (border clamped).
    pub fn apply_nearest<T: Copy + Default>(&self, data: &[T]) -> Vec<T> {
        let [nx, ny, nz] = self.dims;
        let map = self.source_map();
        let mut out = vec![T::default(); data.len()];
        for z in 0..nz {
            let plane = &data[z * nx * ny..(z + 1) * nx * ny];
            for (k, &[sx, sy]) in map.iter().enumerate() {
                let i = ((sx + 0.5).floor().max(0.0) as usize).min(nx - 1);
                let j = ((sy + 0.5).floor().max(0.0) as usize).min(ny - 1);
                out[z * nx * ny + k] = plane[i + nx * j];
            }
        }
        out
    }
}

/// Applies one transform drawn from `rng` to every image (bilinear) and
/// mask (nearest) of the patch.
pub fn augment_with_rng<R: Rng + ?Sized>(p: &Patch, params: &AugmentParams, rng: &mut R) -> Result<Patch, VolumeError> {
    let Some(g) = p.study.geometry() else {
        return Ok(p.clone());
    };
    let t = SpatialTransform::sample(g.dims, params, rng);
    let mut out = p.clone();
    for v in out.study.volumes.values_mut() {
        *v = v.with_voxels(t.apply_linear(v.voxels()))?;
    }
    for m in out.study.masks.values_mut() {
        *m = m.with_voxels(t.apply_nearest(m.voxels()))?;
    }
    debug_assert!(out.study.volumes.values().all(|v| v.dims() == g.dims));
    Ok(out)
}

/// Like [`augment_with_rng`] with a generator seeded from `params.rng_seed`.
pub fn augment(p: &Patch, params: &AugmentParams) -> Result<Patch, VolumeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    augment_with_rng(p, params, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{BinaryMask, Geometry, Modality, Spacing, Study, Target, Volume};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn patch(dims: [usize; 3], bits: Vec<u8>) -> Patch {
        let g = Geometry::new(dims, Spacing::new(0.75, 0.75, 5.0).unwrap(), [0.0; 3]).unwrap();
        let img: Vec<f32> = (0..g.len()).map(|i| ((i * 37) % 101) as f32 / 10.0).collect();
        let mut volumes = BTreeMap::new();
        volumes.insert(Modality::T2, Volume::new(g, Modality::T2, img.clone()).unwrap());
        volumes.insert(Modality::PET, Volume::new(g, Modality::PET, img).unwrap());
        let mut masks = BTreeMap::new();
        masks.insert(Target::T2, BinaryMask::new(g, Target::T2, bits.clone()).unwrap());
        masks.insert(Target::PET, BinaryMask::new(g, Target::PET, bits).unwrap());
        Patch {
            offset: [0; 3],
            study: Study {
                patient_id: "p".into(),
                volumes,
                masks,
            },
        }
    }

    fn disk(dims: [usize; 3], r: f64) -> Vec<u8> {
        let cx = (dims[0] as f64 - 1.0) / 2.0;
        let cy = (dims[1] as f64 - 1.0) / 2.0;
        let mut out = Vec::new();
        for _z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    out.push(u8::from((x as f64 - cx).hypot(y as f64 - cy) <= r));
                }
            }
        }
        out
    }

    #[test]
    fn identity_leaves_patch_unchanged() {
        let dims = [17, 12, 3];
        let p = patch(dims, disk(dims, 4.0));
        let a = augment(&p, &AugmentParams::identity()).unwrap();
        assert_eq!(a.study.masks, p.study.masks);
        for (k, v) in &a.study.volumes {
            let orig = p.study.volume(*k).unwrap();
            assert!(v.voxels().iter().zip(orig.voxels()).all(|(x, y)| (x - y).abs() < 1e-5));
        }
    }

    #[test]
    fn mirror_twice_restores_masks() {
        let dims = [16, 11, 2];
        let bits: Vec<u8> = (0..16 * 11 * 2).map(|i| ((i * 7) % 5 == 0) as u8).collect();
        let p = patch(dims, bits);
        let params = AugmentParams {
            mirror_axes: vec![Axis::X],
            mirror_probability: 1.0,
            rng_seed: 3,
            ..AugmentParams::identity()
        };
        let once = augment(&p, &params).unwrap();
        assert_ne!(once.study.masks, p.study.masks);
        let twice = augment(&once, &params).unwrap();
        assert_eq!(twice.study.masks, p.study.masks);
        let m = once.study.mask(Target::T2).unwrap();
        let o = p.study.mask(Target::T2).unwrap();
        assert_eq!(m.at(0, 4, 1), o.at(15, 4, 1));
    }

    #[test]
    fn rotating_a_disk_keeps_its_area() {
        let dims = [64, 64, 1];
        let p = patch(dims, disk(dims, 20.0));
        let params = AugmentParams {
            rotation_deg: [10.0, 10.0],
            ..AugmentParams::identity()
        };
        let r = augment(&p, &params).unwrap();
        let before = p.study.mask(Target::T2).unwrap().count() as f64;
        let after = r.study.mask(Target::T2).unwrap().count() as f64;
        assert!((after - before).abs() / before < 0.05, "{before} -> {after}");
        assert_ne!(r.study.masks, p.study.masks);
    }

    #[test]
    fn same_seed_same_result() {
        let dims = [40, 36, 4];
        let p = patch(dims, disk(dims, 9.0));
        let params = AugmentParams {
            rng_seed: 11,
            elastic: ElasticParams {
                control_spacing: 8.0,
                max_displacement: 2.0,
            },
            ..AugmentParams::default()
        };
        let a = augment(&p, &params).unwrap();
        let b = augment(&p, &params).unwrap();
        assert_eq!(a, b);
        for v in a.study.volumes.values() {
            assert_eq!(v.dims(), dims);
        }
        for m in a.study.masks.values() {
            assert!(m.voxels().iter().all(|&x| x <= 1));
        }
        let other = augment(&p, &AugmentParams { rng_seed: 12, ..params }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        assert!(AugmentParams::default().validate().is_ok());
        let bad = AugmentParams {
            elastic: ElasticParams {
                control_spacing: 4.0,
                max_displacement: 4.0,
            },
            ..AugmentParams::default()
        };
        assert!(bad.validate().is_err());
        assert!(AugmentParams { scale: [0.0, 1.0], ..AugmentParams::default() }.validate().is_err());
    }

    proptest! {
        #[test]
        fn nearest_commutes_with_binarization(
            bits in proptest::collection::vec(0u8..2, 10 * 9 * 2),
            seed in 0u64..1000,
        ) {
            let dims = [10, 9, 2];
            let params = AugmentParams {
                rng_seed: seed,
                elastic: ElasticParams { control_spacing: 4.0, max_displacement: 1.5 },
                ..AugmentParams::default()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = SpatialTransform::sample(dims, &params, &mut rng);
            let as_float: Vec<f32> = bits.iter().map(|&b| b as f32).collect();
            let via_float: Vec<u8> = t.apply_nearest(&as_float).into_iter().map(|v| u8::from(v >= 0.5)).collect();
            prop_assert_eq!(via_float, t.apply_nearest(&bits));
        }
    }
}
