//! Evaluation metrics: hard Dice similarity and average symmetric surface
//! distance, plus a brute-force nearest-distance oracle.
//!
//! Distance convention: voxel `(i, j, k)` sits at `(i·dx, j·dy, k·dz)` mm and
//! the distance between two voxels is
//! `sqrt(((ax−bx)² + (ay−by)²) + (az−bz)²)` evaluated in that order in f64,
//! so every route that follows the convention yields bit-identical values.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume::{geometry_equal, BinaryMask, Gridded, Spacing, Target};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("masks are not on the same grid")]
    GeometryMismatch,
    #[error("metric undefined: {0}")]
    Undefined(&'static str),
}

/// Per-target evaluation result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub target_modality: Target,
    pub dsc: f64,
    /// `None` when ASSD is undefined (empty prediction or mask).
    pub assd_mm: Option<f64>,
}

/// Which voxels enter the surface-distance sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceMode {
    /// Foreground voxels with at least one 6-connected background neighbour
    /// (outside the grid counts as background).
    #[default]
    Boundary,
    /// Every foreground voxel.
    AllVoxels,
}

/// Exact `2|M∩P| / (|M|+|P|)`.
pub fn dsc_exact(m: &BinaryMask, p: &BinaryMask) -> Result<Ratio<u64>, MetricError> {
    if !geometry_equal(m, p) {
        return Err(MetricError::GeometryMismatch);
    }
    let (mut inter, mut nm, mut np) = (0u64, 0u64, 0u64);
    for (&a, &b) in m.voxels().iter().zip(p.voxels()) {
        nm += a as u64;
        np += b as u64;
        inter += (a & b) as u64;
    }
    if nm + np == 0 {
        return Err(MetricError::Undefined("DSC of two empty masks"));
    }
    Ok(Ratio::new(2 * inter, nm + np))
}

pub fn dsc(m: &BinaryMask, p: &BinaryMask) -> Result<f64, MetricError> {
    let r = dsc_exact(m, p)?;
    Ok(*r.numer() as f64 / *r.denom() as f64)
}

/// Surface voxels of `m` in linear index order.
pub fn surface_voxels(m: &BinaryMask, mode: SurfaceMode) -> Vec<[usize; 3]> {
    let g = m.geometry();
    let [nx, ny, nz] = g.dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.at(x, y, z) {
                    continue;
                }
                let on_surface = match mode {
                    SurfaceMode::AllVoxels => true,
                    SurfaceMode::Boundary => {
                        x == 0
                            || y == 0
                            || z == 0
                            || x + 1 == nx
                            || y + 1 == ny
                            || z + 1 == nz
                            || !m.at(x - 1, y, z)
                            || !m.at(x + 1, y, z)
                            || !m.at(x, y - 1, z)
                            || !m.at(x, y + 1, z)
                            || !m.at(x, y, z - 1)
                            || !m.at(x, y, z + 1)
                    }
                };
                if on_surface {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

#[inline]
fn physical(v: [usize; 3], s: &Spacing) -> [f64; 3] {
    [v[0] as f64 * s.dx, v[1] as f64 * s.dy, v[2] as f64 * s.dz]
}

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy) + dz * dz
}

/// 3D k-d tree over physical voxel positions supporting exact nearest
/// squared-distance queries.
struct KdTree {
    points: Vec<[f64; 3]>,
    // node i: (point index, split axis, left child, right child)
    nodes: Vec<(usize, usize, Option<usize>, Option<usize>)>,
    root: Option<usize>,
}

impl KdTree {
    fn new(points: Vec<[f64; 3]>) -> Self {
        let mut idx: Vec<usize> = (0..points.len()).collect();
        let mut tree = KdTree {
            points,
            nodes: Vec::new(),
            root: None,
        };
        tree.root = tree.build(&mut idx, 0);
        tree
    }

    fn build(&mut self, idx: &mut [usize], depth: usize) -> Option<usize> {
        if idx.is_empty() {
            return None;
        }
        let axis = depth % 3;
        let mid = idx.len() / 2;
        let pts = &self.points;
        idx.select_nth_unstable_by(mid, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
        let point = idx[mid];
        let (lo, rest) = idx.split_at_mut(mid);
        let hi = &mut rest[1..];
        let left = self.build(lo, depth + 1);
        let right = self.build(hi, depth + 1);
        self.nodes.push((point, axis, left, right));
        Some(self.nodes.len() - 1)
    }

    fn nearest2(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        if let Some(r) = self.root {
            self.search(r, q, &mut best);
        }
        best
    }

    fn search(&self, node: usize, q: &[f64; 3], best: &mut f64) {
        let (pi, axis, left, right) = self.nodes[node];
        let p = &self.points[pi];
        let d = dist2(q, p);
        if d < *best {
            *best = d;
        }
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
        if let Some(n) = near {
            self.search(n, q, best);
        }
        // every point beyond the split plane is at least |diff| away along
        // `axis`, and rounding is monotone, so this pruning is exact
        if let Some(f) = far {
            if diff * diff <= *best {
                self.search(f, q, best);
            }
        }
    }
}

/// Distance (mm) from every voxel of `from` to its nearest voxel in `to`.
fn nearest_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: &Spacing) -> Vec<f64> {
    let tree = KdTree::new(to.iter().map(|v| physical(*v, spacing)).collect());
    from.iter()
        .map(|v| tree.nearest2(&physical(*v, spacing)).sqrt())
        .collect()
}

/// Average symmetric surface distance in mm over boundary voxels.
pub fn assd(m: &BinaryMask, p: &BinaryMask, spacing: &Spacing) -> Result<f64, MetricError> {
    assd_with_mode(m, p, spacing, SurfaceMode::Boundary)
}

/// ASSD with a selectable surface definition; distances are measured from
/// each set's surface to the other set's surface.
pub fn assd_with_mode(
    m: &BinaryMask,
    p: &BinaryMask,
    spacing: &Spacing,
    mode: SurfaceMode,
) -> Result<f64, MetricError> {
    if m.dims() != p.dims() || !geometry_equal(m, p) {
        return Err(MetricError::GeometryMismatch);
    }
    let sm = surface_voxels(m, mode);
    let sp = surface_voxels(p, mode);
    if sm.is_empty() || sp.is_empty() {
        return Err(MetricError::Undefined("ASSD with an empty mask"));
    }
    let dm = nearest_distances(&sm, &sp, spacing);
    let dp = nearest_distances(&sp, &sm, spacing);
    Ok(aggregate(&dm, &dp))
}

/// `(Σ da + Σ db) / (|da| + |db|)`, each sum accumulated in order.
pub fn aggregate(da: &[f64], db: &[f64]) -> f64 {
    let sa: f64 = da.iter().fold(0.0, |acc, v| acc + v);
    let sb: f64 = db.iter().fold(0.0, |acc, v| acc + v);
    (sa + sb) / (da.len() + db.len()) as f64
}

/// Brute-force `O(|a|·|b|)` minimum physical distance from each voxel of
/// `a` to the set `b`.
pub fn nearest_distance_oracle(
    a: &[[usize; 3]],
    b: &[[usize; 3]],
    spacing: &Spacing,
) -> Result<Vec<f64>, MetricError> {
    if b.is_empty() {
        return Err(MetricError::Undefined("nearest distance to an empty set"));
    }
    let (sx, sy, sz) = (spacing.dx, spacing.dy, spacing.dz);
    Ok(a.iter()
        .map(|va| {
            let (ax, ay, az) = (va[0] as f64 * sx, va[1] as f64 * sy, va[2] as f64 * sz);
            b.iter()
                .map(|vb| {
                    let ex = ax - vb[0] as f64 * sx;
                    let ey = ay - vb[1] as f64 * sy;
                    let ez = az - vb[2] as f64 * sz;
                    ((ex * ex + ey * ey) + ez * ez).sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect())
}

/// Hard metrics for one target; an undefined ASSD becomes `None`.
pub fn evaluate_pair(m: &BinaryMask, p: &BinaryMask) -> Result<MetricResult, MetricError> {
    let dsc = dsc(m, p)?;
    let assd_mm = match assd(m, p, &m.spacing()) {
        Ok(v) => Some(v),
        Err(MetricError::Undefined(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricResult {
        target_modality: m.target(),
        dsc,
        assd_mm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Geometry;

    fn mask(dims: [usize; 3], spacing: Spacing, on: &[[usize; 3]]) -> BinaryMask {
        let g = Geometry::new(dims, spacing, [0.0; 3]).unwrap();
        let mut v = vec![0u8; g.len()];
        for p in on {
            v[g.index(p[0], p[1], p[2])] = 1;
        }
        BinaryMask::new(g, Target::T2, v).unwrap()
    }

    fn iso() -> Spacing {
        Spacing::isotropic(1.0).unwrap()
    }

    #[test]
    fn dsc_examples() {
        let a = mask([4, 4, 1], iso(), &[[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = mask([4, 4, 1], iso(), &[[0, 1, 0], [1, 1, 0], [2, 1, 0], [3, 1, 0]]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        let c = mask([4, 4, 1], iso(), &[[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]);
        assert_eq!(dsc_exact(&a, &c).unwrap(), Ratio::new(1, 2));
        let e = mask([4, 4, 1], iso(), &[]);
        assert!(matches!(dsc(&e, &e), Err(MetricError::Undefined(_))));
        assert_eq!(dsc(&a, &e).unwrap(), 0.0);
    }

    #[test]
    fn assd_examples() {
        let a = mask([4, 1, 1], iso(), &[[0, 0, 0]]);
        let b = mask([4, 1, 1], iso(), &[[3, 0, 0]]);
        assert_eq!(assd(&a, &a, &iso()).unwrap(), 0.0);
        assert_eq!(assd(&a, &b, &iso()).unwrap(), 3.0);
        let aniso = Spacing::new(0.75, 1.0, 1.0).unwrap();
        assert_eq!(assd(&a, &b, &aniso).unwrap(), 2.25);
        let e = mask([4, 1, 1], iso(), &[]);
        assert!(matches!(assd(&a, &e, &iso()), Err(MetricError::Undefined(_))));
    }

    #[test]
    fn boundary_excludes_interior() {
        let mut on = Vec::new();
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    on.push([x, y, z]);
                }
            }
        }
        let m = mask([5, 5, 5], iso(), &on);
        let s = surface_voxels(&m, SurfaceMode::Boundary);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&[2, 2, 2]));
        assert_eq!(surface_voxels(&m, SurfaceMode::AllVoxels).len(), 27);
    }

    #[test]
    fn oracle_examples() {
        let a = [[0, 0, 0]];
        let b = [[1, 1, 0]];
        let d = nearest_distance_oracle(&a, &b, &iso()).unwrap();
        assert_eq!(d, vec![2f64.sqrt()]);
        let sub = [[1, 1, 0], [2, 2, 2]];
        let sup = [[1, 1, 0], [2, 2, 2], [3, 3, 3]];
        assert!(nearest_distance_oracle(&sub, &sup, &iso()).unwrap().iter().all(|&v| v == 0.0));
        assert!(nearest_distance_oracle(&a, &[], &iso()).is_err());
    }

    #[test]
    fn geometry_mismatch_rejected() {
        let a = mask([4, 1, 1], iso(), &[[0, 0, 0]]);
        let b = mask([5, 1, 1], iso(), &[[0, 0, 0]]);
        assert_eq!(dsc(&a, &b), Err(MetricError::GeometryMismatch));
        assert_eq!(assd(&a, &b, &iso()), Err(MetricError::GeometryMismatch));
    }
}
