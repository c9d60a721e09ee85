//! 3D primitives: clouds, rigid transforms, voxel grids and neighbor search.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub type Point3 = nalgebra::Point3<f64>;

/// Ordered points with optional per-point feature rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    features: Option<Matrix>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Self {
        PointCloud {
            points,
            features: None,
        }
    }

    pub fn with_features(points: Vec<Point3>, features: Matrix) -> Result<Self> {
        if features.rows() != points.len() {
            return Err(Error::invalid(format!(
                "{} feature rows for {} points",
                features.rows(),
                points.len()
            )));
        }
        Ok(PointCloud {
            points,
            features: Some(features),
        })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn features(&self) -> Option<&Matrix> {
        self.features.as_ref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    /// Keeps the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            features: self.features.as_ref().map(|f| f.select_rows(indices)),
        }
    }
}

/// Proper rigid motion `p -> R p + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

/// Orthonormality tolerance for [`RigidTransform::new`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Validated constructor: `R^T R = I` and `det R = +1` within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        if !t.is_valid(ROTATION_TOLERANCE) {
            return Err(Error::invalid("rotation is not proper orthogonal"));
        }
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation of `angle` radians about `axis` followed by `translation`.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        RigidTransform {
            rotation: *rot.matrix(),
            translation,
        }
    }

    pub fn yaw(angle: f64, translation: Vector3<f64>) -> Self {
        Self::from_axis_angle(Vector3::z(), angle, translation)
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        r.iter().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite())
            && (r.transpose() * r - Matrix3::identity()).abs().max() <= tol
            && (r.determinant() - 1.0).abs() <= tol
    }

    #[inline]
    pub fn apply(&self, p: &Point3) -> Point3 {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Row-major `[R | t]`, the KITTI pose line layout.
    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 4 + c] = self.rotation[(r, c)];
            }
            out[r * 4 + 3] = self.translation[r];
        }
        out
    }

    /// Inverse of [`to_row_major`](Self::to_row_major). No validation.
    pub fn from_row_major(v: &[f64; 12]) -> RigidTransform {
        RigidTransform {
            rotation: Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
            translation: Vector3::new(v[3], v[7], v[11]),
        }
    }

    /// Projects the rotation onto SO(3) (nearest in Frobenius norm).
    pub fn orthonormalized(&self) -> RigidTransform {
        RigidTransform {
            rotation: nearest_rotation(&self.rotation),
            translation: self.translation,
        }
    }

    /// Geodesic rotation angle in radians.
    pub fn rotation_angle(&self) -> f64 {
        let r = &self.rotation;
        let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        let s = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm() / 2.0;
        s.atan2(c)
    }
}

pub(crate) fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

/// Maps every point through `t`; features are carried unchanged.
pub fn apply_transform(t: &RigidTransform, cloud: &PointCloud) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| t.apply(p)).collect(),
        features: cloud.features.clone(),
    }
}

pub type VoxelKey = (i64, i64, i64);

#[inline]
pub fn voxel_key(p: &Point3, voxel_size: f64) -> VoxelKey {
    (
        (p.x / voxel_size).floor() as i64,
        (p.y / voxel_size).floor() as i64,
        (p.z / voxel_size).floor() as i64,
    )
}

/// Result of [`voxel_downsample_traced`]: centroids plus, for each input
/// point, the index of the output voxel it fell in.
#[derive(Clone, Debug)]
pub struct VoxelGrouping {
    pub cloud: PointCloud,
    pub assignment: Vec<usize>,
    pub members: Vec<Vec<usize>>,
}

/// One centroid per occupied voxel of an origin-anchored grid, emitted in
/// ascending lexicographic voxel order. Features are averaged.
pub fn voxel_downsample(cloud: &PointCloud, voxel_size: f64) -> Result<PointCloud> {
    voxel_downsample_traced(cloud, voxel_size).map(|g| g.cloud)
}

pub fn voxel_downsample_traced(cloud: &PointCloud, voxel_size: f64) -> Result<VoxelGrouping> {
    if !(voxel_size > 0.0 && voxel_size.is_finite()) {
        return Err(Error::invalid(format!(
            "voxel size must be positive, got {voxel_size}"
        )));
    }
    let mut cells: BTreeMap<VoxelKey, Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        cells.entry(voxel_key(p, voxel_size)).or_default().push(i);
    }
    let mut assignment = vec![0; cloud.len()];
    let mut points = Vec::with_capacity(cells.len());
    let mut members = Vec::with_capacity(cells.len());
    for (k, idx) in cells.into_values().enumerate() {
        let mut sum = Vector3::zeros();
        for &i in &idx {
            sum += cloud.points[i].coords;
            assignment[i] = k;
        }
        points.push(Point3::from(sum / idx.len() as f64));
        members.push(idx);
    }
    let features = cloud.features.as_ref().map(|f| {
        let mut out = Matrix::zeros(members.len(), f.cols());
        for (k, idx) in members.iter().enumerate() {
            let row = out.row_mut(k);
            for &i in idx {
                for (o, v) in row.iter_mut().zip(f.row(i)) {
                    *o += v;
                }
            }
            row.iter_mut().for_each(|o| *o /= idx.len() as f64);
        }
        out
    });
    Ok(VoxelGrouping {
        cloud: PointCloud { points, features },
        assignment,
        members,
    })
}

/// Uniform hash grid for fixed-radius queries.
#[derive(Clone, Debug)]
pub struct HashGrid {
    cell: f64,
    cells: HashMap<VoxelKey, Vec<usize>>,
}

impl HashGrid {
    pub fn build(points: &[Point3], cell: f64) -> Result<Self> {
        if !(cell > 0.0 && cell.is_finite()) {
            return Err(Error::invalid(format!("grid cell must be positive, got {cell}")));
        }
        let mut cells: HashMap<VoxelKey, Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(voxel_key(p, cell)).or_default().push(i);
        }
        Ok(HashGrid { cell, cells })
    }

    /// Indices within `radius` of `query`, ascending. `points` must be the
    /// slice the grid was built from.
    pub fn within(&self, points: &[Point3], query: &Point3, radius: f64) -> Vec<usize> {
        let mut out = Vec::new();
        let reach = (radius / self.cell).ceil() as i64;
        let (cx, cy, cz) = voxel_key(query, self.cell);
        let r2 = radius * radius;
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(idx) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        out.extend(
                            idx.iter()
                                .copied()
                                .filter(|&i| (points[i] - query).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }

    /// Nearest point within `radius`, ties to the lowest index.
    pub fn nearest_within(&self, points: &[Point3], query: &Point3, radius: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for i in self.within(points, query, radius) {
            let d = (points[i] - query).norm();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        best
    }
}

/// Indices of `cloud` within Euclidean distance `radius` of `query`, ascending.
pub fn radius_neighbors(query: &Point3, cloud: &PointCloud, radius: f64) -> Result<Vec<usize>> {
    if !(radius > 0.0) {
        return Err(Error::invalid(format!("radius must be positive, got {radius}")));
    }
    let grid = HashGrid::build(&cloud.points, radius)?;
    Ok(grid.within(&cloud.points, query, radius))
}

/// Assignment of every point to exactly one superpoint patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchPartition {
    pub patch_of_point: Vec<usize>,
    pub patches: Vec<Vec<usize>>,
}

impl PatchPartition {
    pub fn num_patches(&self) -> usize {
        self.patches.len()
    }
}

/// Assigns each point to its nearest superpoint; ties go to the lowest
/// superpoint index. Patch member lists are ascending.
pub fn point_to_node_partition(points: &[Point3], superpoints: &[Point3]) -> Result<PatchPartition> {
    if superpoints.is_empty() {
        return Err(Error::invalid("point-to-node partition needs superpoints"));
    }
    let mut patches = vec![Vec::new(); superpoints.len()];
    let patch_of_point = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, s) in superpoints.iter().enumerate() {
                let d = (p - s).norm_squared();
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            patches[best].push(i);
            best
        })
        .collect();
    Ok(PatchPartition {
        patch_of_point,
        patches,
    })
}
