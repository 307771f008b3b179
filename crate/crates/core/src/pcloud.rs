//! Point clouds, frame sequences and the basic geometric operations on them.

use ndarray::ArrayView2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// A point in 3D, stored as `[x, y, z]`.
pub type Point3 = [f64; 3];

/// A 3×3 rotation matrix, row-major.
pub type Rotation = [[f64; 3]; 3];

const COINCIDENT_EXTENT: f64 = 1e-12;
const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CloudError {
    #[error("a point cloud needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("point {index} has a non-finite coordinate")]
    NonFinite { index: usize },
    #[error("all points coincide (max extent {extent:e})")]
    AllPointsCoincident { extent: f64 },
    #[error("invalid sample count {m} for a cloud of {n} points")]
    InvalidCount { m: usize, n: usize },
    #[error("start index {start} out of range for {n} points")]
    StartOutOfRange { start: usize, n: usize },
    #[error("noise variance must be non-negative, got {0}")]
    NegativeVariance(f64),
    #[error("rotation is not orthonormal (max |RᵀR - I| = {deviation:e})")]
    NonOrthonormalRotation { deviation: f64 },
    #[error("frame {frame} has {got} points, expected {expected}")]
    FrameSizeMismatch { frame: usize, expected: usize, got: usize },
    #[error("correspondence {index} is not a bijection on 0..{n}")]
    InvalidCorrespondence { index: usize, n: usize },
    #[error("expected {expected} correspondence maps, got {got}")]
    CorrespondenceCount { expected: usize, got: usize },
    #[error("a sequence needs at least one frame")]
    EmptySequence,
}

/// An immutable set of 3D points belonging to frame `frame_id` of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    frame_id: usize,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, frame_id: usize) -> Result<Self, CloudError> {
        if points.len() < 2 {
            return Err(CloudError::TooFewPoints(points.len()));
        }
        if let Some(index) = points
            .iter()
            .position(|p| p.iter().any(|c| !c.is_finite()))
        {
            return Err(CloudError::NonFinite { index });
        }
        Ok(Self { points, frame_id })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn frame_id(&self) -> usize {
        self.frame_id
    }

    pub fn with_frame_id(mut self, frame_id: usize) -> Self {
        self.frame_id = frame_id;
        self
    }

    /// The coordinates as an `N×3` matrix view (no copy).
    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.points.len(), 3), self.points.as_flattened())
            .expect("points are contiguous [f64; 3]")
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }

    /// Axis-aligned bounding box as `(min, max)`.
    pub fn aabb(&self) -> (Point3, Point3) {
        aabb(&self.points)
    }

    /// Points selected by `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            frame_id: self.frame_id,
        }
    }
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let mut c = [0.0; 3];
    for p in points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    let n = points.len().max(1) as f64;
    c.map(|v| v / n)
}

pub fn aabb(points: &[Point3]) -> (Point3, Point3) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in points {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    (lo, hi)
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn dist(a: &Point3, b: &Point3) -> f64 {
    dist2(a, b).sqrt()
}

/// A bijection from the point indices of frame `t` to those of frame `t + 1`:
/// point `i` in frame `t` corresponds to point `map[i]` in frame `t + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Correspondence(Vec<usize>);

impl Correspondence {
    pub fn new(map: Vec<usize>) -> Result<Self, CloudError> {
        let n = map.len();
        let mut seen = vec![false; n];
        for (index, &j) in map.iter().enumerate() {
            if j >= n || std::mem::replace(&mut seen[j], true) {
                return Err(CloudError::InvalidCorrespondence { index, n });
            }
        }
        Ok(Self(map))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// An ordered run of frames of one deforming shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceWindow {
    frames: Vec<PointCloud>,
    correspondences: Option<Vec<Correspondence>>,
}

impl SequenceWindow {
    /// All frames must share the same point count; when present there must be
    /// exactly one correspondence map per consecutive frame pair.
    pub fn new(
        frames: Vec<PointCloud>,
        correspondences: Option<Vec<Correspondence>>,
    ) -> Result<Self, CloudError> {
        let Some(first) = frames.first() else {
            return Err(CloudError::EmptySequence);
        };
        let n = first.len();
        for (frame, f) in frames.iter().enumerate() {
            if f.len() != n {
                return Err(CloudError::FrameSizeMismatch {
                    frame,
                    expected: n,
                    got: f.len(),
                });
            }
        }
        if let Some(maps) = &correspondences {
            if maps.len() != frames.len() - 1 {
                return Err(CloudError::CorrespondenceCount {
                    expected: frames.len() - 1,
                    got: maps.len(),
                });
            }
            if let Some(index) = maps.iter().position(|m| m.len() != n) {
                return Err(CloudError::InvalidCorrespondence { index, n });
            }
        }
        Ok(Self {
            frames,
            correspondences,
        })
    }

    pub fn frames(&self) -> &[PointCloud] {
        &self.frames
    }

    pub fn correspondences(&self) -> Option<&[Correspondence]> {
        self.correspondences.as_deref()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn n_points(&self) -> usize {
        self.frames[0].len()
    }

    /// Frames `start..start + len` with their correspondence maps.
    pub fn slice(&self, start: usize, len: usize) -> SequenceWindow {
        SequenceWindow {
            frames: self.frames[start..start + len].to_vec(),
            correspondences: self
                .correspondences
                .as_ref()
                .map(|c| c[start..start + len - 1].to_vec()),
        }
    }

    /// Index map from frame 0 to frame `t`, composed through the consecutive
    /// correspondences. `None` without ground truth.
    pub fn map_from_first(&self, t: usize) -> Option<Vec<usize>> {
        let maps = self.correspondences.as_ref()?;
        let mut map: Vec<usize> = (0..self.n_points()).collect();
        for step in &maps[..t] {
            for m in map.iter_mut() {
                *m = step.0[*m];
            }
        }
        Some(map)
    }
}

/// Centers the cloud at its centroid and scales it so the longest side of the
/// bounding box is 1.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud, CloudError> {
    let (lo, hi) = cloud.aabb();
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0, f64::max);
    if extent < COINCIDENT_EXTENT {
        return Err(CloudError::AllPointsCoincident { extent });
    }
    let c = cloud.centroid();
    let points = cloud
        .points
        .iter()
        .map(|p| [(p[0] - c[0]) / extent, (p[1] - c[1]) / extent, (p[2] - c[2]) / extent])
        .collect();
    Ok(PointCloud {
        points,
        frame_id: cloud.frame_id,
    })
}

/// Farthest point sampling: indices of `m` points in visitation order,
/// starting from `start`. Ties go to the lowest index.
pub fn fps_indices(cloud: &PointCloud, m: usize, start: usize) -> Result<Vec<usize>, CloudError> {
    let n = cloud.len();
    if m == 0 || m > n {
        return Err(CloudError::InvalidCount { m, n });
    }
    if start >= n {
        return Err(CloudError::StartOutOfRange { start, n });
    }
    let pts = cloud.points();
    let mut picked = Vec::with_capacity(m);
    let mut min_d2 = vec![f64::INFINITY; n];
    let mut current = start;
    picked.push(current);
    min_d2[current] = f64::NEG_INFINITY;
    while picked.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, d) in min_d2.iter_mut().enumerate() {
            if *d == f64::NEG_INFINITY {
                continue;
            }
            let cand = dist2(&pts[i], &pts[current]);
            if cand < *d {
                *d = cand;
            }
            if *d > best_d {
                best_d = *d;
                best = i;
            }
        }
        current = best;
        min_d2[current] = f64::NEG_INFINITY;
        picked.push(current);
    }
    Ok(picked)
}

pub fn fps_downsample(cloud: &PointCloud, m: usize, start: usize) -> Result<PointCloud, CloudError> {
    let idx = fps_indices(cloud, m, start)?;
    Ok(cloud.select(&idx))
}

/// Adds i.i.d. `N(0, variance)` noise to every coordinate.
pub fn add_gaussian_noise(cloud: &PointCloud, variance: f64, seed: u64) -> Result<PointCloud, CloudError> {
    if !(variance >= 0.0) {
        return Err(CloudError::NegativeVariance(variance));
    }
    let normal = Normal::new(0.0, variance.sqrt()).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = cloud
        .points
        .iter()
        .map(|p| p.map(|c| c + normal.sample(&mut rng)))
        .collect();
    Ok(PointCloud {
        points,
        frame_id: cloud.frame_id,
    })
}

pub fn rotation_deviation(r: &Rotation) -> f64 {
    let mut dev: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((dot - target).abs());
        }
    }
    dev
}

/// Maps every point `x ↦ R x + t`.
pub fn rigid_transform(
    cloud: &PointCloud,
    rotation: &Rotation,
    translation: Point3,
) -> Result<PointCloud, CloudError> {
    let deviation = rotation_deviation(rotation);
    if !(deviation <= ORTHONORMAL_TOL) {
        return Err(CloudError::NonOrthonormalRotation { deviation });
    }
    let points = cloud
        .points
        .iter()
        .map(|p| apply_rigid(rotation, translation, p))
        .collect();
    Ok(PointCloud {
        points,
        frame_id: cloud.frame_id,
    })
}

#[inline]
pub(crate) fn apply_rigid(r: &Rotation, t: Point3, p: &Point3) -> Point3 {
    std::array::from_fn(|i| r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2] + t[i])
}

/// Rotation about a unit `axis` by `angle` radians (Rodrigues).
pub fn axis_angle(axis: Point3, angle: f64) -> Rotation {
    let norm = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    let [x, y, z] = axis.map(|v| v / norm);
    let (s, c) = angle.sin_cos();
    let t = 1.0 - c;
    [
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ]
}
