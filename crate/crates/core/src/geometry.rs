//! Rigid poses, pinhole cameras and attention reference points.

use std::collections::BTreeSet;

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::grid::{Coord, VoxelGridSpec};

/// Tolerance for orthonormality and the homogeneous last row.
pub const RIGIDITY_TOLERANCE: f64 = 1e-9;

/// Points at or closer than this depth (meters) are behind the camera.
pub const DEPTH_EPSILON: f64 = 1e-6;

/// Rigid transform mapping points from `src_frame` into `dst_frame`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseFile", into = "PoseFile")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    src_frame: String,
    dst_frame: String,
}

/// On-disk pose: 16 numbers row-major plus frame tags.
#[derive(Serialize, Deserialize)]
struct PoseFile {
    matrix: Vec<f64>,
    src_frame: String,
    dst_frame: String,
}

impl TryFrom<PoseFile> for Pose {
    type Error = Error;

    fn try_from(f: PoseFile) -> Result<Self> {
        if f.matrix.len() != 16 {
            return Err(Error::LengthMismatch {
                expected: 16,
                actual: f.matrix.len(),
            });
        }
        let mut m = [[0.0; 4]; 4];
        for (n, v) in f.matrix.iter().enumerate() {
            m[n / 4][n % 4] = *v;
        }
        Pose::new(m, f.src_frame, f.dst_frame)
    }
}

impl From<Pose> for PoseFile {
    fn from(p: Pose) -> Self {
        PoseFile {
            matrix: p.matrix().iter().flatten().copied().collect(),
            src_frame: p.src_frame,
            dst_frame: p.dst_frame,
        }
    }
}

impl Pose {
    /// Validates a row-major homogeneous matrix.
    pub fn new(
        matrix: [[f64; 4]; 4],
        src_frame: impl Into<String>,
        dst_frame: impl Into<String>,
    ) -> Result<Self> {
        if matrix.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonRigid("non-finite entry".into()));
        }
        let last = matrix[3];
        let expected = [0.0, 0.0, 0.0, 1.0];
        if last
            .iter()
            .zip(expected)
            .any(|(a, b)| (a - b).abs() > RIGIDITY_TOLERANCE)
        {
            return Err(Error::NonRigid(format!("last row is {last:?}")));
        }
        let rotation = Matrix3::from_fn(|r, c| matrix[r][c]);
        let translation = Vector3::new(matrix[0][3], matrix[1][3], matrix[2][3]);
        Self::from_parts(rotation, translation, src_frame, dst_frame)
    }

    pub fn from_parts(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        src_frame: impl Into<String>,
        dst_frame: impl Into<String>,
    ) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        let err = gram.amax();
        if !(err <= RIGIDITY_TOLERANCE) {
            return Err(Error::NonRigid(format!(
                "rotation not orthonormal (max |R^T R - I| = {err:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= RIGIDITY_TOLERANCE) {
            return Err(Error::NonRigid(format!("rotation determinant {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::NonRigid("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
            src_frame: src_frame.into(),
            dst_frame: dst_frame.into(),
        })
    }

    pub fn identity(frame: impl Into<String>) -> Self {
        let frame = frame.into();
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            src_frame: frame.clone(),
            dst_frame: frame,
        }
    }

    /// Rotation by `yaw` radians about +z followed by a translation.
    pub fn from_yaw_translation(
        yaw: f64,
        translation: [f64; 3],
        src_frame: impl Into<String>,
        dst_frame: impl Into<String>,
    ) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::from(translation),
            src_frame: src_frame.into(),
            dst_frame: dst_frame.into(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn src_frame(&self) -> &str {
        &self.src_frame
    }

    pub fn dst_frame(&self) -> &str {
        &self.dst_frame
    }

    pub fn matrix(&self) -> [[f64; 4]; 4] {
        let mut m = [[0.0; 4]; 4];
        for (r, row) in m.iter_mut().enumerate().take(3) {
            for (c, v) in row.iter_mut().enumerate().take(3) {
                *v = self.rotation[(r, c)];
            }
            row[3] = self.translation[r];
        }
        m[3][3] = 1.0;
        m
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let m = self.matrix();
        Matrix4::from_fn(|r, c| m[r][c])
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Result<Pose> {
        if self.src_frame != other.dst_frame {
            return Err(Error::FrameMismatch {
                left: self.src_frame.clone(),
                right: other.dst_frame.clone(),
            });
        }
        Ok(Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
            src_frame: other.src_frame.clone(),
            dst_frame: self.dst_frame.clone(),
        })
    }

    pub fn invert(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
            src_frame: self.dst_frame.clone(),
            dst_frame: self.src_frame.clone(),
        }
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        (self.rotation * Vector3::from(p) + self.translation).into()
    }

    pub fn transform_points(&self, pts: &[[f64; 3]]) -> Vec<[f64; 3]> {
        pts.iter().map(|&p| self.transform_point(p)).collect()
    }
}

/// Continuous pixel location plus depth along the optical axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Pinhole camera described by its 3x4 projection matrix from the ego frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CameraFile", into = "CameraFile")]
pub struct CameraModel {
    projection: Matrix3x4<f64>,
    image_size: [usize; 2],
    view_index: usize,
}

#[derive(Serialize, Deserialize)]
struct CameraFile {
    projection: Vec<f64>,
    image_size: [usize; 2],
    view_index: usize,
}

impl TryFrom<CameraFile> for CameraModel {
    type Error = Error;

    fn try_from(f: CameraFile) -> Result<Self> {
        if f.projection.len() != 12 {
            return Err(Error::LengthMismatch {
                expected: 12,
                actual: f.projection.len(),
            });
        }
        let mut p = [[0.0; 4]; 3];
        for (n, v) in f.projection.iter().enumerate() {
            p[n / 4][n % 4] = *v;
        }
        CameraModel::new(p, f.image_size, f.view_index)
    }
}

impl From<CameraModel> for CameraFile {
    fn from(c: CameraModel) -> Self {
        CameraFile {
            projection: c.projection_rows().iter().flatten().copied().collect(),
            image_size: c.image_size,
            view_index: c.view_index,
        }
    }
}

impl CameraModel {
    /// `image_size` is `(width, height)` in pixels.
    pub fn new(projection: [[f64; 4]; 3], image_size: [usize; 2], view_index: usize) -> Result<Self> {
        if projection.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("projection", "non-finite entry"));
        }
        if image_size.contains(&0) {
            return Err(invalid("image_size", format!("must be positive, got {image_size:?}")));
        }
        Ok(Self {
            projection: Matrix3x4::from_fn(|r, c| projection[r][c]),
            image_size,
            view_index,
        })
    }

    /// `K [R | t]` with `cam_from_ego` mapping ego points into a camera frame
    /// whose +z is the optical axis, +x right and +y down.
    pub fn from_intrinsics(
        focal: [f64; 2],
        principal: [f64; 2],
        cam_from_ego: &Pose,
        image_size: [usize; 2],
        view_index: usize,
    ) -> Result<Self> {
        let k = Matrix3::new(focal[0], 0.0, principal[0], 0.0, focal[1], principal[1], 0.0, 0.0, 1.0);
        let ext = cam_from_ego.to_homogeneous().fixed_view::<3, 4>(0, 0).into_owned();
        let p = k * ext;
        Self::new(
            [0, 1, 2].map(|r| [0, 1, 2, 3].map(|c| p[(r, c)])),
            image_size,
            view_index,
        )
    }

    pub fn projection_rows(&self) -> [[f64; 4]; 3] {
        [0, 1, 2].map(|r| [0, 1, 2, 3].map(|c| self.projection[(r, c)]))
    }

    pub fn image_size(&self) -> [usize; 2] {
        self.image_size
    }

    pub fn view_index(&self) -> usize {
        self.view_index
    }

    /// Homogeneous product without any visibility test.
    pub fn project_unchecked(&self, p: [f64; 3]) -> [f64; 3] {
        (self.projection * Vector4::new(p[0], p[1], p[2], 1.0)).into()
    }

    /// Projects an ego-frame point; `None` when it is behind the camera or
    /// lands outside `[0, width) x [0, height)`.
    pub fn project_point(&self, p: [f64; 3]) -> Option<Projection> {
        let [x, y, d] = self.project_unchecked(p);
        if !(d > DEPTH_EPSILON) {
            return None;
        }
        let (u, v) = (x / d, y / d);
        let [w, h] = self.image_size;
        if u >= 0.0 && u < w as f64 && v >= 0.0 && v < h as f64 {
            Some(Projection { u, v, depth: d })
        } else {
            None
        }
    }
}

/// View indices of every camera that sees `p`.
pub fn visible_views(cams: &[CameraModel], p: [f64; 3]) -> BTreeSet<usize> {
    cams.iter()
        .filter(|c| c.project_point(p).is_some())
        .map(|c| c.view_index())
        .collect()
}

/// `n` outward-facing cameras evenly spaced in yaw around the ego origin,
/// camera 0 looking along +x.
pub fn camera_ring(n: usize, height: f64, focal: f64, image_size: [usize; 2]) -> Result<Vec<CameraModel>> {
    let principal = [image_size[0] as f64 / 2.0, image_size[1] as f64 / 2.0];
    (0..n)
        .map(|view| {
            let yaw = std::f64::consts::TAU * view as f64 / n as f64;
            let (s, c) = yaw.sin_cos();
            // rows: camera right, down, forward expressed in ego axes
            let rot = Matrix3::new(s, -c, 0.0, 0.0, 0.0, -1.0, c, s, 0.0);
            let center = Vector3::new(0.0, 0.0, height);
            let cam_from_ego =
                Pose::from_parts(rot, -(rot * center), "ego", format!("cam{view}"))?;
            CameraModel::from_intrinsics([focal, focal], principal, &cam_from_ego, image_size, view)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceKind {
    /// 3D points inside each voxel, projected into the cameras.
    Cross,
    /// Points on the BEV plane at the source voxel's height.
    Planar,
}

/// Fixed number of reference points for every voxel of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePointSet {
    spec: VoxelGridSpec,
    kind: ReferenceKind,
    per_voxel: usize,
    points: Vec<[f64; 3]>,
}

impl ReferencePointSet {
    pub fn spec(&self) -> &VoxelGridSpec {
        &self.spec
    }

    pub fn kind(&self) -> ReferenceKind {
        self.kind
    }

    pub fn per_voxel(&self) -> usize {
        self.per_voxel
    }

    pub fn points(&self, idx: Coord) -> &[[f64; 3]] {
        let n = self.spec.linear(idx);
        &self.points[n * self.per_voxel..(n + 1) * self.per_voxel]
    }

    pub fn all_points(&self) -> &[[f64; 3]] {
        &self.points
    }
}

/// Reference points for voxel cross-attention: point `m` of voxel `idx` is
/// `origin + (idx + offsets[m]) * cell_size`.
pub fn gen_vca_reference_points(spec: &VoxelGridSpec, offsets: &[[f64; 3]]) -> Result<ReferencePointSet> {
    if offsets.is_empty() {
        return Err(invalid("offsets", "need at least one point per voxel"));
    }
    if let Some(bad) = offsets
        .iter()
        .find(|o| o.iter().any(|&v| !(0.0..1.0).contains(&v)))
    {
        return Err(invalid("offsets", format!("{bad:?} outside [0, 1)^3")));
    }
    let origin = spec.origin();
    let cell = spec.cell_size();
    let mut points = Vec::with_capacity(spec.num_cells() * offsets.len());
    for idx in spec.coords() {
        for off in offsets {
            points.push([0, 1, 2].map(|a| origin[a] + (idx[a] as f64 + off[a]) * cell[a]));
        }
    }
    Ok(ReferencePointSet {
        spec: *spec,
        kind: ReferenceKind::Cross,
        per_voxel: offsets.len(),
        points,
    })
}

/// Reference points for voxel self-attention: planar offsets in cells around
/// the voxel center, height copied from the center.
pub fn gen_vsa_reference_points(
    spec: &VoxelGridSpec,
    planar_offsets: &[[f64; 2]],
) -> Result<ReferencePointSet> {
    if planar_offsets.is_empty() {
        return Err(invalid("planar_offsets", "need at least one point per voxel"));
    }
    if planar_offsets.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid("planar_offsets", "non-finite offset"));
    }
    let cell = spec.cell_size();
    let mut points = Vec::with_capacity(spec.num_cells() * planar_offsets.len());
    for idx in spec.coords() {
        let c = spec.center(idx);
        for [dx, dy] in planar_offsets {
            points.push([c[0] + dx * cell[0], c[1] + dy * cell[1], c[2]]);
        }
    }
    Ok(ReferencePointSet {
        spec: *spec,
        kind: ReferenceKind::Planar,
        per_voxel: planar_offsets.len(),
        points,
    })
}

fn radical_inverse(mut n: usize, base: usize) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while n > 0 {
        out += (n % base) as f64 * inv;
        n /= base;
        inv /= base as f64;
    }
    out
}

/// Deterministic low-discrepancy in-cell offsets (Halton bases 2, 3, 5).
pub fn default_vca_offsets(m: usize) -> Vec<[f64; 3]> {
    (1..=m)
        .map(|n| [radical_inverse(n, 2), radical_inverse(n, 3), radical_inverse(n, 5)])
        .collect()
}
