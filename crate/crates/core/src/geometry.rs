//! Camera rigs, frustum lifting, rigid transforms and extrinsic noise.
//!
//! Conventions:
//! - pixel `(u, v)` is column `u`, row `v`; the flat pixel index is `v * W + u`;
//! - extrinsics map global (ego) coordinates into a camera frame;
//! - an [`EgoMotion`] maps current-frame ego coordinates into the previous
//!   frame's ego coordinates.

use nalgebra::{Matrix3, Matrix4, Rotation3, Unit, Vector3, Vector4};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Tolerance for accepting a rotation block as orthonormal.
const ROTATION_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("intrinsic matrix is singular or has non-positive focal length")]
    SingularIntrinsics,
    #[error("rotation block is not orthonormal with det +1 (residual {residual:e})")]
    NotRigid { residual: f64 },
    #[error("homogeneous row must be (0, 0, 0, 1)")]
    NotHomogeneous,
    #[error("point at depth {depth} is not in front of the camera")]
    BehindCamera { depth: f64 },
    #[error("camera index {index} out of range for a rig of {count}")]
    CameraIndex { index: usize, count: usize },
    #[error("invalid rig: {0}")]
    InvalidRig(String),
    #[error("frame gap must be positive, got {0}")]
    FrameGap(f64),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;

/// Pinhole intrinsics `[[fx, 0, cx], [0, fy, cy], [0, 0, 1]]`, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "IntrinsicsRepr", into = "IntrinsicsRepr")]
pub struct Intrinsics {
    matrix: Matrix3<f64>,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsRepr {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
}

impl TryFrom<IntrinsicsRepr> for Intrinsics {
    type Error = GeometryError;
    fn try_from(r: IntrinsicsRepr) -> Result<Self> {
        Self::new(r.fx, r.fy, r.cx, r.cy)
    }
}

impl From<Intrinsics> for IntrinsicsRepr {
    fn from(i: Intrinsics) -> Self {
        Self {
            fx: i.fx(),
            fy: i.fy(),
            cx: i.cx(),
            cy: i.cy(),
        }
    }
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(GeometryError::SingularIntrinsics);
        }
        Ok(Self {
            matrix: Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0),
        })
    }

    pub fn identity() -> Self {
        Self {
            matrix: Matrix3::identity(),
        }
    }

    /// Accepts any 3×3 matrix; only invertibility is enforced here so that
    /// singular inputs surface as errors from the operations that invert.
    pub fn from_matrix_unchecked(matrix: Matrix3<f64>) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn fx(&self) -> f64 {
        self.matrix[(0, 0)]
    }
    pub fn fy(&self) -> f64 {
        self.matrix[(1, 1)]
    }
    pub fn cx(&self) -> f64 {
        self.matrix[(0, 2)]
    }
    pub fn cy(&self) -> f64 {
        self.matrix[(1, 2)]
    }

    pub fn inverse(&self) -> Result<Matrix3<f64>> {
        self.matrix.try_inverse().ok_or(GeometryError::SingularIntrinsics)
    }
}

/// Rigid global→camera transform as a 4×4 homogeneous matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 4]; 4]", into = "[[f64; 4]; 4]")]
pub struct Extrinsics {
    matrix: Matrix4<f64>,
}

impl TryFrom<[[f64; 4]; 4]> for Extrinsics {
    type Error = GeometryError;
    fn try_from(rows: [[f64; 4]; 4]) -> Result<Self> {
        Self::from_matrix(Matrix4::from_fn(|r, c| rows[r][c]))
    }
}

impl From<Extrinsics> for [[f64; 4]; 4] {
    fn from(e: Extrinsics) -> Self {
        std::array::from_fn(|r| std::array::from_fn(|c| e.matrix[(r, c)]))
    }
}

fn check_rigid(m: &Matrix4<f64>) -> Result<()> {
    if m.row(3) != Vector4::new(0.0, 0.0, 0.0, 1.0).transpose() {
        return Err(GeometryError::NotHomogeneous);
    }
    let r = m.fixed_view::<3, 3>(0, 0);
    let residual = (r.transpose() * r - Matrix3::identity()).abs().max();
    let det_err = (r.determinant() - 1.0).abs();
    if residual > ROTATION_TOL || det_err > ROTATION_TOL || !m.iter().all(|v| v.is_finite()) {
        return Err(GeometryError::NotRigid {
            residual: residual.max(det_err),
        });
    }
    Ok(())
}

fn rigid_matrix(rotation: &Matrix3<f64>, translation: &Vector3<f64>) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(rotation);
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(translation);
    m
}

fn top_rows(m: &Matrix4<f64>) -> [f64; 12] {
    std::array::from_fn(|k| m[(k / 4, k % 4)])
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    pub fn from_matrix(matrix: Matrix4<f64>) -> Result<Self> {
        check_rigid(&matrix)?;
        Ok(Self { matrix })
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Self::from_matrix(rigid_matrix(&rotation, &translation))
    }

    /// Camera at `position` (global) whose optical axis points along the
    /// horizontal heading `yaw`, with image x to the right and y down.
    pub fn looking_along(position: Vector3<f64>, yaw: f64) -> Self {
        let forward = Vector3::new(yaw.cos(), yaw.sin(), 0.0);
        let right = Vector3::new(yaw.sin(), -yaw.cos(), 0.0);
        let down = Vector3::new(0.0, 0.0, -1.0);
        // Rows are the camera axes expressed in global coordinates.
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * position);
        Self {
            matrix: rigid_matrix(&rotation, &translation),
        }
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// Camera→global transform.
    pub fn inverse_matrix(&self) -> Matrix4<f64> {
        let rt = self.rotation().transpose();
        rigid_matrix(&rt, &(-(rt * self.translation())))
    }

    /// The extrinsics of a camera after re-expressing global coordinates by
    /// `s` first: `self · s`.
    pub fn compose(&self, s: &Matrix4<f64>) -> Result<Self> {
        Self::from_matrix(self.matrix * s)
    }

    /// The 12 entries of the top three rows, row-major.
    pub fn top_rows(&self) -> [f64; 12] {
        top_rows(&self.matrix)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * p + self.translation()
    }

    /// Camera center in global coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation().transpose() * self.translation())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub extrinsics: Extrinsics,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthSpacing {
    #[default]
    Uniform,
    /// Bin widths grow linearly with depth.
    LinearIncreasing,
}

/// `count` strictly increasing depths spanning `[min, max]`.
pub fn depth_bins(min: f64, max: f64, count: usize, spacing: DepthSpacing) -> Result<Vec<f64>> {
    if !(min > 0.0 && max > min && count >= 1) {
        return Err(GeometryError::InvalidRig(format!(
            "depth range [{min}, {max}] with {count} bins"
        )));
    }
    if count == 1 {
        return Ok(vec![min]);
    }
    let span = max - min;
    let d = count as f64 - 1.0;
    Ok((0..count)
        .map(|i| {
            let i = i as f64;
            match spacing {
                DepthSpacing::Uniform => min + span * i / d,
                DepthSpacing::LinearIncreasing => min + span * i * (i + 1.0) / (d * (d + 1.0)),
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<Camera>,
    pub height: usize,
    pub width: usize,
    pub depth_bins: Vec<f64>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>, height: usize, width: usize, depth_bins: Vec<f64>) -> Result<Self> {
        let rig = Self {
            cameras,
            height,
            width,
            depth_bins,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(GeometryError::InvalidRig("no cameras".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(GeometryError::InvalidRig("empty feature extent".into()));
        }
        let increasing = self.depth_bins.windows(2).all(|w| w[1] > w[0]);
        if self.depth_bins.is_empty() || !increasing || self.depth_bins[0] <= 0.0 {
            return Err(GeometryError::InvalidRig(
                "depth bins must be positive and strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn camera(&self, index: usize) -> Result<&Camera> {
        self.cameras.get(index).ok_or(GeometryError::CameraIndex {
            index,
            count: self.cameras.len(),
        })
    }

    /// The same physical cameras observed from coordinates that `s` maps into
    /// the rig's own ego frame (each extrinsic becomes `e · s`).
    pub fn reexpressed(&self, s: &Matrix4<f64>) -> Result<Self> {
        let cameras = self
            .cameras
            .iter()
            .map(|c| {
                Ok(Camera {
                    intrinsics: c.intrinsics,
                    extrinsics: c.extrinsics.compose(s)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cameras,
            ..self.clone()
        })
    }
}

/// Rigid transform from current-frame to previous-frame ego coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EgoMotionRepr", into = "EgoMotionRepr")]
pub struct EgoMotion {
    matrix: Matrix4<f64>,
    dt: f64,
}

#[derive(Serialize, Deserialize)]
struct EgoMotionRepr {
    matrix: [[f64; 4]; 4],
    dt: f64,
}

impl TryFrom<EgoMotionRepr> for EgoMotion {
    type Error = GeometryError;
    fn try_from(r: EgoMotionRepr) -> Result<Self> {
        Self::new(Matrix4::from_fn(|i, j| r.matrix[i][j]), r.dt)
    }
}

impl From<EgoMotion> for EgoMotionRepr {
    fn from(m: EgoMotion) -> Self {
        Self {
            matrix: std::array::from_fn(|r| std::array::from_fn(|c| m.matrix[(r, c)])),
            dt: m.dt,
        }
    }
}

impl EgoMotion {
    pub fn new(matrix: Matrix4<f64>, dt: f64) -> Result<Self> {
        check_rigid(&matrix)?;
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(GeometryError::FrameGap(dt));
        }
        Ok(Self { matrix, dt })
    }

    pub fn identity(dt: f64) -> Result<Self> {
        Self::new(Matrix4::identity(), dt)
    }

    /// Planar motion: rotation `yaw` about z, then translation.
    pub fn planar(yaw: f64, translation: Vector3<f64>, dt: f64) -> Result<Self> {
        let r = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw);
        Self::new(rigid_matrix(r.matrix(), &translation), dt)
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation().transpose();
        let t = self.matrix.fixed_view::<3, 1>(0, 3).into_owned();
        Self {
            matrix: rigid_matrix(&rt, &(-(rt * t))),
            dt: self.dt,
        }
    }

    /// `second ∘ self`: apply `self`, then `second`.
    pub fn then(&self, second: &EgoMotion) -> Result<Self> {
        Self::new(second.matrix * self.matrix, self.dt + second.dt)
    }

    pub fn top_rows(&self) -> [f64; 12] {
        top_rows(&self.matrix)
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.matrix * p.push(1.0)).xyz()
    }
}

/// Lifts every pixel of one camera to its `D` frustum points in that
/// camera's frame: `c'_d = T_i⁻¹ (u·d, v·d, d)`.
///
/// The result is `[H·W, D·3]`, i.e. a row-major `[H, W, D, 3]` array. It
/// depends on the intrinsics and depth bins only.
pub fn frustum_points(rig: &CameraRig, camera: usize) -> Result<Tensor> {
    let k_inv = rig.camera(camera)?.intrinsics.inverse()?;
    let d_count = rig.depth_bins.len();
    let mut data = Vec::with_capacity(rig.pixels() * d_count * 3);
    for v in 0..rig.height {
        for u in 0..rig.width {
            for &d in &rig.depth_bins {
                let c = k_inv * Vector3::new(u as f64 * d, v as f64 * d, d);
                data.extend_from_slice(c.as_slice());
            }
        }
    }
    Ok(Tensor::new([rig.pixels(), d_count * 3], data).expect("sized"))
}

fn map_points(points: &Tensor, f: impl Fn(Vector3<f64>) -> Vector3<f64>) -> Tensor {
    let mut out = points.clone();
    for p in out.data_mut().chunks_exact_mut(3) {
        let q = f(Vector3::new(p[0], p[1], p[2]));
        p.copy_from_slice(q.as_slice());
    }
    out
}

/// `[M, 3]` global points into the camera frame of `e`.
pub fn global_to_camera(points: &Tensor, e: &Extrinsics) -> Tensor {
    let (r, t) = (e.rotation(), e.translation());
    map_points(points, |p| r * p + t)
}

/// Applies the ego motion to `[M, 3]` current-frame points.
pub fn propagate_reference(points: &Tensor, m: &EgoMotion) -> Tensor {
    map_points(points, |p| m.apply(&p))
}

/// Left-multiplies the rotation block by a random rotation whose angle is
/// uniform in `[-r_max_deg, r_max_deg]` about a uniformly random axis.
/// Translation is left unchanged.
pub fn perturb_extrinsics(e: &Extrinsics, r_max_deg: f64, rng: &mut impl Rng) -> Extrinsics {
    let axis = loop {
        let a = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if a.norm() > 1e-12 {
            break Unit::new_normalize(a);
        }
    };
    let u: f64 = rng.random_range(-1.0..=1.0);
    if r_max_deg <= 0.0 {
        return *e;
    }
    let angle = (u * r_max_deg).to_radians();
    let noise = Rotation3::from_axis_angle(&axis, angle);
    let rotation = noise.matrix() * e.rotation();
    Extrinsics {
        matrix: rigid_matrix(&rotation, &e.translation()),
    }
}

/// Geodesic angle between two rotation matrices, in degrees.
pub fn rotation_angle_deg(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let rel = a.transpose() * b;
    ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Pinhole projection of a camera-frame point to `(u, v, depth)`.
pub fn project_to_image(point: &Vector3<f64>, intrinsics: &Intrinsics) -> Result<(f64, f64, f64)> {
    let depth = point.z;
    if !(depth > 0.0) {
        return Err(GeometryError::BehindCamera { depth });
    }
    let h = intrinsics.matrix() * point;
    Ok((h.x / depth, h.y / depth, depth))
}
