//! Shared geometric types: points, boxes, and the pinhole camera model.
//!
//! The scene frame is z-up with the navigable play area centred on the
//! origin. Camera frames follow the computer-vision convention: x right,
//! y down, z forward along the optical axis.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A point or direction in scene units.
pub type Vec3 = nalgebra::Vector3<f64>;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("non-finite coordinate in {0}")]
    NonFinite(&'static str),
    #[error("box min {min:?} exceeds max {max:?}")]
    InvertedBox { min: [f64; 3], max: [f64; 3] },
    #[error("invalid intrinsics: {0}")]
    Intrinsics(String),
    #[error("rotation is not a proper orthonormal matrix (det {det:.6}, orthogonality error {ortho:.3e})")]
    Rotation { det: f64, ortho: f64 },
}

pub fn is_finite(v: &Vec3) -> bool {
    v.iter().all(|c| c.is_finite())
}

/// Axis-aligned box, closed on every face.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: Vec3,
    pub max: Vec3,
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self, GeometryError> {
        if !is_finite(&min) || !is_finite(&max) {
            return Err(GeometryError::NonFinite("box corner"));
        }
        if (0..3).any(|i| min[i] > max[i]) {
            return Err(GeometryError::InvertedBox {
                min: min.into(),
                max: max.into(),
            });
        }
        Ok(Self { min, max })
    }

    pub fn from_center_half_extent(center: Vec3, half: Vec3) -> Result<Self, GeometryError> {
        Self::new(center - half, center + half)
    }

    /// Cube with `origin` as its min corner.
    pub fn cube(origin: Vec3, edge: f64) -> Self {
        Self {
            min: origin,
            max: origin + Vec3::repeat(edge),
        }
    }

    /// Bounds given as `[xmin, xmax, ymin, ymax, zmin, zmax]`.
    pub fn from_limits(l: [f64; 6]) -> Result<Self, GeometryError> {
        Self::new(Vec3::new(l[0], l[2], l[4]), Vec3::new(l[1], l[3], l[5]))
    }

    #[inline]
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| self.min[i] <= p[i] && p[i] <= self.max[i])
    }

    /// Closed-set overlap: boxes sharing only a face, edge or corner overlap.
    #[inline]
    pub fn overlaps(&self, other: &Aabb) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }

    pub fn extent(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn center(&self) -> Vec3 {
        (self.min + self.max) * 0.5
    }
}

/// Pinhole intrinsics in pixel units. Pixel `(i, j)` has its centre at
/// `(i + 0.5, j + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Square pixels, principal point at the image centre.
    pub fn from_hfov(width: u32, height: u32, hfov_deg: f64) -> Result<Self, GeometryError> {
        if !(hfov_deg > 0.0 && hfov_deg < 180.0) {
            return Err(GeometryError::Intrinsics(format!(
                "horizontal field of view {hfov_deg} outside (0, 180)"
            )));
        }
        let f = width as f64 / 2.0 / (hfov_deg.to_radians() / 2.0).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::Intrinsics("zero image dimension".into()));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(GeometryError::Intrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(0.0 <= self.cx && self.cx < self.width as f64 && 0.0 <= self.cy && self.cy < self.height as f64) {
            return Err(GeometryError::Intrinsics(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Rigid camera pose: `rotation` maps world directions into the camera
/// frame, `center` is the camera position in the world.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: Rotation3<f64>,
    pub center: Vec3,
}

impl CameraPose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            center: Vec3::zeros(),
        }
    }

    /// Validates that `rotation` is orthonormal with determinant +1.
    pub fn new(rotation: Matrix3<f64>, center: Vec3) -> Result<Self, GeometryError> {
        if !is_finite(&center) || rotation.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite("camera pose"));
        }
        let det = rotation.determinant();
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if (det - 1.0).abs() > 1e-6 || ortho > 1e-6 {
            return Err(GeometryError::Rotation { det, ortho });
        }
        Ok(Self {
            rotation: Rotation3::from_matrix_unchecked(rotation),
            center,
        })
    }

    /// Camera at `center` looking along heading `yaw` (radians, about world z,
    /// zero along +x), tilted up by `pitch` and rolled by `roll` about the
    /// optical axis. Angles compose as intrinsic yaw, then pitch, then roll.
    pub fn from_position_ypr(center: Vec3, yaw: f64, pitch: f64, roll: f64) -> Self {
        // Body frame: x forward, y left, z up.
        let body = Rotation3::from_axis_angle(&Vec3::z_axis(), yaw)
            * Rotation3::from_axis_angle(&Vec3::y_axis(), -pitch)
            * Rotation3::from_axis_angle(&Vec3::x_axis(), roll);
        // Columns: camera right, down, forward expressed in the body frame.
        let body_to_cam = Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let cam_to_world = body.matrix() * body_to_cam;
        Self {
            rotation: Rotation3::from_matrix_unchecked(cam_to_world.transpose()),
            center,
        }
    }

    /// Horizontal camera at `(x, y, height)` with heading `yaw`.
    pub fn ground(x: f64, y: f64, height: f64, yaw: f64) -> Self {
        Self::from_position_ypr(Vec3::new(x, y, height), yaw, 0.0, 0.0)
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * (p - self.center)
    }

    /// Unit optical axis in world coordinates.
    pub fn forward(&self) -> Vec3 {
        self.rotation.inverse() * Vec3::z()
    }

    /// 4x4 homogeneous world-to-camera matrix.
    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let r = self.rotation.matrix();
        let t = -(r * self.center);
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
        m
    }

    pub fn transform_homogeneous(&self, p: &Vec3) -> Vec3 {
        let h = self.to_homogeneous() * Vector4::new(p.x, p.y, p.z, 1.0);
        Vec3::new(h.x / h.w, h.y / h.w, h.z / h.w)
    }
}
