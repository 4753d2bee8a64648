//! Pinhole cameras: ray generation, back-projection along unit rays, and
//! projection back to pixels.
//!
//! Convention: right-handed, camera looks down +z, x right, y down. Poses are
//! stored camera-to-world. Pixel index `i` samples at coordinate `i + 0.5`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

pub const NEAR_PLANE: f64 = 1e-4;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::invalid(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        Ok(Intrinsics { fx, fy, cx, cy })
    }
}

/// Camera-to-world rigid transform. `translation` is the camera center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Mat3,
    translation: Vec3,
}

impl Pose {
    pub fn new(rotation: Mat3, translation: Vec3) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Mat3::identity()).abs().max();
        if !(err <= ORTHO_TOL) {
            return Err(Error::invalid(format!("rotation is not orthonormal (error {err:e})")));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHO_TOL) {
            return Err(Error::invalid(format!("rotation determinant is {det}, expected +1")));
        }
        Ok(Pose { rotation, translation })
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`; `up` is a world direction that
    /// maps to screen-up (camera -y).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self> {
        let forward = (target - eye).try_normalize(1e-12).ok_or_else(|| Error::invalid("eye equals target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("up is parallel to the viewing direction"))?;
        let down = forward.cross(&right);
        let rotation = Mat3::from_columns(&[right, down, forward]);
        Pose::new(rotation, eye)
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.rotation
    }

    pub fn center(&self) -> &Vec3 {
        &self.translation
    }

    /// World point to camera frame.
    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Composes a world-space rigid motion `(r, t)` (x -> r x + t) onto this pose.
    pub fn transformed(&self, r: &Mat3, t: &Vec3) -> Result<Pose> {
        Pose::new(r * self.rotation, r * self.translation + t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraView {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub width: usize,
    pub height: usize,
}

/// Result of projecting a world point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub pixel: [f64; 2],
    pub z: f64,
    pub visible: bool,
}

impl CameraView {
    pub fn new(intrinsics: Intrinsics, pose: Pose, width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("camera image size must be at least 1x1"));
        }
        Ok(CameraView {
            intrinsics,
            pose,
            width,
            height,
        })
    }

    /// Camera with a centered principal point and the given horizontal field of view.
    pub fn with_fov(pose: Pose, width: usize, height: usize, fov_x_deg: f64) -> Result<Self> {
        let fx = 0.5 * width as f64 / (0.5 * fov_x_deg.to_radians()).tan();
        let k = Intrinsics::new(fx, fx, 0.5 * width as f64, 0.5 * height as f64)?;
        CameraView::new(k, pose, width, height)
    }

    pub fn center(&self) -> &Vec3 {
        self.pose.center()
    }

    /// Unit world-space ray through continuous pixel coordinate `u`.
    pub fn ray_for_pixel(&self, u: [f64; 2]) -> (Vec3, Vec3) {
        let k = &self.intrinsics;
        let dir_cam = Vec3::new((u[0] - k.cx) / k.fx, (u[1] - k.cy) / k.fy, 1.0);
        let dir = (self.pose.rotation * dir_cam).normalize();
        (self.pose.translation, dir)
    }

    /// `o + d * r(u)` with `d` the Euclidean distance along the unit ray.
    pub fn back_project(&self, u: [f64; 2], depth: f64) -> Result<Vec3> {
        if !(depth > 0.0) {
            return Err(Error::invalid(format!("depth must be positive, got {depth}")));
        }
        let (o, r) = self.ray_for_pixel(u);
        Ok(o + r * depth)
    }

    pub fn project(&self, p: &Vec3) -> Projection {
        self.project_with_near(p, NEAR_PLANE)
    }

    pub fn project_with_near(&self, p: &Vec3, near: f64) -> Projection {
        let q = self.pose.to_camera(p);
        let k = &self.intrinsics;
        let pixel = [k.fx * q.x / q.z + k.cx, k.fy * q.y / q.z + k.cy];
        Projection {
            pixel,
            z: q.z,
            visible: q.z > near,
        }
    }

    /// Pixel-center coordinate of integer pixel `(x, y)`.
    pub fn pixel_center(x: usize, y: usize) -> [f64; 2] {
        [x as f64 + 0.5, y as f64 + 0.5]
    }
}

/// Flat serialized camera: rotation is camera-to-world, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub width: usize,
    pub height: usize,
}

impl From<&CameraView> for CameraRecord {
    fn from(cam: &CameraView) -> Self {
        let r = cam.pose.rotation();
        let mut rotation = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                rotation[i * 3 + j] = r[(i, j)];
            }
        }
        let t = cam.pose.center();
        CameraRecord {
            fx: cam.intrinsics.fx,
            fy: cam.intrinsics.fy,
            cx: cam.intrinsics.cx,
            cy: cam.intrinsics.cy,
            rotation,
            translation: [t.x, t.y, t.z],
            width: cam.width,
            height: cam.height,
        }
    }
}

impl TryFrom<&CameraRecord> for CameraView {
    type Error = Error;

    fn try_from(rec: &CameraRecord) -> Result<Self> {
        let rotation = Mat3::from_row_slice(&rec.rotation);
        let pose = Pose::new(rotation, Vec3::from_row_slice(&rec.translation))?;
        CameraView::new(Intrinsics::new(rec.fx, rec.fy, rec.cx, rec.cy)?, pose, rec.width, rec.height)
    }
}

/// Rotation about the z axis by `angle` radians.
pub fn rotation_z(angle: f64) -> Mat3 {
    let (s, c) = angle.sin_cos();
    Mat3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Rotation matrix from an axis-angle vector (Rodrigues).
pub fn rotation_from_axis_angle(axis_angle: &Vec3) -> Mat3 {
    nalgebra::Rotation3::new(*axis_angle).into_inner()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_cam(fx: f64, cx: f64, cy: f64) -> CameraView {
        CameraView::new(Intrinsics::new(fx, fx, cx, cy).unwrap(), Pose::identity(), 64, 48).unwrap()
    }

    #[test]
    fn principal_point_looks_down_optical_axis() {
        let cam = simple_cam(50.0, 32.0, 24.0);
        let (o, d) = cam.ray_for_pixel([32.0, 24.0]);
        assert_eq!(o, Vec3::zeros());
        assert!((d - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
    }

    #[test]
    fn unit_focal_ray_closed_form() {
        let cam = CameraView::new(Intrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap(), Pose::identity(), 4, 4).unwrap();
        let (_, d) = cam.ray_for_pixel([1.0, 0.0]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((d - Vec3::new(h, 0.0, h)).norm() < 1e-15);
    }

    #[test]
    fn posed_ray_is_rotated_identity_ray() {
        let r = rotation_from_axis_angle(&Vec3::new(0.3, -0.2, 0.9));
        let base = simple_cam(40.0, 30.0, 20.0);
        let mut posed = base;
        posed.pose = Pose::new(r, Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let (_, d0) = base.ray_for_pixel([7.5, 11.25]);
        let (o1, d1) = posed.ray_for_pixel([7.5, 11.25]);
        assert!((d1 - r * d0).norm() < 1e-14);
        assert_eq!(o1, Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn back_project_on_axis_and_rejects_nonpositive_depth() {
        let cam = simple_cam(50.0, 32.0, 24.0);
        let p = cam.back_project([32.0, 24.0], 2.0).unwrap();
        assert!((p - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-15);
        assert!(cam.back_project([1.0, 1.0], 0.0).is_err());
        assert!(cam.back_project([1.0, 1.0], -1.0).is_err());
    }

    #[test]
    fn project_on_axis_and_behind() {
        let cam = simple_cam(50.0, 32.0, 24.0);
        let pr = cam.project(&Vec3::new(0.0, 0.0, 5.0));
        assert_eq!(pr.pixel, [32.0, 24.0]);
        assert_eq!(pr.z, 5.0);
        assert!(pr.visible);
        assert!(!cam.project(&Vec3::new(0.0, 0.0, -1.0)).visible);
    }

    #[test]
    fn pose_validation() {
        let mut m = Mat3::identity();
        m[(0, 0)] = -1.0;
        assert!(Pose::new(m, Vec3::zeros()).is_err());
        m[(0, 0)] = 1.1;
        assert!(Pose::new(m, Vec3::zeros()).is_err());
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn look_at_points_forward() {
        let pose = Pose::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), Vec3::new(0.0, -1.0, 0.0)).unwrap();
        assert!((pose.rotation().column(2) - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-12);
        let cam = CameraView::new(Intrinsics::new(10.0, 10.0, 5.0, 5.0).unwrap(), pose, 10, 10).unwrap();
        let pr = cam.project(&Vec3::zeros());
        assert!((pr.pixel[0] - 5.0).abs() < 1e-12 && (pr.pixel[1] - 5.0).abs() < 1e-12);
        assert!((pr.z - 3.0).abs() < 1e-12);
    }
}
