//! Pinhole intrinsics, rigid poses and projection.
//!
//! Poses map world (model) coordinates to camera coordinates:
//! `X_cam = R * X_world + t`. The camera looks down +z, image `u` grows
//! with camera x and `v` grows with camera y. Integer pixel coordinates
//! are pixel centers.

use nalgebra::{Matrix3, Point2, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
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

    /// Square image of `size` pixels with the principal point at the image center.
    pub fn centered(focal: f64, size: usize) -> Self {
        let c = (size as f64 - 1.0) / 2.0;
        Self {
            fx: focal,
            fy: focal,
            cx: c,
            cy: c,
            width: size,
            height: size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::invalid("intrinsics", "focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64 && self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::invalid("intrinsics", "principal point outside the image"));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Projects a camera-space point. Returns `None` when `z <= 0`.
    #[inline]
    pub fn project_camera(&self, p: &Vector3<f64>) -> Option<Point2<f64>> {
        if p.z <= 0.0 {
            return None;
        }
        Some(Point2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Back-projects pixel `(u, v)` to the camera-space point at depth `z`.
    #[inline]
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z)
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "pose",
                format!("rotation is not in SO(3) (orthogonality error {ortho:e}, det {det})"),
            ));
        }
        Ok(())
    }

    #[inline]
    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &PoseSE3) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }
}

/// A projected point: continuous pixel plus camera-space depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

pub fn project(point_world: &Vector3<f64>, pose: &PoseSE3, k: &CameraIntrinsics) -> Result<Projection> {
    let pc = pose.transform(point_world);
    match k.project_camera(&pc) {
        Some(p) => Ok(Projection {
            u: p.x,
            v: p.y,
            depth: pc.z,
        }),
        None => Err(Error::BehindCamera { depth: pc.z }),
    }
}

/// Transform taking target-camera coordinates to source-camera coordinates.
pub fn relative_pose(pose_t: &PoseSE3, pose_s: &PoseSE3) -> PoseSE3 {
    let r = pose_s.rotation * pose_t.rotation.transpose();
    PoseSE3 {
        rotation: r,
        translation: pose_s.translation - r * pose_t.translation,
    }
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle_between(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let r = a.transpose() * b;
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // acos loses precision near zero; recover the angle from the skew part there.
    let s = 0.5
        * Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]).norm();
    s.atan2(c)
}

/// Euler angles `(x, y, z)` in radians, composed as `Rz * Ry * Rx`.
pub fn rotation_from_euler(angles: [f64; 3]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_euler_angles(angles[0], angles[1], angles[2])
}

pub fn euler_from_rotation(q: &UnitQuaternion<f64>) -> [f64; 3] {
    let (x, y, z) = q.euler_angles();
    [x, y, z]
}

pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pose(rng: &mut ChaCha8Rng) -> PoseSE3 {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let q = UnitQuaternion::from_scaled_axis(axis);
        let t = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(4.0..6.0));
        PoseSE3::from_quaternion(&q, t)
    }

    #[test]
    fn optical_axis_projects_to_principal_point() {
        let k = CameraIntrinsics::new(100.0, 120.0, 64.0, 50.0, 128, 128).unwrap();
        let p = project(&Vector3::new(0.0, 0.0, 3.5), &PoseSE3::identity(), &k).unwrap();
        assert_eq!((p.u, p.v, p.depth), (64.0, 50.0, 3.5));
    }

    #[test]
    fn projection_formula() {
        let k = CameraIntrinsics::new(100.0, 100.0, 64.0, 64.0, 128, 128).unwrap();
        let p = project(&Vector3::new(1.0, 0.0, 2.0), &PoseSE3::identity(), &k).unwrap();
        assert_eq!(p.u, 114.0);
        assert_eq!(p.v, 64.0);
    }

    #[test]
    fn behind_camera_is_an_error() {
        let k = CameraIntrinsics::centered(100.0, 64);
        assert!(matches!(
            project(&Vector3::new(0.0, 0.0, -1.0), &PoseSE3::identity(), &k),
            Err(Error::BehindCamera { .. })
        ));
        assert!(project(&Vector3::new(0.0, 0.0, 0.0), &PoseSE3::identity(), &k).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 3.9, 0.0, 4, 4).is_ok());
    }

    #[test]
    fn relative_pose_of_equal_poses_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_pose(&mut rng);
        let rel = relative_pose(&p, &p);
        assert!((rel.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(rel.translation.norm() < 1e-12);
    }

    #[test]
    fn relative_pose_round_trip_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let b = random_pose(&mut rng);
            let c = relative_pose(&a, &b).compose(&relative_pose(&b, &a));
            assert!((c.rotation - Matrix3::identity()).norm() < 1e-12);
            assert!(c.translation.norm() < 1e-12);
        }
    }

    #[test]
    fn relative_pose_transports_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = CameraIntrinsics::centered(300.0, 128);
        for _ in 0..100 {
            let t = random_pose(&mut rng);
            let s = random_pose(&mut rng);
            let x = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
            let direct = project(&x, &s, &k).unwrap();
            let xt = t.transform(&x);
            let rel = relative_pose(&t, &s);
            let via = k.project_camera(&rel.transform(&xt)).unwrap();
            assert!((direct.u - via.x).abs() < 1e-9 && (direct.v - via.y).abs() < 1e-9);
        }
    }

    #[test]
    fn euler_round_trip() {
        let q = rotation_from_euler([0.1, -0.3, 0.7]);
        let e = euler_from_rotation(&q);
        assert!((e[0] - 0.1).abs() < 1e-12 && (e[1] + 0.3).abs() < 1e-12 && (e[2] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn geodesic_angle_small_and_large() {
        let a = Matrix3::identity();
        for &ang in &[1e-7, 0.01, 1.0, 3.0] {
            let b = Rotation3::from_axis_angle(&Vector3::y_axis(), ang).into_inner();
            assert!((rotation_angle_between(&a, &b) - ang).abs() < 1e-12);
        }
    }
}
