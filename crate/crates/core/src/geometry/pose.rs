use nalgebra::{Matrix3, Rotation3, Vector3};

use super::GeometryError;

/// Rigid transform. `rotation` maps this frame's axes into the parent
/// frame and `translation` is this frame's origin in the parent frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = (rotation.determinant() - 1.0).abs();
        let deviation = ortho.max(det);
        if !(deviation <= 1e-9) {
            return Err(GeometryError::NotARotation { deviation });
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Ground-vehicle pose: position on the plane z = 0 and yaw about +z.
    pub fn planar(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            rotation: *Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).matrix(),
            translation: Vector3::new(x, y, 0.0),
        }
    }

    /// Forward-looking camera `height` metres above the robot origin,
    /// tilted down by `pitch_down` radians. Camera axes: x right, y down,
    /// z along the optical axis. Robot axes: x forward, y left, z up.
    pub fn forward_camera(height: f64, pitch_down: f64) -> Self {
        let (s, c) = pitch_down.sin_cos();
        let optical = Vector3::new(c, 0.0, -s);
        let right = Vector3::new(0.0, -1.0, 0.0);
        let down = optical.cross(&right);
        Self {
            rotation: Matrix3::from_columns(&[right, down, optical]),
            translation: Vector3::new(0.0, 0.0, height),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt * self.translation) }
    }

    /// Point in this frame -> parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Point in the parent frame -> this frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }
}

pub fn world_to_robot(x_world: &Vector3<f64>, robot_pose_in_world: &PoseSE3) -> Vector3<f64> {
    robot_pose_in_world.inverse_transform_point(x_world)
}

pub fn robot_to_world(x_robot: &Vector3<f64>, robot_pose_in_world: &PoseSE3) -> Vector3<f64> {
    robot_pose_in_world.transform_point(x_robot)
}
