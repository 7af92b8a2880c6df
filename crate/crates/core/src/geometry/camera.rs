use nalgebra::{Matrix2x3, Matrix3x2, Vector3};
use serde::{Deserialize, Serialize};

use super::{GeometryError, PoseSE3};

/// Points closer than this along the optical axis are projected as if at
/// this depth and flagged.
pub const DEPTH_MIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_w: usize,
    pub image_h: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, image_w: usize, image_h: usize) -> Result<Self, GeometryError> {
        let k = Self { fx, fy, cx, cy, image_w, image_h };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::Intrinsics("focal lengths must be positive"));
        }
        if !(self.cx >= 0.0 && self.cx < self.image_w as f64 && self.cy >= 0.0 && self.cy < self.image_h as f64) {
            return Err(GeometryError::Intrinsics("principal point must lie inside the image"));
        }
        Ok(())
    }
}

/// Intrinsics plus mounting of the forward-looking camera on the vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub intrinsics: CameraIntrinsics,
    /// Metres above the ground plane.
    pub height: f64,
    /// Downward tilt of the optical axis, degrees.
    pub pitch_deg: f64,
}

impl Default for CameraRig {
    fn default() -> Self {
        Self {
            intrinsics: CameraIntrinsics { fx: 32.0, fy: 32.0, cx: 16.0, cy: 16.0, image_w: 32, image_h: 32 },
            height: 0.5,
            pitch_deg: 10.0,
        }
    }
}

impl CameraRig {
    pub fn pose_in_robot(&self) -> PoseSE3 {
        PoseSE3::forward_camera(self.height, self.pitch_deg.to_radians())
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        self.intrinsics.validate()?;
        if !(self.height > 0.0) || !(-89.0..=89.0).contains(&self.pitch_deg) {
            return Err(GeometryError::Intrinsics("camera height must be positive and pitch within +-89 degrees"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelProjection {
    pub u: f64,
    pub v: f64,
    /// Camera-frame depth actually used (at least [`DEPTH_MIN`]).
    pub depth: f64,
    /// Set when the true depth was at or below [`DEPTH_MIN`].
    pub clamped: bool,
    /// d(u, v) / d(robot-frame point).
    pub jacobian: Matrix2x3<f64>,
}

/// Projects a robot-frame point through a camera whose pose in the robot
/// frame is `camera_in_robot`.
pub fn robot_to_pixel(x_robot: &Vector3<f64>, camera_in_robot: &PoseSE3, k: &CameraIntrinsics) -> PixelProjection {
    let pc = camera_in_robot.inverse_transform_point(x_robot);
    let clamped = pc.z <= DEPTH_MIN;
    let d = if clamped { DEPTH_MIN } else { pc.z };
    let u = k.fx * pc.x / d + k.cx;
    let v = k.fy * pc.y / d + k.cy;
    let dz_u = if clamped { 0.0 } else { -k.fx * pc.x / (d * d) };
    let dz_v = if clamped { 0.0 } else { -k.fy * pc.y / (d * d) };
    let d_cam = Matrix2x3::new(k.fx / d, 0.0, dz_u, 0.0, k.fy / d, dz_v);
    let jacobian = d_cam * camera_in_robot.rotation().transpose();
    PixelProjection { u, v, depth: d, clamped, jacobian }
}

/// Strides of the encoder layers and the resulting feature-map size.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMapGeometry {
    strides: Vec<usize>,
    pub feature_w: usize,
    pub feature_h: usize,
}

impl FeatureMapGeometry {
    pub fn new(strides: Vec<usize>, image_w: usize, image_h: usize) -> Result<Self, GeometryError> {
        let stride: usize = strides.iter().product();
        if stride == 0 {
            return Err(GeometryError::Indivisible { image: image_w, stride });
        }
        for image in [image_w, image_h] {
            if image % stride != 0 || image == 0 {
                return Err(GeometryError::Indivisible { image, stride });
            }
        }
        Ok(Self { strides, feature_w: image_w / stride, feature_h: image_h / stride })
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn output_stride(&self) -> usize {
        self.strides.iter().product()
    }
}

/// Continuous feature-map position plus d(x, y)/d(u, v), which is zero on
/// an axis that was clamped to the map border.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureCoord {
    pub x: f64,
    pub y: f64,
    pub dx_du: f64,
    pub dy_dv: f64,
}

impl FeatureCoord {
    /// Chains through a pixel projection: d(x, y) / d(robot-frame point).
    pub fn jacobian_robot(&self, p: &PixelProjection) -> Matrix2x3<f64> {
        let mut j = p.jacobian;
        j.row_mut(0).scale_mut(self.dx_du);
        j.row_mut(1).scale_mut(self.dy_dv);
        j
    }

    /// Planar (x, y) columns of [`Self::jacobian_robot`], transposed.
    pub fn planar_jacobian_t(&self, p: &PixelProjection) -> Matrix3x2<f64> {
        self.jacobian_robot(p).transpose()
    }
}

pub fn pixel_to_featuremap(u: f64, v: f64, g: &FeatureMapGeometry) -> FeatureCoord {
    let s = g.output_stride() as f64;
    let clamp = |raw: f64, max: f64| {
        if raw < 0.0 {
            (0.0, 0.0)
        } else if raw > max {
            (max, 0.0)
        } else {
            (raw, 1.0 / s)
        }
    };
    let (x, dx_du) = clamp(u / s, (g.feature_w - 1) as f64);
    let (y, dy_dv) = clamp(v / s, (g.feature_h - 1) as f64);
    FeatureCoord { x, y, dx_du, dy_dv }
}
