//! Frame changes and attention-mask construction: world to robot frame,
//! robot frame to pixels through a pinhole camera, pixels to feature-map
//! cells, and Gaussian mask rendering with analytic gradients.

mod camera;
mod mask;
mod pose;

use thiserror::Error;

pub use camera::{
    pixel_to_featuremap, robot_to_pixel, CameraIntrinsics, CameraRig, FeatureCoord, FeatureMapGeometry, PixelProjection,
    DEPTH_MIN,
};
pub use mask::{
    gaussian_mask, gaussian_mask_vjp, AttentionCovariance, AttentionMask, CovarianceVariant, MIN_VARIANCE,
};
pub use pose::{robot_to_world, world_to_robot, PoseSE3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("rotation is not orthonormal with det +1 (max deviation {deviation:e})")]
    NotARotation { deviation: f64 },
    #[error("invalid camera intrinsics: {0}")]
    Intrinsics(&'static str),
    #[error("image size {image}px is not divisible by output stride {stride}")]
    Indivisible { image: usize, stride: usize },
    #[error("{variant:?} covariance takes {expected} parameters, got {found}")]
    CovarianceParams { variant: CovarianceVariant, expected: usize, found: usize },
}

#[cfg(test)]
mod tests;
