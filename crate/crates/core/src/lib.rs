//! Reward-predictive local planning with trajectory-constrained visual
//! attention.
//!
//! A convolutional encoder and two stacked LSTMs predict per-timestep
//! events (terrain roughness, collisions, displacement) for a candidate
//! steering sequence. Attention masks over the encoder's feature map are
//! placed where the vehicle is predicted to drive, and a cross-entropy
//! method planner searches steering sequences against the predicted
//! rewards. A small planar simulator supplies training data and closed
//! loop evaluation.

pub mod autodiff;
pub(crate) mod binio;
pub mod geometry;
pub mod harness;
pub mod model;
pub mod planner;
pub mod simulator;
pub mod training;

pub use binio::FormatError;
