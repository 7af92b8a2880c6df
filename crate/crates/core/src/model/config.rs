use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::geometry::{CameraRig, CovarianceVariant, FeatureMapGeometry, MIN_VARIANCE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Trajectory,
    SelfAttention,
    None,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Trajectory, Variant::SelfAttention, Variant::None];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Trajectory => "trajectory",
            Variant::SelfAttention => "self_attention",
            Variant::None => "none",
        }
    }

    pub fn has_mask(self) -> bool {
        self != Variant::None
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "trajectory" => Ok(Variant::Trajectory),
            "self" | "self_attention" => Ok(Variant::SelfAttention),
            "none" => Ok(Variant::None),
            other => Err(format!("unknown variant {other:?} (expected trajectory, self or none)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Discrete(usize),
    Continuous(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventHeadSpec {
    pub name: String,
    pub kind: HeadKind,
}

impl EventHeadSpec {
    pub fn discrete(name: &str, classes: usize) -> Self {
        Self { name: name.to_string(), kind: HeadKind::Discrete(classes) }
    }

    pub fn continuous(name: &str, dim: usize) -> Self {
        Self { name: name.to_string(), kind: HeadKind::Continuous(dim) }
    }

    /// Output width: class count or value dimension.
    pub fn width(&self) -> usize {
        match self.kind {
            HeadKind::Discrete(n) | HeadKind::Continuous(n) => n,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.kind, HeadKind::Discrete(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub horizon: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub image_channels: usize,
    pub action_dim: usize,
    pub convs: Vec<ConvSpec>,
    /// Hidden size of both recurrent cells.
    pub hidden: usize,
    pub action_embedding: usize,
    pub heads: Vec<EventHeadSpec>,
    pub covariance: CovarianceVariant,
    pub camera: CameraRig,
    /// Metres per unit of the raw per-step displacement output.
    pub position_scale: f64,
    /// Initial mask standard deviation, feature-map cells.
    pub init_sigma: f64,
    /// Upper bound on the predicted mask standard deviation, feature-map
    /// cells. Unset leaves the spread unbounded.
    pub max_sigma: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Trajectory,
            horizon: 12,
            image_width: 32,
            image_height: 32,
            image_channels: 3,
            action_dim: 1,
            convs: vec![
                ConvSpec { kernel: 3, channels: 8, stride: 2 },
                ConvSpec { kernel: 3, channels: 16, stride: 2 },
            ],
            hidden: 64,
            action_embedding: 16,
            heads: vec![EventHeadSpec::discrete("terrain", 2)],
            covariance: CovarianceVariant::Isotropic,
            camera: CameraRig::default(),
            position_scale: 1.0,
            init_sigma: 0.5,
            max_sigma: Some(0.75),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.convs.is_empty() {
            return bad("at least one convolution is required".into());
        }
        for (i, c) in self.convs.iter().enumerate() {
            if c.kernel % 2 == 0 || c.channels == 0 || c.stride == 0 {
                return bad(format!("conv {i}: kernel must be odd (padding (k-1)/2), channels and stride positive"));
            }
        }
        if self.image_channels == 0 || self.action_dim == 0 || self.hidden == 0 || self.action_embedding == 0 {
            return bad("image_channels, action_dim, hidden and action_embedding must be positive".into());
        }
        if self.heads.is_empty() {
            return bad("at least one event head is required".into());
        }
        for h in &self.heads {
            match h.kind {
                HeadKind::Discrete(n) if n < 2 => return bad(format!("head {}: needs at least 2 classes", h.name)),
                HeadKind::Continuous(0) => return bad(format!("head {}: dimension must be positive", h.name)),
                _ => {}
            }
        }
        for (i, h) in self.heads.iter().enumerate() {
            if self.heads[..i].iter().any(|o| o.name == h.name) {
                return bad(format!("duplicate head name {}", h.name));
            }
        }
        let k = &self.camera.intrinsics;
        if k.image_w != self.image_width || k.image_h != self.image_height {
            return bad(format!(
                "camera image {}x{} differs from model image {}x{}",
                k.image_w, k.image_h, self.image_width, self.image_height
            ));
        }
        self.camera.validate()?;
        self.feature_geometry()?;
        if !(self.position_scale > 0.0 && self.init_sigma > 0.0) {
            return bad("position_scale and init_sigma must be positive".into());
        }
        if let Some(m) = self.max_sigma {
            if !(m > self.init_sigma && m > MIN_VARIANCE.sqrt()) {
                return bad(format!("max_sigma {m} must exceed init_sigma {}", self.init_sigma));
            }
        }
        Ok(())
    }

    pub fn feature_geometry(&self) -> Result<FeatureMapGeometry, ModelError> {
        let strides = self.convs.iter().map(|c| c.stride).collect();
        Ok(FeatureMapGeometry::new(strides, self.image_width, self.image_height)?)
    }

    pub fn feature_channels(&self) -> usize {
        self.convs.last().map_or(self.image_channels, |c| c.channels)
    }

    pub fn head(&self, name: &str) -> Option<(usize, &EventHeadSpec)> {
        self.heads.iter().enumerate().find(|(_, h)| h.name == name)
    }

    /// Index of the first discrete head, used for accuracy-based model selection.
    pub fn primary_discrete_head(&self) -> Option<usize> {
        self.heads.iter().position(EventHeadSpec::is_discrete)
    }
}
