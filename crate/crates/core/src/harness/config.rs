use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::model::ModelConfig;
use crate::planner::{PlanConfig, RewardSpec};
use crate::simulator::{
    CollectConfig, EpisodeConfig, RenderConfig, VehicleParams, WorldKind, WorldParams,
};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSection {
    pub kind: WorldKind,
    pub seed: u64,
    /// Seed of the procedural test world. Toy test worlds are the training
    /// world with terrain swapped and ignore this.
    pub test_seed: u64,
    /// Backdrop colors of the procedural test world.
    pub test_backdrop_palette: Vec<[u8; 3]>,
    pub extent: Option<f64>,
    pub patch_scale: Option<f64>,
    pub obstacle_density: Option<f64>,
    pub texture_amplitude: Option<f64>,
}

impl Default for WorldSection {
    fn default() -> Self {
        Self {
            kind: WorldKind::Toy,
            seed: 1,
            test_seed: 2,
            test_backdrop_palette: vec![[196, 160, 96], [92, 64, 120], [228, 228, 232]],
            extent: None,
            patch_scale: None,
            obstacle_density: None,
            texture_amplitude: None,
        }
    }
}

impl WorldSection {
    pub fn params(&self) -> WorldParams {
        let mut p = WorldParams::preset(self.kind);
        if let Some(v) = self.extent {
            p.extent = v;
        }
        if let Some(v) = self.patch_scale {
            p.patch_scale = v;
        }
        if let Some(v) = self.obstacle_density {
            p.obstacle_density = v;
        }
        if let Some(v) = self.texture_amplitude {
            p.texture_amplitude = v;
        }
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationConfig {
    /// Seed of the training-world data collection.
    pub collect_seed: u64,
    pub test_collect_seed: u64,
    /// Samples collected in the test world for offline evaluation.
    pub test_samples: usize,
    pub episodes: usize,
    pub episode: EpisodeConfig,
    /// Seed of the shared episode start poses.
    pub start_seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            collect_seed: 10,
            test_collect_seed: 11,
            test_samples: 6000,
            episodes: 30,
            episode: EpisodeConfig::default(),
            start_seed: 1000,
        }
    }
}

/// Everything one experiment needs, read from a TOML file with one table
/// per section. Missing keys take their defaults; unknown keys are errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub world: WorldSection,
    pub vehicle: VehicleParams,
    pub render: RenderConfig,
    pub collect: CollectConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub planner: PlanConfig,
    pub reward: RewardSpec,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            world: WorldSection::default(),
            vehicle: VehicleParams::default(),
            render: RenderConfig::default(),
            collect: CollectConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            planner: PlanConfig::default(),
            reward: RewardSpec::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates. Every unknown key is reported, not just the first.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let de = toml::Deserializer::new(text);
        let mut unknown = Vec::new();
        let cfg: Self = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| HarnessError::Config(vec![e.to_string()]))?;
        if !unknown.is_empty() {
            return Err(HarnessError::Config(unknown.into_iter().map(|k| format!("unknown key `{k}`")).collect()));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> String {
        let digest = format!("{:x}", Sha256::digest(self.to_toml().as_bytes()));
        digest[..16].to_string()
    }

    /// Checks every section and reports all problems at once.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut errors = Vec::new();
        let mut check = |key: &str, r: Result<(), String>| {
            if let Err(e) = r {
                errors.push(format!("{key}: {e}"));
            }
        };
        check("seeds", if self.seeds.is_empty() { Err("at least one seed is required".into()) } else { Ok(()) });
        let params = self.world.params();
        check("world", params.validate().map_err(|e| e.to_string()));
        if self.world.test_backdrop_palette.is_empty() {
            check("world.test_backdrop_palette", Err("needs at least one color".into()));
        }
        check("vehicle", self.vehicle.validate().map_err(|e| e.to_string()));
        check("render.rig", self.render.rig.validate().map_err(|e| e.to_string()));
        check("collect", self.collect.validate().map_err(|e| e.to_string()));
        check("model", self.model.validate().map_err(|e| e.to_string()));
        check("training", self.training.validate().map_err(|e| e.to_string()));
        check("planner", self.planner.validate().map_err(|e| e.to_string()));
        check("reward", self.reward.validate().map_err(|e| e.to_string()));
        if self.render.rig != self.model.camera {
            check("model.camera", Err("must equal render.rig so masks use the rendering camera".into()));
        }
        let (k, m) = (&self.render.rig.intrinsics, &self.model);
        if (k.image_w, k.image_h, 3) != (m.image_width, m.image_height, m.image_channels) {
            check("model", Err("image dimensions must match the rendered images".into()));
        }
        if self.collect.horizon != m.horizon {
            check("collect.horizon", Err(format!("{} differs from model.horizon {}", self.collect.horizon, m.horizon)));
        }
        let heads: Vec<_> = self.collect.events.iter().map(|e| e.head(params.num_classes)).collect();
        if heads != m.heads {
            let names: Vec<_> = heads.iter().map(|h| h.name.as_str()).collect();
            check("model.heads", Err(format!("must match the collected events {names:?}")));
        }
        if m.action_dim != 1 || self.planner.action_dim() != 1 {
            check("model.action_dim", Err("the simulator has one steering action".into()));
        }
        if self.evaluation.test_samples == 0 {
            check("evaluation.test_samples", Err("must be at least 1".into()));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(HarnessError::Config(errors))
        }
    }
}
