use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::overlay::RedThresholds;
use super::EnvError;
use crate::occupancy::{DEFAULT_CELL_EDGE, DEFAULT_DEPTH, DEFAULT_MIN_POINTS};
use crate::synthetic::SceneSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub goal_reward: f64,
    pub step_penalty: f64,
    pub collision_penalty: f64,
    pub out_of_bounds_penalty: f64,
    /// Half-width of the square play area on x and y.
    pub bounds: f64,
    pub max_steps: u32,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            goal_reward: 50.0,
            step_penalty: -0.2,
            collision_penalty: -10.0,
            out_of_bounds_penalty: -10.0,
            bounds: 1.0,
            max_steps: 200,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let vals = [self.goal_reward, self.step_penalty, self.collision_penalty, self.out_of_bounds_penalty, self.bounds];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(EnvError::Config("reward values must be finite".into()));
        }
        if self.goal_reward <= 0.0 {
            return Err(EnvError::Config("goal_reward must be positive".into()));
        }
        if self.step_penalty > 0.0 || self.collision_penalty > 0.0 || self.out_of_bounds_penalty > 0.0 {
            return Err(EnvError::Config("penalties must be <= 0".into()));
        }
        if self.max_steps == 0 || self.bounds <= 0.0 {
            return Err(EnvError::Config("max_steps and bounds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub step: f64,
    pub heading_count: u32,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            heading_count: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FpsConfig {
    pub step: f64,
    pub turn_deg: f64,
    /// Goal radius in scene units; defaults to one grid step.
    pub goal_tolerance: f64,
    pub heading_tolerance_deg: f64,
}

impl Default for FpsConfig {
    fn default() -> Self {
        Self {
            step: 0.1,
            turn_deg: 15.0,
            goal_tolerance: 0.1,
            heading_tolerance_deg: 15.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraConfig {
    pub width: u32,
    pub height: u32,
    pub hfov_deg: f64,
    /// Camera height above the floor.
    pub elevation: f64,
    /// Half-extent of the collision box around the camera centre.
    pub half_extent: f64,
}

impl Default for CameraConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            hfov_deg: 90.0,
            elevation: 0.15,
            half_extent: crate::occupancy::CAMERA_HALF_EXTENT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GoalConfig {
    pub x: f64,
    pub y: f64,
    pub yaw_deg: f64,
}

impl Default for GoalConfig {
    /// Facing the courtyard landmark from 0.3 units away.
    fn default() -> Self {
        Self {
            x: -0.5,
            y: 0.0,
            yaw_deg: 180.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    pub enabled: bool,
    pub window: usize,
    pub threshold: f64,
    pub start_radius: u32,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window: 20,
            threshold: 0.8,
            start_radius: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseNoiseConfig {
    pub enabled: bool,
    pub sigma_t: f64,
    /// Radians.
    pub sigma_yaw: f64,
}

impl Default for PoseNoiseConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            sigma_t: 0.02,
            sigma_yaw: 2f64.to_radians(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OverlayConfig {
    /// RGBA PNG; the built-in apple is used when absent.
    pub sprite: Option<PathBuf>,
    pub anchor: [f64; 3],
    pub world_height: f64,
    pub red: RedThresholds,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self {
            sprite: None,
            anchor: [-0.5, 0.5, 0.15],
            world_height: 0.12,
            red: RedThresholds::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub cell_edge: f64,
    pub depth: u8,
    pub min_points: u32,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            cell_edge: DEFAULT_CELL_EDGE,
            depth: DEFAULT_DEPTH,
            min_points: DEFAULT_MIN_POINTS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneSource {
    /// Generated on load; the forest is built from the sampled cloud.
    Synthetic(SceneSpec),
    /// Splat PLY plus a forest file; without one the forest is built from
    /// the splat centres.
    Files { scene: PathBuf, forest: Option<PathBuf> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Grid,
    Fps,
    Overlay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub scene: SceneSource,
    pub forest: ForestConfig,
    pub reward: RewardConfig,
    pub grid: GridConfig,
    pub fps: FpsConfig,
    pub camera: CameraConfig,
    pub goal: GoalConfig,
    pub curriculum: CurriculumConfig,
    pub noise: PoseNoiseConfig,
    pub overlay: OverlayConfig,
    /// Reuse rendered observations per grid state (noise-free grid only).
    pub cache_observations: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            kind: EnvKind::Grid,
            scene: SceneSource::Synthetic(SceneSpec::courtyard(7, 4000)),
            forest: ForestConfig::default(),
            reward: RewardConfig::default(),
            grid: GridConfig::default(),
            fps: FpsConfig::default(),
            camera: CameraConfig::default(),
            goal: GoalConfig::default(),
            curriculum: CurriculumConfig::default(),
            noise: PoseNoiseConfig::default(),
            overlay: OverlayConfig::default(),
            cache_observations: true,
        }
    }
}

impl EnvConfig {
    pub fn grid() -> Self {
        Self::default()
    }

    pub fn fps() -> Self {
        Self {
            kind: EnvKind::Fps,
            ..Self::default()
        }
    }

    /// Heading-relative motion with the sprite as the goal; the scene has no
    /// landmark so only the sprite is red.
    pub fn overlay() -> Self {
        let mut spec = SceneSpec::courtyard(7, 4000);
        spec.landmark = None;
        Self {
            kind: EnvKind::Overlay,
            scene: SceneSource::Synthetic(spec),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        self.reward.validate()?;
        let bad = |m: &str| Err(EnvError::Config(m.into()));
        if !(self.grid.step > 0.0) || self.grid.heading_count == 0 {
            return bad("grid step and heading_count must be positive");
        }
        if !(self.fps.step > 0.0 && self.fps.turn_deg > 0.0 && self.fps.goal_tolerance > 0.0) {
            return bad("fps step, turn and tolerance must be positive");
        }
        if self.camera.width == 0 || self.camera.height == 0 || !(self.camera.half_extent >= 0.0) {
            return bad("camera resolution must be positive and half_extent >= 0");
        }
        if self.curriculum.window == 0 || !(0.0..=1.0).contains(&self.curriculum.threshold) {
            return bad("curriculum window must be positive and threshold in [0, 1]");
        }
        if !(self.noise.sigma_t >= 0.0 && self.noise.sigma_yaw >= 0.0) {
            return bad("noise sigmas must be >= 0");
        }
        if !(self.overlay.world_height > 0.0) {
            return bad("overlay world_height must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let cfg: Self = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn action_count(&self) -> usize {
        match self.kind {
            EnvKind::Grid => 6,
            EnvKind::Fps | EnvKind::Overlay => 4,
        }
    }
}
