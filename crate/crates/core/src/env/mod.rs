//! Navigation MDPs over a splat scene.
//!
//! Three variants share one state machine: `Grid` moves on a lattice in
//! world axes, `Fps` moves along the current heading, and `Overlay` is
//! `Fps` with a virtual sprite whose red pixels are the goal.

pub mod config;
pub mod curriculum;
pub mod overlay;

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::io::{self, Write};
use std::sync::{Arc, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::*;
pub use curriculum::{curriculum_update, CurriculumState};
pub use overlay::{apply_overlay, red_fraction, red_pixel_reward, RedThresholds, SpriteOverlay};

use crate::geometry::{CameraIntrinsics, CameraPose, Vec3};
use crate::occupancy::{self, camera_box, OccupancyError, OctreeForest};
use crate::render::{render, RenderedImage};
use crate::scene::{load_splat_scene, SceneError, SplatScene};
use crate::synthetic::generate_synthetic_scene;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode is over; call reset first")]
    EpisodeOver,
    #[error("action {action} out of range for {count} actions")]
    InvalidAction { action: usize, count: usize },
    #[error("no collision-free start within curriculum radius {radius}")]
    NoStart { radius: u32 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Occupancy(#[from] OccupancyError),
    #[error("sprite: {0}")]
    Sprite(#[from] image::ImageError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub fn validate_action(action: usize, count: usize) -> Result<(), EnvError> {
    if action < count {
        Ok(())
    } else {
        Err(EnvError::InvalidAction { action, count })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridAction {
    PlusX,
    MinusX,
    PlusY,
    MinusY,
    PlusYaw,
    MinusYaw,
}

impl GridAction {
    pub const ALL: [GridAction; 6] = [
        GridAction::PlusX,
        GridAction::MinusX,
        GridAction::PlusY,
        GridAction::MinusY,
        GridAction::PlusYaw,
        GridAction::MinusYaw,
    ];

    /// `(dx, dy, dyaw)` in lattice units.
    pub fn delta(self) -> (i32, i32, i32) {
        match self {
            GridAction::PlusX => (1, 0, 0),
            GridAction::MinusX => (-1, 0, 0),
            GridAction::PlusY => (0, 1, 0),
            GridAction::MinusY => (0, -1, 0),
            GridAction::PlusYaw => (0, 0, 1),
            GridAction::MinusYaw => (0, 0, -1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FpsAction {
    Forward,
    Backward,
    TurnLeft,
    TurnRight,
}

impl FpsAction {
    pub const ALL: [FpsAction; 4] = [FpsAction::Forward, FpsAction::Backward, FpsAction::TurnLeft, FpsAction::TurnRight];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridState {
    pub ix: i32,
    pub iy: i32,
    pub iyaw: i32,
    pub steps: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpsState {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub steps: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NavState {
    Grid(GridState),
    Fps(FpsState),
}

/// Ground pose of the agent; the camera sits at `z` above `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavPose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl NavPose {
    pub fn camera(&self) -> CameraPose {
        CameraPose::ground(self.x, self.y, self.z, self.yaw)
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }
}

/// Gaussian jitter of the rendered pose; dynamics never see it.
pub fn perturb_pose<R: Rng>(pose: &NavPose, noise: &PoseNoiseConfig, rng: &mut R) -> NavPose {
    if !noise.enabled {
        return *pose;
    }
    let mut g = |s: f64| if s > 0.0 { Normal::new(0.0, s).unwrap().sample(rng) } else { 0.0 };
    NavPose {
        x: pose.x + g(noise.sigma_t),
        y: pose.y + g(noise.sigma_t),
        z: pose.z + g(noise.sigma_t),
        yaw: pose.yaw + g(noise.sigma_yaw),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    Goal,
    Collision,
    OutOfBounds,
    Truncated,
}

/// Rendered frame plus its 8-bit quantization, shared cheaply.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub image: Arc<RenderedImage>,
    pub bytes: Arc<Vec<u8>>,
}

impl Observation {
    pub fn new(image: RenderedImage) -> Self {
        let bytes = image.to_u8();
        Self {
            image: Arc::new(image),
            bytes: Arc::new(bytes),
        }
    }

    /// `(height, width, channels)`.
    pub fn shape(&self) -> [usize; 3] {
        [self.image.height as usize, self.image.width as usize, 3]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub cause: Option<Cause>,
    pub pose: NavPose,
    pub grid: Option<[i32; 3]>,
    pub steps: u32,
    pub red_fraction: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub terminated: bool,
    pub truncated: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u32,
    pub action: Option<usize>,
    pub reward: f64,
    pub pose: NavPose,
    pub cause: Option<Cause>,
}

pub fn write_trace_jsonl<W: Write>(records: &[TraceRecord], w: &mut W) -> Result<(), EnvError> {
    for r in records {
        serde_json::to_writer(&mut *w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace_jsonl(text: &str) -> Result<Vec<TraceRecord>, EnvError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(EnvError::from))
        .collect()
}

/// Immutable assets shared by every environment instance.
#[derive(Debug)]
pub struct World {
    pub scene: SplatScene,
    pub forest: OctreeForest,
    pub intrinsics: CameraIntrinsics,
    pub sprite: Option<SpriteOverlay>,
}

impl World {
    pub fn load(cfg: &EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        let f = &cfg.forest;
        let (scene, forest) = match &cfg.scene {
            SceneSource::Synthetic(spec) => {
                let s = generate_synthetic_scene(spec)?;
                let forest = occupancy::build_forest(&s.cloud, f.cell_edge, f.depth, f.min_points)?;
                (s.scene, forest)
            }
            SceneSource::Files { scene, forest } => {
                let scene = load_splat_scene(scene)?;
                let forest = match forest {
                    Some(p) => occupancy::load_forest(p)?,
                    None => occupancy::build_forest(&scene.means_as_cloud(), f.cell_edge, f.depth, f.min_points)?,
                };
                (scene, forest)
            }
        };
        Self::from_parts(cfg, scene, forest)
    }

    pub fn from_parts(cfg: &EnvConfig, scene: SplatScene, forest: OctreeForest) -> Result<Self, EnvError> {
        let c = &cfg.camera;
        let intrinsics = CameraIntrinsics::from_hfov(c.width, c.height, c.hfov_deg)
            .map_err(|e| EnvError::Config(e.to_string()))?;
        let sprite = match cfg.kind {
            EnvKind::Overlay => {
                let o = &cfg.overlay;
                let anchor = Vec3::from(o.anchor);
                Some(match &o.sprite {
                    Some(p) => SpriteOverlay::load_png(p, anchor, o.world_height)?,
                    None => SpriteOverlay::apple(32, anchor, o.world_height),
                })
            }
            _ => None,
        };
        Ok(Self {
            scene,
            forest,
            intrinsics,
            sprite,
        })
    }

    pub fn collides(&self, center: &Vec3, half_extent: f64) -> bool {
        occupancy::forest_query(&self.forest, &camera_box(center, half_extent))
    }
}

/// One deterministic grid transition, independent of rendering.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridTransition {
    /// `None` when the move leaves the lattice.
    pub next: Option<usize>,
    pub state: GridState,
    pub reward: f64,
    pub terminated: bool,
    pub cause: Option<Cause>,
}

/// Precomputed lattice: collision map, goal and start distances.
#[derive(Clone, Debug)]
pub struct GridModel {
    /// Lattice half-width: positions run over `-n..=n` on each axis.
    pub n: i32,
    pub headings: i32,
    pub step: f64,
    pub elevation: f64,
    pub goal: GridState,
    pub reward: RewardConfig,
    /// Collision flags for `-n-1..=n+1` on each axis.
    blocked: Vec<bool>,
}

impl GridModel {
    pub fn new(cfg: &EnvConfig, world: &World) -> Result<Self, EnvError> {
        let g = &cfg.grid;
        let n = (cfg.reward.bounds / g.step + 1e-9).floor() as i32;
        let headings = g.heading_count as i32;
        let side = 2 * n + 3;
        let mut blocked = vec![false; (side * side) as usize];
        for i in -n - 1..=n + 1 {
            for j in -n - 1..=n + 1 {
                let c = Vec3::new(i as f64 * g.step, j as f64 * g.step, cfg.camera.elevation);
                blocked[((i + n + 1) * side + j + n + 1) as usize] = world.collides(&c, cfg.camera.half_extent);
            }
        }
        let dyaw = TAU / headings as f64;
        let goal = GridState {
            ix: (cfg.goal.x / g.step).round() as i32,
            iy: (cfg.goal.y / g.step).round() as i32,
            iyaw: ((cfg.goal.yaw_deg.to_radians() / dyaw).round() as i32).rem_euclid(headings),
            steps: 0,
        };
        let m = Self {
            n,
            headings,
            step: g.step,
            elevation: cfg.camera.elevation,
            goal,
            reward: cfg.reward.clone(),
            blocked,
        };
        if !m.in_bounds(goal.ix, goal.iy) || m.is_blocked(goal.ix, goal.iy) {
            return Err(EnvError::Config(format!("goal {goal:?} is out of bounds or in collision")));
        }
        Ok(m)
    }

    pub fn side(&self) -> i32 {
        2 * self.n + 1
    }

    pub fn state_count(&self) -> usize {
        (self.side() * self.side() * self.headings) as usize
    }

    pub fn in_bounds(&self, ix: i32, iy: i32) -> bool {
        let b = self.reward.bounds + 1e-9;
        (ix as f64 * self.step).abs() <= b && (iy as f64 * self.step).abs() <= b
    }

    pub fn is_blocked(&self, ix: i32, iy: i32) -> bool {
        let side = 2 * self.n + 3;
        let (i, j) = (ix + self.n + 1, iy + self.n + 1);
        if i < 0 || j < 0 || i >= side || j >= side {
            return false;
        }
        self.blocked[(i * side + j) as usize]
    }

    pub fn index(&self, s: &GridState) -> Option<usize> {
        if s.ix.abs() > self.n || s.iy.abs() > self.n {
            return None;
        }
        let yaw = s.iyaw.rem_euclid(self.headings);
        Some((((s.ix + self.n) * self.side() + (s.iy + self.n)) * self.headings + yaw) as usize)
    }

    pub fn state(&self, index: usize) -> GridState {
        let i = index as i32;
        let yaw = i % self.headings;
        let cell = i / self.headings;
        GridState {
            ix: cell / self.side() - self.n,
            iy: cell % self.side() - self.n,
            iyaw: yaw,
            steps: 0,
        }
    }

    /// Every lattice state, in index order.
    pub fn enumerate_states(&self) -> Vec<GridState> {
        (0..self.state_count()).map(|i| self.state(i)).collect()
    }

    pub fn pose(&self, s: &GridState) -> NavPose {
        NavPose {
            x: s.ix as f64 * self.step,
            y: s.iy as f64 * self.step,
            z: self.elevation,
            yaw: s.iyaw.rem_euclid(self.headings) as f64 * TAU / self.headings as f64,
        }
    }

    pub fn is_goal(&self, s: &GridState) -> bool {
        s.ix == self.goal.ix && s.iy == self.goal.iy && s.iyaw.rem_euclid(self.headings) == self.goal.iyaw
    }

    /// Cause that ends an episode on arrival at `s`, by precedence.
    pub fn terminal_cause(&self, s: &GridState) -> Option<Cause> {
        if self.is_goal(s) {
            Some(Cause::Goal)
        } else if self.is_blocked(s.ix, s.iy) {
            Some(Cause::Collision)
        } else if !self.in_bounds(s.ix, s.iy) {
            Some(Cause::OutOfBounds)
        } else {
            None
        }
    }

    /// A valid start: in bounds, collision-free and not the goal.
    pub fn is_free(&self, s: &GridState) -> bool {
        self.terminal_cause(s).is_none()
    }

    /// Actions needed in open space: lattice moves plus heading turns.
    pub fn distance(&self, s: &GridState) -> u32 {
        let dyaw = (s.iyaw - self.goal.iyaw).rem_euclid(self.headings);
        let rot = dyaw.min(self.headings - dyaw);
        ((s.ix - self.goal.ix).abs() + (s.iy - self.goal.iy).abs() + rot) as u32
    }

    pub fn transition(&self, s: &GridState, action: GridAction) -> GridTransition {
        let (dx, dy, dyaw) = action.delta();
        let state = GridState {
            ix: s.ix + dx,
            iy: s.iy + dy,
            iyaw: (s.iyaw + dyaw).rem_euclid(self.headings),
            steps: s.steps + 1,
        };
        let cause = self.terminal_cause(&state);
        let r = &self.reward;
        let reward = r.step_penalty
            + match cause {
                Some(Cause::Goal) => r.goal_reward,
                Some(Cause::Collision) => r.collision_penalty,
                Some(Cause::OutOfBounds) => r.out_of_bounds_penalty,
                _ => 0.0,
            };
        GridTransition {
            next: self.index(&state),
            state,
            reward,
            terminated: cause.is_some(),
            cause,
        }
    }

    /// Free starts sorted by distance to the goal, ties by index.
    pub fn starts_by_distance(&self) -> Vec<(u32, usize)> {
        let mut v: Vec<(u32, usize)> = (0..self.state_count())
            .filter(|&i| self.is_free(&self.state(i)))
            .map(|i| (self.distance(&self.state(i)), i))
            .collect();
        v.sort_unstable();
        v
    }
}

/// Rendered observations keyed by grid state index.
#[derive(Debug, Default)]
pub struct ObservationCache {
    map: RwLock<HashMap<usize, Observation>>,
}

impl ObservationCache {
    pub fn get_or_render(&self, key: usize, render: impl FnOnce() -> Observation) -> Observation {
        if let Some(o) = self.map.read().unwrap().get(&key) {
            return o.clone();
        }
        let o = render();
        self.map.write().unwrap().entry(key).or_insert(o).clone()
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shared, immutable parts of an environment; cloning is cheap.
#[derive(Clone, Debug)]
pub struct EnvShared {
    pub config: Arc<EnvConfig>,
    pub world: Arc<World>,
    pub grid: Option<Arc<GridModel>>,
    pub starts: Arc<Vec<(u32, usize)>>,
    pub cache: Arc<ObservationCache>,
    pub max_radius: u32,
}

impl EnvShared {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        let world = World::load(&config)?;
        Self::with_world(config, Arc::new(world))
    }

    pub fn with_world(config: EnvConfig, world: Arc<World>) -> Result<Self, EnvError> {
        config.validate()?;
        let (grid, starts, max_radius) = match config.kind {
            EnvKind::Grid => {
                let m = GridModel::new(&config, &world)?;
                let starts = m.starts_by_distance();
                let max = starts.last().map_or(0, |s| s.0);
                (Some(Arc::new(m)), starts, max)
            }
            EnvKind::Fps | EnvKind::Overlay => {
                let g = &config.goal;
                let b = config.reward.bounds;
                let far = ((b + g.x.abs()).powi(2) + (b + g.y.abs()).powi(2)).sqrt();
                let max = (far / config.fps.step).ceil() + (180.0 / config.fps.turn_deg).ceil();
                (None, Vec::new(), max as u32)
            }
        };
        Ok(Self {
            config: Arc::new(config),
            world,
            grid,
            starts: Arc::new(starts),
            cache: Arc::new(ObservationCache::default()),
            max_radius,
        })
    }

    pub fn make_env(&self) -> NavEnv {
        NavEnv::from_shared(self.clone())
    }
}

pub const MAX_START_TRIES: usize = 1000;

/// Single-threaded episode state machine.
#[derive(Debug)]
pub struct NavEnv {
    shared: EnvShared,
    state: Option<NavState>,
    done: bool,
    curriculum: CurriculumState,
    rng: ChaCha8Rng,
    last: Option<Observation>,
    trace: Option<Vec<TraceRecord>>,
}

impl NavEnv {
    pub fn new(config: EnvConfig) -> Result<Self, EnvError> {
        Ok(Self::from_shared(EnvShared::new(config)?))
    }

    pub fn from_shared(shared: EnvShared) -> Self {
        let curriculum = CurriculumState::new(&shared.config.curriculum, shared.max_radius);
        Self {
            shared,
            state: None,
            done: true,
            curriculum,
            rng: ChaCha8Rng::seed_from_u64(0),
            last: None,
            trace: None,
        }
    }

    pub fn shared(&self) -> &EnvShared {
        &self.shared
    }

    pub fn config(&self) -> &EnvConfig {
        &self.shared.config
    }

    pub fn grid_model(&self) -> Option<&GridModel> {
        self.shared.grid.as_deref()
    }

    pub fn action_count(&self) -> usize {
        self.shared.config.action_count()
    }

    pub fn observation_shape(&self) -> [usize; 3] {
        let c = &self.shared.config.camera;
        [c.height as usize, c.width as usize, 3]
    }

    pub fn curriculum(&self) -> &CurriculumState {
        &self.curriculum
    }

    pub fn curriculum_mut(&mut self) -> &mut CurriculumState {
        &mut self.curriculum
    }

    pub fn set_curriculum(&mut self, c: CurriculumState) {
        self.curriculum = c;
    }

    pub fn state(&self) -> Option<NavState> {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn last_observation(&self) -> Option<&Observation> {
        self.last.as_ref()
    }

    pub fn enable_trace(&mut self) {
        self.trace = Some(Vec::new());
    }

    pub fn take_trace(&mut self) -> Vec<TraceRecord> {
        self.trace.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn pose(&self) -> Option<NavPose> {
        self.state.map(|s| self.pose_of(&s))
    }

    fn pose_of(&self, s: &NavState) -> NavPose {
        match s {
            NavState::Grid(g) => self.shared.grid.as_ref().unwrap().pose(g),
            NavState::Fps(f) => NavPose {
                x: f.x,
                y: f.y,
                z: self.shared.config.camera.elevation,
                yaw: f.yaw,
            },
        }
    }

    /// Goal predicate on poses (pixel-free; the overlay goal is visual).
    pub fn goal_check(&self, s: &NavState) -> bool {
        match s {
            NavState::Grid(g) => self.shared.grid.as_ref().unwrap().is_goal(g),
            NavState::Fps(f) => fps_goal(&self.shared.config, f.x, f.y, f.yaw),
        }
    }

    /// Renders the view from `pose`, with the sprite for the overlay env.
    pub fn render_pose(&self, pose: &NavPose) -> RenderedImage {
        let w = &self.shared.world;
        let cam = pose.camera();
        let img = render(&w.scene, &cam, &w.intrinsics);
        match &w.sprite {
            Some(s) => apply_overlay(&img, s, &cam, &w.intrinsics),
            None => img,
        }
    }

    fn observe(&mut self, s: &NavState) -> Observation {
        let pose = self.pose_of(s);
        let cfg = &self.shared.config;
        if cfg.noise.enabled {
            let noisy = perturb_pose(&pose, &cfg.noise, &mut self.rng);
            return Observation::new(self.render_pose(&noisy));
        }
        if let (true, NavState::Grid(g)) = (cfg.cache_observations, s) {
            if let Some(idx) = self.shared.grid.as_ref().unwrap().index(g) {
                let cache = self.shared.cache.clone();
                return cache.get_or_render(idx, || Observation::new(self.render_pose(&pose)));
            }
        }
        Observation::new(self.render_pose(&pose))
    }

    fn info(&self, s: &NavState, cause: Option<Cause>, red: Option<f64>) -> StepInfo {
        let (grid, steps) = match s {
            NavState::Grid(g) => (Some([g.ix, g.iy, g.iyaw]), g.steps),
            NavState::Fps(f) => (None, f.steps),
        };
        StepInfo {
            cause,
            pose: self.pose_of(s),
            grid,
            steps,
            red_fraction: red,
        }
    }

    /// Samples a start from the curriculum and renders it.
    pub fn reset(&mut self, seed: u64) -> Result<(Observation, StepInfo), EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        let s = self.sample_start()?;
        self.begin(s)
    }

    /// Starts an episode at an explicit state (evaluation sweeps).
    pub fn reset_to(&mut self, s: NavState, seed: u64) -> Result<(Observation, StepInfo), EnvError> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.begin(s)
    }

    fn begin(&mut self, mut s: NavState) -> Result<(Observation, StepInfo), EnvError> {
        match &mut s {
            NavState::Grid(g) => g.steps = 0,
            NavState::Fps(f) => f.steps = 0,
        }
        self.state = Some(s);
        self.done = false;
        let obs = self.observe(&s);
        let red = self.shared.world.sprite.as_ref().map(|_| red_fraction(&obs.image, &self.shared.config.overlay.red));
        self.last = Some(obs.clone());
        if let Some(t) = &mut self.trace {
            t.clear();
        }
        let info = self.info(&s, None, red);
        self.push_trace(0, None, 0.0, &info);
        Ok((obs, info))
    }

    fn push_trace(&mut self, step: u32, action: Option<usize>, reward: f64, info: &StepInfo) {
        if let Some(t) = &mut self.trace {
            t.push(TraceRecord {
                step,
                action,
                reward,
                pose: info.pose,
                cause: info.cause,
            });
        }
    }

    fn sample_start(&mut self) -> Result<NavState, EnvError> {
        let c = &self.curriculum;
        let radius = c.radius;
        let limit = if c.finished { u32::MAX } else { radius };
        if let Some(_m) = &self.shared.grid {
            let starts = &self.shared.starts;
            let end = starts.partition_point(|&(d, _)| d <= limit);
            if end == 0 {
                return Err(EnvError::NoStart { radius });
            }
            let pick = starts[self.rng.gen_range(0..end)].1;
            return Ok(NavState::Grid(self.shared.grid.as_ref().unwrap().state(pick)));
        }
        let cfg = self.shared.config.clone();
        let b = cfg.reward.bounds;
        let (gx, gy, gyaw) = (cfg.goal.x, cfg.goal.y, cfg.goal.yaw_deg.to_radians());
        for _ in 0..MAX_START_TRIES {
            let (x, y, yaw) = if limit == u32::MAX {
                (self.rng.gen_range(-b..=b), self.rng.gen_range(-b..=b), self.rng.gen_range(0.0..TAU))
            } else {
                let r = cfg.fps.goal_tolerance + radius as f64 * cfg.fps.step;
                let turn = (cfg.fps.heading_tolerance_deg + radius as f64 * cfg.fps.turn_deg)
                    .to_radians()
                    .min(std::f64::consts::PI);
                (
                    gx + self.rng.gen_range(-r..=r),
                    gy + self.rng.gen_range(-r..=r),
                    (gyaw + self.rng.gen_range(-turn..=turn)).rem_euclid(TAU),
                )
            };
            if limit != u32::MAX && fps_distance(&cfg, x, y, yaw) > radius as f64 {
                continue;
            }
            let s = FpsState { x, y, yaw, steps: 0 };
            if self.fps_cause(&s, None).is_none() && !self.is_overlay_goal_start(&s) {
                return Ok(NavState::Fps(s));
            }
        }
        Err(EnvError::NoStart { radius })
    }

    fn is_overlay_goal_start(&self, s: &FpsState) -> bool {
        if self.shared.config.kind != EnvKind::Overlay {
            return false;
        }
        let pose = self.pose_of(&NavState::Fps(*s));
        red_pixel_reward(&self.render_pose(&pose), &self.shared.config.overlay.red, 1.0).1
    }

    /// Terminal cause for a continuous state; `red` is the overlay trigger.
    fn fps_cause(&self, s: &FpsState, red: Option<bool>) -> Option<Cause> {
        let cfg = &self.shared.config;
        let goal = match cfg.kind {
            EnvKind::Overlay => red.unwrap_or(false),
            _ => fps_goal(cfg, s.x, s.y, s.yaw),
        };
        let b = cfg.reward.bounds;
        let center = Vec3::new(s.x, s.y, cfg.camera.elevation);
        if goal {
            Some(Cause::Goal)
        } else if self.shared.world.collides(&center, cfg.camera.half_extent) {
            Some(Cause::Collision)
        } else if s.x.abs() > b || s.y.abs() > b {
            Some(Cause::OutOfBounds)
        } else {
            None
        }
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult, EnvError> {
        validate_action(action, self.action_count())?;
        if self.done {
            return Err(EnvError::EpisodeOver);
        }
        let cfg = self.shared.config.clone();
        let r = &cfg.reward;
        let (next, cause, reward, obs, red) = match self.state.unwrap() {
            NavState::Grid(g) => {
                let t = self.shared.grid.as_ref().unwrap().transition(&g, GridAction::ALL[action]);
                let next = NavState::Grid(t.state);
                let obs = self.observe(&next);
                (next, t.cause, t.reward, obs, None)
            }
            NavState::Fps(f) => {
                let mut n = f;
                n.steps += 1;
                let d = cfg.fps.step;
                let turn = cfg.fps.turn_deg.to_radians();
                match FpsAction::ALL[action] {
                    FpsAction::Forward => {
                        n.x += d * f.yaw.cos();
                        n.y += d * f.yaw.sin();
                    }
                    FpsAction::Backward => {
                        n.x -= d * f.yaw.cos();
                        n.y -= d * f.yaw.sin();
                    }
                    FpsAction::TurnLeft => n.yaw = (f.yaw + turn).rem_euclid(TAU),
                    FpsAction::TurnRight => n.yaw = (f.yaw - turn).rem_euclid(TAU),
                }
                let next = NavState::Fps(n);
                let obs = self.observe(&next);
                let (red, trig) = match cfg.kind {
                    EnvKind::Overlay => {
                        let frac = red_fraction(&obs.image, &cfg.overlay.red);
                        (Some(frac), Some(frac >= cfg.overlay.red.fraction))
                    }
                    _ => (None, None),
                };
                let cause = self.fps_cause(&n, trig);
                let reward = r.step_penalty
                    + match cause {
                        Some(Cause::Goal) => r.goal_reward,
                        Some(Cause::Collision) => r.collision_penalty,
                        Some(Cause::OutOfBounds) => r.out_of_bounds_penalty,
                        _ => 0.0,
                    };
                (next, cause, reward, obs, red)
            }
        };
        let steps = match next {
            NavState::Grid(g) => g.steps,
            NavState::Fps(f) => f.steps,
        };
        let terminated = cause.is_some();
        let truncated = !terminated && steps >= r.max_steps;
        let cause = if truncated { Some(Cause::Truncated) } else { cause };
        self.state = Some(next);
        self.done = terminated || truncated;
        self.last = Some(obs.clone());
        let info = self.info(&next, cause, red);
        self.push_trace(steps, Some(action), reward, &info);
        Ok(StepResult {
            observation: obs,
            reward,
            terminated,
            truncated,
            info,
        })
    }
}

pub fn fps_goal(cfg: &EnvConfig, x: f64, y: f64, yaw: f64) -> bool {
    let g = &cfg.goal;
    let dist = ((x - g.x).powi(2) + (y - g.y).powi(2)).sqrt();
    let dyaw = angle_diff(yaw, g.yaw_deg.to_radians());
    dist <= cfg.fps.goal_tolerance + 1e-12 && dyaw <= cfg.fps.heading_tolerance_deg.to_radians() + 1e-12
}

/// Curriculum distance for continuous poses, in action units beyond the
/// goal tolerances (zero inside the goal region).
pub fn fps_distance(cfg: &EnvConfig, x: f64, y: f64, yaw: f64) -> f64 {
    let g = &cfg.goal;
    let dist = ((x - g.x).powi(2) + (y - g.y).powi(2)).sqrt();
    let ang = angle_diff(yaw, g.yaw_deg.to_radians());
    (dist - cfg.fps.goal_tolerance).max(0.0) / cfg.fps.step
        + (ang - cfg.fps.heading_tolerance_deg.to_radians()).max(0.0) / cfg.fps.turn_deg.to_radians()
}

/// Absolute angle between two headings, in `[0, pi]`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}
