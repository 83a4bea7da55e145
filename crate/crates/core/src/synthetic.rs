//! Procedural desk-scale scenes.
//!
//! The walled courtyard mimics an enclosed garden: a grassy floor, four
//! distinctly colored walls just outside the `[-1, 1]²` play area, two
//! pillars and a small red landmark. The point cloud is sampled from the
//! splats themselves so collision geometry and visuals agree.

use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::scene::{Gaussian, PointCloud, SceneError, SplatScene, SH_C0};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    WalledCourtyard,
    RandomBlobs,
}

fn default_samples() -> usize {
    4
}

fn default_background() -> [f64; 3] {
    [0.70, 0.80, 0.95]
}

fn default_landmark() -> Option<[f64; 3]> {
    Some([-0.8, 0.0, 0.1])
}

fn default_pillars() -> Vec<[f64; 2]> {
    vec![[0.4, 0.6], [0.2, -0.6]]
}

/// JSON-serialisable description of a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub layout: Layout,
    pub splat_count: usize,
    #[serde(default = "default_samples")]
    pub samples_per_splat: usize,
    #[serde(default = "default_landmark")]
    pub landmark: Option<[f64; 3]>,
    /// Pillar centres on the floor (courtyard only).
    #[serde(default = "default_pillars")]
    pub pillars: Vec<[f64; 2]>,
    #[serde(default)]
    pub sh_degree: u8,
    #[serde(default = "default_background")]
    pub background: [f64; 3],
}

impl SceneSpec {
    pub fn courtyard(seed: u64, splat_count: usize) -> Self {
        Self {
            seed,
            layout: Layout::WalledCourtyard,
            splat_count,
            samples_per_splat: default_samples(),
            landmark: default_landmark(),
            pillars: default_pillars(),
            sh_degree: 0,
            background: default_background(),
        }
    }

    pub fn random_blobs(seed: u64, splat_count: usize) -> Self {
        Self {
            layout: Layout::RandomBlobs,
            landmark: None,
            pillars: Vec::new(),
            ..Self::courtyard(seed, splat_count)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterKind {
    Ground,
    Wall,
    Pillar,
    Blob,
    Landmark,
}

/// A contiguous run of splats generated as one object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub kind: ClusterKind,
    pub start: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub scene: SplatScene,
    pub cloud: PointCloud,
    pub clusters: Vec<Cluster>,
}

impl SyntheticScene {
    pub fn landmarks(&self) -> impl Iterator<Item = &Cluster> {
        self.clusters.iter().filter(|c| c.kind == ClusterKind::Landmark)
    }
}

/// Half-width of the square enclosed by the courtyard walls.
pub const WALL_OFFSET: f64 = 1.3;
pub const WALL_HEIGHT: f64 = 0.6;
pub const PILLAR_RADIUS: f64 = 0.07;
pub const PILLAR_HEIGHT: f64 = 0.45;
const LANDMARK_RADII: [f64; 3] = [0.06, 0.06, 0.08];

struct Builder {
    rng: ChaCha8Rng,
    gaussians: Vec<Gaussian>,
    clusters: Vec<Cluster>,
    sh_degree: u8,
}

impl Builder {
    fn begin(&mut self, kind: ClusterKind) {
        self.clusters.push(Cluster {
            kind,
            start: self.gaussians.len(),
            len: 0,
        });
    }

    fn push(&mut self, mean: Vec3, rotation: UnitQuaternion<f64>, scale: Vec3, opacity: f64, rgb: [f64; 3]) {
        let mut g = Gaussian::with_color(mean, rotation, scale, opacity, rgb.map(|c| c.clamp(0.0, 1.0)));
        for _ in 1..(self.sh_degree as usize + 1).pow(2) {
            let jitter: [f64; 3] = [0; 3].map(|_| self.rng.gen_range(-0.15..0.15));
            g.sh.push(jitter);
        }
        self.gaussians.push(g);
        self.clusters.last_mut().unwrap().len += 1;
    }

    fn shade(&mut self, base: [f64; 3], amount: f64) -> [f64; 3] {
        let n: f64 = self.rng.gen_range(-amount..amount);
        base.map(|c| c + n)
    }
}

/// Builds a deterministic scene and its point cloud from `spec`.
pub fn generate_synthetic_scene(spec: &SceneSpec) -> Result<SyntheticScene, SceneError> {
    if spec.splat_count == 0 || spec.samples_per_splat == 0 {
        return Err(SceneError::Spec("splat_count and samples_per_splat must be positive".into()));
    }
    if spec.sh_degree > 3 {
        return Err(SceneError::Spec(format!("sh_degree {} > 3", spec.sh_degree)));
    }
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(spec.seed),
        gaussians: Vec::with_capacity(spec.splat_count),
        clusters: Vec::new(),
        sh_degree: spec.sh_degree,
    };
    match spec.layout {
        Layout::WalledCourtyard => courtyard(&mut b, spec)?,
        Layout::RandomBlobs => blobs(&mut b, spec),
    }
    debug_assert_eq!(b.gaussians.len(), spec.splat_count);
    let scene = SplatScene::new(b.gaussians, spec.sh_degree, spec.background)?;
    let cloud = sample_cloud(&scene, spec.samples_per_splat, &mut b.rng);
    Ok(SyntheticScene {
        scene,
        cloud,
        clusters: b.clusters,
    })
}

/// Draws `per_splat` points from each Gaussian (truncated at 2 sigma).
fn sample_cloud(scene: &SplatScene, per_splat: usize, rng: &mut ChaCha8Rng) -> PointCloud {
    let mut points = Vec::with_capacity(scene.len() * per_splat);
    let mut colors = Vec::with_capacity(scene.len() * per_splat);
    for g in &scene.gaussians {
        let rgb = g.sh[0].map(|c| (0.5 + SH_C0 * c).clamp(0.0, 1.0));
        for _ in 0..per_splat {
            let n = Vector3::from_fn(|_, _| {
                let v: f64 = StandardNormal.sample(rng);
                v.clamp(-2.0, 2.0)
            });
            points.push(g.mean + g.rotation * n.component_mul(&g.scale));
            colors.push(rgb);
        }
    }
    PointCloud {
        points,
        colors: Some(colors),
    }
}

fn courtyard(b: &mut Builder, spec: &SceneSpec) -> Result<(), SceneError> {
    let n = spec.splat_count;
    let landmark_n = spec.landmark.map_or(0, |_| (n / 25).max(1));
    let pillar_n = (n / 20).max(1);
    let wall_n = (n / 10).max(1);
    let fixed = landmark_n + pillar_n * spec.pillars.len() + wall_n * 4;
    if fixed >= n {
        return Err(SceneError::Spec(format!(
            "splat_count {n} too small for the courtyard layout (needs more than {fixed})"
        )));
    }
    let ground_n = n - fixed;

    // Floor: flat discs over the enclosed square.
    b.begin(ClusterKind::Ground);
    let side = (ground_n as f64).sqrt().ceil() as usize;
    let step = 2.0 * WALL_OFFSET / side as f64;
    for k in 0..ground_n {
        let (i, j) = (k % side, k / side);
        let x = -WALL_OFFSET + (i as f64 + b.rng.gen_range(0.2..0.8)) * step;
        let y = -WALL_OFFSET + (j as f64 + b.rng.gen_range(0.2..0.8)) * step;
        let rgb = b.shade([0.30, 0.55, 0.20], 0.08);
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), b.rng.gen_range(0.0..std::f64::consts::PI));
        b.push(Vec3::new(x, y, 0.0), rot, Vec3::new(step * 0.75, step * 0.6, 0.004), 0.97, rgb);
    }

    // Walls: (centre direction, base color). Each gets a brightness ramp
    // along its length and vertical banding so position is recoverable.
    let walls: [([f64; 2], [f64; 3]); 4] = [
        ([0.0, 1.0], [0.20, 0.35, 0.80]),
        ([0.0, -1.0], [0.85, 0.80, 0.25]),
        ([1.0, 0.0], [0.80, 0.80, 0.80]),
        ([-1.0, 0.0], [0.20, 0.60, 0.60]),
    ];
    let length = 2.0 * WALL_OFFSET;
    for (normal, base) in walls {
        b.begin(ClusterKind::Wall);
        let cols = ((wall_n as f64 * length / WALL_HEIGHT).sqrt().ceil() as usize).max(1);
        let rows = wall_n.div_ceil(cols);
        let (du, dv) = (length / cols as f64, WALL_HEIGHT / rows as f64);
        let tangent = Vec3::new(-normal[1], normal[0], 0.0);
        let centre = Vec3::new(normal[0], normal[1], 0.0) * WALL_OFFSET;
        // Local axes: x along the wall, y up, z through the wall.
        let rot = UnitQuaternion::from_basis_unchecked(&[tangent, Vec3::z(), Vec3::new(normal[0], normal[1], 0.0)]);
        for k in 0..wall_n {
            let (i, j) = (k % cols, k / cols);
            let u = -WALL_OFFSET + (i as f64 + 0.5) * du;
            let v = (j as f64 + 0.5) * dv;
            let ramp = 0.65 + 0.5 * (u + WALL_OFFSET) / length;
            let band = if ((u + WALL_OFFSET) / 0.325) as usize % 2 == 0 { 1.0 } else { 0.8 };
            let rgb = base.map(|c| c * ramp * band);
            let rgb = b.shade(rgb, 0.03);
            b.push(centre + tangent * u + Vec3::z() * v, rot, Vec3::new(du * 0.7, dv * 0.7, 0.01), 0.98, rgb);
        }
    }

    // Pillars: rings stacked up a cylinder plus a solid core.
    let pillar_colors = [[0.45, 0.30, 0.15], [0.95, 0.95, 0.92]];
    for (p, &[px, py]) in spec.pillars.iter().enumerate() {
        b.begin(ClusterKind::Pillar);
        let base = pillar_colors[p % pillar_colors.len()];
        let core = (pillar_n / 6).max(1);
        let shell = pillar_n - core;
        let per_ring = 12usize.min(shell.max(1));
        let rings = shell.div_ceil(per_ring).max(1);
        for k in 0..shell {
            let (a, r) = (k % per_ring, k / per_ring);
            let theta = a as f64 / per_ring as f64 * std::f64::consts::TAU + r as f64 * 0.3;
            let z = (r as f64 + 0.5) * PILLAR_HEIGHT / rings as f64;
            let radial = Vec3::new(theta.cos(), theta.sin(), 0.0);
            let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), theta);
            let rgb = b.shade(base, 0.05);
            b.push(
                Vec3::new(px, py, z) + radial * PILLAR_RADIUS,
                rot,
                Vec3::new(0.012, PILLAR_RADIUS * 0.45, PILLAR_HEIGHT / rings as f64 * 0.7),
                0.98,
                rgb,
            );
        }
        for k in 0..core {
            let z = (k as f64 + 0.5) * PILLAR_HEIGHT / core as f64;
            let rgb = b.shade(base, 0.05);
            b.push(
                Vec3::new(px, py, z),
                UnitQuaternion::identity(),
                Vec3::new(PILLAR_RADIUS * 0.6, PILLAR_RADIUS * 0.6, PILLAR_HEIGHT / core as f64 * 0.6),
                0.98,
                rgb,
            );
        }
    }

    if let Some(l) = spec.landmark {
        landmark(b, Vec3::from(l), landmark_n);
    }
    Ok(())
}

/// Red ellipsoid made of small splats on its surface.
fn landmark(b: &mut Builder, centre: Vec3, count: usize) {
    b.begin(ClusterKind::Landmark);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    for k in 0..count {
        // Fibonacci sphere for even coverage.
        let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
        let r = (1.0 - z * z).sqrt();
        let theta = golden * k as f64;
        let d = Vec3::new(r * theta.cos(), r * theta.sin(), z);
        let p = centre + Vec3::new(d.x * LANDMARK_RADII[0], d.y * LANDMARK_RADII[1], d.z * LANDMARK_RADII[2]);
        let rgb = b.shade([0.90, 0.08, 0.06], 0.04);
        let s = (LANDMARK_RADII[0] * 2.5 / (count as f64).sqrt()).max(0.012);
        b.push(p, UnitQuaternion::identity(), Vec3::repeat(s), 1.0, rgb);
    }
}

fn blobs(b: &mut Builder, spec: &SceneSpec) {
    let n = spec.splat_count;
    let landmark_n = spec.landmark.map_or(0, |_| (n / 25).max(1).min(n));
    let rest = n - landmark_n;
    let blob_count = (rest / 200).max(1);
    for k in 0..blob_count {
        let count = rest / blob_count + usize::from(k < rest % blob_count);
        if count == 0 {
            continue;
        }
        b.begin(ClusterKind::Blob);
        let centre = Vec3::new(b.rng.gen_range(-1.0..1.0), b.rng.gen_range(-1.0..1.0), b.rng.gen_range(0.0..0.5));
        let color = [0; 3].map(|_| b.rng.gen_range(0.1..0.9));
        for _ in 0..count {
            let offset = Vector3::from_fn(|_, _| {
                let v: f64 = StandardNormal.sample(&mut b.rng);
                v * 0.1
            });
            let axis = Vector3::from_fn(|_, _| {
                let v: f64 = StandardNormal.sample(&mut b.rng);
                v
            });
            let rot = UnitQuaternion::from_scaled_axis(axis);
            let scale = Vec3::from_fn(|_, _| (b.rng.gen_range(0.01f64.ln()..0.05f64.ln())).exp());
            let opacity = b.rng.gen_range(0.3..1.0);
            let rgb = b.shade(color, 0.05);
            b.push(centre + offset, rot, scale, opacity, rgb);
        }
    }
    if let Some(l) = spec.landmark {
        landmark(b, Vec3::from(l), landmark_n);
    }
}
