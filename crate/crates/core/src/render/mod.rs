//! Tile-based CPU rasteriser for Gaussian-splat scenes.
//!
//! Each Gaussian is projected to an image-space ellipse using the
//! first-order (affine) approximation of the perspective projection,
//! splats are sorted front to back, and pixels are alpha-composited
//! independently per 16x16 tile.

mod image;
mod sh;

use nalgebra::{Matrix2, Matrix2x3, Matrix3};
use rayon::prelude::*;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, CameraPose, Vec3};
use crate::scene::{Gaussian, SplatScene};

pub use self::image::{quantize, RenderedImage};
pub use self::sh::evaluate_sh_color;

pub const NEAR_PLANE: f64 = 0.01;
/// Added to the diagonal of every projected covariance, in pixels².
pub const COV2D_BLUR: f64 = 0.3;
pub const ALPHA_MAX: f64 = 0.999;
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Compositing stops once transmittance drops below this.
pub const TRANSMITTANCE_EPS: f64 = 1e-4;
pub const JACOBIAN_CLAMP: f64 = 1.3;
pub const TILE_SIZE: u32 = 16;
/// Squared Mahalanobis radius holding 99% of a 2D Gaussian's mass.
pub const MASS99_R2: f64 = 9.210_340_371_976_184;

#[derive(Debug, Error, PartialEq)]
pub enum RenderError {
    #[error("point at camera depth {0} is not in front of the camera")]
    BehindCamera(f64),
}

/// Pinhole projection of a camera-frame point to pixel coordinates.
pub fn project_point(p_cam: &Vec3, k: &CameraIntrinsics) -> Result<(f64, f64), RenderError> {
    if !(p_cam.z > 0.0) {
        return Err(RenderError::BehindCamera(p_cam.z));
    }
    Ok((k.cx + k.fx * p_cam.x / p_cam.z, k.cy + k.fy * p_cam.y / p_cam.z))
}

pub fn world_to_camera(p: &Vec3, pose: &CameraPose) -> Vec3 {
    pose.world_to_camera(p)
}

/// A Gaussian after projection into the image plane.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedSplat {
    /// Index of the source Gaussian in the scene.
    pub index: usize,
    pub mean2d: [f64; 2],
    /// Symmetric 2x2 covariance in pixels², blur included.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d` stored as `(a, b, c)` for `a x² + 2 b x y + c y²`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    /// Half-extents of the pixel bounding box used for tile binning.
    pub extent: [f64; 2],
}

impl ProjectedSplat {
    /// Opacity contribution at pixel-space offset `(dx, dy)` from the
    /// mean, before the compositing clamps.
    #[inline]
    pub fn falloff(&self, dx: f64, dy: f64) -> f64 {
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        self.alpha * power.min(0.0).exp()
    }
}

/// 3D covariance `R S Sᵀ Rᵀ` of a Gaussian.
pub fn covariance3d(g: &Gaussian) -> Matrix3<f64> {
    let r = g.rotation.to_rotation_matrix().into_inner();
    let s = Matrix3::from_diagonal(&g.scale);
    let m = r * s;
    m * m.transpose()
}

/// Projects `g`; `None` when it is culled by the near plane or lies
/// entirely off-screen. The binning bound is the 99%-mass ellipse, widened
/// for opaque splats so every pixel whose opacity reaches the 1/255 cutoff
/// is covered.
pub fn project_splat(
    index: usize,
    g: &Gaussian,
    sh_degree: u8,
    pose: &CameraPose,
    k: &CameraIntrinsics,
) -> Option<ProjectedSplat> {
    let t = pose.world_to_camera(&g.mean);
    if t.z <= NEAR_PLANE {
        return None;
    }
    if g.opacity < ALPHA_MIN {
        return None;
    }
    let (u, v) = (k.cx + k.fx * t.x / t.z, k.cy + k.fy * t.y / t.z);
    // The affine approximation blows up for splats far outside the
    // frustum; clamp the lateral slope at 1.3x the half field of view.
    let lim_x = JACOBIAN_CLAMP * k.cx.max(k.width as f64 - k.cx) / k.fx;
    let lim_y = JACOBIAN_CLAMP * k.cy.max(k.height as f64 - k.cy) / k.fy;
    let tx = (t.x / t.z).clamp(-lim_x, lim_x);
    let ty = (t.y / t.z).clamp(-lim_y, lim_y);
    let j = Matrix2x3::new(k.fx / t.z, 0.0, -k.fx * tx / t.z, 0.0, k.fy / t.z, -k.fy * ty / t.z);
    let w = pose.rotation.matrix();
    let jw = j * w;
    let mut cov = jw * covariance3d(g) * jw.transpose();
    cov[(0, 0)] += COV2D_BLUR;
    cov[(1, 1)] += COV2D_BLUR;
    // Enforce exact symmetry.
    let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    cov[(0, 1)] = off;
    cov[(1, 0)] = off;
    let det = cov[(0, 0)] * cov[(1, 1)] - off * off;
    if !(det > 0.0) || !det.is_finite() {
        return None;
    }
    let conic = [cov[(1, 1)] / det, -off / det, cov[(0, 0)] / det];
    let r2 = MASS99_R2.max(2.0 * (g.opacity.min(ALPHA_MAX) / ALPHA_MIN).ln());
    let extent = [(r2 * cov[(0, 0)]).sqrt(), (r2 * cov[(1, 1)]).sqrt()];
    if u + extent[0] < 0.0 || u - extent[0] > k.width as f64 || v + extent[1] < 0.0 || v - extent[1] > k.height as f64
    {
        return None;
    }
    let dir = (g.mean - pose.center).normalize();
    Some(ProjectedSplat {
        index,
        mean2d: [u, v],
        cov2d: cov,
        conic,
        depth: t.z,
        color: evaluate_sh_color(g, &dir, sh_degree),
        alpha: g.opacity,
        extent,
    })
}

/// Projected splats sorted front to back, ties broken by scene index.
pub fn project_scene(scene: &SplatScene, pose: &CameraPose, k: &CameraIntrinsics) -> Vec<ProjectedSplat> {
    let mut out: Vec<ProjectedSplat> = if scene.len() >= 4096 {
        scene
            .gaussians
            .par_iter()
            .enumerate()
            .filter_map(|(i, g)| project_splat(i, g, scene.sh_degree, pose, k))
            .collect()
    } else {
        scene
            .gaussians
            .iter()
            .enumerate()
            .filter_map(|(i, g)| project_splat(i, g, scene.sh_degree, pose, k))
            .collect()
    };
    out.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    out
}

/// Per-tile lists of indices into the sorted splat array.
struct TileBins {
    tiles_x: u32,
    tiles_y: u32,
    bins: Vec<Vec<u32>>,
}

fn bin_tiles(splats: &[ProjectedSplat], k: &CameraIntrinsics) -> TileBins {
    let tiles_x = k.width.div_ceil(TILE_SIZE);
    let tiles_y = k.height.div_ceil(TILE_SIZE);
    let mut bins = vec![Vec::new(); (tiles_x * tiles_y) as usize];
    let ts = TILE_SIZE as f64;
    for (i, s) in splats.iter().enumerate() {
        let x0 = ((s.mean2d[0] - s.extent[0]) / ts).floor().max(0.0) as u32;
        let y0 = ((s.mean2d[1] - s.extent[1]) / ts).floor().max(0.0) as u32;
        let x1 = (((s.mean2d[0] + s.extent[0]) / ts).floor().max(0.0) as u32).min(tiles_x - 1);
        let y1 = (((s.mean2d[1] + s.extent[1]) / ts).floor().max(0.0) as u32).min(tiles_y - 1);
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                bins[(ty * tiles_x + tx) as usize].push(i as u32);
            }
        }
    }
    TileBins { tiles_x, tiles_y, bins }
}

fn for_each_tile<T: Send, F>(bins: &TileBins, f: F) -> Vec<(u32, u32, Vec<T>)>
where
    F: Fn(u32, u32, &[u32]) -> Vec<T> + Sync,
{
    (0..bins.tiles_x * bins.tiles_y)
        .into_par_iter()
        .map(|t| {
            let (tx, ty) = (t % bins.tiles_x, t / bins.tiles_x);
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            (x0, y0, f(x0, y0, &bins.bins[t as usize]))
        })
        .collect()
}

/// Renders the scene from `pose`. Output is bitwise identical for a fixed
/// input regardless of the rayon pool size.
pub fn render(scene: &SplatScene, pose: &CameraPose, k: &CameraIntrinsics) -> RenderedImage {
    let splats = project_scene(scene, pose, k);
    rasterize(&splats, scene.background, k)
}

/// Composites already projected, depth-sorted splats.
pub fn rasterize(splats: &[ProjectedSplat], background: [f64; 3], k: &CameraIntrinsics) -> RenderedImage {
    let bins = bin_tiles(splats, k);
    let tiles = for_each_tile(&bins, |x0, y0, list| {
        let w = TILE_SIZE.min(k.width - x0);
        let h = TILE_SIZE.min(k.height - y0);
        let mut buf = Vec::with_capacity((w * h * 3) as usize);
        for py in y0..y0 + h {
            for px in x0..x0 + w {
                let c = composite_pixel(splats, list, px, py, background);
                buf.extend(c.map(|v| v.clamp(0.0, 1.0) as f32));
            }
        }
        buf
    });
    let mut img = RenderedImage::filled(k.width, k.height, [0.0; 3]);
    for (x0, y0, buf) in tiles {
        let w = TILE_SIZE.min(k.width - x0);
        for (i, rgb) in buf.chunks_exact(3).enumerate() {
            let (dx, dy) = (i as u32 % w, i as u32 / w);
            img.set(x0 + dx, y0 + dy, [rgb[0], rgb[1], rgb[2]]);
        }
    }
    img
}

#[inline]
fn composite_pixel(splats: &[ProjectedSplat], list: &[u32], px: u32, py: u32, bg: [f64; 3]) -> [f64; 3] {
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    let mut t = 1.0;
    let mut c = [0.0; 3];
    for &i in list {
        let s = &splats[i as usize];
        let a = s.falloff(x - s.mean2d[0], y - s.mean2d[1]).min(ALPHA_MAX);
        if a < ALPHA_MIN {
            continue;
        }
        for ch in 0..3 {
            c[ch] += s.color[ch] * a * t;
        }
        t *= 1.0 - a;
        if t < TRANSMITTANCE_EPS {
            break;
        }
    }
    [c[0] + t * bg[0], c[1] + t * bg[1], c[2] + t * bg[2]]
}

/// Per-pixel transmittance after each contributing splat, in compositing
/// order. Diagnostic helper for the monotonicity property.
pub fn transmittance_trace(splats: &[ProjectedSplat], px: u32, py: u32) -> Vec<f64> {
    let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
    let mut t = 1.0;
    let mut out = vec![t];
    for s in splats {
        let a = s.falloff(x - s.mean2d[0], y - s.mean2d[1]).min(ALPHA_MAX);
        if a < ALPHA_MIN {
            continue;
        }
        t *= 1.0 - a;
        out.push(t);
    }
    out
}

/// Row-major depth of the first splat whose per-pixel opacity exceeds 0.5;
/// `f64::INFINITY` where none does.
pub fn render_depth_nearest(scene: &SplatScene, pose: &CameraPose, k: &CameraIntrinsics) -> Vec<f64> {
    let splats = project_scene(scene, pose, k);
    let bins = bin_tiles(&splats, k);
    let tiles = for_each_tile(&bins, |x0, y0, list| {
        let w = TILE_SIZE.min(k.width - x0);
        let h = TILE_SIZE.min(k.height - y0);
        let mut buf = Vec::with_capacity((w * h) as usize);
        for py in y0..y0 + h {
            for px in x0..x0 + w {
                let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
                let d = list
                    .iter()
                    .map(|&i| &splats[i as usize])
                    .find(|s| s.falloff(x - s.mean2d[0], y - s.mean2d[1]).min(ALPHA_MAX) > 0.5)
                    .map_or(f64::INFINITY, |s| s.depth);
                buf.push(d);
            }
        }
        buf
    });
    let mut depth = vec![f64::INFINITY; (k.width * k.height) as usize];
    for (x0, y0, buf) in tiles {
        let w = TILE_SIZE.min(k.width - x0);
        for (i, d) in buf.into_iter().enumerate() {
            let (dx, dy) = (i as u32 % w, i as u32 / w);
            depth[((y0 + dy) * k.width + x0 + dx) as usize] = d;
        }
    }
    depth
}
