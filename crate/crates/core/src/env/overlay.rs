//! Virtual sprite in-painting and the red-pixel goal trigger.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraIntrinsics, CameraPose, Vec3};
use crate::render::{project_point, RenderedImage};

/// Straight-alpha RGBA sprite pinned to a world anchor.
#[derive(Clone, Debug, PartialEq)]
pub struct SpriteOverlay {
    pub width: u32,
    pub height: u32,
    /// Row-major RGBA in `[0, 1]`.
    pub rgba: Vec<f32>,
    pub anchor: Vec3,
    pub world_height: f64,
}

impl SpriteOverlay {
    /// A procedurally drawn apple: red disc, brown stem, green leaf.
    pub fn apple(size: u32, anchor: Vec3, world_height: f64) -> Self {
        let s = size as f64;
        let mut rgba = vec![0f32; (size * size * 4) as usize];
        let (cx, cy, r) = (0.5 * s, 0.56 * s, 0.42 * s);
        for j in 0..size {
            for i in 0..size {
                let (x, y) = (i as f64 + 0.5, j as f64 + 0.5);
                let k = ((j * size + i) * 4) as usize;
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                let px = if d <= r {
                    // Soft highlight towards the upper left.
                    let h = (1.0 - ((x - 0.38 * s).powi(2) + (y - 0.42 * s).powi(2)).sqrt() / r).max(0.0);
                    [0.78 + 0.2 * h, 0.06 + 0.12 * h, 0.05 + 0.1 * h, 1.0]
                } else if (x - 0.5 * s).abs() < 0.04 * s && y > 0.04 * s && y < 0.2 * s {
                    [0.35, 0.2, 0.08, 1.0]
                } else if ((x - 0.64 * s) / 0.14).powi(2) + ((y - 0.12 * s) / 0.06).powi(2) <= s * s {
                    [0.2, 0.6, 0.15, 1.0]
                } else {
                    [0.0; 4]
                };
                for c in 0..4 {
                    rgba[k + c] = px[c] as f32;
                }
            }
        }
        Self {
            width: size,
            height: size,
            rgba,
            anchor,
            world_height,
        }
    }

    pub fn load_png(path: &Path, anchor: Vec3, world_height: f64) -> Result<Self, image::ImageError> {
        let img = image::open(path)?.to_rgba8();
        Ok(Self {
            width: img.width(),
            height: img.height(),
            rgba: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
            anchor,
            world_height,
        })
    }

    #[inline]
    fn texel(&self, x: u32, y: u32) -> [f32; 4] {
        let k = ((y * self.width + x) * 4) as usize;
        [self.rgba[k], self.rgba[k + 1], self.rgba[k + 2], self.rgba[k + 3]]
    }
}

/// Screen-space placement of the billboard: centre and pixel size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Billboard {
    pub center: [f64; 2],
    pub width: f64,
    pub height: f64,
    pub depth: f64,
}

/// `None` when the anchor is behind the camera or projects off-screen.
pub fn billboard(sprite: &SpriteOverlay, pose: &CameraPose, k: &CameraIntrinsics) -> Option<Billboard> {
    let p = pose.world_to_camera(&sprite.anchor);
    let (u, v) = project_point(&p, k).ok()?;
    if !(0.0..k.width as f64).contains(&u) || !(0.0..k.height as f64).contains(&v) {
        return None;
    }
    let height = k.fy * sprite.world_height / p.z;
    Some(Billboard {
        center: [u, v],
        width: height * sprite.width as f64 / sprite.height as f64,
        height,
        depth: p.z,
    })
}

/// Alpha-blends the sprite on top of `img` (no scene occlusion). A pixel is
/// covered when its centre falls inside the billboard rectangle; it samples
/// the nearest texel.
pub fn apply_overlay(img: &RenderedImage, sprite: &SpriteOverlay, pose: &CameraPose, k: &CameraIntrinsics) -> RenderedImage {
    let mut out = img.clone();
    let Some(b) = billboard(sprite, pose, k) else {
        return out;
    };
    let left = b.center[0] - 0.5 * b.width;
    let top = b.center[1] - 0.5 * b.height;
    let x0 = (left - 0.5).ceil().max(0.0) as u32;
    let y0 = (top - 0.5).ceil().max(0.0) as u32;
    let x1 = ((left + b.width - 0.5).ceil().max(0.0) as u32).min(img.width);
    let y1 = ((top + b.height - 0.5).ceil().max(0.0) as u32).min(img.height);
    for py in y0..y1 {
        let ty = (((py as f64 + 0.5 - top) / b.height * sprite.height as f64) as u32).min(sprite.height - 1);
        for px in x0..x1 {
            let tx = (((px as f64 + 0.5 - left) / b.width * sprite.width as f64) as u32).min(sprite.width - 1);
            let t = sprite.texel(tx, ty);
            let a = t[3];
            if a <= 0.0 {
                continue;
            }
            let under = out.get(px, py);
            let blended = if a >= 1.0 {
                [t[0], t[1], t[2]]
            } else {
                [0, 1, 2].map(|c| a * t[c] + (1.0 - a) * under[c])
            };
            out.set(px, py, blended);
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RedThresholds {
    pub min_red: f32,
    pub margin: f32,
    /// Fraction of red pixels that triggers the reward.
    pub fraction: f64,
}

impl Default for RedThresholds {
    fn default() -> Self {
        Self {
            min_red: 0.5,
            margin: 0.15,
            fraction: 0.02,
        }
    }
}

#[inline]
pub fn is_red(px: [f32; 3], t: &RedThresholds) -> bool {
    px[0] > t.min_red && px[0] - px[1] > t.margin && px[0] - px[2] > t.margin
}

pub fn red_fraction(img: &RenderedImage, t: &RedThresholds) -> f64 {
    let n = img.pixels.chunks_exact(3).filter(|p| is_red([p[0], p[1], p[2]], t)).count();
    n as f64 / (img.width as f64 * img.height as f64)
}

/// `(goal_reward, true)` once the red fraction reaches the threshold.
pub fn red_pixel_reward(img: &RenderedImage, t: &RedThresholds, goal_reward: f64) -> (f64, bool) {
    if red_fraction(img, t) >= t.fraction {
        (goal_reward, true)
    } else {
        (0.0, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k64() -> CameraIntrinsics {
        CameraIntrinsics::from_hfov(64, 64, 90.0).unwrap()
    }

    fn gray() -> RenderedImage {
        RenderedImage::filled(64, 64, [0.5; 3])
    }

    fn solid(anchor: Vec3, h: f64) -> SpriteOverlay {
        SpriteOverlay {
            width: 4,
            height: 4,
            rgba: [0.9f32, 0.1, 0.1, 1.0].repeat(16),
            anchor,
            world_height: h,
        }
    }

    fn drawn_rows(img: &RenderedImage) -> usize {
        (0..img.height).filter(|&y| (0..img.width).any(|x| img.get(x, y)[0] > 0.8)).count()
    }

    #[test]
    fn behind_camera_is_unchanged() {
        let pose = CameraPose::ground(0.0, 0.0, 0.0, 0.0);
        let s = solid(Vec3::new(-1.0, 0.0, 0.0), 0.2);
        assert_eq!(apply_overlay(&gray(), &s, &pose, &k64()), gray());
    }

    #[test]
    fn height_halves_with_depth() {
        let pose = CameraPose::ground(0.0, 0.0, 0.0, 0.0);
        let k = k64();
        let near = billboard(&solid(Vec3::new(1.0, 0.0, 0.0), 0.5), &pose, &k).unwrap();
        let far = billboard(&solid(Vec3::new(2.0, 0.0, 0.0), 0.5), &pose, &k).unwrap();
        assert_eq!(near.height, 2.0 * far.height);
        assert_eq!(near.height, k.fy * 0.5);
        let a = drawn_rows(&apply_overlay(&gray(), &solid(Vec3::new(1.0, 0.0, 0.0), 0.5), &pose, &k));
        let b = drawn_rows(&apply_overlay(&gray(), &solid(Vec3::new(2.0, 0.0, 0.0), 0.5), &pose, &k));
        assert_eq!((a, b), (16, 8));
    }

    #[test]
    fn opaque_texel_replaces_pixel_exactly() {
        let pose = CameraPose::ground(0.0, 0.0, 0.0, 0.0);
        let img = apply_overlay(&gray(), &solid(Vec3::new(1.0, 0.0, 0.0), 0.5), &pose, &k64());
        assert_eq!(img.get(32, 32), [0.9, 0.1, 0.1]);
        assert_eq!(img.get(0, 0), [0.5; 3]);
    }

    #[test]
    fn partial_alpha_blends() {
        let pose = CameraPose::ground(0.0, 0.0, 0.0, 0.0);
        let mut s = solid(Vec3::new(1.0, 0.0, 0.0), 0.5);
        for t in s.rgba.chunks_exact_mut(4) {
            t[3] = 0.25;
        }
        let img = apply_overlay(&gray(), &s, &pose, &k64());
        let want = 0.25 * 0.9 + 0.75 * 0.5;
        assert!((img.get(32, 32)[0] - want).abs() < 1e-6);
    }

    #[test]
    fn red_predicate_and_trigger() {
        let img = gray();
        assert_eq!(red_pixel_reward(&img, &RedThresholds::default(), 50.0), (0.0, false));
        let mut img = gray();
        // 123 pixels is just over 3%.
        for i in 0..123u32 {
            img.set(i % 64, i / 64, [1.0, 0.0, 0.0]);
        }
        assert_eq!(red_pixel_reward(&img, &RedThresholds::default(), 50.0), (50.0, true));
        let t = RedThresholds::default();
        assert!(!is_red([0.5, 0.0, 0.0], &t));
        assert!(!is_red([0.9, 0.8, 0.0], &t));
        assert!(is_red([0.7, 0.5, 0.5], &t));
    }

    #[test]
    fn apple_is_mostly_red() {
        let s = SpriteOverlay::apple(32, Vec3::zeros(), 0.1);
        let t = RedThresholds::default();
        let opaque: Vec<_> = s.rgba.chunks_exact(4).filter(|p| p[3] > 0.0).collect();
        let red = opaque.iter().filter(|p| is_red([p[0], p[1], p[2]], &t)).count();
        assert!(red as f64 > 0.75 * opaque.len() as f64);
    }
}
