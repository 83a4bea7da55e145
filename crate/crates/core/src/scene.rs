//! Point clouds and Gaussian-splat scenes, with PLY import/export.
//!
//! Splat files follow the usual 3D Gaussian splatting layout: `x y z`,
//! `f_dc_0..2`, `f_rest_*` stored channel-major, `opacity` as a logit,
//! `scale_0..2` as natural-log standard deviations and `rot_0..3` as a
//! `(w, x, y, z)` quaternion that need not be normalised on disk.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{is_finite, Aabb, Vec3};
use crate::ply::{self, Format, PlyError, PropertyKind, ScalarType};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("{path}: {source}")]
    Ply {
        path: String,
        #[source]
        source: PlyError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("vertex {index}: {reason}")]
    Invalid { index: usize, reason: String },
    #[error("{0}")]
    Spec(String),
}

fn ply_err(path: &Path) -> impl Fn(PlyError) -> SceneError + '_ {
    move |source| SceneError::Ply {
        path: path.display().to_string(),
        source,
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SceneError + '_ {
    move |source| SceneError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    /// Per-point RGB in `[0, 1]`, same length as `points` when present.
    pub colors: Option<Vec<[f64; 3]>>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, colors: Option<Vec<[f64; 3]>>) -> Result<Self, SceneError> {
        let pc = Self { points, colors };
        pc.validate()?;
        Ok(pc)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if let Some(c) = &self.colors {
            if c.len() != self.points.len() {
                return Err(SceneError::Spec(format!(
                    "{} colors for {} points",
                    c.len(),
                    self.points.len()
                )));
            }
        }
        for (index, p) in self.points.iter().enumerate() {
            if !is_finite(p) {
                return Err(SceneError::Invalid {
                    index,
                    reason: format!("non-finite coordinate {:?}", [p.x, p.y, p.z]),
                });
            }
        }
        Ok(())
    }
}

/// Returns the points inside `bounds` (inclusive on every face), keeping
/// their colors and relative order.
pub fn crop_point_cloud(pc: &PointCloud, bounds: &Aabb) -> PointCloud {
    let keep: Vec<usize> = (0..pc.points.len())
        .filter(|&i| bounds.contains(&pc.points[i]))
        .collect();
    PointCloud {
        points: keep.iter().map(|&i| pc.points[i]).collect(),
        colors: pc.colors.as_ref().map(|c| keep.iter().map(|&i| c[i]).collect()),
    }
}

pub fn load_point_cloud(path: &Path) -> Result<PointCloud, SceneError> {
    let file = File::open(path).map_err(io_err(path))?;
    let (header, table) = ply::read_vertices(&mut BufReader::new(file)).map_err(ply_err(path))?;
    let xyz = table.require(&["x", "y", "z"]).map_err(ply_err(path))?;
    let rgb = table.require(&["red", "green", "blue"]).ok();
    // Integer color channels are 8-bit; float channels are already in [0, 1].
    let red_type = header
        .elements
        .iter()
        .find(|e| e.name == "vertex")
        .and_then(|e| e.properties.iter().find(|p| p.name == "red"))
        .map(|p| p.kind.clone());
    let color_scale = match red_type {
        Some(PropertyKind::Scalar(ScalarType::F32 | ScalarType::F64)) => 1.0,
        _ => 255.0,
    };
    let mut points = Vec::with_capacity(table.rows);
    for r in 0..table.rows {
        let p = Vec3::new(table.get(r, xyz[0]), table.get(r, xyz[1]), table.get(r, xyz[2]));
        if !is_finite(&p) {
            return Err(SceneError::Invalid {
                index: r,
                reason: format!("non-finite coordinate {:?}", [p.x, p.y, p.z]),
            });
        }
        points.push(p);
    }
    let colors = rgb.map(|c| {
        (0..table.rows)
            .map(|r| {
                [0, 1, 2].map(|k| (table.get(r, c[k]) / color_scale).clamp(0.0, 1.0))
            })
            .collect()
    });
    Ok(PointCloud { points, colors })
}

/// Binary little-endian PLY with `double` coordinates and `uchar` colors.
pub fn save_point_cloud(pc: &PointCloud, path: &Path) -> Result<(), SceneError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut cols = vec![("x", ScalarType::F64), ("y", ScalarType::F64), ("z", ScalarType::F64)];
    if pc.colors.is_some() {
        cols.extend([("red", ScalarType::U8), ("green", ScalarType::U8), ("blue", ScalarType::U8)]);
    }
    ply::write_vertices(&mut w, Format::BinaryLittleEndian, &cols, &[], pc.len(), |i, v| {
        let p = pc.points[i];
        v.extend([p.x, p.y, p.z]);
        if let Some(c) = &pc.colors {
            v.extend(c[i].iter().map(|x| x * 255.0));
        }
    })
    .map_err(io_err(path))
}

/// One anisotropic 3D Gaussian with spherical-harmonic color.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec3,
    pub rotation: UnitQuaternion<f64>,
    /// Per-axis standard deviations in scene units.
    pub scale: Vec3,
    pub opacity: f64,
    /// `(degree + 1)^2` RGB coefficients; index 0 is the DC term.
    pub sh: Vec<[f64; 3]>,
}

impl Gaussian {
    /// Degree-0 Gaussian whose rendered color is `rgb` from every direction.
    pub fn with_color(mean: Vec3, rotation: UnitQuaternion<f64>, scale: Vec3, opacity: f64, rgb: [f64; 3]) -> Self {
        Self {
            mean,
            rotation,
            scale,
            opacity,
            sh: vec![rgb.map(rgb_to_dc)],
        }
    }

    pub fn validate(&self, index: usize) -> Result<(), SceneError> {
        let bad = |reason: String| SceneError::Invalid { index, reason };
        if !is_finite(&self.mean) {
            return Err(bad("non-finite mean".into()));
        }
        if (self.rotation.quaternion().norm() - 1.0).abs() > 1e-6 {
            return Err(bad("rotation quaternion is not unit length".into()));
        }
        if !self.scale.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(bad(format!("scale {:?} not strictly positive", [self.scale.x, self.scale.y, self.scale.z])));
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(bad(format!("opacity {} outside [0, 1]", self.opacity)));
        }
        if self.sh.is_empty() || self.sh.iter().flatten().any(|c| !c.is_finite()) {
            return Err(bad("missing or non-finite SH coefficients".into()));
        }
        Ok(())
    }
}

pub const SH_C0: f64 = 0.282_094_791_773_878_14;

/// DC coefficient that renders as `c` under the degree-0 color model.
pub fn rgb_to_dc(c: f64) -> f64 {
    (c - 0.5) / SH_C0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplatScene {
    pub gaussians: Vec<Gaussian>,
    pub sh_degree: u8,
    pub background: [f64; 3],
}

impl SplatScene {
    pub fn new(gaussians: Vec<Gaussian>, sh_degree: u8, background: [f64; 3]) -> Result<Self, SceneError> {
        let s = Self {
            gaussians,
            sh_degree,
            background,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn empty(background: [f64; 3]) -> Self {
        Self {
            gaussians: Vec::new(),
            sh_degree: 0,
            background,
        }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn coeffs_per_channel(&self) -> usize {
        (self.sh_degree as usize + 1).pow(2)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.sh_degree > 3 {
            return Err(SceneError::Spec(format!("sh_degree {} > 3", self.sh_degree)));
        }
        if !self.background.iter().all(|c| (0.0..=1.0).contains(c)) {
            return Err(SceneError::Spec("background outside [0, 1]".into()));
        }
        let k = self.coeffs_per_channel();
        for (i, g) in self.gaussians.iter().enumerate() {
            g.validate(i)?;
            if g.sh.len() != k {
                return Err(SceneError::Invalid {
                    index: i,
                    reason: format!("{} SH coefficients, degree {} needs {k}", g.sh.len(), self.sh_degree),
                });
            }
        }
        Ok(())
    }

    /// Splat means as a point cloud. A convenience for driving the
    /// occupancy pipeline without an exported cloud; it is not claimed to
    /// match a cloud extracted from a radiance field.
    pub fn means_as_cloud(&self) -> PointCloud {
        PointCloud {
            points: self.gaussians.iter().map(|g| g.mean).collect(),
            colors: None,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Loads a splat PLY, activating opacity (sigmoid) and scale (exp) and
/// normalising rotations. Coefficients above the file's SH degree are
/// never present; degree is inferred from the `f_rest_*` count.
pub fn load_splat_scene(path: &Path) -> Result<SplatScene, SceneError> {
    let file = File::open(path).map_err(io_err(path))?;
    let (header, table) = ply::read_vertices(&mut BufReader::new(file)).map_err(ply_err(path))?;
    let background = header.comments.iter().find_map(|c| parse_background(c)).unwrap_or([0.0; 3]);
    let required = [
        "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1",
        "rot_2", "rot_3",
    ];
    let idx = table.require(&required).map_err(ply_err(path))?;
    let rest_count = (0..).take_while(|i| table.column_index(&format!("f_rest_{i}")).is_some()).count();
    let per_channel_rest = rest_count / 3;
    let sh_degree = match per_channel_rest {
        0 => 0u8,
        3 => 1,
        8 => 2,
        15 => 3,
        n => {
            return Err(SceneError::Spec(format!(
                "{path}: {} f_rest fields ({n} per channel) do not match any SH degree <= 3",
                rest_count,
                path = path.display()
            )))
        }
    };
    let rest: Vec<usize> = (0..per_channel_rest * 3)
        .map(|i| table.column_index(&format!("f_rest_{i}")).unwrap())
        .collect();
    let mut gaussians = Vec::with_capacity(table.rows);
    for r in 0..table.rows {
        let v = |k: usize| table.get(r, idx[k]);
        let q = Quaternion::new(v(10), v(11), v(12), v(13));
        let norm = q.norm();
        if !(norm > 1e-12) || !norm.is_finite() {
            return Err(SceneError::Invalid {
                index: r,
                reason: "zero-norm rotation quaternion".into(),
            });
        }
        let mut sh = Vec::with_capacity(per_channel_rest + 1);
        sh.push([v(3), v(4), v(5)]);
        for k in 0..per_channel_rest {
            sh.push([0, 1, 2].map(|c| table.get(r, rest[c * per_channel_rest + k])));
        }
        let g = Gaussian {
            mean: Vec3::new(v(0), v(1), v(2)),
            rotation: UnitQuaternion::from_quaternion(q),
            scale: Vec3::new(v(7).exp(), v(8).exp(), v(9).exp()),
            opacity: sigmoid(v(6)),
            sh,
        };
        g.validate(r)?;
        gaussians.push(g);
    }
    SplatScene::new(gaussians, sh_degree, background)
}

/// `background r g b`, the one non-standard header line the writer adds.
fn parse_background(comment: &str) -> Option<[f64; 3]> {
    let mut t = comment.split_whitespace();
    if t.next()? != "background" {
        return None;
    }
    let v: Vec<f64> = t.map(|x| x.parse().ok()).collect::<Option<_>>()?;
    match v[..] {
        [r, g, b] if v.iter().all(|c| (0.0..=1.0).contains(c)) => Some([r, g, b]),
        _ => None,
    }
}

/// Writes the scene in the standard splat PLY layout (all `float`).
/// Opacity is clamped to `[1e-7, 1 - 1e-7]` before taking the logit.
pub fn save_splat_scene(scene: &SplatScene, path: &Path) -> Result<(), SceneError> {
    scene.validate()?;
    let rest_per_channel = scene.coeffs_per_channel() - 1;
    let mut names: Vec<String> = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    names.extend((0..rest_per_channel * 3).map(|i| format!("f_rest_{i}")));
    names.extend(
        ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
            .iter()
            .map(|s| s.to_string()),
    );
    let cols: Vec<(&str, ScalarType)> = names.iter().map(|n| (n.as_str(), ScalarType::F32)).collect();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let [r, g, b] = scene.background;
    let bg = format!("background {r} {g} {b}");
    ply::write_vertices(&mut w, Format::BinaryLittleEndian, &cols, &[&bg], scene.len(), |i, v| {
        let g = &scene.gaussians[i];
        v.extend([g.mean.x, g.mean.y, g.mean.z, 0.0, 0.0, 0.0]);
        v.extend(g.sh[0]);
        for c in 0..3 {
            v.extend((1..=rest_per_channel).map(|k| g.sh[k][c]));
        }
        let o = g.opacity.clamp(1e-7, 1.0 - 1e-7);
        v.push((o / (1.0 - o)).ln());
        v.extend(g.scale.iter().map(|s| s.ln()));
        let q = g.rotation.quaternion();
        v.extend([q.w, q.i, q.j, q.k]);
    })
    .map_err(io_err(path))
}
