//! Flag value parsers.

use anyhow::{anyhow, bail, Result};
use splatnav::{Aabb, CameraPose, Vec3};

fn numbers(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|_| anyhow!("{what}: '{}' is not a number", t.trim())))
        .collect::<Result<_>>()?;
    if v.len() != n {
        bail!("{what}: expected {n} comma-separated numbers, got {}", v.len());
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        bail!("{what}: {x} is not finite");
    }
    Ok(v)
}

/// `xmin,xmax,ymin,ymax,zmin,zmax`
pub fn bounds(s: &str) -> Result<Aabb> {
    let v = numbers(s, 6, "bounds")?;
    Ok(Aabb::from_limits([v[0], v[1], v[2], v[3], v[4], v[5]])?)
}

/// `x,y,z,yaw,pitch,roll`, angles in degrees.
pub fn pose(s: &str) -> Result<CameraPose> {
    let v = numbers(s, 6, "pose")?;
    Ok(CameraPose::from_position_ypr(
        Vec3::new(v[0], v[1], v[2]),
        v[3].to_radians(),
        v[4].to_radians(),
        v[5].to_radians(),
    ))
}

/// `WxH`
pub fn resolution(s: &str) -> Result<(u32, u32)> {
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(|| anyhow!("resolution '{s}' is not WxH"))?;
    let w: u32 = w.trim().parse().map_err(|_| anyhow!("resolution width '{w}' invalid"))?;
    let h: u32 = h.trim().parse().map_err(|_| anyhow!("resolution height '{h}' invalid"))?;
    if w == 0 || h == 0 {
        bail!("resolution must be positive");
    }
    Ok((w, h))
}

/// Comma-separated positive counts.
pub fn counts(s: &str) -> Result<Vec<usize>> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| anyhow!("'{}' is not a count", t.trim())))
        .collect::<Result<_>>()?;
    if v.is_empty() || v.contains(&0) {
        bail!("counts must be positive");
    }
    Ok(v)
}
