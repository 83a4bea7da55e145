//! Octree occupancy for collision queries.
//!
//! Each tree stores only its occupied nodes, breadth-first: internal nodes
//! carry an 8-bit child mask, and the children of a node are contiguous.
//! Octant bit order is `x | y << 1 | z << 2`.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Aabb, Vec3};
use crate::scene::PointCloud;

pub const DEFAULT_DEPTH: u8 = 6;
pub const DEFAULT_MIN_POINTS: u32 = 1;
pub const DEFAULT_CELL_EDGE: f64 = 0.5;
pub const CAMERA_HALF_EXTENT: f64 = 0.05;
pub const MAX_DEPTH: u8 = 10;

const MAGIC: &[u8; 4] = b"OFOR";
const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum OccupancyError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("point {index} at {point:?} lies outside the octree cube")]
    PointOutOfBounds { index: usize, point: [f64; 3] },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a forest file (bad magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported forest version {found} (expected {VERSION})")]
    Version { found: u16 },
    #[error("forest file is truncated")]
    Truncated,
    #[error("corrupt forest file: {0}")]
    Corrupt(String),
}

pub type CellIndex = [i32; 3];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QueryStats {
    pub nodes_visited: usize,
    pub result: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Octree {
    pub origin: Vec3,
    pub edge: f64,
    pub depth: u8,
    /// Child masks of internal nodes, level order.
    masks: Vec<u8>,
    /// Index of the first child of each internal node. Indices at or past
    /// `masks.len()` are leaves.
    first_child: Vec<u32>,
    leaves: usize,
}

fn spread3(v: u32) -> u64 {
    let mut x = v as u64 & 0x3ff;
    x = (x | (x << 16)) & 0x0300_00ff;
    x = (x | (x << 8)) & 0x0300_f00f;
    x = (x | (x << 4)) & 0x030c_30c3;
    x = (x | (x << 2)) & 0x0924_9249;
    x
}

fn compact3(mut x: u64) -> u32 {
    x &= 0x0924_9249;
    x = (x | (x >> 2)) & 0x030c_30c3;
    x = (x | (x >> 4)) & 0x0300_f00f;
    x = (x | (x >> 8)) & 0x0300_00ff;
    x = (x | (x >> 16)) & 0x3ff;
    x as u32
}

fn morton(i: [u32; 3]) -> u64 {
    spread3(i[0]) | spread3(i[1]) << 1 | spread3(i[2]) << 2
}

fn unmorton(m: u64) -> [u32; 3] {
    [compact3(m), compact3(m >> 1), compact3(m >> 2)]
}

fn validate_params(edge: f64, depth: u8) -> Result<(), OccupancyError> {
    if !(edge.is_finite() && edge > 0.0) {
        return Err(OccupancyError::InvalidParam(format!("edge must be positive, got {edge}")));
    }
    if !(1..=MAX_DEPTH).contains(&depth) {
        return Err(OccupancyError::InvalidParam(format!("depth must be in 1..={MAX_DEPTH}, got {depth}")));
    }
    Ok(())
}

/// Leaf voxel containing `p`, half-open except on the far faces.
pub fn leaf_index(p: &Vec3, origin: &Vec3, edge: f64, depth: u8) -> [u32; 3] {
    let n = 1u32 << depth;
    let leaf = edge / n as f64;
    [0, 1, 2].map(|a| (((p[a] - origin[a]) / leaf).floor().max(0.0) as u32).min(n - 1))
}

/// Bounds of the voxel spanning `size` leaves from leaf index `i`.
pub fn voxel_bounds(origin: &Vec3, leaf: f64, i: [u32; 3], size: u32) -> Aabb {
    let lo = Vec3::new(
        origin.x + i[0] as f64 * leaf,
        origin.y + i[1] as f64 * leaf,
        origin.z + i[2] as f64 * leaf,
    );
    let hi = Vec3::new(
        origin.x + (i[0] + size) as f64 * leaf,
        origin.y + (i[1] + size) as f64 * leaf,
        origin.z + (i[2] + size) as f64 * leaf,
    );
    Aabb { min: lo, max: hi }
}

pub fn build_octree(points: &[Vec3], origin: Vec3, edge: f64, depth: u8, min_points: u32) -> Result<Octree, OccupancyError> {
    validate_params(edge, depth)?;
    let tol = 1e-9 * edge.max(1.0);
    let mut codes = Vec::with_capacity(points.len());
    for (index, p) in points.iter().enumerate() {
        let inside = (0..3).all(|a| p[a] >= origin[a] - tol && p[a] <= origin[a] + edge + tol);
        if !inside {
            return Err(OccupancyError::PointOutOfBounds {
                index,
                point: [p.x, p.y, p.z],
            });
        }
        codes.push(morton(leaf_index(p, &origin, edge, depth)));
    }
    codes.sort_unstable();
    let min_points = min_points.max(1) as usize;
    let mut leaves = Vec::new();
    let mut k = 0;
    while k < codes.len() {
        let run = codes[k..].iter().take_while(|&&c| c == codes[k]).count();
        if run >= min_points {
            leaves.push(codes[k]);
        }
        k += run;
    }
    Ok(Octree::from_leaf_codes(origin, edge, depth, &leaves))
}

impl Octree {
    /// `leaves` must be sorted and unique Morton codes.
    fn from_leaf_codes(origin: Vec3, edge: f64, depth: u8, leaves: &[u64]) -> Self {
        let mut levels: Vec<Vec<u64>> = vec![leaves.to_vec()];
        for _ in 0..depth {
            let mut up: Vec<u64> = levels.last().unwrap().iter().map(|c| c >> 3).collect();
            up.dedup();
            levels.push(up);
        }
        levels.reverse(); // levels[0] is the root level
        let mut masks = Vec::new();
        let mut first_child = Vec::new();
        let mut next = if leaves.is_empty() { 0 } else { 1u32 };
        for l in 0..depth as usize {
            let (parents, children) = (&levels[l], &levels[l + 1]);
            let mut c = 0;
            for &p in parents {
                let mut mask = 0u8;
                first_child.push(next);
                while c < children.len() && children[c] >> 3 == p {
                    mask |= 1 << (children[c] & 7);
                    c += 1;
                    next += 1;
                }
                masks.push(mask);
            }
        }
        Self {
            origin,
            edge,
            depth,
            masks,
            first_child,
            leaves: leaves.len(),
        }
    }

    /// Rebuilds a tree from its level-order mask stream.
    fn from_masks(origin: Vec3, edge: f64, depth: u8, masks: Vec<u8>) -> Result<Self, OccupancyError> {
        let mut first_child = Vec::with_capacity(masks.len());
        let mut level_len = if masks.is_empty() { 0 } else { 1usize };
        let mut pos = 0;
        let mut next = level_len as u32;
        for _ in 0..depth {
            if pos + level_len > masks.len() {
                return Err(OccupancyError::Corrupt("mask stream shorter than its tree".into()));
            }
            let mut children = 0;
            for &m in &masks[pos..pos + level_len] {
                if m == 0 {
                    return Err(OccupancyError::Corrupt("internal node without children".into()));
                }
                first_child.push(next);
                next += m.count_ones();
                children += m.count_ones() as usize;
            }
            pos += level_len;
            level_len = children;
        }
        if pos != masks.len() {
            return Err(OccupancyError::Corrupt("trailing masks in tree".into()));
        }
        Ok(Self {
            origin,
            edge,
            depth,
            masks,
            first_child,
            leaves: level_len,
        })
    }

    pub fn empty(origin: Vec3, edge: f64, depth: u8) -> Self {
        Self::from_leaf_codes(origin, edge, depth, &[])
    }

    pub fn is_empty(&self) -> bool {
        self.leaves == 0
    }

    pub fn occupied_leaf_count(&self) -> usize {
        self.leaves
    }

    pub fn leaf_edge(&self) -> f64 {
        self.edge / (1u64 << self.depth) as f64
    }

    pub fn bounds(&self) -> Aabb {
        voxel_bounds(&self.origin, self.leaf_edge(), [0; 3], 1 << self.depth)
    }

    /// The level-order child-mask stream (the tree's serialized form).
    pub fn masks(&self) -> &[u8] {
        &self.masks
    }

    pub fn node_count(&self) -> usize {
        self.masks.len() + self.leaves
    }

    /// Occupied leaf indices in Morton order.
    pub fn occupied_leaves(&self) -> Vec<[u32; 3]> {
        let mut out = Vec::with_capacity(self.leaves);
        if !self.is_empty() {
            self.collect(0, 0, 0, &mut out);
        }
        out
    }

    fn collect(&self, node: usize, level: u8, code: u64, out: &mut Vec<[u32; 3]>) {
        if level == self.depth {
            out.push(unmorton(code));
            return;
        }
        let mask = self.masks[node];
        let mut child = self.first_child[node] as usize;
        for oct in 0..8u64 {
            if mask & (1 << oct) != 0 {
                self.collect(child, level + 1, code << 3 | oct, out);
                child += 1;
            }
        }
    }
}

/// Box-vs-tree test. Visits count occupied nodes whose cube overlaps the
/// box, plus the root, so a point query visits at most `8 * depth + 1`.
pub fn query_box(tree: &Octree, b: &Aabb) -> (bool, QueryStats) {
    let mut stats = QueryStats::default();
    if tree.is_empty() {
        return (false, stats);
    }
    let leaf = tree.leaf_edge();
    let hit = descend(tree, b, leaf, 0, 0, [0; 3], &mut stats);
    stats.result = hit;
    (hit, stats)
}

fn descend(tree: &Octree, b: &Aabb, leaf: f64, node: usize, level: u8, at: [u32; 3], stats: &mut QueryStats) -> bool {
    stats.nodes_visited += 1;
    let size = 1u32 << (tree.depth - level);
    let cube = voxel_bounds(&tree.origin, leaf, at, size);
    if !cube.overlaps(b) {
        return false;
    }
    // Any occupied node holds an occupied leaf; if the box swallows the
    // node, that leaf overlaps.
    if level == tree.depth || (b.contains(&cube.min) && b.contains(&cube.max)) {
        return true;
    }
    let mask = tree.masks[node];
    let half = size / 2;
    let mut child = tree.first_child[node] as usize;
    for oct in 0..8u32 {
        if mask & (1 << oct) == 0 {
            continue;
        }
        let c = [at[0] + (oct & 1) * half, at[1] + (oct >> 1 & 1) * half, at[2] + (oct >> 2 & 1) * half];
        let ccube = voxel_bounds(&tree.origin, leaf, c, half);
        if ccube.overlaps(b) && descend(tree, b, leaf, child, level + 1, c, stats) {
            return true;
        }
        child += 1;
    }
    false
}

/// Assigns each point to the coarse cell `floor(p / cell_edge)`. Output is
/// sorted by cell index; empty cells are absent.
pub fn partition_coarse(pc: &PointCloud, cell_edge: f64) -> Result<Vec<(CellIndex, Vec<Vec3>)>, OccupancyError> {
    if !(cell_edge.is_finite() && cell_edge > 0.0) {
        return Err(OccupancyError::InvalidParam(format!("cell_edge must be positive, got {cell_edge}")));
    }
    let mut cells: HashMap<CellIndex, Vec<Vec3>> = HashMap::new();
    for p in &pc.points {
        cells.entry(cell_of(p, cell_edge)).or_default().push(*p);
    }
    let mut out: Vec<_> = cells.into_iter().collect();
    out.sort_by_key(|(k, _)| *k);
    Ok(out)
}

pub fn cell_of(p: &Vec3, cell_edge: f64) -> CellIndex {
    [0, 1, 2].map(|a| (p[a] / cell_edge).floor() as i32)
}

pub fn cell_origin(idx: CellIndex, cell_edge: f64) -> Vec3 {
    Vec3::new(idx[0] as f64 * cell_edge, idx[1] as f64 * cell_edge, idx[2] as f64 * cell_edge)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OctreeForest {
    pub cell_edge: f64,
    pub depth: u8,
    cells: Vec<(CellIndex, Octree)>,
    lookup: HashMap<CellIndex, usize>,
}

impl OctreeForest {
    pub fn new(cell_edge: f64, depth: u8, mut cells: Vec<(CellIndex, Octree)>) -> Result<Self, OccupancyError> {
        validate_params(cell_edge, depth)?;
        cells.sort_by_key(|(k, _)| *k);
        let mut lookup = HashMap::with_capacity(cells.len());
        for (i, (k, t)) in cells.iter().enumerate() {
            if t.depth != depth || t.edge != cell_edge || t.origin != cell_origin(*k, cell_edge) {
                return Err(OccupancyError::InvalidParam(format!("cell {k:?} does not match the forest grid")));
            }
            if lookup.insert(*k, i).is_some() {
                return Err(OccupancyError::InvalidParam(format!("duplicate cell {k:?}")));
            }
        }
        Ok(Self {
            cell_edge,
            depth,
            cells,
            lookup,
        })
    }

    pub fn empty(cell_edge: f64, depth: u8) -> Self {
        Self {
            cell_edge,
            depth,
            cells: Vec::new(),
            lookup: HashMap::new(),
        }
    }

    pub fn cells(&self) -> &[(CellIndex, Octree)] {
        &self.cells
    }

    pub fn cell(&self, idx: CellIndex) -> Option<&Octree> {
        self.lookup.get(&idx).map(|&i| &self.cells[i].1)
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Cell index range whose closed cubes can touch `b`.
    fn candidate_range(&self, b: &Aabb) -> ([i32; 3], [i32; 3]) {
        let e = self.cell_edge;
        let mut lo = cell_of(&b.min, e);
        let mut hi = cell_of(&b.max, e);
        for a in 0..3 {
            if lo[a] as f64 * e >= b.min[a] {
                lo[a] -= 1;
            }
            if (hi[a] + 1) as f64 * e <= b.max[a] {
                hi[a] += 1;
            }
        }
        (lo, hi)
    }

    /// Collision test with per-cell statistics folded together.
    pub fn query(&self, b: &Aabb) -> (bool, QueryStats) {
        let mut total = QueryStats::default();
        if self.cells.is_empty() {
            return (false, total);
        }
        let (lo, hi) = self.candidate_range(b);
        let span: i64 = (0..3).map(|a| (hi[a] - lo[a] + 1) as i64).product();
        let mut visit = |t: &Octree| {
            let (hit, s) = query_box(t, b);
            total.nodes_visited += s.nodes_visited;
            hit
        };
        let hit = if span as usize > self.cells.len() {
            self.cells.iter().any(|(k, t)| (0..3).all(|a| (lo[a]..=hi[a]).contains(&k[a])) && visit(t))
        } else {
            let mut hit = false;
            'outer: for i in lo[0]..=hi[0] {
                for j in lo[1]..=hi[1] {
                    for k in lo[2]..=hi[2] {
                        if let Some(t) = self.cell([i, j, k]) {
                            if visit(t) {
                                hit = true;
                                break 'outer;
                            }
                        }
                    }
                }
            }
            hit
        };
        total.result = hit;
        (hit, total)
    }

    pub fn occupied_leaf_count(&self) -> usize {
        self.cells.iter().map(|(_, t)| t.occupied_leaf_count()).sum()
    }

    pub fn summary(&self) -> ForestSummary {
        ForestSummary {
            cell_edge: self.cell_edge,
            depth: self.depth,
            occupied_leaves: self.occupied_leaf_count(),
            cells: self
                .cells
                .iter()
                .map(|(k, t)| CellSummary {
                    index: *k,
                    occupied_leaves: t.occupied_leaf_count(),
                })
                .collect(),
        }
    }
}

pub fn forest_query(forest: &OctreeForest, b: &Aabb) -> bool {
    forest.query(b).0
}

pub fn occupied_leaf_count(forest: &OctreeForest) -> usize {
    forest.occupied_leaf_count()
}

/// Axis-aligned collision box around a camera centre.
pub fn camera_box(center: &Vec3, half_extent: f64) -> Aabb {
    let h = Vec3::repeat(half_extent.abs());
    Aabb {
        min: center - h,
        max: center + h,
    }
}

/// Partitions the cloud and builds one tree per non-empty cell, in parallel.
pub fn build_forest(pc: &PointCloud, cell_edge: f64, depth: u8, min_points: u32) -> Result<OctreeForest, OccupancyError> {
    validate_params(cell_edge, depth)?;
    let parts = partition_coarse(pc, cell_edge)?;
    let cells = parts
        .into_par_iter()
        .map(|(k, pts)| build_octree(&pts, cell_origin(k, cell_edge), cell_edge, depth, min_points).map(|t| (k, t)))
        .collect::<Result<Vec<_>, _>>()?;
    let cells = cells.into_iter().filter(|(_, t)| !t.is_empty()).collect();
    OctreeForest::new(cell_edge, depth, cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub index: CellIndex,
    pub occupied_leaves: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestSummary {
    pub cell_edge: f64,
    pub depth: u8,
    pub occupied_leaves: usize,
    pub cells: Vec<CellSummary>,
}

// Layout: magic, u16 version, f64 cell_edge, u8 depth, u32 cell count,
// cell table (3 x i32 index, u32 mask bytes), then each tree's masks.
pub fn write_forest<W: Write>(forest: &OctreeForest, w: &mut W) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&forest.cell_edge.to_le_bytes())?;
    w.write_all(&[forest.depth])?;
    w.write_all(&(forest.cells.len() as u32).to_le_bytes())?;
    for (k, t) in &forest.cells {
        for v in k {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(t.masks.len() as u32).to_le_bytes())?;
    }
    for (_, t) in &forest.cells {
        w.write_all(&t.masks)?;
    }
    Ok(())
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), OccupancyError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => OccupancyError::Truncated,
        _ => OccupancyError::Io(e),
    })
}

pub fn read_forest<R: Read>(r: &mut R) -> Result<OctreeForest, OccupancyError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic)?;
    if &magic != MAGIC {
        return Err(OccupancyError::BadMagic(magic));
    }
    let mut b2 = [0u8; 2];
    read_exact_or_truncated(r, &mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(OccupancyError::Version { found: version });
    }
    let mut b8 = [0u8; 8];
    read_exact_or_truncated(r, &mut b8)?;
    let cell_edge = f64::from_le_bytes(b8);
    let mut b1 = [0u8; 1];
    read_exact_or_truncated(r, &mut b1)?;
    let depth = b1[0];
    validate_params(cell_edge, depth).map_err(|e| OccupancyError::Corrupt(e.to_string()))?;
    let mut b4 = [0u8; 4];
    read_exact_or_truncated(r, &mut b4)?;
    let n = u32::from_le_bytes(b4) as usize;
    let mut table = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let mut k = [0i32; 3];
        for v in &mut k {
            read_exact_or_truncated(r, &mut b4)?;
            *v = i32::from_le_bytes(b4);
        }
        read_exact_or_truncated(r, &mut b4)?;
        table.push((k, u32::from_le_bytes(b4) as usize));
    }
    let mut cells = Vec::with_capacity(table.len());
    for (k, len) in table {
        let mut masks = vec![0u8; len];
        read_exact_or_truncated(r, &mut masks)?;
        let t = Octree::from_masks(cell_origin(k, cell_edge), cell_edge, depth, masks)?;
        cells.push((k, t));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(OccupancyError::Corrupt("trailing bytes after last tree".into()));
    }
    OctreeForest::new(cell_edge, depth, cells).map_err(|e| OccupancyError::Corrupt(e.to_string()))
}

pub fn save_forest(forest: &OctreeForest, path: &Path) -> Result<(), OccupancyError> {
    let mut f = io::BufWriter::new(std::fs::File::create(path)?);
    write_forest(forest, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_forest(path: &Path) -> Result<OctreeForest, OccupancyError> {
    read_forest(&mut io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    /// Voxelization by direct counting, independent of the tree.
    fn brute_leaves(points: &[Vec3], origin: Vec3, edge: f64, depth: u8, min_points: u32) -> HashSet<[u32; 3]> {
        let mut counts: HashMap<[u32; 3], u32> = HashMap::new();
        let n = (1u32 << depth) as f64;
        for p in points {
            let i = [0, 1, 2].map(|a| (((p[a] - origin[a]) * n / edge).floor().clamp(0.0, n - 1.0)) as u32);
            *counts.entry(i).or_default() += 1;
        }
        counts.into_iter().filter(|&(_, c)| c >= min_points).map(|(k, _)| k).collect()
    }

    fn brute_query(leaves: &HashSet<[u32; 3]>, origin: Vec3, leaf: f64, b: &Aabb) -> bool {
        leaves.iter().any(|&i| voxel_bounds(&origin, leaf, i, 1).overlaps(b))
    }

    fn random_box(rng: &mut ChaCha8Rng, lo: f64, hi: f64, max_half: f64) -> Aabb {
        let c = Vec3::from_fn(|_, _| rng.gen_range(lo..hi));
        let h = Vec3::from_fn(|_, _| rng.gen_range(0.0..max_half));
        Aabb::from_center_half_extent(c, h).unwrap()
    }

    #[test]
    fn morton_roundtrip() {
        for i in [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1023, 5, 700]] {
            assert_eq!(unmorton(morton(i)), i);
        }
        assert_eq!(morton([1, 0, 0]), 1);
        assert_eq!(morton([0, 1, 0]), 2);
        assert_eq!(morton([0, 0, 1]), 4);
    }

    #[test]
    fn empty_tree() {
        let t = build_octree(&[], Vec3::zeros(), 1.0, 4, 1).unwrap();
        assert_eq!(t.occupied_leaf_count(), 0);
        let (hit, s) = query_box(&t, &Aabb::cube(Vec3::zeros(), 1.0));
        assert!(!hit);
        assert_eq!(s.nodes_visited, 0);
    }

    #[test]
    fn octant_centres_depth_one() {
        let pts: Vec<Vec3> = (0..8)
            .map(|o| Vec3::new(0.25 + 0.5 * (o & 1) as f64, 0.25 + 0.5 * (o >> 1 & 1) as f64, 0.25 + 0.5 * (o >> 2 & 1) as f64))
            .collect();
        let t = build_octree(&pts, Vec3::zeros(), 1.0, 1, 1).unwrap();
        assert_eq!(t.occupied_leaf_count(), 8);
        assert_eq!(t.masks(), &[0xff]);
        let f = OctreeForest::new(1.0, 1, vec![([0, 0, 0], t)]).unwrap();
        assert_eq!(occupied_leaf_count(&f), 8);
    }

    #[test]
    fn out_of_bounds_point_reports_index() {
        let pts = [Vec3::new(0.5, 0.5, 0.5), Vec3::new(1.5, 0.5, 0.5)];
        match build_octree(&pts, Vec3::zeros(), 1.0, 3, 1) {
            Err(OccupancyError::PointOutOfBounds { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
        assert!(build_octree(&pts[..1], Vec3::zeros(), 1.0, 0, 1).is_err());
        assert!(build_octree(&pts[..1], Vec3::zeros(), 1.0, 11, 1).is_err());
        assert!(build_octree(&pts[..1], Vec3::zeros(), -1.0, 3, 1).is_err());
    }

    #[test]
    fn disjoint_box_visits_root_only() {
        let t = build_octree(&[Vec3::new(0.1, 0.2, 0.3)], Vec3::zeros(), 1.0, 6, 1).unwrap();
        let (hit, s) = query_box(&t, &Aabb::cube(Vec3::new(2.0, 2.0, 2.0), 0.5));
        assert!(!hit);
        assert_eq!(s.nodes_visited, 1);
        let (hit, _) = query_box(&t, &Aabb::cube(Vec3::repeat(-1.0), 3.0));
        assert!(hit);
    }

    #[test]
    fn build_matches_brute_binning_and_min_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..5000).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.0..2.0))).collect();
        for (depth, mp) in [(3, 1), (4, 3), (6, 1), (2, 50)] {
            let t = build_octree(&pts, Vec3::zeros(), 2.0, depth, mp).unwrap();
            let got: HashSet<_> = t.occupied_leaves().into_iter().collect();
            assert_eq!(got, brute_leaves(&pts, Vec3::zeros(), 2.0, depth, mp), "depth {depth} min {mp}");
            assert_eq!(t.occupied_leaf_count(), got.len());
        }
    }

    #[test]
    fn build_is_deterministic_under_input_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut pts: Vec<Vec3> = (0..2000).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0))).collect();
        let a = build_octree(&pts, Vec3::zeros(), 1.0, 5, 1).unwrap();
        pts.reverse();
        let b = build_octree(&pts, Vec3::zeros(), 1.0, 5, 1).unwrap();
        assert_eq!(a.masks(), b.masks());
    }

    #[test]
    fn query_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..10 {
            let n = rng.gen_range(1..1500);
            // Clustered clouds leave plenty of empty space.
            let c = Vec3::from_fn(|_, _| rng.gen_range(0.2..0.8));
            let pts: Vec<Vec3> = (0..n)
                .map(|_| Vec3::from_fn(|a, _| (c[a] + rng.gen_range(-0.25..0.25f64)).clamp(0.0, 1.0)))
                .collect();
            let depth = rng.gen_range(1..=6);
            let t = build_octree(&pts, Vec3::zeros(), 1.0, depth, 1).unwrap();
            let leaves = brute_leaves(&pts, Vec3::zeros(), 1.0, depth, 1);
            for _ in 0..300 {
                let b = random_box(&mut rng, -0.2, 1.2, 0.1);
                let (hit, s) = query_box(&t, &b);
                assert_eq!(hit, brute_query(&leaves, Vec3::zeros(), t.leaf_edge(), &b), "trial {trial} {b:?}");
                assert_eq!(s.result, hit);
                assert!(s.nodes_visited >= 1);
            }
        }
    }

    #[test]
    fn touching_faces_count_as_collision() {
        // Single leaf [0, 0.5]^3 at depth 1.
        let t = build_octree(&[Vec3::repeat(0.1)], Vec3::zeros(), 1.0, 1, 1).unwrap();
        let touching = Aabb::new(Vec3::new(0.5, 0.2, 0.2), Vec3::new(0.7, 0.3, 0.3)).unwrap();
        assert!(query_box(&t, &touching).0);
        let apart = Aabb::new(Vec3::new(0.5001, 0.2, 0.2), Vec3::new(0.7, 0.3, 0.3)).unwrap();
        assert!(!query_box(&t, &apart).0);
    }

    #[test]
    fn point_queries_respect_visit_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pts: Vec<Vec3> = (0..10_000).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0))).collect();
        for depth in [1u8, 3, 6] {
            let t = build_octree(&pts, Vec3::zeros(), 1.0, depth, 1).unwrap();
            let leaf = t.leaf_edge();
            for k in 0..2000 {
                // Mix generic points with grid corners, the worst case.
                let p = if k % 2 == 0 {
                    Vec3::from_fn(|_, _| rng.gen_range(0.0..1.0))
                } else {
                    Vec3::from_fn(|_, _| rng.gen_range(0..=(1u32 << depth)) as f64 * leaf)
                };
                let (_, s) = query_box(&t, &Aabb { min: p, max: p });
                assert!(s.nodes_visited <= 8 * depth as usize + 1, "depth {depth} visited {}", s.nodes_visited);
            }
        }
    }

    #[test]
    fn enlarging_box_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pts: Vec<Vec3> = (0..300).map(|_| Vec3::from_fn(|_, _| rng.gen_range(0.3..0.7))).collect();
        let t = build_octree(&pts, Vec3::zeros(), 1.0, 5, 1).unwrap();
        for _ in 0..500 {
            let b = random_box(&mut rng, 0.0, 1.0, 0.05);
            let mut was = query_box(&t, &b).0;
            for grow in [0.01, 0.05, 0.2] {
                let g = Aabb::new(b.min - Vec3::repeat(grow), b.max + Vec3::repeat(grow)).unwrap();
                let now = query_box(&t, &g).0;
                assert!(!was || now);
                was = now;
            }
        }
    }

    #[test]
    fn partition_examples() {
        let one = PointCloud::new(vec![Vec3::new(0.1, 0.1, 0.1), Vec3::new(0.2, 0.3, 0.4)], None).unwrap();
        assert_eq!(partition_coarse(&one, 1.0).unwrap().len(), 1);
        let two = PointCloud::new(vec![Vec3::new(0.5, 0.0, 0.0), Vec3::new(-0.5, 0.0, 0.0)], None).unwrap();
        let parts = partition_coarse(&two, 0.6).unwrap();
        assert_eq!(parts.iter().map(|(k, _)| *k).collect::<Vec<_>>(), vec![[-1, 0, 0], [0, 0, 0]]);
        assert!(partition_coarse(&two, 0.0).is_err());
    }

    #[test]
    fn partition_counts_match_binning() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<Vec3> = (0..10_000).map(|_| Vec3::from_fn(|_, _| rng.gen_range(-2.0..2.0))).collect();
        let pc = PointCloud::new(pts.clone(), None).unwrap();
        let parts = partition_coarse(&pc, 0.7).unwrap();
        let mut oracle: HashMap<CellIndex, usize> = HashMap::new();
        for p in &pts {
            let k = [p.x, p.y, p.z].map(|v| {
                let mut i = (v / 0.7) as i32;
                if (i as f64) * 0.7 > v {
                    i -= 1;
                }
                i
            });
            *oracle.entry(k).or_default() += 1;
        }
        assert_eq!(parts.len(), oracle.len());
        for (k, v) in &parts {
            assert_eq!(oracle[k], v.len());
        }
        assert_eq!(parts.iter().map(|(_, v)| v.len()).sum::<usize>(), 10_000);
    }

    fn random_forest(rng: &mut ChaCha8Rng, n: usize, depth: u8) -> (OctreeForest, PointCloud) {
        let pts: Vec<Vec3> = (0..n)
            .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..0.5)))
            .collect();
        let pc = PointCloud::new(pts, None).unwrap();
        (build_forest(&pc, 0.5, depth, 1).unwrap(), pc)
    }

    #[test]
    fn forest_matches_per_cell_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..4 {
            let n = rng.gen_range(10..400);
            let (f, pc) = random_forest(&mut rng, n, 4);
            let cells: Vec<(Vec3, HashSet<[u32; 3]>)> = partition_coarse(&pc, 0.5)
                .unwrap()
                .into_iter()
                .map(|(k, pts)| {
                    let o = cell_origin(k, 0.5);
                    (o, brute_leaves(&pts, o, 0.5, 4, 1))
                })
                .collect();
            let leaf = 0.5 / 16.0;
            for _ in 0..400 {
                let b = random_box(&mut rng, -1.2, 1.2, 0.3);
                let want = cells.iter().any(|(o, l)| brute_query(l, *o, leaf, &b));
                assert_eq!(forest_query(&f, &b), want, "{b:?}");
            }
        }
    }

    #[test]
    fn box_straddling_two_cells() {
        let pc = PointCloud::new(vec![Vec3::new(0.49, 0.1, 0.1), Vec3::new(0.51, 0.1, 0.1)], None).unwrap();
        let f = build_forest(&pc, 0.5, 6, 1).unwrap();
        assert_eq!(f.len(), 2);
        let b = Aabb::new(Vec3::new(0.485, 0.09, 0.09), Vec3::new(0.515, 0.11, 0.11)).unwrap();
        let (hit, s) = f.query(&b);
        assert!(hit);
        assert!(s.nodes_visited >= 1);
        // Each half alone still collides, via a different cell.
        let left = Aabb::new(Vec3::new(0.485, 0.09, 0.09), Vec3::new(0.495, 0.11, 0.11)).unwrap();
        let right = Aabb::new(Vec3::new(0.505, 0.09, 0.09), Vec3::new(0.515, 0.11, 0.11)).unwrap();
        assert!(forest_query(&f, &left) && forest_query(&f, &right));
        assert!(!forest_query(&OctreeForest::empty(0.5, 6), &b));
    }

    #[test]
    fn save_load_roundtrip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (f, _) = random_forest(&mut rng, 3000, 6);
        let mut buf = Vec::new();
        write_forest(&f, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"OFOR");
        let back = read_forest(&mut io::Cursor::new(&buf)).unwrap();
        assert_eq!(back, f);
        for ((_, a), (_, b)) in f.cells().iter().zip(back.cells()) {
            assert_eq!(a.occupied_leaves(), b.occupied_leaves());
        }

        let mut empty = Vec::new();
        write_forest(&OctreeForest::empty(0.5, 6), &mut empty).unwrap();
        assert!(read_forest(&mut io::Cursor::new(&empty)).unwrap().is_empty());

        for cut in [3, 10, buf.len() / 2, buf.len() - 1] {
            assert!(matches!(read_forest(&mut io::Cursor::new(&buf[..cut])), Err(OccupancyError::Truncated)), "cut {cut}");
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_forest(&mut io::Cursor::new(&bad)), Err(OccupancyError::BadMagic(_))));
        let mut ver = buf.clone();
        ver[4] = 9;
        assert!(matches!(read_forest(&mut io::Cursor::new(&ver)), Err(OccupancyError::Version { found: 9 })));
    }

    #[test]
    fn summary_lists_cells() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (f, _) = random_forest(&mut rng, 500, 3);
        let s = f.summary();
        assert_eq!(s.cells.len(), f.len());
        assert_eq!(s.cells.iter().map(|c| c.occupied_leaves).sum::<usize>(), s.occupied_leaves);
        let json = serde_json::to_string(&s).unwrap();
        let back: ForestSummary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }
}
