//! Voxel pruning, gap and neighborhood diagnostics, and gap filling by
//! column projection.
//!
//! Pruning is evaluated against a frozen copy of the input grid, so the
//! result does not depend on visiting order.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{VoxelGrid, VoxelKey};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PruneConfig {
    pub min_hit: u32,
    pub neighbor_range: u32,
    pub min_neighbors: u32,
}

impl PruneConfig {
    /// Single-trace parameters.
    pub const SIMPLE: PruneConfig = PruneConfig {
        min_hit: 1,
        neighbor_range: 5,
        min_neighbors: 33,
    };

    /// Parameters for three aggregated traces.
    pub const DIFFERENTIAL: PruneConfig = PruneConfig {
        min_hit: 3,
        neighbor_range: 4,
        min_neighbors: 22,
    };

    /// Largest neighbor count within one layer: (2r+1)^2 - 1.
    pub fn max_planar_neighbors(range: u32) -> u64 {
        let side = 2 * range as u64 + 1;
        side * side - 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_hit == 0 {
            return Err(Error::Config("min_hit must be at least 1".into()));
        }
        if self.neighbor_range == 0 {
            return Err(Error::Config("neighbor range must be at least 1".into()));
        }
        let max = Self::max_planar_neighbors(self.neighbor_range);
        if self.min_neighbors as u64 > max {
            return Err(Error::Config(format!(
                "min_neighbors {} exceeds (2r+1)²−1 = {max}",
                self.min_neighbors
            )));
        }
        Ok(())
    }
}

/// Drops cells hit fewer than `min_hit` times.
pub fn prune_by_hit_count(grid: &VoxelGrid, min_hit: u32) -> VoxelGrid {
    let mut out = grid.clone();
    out.retain(|_, h| h >= min_hit);
    out
}

/// Neighborhood used when counting occupied neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighborhood {
    /// Square window within the voxel's own layer.
    Planar,
    /// Cube spanning `range` layers above and below as well.
    Volumetric,
}

/// Occupied cells indexed by (layer, x) with sorted y lists, for counting
/// cells inside axis-aligned boxes without scanning the whole box.
struct ColumnIndex {
    rows: HashMap<(u32, i32), Vec<i32>>,
}

impl ColumnIndex {
    fn new(grid: &VoxelGrid) -> Self {
        let mut rows: HashMap<(u32, i32), Vec<i32>> = HashMap::new();
        for k in grid.cells().keys() {
            rows.entry((k.layer, k.x)).or_default().push(k.y);
        }
        for ys in rows.values_mut() {
            ys.sort_unstable();
        }
        Self { rows }
    }

    /// Occupied cells in the box around `k`, excluding `k` itself.
    fn count_around(&self, k: &VoxelKey, range: u32, hood: Neighborhood, layer_count: u32) -> u32 {
        let r = range as i64;
        let (l_lo, l_hi) = match hood {
            Neighborhood::Planar => (k.layer as i64, k.layer as i64),
            Neighborhood::Volumetric => (
                (k.layer as i64 - r).max(0),
                (k.layer as i64 + r).min(layer_count as i64 - 1),
            ),
        };
        let (y_lo, y_hi) = (k.y as i64 - r, k.y as i64 + r);
        let mut count = 0usize;
        for layer in l_lo..=l_hi {
            for x in (k.x as i64 - r)..=(k.x as i64 + r) {
                let Ok(x) = i32::try_from(x) else { continue };
                if let Some(ys) = self.rows.get(&(layer as u32, x)) {
                    let lo = ys.partition_point(|&y| (y as i64) < y_lo);
                    let hi = ys.partition_point(|&y| (y as i64) <= y_hi);
                    count += hi - lo;
                }
            }
        }
        (count - 1) as u32
    }
}

/// Occupied-neighbor count of every occupied cell.
pub fn neighbor_counts(grid: &VoxelGrid, range: u32, hood: Neighborhood) -> HashMap<VoxelKey, u32> {
    let index = ColumnIndex::new(grid);
    let keys: Vec<VoxelKey> = grid.cells().keys().copied().collect();
    keys.par_iter()
        .map(|k| (*k, index.count_around(k, range, hood, grid.layer_count())))
        .collect()
}

/// Removes cells with fewer than `min_neighbors` occupied cells in the cube
/// of half-width `range` (layers included) around them.
pub fn prune_by_neighbors(grid: &VoxelGrid, range: u32, min_neighbors: u32) -> VoxelGrid {
    prune_by_neighbors_in(grid, range, min_neighbors, Neighborhood::Volumetric)
}

pub fn prune_by_neighbors_in(
    grid: &VoxelGrid,
    range: u32,
    min_neighbors: u32,
    hood: Neighborhood,
) -> VoxelGrid {
    let counts = neighbor_counts(grid, range, hood);
    let mut out = grid.clone();
    out.retain(|k, _| counts[k] >= min_neighbors);
    out
}

/// Hit-count pruning followed by neighbor pruning.
pub fn prune(grid: &VoxelGrid, cfg: &PruneConfig, hood: Neighborhood) -> Result<VoxelGrid> {
    cfg.validate()?;
    let by_hits = prune_by_hit_count(grid, cfg.min_hit);
    Ok(prune_by_neighbors_in(
        &by_hits,
        cfg.neighbor_range,
        cfg.min_neighbors,
        hood,
    ))
}

/// Histogram of in-layer neighbor counts (window half-width `range`).
pub fn neighbor_count_histogram(grid: &VoxelGrid, range: u32) -> BTreeMap<u32, usize> {
    let mut hist = BTreeMap::new();
    for (_, c) in neighbor_counts(grid, range, Neighborhood::Planar) {
        *hist.entry(c).or_insert(0) += 1;
    }
    hist
}

/// Lengths of empty runs along X lying strictly between two occupied cells
/// of the same (layer, y) row.
pub fn gap_stretch_histogram(grid: &VoxelGrid) -> BTreeMap<usize, usize> {
    let mut rows: HashMap<(u32, i32), Vec<i32>> = HashMap::new();
    for k in grid.cells().keys() {
        rows.entry((k.layer, k.y)).or_default().push(k.x);
    }
    let mut hist = BTreeMap::new();
    for xs in rows.values_mut() {
        xs.sort_unstable();
        for w in xs.windows(2) {
            let gap = (w[1] - w[0] - 1) as usize;
            if gap > 0 {
                *hist.entry(gap).or_insert(0) += 1;
            }
        }
    }
    hist
}

/// Share of histogram mass strictly below `key`.
pub fn fraction_below<K: Ord + Copy>(hist: &BTreeMap<K, usize>, key: K) -> f64 {
    let total: usize = hist.values().sum();
    if total == 0 {
        return 0.0;
    }
    hist.range(..key).map(|(_, n)| n).sum::<usize>() as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionDirection {
    /// Project every column onto its highest occupied layer.
    Up,
    /// Project every column onto its lowest occupied layer.
    Down,
    /// Layers up to `middle_layer` project down, layers from it project up;
    /// the middle layer belongs to both halves.
    Bidirectional { middle_layer: u32 },
}

/// Extreme layer and aggregated hit count of one (x, y) column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnEntry {
    pub layer: u32,
    pub hits: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColumnProjection {
    pub direction: ProjectionDirection,
    pub min_hit_filter: u64,
    /// Highest-layer surface (Up, upper half of Bidirectional).
    pub upper: BTreeMap<(i32, i32), ColumnEntry>,
    /// Lowest-layer surface (Down, lower half of Bidirectional).
    pub lower: BTreeMap<(i32, i32), ColumnEntry>,
}

impl ColumnProjection {
    /// Distinct (x, y) columns present in any surface.
    pub fn columns(&self) -> Vec<(i32, i32)> {
        let mut cols: Vec<_> = self
            .upper
            .keys()
            .chain(self.lower.keys())
            .copied()
            .collect();
        cols.sort_unstable();
        cols.dedup();
        cols
    }

    pub fn is_empty(&self) -> bool {
        self.upper.is_empty() && self.lower.is_empty()
    }
}

fn surface(
    grid: &VoxelGrid,
    layers: impl Fn(u32) -> bool,
    pick_upper: bool,
    min_hit_filter: u64,
) -> BTreeMap<(i32, i32), ColumnEntry> {
    let mut cols: BTreeMap<(i32, i32), ColumnEntry> = BTreeMap::new();
    for (k, &h) in grid.iter() {
        if !layers(k.layer) {
            continue;
        }
        cols.entry((k.x, k.y))
            .and_modify(|e| {
                e.hits += h as u64;
                e.layer = if pick_upper {
                    e.layer.max(k.layer)
                } else {
                    e.layer.min(k.layer)
                };
            })
            .or_insert(ColumnEntry {
                layer: k.layer,
                hits: h as u64,
            });
    }
    cols.retain(|_, e| e.hits >= min_hit_filter);
    cols
}

/// Collapses each (x, y) column onto its extreme layer, summing the column's
/// hit counters. Columns whose sum is below `min_hit_filter` are dropped.
pub fn project_columns(
    grid: &VoxelGrid,
    direction: ProjectionDirection,
    min_hit_filter: u64,
) -> Result<ColumnProjection> {
    let mut proj = ColumnProjection {
        direction,
        min_hit_filter,
        upper: BTreeMap::new(),
        lower: BTreeMap::new(),
    };
    match direction {
        ProjectionDirection::Up => proj.upper = surface(grid, |_| true, true, min_hit_filter),
        ProjectionDirection::Down => proj.lower = surface(grid, |_| true, false, min_hit_filter),
        ProjectionDirection::Bidirectional { middle_layer } => {
            if middle_layer >= grid.layer_count() {
                return Err(Error::Config(format!(
                    "middle layer {middle_layer} outside grid of {} layers",
                    grid.layer_count()
                )));
            }
            proj.lower = surface(grid, |l| l <= middle_layer, false, min_hit_filter);
            proj.upper = surface(grid, |l| l >= middle_layer, true, min_hit_filter);
        }
    }
    Ok(proj)
}

/// Fills empty voxels between a column's projection surface and the part
/// interior, and marks original voxels by adding 1 to their hit counter.
/// Filled voxels get hit count 1, so originals are always >= 2 afterwards.
pub fn fill_gaps(grid: &VoxelGrid, proj: &ColumnProjection) -> VoxelGrid {
    let mut cells: HashMap<VoxelKey, u32> = grid.cells().iter().map(|(k, h)| (*k, h + 1)).collect();
    let mut fill = |layers: std::ops::Range<u32>, x: i32, y: i32| {
        for layer in layers {
            cells.entry(VoxelKey::new(layer, x, y)).or_insert(1);
        }
    };
    let n = grid.layer_count();
    match proj.direction {
        ProjectionDirection::Up => {
            for (&(x, y), e) in &proj.upper {
                fill(0..e.layer.min(n), x, y);
            }
        }
        ProjectionDirection::Down => {
            for (&(x, y), e) in &proj.lower {
                fill(e.layer + 1..n, x, y);
            }
        }
        ProjectionDirection::Bidirectional { middle_layer } => {
            let middle = middle_layer.min(n.saturating_sub(1));
            for (&(x, y), e) in &proj.lower {
                fill(e.layer + 1..middle + 1, x, y);
            }
            for (&(x, y), e) in &proj.upper {
                fill(middle..e.layer.min(n), x, y);
            }
        }
    }
    grid.with_cells(cells)
}

/// Model-specific gap filling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FillStrategy {
    /// Parts without overhangs: every column fills up to its top layer.
    GearUp,
    /// Parts lying on their side: fill outward from the middle layer.
    AstmBidirectional,
    None,
}

impl FillStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gear_up" => Ok(Self::GearUp),
            "astm_bidirectional" => Ok(Self::AstmBidirectional),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!(
                "unknown fill strategy `{other}` (expected gear_up, astm_bidirectional or none)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::GearUp => "gear_up",
            Self::AstmBidirectional => "astm_bidirectional",
            Self::None => "none",
        }
    }
}

/// Default middle layer (0-based) of a grid: the center layer, e.g. index 50
/// of 101 layers.
pub fn default_middle_layer(layer_count: u32) -> u32 {
    layer_count.div_ceil(2).saturating_sub(1)
}
