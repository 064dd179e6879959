//! Sparse hit-counted voxel grid in (layer, raster x, raster y) space.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::trace_io::{CloudPoint, PointCloud};

/// Galvanometer volts per raster cell, shared by X and Y.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterSpec {
    raster_size_volts: f64,
}

impl RasterSpec {
    pub fn new(raster_size_volts: f64) -> Result<Self> {
        if !(raster_size_volts.is_finite() && raster_size_volts > 0.0) {
            return Err(Error::Config(format!(
                "raster size must be positive, got {raster_size_volts}"
            )));
        }
        Ok(Self { raster_size_volts })
    }

    pub fn size(&self) -> f64 {
        self.raster_size_volts
    }

    /// Cell index of a voltage. Floor division, so negative voltages bin
    /// consistently with positive ones.
    pub fn cell_of(&self, volts: f64) -> i32 {
        (volts / self.raster_size_volts).floor() as i32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VoxelKey {
    pub layer: u32,
    pub x: i32,
    pub y: i32,
}

impl VoxelKey {
    pub const fn new(layer: u32, x: i32, y: i32) -> Self {
        Self { layer, x, y }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    cells: HashMap<VoxelKey, u32>,
    raster: RasterSpec,
    layer_count: u32,
}

impl VoxelGrid {
    pub fn new(raster: RasterSpec, layer_count: u32) -> Self {
        Self {
            cells: HashMap::new(),
            raster,
            layer_count,
        }
    }

    /// Builds a grid from explicit cells; zero hits are dropped.
    pub fn from_cells(
        raster: RasterSpec,
        layer_count: u32,
        cells: impl IntoIterator<Item = (VoxelKey, u32)>,
    ) -> Result<Self> {
        let mut grid = Self::new(raster, layer_count);
        for (key, hits) in cells {
            grid.check_layer(key)?;
            if hits > 0 {
                *grid.cells.entry(key).or_insert(0) += hits;
            }
        }
        Ok(grid)
    }

    fn check_layer(&self, key: VoxelKey) -> Result<()> {
        if key.layer >= self.layer_count {
            return Err(Error::Incompatible(format!(
                "layer {} outside grid of {} layers",
                key.layer, self.layer_count
            )));
        }
        Ok(())
    }

    pub fn raster(&self) -> RasterSpec {
        self.raster
    }

    pub fn layer_count(&self) -> u32 {
        self.layer_count
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, key: &VoxelKey) -> u32 {
        self.cells.get(key).copied().unwrap_or(0)
    }

    pub fn contains(&self, key: &VoxelKey) -> bool {
        self.cells.contains_key(key)
    }

    /// Adds `hits` to a cell. Panics if the layer is out of range.
    pub fn add(&mut self, key: VoxelKey, hits: u32) {
        assert!(
            key.layer < self.layer_count,
            "layer {} out of range",
            key.layer
        );
        if hits > 0 {
            *self.cells.entry(key).or_insert(0) += hits;
        }
    }

    /// Sets a cell's hit count; zero removes it.
    pub fn set(&mut self, key: VoxelKey, hits: u32) {
        assert!(
            key.layer < self.layer_count,
            "layer {} out of range",
            key.layer
        );
        if hits == 0 {
            self.cells.remove(&key);
        } else {
            self.cells.insert(key, hits);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &u32)> {
        self.cells.iter()
    }

    /// Cells in (layer, x, y) order.
    pub fn sorted_cells(&self) -> Vec<(VoxelKey, u32)> {
        let mut v: Vec<_> = self.cells.iter().map(|(k, h)| (*k, *h)).collect();
        v.sort_unstable_by_key(|(k, _)| *k);
        v
    }

    pub fn total_hits(&self) -> u64 {
        self.cells.values().map(|&h| h as u64).sum()
    }

    pub fn retain(&mut self, mut keep: impl FnMut(&VoxelKey, u32) -> bool) {
        self.cells.retain(|k, h| keep(k, *h));
    }

    pub(crate) fn cells(&self) -> &HashMap<VoxelKey, u32> {
        &self.cells
    }

    pub(crate) fn with_cells(&self, cells: HashMap<VoxelKey, u32>) -> Self {
        Self {
            cells,
            raster: self.raster,
            layer_count: self.layer_count,
        }
    }

    /// Point cloud in (rx, ry, layer) coordinates, weights = hit counts.
    pub fn to_cloud(&self) -> PointCloud {
        self.sorted_cells()
            .into_iter()
            .map(|(k, h)| CloudPoint::new(k.x as f64, k.y as f64, k.layer as f64, h))
            .collect()
    }

    /// Inverse of [`VoxelGrid::to_cloud`]; coordinates must be integral.
    pub fn from_cloud(
        cloud: &PointCloud,
        raster: RasterSpec,
        layer_count: Option<u32>,
    ) -> Result<Self> {
        let mut cells = Vec::with_capacity(cloud.len());
        for (i, p) in cloud.points.iter().enumerate() {
            let integral = |v: f64| v.fract() == 0.0 && v.abs() < i32::MAX as f64;
            if !(integral(p.x) && integral(p.y) && integral(p.z) && p.z >= 0.0) {
                return Err(Error::Parse {
                    row: i as u64 + 1,
                    message: format!("({}, {}, {}) is not a voxel coordinate", p.x, p.y, p.z),
                });
            }
            cells.push((VoxelKey::new(p.z as u32, p.x as i32, p.y as i32), p.weight));
        }
        let layers = match layer_count {
            Some(n) => n,
            None => cells.iter().map(|(k, _)| k.layer + 1).max().unwrap_or(0),
        };
        Self::from_cells(raster, layers, cells)
    }
}

/// Converts a grid to a point cloud: one point per occupied cell at
/// (rx, ry, layer) with weight = hit count.
pub fn grid_to_cloud(grid: &VoxelGrid) -> PointCloud {
    grid.to_cloud()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_binning_handles_negatives() {
        let r = RasterSpec::new(0.0025).unwrap();
        assert_eq!(r.cell_of(0.0051), 2);
        assert_eq!(r.cell_of(-0.0001), -1);
        assert_eq!(r.cell_of(0.0), 0);
        assert!(RasterSpec::new(0.0).is_err());
        assert!(RasterSpec::new(-1.0).is_err());
    }

    #[test]
    fn cloud_maps_layer_to_z() {
        let r = RasterSpec::new(1.0).unwrap();
        let g = VoxelGrid::from_cells(r, 3, [(VoxelKey::new(2, 3, 1), 4)]).unwrap();
        let c = grid_to_cloud(&g);
        assert_eq!(c.points, vec![CloudPoint::new(3.0, 1.0, 2.0, 4)]);
        assert_eq!(VoxelGrid::from_cloud(&c, r, Some(3)).unwrap(), g);
        assert!(grid_to_cloud(&VoxelGrid::new(r, 0)).is_empty());
    }

    #[test]
    fn zero_hits_are_absent() {
        let r = RasterSpec::new(1.0).unwrap();
        let mut g = VoxelGrid::from_cells(r, 1, [(VoxelKey::new(0, 0, 0), 0)]).unwrap();
        assert!(g.is_empty());
        g.add(VoxelKey::new(0, 1, 1), 2);
        g.set(VoxelKey::new(0, 1, 1), 0);
        assert!(g.is_empty());
    }

    #[test]
    fn layer_out_of_range_rejected() {
        let r = RasterSpec::new(1.0).unwrap();
        assert!(VoxelGrid::from_cells(r, 2, [(VoxelKey::new(2, 0, 0), 1)]).is_err());
    }
}
