//! Rasterization of sintered samples into voxels and aggregation of voxel
//! grids from repeated prints ("differential" voxelization).
//!
//! Galvanometer voltages are used directly as planar coordinates. Within the
//! small deflection angles of a build chamber the angle and its tangent are
//! practically identical, so the only effect is a global scale factor.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{RasterSpec, VoxelGrid, VoxelKey};
use crate::segmentation::LayerBoundaries;
use crate::signal_prep::BinaryLaserSignal;

/// Counts every ON sample inside a layer interval into the cell
/// `(layer, floor(gx / raster), floor(gy / raster))`. Samples outside all
/// layer intervals are ignored. Layers are numbered from 0.
pub fn rasterize_layers(
    laser: &BinaryLaserSignal,
    galvo_x: &[f64],
    galvo_y: &[f64],
    boundaries: &LayerBoundaries,
    raster: RasterSpec,
) -> Result<VoxelGrid> {
    let n = laser.len();
    if galvo_x.len() != n || galvo_y.len() != n {
        return Err(Error::Incompatible(format!(
            "laser has {n} samples but galvo channels have {} and {}",
            galvo_x.len(),
            galvo_y.len()
        )));
    }
    if !boundaries.is_well_formed(n) {
        return Err(Error::Incompatible(format!(
            "layer boundaries are unordered or exceed {n} samples"
        )));
    }

    let per_layer: Vec<HashMap<VoxelKey, u32>> = boundaries
        .layers
        .par_iter()
        .enumerate()
        .map(|(layer, span)| {
            let mut cells = HashMap::new();
            for i in span.start..=span.end {
                if laser.is_on(i) {
                    let key = VoxelKey::new(
                        layer as u32,
                        raster.cell_of(galvo_x[i]),
                        raster.cell_of(galvo_y[i]),
                    );
                    *cells.entry(key).or_insert(0) += 1;
                }
            }
            cells
        })
        .collect();

    let mut grid = VoxelGrid::new(raster, boundaries.len() as u32);
    for cells in per_layer {
        for (key, hits) in cells {
            grid.add(key, hits);
        }
    }
    Ok(grid)
}

/// Cell-wise sum of hit counters over grids that share raster size and layer
/// count. The prints must also share position and orientation; that cannot
/// be checked here.
pub fn differential_voxelization(grids: &[VoxelGrid]) -> Result<VoxelGrid> {
    let first = grids
        .first()
        .ok_or_else(|| Error::EmptyInput("no grids to aggregate".into()))?;
    for (i, g) in grids.iter().enumerate().skip(1) {
        if g.raster() != first.raster() {
            return Err(Error::Incompatible(format!(
                "grid {i} has raster {} V, grid 0 has {} V",
                g.raster().size(),
                first.raster().size()
            )));
        }
        if g.layer_count() != first.layer_count() {
            return Err(Error::Incompatible(format!(
                "grid {i} has {} layers, grid 0 has {}",
                g.layer_count(),
                first.layer_count()
            )));
        }
    }
    let mut sum = first.clone();
    for g in &grids[1..] {
        for (k, &h) in g.iter() {
            sum.add(*k, h);
        }
    }
    Ok(sum)
}
