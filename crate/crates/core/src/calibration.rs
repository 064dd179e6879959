//! Raster-size calibration from the seesaw swing of a reference layer.
//!
//! The galvanometer signal of a reference layer moves back and forth between
//! the two edges of the part. After aggressive low-pass filtering its local
//! extrema are the turning points, and the largest difference between
//! consecutive turning points is the part width in volts.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::grid::VoxelGrid;
use crate::signal_prep::{lowpass_filter, FilterSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub index: usize,
    pub value: f64,
}

/// Strict local extrema of `signal`. Runs of equal samples count as one
/// sample located at the run center. Endpoints are never peaks, so a
/// monotone signal has none. Maxima and minima alternate.
pub fn find_peaks(signal: &[f64]) -> Vec<Peak> {
    // collapse plateaus into (value, first, last)
    let mut runs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, &v) in signal.iter().enumerate() {
        match runs.last_mut() {
            Some(run) if run.0 == v => run.2 = i,
            _ => runs.push((v, i, i)),
        }
    }
    runs.windows(3)
        .filter_map(|w| {
            let (prev, cur, next) = (w[0].0, w[1], w[2].0);
            let is_max = cur.0 > prev && cur.0 > next;
            let is_min = cur.0 < prev && cur.0 < next;
            (is_max || is_min).then(|| Peak {
                index: (cur.1 + cur.2) / 2,
                value: cur.0,
            })
        })
        .collect()
}

/// Largest absolute difference between consecutive peaks of the filtered
/// signal; 0 when fewer than two peaks exist.
pub fn max_consecutive_peak_delta(signal: &[f64], calibration_filter: &FilterSpec) -> Result<f64> {
    let filtered = lowpass_filter(signal, calibration_filter)?;
    Ok(find_peaks(&filtered)
        .windows(2)
        .map(|w| (w[0].value - w[1].value).abs())
        .fold(0.0, f64::max))
}

/// Maximum swing on both galvanometer axes and its Euclidean combination.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwingMeasurement {
    pub max_delta_x: f64,
    pub max_delta_y: f64,
    pub combined: f64,
}

impl SwingMeasurement {
    pub fn new(max_delta_x: f64, max_delta_y: f64) -> Self {
        Self {
            max_delta_x,
            max_delta_y,
            combined: max_delta_x.hypot(max_delta_y),
        }
    }

    /// Measures both axes of one layer's galvanometer samples.
    pub fn measure(
        galvo_x: &[f64],
        galvo_y: &[f64],
        calibration_filter: &FilterSpec,
    ) -> Result<Self> {
        Ok(Self::new(
            max_consecutive_peak_delta(galvo_x, calibration_filter)?,
            max_consecutive_peak_delta(galvo_y, calibration_filter)?,
        ))
    }
}

/// Raster size giving cubical voxels: the part's width in volts divided by
/// the number of layers spanning the same width.
pub fn derive_raster_size(swing: &SwingMeasurement, layer_count: usize) -> Result<f64> {
    if layer_count == 0 {
        return Err(Error::Config("layer count must be at least 1".into()));
    }
    if !(swing.combined > 0.0) {
        return Err(Error::Degenerate("galvanometer swing is zero".into()));
    }
    Ok(swing.combined / layer_count as f64)
}

/// Number of voxels per hit count.
pub fn hit_count_histogram(grid: &VoxelGrid) -> BTreeMap<u32, usize> {
    let mut hist = BTreeMap::new();
    for (_, &h) in grid.iter() {
        *hist.entry(h).or_insert(0) += 1;
    }
    hist
}

/// Fraction of voxels hit exactly once.
pub fn single_hit_fraction(grid: &VoxelGrid) -> f64 {
    if grid.is_empty() {
        return 0.0;
    }
    grid.iter().filter(|(_, &h)| h == 1).count() as f64 / grid.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{RasterSpec, VoxelKey};

    #[test]
    fn peaks_of_small_wave() {
        let p = find_peaks(&[0.0, 1.0, 0.0, -1.0, 0.0]);
        assert_eq!(
            p,
            vec![
                Peak {
                    index: 1,
                    value: 1.0
                },
                Peak {
                    index: 3,
                    value: -1.0
                }
            ]
        );
    }

    #[test]
    fn ramp_has_no_peaks() {
        let ramp: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(find_peaks(&ramp).is_empty());
        assert!(find_peaks(&[1.0, 1.0, 1.0]).is_empty());
    }

    #[test]
    fn plateau_reports_center() {
        let p = find_peaks(&[0.0, 2.0, 2.0, 2.0, 0.0]);
        assert_eq!(
            p,
            vec![Peak {
                index: 2,
                value: 2.0
            }]
        );
        // plateau touching an end is not a peak
        assert!(find_peaks(&[2.0, 2.0, 0.0, 0.0]).is_empty());
    }

    #[test]
    fn pythagorean_raster() {
        let swing = SwingMeasurement::new(3.0, 4.0);
        assert_eq!(swing.combined, 5.0);
        assert!((derive_raster_size(&swing, 5).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            derive_raster_size(&SwingMeasurement::new(0.0, 0.0), 5),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn histogram_counts() {
        let r = RasterSpec::new(1.0).unwrap();
        assert!(hit_count_histogram(&VoxelGrid::new(r, 1)).is_empty());
        let g = VoxelGrid::from_cells(
            r,
            1,
            [
                (VoxelKey::new(0, 0, 0), 1),
                (VoxelKey::new(0, 0, 1), 1),
                (VoxelKey::new(0, 1, 0), 2),
            ],
        )
        .unwrap();
        let h = hit_count_histogram(&g);
        assert_eq!(h.into_iter().collect::<Vec<_>>(), vec![(1, 2), (2, 1)]);
        assert!((single_hit_fraction(&g) - 2.0 / 3.0).abs() < 1e-12);
    }
}
