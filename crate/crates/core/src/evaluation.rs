//! Volumetric comparison of a reconstruction against a reference mesh.
//!
//! The mesh is voxelized on a regular grid anchored at its bounding-box
//! minimum. The reconstructed cloud is scaled and moved onto the reference,
//! voxelized on the same grid, and the two occupancy sets are compared cell
//! by cell.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_io::{CloudPoint, PointCloud, Triangle, TriangleMesh};

/// Dense boolean occupancy on a regular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    dims: [usize; 3],
    origin: [f64; 3],
    cell_size: f64,
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(dims: [usize; 3], origin: [f64; 3], cell_size: f64) -> Result<Self> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(Error::Config(format!(
                "cell size must be positive, got {cell_size}"
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "grid dimensions must be positive, got {dims:?}"
            )));
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::Config(format!("grid {dims:?} is too large")))?;
        Ok(Self {
            dims,
            origin,
            cell_size,
            occupied: vec![false; n],
        })
    }

    /// An empty grid with the same frame as `self`.
    pub fn empty_like(&self) -> Self {
        Self {
            occupied: vec![false; self.occupied.len()],
            ..*self
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    fn index(&self, [i, j, k]: [usize; 3]) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    fn unindex(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        [i, j, k]
    }

    pub fn in_bounds(&self, c: [i64; 3]) -> Option<[usize; 3]> {
        (0..3)
            .all(|a| c[a] >= 0 && (c[a] as usize) < self.dims[a])
            .then(|| [c[0] as usize, c[1] as usize, c[2] as usize])
    }

    pub fn is_occupied(&self, c: [usize; 3]) -> bool {
        self.occupied[self.index(c)]
    }

    /// Marks a cell; panics if it lies outside the grid.
    pub fn set(&mut self, c: [usize; 3], value: bool) {
        assert!(
            (0..3).all(|a| c[a] < self.dims[a]),
            "cell {c:?} outside {:?}",
            self.dims
        );
        let idx = self.index(c);
        self.occupied[idx] = value;
    }

    pub fn count(&self) -> usize {
        self.occupied.iter().filter(|&&o| o).count()
    }

    pub fn occupied_cells(&self) -> Vec<[usize; 3]> {
        self.occupied
            .iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .map(|(idx, _)| self.unindex(idx))
            .collect()
    }

    pub fn cell_center(&self, c: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.origin[a] + (c[a] as f64 + 0.5) * self.cell_size)
    }

    /// Cell containing `p`, which may lie outside the grid.
    pub fn cell_of(&self, p: [f64; 3]) -> [i64; 3] {
        std::array::from_fn(|a| ((p[a] - self.origin[a]) / self.cell_size).floor() as i64)
    }

    pub fn same_frame(&self, other: &Self) -> bool {
        self.dims == other.dims && self.origin == other.origin && self.cell_size == other.cell_size
    }

    /// Centers of occupied cells as a unit-weight cloud.
    pub fn to_cloud(&self) -> PointCloud {
        self.occupied_cells()
            .into_iter()
            .map(|c| {
                let p = self.cell_center(c);
                CloudPoint::new(p[0], p[1], p[2], 1)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeshVoxelization {
    pub grid: OccupancyGrid,
    pub degenerate_triangles: usize,
    /// False when some edge is not shared by exactly two triangles; the grid
    /// then holds surface cells only.
    pub watertight: bool,
}

type Vec3 = [f64; 3];

fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

fn is_degenerate(t: &Triangle, scale: f64) -> bool {
    let [a, b, c] = t.0;
    norm(cross(sub(b, a), sub(c, a))) <= 1e-12 * scale * scale
}

fn is_watertight(triangles: &[&Triangle]) -> bool {
    let key = |v: Vec3| v.map(f64::to_bits);
    let mut edges: HashMap<([u64; 3], [u64; 3]), u32> = HashMap::new();
    for t in triangles {
        for e in 0..3 {
            let (a, b) = (key(t.0[e]), key(t.0[(e + 1) % 3]));
            let k = if a < b { (a, b) } else { (b, a) };
            *edges.entry(k).or_insert(0) += 1;
        }
    }
    edges.values().all(|&n| n == 2)
}

/// Separating-axis test between a triangle and an axis-aligned box.
fn triangle_box_overlap(center: Vec3, half: Vec3, tri: &[Vec3; 3]) -> bool {
    let v = tri.map(|p| sub(p, center));
    let e = [sub(v[1], v[0]), sub(v[2], v[1]), sub(v[0], v[2])];

    // box face normals
    for a in 0..3 {
        let lo = v.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
        let hi = v.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
        if lo > half[a] || hi < -half[a] {
            return false;
        }
    }
    // triangle normal
    let n = cross(e[0], e[1]);
    let r = half[0] * n[0].abs() + half[1] * n[1].abs() + half[2] * n[2].abs();
    if dot(n, v[0]).abs() > r {
        return false;
    }
    // edge cross products
    let axes = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for edge in &e {
        for ax in &axes {
            let a = cross(*ax, *edge);
            let p = v.map(|q| dot(a, q));
            let lo = p.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let r = half[0] * a[0].abs() + half[1] * a[1].abs() + half[2] * a[2].abs();
            if lo > r || hi < -r {
                return false;
            }
        }
    }
    true
}

/// X coordinates where the line `(y, z) = (y0, z0)` parallel to X crosses
/// the triangle, if it does.
fn ray_crossing(t: &Triangle, y0: f64, z0: f64) -> Option<f64> {
    let [a, b, c] = t.0;
    let area = (b[1] - a[1]) * (c[2] - a[2]) - (c[1] - a[1]) * (b[2] - a[2]);
    if area == 0.0 {
        return None;
    }
    let w0 = ((b[1] - y0) * (c[2] - z0) - (c[1] - y0) * (b[2] - z0)) / area;
    let w1 = ((c[1] - y0) * (a[2] - z0) - (a[1] - y0) * (c[2] - z0)) / area;
    let w2 = 1.0 - w0 - w1;
    (w0 >= 0.0 && w1 >= 0.0 && w2 >= 0.0).then(|| w0 * a[0] + w1 * b[0] + w2 * c[0])
}

/// Solid voxelization: a cell is occupied when its center lies inside the
/// mesh (odd number of crossings along +X) or when the cell overlaps a
/// triangle. The grid starts at the mesh's bounding-box minimum.
pub fn voxelize_mesh(mesh: &TriangleMesh, cell_size: f64) -> Result<MeshVoxelization> {
    if !(cell_size > 0.0 && cell_size.is_finite()) {
        return Err(Error::Config(format!(
            "cell size must be positive, got {cell_size}"
        )));
    }
    let (lo, hi) = mesh.bounds();
    let scale = (0..3)
        .map(|a| hi[a] - lo[a])
        .fold(0.0, f64::max)
        .max(cell_size);
    let dims: [usize; 3] =
        std::array::from_fn(|a| (((hi[a] - lo[a]) / cell_size - 1e-9).ceil() as usize).max(1));
    let mut grid = OccupancyGrid::new(dims, lo, cell_size)?;

    let valid: Vec<&Triangle> = mesh
        .triangles
        .iter()
        .filter(|t| !is_degenerate(t, scale))
        .collect();
    let degenerate_triangles = mesh.triangles.len() - valid.len();
    if degenerate_triangles > 0 {
        log::warn!("skipped {degenerate_triangles} degenerate triangles");
    }
    let watertight = is_watertight(&valid);
    if !watertight {
        log::warn!("mesh is not watertight; voxelizing its surface only");
    }

    let [nx, ny, _] = dims;
    let slab = nx * ny;
    if watertight {
        // bucket triangles by the (j, k) rows their YZ bounds touch
        let mut rows: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (ti, t) in valid.iter().enumerate() {
            let cell_range = |axis: usize| {
                let vals = t.0.map(|p| (p[axis] - lo[axis]) / cell_size - 0.5);
                let a = vals
                    .iter()
                    .cloned()
                    .fold(f64::INFINITY, f64::min)
                    .floor()
                    .max(0.0) as usize;
                let b = vals
                    .iter()
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max)
                    .ceil()
                    .max(0.0) as usize;
                a..=b.min(dims[axis] - 1)
            };
            for j in cell_range(1) {
                for k in cell_range(2) {
                    rows.entry((j, k)).or_default().push(ti);
                }
            }
        }
        // fixed off-lattice jitter keeps rays off shared edges and vertices
        let (jy, jz) = (1.234_567e-7 * cell_size, 2.345_678e-7 * cell_size);
        grid.occupied
            .par_chunks_mut(slab)
            .enumerate()
            .for_each(|(k, plane)| {
                let z0 = lo[2] + (k as f64 + 0.5) * cell_size + jz;
                let mut xs = Vec::new();
                for j in 0..ny {
                    let Some(tris) = rows.get(&(j, k)) else {
                        continue;
                    };
                    let y0 = lo[1] + (j as f64 + 0.5) * cell_size + jy;
                    xs.clear();
                    xs.extend(
                        tris.iter()
                            .filter_map(|&ti| ray_crossing(valid[ti], y0, z0)),
                    );
                    xs.sort_unstable_by(f64::total_cmp);
                    for i in 0..nx {
                        let x0 = lo[0] + (i as f64 + 0.5) * cell_size;
                        let right = xs.len() - xs.partition_point(|&x| x <= x0);
                        if right % 2 == 1 {
                            plane[j * nx + i] = true;
                        }
                    }
                }
            });
    }

    // cells touched by the surface. Triangles are nudged a hair along their
    // inward normal so a face lying on a cell boundary claims only the cell
    // on the solid side.
    let half = [0.5 * cell_size; 3];
    let nudge = 1e-6 * cell_size;
    let surface: Vec<usize> = valid
        .par_iter()
        .flat_map_iter(|t| {
            let [a, b, c] = t.0;
            let n = cross(sub(b, a), sub(c, a));
            let len = norm(n);
            let tri =
                t.0.map(|p| std::array::from_fn(|i| p[i] - nudge * n[i] / len));
            let idx_lo: [usize; 3] = std::array::from_fn(|a| {
                let m = tri.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min);
                (((m - lo[a]) / cell_size).floor().max(0.0) as usize).min(dims[a] - 1)
            });
            let idx_hi: [usize; 3] = std::array::from_fn(|a| {
                let m = tri.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max);
                (((m - lo[a]) / cell_size).floor().max(0.0) as usize).min(dims[a] - 1)
            });
            let mut hits = Vec::new();
            for k in idx_lo[2]..=idx_hi[2] {
                for j in idx_lo[1]..=idx_hi[1] {
                    for i in idx_lo[0]..=idx_hi[0] {
                        let c = std::array::from_fn(|a| {
                            lo[a] + ([i, j, k][a] as f64 + 0.5) * cell_size
                        });
                        if triangle_box_overlap(c, half, &tri) {
                            hits.push((k * ny + j) * nx + i);
                        }
                    }
                }
            }
            hits
        })
        .collect();
    for idx in surface {
        grid.occupied[idx] = true;
    }

    Ok(MeshVoxelization {
        grid,
        degenerate_triangles,
        watertight,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleRule {
    /// Uniform scale matching the equivalent diameter of the bottom slab.
    GearBaseDiameter,
    /// Uniform scale equal to the mean of the per-axis spread ratios.
    AstmMeanAxis,
    Explicit([f64; 3]),
}

impl ScaleRule {
    /// Parses `gear_base_diameter`, `astm_mean_axis` or `explicit(sx,sy,sz)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "gear_base_diameter" => return Ok(Self::GearBaseDiameter),
            "astm_mean_axis" => return Ok(Self::AstmMeanAxis),
            _ => {}
        }
        let inner = s
            .strip_prefix("explicit(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::Config(format!("unknown scale rule `{s}`")))?;
        let vals: Vec<f64> = inner
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("scale rule `{s}`: {e}")))?;
        match vals[..] {
            [x, y, z] if [x, y, z].iter().all(|v| *v > 0.0 && v.is_finite()) => {
                Ok(Self::Explicit([x, y, z]))
            }
            _ => Err(Error::Config(format!(
                "scale rule `{s}` needs three positive factors"
            ))),
        }
    }
}

/// Portion of the height treated as the base of a part.
const BASE_SLAB_FRACTION: f64 = 0.05;

fn centroid(points: &[Vec3]) -> Vec3 {
    let n = points.len() as f64;
    let s = points.iter().fold([0.0; 3], |acc, p| {
        [acc[0] + p[0], acc[1] + p[1], acc[2] + p[2]]
    });
    s.map(|v| v / n)
}

fn std_dev(points: &[Vec3], c: Vec3) -> Vec3 {
    let n = points.len() as f64;
    let s = points.iter().fold([0.0; 3], |acc, p| {
        std::array::from_fn(|a| acc[a] + (p[a] - c[a]).powi(2))
    });
    s.map(|v| (v / n).sqrt())
}

/// Diameter of the disk with the same second moment as the bottom slab.
fn base_diameter(points: &[Vec3]) -> f64 {
    let (z_lo, z_hi) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p[2]), hi.max(p[2]))
        });
    let cut = z_lo + BASE_SLAB_FRACTION * (z_hi - z_lo);
    let base: Vec<Vec3> = points.iter().filter(|p| p[2] <= cut).copied().collect();
    let sd = std_dev(&base, centroid(&base));
    // a filled disk of diameter D has per-axis variance D^2 / 16
    4.0 * (0.5 * (sd[0].powi(2) + sd[1].powi(2))).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub cloud: PointCloud,
    pub scale: [f64; 3],
    pub translation: [f64; 3],
}

/// Scales the cloud about its centroid according to `rule`, then moves it so
/// its centroid coincides with the centroid of the reference cell centers.
pub fn align_and_scale(
    cloud: &PointCloud,
    reference: &OccupancyGrid,
    rule: ScaleRule,
) -> Result<Alignment> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput(
            "reconstructed cloud has no points".into(),
        ));
    }
    let refs: Vec<Vec3> = reference
        .occupied_cells()
        .into_iter()
        .map(|c| reference.cell_center(c))
        .collect();
    if refs.is_empty() {
        return Err(Error::EmptyInput(
            "reference grid has no occupied cells".into(),
        ));
    }
    let pts: Vec<Vec3> = cloud.points.iter().map(|p| [p.x, p.y, p.z]).collect();
    let (c_cloud, c_ref) = (centroid(&pts), centroid(&refs));

    let scale = match rule {
        ScaleRule::Explicit(s) => s,
        ScaleRule::AstmMeanAxis => {
            let (sc, sr) = (std_dev(&pts, c_cloud), std_dev(&refs, c_ref));
            if sc.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Degenerate(
                    "cloud has zero extent along an axis".into(),
                ));
            }
            let k = (0..3).map(|a| sr[a] / sc[a]).sum::<f64>() / 3.0;
            [k; 3]
        }
        ScaleRule::GearBaseDiameter => {
            let (dc, dr) = (base_diameter(&pts), base_diameter(&refs));
            if !(dc > 0.0) {
                return Err(Error::Degenerate("cloud base has zero extent".into()));
            }
            [dr / dc; 3]
        }
    };
    let translation: Vec3 = std::array::from_fn(|a| c_ref[a] - c_cloud[a]);
    let moved = cloud
        .points
        .iter()
        .map(|p| {
            let q: Vec3 =
                std::array::from_fn(|a| c_ref[a] + scale[a] * ([p.x, p.y, p.z][a] - c_cloud[a]));
            CloudPoint::new(q[0], q[1], q[2], p.weight)
        })
        .collect();
    Ok(Alignment {
        cloud: moved,
        scale,
        translation,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Revoxelized {
    pub grid: OccupancyGrid,
    pub out_of_bounds: usize,
}

/// Occupies every template cell that contains at least one point. Points
/// outside the template are counted, not fatal.
pub fn revoxelize_cloud(cloud: &PointCloud, template: &OccupancyGrid) -> Revoxelized {
    let mut grid = template.empty_like();
    let mut out_of_bounds = 0;
    for p in &cloud.points {
        match grid.in_bounds(grid.cell_of([p.x, p.y, p.z])) {
            Some(c) => grid.set(c, true),
            None => out_of_bounds += 1,
        }
    }
    if out_of_bounds > 0 {
        log::warn!("{out_of_bounds} points fell outside the reference grid");
    }
    Revoxelized {
        grid,
        out_of_bounds,
    }
}

/// Tries integer cell shifts within `radius` on every axis and returns the
/// shifted cloud with the most true positives. Ties keep the smaller shift.
pub fn refine_translation(
    cloud: &PointCloud,
    reference: &OccupancyGrid,
    radius: i32,
) -> Result<(PointCloud, [i32; 3])> {
    let h = reference.cell_size();
    let mut shifts = Vec::new();
    for dz in -radius..=radius {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                shifts.push([dx, dy, dz]);
            }
        }
    }
    shifts.sort_by_key(|s| s.iter().map(|v| v.abs()).sum::<i32>());
    let shifted = |s: [i32; 3]| -> PointCloud {
        cloud
            .points
            .iter()
            .map(|p| {
                CloudPoint::new(
                    p.x + s[0] as f64 * h,
                    p.y + s[1] as f64 * h,
                    p.z + s[2] as f64 * h,
                    p.weight,
                )
            })
            .collect()
    };
    let scores: Vec<u64> = shifts
        .par_iter()
        .map(|&s| {
            let rec = revoxelize_cloud(&shifted(s), reference).grid;
            compare_voxels(reference, &rec).map(|c| c.report.true_pos)
        })
        .collect::<Result<_>>()?;
    let best = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| shifts[i])
        .unwrap_or([0; 3]);
    Ok((shifted(best), best))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub reference_count: u64,
    pub percent_true_pos: f64,
    pub percent_false_pos: f64,
    pub percent_false_neg: f64,
}

impl EvaluationReport {
    /// Report from raw counts; the reference count is `tp + fn`.
    pub fn from_counts(true_pos: u64, false_pos: u64, false_neg: u64) -> Result<Self> {
        let reference_count = true_pos + false_neg;
        if reference_count == 0 {
            return Err(Error::EmptyInput("reference has no occupied cells".into()));
        }
        let pct = |v: u64| v as f64 / reference_count as f64 * 100.0;
        Ok(Self {
            true_pos,
            false_pos,
            false_neg,
            reference_count,
            percent_true_pos: pct(true_pos),
            percent_false_pos: pct(false_pos),
            percent_false_neg: pct(false_neg),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub report: EvaluationReport,
    pub true_pos_cloud: PointCloud,
    pub false_pos_cloud: PointCloud,
    pub false_neg_cloud: PointCloud,
}

/// Cell-by-cell classification of `reconstructed` against `reference`.
pub fn compare_voxels(
    reference: &OccupancyGrid,
    reconstructed: &OccupancyGrid,
) -> Result<Comparison> {
    if !reference.same_frame(reconstructed) {
        return Err(Error::Incompatible(
            "reference and reconstruction use different grids".into(),
        ));
    }
    let mut clouds = [Vec::new(), Vec::new(), Vec::new()];
    for (idx, (&r, &c)) in reference
        .occupied
        .iter()
        .zip(&reconstructed.occupied)
        .enumerate()
    {
        let class = match (r, c) {
            (true, true) => 0,
            (false, true) => 1,
            (true, false) => 2,
            (false, false) => continue,
        };
        let p = reference.cell_center(reference.unindex(idx));
        clouds[class].push(CloudPoint::new(p[0], p[1], p[2], 1));
    }
    let [tp, fp, fn_] = clouds;
    let report = EvaluationReport::from_counts(tp.len() as u64, fp.len() as u64, fn_.len() as u64)?;
    Ok(Comparison {
        report,
        true_pos_cloud: PointCloud::new(tp),
        false_pos_cloud: PointCloud::new(fp),
        false_neg_cloud: PointCloud::new(fn_),
    })
}
