//! Synthetic print traces with known ground truth.
//!
//! Each layer is scanned row by row in alternating directions along the
//! seesaw axis. The galvanometers dwell on every solid cell center for a few
//! samples with the laser on. Neighboring solid cells of a row are joined by
//! a short ramp with the laser still on; every other move is a laser-off
//! transit whose length grows with the distance. Layers are separated by a
//! laser-off gap of fixed length.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Matrix2;
use crate::grid::{RasterSpec, VoxelGrid, VoxelKey};
use crate::trace_io::SignalTrace;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Forward XY distortion `M (p - c) + c` applied to galvanometer volts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct XyDistortion {
    pub matrix: Matrix2,
    pub center: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub sample_rate_hz: f64,
    pub raster_size_volts: f64,
    /// Dwell per solid cell.
    pub samples_per_cell: usize,
    /// Samples per cell of travel on ramps and transits.
    pub ramp_samples_per_cell: usize,
    pub seesaw_axis: Axis,
    /// Laser-off samples between layers. Should exceed the segmentation
    /// threshold used downstream.
    pub layer_gap_samples: usize,
    pub noise_sigma_volts: f64,
    pub laser_on_volts: f64,
    pub laser_off_volts: f64,
    /// Per-sample probability of a one-sample laser level flip inside a layer.
    pub spike_rate: f64,
    pub xy_distortion: Option<XyDistortion>,
    /// Printed layers per model layer.
    pub z_stretch: Option<f64>,
    /// Dwell varies uniformly by up to this many samples.
    pub timing_jitter_samples: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 20_000.0,
            raster_size_volts: 0.0025,
            samples_per_cell: 4,
            ramp_samples_per_cell: 2,
            seesaw_axis: Axis::X,
            layer_gap_samples: 2000,
            noise_sigma_volts: 0.0,
            laser_on_volts: 2.5,
            laser_off_volts: 0.5,
            spike_rate: 0.0,
            xy_distortion: None,
            z_stretch: None,
            timing_jitter_samples: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        RasterSpec::new(self.raster_size_volts)?;
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return fail("sample rate must be positive");
        }
        if self.samples_per_cell == 0 || self.layer_gap_samples == 0 {
            return fail("samples_per_cell and layer_gap_samples must be positive");
        }
        if !(self.laser_on_volts > self.laser_off_volts) {
            return fail("laser_on_volts must exceed laser_off_volts");
        }
        if !(self.noise_sigma_volts >= 0.0 && self.noise_sigma_volts.is_finite()) {
            return fail("noise sigma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.spike_rate) {
            return fail("spike rate must be a probability");
        }
        if let Some(s) = self.z_stretch {
            if !(s > 0.0 && s.is_finite()) {
                return fail("z stretch must be positive");
            }
        }
        if let Some(d) = &self.xy_distortion {
            if crate::geometry::invert2(&d.matrix).is_err() {
                return fail("xy distortion matrix is singular");
            }
        }
        Ok(())
    }

    fn volts(&self, cell: f64) -> f64 {
        (cell + 0.5) * self.raster_size_volts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub trace: SignalTrace,
    /// Occupied cells per printed layer, one hit each, without distortion.
    pub ground_truth: VoxelGrid,
}

/// Visiting order of one layer: rows across the seesaw axis, alternating
/// direction. Returns (x, y) cell indices.
fn scan_order(cells: &[(i32, i32)], axis: Axis) -> Vec<(i32, i32)> {
    // (row, along)
    let mut rc: Vec<(i32, i32)> = cells
        .iter()
        .map(|&(x, y)| match axis {
            Axis::X => (y, x),
            Axis::Y => (x, y),
        })
        .collect();
    rc.sort_unstable();
    let mut out = Vec::with_capacity(rc.len());
    for (row_idx, row) in rc.chunk_by(|a, b| a.0 == b.0).enumerate() {
        let mut row = row.to_vec();
        if row_idx % 2 == 1 {
            row.reverse();
        }
        out.extend(row.into_iter().map(|(r, a)| match axis {
            Axis::X => (a, r),
            Axis::Y => (r, a),
        }));
    }
    out
}

fn same_row_neighbors(a: (i32, i32), b: (i32, i32), axis: Axis) -> bool {
    match axis {
        Axis::X => a.1 == b.1 && (a.0 - b.0).abs() == 1,
        Axis::Y => a.0 == b.0 && (a.1 - b.1).abs() == 1,
    }
}

fn cell_distance(a: (i32, i32), b: (i32, i32)) -> f64 {
    ((a.0 - b.0) as f64).hypot((a.1 - b.1) as f64)
}

#[derive(Default)]
struct Chunk {
    laser: Vec<f64>,
    gx: Vec<f64>,
    gy: Vec<f64>,
    /// Samples eligible for spikes.
    spike_span: usize,
}

impl Chunk {
    fn push(&mut self, on: bool, p: [f64; 2], cfg: &SimConfig) {
        self.laser.push(if on {
            cfg.laser_on_volts
        } else {
            cfg.laser_off_volts
        });
        self.gx.push(p[0]);
        self.gy.push(p[1]);
    }

    /// `n` samples strictly between `a` and `b`.
    fn ramp(&mut self, on: bool, a: [f64; 2], b: [f64; 2], n: usize, cfg: &SimConfig) {
        for s in 1..=n {
            let t = s as f64 / (n + 1) as f64;
            self.push(
                on,
                [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])],
                cfg,
            );
        }
    }

    fn hold(&mut self, on: bool, p: [f64; 2], n: usize, cfg: &SimConfig) {
        for _ in 0..n {
            self.push(on, p, cfg);
        }
    }

    fn finish(mut self, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Self {
        if cfg.spike_rate > 0.0 {
            for v in &mut self.laser[..self.spike_span] {
                if rng.random::<f64>() < cfg.spike_rate {
                    *v = if *v == cfg.laser_on_volts {
                        cfg.laser_off_volts
                    } else {
                        cfg.laser_on_volts
                    };
                }
            }
        }
        if let Some(d) = &cfg.xy_distortion {
            for (x, y) in self.gx.iter_mut().zip(self.gy.iter_mut()) {
                let (dx, dy) = (*x - d.center[0], *y - d.center[1]);
                *x = d.matrix[0][0] * dx + d.matrix[0][1] * dy + d.center[0];
                *y = d.matrix[1][0] * dx + d.matrix[1][1] * dy + d.center[1];
            }
        }
        if cfg.noise_sigma_volts > 0.0 {
            let normal = Normal::new(0.0, cfg.noise_sigma_volts).expect("sigma validated");
            for ch in [&mut self.laser, &mut self.gx, &mut self.gy] {
                for v in ch.iter_mut() {
                    *v += normal.sample(rng);
                }
            }
        }
        self
    }
}

fn layer_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Synthesizes the trace of printing `model` and returns it with the ground
/// truth occupancy in printed-layer space. Deterministic for a given seed.
pub fn simulate_print_trace(model: &VoxelGrid, cfg: &SimConfig, seed: u64) -> Result<SimOutput> {
    cfg.validate()?;
    if model.is_empty() {
        return Err(Error::EmptyInput("model has no occupied cells".into()));
    }
    let nz = model.layer_count() as usize;
    let mut by_layer: Vec<Vec<(i32, i32)>> = vec![Vec::new(); nz];
    for (k, _) in model.iter() {
        by_layer[k.layer as usize].push((k.x, k.y));
    }
    if let Some(l) = by_layer.iter().position(Vec::is_empty) {
        return Err(Error::Degenerate(format!("model layer {l} has no cells")));
    }

    let stretch = cfg.z_stretch.unwrap_or(1.0);
    let printed = ((nz as f64 * stretch).round() as usize).max(1);
    let model_layer = |k: usize| (((k as f64) / stretch).floor() as usize).min(nz - 1);
    let paths: Vec<Vec<(i32, i32)>> = (0..nz)
        .map(|l| scan_order(&by_layer[l], cfg.seesaw_axis))
        .collect();
    let pos = |c: (i32, i32)| [cfg.volts(c.0 as f64), cfg.volts(c.1 as f64)];

    let chunks: Vec<Chunk> = (0..printed)
        .into_par_iter()
        .map(|k| {
            let mut rng = layer_rng(seed, k as u64 + 1);
            let path = &paths[model_layer(k)];
            let mut c = Chunk::default();
            let j = cfg.timing_jitter_samples as i64;
            for (i, &cell) in path.iter().enumerate() {
                if i > 0 {
                    let prev = path[i - 1];
                    if same_row_neighbors(prev, cell, cfg.seesaw_axis) {
                        c.ramp(true, pos(prev), pos(cell), cfg.ramp_samples_per_cell, cfg);
                    } else {
                        let n = ((cell_distance(prev, cell).ceil() as usize)
                            * cfg.ramp_samples_per_cell)
                            .max(1);
                        c.ramp(false, pos(prev), pos(cell), n, cfg);
                    }
                }
                let dwell = if j > 0 {
                    (cfg.samples_per_cell as i64 + rng.random_range(-j..=j)).max(1) as usize
                } else {
                    cfg.samples_per_cell
                };
                c.hold(true, pos(cell), dwell, cfg);
            }
            c.spike_span = c.laser.len();

            // gap to the next printed layer, including the transit
            let last = *path.last().expect("layers are non-empty");
            let next = if k + 1 < printed {
                Some(paths[model_layer(k + 1)][0])
            } else {
                None
            };
            if let Some(next) = next {
                let g = cfg.layer_gap_samples;
                let transit = ((cell_distance(last, next).ceil() as usize)
                    * cfg.ramp_samples_per_cell)
                    .min(g);
                let before = (g - transit) / 2;
                c.hold(false, pos(last), before, cfg);
                c.ramp(false, pos(last), pos(next), transit, cfg);
                c.hold(false, pos(next), g - transit - before, cfg);
            }
            c.finish(cfg, &mut rng)
        })
        .collect();

    let first = pos(paths[model_layer(0)][0]);
    let last = pos(*paths[model_layer(printed - 1)].last().expect("non-empty"));
    let mut lead_in = Chunk::default();
    lead_in.hold(false, first, cfg.samples_per_cell, cfg);
    let lead_in = lead_in.finish(cfg, &mut layer_rng(seed, 0));
    let mut lead_out = Chunk::default();
    lead_out.hold(false, last, cfg.samples_per_cell, cfg);
    let lead_out = lead_out.finish(cfg, &mut layer_rng(seed, printed as u64 + 1));

    let total: usize =
        chunks.iter().map(|c| c.laser.len()).sum::<usize>() + 2 * cfg.samples_per_cell;
    let (mut laser, mut gx, mut gy) = (
        Vec::with_capacity(total),
        Vec::with_capacity(total),
        Vec::with_capacity(total),
    );
    for c in std::iter::once(&lead_in)
        .chain(&chunks)
        .chain(std::iter::once(&lead_out))
    {
        laser.extend_from_slice(&c.laser);
        gx.extend_from_slice(&c.gx);
        gy.extend_from_slice(&c.gy);
    }
    let trace = SignalTrace::new(cfg.sample_rate_hz, laser, gx, gy)?;

    let raster = RasterSpec::new(cfg.raster_size_volts)?;
    let ground_truth = VoxelGrid::from_cells(
        raster,
        printed as u32,
        (0..printed).flat_map(|k| {
            by_layer[model_layer(k)]
                .iter()
                .map(move |&(x, y)| (VoxelKey::new(k as u32, x, y), 1))
        }),
    )?;
    Ok(SimOutput {
        trace,
        ground_truth,
    })
}

/// Procedural test parts, sized in cells and layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Box {
        nx: u32,
        ny: u32,
        nz: u32,
    },
    /// Upright cylinder: diameter in cells, height in layers.
    Cylinder {
        diameter: u32,
        height: u32,
    },
    /// Upright spur gear outline extruded over `height` layers.
    Gear {
        teeth: u32,
        diameter: u32,
        height: u32,
    },
    /// Round tensile specimen lying on its side: wide grips at both ends and
    /// a thinner gauge section, axis rotated by `angle_rad` in XY.
    AstmBar {
        length: u32,
        diameter: u32,
        angle_rad: f64,
    },
}

fn parse_args(s: &str, name: &str) -> Option<Result<Vec<f64>>> {
    let rest = s.strip_prefix(name)?;
    if rest.is_empty() {
        return Some(Ok(Vec::new()));
    }
    let inner = rest.strip_prefix('(')?.strip_suffix(')')?;
    Some(
        inner
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("shape `{s}`: {e}")))
            })
            .collect(),
    )
}

fn positive_int(v: f64, what: &str) -> Result<u32> {
    if v >= 1.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
        Ok(v as u32)
    } else {
        Err(Error::Config(format!(
            "{what} must be a positive integer, got {v}"
        )))
    }
}

impl Shape {
    /// Parses `box(nx,ny,nz)`, `cylinder(d,h)`, `gear(n)`, `gear(n,d,h)`,
    /// `astm_bar` or `astm_bar(len,diam,angle_rad)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("unknown shape `{s}`"));
        let arity = |want: &str| Error::Config(format!("shape `{s}` expects {want}"));
        if let Some(args) = parse_args(s, "box") {
            return match args?[..] {
                [x, y, z] => Ok(Shape::Box {
                    nx: positive_int(x, "nx")?,
                    ny: positive_int(y, "ny")?,
                    nz: positive_int(z, "nz")?,
                }),
                _ => Err(arity("(nx,ny,nz)")),
            };
        }
        if let Some(args) = parse_args(s, "cylinder") {
            return match args?[..] {
                [d, h] => Ok(Shape::Cylinder {
                    diameter: positive_int(d, "diameter")?,
                    height: positive_int(h, "height")?,
                }),
                _ => Err(arity("(diameter,height)")),
            };
        }
        if let Some(args) = parse_args(s, "gear") {
            let args = args?;
            let (n, d, h) = match args[..] {
                [n] => (n, 40.0, 20.0),
                [n, d, h] => (n, d, h),
                _ => return Err(arity("(teeth) or (teeth,diameter,height)")),
            };
            return Ok(Shape::Gear {
                teeth: positive_int(n, "teeth")?,
                diameter: positive_int(d, "diameter")?,
                height: positive_int(h, "height")?,
            });
        }
        if let Some(args) = parse_args(s, "astm_bar") {
            let args = args?;
            let (l, d, a) = match args[..] {
                [] => (60.0, 10.0, 0.0),
                [l, d, a] => (l, d, a),
                _ => return Err(arity("no arguments or (length,diameter,angle_rad)")),
            };
            if !a.is_finite() {
                return Err(Error::Config("angle must be finite".into()));
            }
            return Ok(Shape::AstmBar {
                length: positive_int(l, "length")?,
                diameter: positive_int(d, "diameter")?,
                angle_rad: a,
            });
        }
        Err(bad())
    }

    /// Voxel model of the shape, one hit per cell.
    pub fn voxelize(&self, raster: RasterSpec) -> Result<VoxelGrid> {
        let mut cells = Vec::new();
        let layers = match *self {
            Shape::Box { nx, ny, nz } => {
                for l in 0..nz {
                    for x in 0..nx as i32 {
                        for y in 0..ny as i32 {
                            cells.push(VoxelKey::new(l, x, y));
                        }
                    }
                }
                nz
            }
            Shape::Cylinder { diameter, height } => {
                let r = diameter as f64 / 2.0;
                for l in 0..height {
                    disk_cells(diameter, |dx, dy| dx.hypot(dy) <= r, l, &mut cells);
                }
                height
            }
            Shape::Gear {
                teeth,
                diameter,
                height,
            } => {
                let tip = diameter as f64 / 2.0;
                let root = 0.8 * tip;
                let inside = |dx: f64, dy: f64| {
                    let r = dx.hypot(dy);
                    let phase =
                        (dy.atan2(dx) / std::f64::consts::TAU * teeth as f64).rem_euclid(1.0);
                    r <= if phase < 0.5 { tip } else { root }
                };
                for l in 0..height {
                    disk_cells(diameter, inside, l, &mut cells);
                }
                height
            }
            Shape::AstmBar {
                length,
                diameter,
                angle_rad,
            } => {
                let (len, rad) = (length as f64, diameter as f64 / 2.0);
                let (s, c) = angle_rad.sin_cos();
                let grip = 0.2 * len;
                let reach = (len / 2.0).hypot(rad).ceil() as i32 + 1;
                for l in 0..diameter {
                    let dz = l as f64 + 0.5 - rad;
                    for x in -reach..=reach {
                        for y in -reach..=reach {
                            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                            let u = px * c + py * s;
                            let v = -px * s + py * c;
                            if u.abs() > len / 2.0 {
                                continue;
                            }
                            let r = if u.abs() > len / 2.0 - grip {
                                rad
                            } else {
                                0.75 * rad
                            };
                            if v * v + dz * dz <= r * r {
                                cells.push(VoxelKey::new(l, x, y));
                            }
                        }
                    }
                }
                diameter
            }
        };
        let grid = VoxelGrid::from_cells(raster, layers, cells.into_iter().map(|k| (k, 1)))?;
        if grid.is_empty() {
            return Err(Error::Degenerate(format!("shape {self:?} has no cells")));
        }
        Ok(grid)
    }
}

fn disk_cells(
    diameter: u32,
    inside: impl Fn(f64, f64) -> bool,
    layer: u32,
    out: &mut Vec<VoxelKey>,
) {
    let r = diameter as f64 / 2.0;
    for x in 0..diameter as i32 {
        for y in 0..diameter as i32 {
            if inside(x as f64 + 0.5 - r, y as f64 + 0.5 - r) {
                out.push(VoxelKey::new(layer, x, y));
            }
        }
    }
}
