//! Stage functions and the end-to-end run. Each stage's output can be written
//! to a numbered artifact and read back, so any stage can be rerun alone.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use powerscan_core::calibration::{derive_raster_size, single_hit_fraction, SwingMeasurement};
use powerscan_core::geometry::{
    apply_xy_correction, apply_z_correction, derive_xy_distortion, derive_z_factor, fit_axis_line,
    fit_ellipse_pca, proportion_correction, DistortionModel, RatioKind,
};
use powerscan_core::rasterizer::{differential_voxelization, rasterize_layers};
use powerscan_core::segmentation::{
    layer_statistics, segment_layers, LayerBoundaries, LayerSpan, SegmentationConfig,
};
use powerscan_core::signal_prep::{
    lowpass_filter, normalize_laser, BinaryLaserSignal, FilterSpec, HysteresisThresholds,
};
use powerscan_core::trace_io::{
    load_point_cloud_csv, load_trace_csv, read_metadata, write_point_cloud_csv,
    write_point_cloud_csv_with_metadata, write_trace_csv, TraceSchema,
};
use powerscan_core::voxel_ops::{
    default_middle_layer, fill_gaps, project_columns, prune, FillStrategy, Neighborhood,
    ProjectionDirection,
};
use powerscan_core::{Error, PointCloud, RasterSpec, SignalTrace, VoxelGrid};

use crate::config::{ConfigError, Mode, PipelineConfig, Proportion, XyCorrection, ZCorrection};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Load,
    Preprocess,
    Segment,
    Calibrate,
    Rasterize,
    Diff,
    Prune,
    Fill,
    XyCorrection,
    ZCorrection,
    Proportion,
    Export,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Load => "load",
            Stage::Preprocess => "preprocess",
            Stage::Segment => "segment",
            Stage::Calibrate => "calibrate",
            Stage::Rasterize => "rasterize",
            Stage::Diff => "diff",
            Stage::Prune => "prune",
            Stage::Fill => "fill",
            Stage::XyCorrection => "xy-correction",
            Stage::ZCorrection => "z-correction",
            Stage::Proportion => "proportion",
            Stage::Export => "export",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Error,
    },
}

impl PipelineError {
    /// 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> u8 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Stage { source, .. } if source.is_config() => 2,
            PipelineError::Stage { .. } => 3,
        }
    }
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError>;
}

impl<T> AtStage<T> for powerscan_core::Result<T> {
    fn at(self, stage: Stage) -> Result<T, PipelineError> {
        self.map_err(|source| PipelineError::Stage { stage, source })
    }
}

pub fn trace_schema(cfg: &PipelineConfig) -> TraceSchema {
    TraceSchema {
        laser: cfg.laser_column.clone(),
        galvo_x: cfg.galvo_x_column.clone(),
        galvo_y: cfg.galvo_y_column.clone(),
        sample_rate_hz: cfg.sample_rate_hz,
    }
}

/// Binary laser state with low-pass filtered galvanometer channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub sample_rate_hz: f64,
    pub laser: BinaryLaserSignal,
    pub galvo_x: Vec<f64>,
    pub galvo_y: Vec<f64>,
}

const STATE_COLUMN: &str = "laser_state";

fn preprocessed_schema() -> TraceSchema {
    TraceSchema {
        laser: STATE_COLUMN.into(),
        ..TraceSchema::default()
    }
}

impl Preprocessed {
    pub fn save(&self, path: &Path) -> powerscan_core::Result<()> {
        let state = (0..self.laser.len())
            .map(|i| if self.laser.is_on(i) { 1.0 } else { 0.0 })
            .collect();
        let t = SignalTrace::new(
            self.sample_rate_hz,
            state,
            self.galvo_x.clone(),
            self.galvo_y.clone(),
        )?;
        write_trace_csv(&t, path, &preprocessed_schema())
    }

    pub fn load(path: &Path) -> powerscan_core::Result<Self> {
        let t = load_trace_csv(path, &preprocessed_schema())?;
        Ok(Self {
            sample_rate_hz: t.sample_rate_hz(),
            laser: BinaryLaserSignal::from_bools(t.laser().iter().map(|&v| v >= 0.5)),
            galvo_x: t.galvo_x().to_vec(),
            galvo_y: t.galvo_y().to_vec(),
        })
    }
}

pub fn preprocess(
    trace: &SignalTrace,
    cfg: &PipelineConfig,
) -> powerscan_core::Result<Preprocessed> {
    let th = HysteresisThresholds::new(cfg.threshold_on, cfg.threshold_off)?;
    let spec = FilterSpec::new(
        cfg.filter_order,
        cfg.filter_cutoff_hz,
        trace.sample_rate_hz(),
    )?;
    let laser = normalize_laser(trace.laser(), &th)?;
    let (galvo_x, galvo_y) = rayon::join(
        || lowpass_filter(trace.galvo_x(), &spec),
        || lowpass_filter(trace.galvo_y(), &spec),
    );
    Ok(Preprocessed {
        sample_rate_hz: trace.sample_rate_hz(),
        laser,
        galvo_x: galvo_x?,
        galvo_y: galvo_y?,
    })
}

pub fn segment(pre: &Preprocessed, cfg: &PipelineConfig) -> LayerBoundaries {
    segment_layers(
        &pre.laser,
        &SegmentationConfig {
            off_run_threshold: cfg.off_run_threshold,
        },
    )
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentRow {
    layer: usize,
    start_sample: usize,
    end_sample: usize,
    duration_s: f64,
    gap_before_s: f64,
}

/// Writes one row per layer; layers are numbered from 1 in the file.
pub fn save_segments(
    b: &LayerBoundaries,
    sample_rate_hz: f64,
    path: &Path,
) -> powerscan_core::Result<()> {
    let stats = layer_statistics(b, sample_rate_hz);
    let durations = stats.durations_seconds();
    let gaps = stats.gaps_seconds();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for (i, span) in b.layers.iter().enumerate() {
        w.serialize(SegmentRow {
            layer: i + 1,
            start_sample: span.start,
            end_sample: span.end,
            duration_s: durations[i],
            gap_before_s: if i == 0 { 0.0 } else { gaps[i - 1] },
        })
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_segments(path: &Path) -> powerscan_core::Result<LayerBoundaries> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut layers = Vec::new();
    for row in r.deserialize::<SegmentRow>() {
        let row = row.map_err(|e| csv_err(path, e))?;
        if row.end_sample < row.start_sample {
            return Err(Error::Malformed(format!(
                "layer {} ends before it starts",
                row.layer
            )));
        }
        layers.push(LayerSpan {
            start: row.start_sample,
            end: row.end_sample,
        });
    }
    Ok(LayerBoundaries::new(layers))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let row = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            row,
            message: format!("{}: {other:?}", path.display()),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    /// 1-based.
    pub layer: usize,
    pub layer_count: usize,
    pub max_delta_x: f64,
    pub max_delta_y: f64,
    pub combined: f64,
    pub raster_size: f64,
}

/// Derives the raster size from the galvanometer swing of one layer of the
/// raw trace.
pub fn calibrate(
    trace: &SignalTrace,
    boundaries: &LayerBoundaries,
    cfg: &PipelineConfig,
) -> powerscan_core::Result<CalibrationReport> {
    let n = boundaries.len();
    if n == 0 {
        return Err(Error::EmptyInput("no layers to calibrate on".into()));
    }
    let layer = cfg
        .calibration_layer
        .map(|l| l as usize)
        .unwrap_or(default_middle_layer(n as u32) as usize + 1);
    if layer == 0 || layer > n {
        return Err(Error::Config(format!(
            "calibration_layer {layer} outside 1..={n}"
        )));
    }
    let span = boundaries.layers[layer - 1];
    let spec = FilterSpec::new(
        cfg.filter_order,
        cfg.calibration_cutoff_hz,
        trace.sample_rate_hz(),
    )?;
    let r = span.start..span.end + 1;
    let swing = SwingMeasurement::measure(&trace.galvo_x()[r.clone()], &trace.galvo_y()[r], &spec)?;
    Ok(CalibrationReport {
        layer,
        layer_count: n,
        max_delta_x: swing.max_delta_x,
        max_delta_y: swing.max_delta_y,
        combined: swing.combined,
        raster_size: derive_raster_size(&swing, n)?,
    })
}

pub fn rasterize(
    pre: &Preprocessed,
    b: &LayerBoundaries,
    raster: f64,
) -> powerscan_core::Result<VoxelGrid> {
    rasterize_layers(
        &pre.laser,
        &pre.galvo_x,
        &pre.galvo_y,
        b,
        RasterSpec::new(raster)?,
    )
}

pub fn save_grid(grid: &VoxelGrid, path: &Path) -> powerscan_core::Result<()> {
    write_point_cloud_csv_with_metadata(
        &grid.to_cloud(),
        path,
        &[
            ("raster_size_volts", grid.raster().size().to_string()),
            ("layer_count", grid.layer_count().to_string()),
        ],
    )
}

/// Reads a grid written by [`save_grid`]; `raster` stands in for missing
/// metadata.
pub fn load_grid(path: &Path, raster: f64) -> powerscan_core::Result<VoxelGrid> {
    let meta = read_metadata(path)?;
    let num = |key: &str| -> powerscan_core::Result<Option<f64>> {
        meta.get(key)
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Parse {
                    row: 1,
                    message: format!("bad {key} metadata `{v}`"),
                })
            })
            .transpose()
    };
    let raster = num("raster_size_volts")?.unwrap_or(raster);
    let layers = num("layer_count")?.map(|v| v as u32);
    VoxelGrid::from_cloud(
        &load_point_cloud_csv(path)?,
        RasterSpec::new(raster)?,
        layers,
    )
}

pub fn prune_grid(grid: &VoxelGrid, cfg: &PipelineConfig) -> powerscan_core::Result<VoxelGrid> {
    let hood = if cfg.neighbor_dims == 2 {
        Neighborhood::Planar
    } else {
        Neighborhood::Volumetric
    };
    let out = prune(grid, &cfg.prune_config(), hood)?;
    if out.is_empty() && !grid.is_empty() {
        warn!("pruning removed all {} voxels", grid.len());
    }
    Ok(out)
}

pub fn fill(grid: &VoxelGrid, cfg: &PipelineConfig) -> powerscan_core::Result<VoxelGrid> {
    let dir = match cfg.fill_strategy {
        FillStrategy::None => return Ok(grid.clone()),
        FillStrategy::GearUp => ProjectionDirection::Up,
        FillStrategy::AstmBidirectional => ProjectionDirection::Bidirectional {
            middle_layer: match cfg.middle_layer {
                Some(m) => m - 1,
                None => default_middle_layer(grid.layer_count()),
            },
        },
    };
    let proj = project_columns(grid, dir, cfg.projection_min_hit)?;
    Ok(fill_gaps(grid, &proj))
}

/// Ellipse fitted to the top projection of `grid`, in cell units.
pub fn fit_xy_model(
    grid: &VoxelGrid,
    cfg: &PipelineConfig,
) -> powerscan_core::Result<DistortionModel> {
    let proj = project_columns(grid, ProjectionDirection::Up, cfg.projection_min_hit)?;
    if proj.is_empty() {
        return Err(Error::Degenerate(format!(
            "no column reaches projection_min_hit = {}",
            cfg.projection_min_hit
        )));
    }
    let pts: Vec<[f64; 2]> = proj
        .columns()
        .into_iter()
        .map(|(x, y)| [x as f64, y as f64])
        .collect();
    derive_xy_distortion(&fit_ellipse_pca(&pts)?, cfg.reference_radius)
}

/// Layer-axis factor of an elongated part lying in the build plane.
pub fn fit_z_factor(cloud: &PointCloud) -> powerscan_core::Result<f64> {
    derive_z_factor(cloud, fit_axis_line(&cloud.xy())?)
}

fn file_model(cfg: &PipelineConfig) -> powerscan_core::Result<DistortionModel> {
    let path = cfg
        .distortion_model
        .as_ref()
        .ok_or_else(|| Error::Config("distortion_model path not set".into()))?;
    DistortionModel::load_json(path)
}

pub fn xy_model(grid: &VoxelGrid, cfg: &PipelineConfig) -> powerscan_core::Result<DistortionModel> {
    match cfg.xy_correction {
        XyCorrection::None => Ok(DistortionModel::identity()),
        XyCorrection::Fit => fit_xy_model(grid, cfg),
        XyCorrection::Fixed => {
            let [a, b, c, d] = cfg.xy_inverse_matrix;
            DistortionModel::from_inverse([[a, b], [c, d]], cfg.xy_center)
        }
        XyCorrection::File => file_model(cfg),
    }
}

pub fn z_factor(cloud: &PointCloud, cfg: &PipelineConfig) -> powerscan_core::Result<f64> {
    match cfg.z_correction {
        ZCorrection::None => Ok(1.0),
        ZCorrection::Fixed => Ok(cfg.z_factor),
        ZCorrection::Fit => fit_z_factor(cloud),
        ZCorrection::File => Ok(file_model(cfg)?.z_factor),
    }
}

pub fn proportion(cloud: &PointCloud, cfg: &PipelineConfig) -> powerscan_core::Result<PointCloud> {
    match cfg.proportion {
        Proportion::None => Ok(cloud.clone()),
        Proportion::LengthOverDiameter => proportion_correction(
            cloud,
            cfg.astm_length_over_diameter,
            RatioKind::LengthOverDiameter,
        ),
        Proportion::DiameterOverHeight => proportion_correction(
            cloud,
            cfg.gear_diameter_over_height,
            RatioKind::DiameterOverHeight,
        ),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub seconds: f64,
    pub voxels: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub mode: String,
    pub trace_count: usize,
    pub layer_count: u32,
    pub raster_size: f64,
    pub calibration: Option<CalibrationReport>,
    pub single_hit_fraction: f64,
    pub distortion_model: DistortionModel,
    pub stages: Vec<StageSummary>,
    pub artifacts: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Pruned and filled grid before geometric correction.
    pub grid: VoxelGrid,
    pub cloud: PointCloud,
    pub summary: RunSummary,
}

struct Run<'a> {
    out: Option<&'a Path>,
    artifacts: Vec<PathBuf>,
    stages: Vec<StageSummary>,
    clock: Instant,
}

impl Run<'_> {
    fn path(&self, name: &str) -> Option<PathBuf> {
        self.out.map(|d| d.join(name))
    }

    fn save(
        &mut self,
        stage: Stage,
        name: &str,
        write: impl FnOnce(&Path) -> powerscan_core::Result<()>,
    ) -> Result<(), PipelineError> {
        if let Some(p) = self.path(name) {
            write(&p).at(stage)?;
            self.artifacts.push(p);
        }
        Ok(())
    }

    fn done(&mut self, stage: Stage, voxels: Option<usize>) {
        let seconds = self.clock.elapsed().as_secs_f64();
        info!(
            "{stage}: {seconds:.3}s{}",
            voxels.map(|v| format!(", {v} voxels")).unwrap_or_default()
        );
        self.stages.push(StageSummary {
            stage: stage.to_string(),
            seconds,
            voxels,
        });
        self.clock = Instant::now();
    }
}

fn suffix(i: usize, n: usize) -> String {
    if n > 1 {
        format!("_{}", i + 1)
    } else {
        String::new()
    }
}

/// Loads the configured traces and runs every stage, writing artifacts to
/// `cfg.output_dir`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput, PipelineError> {
    cfg.validate_for_run()?;
    let schema = trace_schema(cfg);
    let traces = cfg
        .traces
        .par_iter()
        .map(|p| load_trace_csv(p, &schema))
        .collect::<powerscan_core::Result<Vec<_>>>()
        .at(Stage::Load)?;
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::io(&cfg.output_dir, e))
        .at(Stage::Export)?;
    run_on_traces(cfg, &traces, Some(&cfg.output_dir))
}

/// Runs every stage on traces already in memory. Artifacts are written only
/// when `out` is given.
pub fn run_on_traces(
    cfg: &PipelineConfig,
    traces: &[SignalTrace],
    out: Option<&Path>,
) -> Result<PipelineOutput, PipelineError> {
    let violations = cfg.validate();
    if !violations.is_empty() {
        return Err(ConfigError::Violations(violations).into());
    }
    match (cfg.mode, traces.len()) {
        (_, 0) => return Err(ConfigError::Violations(vec!["no traces given".into()]).into()),
        (Mode::Simple, n) if n > 1 => {
            return Err(ConfigError::Violations(vec![format!(
                "simple mode takes one trace, got {n}"
            )])
            .into())
        }
        (Mode::Differential, 1) => {
            return Err(ConfigError::Violations(vec![
                "differential mode needs at least two traces".into(),
            ])
            .into())
        }
        _ => {}
    }
    let mut run = Run {
        out,
        artifacts: Vec::new(),
        stages: Vec::new(),
        clock: Instant::now(),
    };
    let n = traces.len();

    let pre: Vec<Preprocessed> = traces
        .par_iter()
        .map(|t| preprocess(t, cfg))
        .collect::<powerscan_core::Result<_>>()
        .at(Stage::Preprocess)?;
    for (i, p) in pre.iter().enumerate() {
        run.save(
            Stage::Preprocess,
            &format!("01_preprocessed{}.csv", suffix(i, n)),
            |path| p.save(path),
        )?;
    }
    run.done(Stage::Preprocess, None);

    let segments: Vec<LayerBoundaries> = pre.par_iter().map(|p| segment(p, cfg)).collect();
    for (i, (b, p)) in segments.iter().zip(&pre).enumerate() {
        if b.is_empty() {
            return Err(Error::EmptyInput(format!(
                "trace {} has no laser activity",
                i + 1
            )))
            .at(Stage::Segment);
        }
        run.save(
            Stage::Segment,
            &format!("02_segments{}.csv", suffix(i, n)),
            |path| save_segments(b, p.sample_rate_hz, path),
        )?;
    }
    run.done(Stage::Segment, None);

    let calibration = if cfg.calibrate {
        let report = calibrate(&traces[0], &segments[0], cfg).at(Stage::Calibrate)?;
        run.save(Stage::Calibrate, "03_calibration.json", |path| {
            write_json(path, &report)
        })?;
        run.done(Stage::Calibrate, None);
        Some(report)
    } else {
        None
    };
    let raster = calibration
        .map(|c| c.raster_size)
        .unwrap_or(cfg.raster_size);

    let grids: Vec<VoxelGrid> = pre
        .par_iter()
        .zip(&segments)
        .map(|(p, b)| rasterize(p, b, raster))
        .collect::<powerscan_core::Result<_>>()
        .at(Stage::Rasterize)?;
    for (i, g) in grids.iter().enumerate() {
        run.save(
            Stage::Rasterize,
            &format!("04_raster{}.csv", suffix(i, n)),
            |path| save_grid(g, path),
        )?;
    }
    run.done(
        Stage::Rasterize,
        Some(grids.iter().map(VoxelGrid::len).sum()),
    );

    let merged = if n > 1 {
        let m = differential_voxelization(&grids).at(Stage::Diff)?;
        run.save(Stage::Diff, "05_merged.csv", |path| save_grid(&m, path))?;
        run.done(Stage::Diff, Some(m.len()));
        m
    } else {
        grids.into_iter().next().expect("one grid")
    };
    let single_hits = single_hit_fraction(&merged);

    let pruned = prune_grid(&merged, cfg).at(Stage::Prune)?;
    if pruned.is_empty() {
        return Err(Error::Degenerate("no voxels survive pruning".into())).at(Stage::Prune);
    }
    run.save(Stage::Prune, "06_pruned.csv", |path| {
        save_grid(&pruned, path)
    })?;
    run.done(Stage::Prune, Some(pruned.len()));

    let filled = fill(&pruned, cfg).at(Stage::Fill)?;
    if cfg.fill_strategy != FillStrategy::None {
        run.save(Stage::Fill, "07_filled.csv", |path| {
            save_grid(&filled, path)
        })?;
        run.done(Stage::Fill, Some(filled.len()));
    }

    let mut model = xy_model(&pruned, cfg).at(Stage::XyCorrection)?;
    let xy = apply_xy_correction(&filled.to_cloud(), &model).at(Stage::XyCorrection)?;
    run.save(Stage::XyCorrection, "09_xy_corrected.csv", |path| {
        write_point_cloud_csv(&xy, path)
    })?;
    run.done(Stage::XyCorrection, Some(xy.len()));

    let k = z_factor(&xy, cfg).at(Stage::ZCorrection)?;
    model.z_factor = k;
    run.save(Stage::XyCorrection, "08_distortion_model.json", |path| {
        model.save_json(path)
    })?;
    let z = apply_z_correction(&xy, k).at(Stage::ZCorrection)?;
    if cfg.z_correction != ZCorrection::None {
        run.save(Stage::ZCorrection, "10_z_corrected.csv", |path| {
            write_point_cloud_csv(&z, path)
        })?;
        run.done(Stage::ZCorrection, Some(z.len()));
    }

    let cloud = proportion(&z, cfg).at(Stage::Proportion)?;
    if cfg.proportion != Proportion::None {
        run.save(Stage::Proportion, "11_proportioned.csv", |path| {
            write_point_cloud_csv(&cloud, path)
        })?;
        run.done(Stage::Proportion, Some(cloud.len()));
    }

    run.save(Stage::Export, "12_reconstruction.csv", |path| {
        write_point_cloud_csv(&cloud, path)
    })?;
    run.save(Stage::Export, "effective_config.cfg", |path| {
        fs::write(path, cfg.to_text()).map_err(|e| Error::io(path, e))
    })?;
    let mut summary = RunSummary {
        mode: format!("{:?}", cfg.mode).to_lowercase(),
        trace_count: n,
        layer_count: filled.layer_count(),
        raster_size: raster,
        calibration,
        single_hit_fraction: single_hits,
        distortion_model: model,
        stages: Vec::new(),
        artifacts: Vec::new(),
    };
    run.done(Stage::Export, Some(cloud.len()));
    if let Some(p) = run.path("summary.json") {
        run.artifacts.push(p.clone());
        summary.stages = run.stages.clone();
        summary.artifacts = run.artifacts.clone();
        write_json(&p, &summary).at(Stage::Export)?;
    } else {
        summary.stages = run.stages;
    }
    Ok(PipelineOutput {
        grid: filled,
        cloud,
        summary,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> powerscan_core::Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Malformed(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
