use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use powerscan_core::calibration::{hit_count_histogram, single_hit_fraction};
use powerscan_core::evaluation::{
    align_and_scale, compare_voxels, refine_translation, revoxelize_cloud, voxelize_mesh, ScaleRule,
};
use powerscan_core::geometry::{
    apply_xy_correction, apply_z_correction, proportion_correction, DistortionModel, RatioKind,
};
use powerscan_core::rasterizer::differential_voxelization;
use powerscan_core::segmentation::layer_statistics;
use powerscan_core::sim::{simulate_print_trace, Axis, Shape, SimConfig, XyDistortion};
use powerscan_core::trace_io::{
    load_point_cloud_csv, load_stl, load_trace_csv, write_point_cloud_csv, write_trace_csv,
    TraceSchema,
};
use powerscan_core::voxel_ops::{fraction_below, gap_stretch_histogram, neighbor_count_histogram};
use powerscan_core::RasterSpec;

use crate::config::{
    parse_override, ConfigError, PipelineConfig, DIFFERENTIAL_PROFILE, SIMPLE_PROFILE,
};
use crate::pipeline::{self, PipelineError, Preprocessed};

#[derive(Debug, Parser)]
#[command(
    name = "powerscan",
    version,
    about = "Reconstruct printed parts from laser power and galvanometer traces"
)]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Profile {
    Simple,
    Differential,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Config file (key = value lines or a JSON object).
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Built-in profile used when no config file is given.
    #[arg(long, value_enum, default_value = "simple")]
    pub profile: Profile,
    /// Override one key, e.g. --set raster_size=0.002. Repeatable.
    #[arg(long = "set", value_parser = parse_override)]
    pub overrides: Vec<(String, String)>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<PipelineConfig, ConfigError> {
        match &self.config {
            Some(p) => PipelineConfig::load(p, &self.overrides),
            None => {
                let text = match self.profile {
                    Profile::Simple => SIMPLE_PROFILE,
                    Profile::Differential => DIFFERENTIAL_PROFILE,
                };
                PipelineConfig::parse_str(text, &self.overrides)
            }
        }
    }

    /// Loads and rejects invalid settings.
    pub fn load_valid(&self) -> Result<PipelineConfig, ConfigError> {
        let cfg = self.load()?;
        let v = cfg.validate();
        if v.is_empty() {
            Ok(cfg)
        } else {
            Err(ConfigError::Violations(v))
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AxisArg {
    X,
    Y,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RatioArg {
    LengthOverDiameter,
    DiameterOverHeight,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a trace from a shape or voxel model.
    Simulate(SimulateArgs),
    /// Threshold the laser channel and low-pass the galvanometer channels.
    Preprocess {
        #[arg(long)]
        trace: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Split a preprocessed trace into layers.
    Segment {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Derive the raster size from the galvanometer swing of one layer.
    Calibrate {
        /// Raw trace.
        #[arg(long)]
        trace: PathBuf,
        /// Segments file; computed from the trace when omitted.
        #[arg(long)]
        segments: Option<PathBuf>,
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Count ON samples per voxel.
    Rasterize {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(long)]
        segments: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Sum the hit counters of several rasterized prints.
    Diff {
        #[arg(short, long, num_args = 2.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Drop rarely hit and isolated voxels.
    Prune {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print grid diagnostics as JSON.
    Stats {
        #[arg(short, long)]
        input: PathBuf,
        /// Segments file for layer timing statistics.
        #[arg(long)]
        segments: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fill unsintered gaps by column projection.
    Fill {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fit a distortion model: XY from a round part, Z from an elongated one.
    FitDistortion {
        /// Grid of a part with a circular footprint.
        #[arg(long)]
        xy_grid: Option<PathBuf>,
        /// Grid or cloud of a part lying along its axis.
        #[arg(long)]
        z_input: Option<PathBuf>,
        #[arg(short, long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Apply a distortion model to a cloud.
    Correct {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        model: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Leave z untouched.
        #[arg(long)]
        skip_z: bool,
    },
    /// Scale a cloud to a target aspect ratio.
    Proportion {
        #[arg(short, long)]
        input: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        kind: RatioArg,
        /// Defaults to the configured ratio for `kind`.
        #[arg(long)]
        target: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare a reconstructed cloud with a reference mesh.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(short, long)]
        input: PathBuf,
        /// Cell size; defaults to `evaluation_grid`.
        #[arg(long)]
        grid: Option<f64>,
        /// gear_base_diameter, astm_mean_axis or explicit(sx,sy,sz).
        #[arg(long, default_value = "gear_base_diameter")]
        scale_rule: String,
        /// Search integer cell shifts up to this radius after alignment.
        #[arg(long, default_value_t = 0)]
        refine: i32,
        /// Writes report.json and the TP/FP/FN clouds.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Run every stage from the configured traces.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check a configuration and list every violation.
    Validate {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// box(nx,ny,nz), cylinder(d,h), gear(n[,d,h]) or astm_bar[(len,d,angle)].
    #[arg(long, conflicts_with = "model", required_unless_present = "model")]
    pub shape: Option<String>,
    /// Voxel grid CSV to print instead of a shape.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
    /// Where to write the printed ground-truth grid.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.0025)]
    pub raster: f64,
    #[arg(long, default_value_t = 20_000.0)]
    pub sample_rate: f64,
    #[arg(long, default_value_t = 4)]
    pub samples_per_cell: usize,
    #[arg(long, default_value_t = 2)]
    pub ramp_samples: usize,
    #[arg(long, default_value_t = 2000)]
    pub layer_gap: usize,
    #[arg(long, value_enum, default_value = "x")]
    pub seesaw_axis: AxisArg,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.0)]
    pub spike_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub jitter: usize,
    /// Forward XY distortion matrix, row-major a,b,c,d.
    #[arg(long, value_parser = floats::<4>)]
    pub distortion: Option<[f64; 4]>,
    /// Distortion center in volts; defaults to the part's center.
    #[arg(long, value_parser = floats::<2>)]
    pub distortion_center: Option<[f64; 2]>,
    /// Printed layers per model layer.
    #[arg(long)]
    pub z_stretch: Option<f64>,
}

fn floats<const N: usize>(s: &str) -> Result<[f64; N], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    v.try_into()
        .map_err(|_| format!("expected {N} comma-separated numbers"))
}

/// Maps an error chain to the process exit code: 2 for configuration
/// problems, 3 for data problems.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return e.exit_code();
        }
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<powerscan_core::Error>() {
            return if e.is_config() { 2 } else { 3 };
        }
    }
    3
}

fn print_json(v: &serde_json::Value) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // a closed pipe (e.g. `| head`) is not an error
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Preprocess { trace, out, cfg } => {
            let cfg = cfg.load_valid()?;
            let t = load_trace_csv(&trace, &pipeline::trace_schema(&cfg))?;
            let pre = pipeline::preprocess(&t, &cfg)?;
            pre.save(&out)?;
            print_json(&json!({
                "samples": pre.laser.len(),
                "on_samples": pre.laser.count_on(),
                "sample_rate_hz": pre.sample_rate_hz,
            }))
        }
        Command::Segment { input, out, cfg } => {
            let cfg = cfg.load_valid()?;
            let pre = Preprocessed::load(&input)?;
            let b = pipeline::segment(&pre, &cfg);
            pipeline::save_segments(&b, pre.sample_rate_hz, &out)?;
            let stats = layer_statistics(&b, pre.sample_rate_hz);
            let mean = |v: &[f64]| {
                if v.is_empty() {
                    0.0
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                }
            };
            print_json(&json!({
                "layers": b.len(),
                "mean_layer_s": mean(&stats.durations_seconds()),
                "mean_gap_s": mean(&stats.gaps_seconds()),
            }))
        }
        Command::Calibrate {
            trace,
            segments,
            out,
            cfg,
        } => {
            let cfg = cfg.load_valid()?;
            let t = load_trace_csv(&trace, &pipeline::trace_schema(&cfg))?;
            let b = match segments {
                Some(p) => pipeline::load_segments(&p)?,
                None => pipeline::segment(&pipeline::preprocess(&t, &cfg)?, &cfg),
            };
            let report = pipeline::calibrate(&t, &b, &cfg)?;
            if let Some(p) = out {
                pipeline::write_json(&p, &report)?;
            }
            print_json(&serde_json::to_value(report)?)
        }
        Command::Rasterize {
            input,
            segments,
            out,
            cfg,
        } => {
            let cfg = cfg.load_valid()?;
            let pre = Preprocessed::load(&input)?;
            let b = pipeline::load_segments(&segments)?;
            let g = pipeline::rasterize(&pre, &b, cfg.raster_size)?;
            pipeline::save_grid(&g, &out)?;
            print_json(
                &json!({ "voxels": g.len(), "layers": g.layer_count(), "total_hits": g.total_hits() }),
            )
        }
        Command::Diff { inputs, out, cfg } => {
            let cfg = cfg.load_valid()?;
            let grids = inputs
                .iter()
                .map(|p| {
                    pipeline::load_grid(p, cfg.raster_size).with_context(|| p.display().to_string())
                })
                .collect::<Result<Vec<_>>>()?;
            let m = differential_voxelization(&grids)?;
            pipeline::save_grid(&m, &out)?;
            print_json(
                &json!({ "voxels": m.len(), "layers": m.layer_count(), "total_hits": m.total_hits() }),
            )
        }
        Command::Prune { input, out, cfg } => {
            let cfg = cfg.load_valid()?;
            let g = pipeline::load_grid(&input, cfg.raster_size)?;
            let p = pipeline::prune_grid(&g, &cfg)?;
            pipeline::save_grid(&p, &out)?;
            print_json(&json!({ "voxels_in": g.len(), "voxels_out": p.len() }))
        }
        Command::Stats {
            input,
            segments,
            cfg,
        } => {
            let cfg = cfg.load_valid()?;
            let g = pipeline::load_grid(&input, cfg.raster_size)?;
            let hits = hit_count_histogram(&g);
            let neighbors = neighbor_count_histogram(&g, cfg.range);
            let gaps = gap_stretch_histogram(&g);
            let mut v = json!({
                "voxels": g.len(),
                "layers": g.layer_count(),
                "raster_size": g.raster().size(),
                "total_hits": g.total_hits(),
                "single_hit_fraction": single_hit_fraction(&g),
                "hit_histogram": hits,
                "fraction_below_min_neighbors": fraction_below(&neighbors, cfg.min_neighbors),
                "gap_stretches": gaps,
                "fraction_gaps_below_5": fraction_below(&gaps, 5),
            });
            if let Some(p) = segments {
                let b = pipeline::load_segments(&p)?;
                let rate = cfg
                    .sample_rate_hz
                    .unwrap_or(powerscan_core::trace_io::DEFAULT_SAMPLE_RATE_HZ);
                let s = layer_statistics(&b, rate);
                v["layer_durations_s"] = json!(s.durations_seconds());
                v["layer_gaps_s"] = json!(s.gaps_seconds());
            }
            print_json(&v)
        }
        Command::Fill { input, out, cfg } => {
            let cfg = cfg.load_valid()?;
            let g = pipeline::load_grid(&input, cfg.raster_size)?;
            let f = pipeline::fill(&g, &cfg)?;
            pipeline::save_grid(&f, &out)?;
            print_json(&json!({ "voxels_in": g.len(), "voxels_out": f.len() }))
        }
        Command::FitDistortion {
            xy_grid,
            z_input,
            out,
            cfg,
        } => {
            let cfg = cfg.load_valid()?;
            if xy_grid.is_none() && z_input.is_none() {
                bail!(ConfigError::Violations(vec![
                    "give --xy-grid, --z-input or both".into()
                ]));
            }
            let mut model = match &xy_grid {
                Some(p) => pipeline::fit_xy_model(&pipeline::load_grid(p, cfg.raster_size)?, &cfg)?,
                None => DistortionModel::identity(),
            };
            if let Some(p) = &z_input {
                let cloud = apply_xy_correction(&load_point_cloud_csv(p)?, &model)?;
                model.z_factor = pipeline::fit_z_factor(&cloud)?;
            }
            model.save_json(&out)?;
            print_json(&serde_json::to_value(model)?)
        }
        Command::Correct {
            input,
            model,
            out,
            skip_z,
        } => {
            let model = DistortionModel::load_json(&model)?;
            let mut cloud = apply_xy_correction(&load_point_cloud_csv(&input)?, &model)?;
            if !skip_z {
                cloud = apply_z_correction(&cloud, model.z_factor)?;
            }
            write_point_cloud_csv(&cloud, &out)?;
            print_json(&json!({ "points": cloud.len() }))
        }
        Command::Proportion {
            input,
            out,
            kind,
            target,
            cfg,
        } => {
            let cfg = cfg.load_valid()?;
            let (kind, default) = match kind {
                RatioArg::LengthOverDiameter => {
                    (RatioKind::LengthOverDiameter, cfg.astm_length_over_diameter)
                }
                RatioArg::DiameterOverHeight => {
                    (RatioKind::DiameterOverHeight, cfg.gear_diameter_over_height)
                }
            };
            let cloud = proportion_correction(
                &load_point_cloud_csv(&input)?,
                target.unwrap_or(default),
                kind,
            )?;
            write_point_cloud_csv(&cloud, &out)?;
            print_json(&json!({ "points": cloud.len() }))
        }
        Command::Evaluate {
            reference,
            input,
            grid,
            scale_rule,
            refine,
            out_dir,
            cfg,
        } => {
            let cfg = cfg.load_valid()?;
            evaluate(
                &reference,
                &input,
                grid.unwrap_or(cfg.evaluation_grid),
                &scale_rule,
                refine,
                out_dir.as_deref(),
            )
        }
        Command::Run { cfg } => {
            let cfg = cfg.load()?;
            let out = pipeline::run_pipeline(&cfg)?;
            print_json(&serde_json::to_value(&out.summary)?)
        }
        Command::Validate { cfg } => {
            let cfg = cfg.load()?;
            let v = cfg.validate();
            if !v.is_empty() {
                return Err(ConfigError::Violations(v).into());
            }
            println!("configuration is valid");
            Ok(())
        }
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let raster = RasterSpec::new(a.raster)?;
    let model = match (&a.shape, &a.model) {
        (Some(s), _) => Shape::parse(s)?.voxelize(raster)?,
        (None, Some(p)) => pipeline::load_grid(p, a.raster)?,
        (None, None) => bail!(ConfigError::Violations(vec![
            "give --shape or --model".into()
        ])),
    };
    let xy_distortion = match &a.distortion {
        Some(m) => {
            let center = match &a.distortion_center {
                Some(c) => *c,
                None => model_center_volts(&model, a.raster),
            };
            Some(XyDistortion {
                matrix: [[m[0], m[1]], [m[2], m[3]]],
                center,
            })
        }
        None => None,
    };
    let cfg = SimConfig {
        sample_rate_hz: a.sample_rate,
        raster_size_volts: a.raster,
        samples_per_cell: a.samples_per_cell,
        ramp_samples_per_cell: a.ramp_samples,
        seesaw_axis: match a.seesaw_axis {
            AxisArg::X => Axis::X,
            AxisArg::Y => Axis::Y,
        },
        layer_gap_samples: a.layer_gap,
        noise_sigma_volts: a.noise,
        spike_rate: a.spike_rate,
        xy_distortion,
        z_stretch: a.z_stretch,
        timing_jitter_samples: a.jitter,
        ..SimConfig::default()
    };
    let sim = simulate_print_trace(&model, &cfg, a.seed)?;
    write_trace_csv(&sim.trace, &a.out, &TraceSchema::default())?;
    if let Some(p) = &a.truth {
        pipeline::save_grid(&sim.ground_truth, p)?;
    }
    print_json(&json!({
        "samples": sim.trace.len(),
        "layers": sim.ground_truth.layer_count(),
        "voxels": sim.ground_truth.len(),
    }))
}

/// Center of the model's bounding box in galvanometer volts.
pub fn model_center_volts(model: &powerscan_core::VoxelGrid, raster: f64) -> [f64; 2] {
    let (mut lo, mut hi) = ([i32::MAX; 2], [i32::MIN; 2]);
    for (k, _) in model.iter() {
        lo = [lo[0].min(k.x), lo[1].min(k.y)];
        hi = [hi[0].max(k.x), hi[1].max(k.y)];
    }
    if lo[0] > hi[0] {
        return [0.0, 0.0];
    }
    [0, 1].map(|i| (lo[i] as f64 + hi[i] as f64 + 1.0) / 2.0 * raster)
}

fn evaluate(
    reference: &Path,
    input: &Path,
    cell: f64,
    rule: &str,
    refine: i32,
    out_dir: Option<&Path>,
) -> Result<()> {
    let rule = ScaleRule::parse(rule)?;
    let mesh = load_stl(reference)?;
    let vox = voxelize_mesh(&mesh, cell)?;
    if !vox.watertight {
        log::warn!("reference mesh is not watertight; comparing against its surface only");
    }
    let aligned = align_and_scale(&load_point_cloud_csv(input)?, &vox.grid, rule)?;
    let (cloud, shift) = if refine > 0 {
        refine_translation(&aligned.cloud, &vox.grid, refine)?
    } else {
        (aligned.cloud, [0; 3])
    };
    let rv = revoxelize_cloud(&cloud, &vox.grid);
    let cmp = compare_voxels(&vox.grid, &rv.grid)?;
    let v = json!({
        "report": cmp.report,
        "scale": aligned.scale,
        "translation": aligned.translation,
        "refine_shift_cells": shift,
        "points_out_of_bounds": rv.out_of_bounds,
        "reference_watertight": vox.watertight,
        "degenerate_triangles": vox.degenerate_triangles,
    });
    if let Some(d) = out_dir {
        std::fs::create_dir_all(d).with_context(|| d.display().to_string())?;
        pipeline::write_json(&d.join("report.json"), &v)?;
        write_point_cloud_csv(&cmp.true_pos_cloud, d.join("true_positive.csv"))?;
        write_point_cloud_csv(&cmp.false_pos_cloud, d.join("false_positive.csv"))?;
        write_point_cloud_csv(&cmp.false_neg_cloud, d.join("false_negative.csv"))?;
    }
    print_json(&v)
}
