//! Pipeline configuration: a flat set of `key = value` pairs, read from a
//! text file or a JSON object, with command-line overrides.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use powerscan_core::voxel_ops::{FillStrategy, PruneConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("invalid JSON config: {0}")]
    Json(String),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{key}`: {message}")]
    Value { key: String, message: String },
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Violations(Vec<String>),
}

fn bad(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simple,
    Differential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum XyCorrection {
    None,
    /// Fit an ellipse to the top projection of the pruned grid.
    Fit,
    /// Use `xy_inverse_matrix` and `xy_center`.
    Fixed,
    /// Read the model from `distortion_model`.
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZCorrection {
    None,
    Fit,
    Fixed,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Proportion {
    None,
    LengthOverDiameter,
    DiameterOverHeight,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub mode: Mode,
    pub traces: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub laser_column: String,
    pub galvo_x_column: String,
    pub galvo_y_column: String,
    pub sample_rate_hz: Option<f64>,
    pub threshold_on: f64,
    pub threshold_off: f64,
    pub filter_order: usize,
    pub filter_cutoff_hz: f64,
    pub off_run_threshold: usize,
    pub calibrate: bool,
    pub calibration_cutoff_hz: f64,
    /// 1-based.
    pub calibration_layer: Option<u32>,
    pub raster_size: f64,
    pub min_hit: u32,
    pub range: u32,
    pub min_neighbors: u32,
    /// 2 counts neighbors within the layer, 3 in the surrounding cube.
    pub neighbor_dims: u8,
    pub fill_strategy: FillStrategy,
    pub projection_min_hit: u64,
    /// 1-based.
    pub middle_layer: Option<u32>,
    pub xy_correction: XyCorrection,
    pub xy_inverse_matrix: [f64; 4],
    pub xy_center: [f64; 2],
    pub reference_radius: f64,
    pub distortion_model: Option<PathBuf>,
    pub z_correction: ZCorrection,
    pub z_factor: f64,
    pub proportion: Proportion,
    pub astm_length_over_diameter: f64,
    pub gear_diameter_over_height: f64,
    pub evaluation_grid: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let prune = PruneConfig::SIMPLE;
        Self {
            mode: Mode::Simple,
            traces: Vec::new(),
            output_dir: PathBuf::from("out"),
            laser_column: "laser".into(),
            galvo_x_column: "galvo_x".into(),
            galvo_y_column: "galvo_y".into(),
            sample_rate_hz: None,
            threshold_on: 2.2,
            threshold_off: 1.1,
            filter_order: 4,
            filter_cutoff_hz: 6000.0,
            off_run_threshold: 1000,
            calibrate: false,
            calibration_cutoff_hz: 1000.0,
            calibration_layer: None,
            raster_size: 0.0025,
            min_hit: prune.min_hit,
            range: prune.neighbor_range,
            min_neighbors: prune.min_neighbors,
            neighbor_dims: 3,
            fill_strategy: FillStrategy::None,
            projection_min_hit: 20,
            middle_layer: None,
            xy_correction: XyCorrection::None,
            xy_inverse_matrix: [1.2155, -0.3904, -0.3904, 0.9017],
            xy_center: [9.0864, 17.4401],
            reference_radius: 100.0,
            distortion_model: None,
            z_correction: ZCorrection::None,
            z_factor: 1.8866,
            proportion: Proportion::None,
            astm_length_over_diameter: 6.7222,
            gear_diameter_over_height: 3.8629,
            evaluation_grid: 0.25,
        }
    }
}

pub const SIMPLE_PROFILE: &str = include_str!("../profiles/simple.cfg");
pub const DIFFERENTIAL_PROFILE: &str = include_str!("../profiles/differential.cfg");

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| bad(key, format!("`{v}`: {e}")))
}

fn parse_list<const N: usize>(key: &str, v: &str) -> Result<[f64; N], ConfigError> {
    let vals: Vec<f64> = v
        .split(',')
        .map(|s| parse_num::<f64>(key, s.trim()))
        .collect::<Result<_, _>>()?;
    vals.try_into()
        .map_err(|_| bad(key, format!("expected {N} comma-separated numbers")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() {
        Ok(None)
    } else {
        parse_num(key, v).map(Some)
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(bad(key, format!("`{v}` is not a boolean"))),
    }
}

fn join(vals: &[f64]) -> String {
    vals.iter()
        .map(f64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

impl PipelineConfig {
    /// Every accepted key.
    pub fn keys() -> Vec<&'static str> {
        Self::default()
            .entries()
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    /// Defaults for `mode`, i.e. the shipped profile.
    pub fn for_mode(mode: Mode) -> Self {
        let text = match mode {
            Mode::Simple => SIMPLE_PROFILE,
            Mode::Differential => DIFFERENTIAL_PROFILE,
        };
        let mut cfg = Self::default();
        for (k, v) in parse_pairs(text).expect("shipped profiles parse") {
            cfg.set(&k, &v).expect("shipped profiles parse");
        }
        cfg
    }

    /// Key/value pairs in canonical text form.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mode = match self.mode {
            Mode::Simple => "simple",
            Mode::Differential => "differential",
        };
        let xy = match self.xy_correction {
            XyCorrection::None => "none",
            XyCorrection::Fit => "fit",
            XyCorrection::Fixed => "fixed",
            XyCorrection::File => "file",
        };
        let z = match self.z_correction {
            ZCorrection::None => "none",
            ZCorrection::Fit => "fit",
            ZCorrection::Fixed => "fixed",
            ZCorrection::File => "file",
        };
        let proportion = match self.proportion {
            Proportion::None => "none",
            Proportion::LengthOverDiameter => "length_over_diameter",
            Proportion::DiameterOverHeight => "diameter_over_height",
        };
        let traces = self
            .traces
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(",");
        vec![
            ("mode", mode.into()),
            ("traces", traces),
            ("output_dir", self.output_dir.display().to_string()),
            ("laser_column", self.laser_column.clone()),
            ("galvo_x_column", self.galvo_x_column.clone()),
            ("galvo_y_column", self.galvo_y_column.clone()),
            ("sample_rate_hz", opt(&self.sample_rate_hz)),
            ("threshold_on", self.threshold_on.to_string()),
            ("threshold_off", self.threshold_off.to_string()),
            ("filter_order", self.filter_order.to_string()),
            ("filter_cutoff_hz", self.filter_cutoff_hz.to_string()),
            ("off_run_threshold", self.off_run_threshold.to_string()),
            ("calibrate", self.calibrate.to_string()),
            (
                "calibration_cutoff_hz",
                self.calibration_cutoff_hz.to_string(),
            ),
            ("calibration_layer", opt(&self.calibration_layer)),
            ("raster_size", self.raster_size.to_string()),
            ("min_hit", self.min_hit.to_string()),
            ("range", self.range.to_string()),
            ("min_neighbors", self.min_neighbors.to_string()),
            ("neighbor_dims", self.neighbor_dims.to_string()),
            ("fill_strategy", self.fill_strategy.as_str().into()),
            ("projection_min_hit", self.projection_min_hit.to_string()),
            ("middle_layer", opt(&self.middle_layer)),
            ("xy_correction", xy.into()),
            ("xy_inverse_matrix", join(&self.xy_inverse_matrix)),
            ("xy_center", join(&self.xy_center)),
            ("reference_radius", self.reference_radius.to_string()),
            (
                "distortion_model",
                opt(&self.distortion_model.as_ref().map(|p| p.display())),
            ),
            ("z_correction", z.into()),
            ("z_factor", self.z_factor.to_string()),
            ("proportion", proportion.into()),
            (
                "astm_length_over_diameter",
                self.astm_length_over_diameter.to_string(),
            ),
            (
                "gear_diameter_over_height",
                self.gear_diameter_over_height.to_string(),
            ),
            ("evaluation_grid", self.evaluation_grid.to_string()),
        ]
    }

    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "mode" => {
                self.mode = match v {
                    "simple" => Mode::Simple,
                    "differential" => Mode::Differential,
                    _ => return Err(bad(key, "expected simple or differential")),
                }
            }
            "traces" => {
                self.traces = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "output_dir" => self.output_dir = PathBuf::from(v),
            "laser_column" => self.laser_column = v.into(),
            "galvo_x_column" => self.galvo_x_column = v.into(),
            "galvo_y_column" => self.galvo_y_column = v.into(),
            "sample_rate_hz" => self.sample_rate_hz = parse_opt(key, v)?,
            "threshold_on" => self.threshold_on = parse_num(key, v)?,
            "threshold_off" => self.threshold_off = parse_num(key, v)?,
            "filter_order" => self.filter_order = parse_num(key, v)?,
            "filter_cutoff_hz" => self.filter_cutoff_hz = parse_num(key, v)?,
            "off_run_threshold" => self.off_run_threshold = parse_num(key, v)?,
            "calibrate" => self.calibrate = parse_bool(key, v)?,
            "calibration_cutoff_hz" => self.calibration_cutoff_hz = parse_num(key, v)?,
            "calibration_layer" => self.calibration_layer = parse_opt(key, v)?,
            "raster_size" => self.raster_size = parse_num(key, v)?,
            "min_hit" => self.min_hit = parse_num(key, v)?,
            "range" => self.range = parse_num(key, v)?,
            "min_neighbors" => self.min_neighbors = parse_num(key, v)?,
            "neighbor_dims" => self.neighbor_dims = parse_num(key, v)?,
            "fill_strategy" => {
                self.fill_strategy = FillStrategy::parse(v).map_err(|e| bad(key, e.to_string()))?
            }
            "projection_min_hit" => self.projection_min_hit = parse_num(key, v)?,
            "middle_layer" => self.middle_layer = parse_opt(key, v)?,
            "xy_correction" => {
                self.xy_correction = match v {
                    "none" => XyCorrection::None,
                    "fit" => XyCorrection::Fit,
                    "fixed" => XyCorrection::Fixed,
                    "file" => XyCorrection::File,
                    _ => return Err(bad(key, "expected none, fit, fixed or file")),
                }
            }
            "xy_inverse_matrix" => self.xy_inverse_matrix = parse_list(key, v)?,
            "xy_center" => self.xy_center = parse_list(key, v)?,
            "reference_radius" => self.reference_radius = parse_num(key, v)?,
            "distortion_model" => self.distortion_model = (!v.is_empty()).then(|| PathBuf::from(v)),
            "z_correction" => {
                self.z_correction = match v {
                    "none" => ZCorrection::None,
                    "fit" => ZCorrection::Fit,
                    "fixed" => ZCorrection::Fixed,
                    "file" => ZCorrection::File,
                    _ => return Err(bad(key, "expected none, fit, fixed or file")),
                }
            }
            "z_factor" => self.z_factor = parse_num(key, v)?,
            "proportion" => {
                self.proportion = match v {
                    "none" => Proportion::None,
                    "length_over_diameter" => Proportion::LengthOverDiameter,
                    "diameter_over_height" => Proportion::DiameterOverHeight,
                    _ => {
                        return Err(bad(
                            key,
                            "expected none, length_over_diameter or diameter_over_height",
                        ))
                    }
                }
            }
            "astm_length_over_diameter" => self.astm_length_over_diameter = parse_num(key, v)?,
            "gear_diameter_over_height" => self.gear_diameter_over_height = parse_num(key, v)?,
            "evaluation_grid" => self.evaluation_grid = parse_num(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Parses a config document and applies `overrides` in order. A `mode`
    /// key (document or override) selects the matching profile's defaults
    /// before anything else is applied.
    pub fn parse_str(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let pairs = parse_pairs(text)?;
        let mode = overrides
            .iter()
            .rev()
            .chain(pairs.iter().rev())
            .find(|(k, _)| k == "mode")
            .map(|(_, v)| v.trim().to_string());
        let mut cfg = match mode.as_deref() {
            Some("differential") => Self::for_mode(Mode::Differential),
            _ => Self::default(),
        };
        for (k, v) in pairs.iter().chain(overrides) {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse_str(&text, overrides)
    }

    /// Canonical `key = value` text; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn prune_config(&self) -> PruneConfig {
        PruneConfig {
            min_hit: self.min_hit,
            neighbor_range: self.range,
            min_neighbors: self.min_neighbors,
        }
    }

    /// Every violated constraint, naming the key.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let positive = |v: &mut Vec<String>, key: &str, x: f64| {
            if !(x > 0.0 && x.is_finite()) {
                v.push(format!("{key} must be positive, got {x}"));
            }
        };
        if !(self.threshold_on > self.threshold_off) {
            v.push(format!(
                "threshold_on > threshold_off is required, got {} and {}",
                self.threshold_on, self.threshold_off
            ));
        }
        if self.filter_order == 0 {
            v.push("filter_order must be at least 1".into());
        }
        let nyquist = self.sample_rate_hz.map(|r| r / 2.0);
        for (key, fc) in [
            ("filter_cutoff_hz", self.filter_cutoff_hz),
            ("calibration_cutoff_hz", self.calibration_cutoff_hz),
        ] {
            positive(&mut v, key, fc);
            if let Some(n) = nyquist {
                if fc >= n {
                    v.push(format!(
                        "{key} {fc} must be below the Nyquist frequency {n}"
                    ));
                }
            }
        }
        if let Some(r) = self.sample_rate_hz {
            positive(&mut v, "sample_rate_hz", r);
        }
        if self.off_run_threshold == 0 {
            v.push("off_run_threshold must be at least 1".into());
        }
        positive(&mut v, "raster_size", self.raster_size);
        if self.min_hit == 0 {
            v.push("min_hit must be at least 1".into());
        }
        if self.range == 0 {
            v.push("range must be at least 1".into());
        } else {
            let max = PruneConfig::max_planar_neighbors(self.range);
            if self.min_neighbors as u64 > max {
                v.push(format!(
                    "min_neighbors {} exceeds (2r+1)²−1 = {max} for range {}",
                    self.min_neighbors, self.range
                ));
            }
        }
        if !matches!(self.neighbor_dims, 2 | 3) {
            v.push(format!(
                "neighbor_dims must be 2 or 3, got {}",
                self.neighbor_dims
            ));
        }
        if self.calibration_layer == Some(0) {
            v.push("calibration_layer is 1-based".into());
        }
        if self.middle_layer == Some(0) {
            v.push("middle_layer is 1-based".into());
        }
        positive(&mut v, "reference_radius", self.reference_radius);
        positive(&mut v, "z_factor", self.z_factor);
        positive(
            &mut v,
            "astm_length_over_diameter",
            self.astm_length_over_diameter,
        );
        positive(
            &mut v,
            "gear_diameter_over_height",
            self.gear_diameter_over_height,
        );
        positive(&mut v, "evaluation_grid", self.evaluation_grid);
        let [a, b, c, d] = self.xy_inverse_matrix;
        if !(a * d - b * c).is_finite() || (a * d - b * c).abs() <= 1e-9 {
            v.push("xy_inverse_matrix is singular".into());
        }
        let needs_model =
            self.xy_correction == XyCorrection::File || self.z_correction == ZCorrection::File;
        if needs_model && self.distortion_model.is_none() {
            v.push("distortion_model path is required when a correction reads from file".into());
        }
        match (self.mode, self.traces.len()) {
            (_, 0) => {}
            (Mode::Simple, n) if n != 1 => {
                v.push(format!("simple mode takes exactly one trace, got {n}"))
            }
            (Mode::Differential, 1) => v.push("differential mode needs at least two traces".into()),
            _ => {}
        }
        v
    }

    /// Like [`validate`](Self::validate) but also requires input traces.
    pub fn validate_for_run(&self) -> Result<(), ConfigError> {
        let mut v = self.validate();
        if self.traces.is_empty() {
            v.push("traces must list at least one trace file".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Violations(v))
        }
    }
}

/// Raw pairs of a document: JSON object if it starts with `{`, else lines
/// of `key = value` (or `key: value`) with `#` comments.
fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    if text.trim_start().starts_with('{') {
        let doc: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))?;
        let obj = doc
            .as_object()
            .ok_or_else(|| ConfigError::Json("top level must be an object".into()))?;
        return obj
            .iter()
            .map(|(k, v)| Ok((k.clone(), json_scalar(k, v)?)))
            .collect();
    }
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .or_else(|| line.split_once(':'))
            .ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: line.into(),
            })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

fn json_scalar(key: &str, v: &serde_json::Value) -> Result<String, ConfigError> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => String::new(),
        Value::Bool(b) => b.to_string(),
        Value::Number(n) => n.to_string(),
        Value::String(s) => s.clone(),
        Value::Array(items) => items
            .iter()
            .map(|i| match i {
                Value::Array(_) | Value::Object(_) => {
                    Err(bad(key, "nested values are not supported"))
                }
                other => json_scalar(key, other),
            })
            .collect::<Result<Vec<_>, _>>()?
            .join(","),
        Value::Object(_) => return Err(bad(key, "nested objects are not supported")),
    })
}

/// Splits `key=value` as given to `--set`.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

/// Converts a sorted map view, for comparisons in tests and reports.
pub fn as_map(cfg: &PipelineConfig) -> BTreeMap<&'static str, String> {
    cfg.entries().into_iter().collect()
}
