//! Geometric corrections applied to reconstructed point clouds: a global
//! linear XY distortion estimated from an ellipse fit, elongation along Z,
//! and a final proportion adjustment to known part dimensions.

use std::f64::consts::{FRAC_PI_2, PI};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace_io::{CloudPoint, PointCloud};

pub use crate::grid::grid_to_cloud;

pub type Matrix2 = [[f64; 2]; 2];

const SINGULAR_DET: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseFit {
    pub center: [f64; 2],
    /// Semi-axis along the orientation direction.
    pub major_axis_length: f64,
    pub minor_axis_length: f64,
    /// Angle of the major axis, in (-pi/2, pi/2].
    pub orientation_rad: f64,
}

fn normalize_half_turn(mut theta: f64) -> f64 {
    while theta <= -FRAC_PI_2 {
        theta += PI;
    }
    while theta > FRAC_PI_2 {
        theta -= PI;
    }
    theta
}

fn mean_xy(points: &[[f64; 2]]) -> [f64; 2] {
    let n = points.len() as f64;
    let (sx, sy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sx / n, sy / n]
}

/// Covariance entries (sxx, syy, sxy) about `c`, unnormalized.
fn scatter(points: &[[f64; 2]], c: [f64; 2]) -> (f64, f64, f64) {
    points.iter().fold((0.0, 0.0, 0.0), |(xx, yy, xy), p| {
        let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
        (xx + dx * dx, yy + dy * dy, xy + dx * dy)
    })
}

/// Direction of the largest principal component. An isotropic scatter
/// yields 0, i.e. the X axis.
fn principal_angle(sxx: f64, syy: f64, sxy: f64) -> f64 {
    0.5 * (2.0 * sxy).atan2(sxx - syy)
}

/// Fits the ellipse that tightly encloses `points` in their principal frame:
/// the center is the mean, the axes follow the covariance eigenvectors and
/// each semi-axis equals the largest absolute principal coordinate.
pub fn fit_ellipse_pca(points: &[[f64; 2]]) -> Result<EllipseFit> {
    if points.len() < 3 {
        return Err(Error::Degenerate(format!(
            "ellipse fit needs at least 3 points, got {}",
            points.len()
        )));
    }
    let center = mean_xy(points);
    let (sxx, syy, sxy) = scatter(points, center);
    let trace = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    // smallest eigenvalue relative to the largest
    let disc = ((sxx - syy).powi(2) + 4.0 * sxy * sxy).sqrt();
    let (l_max, l_min) = (0.5 * (trace + disc), 0.5 * (trace - disc));
    if !(l_max > 0.0) || l_min <= 1e-12 * l_max || det <= 0.0 {
        return Err(Error::Degenerate("points are collinear".into()));
    }

    let mut theta = principal_angle(sxx, syy, sxy);
    let (s, c) = theta.sin_cos();
    let (mut a, mut b) = (0.0f64, 0.0f64);
    for p in points {
        let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
        a = a.max((dx * c + dy * s).abs());
        b = b.max((-dx * s + dy * c).abs());
    }
    if b > a {
        std::mem::swap(&mut a, &mut b);
        theta += FRAC_PI_2;
    }
    Ok(EllipseFit {
        center,
        major_axis_length: a,
        minor_axis_length: b,
        orientation_rad: normalize_half_turn(theta),
    })
}

fn rotation(theta: f64) -> Matrix2 {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

fn mat_mul(a: &Matrix2, b: &Matrix2) -> Matrix2 {
    let mut m = [[0.0; 2]; 2];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    m
}

fn transpose(a: &Matrix2) -> Matrix2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

pub fn det2(m: &Matrix2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn invert2(m: &Matrix2) -> Result<Matrix2> {
    let d = det2(m);
    if !(d.abs() > SINGULAR_DET) {
        return Err(Error::Degenerate(format!("matrix is singular (det {d:e})")));
    }
    Ok([[m[1][1] / d, -m[0][1] / d], [-m[1][0] / d, m[0][0] / d]])
}

fn apply2(m: &Matrix2, v: [f64; 2]) -> [f64; 2] {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

/// Global linear distortion of a print: an XY matrix about a center and an
/// elongation factor along Z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistortionModel {
    /// Row-major; maps undistorted to distorted offsets from `xy_center`.
    pub xy_matrix: Matrix2,
    pub xy_center: [f64; 2],
    pub z_factor: f64,
    pub reference_radius: f64,
}

impl DistortionModel {
    pub fn identity() -> Self {
        Self {
            xy_matrix: [[1.0, 0.0], [0.0, 1.0]],
            xy_center: [0.0, 0.0],
            z_factor: 1.0,
            reference_radius: 1.0,
        }
    }

    /// Model whose XY correction is the given inverse matrix.
    pub fn from_inverse(inverse: Matrix2, center: [f64; 2]) -> Result<Self> {
        Ok(Self {
            xy_matrix: invert2(&inverse)?,
            xy_center: center,
            ..Self::identity()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self
            .xy_matrix
            .iter()
            .flatten()
            .chain(&self.xy_center)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config(
                "distortion model has non-finite entries".into(),
            ));
        }
        if !(self.z_factor > 0.0 && self.reference_radius > 0.0) {
            return Err(Error::Config(
                "z_factor and reference_radius must be positive".into(),
            ));
        }
        invert2(&self.xy_matrix).map(|_| ())
    }

    pub fn inverse_matrix(&self) -> Result<Matrix2> {
        invert2(&self.xy_matrix)
    }

    /// Forward distortion of one XY point: `M (p - C) + C`.
    pub fn distort_xy(&self, p: [f64; 2]) -> [f64; 2] {
        let c = self.xy_center;
        let d = apply2(&self.xy_matrix, [p[0] - c[0], p[1] - c[1]]);
        [d[0] + c[0], d[1] + c[1]]
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        model.validate()?;
        Ok(model)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("model serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// XY part of the distortion model: the matrix that maps a circle of radius
/// `reference_radius` about the fit center onto the fitted ellipse.
pub fn derive_xy_distortion(fit: &EllipseFit, reference_radius: f64) -> Result<DistortionModel> {
    if !(reference_radius > 0.0) {
        return Err(Error::Config("reference radius must be positive".into()));
    }
    if !(fit.major_axis_length > 0.0 && fit.minor_axis_length > 0.0) {
        return Err(Error::Degenerate("ellipse has a zero axis".into()));
    }
    let r = rotation(fit.orientation_rad);
    let scale = [
        [fit.major_axis_length / reference_radius, 0.0],
        [0.0, fit.minor_axis_length / reference_radius],
    ];
    let m = mat_mul(&mat_mul(&r, &scale), &transpose(&r));
    // symmetrize away rounding noise
    let off = 0.5 * (m[0][1] + m[1][0]);
    Ok(DistortionModel {
        xy_matrix: [[m[0][0], off], [off, m[1][1]]],
        xy_center: fit.center,
        z_factor: 1.0,
        reference_radius,
    })
}

/// Undoes the XY distortion: `M^-1 (p - C) + C` for every point.
pub fn apply_xy_correction(cloud: &PointCloud, model: &DistortionModel) -> Result<PointCloud> {
    let inv = model.inverse_matrix()?;
    let c = model.xy_center;
    let points = cloud
        .points
        .par_iter()
        .map(|p| {
            let d = apply2(&inv, [p.x - c[0], p.y - c[1]]);
            CloudPoint::new(d[0] + c[0], d[1] + c[1], p.z, p.weight)
        })
        .collect();
    Ok(PointCloud::new(points))
}

/// Inclination of the least-squares line through `points`, as `atan(slope)`.
pub fn fit_axis_line(points: &[[f64; 2]]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Degenerate("line fit needs at least 2 points".into()));
    }
    let c = mean_xy(points);
    let (sxx, _, sxy) = scatter(points, c);
    if points.iter().all(|p| p[0] == points[0][0]) || !(sxx > 0.0) {
        return Err(Error::Degenerate(
            "all points share one x value; the line would be vertical (pi/2)".into(),
        ));
    }
    Ok((sxy / sxx).atan())
}

/// Ratio of the layer extent (max - min + 1) to the extent across the part
/// axis after rotating XY by `-theta`.
pub fn derive_z_factor(cloud: &PointCloud, theta: f64) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::EmptyInput("cloud has no points".into()));
    }
    let (s, c) = theta.sin_cos();
    let (mut y_lo, mut y_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut z_lo, mut z_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &cloud.points {
        let ry = -p.x * s + p.y * c;
        y_lo = y_lo.min(ry);
        y_hi = y_hi.max(ry);
        z_lo = z_lo.min(p.z);
        z_hi = z_hi.max(p.z);
    }
    let delta_y = y_hi - y_lo;
    if !(delta_y > 0.0) {
        return Err(Error::Degenerate(
            "cloud has no extent across the axis".into(),
        ));
    }
    Ok((z_hi - z_lo + 1.0) / delta_y)
}

/// Divides every z coordinate by `factor`.
pub fn apply_z_correction(cloud: &PointCloud, factor: f64) -> Result<PointCloud> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::Config(format!(
            "z factor must be positive, got {factor}"
        )));
    }
    Ok(cloud
        .points
        .iter()
        .map(|p| CloudPoint::new(p.x, p.y, p.z / factor, p.weight))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioKind {
    /// Long XY axis over short XY axis; the short axis is kept.
    LengthOverDiameter,
    /// XY diameter over height; the height is kept.
    DiameterOverHeight,
}

impl RatioKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "length_over_diameter" => Ok(Self::LengthOverDiameter),
            "diameter_over_height" => Ok(Self::DiameterOverHeight),
            other => Err(Error::Config(format!("unknown ratio kind `{other}`"))),
        }
    }
}

/// Extents of a cloud in its XY principal frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalExtents {
    pub center: [f64; 2],
    /// Direction of `long`.
    pub angle: f64,
    pub long: f64,
    pub short: f64,
    pub height: f64,
}

impl PrincipalExtents {
    pub fn measure(cloud: &PointCloud) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyInput("cloud has no points".into()));
        }
        let xy = cloud.xy();
        let center = mean_xy(&xy);
        let (sxx, syy, sxy) = scatter(&xy, center);
        let mut angle = principal_angle(sxx, syy, sxy);
        let span = |a: f64| {
            let (s, c) = a.sin_cos();
            let (lo, hi) = xy
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                    let u = (p[0] - center[0]) * c + (p[1] - center[1]) * s;
                    (lo.min(u), hi.max(u))
                });
            hi - lo
        };
        let (mut long, mut short) = (span(angle), span(angle + FRAC_PI_2));
        if short > long {
            std::mem::swap(&mut long, &mut short);
            angle += FRAC_PI_2;
        }
        let (z_lo, z_hi) = cloud
            .points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.z), hi.max(p.z))
            });
        Ok(Self {
            center,
            angle,
            long,
            short,
            height: z_hi - z_lo,
        })
    }

    pub fn ratio(&self, kind: RatioKind) -> f64 {
        match kind {
            RatioKind::LengthOverDiameter => self.long / self.short,
            RatioKind::DiameterOverHeight => self.long / self.height,
        }
    }
}

/// Rescales the cloud so its proportion of `kind` equals `target_ratio`.
/// Scaling happens in the XY principal frame about the XY centroid. With
/// equal extents the X axis counts as the long one.
pub fn proportion_correction(
    cloud: &PointCloud,
    target_ratio: f64,
    kind: RatioKind,
) -> Result<PointCloud> {
    if !(target_ratio > 0.0 && target_ratio.is_finite()) {
        return Err(Error::Config(format!(
            "target ratio must be positive, got {target_ratio}"
        )));
    }
    let ext = PrincipalExtents::measure(cloud)?;
    let denominator = match kind {
        RatioKind::LengthOverDiameter => ext.short,
        RatioKind::DiameterOverHeight => ext.height,
    };
    if !(ext.long > 0.0 && denominator > 0.0) {
        return Err(Error::Degenerate(
            "cloud has zero extent on a ratio axis".into(),
        ));
    }
    let k = target_ratio / ext.ratio(kind);
    let (s, c) = ext.angle.sin_cos();
    let (cx, cy) = (ext.center[0], ext.center[1]);
    let (k_long, k_short) = match kind {
        RatioKind::LengthOverDiameter => (k, 1.0),
        RatioKind::DiameterOverHeight => (k, k),
    };
    Ok(cloud
        .points
        .iter()
        .map(|p| {
            let (dx, dy) = (p.x - cx, p.y - cy);
            let u = (dx * c + dy * s) * k_long;
            let v = (-dx * s + dy * c) * k_short;
            CloudPoint::new(cx + u * c - v * s, cy + u * s + v * c, p.z, p.weight)
        })
        .collect())
}
