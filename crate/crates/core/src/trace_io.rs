//! File boundaries of the toolkit: trace CSV ingestion, point-cloud CSV
//! export/import and STL mesh loading.
//!
//! Trace and cloud CSV files may start with `#` metadata lines carrying
//! whitespace-separated `key=value` pairs, e.g. `# sample_rate_hz=20000`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 20_000.0;

/// Uniformly sampled laser and galvanometer channels of one print.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalTrace {
    sample_rate_hz: f64,
    laser: Vec<f64>,
    galvo_x: Vec<f64>,
    galvo_y: Vec<f64>,
}

impl SignalTrace {
    pub fn new(
        sample_rate_hz: f64,
        laser: Vec<f64>,
        galvo_x: Vec<f64>,
        galvo_y: Vec<f64>,
    ) -> Result<Self> {
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::Config(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        if laser.is_empty() {
            return Err(Error::EmptyInput("trace has no samples".into()));
        }
        if laser.len() != galvo_x.len() || laser.len() != galvo_y.len() {
            return Err(Error::Incompatible(format!(
                "channel lengths differ: laser {}, galvo_x {}, galvo_y {}",
                laser.len(),
                galvo_x.len(),
                galvo_y.len()
            )));
        }
        for (name, ch) in [
            ("laser", &laser),
            ("galvo_x", &galvo_x),
            ("galvo_y", &galvo_y),
        ] {
            if let Some(i) = ch.iter().position(|v| !v.is_finite()) {
                return Err(Error::Parse {
                    row: i as u64 + 1,
                    message: format!("non-finite value in channel {name}"),
                });
            }
        }
        Ok(Self {
            sample_rate_hz,
            laser,
            galvo_x,
            galvo_y,
        })
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn laser(&self) -> &[f64] {
        &self.laser
    }

    pub fn galvo_x(&self) -> &[f64] {
        &self.galvo_x
    }

    pub fn galvo_y(&self) -> &[f64] {
        &self.galvo_y
    }

    pub fn len(&self) -> usize {
        self.laser.len()
    }

    pub fn is_empty(&self) -> bool {
        self.laser.is_empty()
    }
}

/// Column names and sample rate used to read a trace CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSchema {
    pub laser: String,
    pub galvo_x: String,
    pub galvo_y: String,
    /// Overrides any `sample_rate_hz` metadata in the file when set.
    pub sample_rate_hz: Option<f64>,
}

impl Default for TraceSchema {
    fn default() -> Self {
        Self {
            laser: "laser".into(),
            galvo_x: "galvo_x".into(),
            galvo_y: "galvo_y".into(),
            sample_rate_hz: None,
        }
    }
}

/// Reads the leading `#` metadata lines of a CSV file.
pub fn read_metadata(path: &Path) -> Result<BTreeMap<String, String>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut meta = BTreeMap::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let Some(rest) = line.trim_start().strip_prefix('#') else {
            break;
        };
        for token in rest.split_whitespace() {
            if let Some((k, v)) = token.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            }
        }
    }
    Ok(meta)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema {
            column: name.to_string(),
        })
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let row = err.position().map(|p| p.line()).unwrap_or(0);
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Parse {
            row,
            message: format!("{other:?}"),
        },
    }
}

fn parse_cell(record: &csv::StringRecord, idx: usize, row: u64, name: &str) -> Result<f64> {
    let cell = record.get(idx).ok_or_else(|| Error::Parse {
        row,
        message: format!("missing value for `{name}`"),
    })?;
    let v: f64 = cell.parse().map_err(|_| Error::Parse {
        row,
        message: format!("`{cell}` in column `{name}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(Error::Parse {
            row,
            message: format!("non-finite value `{cell}` in column `{name}`"),
        });
    }
    Ok(v)
}

/// Loads the laser and galvanometer channels named by `schema`. Other columns
/// (time stamps, unused probes) are ignored. Row numbers in errors are file
/// line numbers.
pub fn load_trace_csv(path: impl AsRef<Path>, schema: &TraceSchema) -> Result<SignalTrace> {
    let path = path.as_ref();
    let meta = read_metadata(path)?;
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{}: no header row",
            path.display()
        )));
    }
    let cols = [
        (
            column_index(&headers, &schema.laser)?,
            schema.laser.as_str(),
        ),
        (
            column_index(&headers, &schema.galvo_x)?,
            schema.galvo_x.as_str(),
        ),
        (
            column_index(&headers, &schema.galvo_y)?,
            schema.galvo_y.as_str(),
        ),
    ];

    let mut laser = Vec::new();
    let mut gx = Vec::new();
    let mut gy = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => return Err(csv_error(path, e)),
        }
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        laser.push(parse_cell(&record, cols[0].0, row, cols[0].1)?);
        gx.push(parse_cell(&record, cols[1].0, row, cols[1].1)?);
        gy.push(parse_cell(&record, cols[2].0, row, cols[2].1)?);
    }
    if laser.is_empty() {
        return Err(Error::EmptyInput(format!(
            "{}: no data rows",
            path.display()
        )));
    }

    let rate = match schema.sample_rate_hz {
        Some(r) => r,
        None => match meta.get("sample_rate_hz") {
            Some(v) => v.parse().map_err(|_| Error::Parse {
                row: 1,
                message: format!("bad sample_rate_hz metadata `{v}`"),
            })?,
            None => DEFAULT_SAMPLE_RATE_HZ,
        },
    };
    SignalTrace::new(rate, laser, gx, gy)
}

/// Writes a trace with its sample rate as metadata. Values use the shortest
/// round-trip representation, so loading reproduces them bit for bit.
pub fn write_trace_csv(
    trace: &SignalTrace,
    path: impl AsRef<Path>,
    schema: &TraceSchema,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "# sample_rate_hz={}", trace.sample_rate_hz).map_err(io)?;
    writeln!(w, "{},{},{}", schema.laser, schema.galvo_x, schema.galvo_y).map_err(io)?;
    for i in 0..trace.len() {
        writeln!(
            w,
            "{},{},{}",
            trace.laser[i], trace.galvo_x[i], trace.galvo_y[i]
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// One reconstructed point; `weight` carries the voxel hit count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloudPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub weight: u32,
}

impl CloudPoint {
    pub fn new(x: f64, y: f64, z: f64, weight: u32) -> Self {
        Self { x, y, z, weight }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

impl PointCloud {
    pub fn new(points: Vec<CloudPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn xy(&self) -> Vec<[f64; 2]> {
        self.points.iter().map(|p| [p.x, p.y]).collect()
    }
}

impl FromIterator<CloudPoint> for PointCloud {
    fn from_iter<I: IntoIterator<Item = CloudPoint>>(iter: I) -> Self {
        Self::new(iter.into_iter().collect())
    }
}

pub fn write_point_cloud_csv(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    write_point_cloud_csv_with_metadata(cloud, path, &[])
}

/// Writes `x,y,z,weight` rows preceded by a metadata line when `meta` is
/// non-empty.
pub fn write_point_cloud_csv_with_metadata(
    cloud: &PointCloud,
    path: impl AsRef<Path>,
    meta: &[(&str, String)],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if !meta.is_empty() {
        let pairs: Vec<String> = meta.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(w, "# {}", pairs.join(" ")).map_err(io)?;
    }
    writeln!(w, "x,y,z,weight").map_err(io)?;
    for p in &cloud.points {
        writeln!(w, "{},{},{},{}", p.x, p.y, p.z, p.weight).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_point_cloud_csv(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let mut reader = csv_reader(path)?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let idx = [
        column_index(&headers, "x")?,
        column_index(&headers, "y")?,
        column_index(&headers, "z")?,
    ];
    let weight_idx = headers.iter().position(|h| h == "weight");

    let mut points = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(true) => {}
            Ok(false) => break,
            Err(e) => return Err(csv_error(path, e)),
        }
        let row = record.position().map(|p| p.line()).unwrap_or(0);
        let x = parse_cell(&record, idx[0], row, "x")?;
        let y = parse_cell(&record, idx[1], row, "y")?;
        let z = parse_cell(&record, idx[2], row, "z")?;
        let weight = match weight_idx {
            Some(i) => {
                let cell = record.get(i).unwrap_or("");
                cell.parse::<u32>().map_err(|_| Error::Parse {
                    row,
                    message: format!("weight `{cell}` is not a non-negative integer"),
                })?
            }
            None => 1,
        };
        if weight == 0 {
            return Err(Error::Parse {
                row,
                message: "weight must be at least 1".into(),
            });
        }
        points.push(CloudPoint { x, y, z, weight });
    }
    Ok(PointCloud { points })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Triangle(pub [[f64; 3]; 3]);

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub triangles: Vec<Triangle>,
}

impl TriangleMesh {
    pub fn new(triangles: Vec<Triangle>) -> Result<Self> {
        if triangles.is_empty() {
            return Err(Error::EmptyInput("mesh has no triangles".into()));
        }
        if triangles
            .iter()
            .flat_map(|t| t.0.iter().flatten())
            .any(|c| !c.is_finite())
        {
            return Err(Error::Malformed("non-finite vertex coordinate".into()));
        }
        Ok(Self { triangles })
    }

    /// Axis-aligned bounds as (min, max).
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for v in self.triangles.iter().flat_map(|t| t.0.iter()) {
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        (lo, hi)
    }
}

/// Loads a binary or ASCII STL file; the flavour is detected from the size
/// implied by the binary header and the leading `solid` keyword.
pub fn load_stl(path: impl AsRef<Path>) -> Result<TriangleMesh> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_stl(&bytes)
}

pub fn parse_stl(bytes: &[u8]) -> Result<TriangleMesh> {
    let binary_size = (bytes.len() >= 84).then(|| {
        let n = u32::from_le_bytes([bytes[80], bytes[81], bytes[82], bytes[83]]) as usize;
        84 + 50 * n
    });
    if binary_size == Some(bytes.len()) {
        return parse_binary_stl(bytes);
    }
    let looks_ascii = bytes
        .iter()
        .position(|b| !b.is_ascii_whitespace())
        .is_some_and(|i| bytes[i..].starts_with(b"solid"));
    if looks_ascii && std::str::from_utf8(bytes).is_ok() {
        return parse_ascii_stl(std::str::from_utf8(bytes).unwrap_or_default());
    }
    match binary_size {
        Some(expected) => Err(Error::Malformed(format!(
            "binary STL declares {} bytes of facets but file has {} bytes",
            expected,
            bytes.len()
        ))),
        None => Err(Error::Malformed(format!(
            "file of {} bytes is neither ASCII STL nor a binary STL header",
            bytes.len()
        ))),
    }
}

fn parse_binary_stl(bytes: &[u8]) -> Result<TriangleMesh> {
    let f32_at = |off: usize| {
        f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]]) as f64
    };
    let count = (bytes.len() - 84) / 50;
    let mut triangles = Vec::with_capacity(count);
    for i in 0..count {
        // skip the 12-byte normal; 2 attribute bytes trail each facet
        let base = 84 + i * 50 + 12;
        let mut tri = [[0.0; 3]; 3];
        for (v, vert) in tri.iter_mut().enumerate() {
            for (a, coord) in vert.iter_mut().enumerate() {
                *coord = f32_at(base + v * 12 + a * 4);
            }
        }
        triangles.push(Triangle(tri));
    }
    TriangleMesh::new(triangles)
}

fn parse_ascii_stl(text: &str) -> Result<TriangleMesh> {
    let mut triangles = Vec::new();
    let mut verts: Vec<[f64; 3]> = Vec::with_capacity(3);
    let mut in_facet = false;
    for (lineno, line) in text.lines().enumerate() {
        let row = lineno as u64 + 1;
        let mut tok = line.split_whitespace();
        let Some(keyword) = tok.next() else { continue };
        let err = |message: String| Error::Parse { row, message };
        match keyword {
            "solid" | "endsolid" | "outer" | "endloop" => {}
            "facet" => {
                if in_facet {
                    return Err(err("nested facet".into()));
                }
                in_facet = true;
                verts.clear();
            }
            "vertex" => {
                if !in_facet {
                    return Err(err("vertex outside facet".into()));
                }
                let coords: Vec<&str> = tok.collect();
                if coords.len() != 3 {
                    return Err(err(format!(
                        "vertex needs 3 coordinates, got {}",
                        coords.len()
                    )));
                }
                let mut v = [0.0; 3];
                for (slot, c) in v.iter_mut().zip(&coords) {
                    *slot = c
                        .parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| err(format!("bad coordinate `{c}`")))?;
                }
                verts.push(v);
            }
            "endfacet" => {
                if !in_facet || verts.len() != 3 {
                    return Err(err(format!(
                        "facet has {} vertices, expected 3",
                        verts.len()
                    )));
                }
                triangles.push(Triangle([verts[0], verts[1], verts[2]]));
                in_facet = false;
            }
            other => return Err(err(format!("unexpected keyword `{other}`"))),
        }
    }
    if in_facet {
        return Err(Error::Malformed("unterminated facet at end of file".into()));
    }
    TriangleMesh::new(triangles)
}

fn facet_normal(t: &Triangle) -> [f64; 3] {
    let [a, b, c] = t.0;
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [
        u[1] * v[2] - u[2] * v[1],
        u[2] * v[0] - u[0] * v[2],
        u[0] * v[1] - u[1] * v[0],
    ];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len > 0.0 {
        [n[0] / len, n[1] / len, n[2] / len]
    } else {
        [0.0; 3]
    }
}

pub fn write_stl_ascii(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "solid mesh").map_err(io)?;
    for t in &mesh.triangles {
        let n = facet_normal(t);
        writeln!(w, "  facet normal {} {} {}", n[0], n[1], n[2]).map_err(io)?;
        writeln!(w, "    outer loop").map_err(io)?;
        for v in &t.0 {
            writeln!(w, "      vertex {} {} {}", v[0], v[1], v[2]).map_err(io)?;
        }
        writeln!(w, "    endloop").map_err(io)?;
        writeln!(w, "  endfacet").map_err(io)?;
    }
    writeln!(w, "endsolid mesh").map_err(io)?;
    w.flush().map_err(io)
}

pub fn write_stl_binary(mesh: &TriangleMesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(84 + 50 * mesh.triangles.len());
    buf.extend_from_slice(&[0u8; 80]);
    buf.extend_from_slice(&(mesh.triangles.len() as u32).to_le_bytes());
    for t in &mesh.triangles {
        for c in facet_normal(t) {
            buf.extend_from_slice(&(c as f32).to_le_bytes());
        }
        for v in &t.0 {
            for c in v {
                buf.extend_from_slice(&(*c as f32).to_le_bytes());
            }
        }
        buf.extend_from_slice(&[0u8; 2]);
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}
