//! Plain-text point-cloud formats.
//!
//! CSV: comma separated, no header, one point per line as `x,y,z[,f1,..,fd]`.
//! PLY: ASCII 1.0 only. Vertex properties other than `x`, `y`, `z` become the
//! feature vector in declaration order; other elements are skipped.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::PointCloud;
use crate::{Error, FeatureMatrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    CsvXyz,
}

impl CloudFormat {
    /// Guesses the format from the file extension (`.ply` or `.csv`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "ply" => Some(Self::PlyAscii),
            "csv" | "xyz" | "txt" => Some(Self::CsvXyz),
            _ => None,
        }
    }
}

impl std::str::FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ply" | "ply-ascii" => Ok(Self::PlyAscii),
            "csv" | "csv-xyz" => Ok(Self::CsvXyz),
            other => Err(Error::Invalid(format!("unknown cloud format {other:?}"))),
        }
    }
}

pub fn read_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::CsvXyz => parse_csv(&text),
        CloudFormat::PlyAscii => parse_ply(&text),
    }
}

pub fn write_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    let text = match format {
        CloudFormat::CsvXyz => format_csv(cloud),
        CloudFormat::PlyAscii => format_ply(cloud),
    };
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_number(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("non-numeric field {:?}", tok.trim())))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite value {v}")));
    }
    Ok(v)
}

fn parse_csv(text: &str) -> Result<PointCloud> {
    let mut positions = Vec::new();
    let mut feats = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let vals = raw
            .split(',')
            .map(|t| parse_number(t, line_no))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() < 3 {
            return Err(Error::parse(
                line_no,
                format!("expected at least 3 columns (x,y,z), found {}", vals.len()),
            ));
        }
        match width {
            None => width = Some(vals.len()),
            Some(w) if w != vals.len() => {
                return Err(Error::parse(
                    line_no,
                    format!("expected {w} columns, found {}", vals.len()),
                ))
            }
            _ => {}
        }
        positions.push([vals[0], vals[1], vals[2]]);
        feats.extend_from_slice(&vals[3..]);
    }
    let d = width.map_or(0, |w| w - 3);
    let features = FeatureMatrix::from_vec(positions.len(), d, feats)?;
    PointCloud::new(positions, features)
}

fn format_csv(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for (p, f) in cloud.positions().iter().zip(cloud.features().iter_rows()) {
        let _ = write!(out, "{},{},{}", p[0], p[1], p[2]);
        for v in f {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
    has_list: bool,
}

fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(1, "missing 'ply' magic line")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut format_seen = false;
    let mut header_done = false;
    for (line_no, raw) in lines.by_ref() {
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.as_slice() {
            [] => {}
            ["format", "ascii", "1.0"] => format_seen = true,
            ["format", other, ..] => {
                return Err(Error::parse(
                    line_no,
                    format!("unsupported PLY format {other:?}, only ascii 1.0 is read"),
                ))
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::parse(line_no, format!("bad element count {count:?}")))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            ["property", "list", _, _, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(line_no, "property before any element"))?;
                el.properties.push(name.to_string());
                el.has_list = true;
            }
            ["property", _ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(line_no, "property before any element"))?;
                el.properties.push(name.to_string());
            }
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(Error::parse(line_no, format!("malformed header line {raw:?}"))),
        }
    }
    if !format_seen {
        return Err(Error::parse(2, "missing 'format ascii 1.0' line"));
    }
    if !header_done {
        return Err(Error::parse(text.lines().count(), "missing end_header"));
    }
    let vertex_pos = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse(1, "no vertex element"))?;
    let vertex = &elements[vertex_pos];
    if vertex.has_list {
        return Err(Error::parse(1, "list properties on vertices are not supported"));
    }
    let find = |axis: &str| {
        vertex
            .properties
            .iter()
            .position(|p| p == axis)
            .ok_or_else(|| Error::parse(1, format!("vertex element lacks property {axis:?}")))
    };
    let (xi, yi, zi) = (find("x")?, find("y")?, find("z")?);
    let feature_cols: Vec<usize> = (0..vertex.properties.len())
        .filter(|c| ![xi, yi, zi].contains(c))
        .collect();

    let mut body = lines.filter(|(_, l)| !l.trim().is_empty());
    for el in &elements[..vertex_pos] {
        for _ in 0..el.count {
            body.next()
                .ok_or_else(|| Error::parse(text.lines().count(), format!("truncated {} data", el.name)))?;
        }
    }
    let n = vertex.count;
    let mut positions = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * feature_cols.len());
    for _ in 0..n {
        let (line_no, raw) = body
            .next()
            .ok_or_else(|| Error::parse(text.lines().count(), "fewer vertex lines than declared"))?;
        let vals = raw
            .split_whitespace()
            .map(|t| parse_number(t, line_no))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != vertex.properties.len() {
            return Err(Error::parse(
                line_no,
                format!(
                    "expected {} values, found {}",
                    vertex.properties.len(),
                    vals.len()
                ),
            ));
        }
        positions.push([vals[xi], vals[yi], vals[zi]]);
        feats.extend(feature_cols.iter().map(|&c| vals[c]));
    }
    let features = FeatureMatrix::from_vec(n, feature_cols.len(), feats)?;
    PointCloud::new(positions, features)
}

fn format_ply(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    for axis in ["x", "y", "z"] {
        let _ = writeln!(out, "property double {axis}");
    }
    for k in 0..cloud.feature_dim() {
        let _ = writeln!(out, "property double f{k}");
    }
    out.push_str("end_header\n");
    for (p, f) in cloud.positions().iter().zip(cloud.features().iter_rows()) {
        let _ = write!(out, "{} {} {}", p[0], p[1], p[2]);
        for v in f {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}
