//! ASCII PLY and headered XYZ text readers and writers.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a save
//! followed by a load reproduces every value bit for bit. Colors are stored
//! as 8-bit integers when every value is an exact multiple of 1/255 and as
//! doubles otherwise.

use std::fmt::Write as _;
use std::path::Path;

use super::cloud::PointCloud;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    PlyAscii,
    XyzText,
}

impl CloudFormat {
    /// `.ply` files are PLY; anything else is XYZ text.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("ply") => CloudFormat::PlyAscii,
            _ => CloudFormat::XyzText,
        }
    }
}

pub fn load_cloud(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_cloud(&text, format)
}

pub fn save_cloud(cloud: &PointCloud, path: impl AsRef<Path>, format: CloudFormat) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_cloud(cloud, format)).map_err(|e| Error::io(path, e))
}

pub fn parse_cloud(text: &str, format: CloudFormat) -> Result<PointCloud> {
    match format {
        CloudFormat::PlyAscii => parse_ply(text),
        CloudFormat::XyzText => parse_xyz(text),
    }
}

pub fn format_cloud(cloud: &PointCloud, format: CloudFormat) -> String {
    match format {
        CloudFormat::PlyAscii => format_ply(cloud),
        CloudFormat::XyzText => format_xyz(cloud),
    }
}

/// How a column's raw value maps onto the channel.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Encoding {
    Float,
    /// 8-bit color, divided by 255.
    Byte,
    Integer,
}

struct Column {
    name: String,
    encoding: Encoding,
}

/// Accumulates parsed columns and assembles a validated cloud.
struct Assembler {
    columns: Vec<Column>,
    values: Vec<Vec<f64>>,
}

impl Assembler {
    fn new(columns: Vec<Column>, rows: usize, header_line: usize) -> Result<Self> {
        for (i, c) in columns.iter().enumerate() {
            if columns[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::parse(header_line, format!("duplicate property '{}'", c.name)));
            }
        }
        for group in [["x", "y", "z"], ["nx", "ny", "nz"], ["red", "green", "blue"]] {
            let present = group.iter().filter(|g| columns.iter().any(|c| c.name == **g)).count();
            if present != 0 && present != 3 {
                return Err(Error::parse(
                    header_line,
                    format!("incomplete channel group {}", group.join("/")),
                ));
            }
            if group[0] == "x" && present == 0 {
                return Err(Error::parse(header_line, "missing x/y/z properties"));
            }
        }
        let values = columns.iter().map(|_| Vec::with_capacity(rows)).collect();
        Ok(Self { columns, values })
    }

    fn push_row(&mut self, line_no: usize, line: &str) -> Result<()> {
        let mut count = 0;
        for (i, token) in line.split_whitespace().enumerate() {
            if i >= self.columns.len() {
                return Err(Error::parse(
                    line_no,
                    format!("expected {} values, found more", self.columns.len()),
                ));
            }
            let column = &self.columns[i];
            let value = match column.encoding {
                Encoding::Float => token.parse::<f64>().ok(),
                Encoding::Byte => token.parse::<u8>().ok().map(|b| b as f64 / 255.0),
                Encoding::Integer => token.parse::<i64>().ok().map(|v| v as f64),
            }
            .ok_or_else(|| {
                Error::parse(line_no, format!("bad value '{token}' for property '{}'", column.name))
            })?;
            self.values[i].push(value);
            count += 1;
        }
        if count != self.columns.len() {
            return Err(Error::parse(
                line_no,
                format!("expected {} values, found {count}", self.columns.len()),
            ));
        }
        Ok(())
    }

    fn finish(self, line_no: usize) -> Result<PointCloud> {
        let take = |name: &str| {
            self.columns
                .iter()
                .position(|c| c.name == name)
                .map(|i| &self.values[i])
        };
        let triple = |names: [&str; 3]| -> Option<Vec<[f64; 3]>> {
            let a = take(names[0])?;
            let b = take(names[1])?;
            let c = take(names[2])?;
            Some((0..a.len()).map(|i| [a[i], b[i], c[i]]).collect())
        };
        let invalid = |e: Error| Error::parse(line_no, e.to_string());
        let mut cloud = PointCloud::new(triple(["x", "y", "z"]).expect("validated in header"));
        if let Some(n) = triple(["nx", "ny", "nz"]) {
            cloud = cloud.with_normals(n).map_err(invalid)?;
        }
        if let Some(c) = triple(["red", "green", "blue"]) {
            cloud = cloud.with_colors(c).map_err(invalid)?;
        }
        for (column, values) in self.columns.iter().zip(&self.values) {
            match column.name.as_str() {
                "x" | "y" | "z" | "nx" | "ny" | "nz" | "red" | "green" | "blue" => {}
                "height" => cloud = cloud.with_height(values.clone()).map_err(invalid)?,
                "label" => {
                    let labels = values
                        .iter()
                        .map(|&v| {
                            if v.fract() == 0.0 && v >= i32::MIN as f64 && v <= i32::MAX as f64 {
                                Ok(v as i32)
                            } else {
                                Err(Error::parse(line_no, format!("label {v} is not an integer")))
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    cloud = cloud.with_labels(labels).map_err(invalid)?;
                }
                name => cloud = cloud.with_extra(name, values.clone()).map_err(invalid)?,
            }
        }
        Ok(cloud)
    }
}

fn ply_encoding(ty: &str, name: &str) -> Option<Encoding> {
    let is_color = matches!(name, "red" | "green" | "blue");
    match ty {
        "float" | "double" | "float32" | "float64" => Some(Encoding::Float),
        "uchar" | "uint8" if is_color => Some(Encoding::Byte),
        "char" | "uchar" | "short" | "ushort" | "int" | "uint" | "int8" | "uint8" | "int16"
        | "uint16" | "int32" | "uint32" => {
            if is_color {
                None
            } else {
                Some(Encoding::Integer)
            }
        }
        _ => None,
    }
}

fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(1, "missing 'ply' magic")),
    }

    // (name, count, properties) per element, in file order.
    let mut elements: Vec<(String, usize, Vec<Column>)> = Vec::new();
    let mut header_end = None;
    let mut saw_format = false;
    for (no, line) in lines.by_ref() {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", "ascii", _] => saw_format = true,
            ["format", other, ..] => {
                return Err(Error::parse(no, format!("unsupported PLY format '{other}'")))
            }
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::parse(no, format!("bad element count '{count}'")))?;
                elements.push((name.to_string(), count, Vec::new()));
            }
            ["property", "list", ..] => {
                let Some(element) = elements.last_mut() else {
                    return Err(Error::parse(no, "property before any element"));
                };
                if element.0 == "vertex" {
                    return Err(Error::parse(no, "list properties on vertices are not supported"));
                }
                element.2.push(Column {
                    name: "list".into(),
                    encoding: Encoding::Float,
                });
            }
            ["property", ty, name] => {
                let Some(element) = elements.last_mut() else {
                    return Err(Error::parse(no, "property before any element"));
                };
                let encoding = if element.0 == "vertex" {
                    ply_encoding(ty, name).ok_or_else(|| {
                        Error::parse(no, format!("unsupported type '{ty}' for property '{name}'"))
                    })?
                } else {
                    Encoding::Float
                };
                element.2.push(Column {
                    name: name.to_string(),
                    encoding,
                });
            }
            ["end_header"] => {
                header_end = Some(no);
                break;
            }
            _ => return Err(Error::parse(no, format!("unrecognized header line '{line}'"))),
        }
    }
    let header_end = header_end.ok_or_else(|| Error::parse(text.lines().count(), "missing end_header"))?;
    if !saw_format {
        return Err(Error::parse(header_end, "missing format line"));
    }

    let mut cloud = None;
    for (name, count, columns) in elements {
        if name != "vertex" {
            // Other elements (faces, edges) are skipped line by line.
            for _ in 0..count {
                lines
                    .next()
                    .ok_or_else(|| Error::parse(header_end, format!("truncated '{name}' element")))?;
            }
            continue;
        }
        let mut assembler = Assembler::new(columns, count, header_end)?;
        let mut last = header_end;
        for _ in 0..count {
            let (no, line) = lines
                .next()
                .ok_or_else(|| Error::parse(last + 1, format!("expected {count} vertices")))?;
            assembler.push_row(no, line)?;
            last = no;
        }
        cloud = Some(assembler.finish(last)?);
    }
    cloud.ok_or_else(|| Error::parse(header_end, "no vertex element"))
}

fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (header_no, header) = lines
        .by_ref()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::parse(1, "empty file"))?;
    let names = header
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| Error::parse(header_no, "first line must be a '#' header naming the columns"))?;
    let columns: Vec<Column> = names
        .split_whitespace()
        .map(|n| Column {
            name: n.to_string(),
            encoding: if n == "label" { Encoding::Integer } else { Encoding::Float },
        })
        .collect();
    let mut assembler = Assembler::new(columns, 0, header_no)?;
    let mut last = header_no;
    for (no, line) in lines {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        assembler.push_row(no, trimmed)?;
        last = no;
    }
    assembler.finish(last)
}

fn colors_as_bytes(colors: &[[f64; 3]]) -> bool {
    colors
        .iter()
        .flatten()
        .all(|&c| ((c * 255.0).round() / 255.0).to_bits() == c.to_bits())
}

/// Column names and per-point formatted values, shared by both writers.
fn columns(cloud: &PointCloud, byte_colors: bool) -> (Vec<(&'static str, String)>, Vec<Vec<String>>) {
    let mut header: Vec<(&'static str, String)> = vec![
        ("double", "x".into()),
        ("double", "y".into()),
        ("double", "z".into()),
    ];
    if cloud.normals().is_some() {
        header.extend(["nx", "ny", "nz"].map(|n| ("double", n.to_string())));
    }
    if cloud.colors().is_some() {
        let ty = if byte_colors { "uchar" } else { "double" };
        header.extend(["red", "green", "blue"].map(|n| (ty, n.to_string())));
    }
    if cloud.height().is_some() {
        header.push(("double", "height".into()));
    }
    for (name, _) in cloud.extra() {
        header.push(("double", name.clone()));
    }
    if cloud.labels().is_some() {
        header.push(("int", "label".into()));
    }

    let rows = (0..cloud.len())
        .map(|i| {
            let mut row: Vec<String> = cloud.positions()[i].iter().map(|v| v.to_string()).collect();
            if let Some(n) = cloud.normals() {
                row.extend(n[i].iter().map(|v| v.to_string()));
            }
            if let Some(c) = cloud.colors() {
                if byte_colors {
                    row.extend(c[i].iter().map(|v| ((v * 255.0).round() as u8).to_string()));
                } else {
                    row.extend(c[i].iter().map(|v| v.to_string()));
                }
            }
            if let Some(h) = cloud.height() {
                row.push(h[i].to_string());
            }
            for (_, values) in cloud.extra() {
                row.push(values[i].to_string());
            }
            if let Some(l) = cloud.labels() {
                row.push(l[i].to_string());
            }
            row
        })
        .collect();
    (header, rows)
}

fn format_ply(cloud: &PointCloud) -> String {
    let byte_colors = cloud.colors().is_none_or(colors_as_bytes);
    let (header, rows) = columns(cloud, byte_colors);
    let mut out = String::from("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    for (ty, name) in &header {
        let _ = writeln!(out, "property {ty} {name}");
    }
    out.push_str("end_header\n");
    for row in rows {
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn format_xyz(cloud: &PointCloud) -> String {
    let (header, rows) = columns(cloud, false);
    let names: Vec<&str> = header.iter().map(|(_, n)| n.as_str()).collect();
    let mut out = format!("# {}\n", names.join(" "));
    for row in rows {
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}
