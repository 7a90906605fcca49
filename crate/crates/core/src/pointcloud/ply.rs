//! PLY reading and writing for vertex-only point clouds.
//!
//! Reads ASCII and binary little-endian files. Vertex properties `x y z` are
//! required; `red green blue`, `nx ny nz` and `label` are picked up when
//! present. Integer colors are scaled by the type's maximum, float colors are
//! taken as already in [0, 1]. Other elements and properties are skipped.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{normalize, PointCloud};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Option<Scalar> {
        Some(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    /// Divisor mapping an integer color channel onto [0, 1].
    fn color_scale(self) -> f64 {
        match self {
            Scalar::U8 | Scalar::I8 => 255.0,
            Scalar::U16 | Scalar::I16 => 65535.0,
            Scalar::U32 | Scalar::I32 => u32::MAX as f64,
            Scalar::F32 | Scalar::F64 => 1.0,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    body_offset: usize,
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut pos = 0;
    let mut line_no = 0;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(line_no + 1, "header is missing end_header"))?;
        line_no += 1;
        let raw = &bytes[pos..pos + end];
        pos += end + 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| parse_err(line_no, "header line is not UTF-8"))?
            .trim();
        let tok: Vec<&str> = line.split_whitespace().collect();
        if line_no == 1 {
            if line != "ply" {
                return Err(parse_err(1, format!("expected 'ply', got '{}'", line)));
            }
            continue;
        }
        match tok.first().copied() {
            None => continue,
            Some("comment") | Some("obj_info") => continue,
            Some("format") => {
                format = Some(match tok.get(1).copied() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLittleEndian,
                    other => return Err(parse_err(line_no, format!("unsupported format {:?}", other))),
                });
            }
            Some("element") => {
                if tok.len() != 3 {
                    return Err(parse_err(line_no, format!("bad element line '{}'", line)));
                }
                let count = tok[2]
                    .parse()
                    .map_err(|_| parse_err(line_no, format!("bad element count '{}'", tok[2])))?;
                elements.push(Element {
                    name: tok[1].to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| parse_err(line_no, "property before any element"))?;
                let prop = if tok.get(1) == Some(&"list") {
                    if tok.len() != 5 {
                        return Err(parse_err(line_no, format!("bad list property '{}'", line)));
                    }
                    let count = Scalar::parse(tok[2])
                        .ok_or_else(|| parse_err(line_no, format!("unknown type '{}'", tok[2])))?;
                    let item = Scalar::parse(tok[3])
                        .ok_or_else(|| parse_err(line_no, format!("unknown type '{}'", tok[3])))?;
                    Property::List { count, item }
                } else {
                    if tok.len() != 3 {
                        return Err(parse_err(line_no, format!("bad property line '{}'", line)));
                    }
                    let ty = Scalar::parse(tok[1])
                        .ok_or_else(|| parse_err(line_no, format!("unknown type '{}'", tok[1])))?;
                    Property::Scalar {
                        name: tok[2].to_string(),
                        ty,
                    }
                };
                el.props.push(prop);
            }
            Some("end_header") => break,
            Some(other) => return Err(parse_err(line_no, format!("unexpected header keyword '{}'", other))),
        }
    }
    let format = format.ok_or_else(|| parse_err(line_no, "header has no format line"))?;
    Ok(Header {
        format,
        elements,
        body_offset: pos,
    })
}

/// Per-vertex property values, in declaration order (lists are skipped).
struct Rows {
    names: Vec<(String, Scalar)>,
    values: Vec<Vec<f64>>,
}

fn read_vertices(bytes: &[u8], header: &Header) -> Result<Rows> {
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| parse_err(0, "no vertex element"))?;
    let vertex = &header.elements[vertex_pos];
    let names: Vec<(String, Scalar)> = vertex
        .props
        .iter()
        .filter_map(|p| match p {
            Property::Scalar { name, ty } => Some((name.clone(), *ty)),
            Property::List { .. } => None,
        })
        .collect();
    let mut values = Vec::with_capacity(vertex.count);
    let body = &bytes[header.body_offset..];
    match header.format {
        Format::Ascii => {
            let text = std::str::from_utf8(body).map_err(|_| parse_err(0, "ASCII body is not UTF-8"))?;
            let header_lines = bytes[..header.body_offset].iter().filter(|&&b| b == b'\n').count();
            let mut lines = text
                .lines()
                .enumerate()
                .map(|(i, l)| (i + header_lines + 1, l))
                .filter(|(_, l)| !l.trim().is_empty());
            for el in &header.elements[..=vertex_pos] {
                for _ in 0..el.count {
                    let (no, line) = lines
                        .next()
                        .ok_or_else(|| parse_err(0, format!("unexpected end of data in '{}'", el.name)))?;
                    if el.name != "vertex" {
                        continue;
                    }
                    let mut tok = line.split_whitespace();
                    let mut row = Vec::with_capacity(names.len());
                    for p in &el.props {
                        let mut next = || -> Result<f64> {
                            let t = tok.next().ok_or_else(|| parse_err(no, "too few values"))?;
                            t.parse::<f64>()
                                .map_err(|_| parse_err(no, format!("bad number '{}'", t)))
                        };
                        match p {
                            Property::Scalar { .. } => row.push(next()?),
                            Property::List { .. } => {
                                let n = next()? as usize;
                                for _ in 0..n {
                                    next()?;
                                }
                            }
                        }
                    }
                    values.push(row);
                }
            }
        }
        Format::BinaryLittleEndian => {
            let mut pos = 0;
            let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
                let s = body
                    .get(*pos..*pos + n)
                    .ok_or_else(|| parse_err(0, "unexpected end of binary data"))?;
                *pos += n;
                Ok(s)
            };
            for el in &header.elements[..=vertex_pos] {
                for _ in 0..el.count {
                    let mut row = Vec::with_capacity(names.len());
                    for p in &el.props {
                        match p {
                            Property::Scalar { ty, .. } => {
                                let v = ty.read_le(take(&mut pos, ty.size())?);
                                row.push(v);
                            }
                            Property::List { count, item } => {
                                let n = count.read_le(take(&mut pos, count.size())?) as usize;
                                take(&mut pos, n * item.size())?;
                            }
                        }
                    }
                    if el.name == "vertex" {
                        values.push(row);
                    }
                }
            }
        }
    }
    Ok(Rows { names, values })
}

pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let rows = read_vertices(bytes, &header)?;
    if rows.values.is_empty() {
        return Err(Error::EmptyInput("PLY file has zero vertices".into()));
    }
    let col = |name: &str| rows.names.iter().position(|(n, _)| n == name);
    let (x, y, z) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(parse_err(0, "vertex element lacks x, y, z")),
    };
    let coords: Vec<[f64; 3]> = rows.values.iter().map(|r| [r[x], r[y], r[z]]).collect();
    let m = coords.len();
    let mut cloud = PointCloud::from_coords(coords);
    if let (Some(r), Some(g), Some(b)) = (col("red"), col("green"), col("blue")) {
        let scale = [r, g, b].map(|c| rows.names[c].1.color_scale());
        cloud.colors = rows
            .values
            .iter()
            .map(|v| [v[r] / scale[0], v[g] / scale[1], v[b] / scale[2]])
            .collect();
    }
    if let (Some(a), Some(b), Some(c)) = (col("nx"), col("ny"), col("nz")) {
        let mut normals = Vec::with_capacity(m);
        for (i, v) in rows.values.iter().enumerate() {
            let n = normalize(&[v[a], v[b], v[c]])
                .ok_or_else(|| Error::Precondition(format!("vertex {} has a zero normal", i)))?;
            normals.push(n);
        }
        cloud.normals = Some(normals);
    }
    if let Some(l) = col("label") {
        cloud.labels = Some(rows.values.iter().map(|v| v[l] as u32).collect());
    }
    Ok(cloud)
}

pub fn load_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ply(&bytes)
}

/// Reads one named per-vertex scalar property (e.g. `similarity`).
pub fn read_scalar_property(path: impl AsRef<Path>, name: &str) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(&bytes)?;
    let rows = read_vertices(&bytes, &header)?;
    let c = rows
        .names
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| parse_err(0, format!("no vertex property '{}'", name)))?;
    Ok(rows.values.iter().map(|r| r[c]).collect())
}

/// Serializes a cloud with coordinates and normals as doubles, colors as
/// uchar, labels as int, and any extra named per-vertex double properties.
pub fn write_ply_bytes(cloud: &PointCloud, extra: &[(&str, &[f64])], format: Format) -> Result<Vec<u8>> {
    let m = cloud.len();
    for (name, vals) in extra {
        if vals.len() != m {
            return Err(Error::Precondition(format!(
                "property '{}' has {} values for {} points",
                name,
                vals.len(),
                m
            )));
        }
    }
    let mut out = Vec::new();
    let fmt = match format {
        Format::Ascii => "ascii",
        Format::BinaryLittleEndian => "binary_little_endian",
    };
    let mut header = format!("ply\nformat {} 1.0\nelement vertex {}\n", fmt, m);
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals.is_some() {
        header.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    if cloud.labels.is_some() {
        header.push_str("property int label\n");
    }
    for (name, _) in extra {
        header.push_str(&format!("property double {}\n", name));
    }
    header.push_str("end_header\n");
    out.extend_from_slice(header.as_bytes());

    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for i in 0..m {
        let mut doubles: Vec<f64> = cloud.coords[i].to_vec();
        if let Some(n) = &cloud.normals {
            doubles.extend_from_slice(&n[i]);
        }
        let rgb = cloud.colors[i].map(to_u8);
        let label = cloud.labels.as_ref().map(|l| l[i] as i32);
        match format {
            Format::Ascii => {
                let mut line: Vec<String> = doubles.iter().map(|v| format!("{:?}", v)).collect();
                line.extend(rgb.iter().map(|c| c.to_string()));
                if let Some(l) = label {
                    line.push(l.to_string());
                }
                line.extend(extra.iter().map(|(_, v)| format!("{:?}", v[i])));
                writeln!(out, "{}", line.join(" ")).expect("write to Vec");
            }
            Format::BinaryLittleEndian => {
                for v in doubles {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&rgb);
                if let Some(l) = label {
                    out.extend_from_slice(&l.to_le_bytes());
                }
                for (_, v) in extra {
                    out.extend_from_slice(&v[i].to_le_bytes());
                }
            }
        }
    }
    Ok(out)
}

pub fn write_ply(path: impl AsRef<Path>, cloud: &PointCloud, extra: &[(&str, &[f64])], format: Format) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_ply_bytes(cloud, extra, format)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
