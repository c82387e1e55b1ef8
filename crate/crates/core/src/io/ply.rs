//! PLY reader/writer. Supported subset: ASCII and binary little-endian,
//! an `element vertex` with float32 or float64 x, y, z (other scalar
//! properties are skipped) and an `element face` with a `uchar`-counted
//! integer index list.

use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

use super::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq)]
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
    fn parse(tok: &str) -> Option<Self> {
        Some(match tok {
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

    fn read_f64(self, bytes: &[u8]) -> f64 {
        match self {
            Scalar::I8 => bytes[0] as i8 as f64,
            Scalar::U8 => bytes[0] as f64,
            Scalar::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar {
        ty: Scalar,
        name: String,
    },
    List {
        count: Scalar,
        item: Scalar,
        name: String,
    },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    binary: bool,
    elements: Vec<Element>,
    /// Byte offset of the body within the file.
    body_start: usize,
    header_lines: usize,
}

fn fmt_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_header(path: &Path, data: &[u8]) -> Result<Header> {
    let mut elements: Vec<Element> = Vec::new();
    let mut binary = None;
    let mut offset = 0;
    let mut line_no = 0;
    loop {
        let rest = &data[offset..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err(path, line_no + 1, "missing end_header"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| fmt_err(path, line_no + 1, "non-UTF8 header line"))?
            .trim_end_matches('\r');
        offset += end + 1;
        line_no += 1;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["ply"] if line_no == 1 => {}
            _ if line_no == 1 => return Err(fmt_err(path, 1, "missing ply magic")),
            ["comment", ..] | [] => {}
            ["format", "ascii", "1.0"] => binary = Some(false),
            ["format", "binary_little_endian", "1.0"] => binary = Some(true),
            ["format", ..] => {
                return Err(fmt_err(
                    path,
                    line_no,
                    format!("unsupported format: {line}"),
                ))
            }
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| fmt_err(path, line_no, "bad element count"))?;
                elements.push(Element {
                    name: (*name).into(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", "list", count, item, name] => {
                let (count, item) = match (Scalar::parse(count), Scalar::parse(item)) {
                    (Some(c), Some(i)) => (c, i),
                    _ => return Err(fmt_err(path, line_no, format!("bad list property: {line}"))),
                };
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| fmt_err(path, line_no, "property before element"))?;
                elem.properties.push(Property::List {
                    count,
                    item,
                    name: (*name).into(),
                });
            }
            ["property", ty, name] => {
                let ty = Scalar::parse(ty)
                    .ok_or_else(|| fmt_err(path, line_no, format!("bad property type: {ty}")))?;
                let elem = elements
                    .last_mut()
                    .ok_or_else(|| fmt_err(path, line_no, "property before element"))?;
                elem.properties.push(Property::Scalar {
                    ty,
                    name: (*name).into(),
                });
            }
            ["end_header"] => {
                let binary = binary.ok_or_else(|| fmt_err(path, line_no, "missing format line"))?;
                return Ok(Header {
                    binary,
                    elements,
                    body_start: offset,
                    header_lines: line_no,
                });
            }
            _ => return Err(fmt_err(path, line_no, format!("bad header line: {line}"))),
        }
    }
}

pub fn read_ply(path: &Path) -> Result<Mesh> {
    let data = std::fs::read(path)?;
    let header = parse_header(path, &data)?;

    let mut points: Vec<Point3<f64>> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();

    if header.binary {
        let mut pos = header.body_start;
        let mut take = |n: usize| -> Result<&[u8]> {
            if pos + n > data.len() {
                return Err(fmt_err(path, 0, format!("truncated body at byte {pos}")));
            }
            let s = &data[pos..pos + n];
            pos += n;
            Ok(s)
        };
        for elem in &header.elements {
            let xyz = vertex_axes(path, elem)?;
            for _ in 0..elem.count {
                let mut coords = [0.0f64; 3];
                let mut face: Vec<usize> = Vec::new();
                for (pi, prop) in elem.properties.iter().enumerate() {
                    match prop {
                        Property::Scalar { ty, .. } => {
                            let v = ty.read_f64(take(ty.size())?);
                            if let Some(axes) = &xyz {
                                if let Some(a) = axes.iter().position(|&ax| ax == pi) {
                                    coords[a] = v;
                                }
                            }
                        }
                        Property::List { count, item, name } => {
                            let n = count.read_f64(take(count.size())?) as usize;
                            for _ in 0..n {
                                let v = item.read_f64(take(item.size())?);
                                if elem.name == "face" && name == "vertex_indices" {
                                    face.push(v as usize);
                                }
                            }
                        }
                    }
                }
                if xyz.is_some() {
                    points.push(Point3::new(coords[0], coords[1], coords[2]));
                }
                if !face.is_empty() {
                    push_face(path, 0, &face, &mut triangles)?;
                }
            }
        }
    } else {
        let text = std::str::from_utf8(&data[header.body_start..])
            .map_err(|_| fmt_err(path, header.header_lines + 1, "non-UTF8 body"))?;
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (header.header_lines + 1 + i, l))
            .filter(|(_, l)| !l.trim().is_empty());
        for elem in &header.elements {
            let xyz = vertex_axes(path, elem)?;
            for _ in 0..elem.count {
                let (line_no, line) = lines
                    .next()
                    .ok_or_else(|| fmt_err(path, header.header_lines + 1, "body ended early"))?;
                let mut toks = line.split_whitespace();
                let next_f64 = |toks: &mut dyn Iterator<Item = &str>| -> Result<f64> {
                    toks.next()
                        .ok_or_else(|| fmt_err(path, line_no, "missing value"))?
                        .parse()
                        .map_err(|_| fmt_err(path, line_no, "bad number"))
                };
                let mut coords = [0.0f64; 3];
                let mut face: Vec<usize> = Vec::new();
                for (pi, prop) in elem.properties.iter().enumerate() {
                    match prop {
                        Property::Scalar { .. } => {
                            let v = next_f64(&mut toks)?;
                            if let Some(axes) = &xyz {
                                if let Some(a) = axes.iter().position(|&ax| ax == pi) {
                                    coords[a] = v;
                                }
                            }
                        }
                        Property::List { name, .. } => {
                            let n = next_f64(&mut toks)? as usize;
                            for _ in 0..n {
                                let v = next_f64(&mut toks)?;
                                if elem.name == "face" && name == "vertex_indices" {
                                    face.push(v as usize);
                                }
                            }
                        }
                    }
                }
                if xyz.is_some() {
                    points.push(Point3::new(coords[0], coords[1], coords[2]));
                }
                if !face.is_empty() {
                    push_face(path, line_no, &face, &mut triangles)?;
                }
            }
        }
    }

    if points.is_empty() {
        return Err(fmt_err(path, 0, "no vertex element"));
    }
    Mesh::new(points, triangles)
}

/// Property indices of x, y, z if this is the vertex element.
fn vertex_axes(path: &Path, elem: &Element) -> Result<Option<[usize; 3]>> {
    if elem.name != "vertex" {
        return Ok(None);
    }
    let find = |n: &str| {
        elem.properties.iter().position(|p| match p {
            Property::Scalar { ty, name } => name == n && matches!(ty, Scalar::F32 | Scalar::F64),
            _ => false,
        })
    };
    match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => Ok(Some([x, y, z])),
        _ => Err(fmt_err(path, 0, "vertex element lacks float x, y, z")),
    }
}

/// Fan-triangulates a polygonal face.
fn push_face(
    path: &Path,
    line: usize,
    face: &[usize],
    triangles: &mut Vec<[usize; 3]>,
) -> Result<()> {
    if face.len() < 3 {
        return Err(fmt_err(path, line, "face with fewer than 3 indices"));
    }
    for i in 1..face.len() - 1 {
        triangles.push([face[0], face[i], face[i + 1]]);
    }
    Ok(())
}

fn ascii_header(vertex_count: usize, face_count: usize, colored: bool) -> String {
    let mut h = String::from("ply\nformat ascii 1.0\n");
    h.push_str(&format!("element vertex {vertex_count}\n"));
    h.push_str("property double x\nproperty double y\nproperty double z\n");
    if colored {
        h.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    h.push_str(&format!("element face {face_count}\n"));
    h.push_str("property list uchar int vertex_indices\nend_header\n");
    h
}

pub fn write_ply_ascii(
    path: &Path,
    points: &[Point3<f64>],
    triangles: &[[usize; 3]],
) -> Result<()> {
    let mut out = ascii_header(points.len(), triangles.len(), false);
    for p in points {
        out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    for t in triangles {
        out.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_ply_binary(
    path: &Path,
    points: &[Point3<f64>],
    triangles: &[[usize; 3]],
) -> Result<()> {
    let mut out = String::from("ply\nformat binary_little_endian 1.0\n");
    out.push_str(&format!("element vertex {}\n", points.len()));
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    out.push_str(&format!("element face {}\n", triangles.len()));
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    let mut bytes = out.into_bytes();
    for p in points {
        for v in [p.x, p.y, p.z] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    for t in triangles {
        bytes.push(3);
        for &i in t {
            bytes.extend_from_slice(&(i as i32).to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

/// Deterministic per-part color: golden-ratio hue stepping, so nearby
/// part ids get far-apart hues.
pub(crate) fn part_color(part: usize) -> [u8; 3] {
    let h = (part as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let (s, v) = (0.75, 0.95);
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

pub fn write_colored_ply(
    path: &Path,
    points: &[Point3<f64>],
    triangles: &[[usize; 3]],
    labels: &[usize],
) -> Result<()> {
    if labels.len() != points.len() {
        return Err(Error::Structural(format!(
            "{} labels for {} vertices",
            labels.len(),
            points.len()
        )));
    }
    let mut out = ascii_header(points.len(), triangles.len(), true);
    for (p, &l) in points.iter().zip(labels) {
        let [r, g, b] = part_color(l);
        out.push_str(&format!("{} {} {} {r} {g} {b}\n", p.x, p.y, p.z));
    }
    for t in triangles {
        out.push_str(&format!("3 {} {} {}\n", t[0], t[1], t[2]));
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Vec<Point3<f64>>, Vec<[usize; 3]>) {
        (
            vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.25, -0.5),
                Point3::new(0.3, 1.0, 0.7),
                Point3::new(-0.125, 0.5, 2.0_f64.sqrt()),
            ],
            vec![[0, 1, 2], [1, 3, 2]],
        )
    }

    #[test]
    fn ascii_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let (points, tris) = sample();
        write_ply_ascii(&path, &points, &tris).unwrap();
        let mesh = read_ply(&path).unwrap();
        // Shortest round-trip float formatting makes even ASCII exact.
        assert_eq!(mesh.points(), &points[..]);
        assert_eq!(mesh.triangles(), &tris[..]);
    }

    #[test]
    fn binary_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let (points, tris) = sample();
        write_ply_binary(&path, &points, &tris).unwrap();
        let mesh = read_ply(&path).unwrap();
        for (a, b) in mesh.points().iter().zip(&points) {
            assert_eq!(a.coords.as_slice(), b.coords.as_slice());
        }
        assert_eq!(mesh.triangles(), &tris[..]);
    }

    #[test]
    fn float32_vertices_and_extra_properties_are_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let text = "ply\nformat ascii 1.0\nelement vertex 3\n\
                    property float x\nproperty float y\nproperty float z\n\
                    property uchar red\n\
                    element face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n\
                    0 0 0 255\n1 0 0 0\n0 1 0 7\n3 0 1 2\n";
        std::fs::write(&path, text).unwrap();
        let mesh = read_ply(&path).unwrap();
        assert_eq!(mesh.vertex_count(), 3);
        assert_eq!(mesh.triangles(), &[[0, 1, 2]]);
    }

    #[test]
    fn quads_are_fan_triangulated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ply");
        let text = "ply\nformat ascii 1.0\nelement vertex 4\n\
                    property double x\nproperty double y\nproperty double z\n\
                    element face 1\nproperty list uchar int vertex_indices\n\
                    end_header\n\
                    0 0 0\n1 0 0\n1 1 0\n0 1 0\n4 0 1 2 3\n";
        std::fs::write(&path, text).unwrap();
        let mesh = read_ply(&path).unwrap();
        assert_eq!(mesh.triangles(), &[[0, 1, 2], [0, 2, 3]]);
    }

    #[test]
    fn parse_errors_carry_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ply");
        std::fs::write(
            &path,
            "ply\nformat ascii 1.0\nelement vertex 1\n\
             property double x\nproperty double y\nproperty double z\n\
             element face 0\nproperty list uchar int vertex_indices\n\
             end_header\n0 bogus 0\n",
        )
        .unwrap();
        match read_ply(&path) {
            Err(Error::Format { file, line, .. }) => {
                assert!(file.ends_with("bad.ply"));
                assert_eq!(line, 10);
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn colored_output_has_rgb_per_vertex() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let (points, tris) = sample();
        write_colored_ply(&path, &points, &tris, &[0, 1, 0, 1]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("property uchar red"));
        // Same part, same color; different parts, different colors.
        let lines: Vec<&str> = text.lines().collect();
        let rgb = |l: &str| {
            l.split_whitespace()
                .skip(3)
                .map(|t| t.parse::<u8>().unwrap())
                .collect::<Vec<_>>()
        };
        let body = &lines[lines.iter().position(|&l| l == "end_header").unwrap() + 1..];
        assert_eq!(rgb(body[0]), rgb(body[2]));
        assert_ne!(rgb(body[0]), rgb(body[1]));
    }
}
