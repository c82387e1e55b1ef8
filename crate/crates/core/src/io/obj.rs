//! Wavefront OBJ reader/writer, `v` and `f` lines only. Face tokens may
//! carry `/`-separated texture/normal indices, which are dropped;
//! polygons are fan-triangulated.

use std::path::Path;

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::mesh::Mesh;

use super::write_atomic;

fn fmt_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        file: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path)?;
    let mut points: Vec<Point3<f64>> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut toks = line.split_whitespace();
        match toks.next() {
            Some("v") => {
                let mut coord = || -> Result<f64> {
                    toks.next()
                        .ok_or_else(|| fmt_err(path, line_no, "vertex needs 3 coordinates"))?
                        .parse()
                        .map_err(|_| fmt_err(path, line_no, "bad vertex coordinate"))
                };
                let (x, y, z) = (coord()?, coord()?, coord()?);
                points.push(Point3::new(x, y, z));
            }
            Some("f") => {
                let mut face: Vec<usize> = Vec::new();
                for tok in toks {
                    let idx_tok = tok.split('/').next().unwrap_or("");
                    let idx: i64 = idx_tok
                        .parse()
                        .map_err(|_| fmt_err(path, line_no, "bad face index"))?;
                    if idx < 1 {
                        return Err(fmt_err(path, line_no, "face indices must be >= 1"));
                    }
                    face.push(idx as usize - 1);
                }
                if face.len() < 3 {
                    return Err(fmt_err(path, line_no, "face with fewer than 3 vertices"));
                }
                for k in 1..face.len() - 1 {
                    triangles.push([face[0], face[k], face[k + 1]]);
                }
            }
            // Other directives (vn, vt, o, g, s, usemtl, ...) are ignored.
            _ => {}
        }
    }
    if points.is_empty() {
        return Err(fmt_err(path, 0, "no vertices"));
    }
    Mesh::new(points, triangles)
}

pub fn write_obj(path: &Path, points: &[Point3<f64>], triangles: &[[usize; 3]]) -> Result<()> {
    let mut out = String::new();
    for p in points {
        out.push_str(&format!("v {} {} {}\n", p.x, p.y, p.z));
    }
    for t in triangles {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    write_atomic(path, out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        let points = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.5, -0.25, 0.0),
            Point3::new(0.1, 3.0_f64.sqrt(), 0.125),
        ];
        let tris = vec![[0, 1, 2]];
        write_obj(&path, &points, &tris).unwrap();
        let mesh = read_obj(&path).unwrap();
        assert_eq!(mesh.points(), &points[..]);
        assert_eq!(mesh.triangles(), &tris[..]);
    }

    #[test]
    fn slashed_face_tokens_use_vertex_index() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        std::fs::write(&path, "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1/2/3 2//1 3/4\n").unwrap();
        let mesh = read_obj(&path).unwrap();
        assert_eq!(mesh.triangles(), &[[0, 1, 2]]);
    }

    #[test]
    fn bad_coordinate_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.obj");
        std::fs::write(&path, "v 0 0 0\nv x 0 0\n").unwrap();
        match read_obj(&path) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
