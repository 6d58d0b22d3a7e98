//! ASCII PLY export/import for point clouds and triangle meshes.
//!
//! Coordinates are written with shortest round-trip formatting, so a
//! write/read cycle reproduces every `f64` exactly.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io_util::{read_file, write_atomic};
use crate::shape::{PointCloud, TriangleMesh};

pub fn encode(cloud: &PointCloud, faces: &[[usize; 3]]) -> String {
    let mut s = String::with_capacity(32 * cloud.len() + 16 * faces.len() + 200);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    s.push_str("property float x\nproperty float y\nproperty float z\n");
    let _ = writeln!(s, "element face {}", faces.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for p in cloud.points() {
        let _ = writeln!(s, "{} {} {}", p[0], p[1], p[2]);
    }
    for f in faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlyData {
    pub cloud: PointCloud,
    pub faces: Vec<[usize; 3]>,
}

impl PlyData {
    pub fn into_mesh(self) -> Result<TriangleMesh> {
        TriangleMesh::new(self.cloud, self.faces)
    }
}

struct Element {
    name: String,
    count: usize,
    props: Vec<String>,
}

fn err(msg: impl Into<String>) -> Error {
    Error::format("PLY", msg)
}

pub fn decode(text: &str) -> Result<PlyData> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(err("missing 'ply' magic"));
    }
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line = lines
            .next()
            .ok_or_else(|| err("header has no end_header"))?
            .trim();
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("format") => {
                if tok.next() != Some("ascii") {
                    return Err(err(format!("unsupported format line {line:?}")));
                }
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("element") => {
                let name = tok.next().ok_or_else(|| err("element without name"))?;
                let count = tok
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| err(format!("bad element line {line:?}")))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| err("property before any element"))?;
                let name = line.split_whitespace().last().unwrap_or_default();
                el.props.push(name.to_string());
            }
            Some("end_header") => break,
            Some(other) => return Err(err(format!("unknown header keyword {other:?}"))),
        }
    }

    let mut coords = Vec::new();
    let mut faces = Vec::new();
    for el in &elements {
        for i in 0..el.count {
            let line = lines
                .next()
                .ok_or_else(|| err(format!("{} element {i} missing", el.name)))?;
            let vals: Vec<&str> = line.split_whitespace().collect();
            match el.name.as_str() {
                "vertex" => {
                    for axis in ["x", "y", "z"] {
                        let idx = el
                            .props
                            .iter()
                            .position(|p| p == axis)
                            .ok_or_else(|| err(format!("vertex has no {axis} property")))?;
                        let v: f64 = vals
                            .get(idx)
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| err(format!("bad vertex line {i}: {line:?}")))?;
                        coords.push(v);
                    }
                }
                "face" => {
                    let idx: Vec<usize> = vals
                        .iter()
                        .map(|s| s.parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| err(format!("bad face line {i}: {line:?}")))?;
                    if idx.len() != 4 || idx[0] != 3 {
                        return Err(err(format!("face {i} is not a triangle")));
                    }
                    faces.push([idx[1], idx[2], idx[3]]);
                }
                _ => {}
            }
        }
    }
    Ok(PlyData {
        cloud: PointCloud::from_flat(coords)?,
        faces,
    })
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, encode(cloud, &[]).as_bytes())
}

pub fn write_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    write_atomic(path, encode(mesh.cloud(), mesh.faces()).as_bytes())
}

pub fn read(path: &Path) -> Result<PlyData> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| err("file is not ASCII"))?;
    decode(&text)
}
