//! ASCII OBJ and binary little-endian PLY.

use std::fmt::Write as _;
use std::path::Path;

use super::linalg::Vec3;
use super::mesh::Mesh;
use crate::error::{Error, Result};

fn corrupt(path: &Path, detail: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn obj_to_string(mesh: &Mesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(s, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    s
}

/// Parse `v` and `f` records; polygons are fan-triangulated and
/// `f a/b/c` references keep only the vertex index.
pub fn obj_from_str(text: &str, path: &Path) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it
                    .take(3)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| corrupt(path, format!("line {}: {e}", lineno + 1)))?;
                if c.len() != 3 {
                    return Err(corrupt(path, format!("line {}: vertex needs 3 coordinates", lineno + 1)));
                }
                vertices.push([c[0], c[1], c[2]]);
            }
            Some("f") => {
                let idx: Vec<u32> = it
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or("");
                        let i: i64 = first
                            .parse()
                            .map_err(|_| corrupt(path, format!("line {}: bad index `{t}`", lineno + 1)))?;
                        let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                        u32::try_from(resolved).map_err(|_| corrupt(path, format!("line {}: index {i} out of range", lineno + 1)))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(corrupt(path, format!("line {}: face needs 3 indices", lineno + 1)));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(vertices, faces).map_err(|e| corrupt(path, e.to_string()))
}

pub fn write_obj(path: &Path, mesh: &Mesh) -> Result<()> {
    std::fs::write(path, obj_to_string(mesh)).map_err(|e| Error::io(path, e))
}

pub fn read_obj(path: &Path) -> Result<Mesh> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    obj_from_str(&text, path)
}

pub fn ply_to_bytes(mesh: &Mesh) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.faces.len()
    );
    let mut out = header.into_bytes();
    for v in &mesh.vertices {
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for f in &mesh.faces {
        out.push(3);
        for i in f {
            out.extend_from_slice(&(*i as i32).to_le_bytes());
        }
    }
    out
}

/// Point cloud with a uniform RGB color per point (no faces).
pub fn points_ply_bytes(points: &[Vec3], rgb: [u8; 3]) -> Vec<u8> {
    let header = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n",
        points.len()
    );
    let mut out = header.into_bytes();
    for p in points {
        for x in p {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&rgb);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
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
    fn parse(s: &str) -> Option<Self> {
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

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().expect("4")) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().expect("4")) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().expect("4")) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8")),
        }
    }
}

enum Property {
    Scalar(String, Scalar),
    List(Scalar, Scalar),
}

struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

/// Parse a binary little-endian PLY holding a triangle mesh (or a point cloud).
pub fn ply_from_bytes(bytes: &[u8], path: &Path) -> Result<Mesh> {
    const END: &[u8] = b"end_header\n";
    let hend = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| corrupt(path, "missing end_header"))?
        + END.len();
    let header = std::str::from_utf8(&bytes[..hend]).map_err(|_| corrupt(path, "header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("ply") {
        return Err(corrupt(path, "not a PLY file"));
    }
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        match t.as_slice() {
            ["format", fmt, _] if *fmt != "binary_little_endian" => {
                return Err(corrupt(path, format!("unsupported format `{fmt}`")));
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| corrupt(path, format!("bad count `{count}`")))?,
                props: Vec::new(),
            }),
            ["property", "list", ct, it, _] => {
                let (c, i) = (Scalar::parse(ct), Scalar::parse(it));
                let (Some(c), Some(i), Some(e)) = (c, i, elements.last_mut()) else {
                    return Err(corrupt(path, format!("bad list property `{line}`")));
                };
                e.props.push(Property::List(c, i));
            }
            ["property", ty, name] => {
                let (Some(s), Some(e)) = (Scalar::parse(ty), elements.last_mut()) else {
                    return Err(corrupt(path, format!("bad property `{line}`")));
                };
                e.props.push(Property::Scalar(name.to_string(), s));
            }
            _ => {}
        }
    }
    let mut pos = hend;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        let s = bytes.get(*pos..*pos + n).ok_or_else(|| corrupt(path, "truncated body"))?;
        *pos += n;
        Ok(s)
    };
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for e in &elements {
        for _ in 0..e.count {
            let mut xyz = [0.0; 3];
            for p in &e.props {
                match p {
                    Property::Scalar(name, s) => {
                        let v = s.read(take(&mut pos, s.size())?);
                        if e.name == "vertex" {
                            match name.as_str() {
                                "x" => xyz[0] = v,
                                "y" => xyz[1] = v,
                                "z" => xyz[2] = v,
                                _ => {}
                            }
                        }
                    }
                    Property::List(cs, is) => {
                        let n = cs.read(take(&mut pos, cs.size())?) as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(is.read(take(&mut pos, is.size())?));
                        }
                        if e.name == "face" {
                            if n < 3 || idx.iter().any(|i| *i < 0.0) {
                                return Err(corrupt(path, "bad face record"));
                            }
                            for k in 1..n - 1 {
                                faces.push([idx[0] as u32, idx[k] as u32, idx[k + 1] as u32]);
                            }
                        }
                    }
                }
            }
            if e.name == "vertex" {
                vertices.push(xyz);
            }
        }
    }
    Mesh::new(vertices, faces).map_err(|e| corrupt(path, e.to_string()))
}

pub fn write_ply(path: &Path, mesh: &Mesh) -> Result<()> {
    std::fs::write(path, ply_to_bytes(mesh)).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<Mesh> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ply_from_bytes(&bytes, path)
}

pub fn write_points_ply(path: &Path, points: &[Vec3], rgb: [u8; 3]) -> Result<()> {
    std::fs::write(path, points_ply_bytes(points, rgb)).map_err(|e| Error::io(path, e))
}
