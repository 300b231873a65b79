//! Wavefront OBJ reader/writer restricted to triangle meshes.
//!
//! Supported statements: `v x y z`, `vt u v`, `f a b c` (with optional
//! `/vt` and `//vn` suffixes per corner, which are ignored), comments, and
//! blank lines. Faces with more or fewer than three corners are rejected.
//! Texture coordinates are returned only when the file carries exactly one
//! `vt` per vertex, the layout of registered face meshes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::mesh::VertexShape;

fn parse_floats(path: &str, line_no: usize, parts: &[&str], n: usize) -> Result<Vec<f64>> {
    if parts.len() != n {
        return Err(Error::Parse {
            path: path.to_string(),
            line: line_no,
            msg: format!("expected {n} numbers, found {}", parts.len()),
        });
    }
    parts
        .iter()
        .map(|p| {
            p.parse::<f64>().map_err(|_| Error::Parse {
                path: path.to_string(),
                line: line_no,
                msg: format!("not a number: {p}"),
            })
        })
        .collect()
}

/// One face corner: the leading vertex index, 1-based as written.
fn parse_corner(path: &str, line_no: usize, token: &str) -> Result<usize> {
    let lead = token.split('/').next().unwrap_or("");
    let idx: i64 = lead.parse().map_err(|_| Error::Parse {
        path: path.to_string(),
        line: line_no,
        msg: format!("not a vertex index: {token}"),
    })?;
    if idx < 1 {
        return Err(Error::Unsupported {
            path: path.to_string(),
            line: line_no,
            msg: format!("non-positive (relative) vertex index {idx}"),
        });
    }
    Ok((idx - 1) as usize)
}

/// Parse an OBJ file into vertices, triangles, and texture coordinates when
/// one `vt` is present per vertex.
pub fn load_obj(path: &Path) -> Result<(VertexShape, Vec<[usize; 3]>, Option<Vec<(f64, f64)>>)> {
    let text = std::fs::read_to_string(path)?;
    let pname = path.display().to_string();
    let mut positions: Vec<[f64; 3]> = Vec::new();
    let mut uvs: Vec<(f64, f64)> = Vec::new();
    // Faces keep their line number so index validation at the end can still
    // point at the offending line.
    let mut faces: Vec<([usize; 3], usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let keyword = it.next().expect("non-empty line has a first token");
        let rest: Vec<&str> = it.collect();
        match keyword {
            "v" => {
                let xyz = parse_floats(&pname, line_no, &rest, 3)?;
                positions.push([xyz[0], xyz[1], xyz[2]]);
            }
            "vt" => {
                let uv = parse_floats(&pname, line_no, &rest, 2)?;
                uvs.push((uv[0], uv[1]));
            }
            "f" => {
                if rest.len() != 3 {
                    return Err(Error::Unsupported {
                        path: pname,
                        line: line_no,
                        msg: format!("face with {} corners; only triangles are supported", rest.len()),
                    });
                }
                let a = parse_corner(&pname, line_no, rest[0])?;
                let b = parse_corner(&pname, line_no, rest[1])?;
                let c = parse_corner(&pname, line_no, rest[2])?;
                faces.push(([a, b, c], line_no));
            }
            // Normals, groups, materials, smoothing: carried by many
            // exporters, irrelevant here.
            "vn" | "g" | "o" | "s" | "usemtl" | "mtllib" => continue,
            other => {
                return Err(Error::Parse {
                    path: pname,
                    line: line_no,
                    msg: format!("unknown statement: {other}"),
                });
            }
        }
    }
    let q = positions.len();
    let mut triangles = Vec::with_capacity(faces.len());
    for (tri, line_no) in faces {
        if let Some(&bad) = tri.iter().find(|&&v| v >= q) {
            return Err(Error::Parse {
                path: pname,
                line: line_no,
                msg: format!("face references vertex {} but only {q} are defined", bad + 1),
            });
        }
        triangles.push(tri);
    }
    let uv = if !uvs.is_empty() && uvs.len() == q { Some(uvs) } else { None };
    Ok((VertexShape::new(positions), triangles, uv))
}

/// Write a triangle mesh as OBJ. Numbers are printed with Rust's shortest
/// round-trip formatting, so a load after a save reproduces every value bit
/// for bit.
pub fn save_obj(
    path: &Path,
    shape: &VertexShape,
    triangles: &[[usize; 3]],
    uv: Option<&[(f64, f64)]>,
) -> Result<()> {
    if let Some(uvs) = uv {
        if uvs.len() != shape.len() {
            return Err(Error::Mismatch(format!(
                "{} texture coordinates for {} vertices",
                uvs.len(),
                shape.len()
            )));
        }
    }
    for (i, t) in triangles.iter().enumerate() {
        if t.iter().any(|&v| v >= shape.len()) {
            return Err(Error::Mismatch(format!(
                "triangle {i} references a vertex outside 0..{}",
                shape.len()
            )));
        }
    }
    let mut out = String::new();
    for p in &shape.positions {
        out.push_str(&format!("v {} {} {}\n", p[0], p[1], p[2]));
    }
    if let Some(uvs) = uv {
        for (u, v) in uvs {
            out.push_str(&format!("vt {u} {v}\n"));
        }
    }
    let with_uv = uv.is_some();
    for t in triangles {
        if with_uv {
            out.push_str(&format!(
                "f {}/{} {}/{} {}/{}\n",
                t[0] + 1,
                t[0] + 1,
                t[1] + 1,
                t[1] + 1,
                t[2] + 1,
                t[2] + 1
            ));
        } else {
            out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
    }
    atomic_write(path, out.as_bytes())
}
