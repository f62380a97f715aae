//! Wavefront OBJ import and export for triangle meshes.
//!
//! Supports `v`, `vt`, and `f` records with 1-based indices. Texture
//! coordinates are stored per vertex: every `i/it` face corner assigns
//! `vt[it]` to vertex `i`. Faces with more than three corners are
//! fan-triangulated. Floats are written with Rust's shortest
//! round-trip formatting, so write/read cycles reproduce coordinates
//! bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Point3, Vector2};

use crate::error::KdsmError;
use crate::geometry::TriMesh;

pub fn read_obj(path: &Path) -> Result<TriMesh, KdsmError> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let path_str = path.display().to_string();
    let parse_err = |line: usize, message: String| KdsmError::Parse {
        path: path_str.clone(),
        line,
        message,
    };

    let mut positions: Vec<Point3<f64>> = Vec::new();
    let mut texcoords: Vec<Vector2<f64>> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    let mut vertex_uv: Vec<Option<Vector2<f64>>> = Vec::new();

    for (line_idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = line_idx + 1;
        let mut fields = line.split_whitespace();
        let Some(tag) = fields.next() else { continue };
        match tag {
            "v" => {
                let mut coord = [0.0; 3];
                for c in &mut coord {
                    let field = fields
                        .next()
                        .ok_or_else(|| parse_err(lineno, "vertex needs 3 coordinates".into()))?;
                    *c = field
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad float {field:?}")))?;
                }
                positions.push(Point3::new(coord[0], coord[1], coord[2]));
                vertex_uv.push(None);
            }
            "vt" => {
                let mut coord = [0.0; 2];
                for c in &mut coord {
                    let field = fields.next().ok_or_else(|| {
                        parse_err(lineno, "texture coordinate needs 2 components".into())
                    })?;
                    *c = field
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad float {field:?}")))?;
                }
                texcoords.push(Vector2::new(coord[0], coord[1]));
            }
            "f" => {
                let mut corners: Vec<usize> = Vec::new();
                for field in fields {
                    let mut parts = field.split('/');
                    let vi_field = parts.next().unwrap_or("");
                    let vi: usize = vi_field
                        .parse()
                        .map_err(|_| parse_err(lineno, format!("bad vertex index {field:?}")))?;
                    if vi == 0 || vi > positions.len() {
                        return Err(parse_err(lineno, format!("vertex index {vi} out of range")));
                    }
                    if let Some(ti_field) = parts.next().filter(|s| !s.is_empty()) {
                        let ti: usize = ti_field.parse().map_err(|_| {
                            parse_err(lineno, format!("bad texture index {field:?}"))
                        })?;
                        if ti == 0 || ti > texcoords.len() {
                            return Err(parse_err(
                                lineno,
                                format!("texture index {ti} out of range"),
                            ));
                        }
                        vertex_uv[vi - 1] = Some(texcoords[ti - 1]);
                    }
                    corners.push(vi - 1);
                }
                if corners.len() < 3 {
                    return Err(parse_err(lineno, "face needs at least 3 corners".into()));
                }
                for k in 1..corners.len() - 1 {
                    triangles.push([corners[0], corners[k], corners[k + 1]]);
                }
            }
            _ => {} // comments, normals, groups: ignored
        }
    }

    let with_uv = vertex_uv.iter().filter(|uv| uv.is_some()).count();
    let uvs = if with_uv == 0 {
        None
    } else if with_uv == positions.len() {
        Some(vertex_uv.into_iter().map(|uv| uv.unwrap()).collect())
    } else {
        return Err(parse_err(
            0,
            format!(
                "texture coordinates cover {with_uv} of {} vertices; need all or none",
                positions.len()
            ),
        ));
    };

    Ok(TriMesh {
        vertices: positions,
        triangles,
        uvs,
    })
}

pub fn write_obj(path: &Path, mesh: &TriMesh) -> Result<(), KdsmError> {
    if let Some(uvs) = &mesh.uvs {
        if uvs.len() != mesh.vertices.len() {
            return Err(KdsmError::ShapeMismatch(format!(
                "{} texture coordinates for {} vertices",
                uvs.len(),
                mesh.vertices.len()
            )));
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    if let Some(uvs) = &mesh.uvs {
        for uv in uvs {
            writeln!(out, "vt {} {}", uv.x, uv.y)?;
        }
        for t in &mesh.triangles {
            writeln!(
                out,
                "f {}/{} {}/{} {}/{}",
                t[0] + 1,
                t[0] + 1,
                t[1] + 1,
                t[1] + 1,
                t[2] + 1,
                t[2] + 1
            )?;
        }
    } else {
        for t in &mesh.triangles {
            writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
    }
    out.flush()?;
    Ok(())
}
