//! BCC tetrahedral lattice generation from a level set, 1:8 red
//! refinement, and tet mesh file I/O.
//!
//! The lattice follows the body-centered-cubic construction: nodes at
//! the corners and centers of a uniform cell grid, and four tetrahedra
//! per interior cell face, each connecting the two adjacent cell
//! centers with one edge of the shared face. A tetrahedron is kept
//! when the thickened level set is negative at any of its four
//! vertices or at its centroid.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::error::KdsmError;
use crate::geometry::{tet_signed_volume, TetMesh};
use crate::level_set::ScalarGrid;

/// Builds the kept BCC lattice over the grid bounds with cell size `h`.
/// Unreferenced nodes are dropped and indices compacted; every kept tet
/// is positively oriented. Vertex and tet order are deterministic
/// functions of the input.
pub fn build_lattice(phi_thick: &ScalarGrid, h: f64) -> Result<TetMesh, KdsmError> {
    if !(h > 0.0) {
        return Err(KdsmError::EmptyInput("lattice cell size must be positive".into()));
    }
    let extent = phi_thick.max_corner() - phi_thick.origin;
    let cells = [
        (extent.x / h).ceil().max(1.0) as usize,
        (extent.y / h).ceil().max(1.0) as usize,
        (extent.z / h).ceil().max(1.0) as usize,
    ];
    let origin = phi_thick.origin;

    let [ncx, ncy, ncz] = cells;
    let n_corners = (ncx + 1) * (ncy + 1) * (ncz + 1);
    let corner_id = |i: usize, j: usize, k: usize| (i * (ncy + 1) + j) * (ncz + 1) + k;
    let center_id = |i: usize, j: usize, k: usize| n_corners + (i * ncy + j) * ncz + k;

    let mut positions = Vec::with_capacity(n_corners + ncx * ncy * ncz);
    for i in 0..=ncx {
        for j in 0..=ncy {
            for k in 0..=ncz {
                positions.push(origin + Vector3::new(i as f64, j as f64, k as f64) * h);
            }
        }
    }
    for i in 0..ncx {
        for j in 0..ncy {
            for k in 0..ncz {
                positions
                    .push(origin + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * h);
            }
        }
    }

    let keep = |tet: &[usize; 4]| {
        let centroid = Point3::from(
            (positions[tet[0]].coords
                + positions[tet[1]].coords
                + positions[tet[2]].coords
                + positions[tet[3]].coords)
                / 4.0,
        );
        tet.iter()
            .map(|&v| phi_thick.sample_clamped(&positions[v]))
            .chain(std::iter::once(phi_thick.sample_clamped(&centroid)))
            .any(|phi| phi < 0.0)
    };

    let mut tets: Vec<[usize; 4]> = Vec::new();
    let mut emit = |c0: usize, c1: usize, e0: usize, e1: usize| {
        let mut tet = [c0, c1, e0, e1];
        if !keep(&tet) {
            return;
        }
        let verts = [
            positions[tet[0]],
            positions[tet[1]],
            positions[tet[2]],
            positions[tet[3]],
        ];
        if tet_signed_volume(&verts) < 0.0 {
            tet.swap(2, 3);
        }
        tets.push(tet);
    };

    // Interior faces normal to x, then y, then z; four tets per face,
    // one per edge of the shared quad.
    for i in 0..ncx - 1 {
        for j in 0..ncy {
            for k in 0..ncz {
                let c0 = center_id(i, j, k);
                let c1 = center_id(i + 1, j, k);
                let q = [
                    corner_id(i + 1, j, k),
                    corner_id(i + 1, j + 1, k),
                    corner_id(i + 1, j + 1, k + 1),
                    corner_id(i + 1, j, k + 1),
                ];
                for e in 0..4 {
                    emit(c0, c1, q[e], q[(e + 1) % 4]);
                }
            }
        }
    }
    for j in 0..ncy - 1 {
        for i in 0..ncx {
            for k in 0..ncz {
                let c0 = center_id(i, j, k);
                let c1 = center_id(i, j + 1, k);
                let q = [
                    corner_id(i, j + 1, k),
                    corner_id(i + 1, j + 1, k),
                    corner_id(i + 1, j + 1, k + 1),
                    corner_id(i, j + 1, k + 1),
                ];
                for e in 0..4 {
                    emit(c0, c1, q[e], q[(e + 1) % 4]);
                }
            }
        }
    }
    for k in 0..ncz - 1 {
        for i in 0..ncx {
            for j in 0..ncy {
                let c0 = center_id(i, j, k);
                let c1 = center_id(i, j, k + 1);
                let q = [
                    corner_id(i, j, k + 1),
                    corner_id(i + 1, j, k + 1),
                    corner_id(i + 1, j + 1, k + 1),
                    corner_id(i, j + 1, k + 1),
                ];
                for e in 0..4 {
                    emit(c0, c1, q[e], q[(e + 1) % 4]);
                }
            }
        }
    }

    if tets.is_empty() {
        return Err(KdsmError::EmptyInput(
            "no tetrahedron kept: thickened region is empty".into(),
        ));
    }

    // Compact to referenced vertices, preserving id order.
    let mut used: Vec<usize> = tets.iter().flatten().copied().collect();
    used.sort_unstable();
    used.dedup();
    let remap: HashMap<usize, usize> = used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let vertices = used.iter().map(|&old| positions[old]).collect();
    for tet in &mut tets {
        for v in tet {
            *v = remap[v];
        }
    }
    Ok(TetMesh { vertices, tets })
}

/// 1:8 red subdivision of the marked tets through their edge midpoints.
/// Midpoints shared between marked tets are deduplicated. The central
/// octahedron is split along its shortest diagonal. Children keep their
/// parent's orientation sign; unmarked tets pass through unchanged.
pub fn red_refine(mesh: &TetMesh, marked: &[usize]) -> TetMesh {
    let mut marked: Vec<usize> = marked.to_vec();
    marked.sort_unstable();
    marked.dedup();
    let is_marked = {
        let set: std::collections::HashSet<usize> = marked.iter().copied().collect();
        move |t: usize| set.contains(&t)
    };

    let mut vertices = mesh.vertices.clone();
    let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
    let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Point3<f64>>| {
        let key = (a.min(b), a.max(b));
        *midpoints.entry(key).or_insert_with(|| {
            vertices.push(nalgebra::center(&vertices[a], &vertices[b]));
            vertices.len() - 1
        })
    };

    let mut tets: Vec<[usize; 4]> = Vec::new();
    for (t, tet) in mesh.tets.iter().enumerate() {
        if !is_marked(t) {
            tets.push(*tet);
            continue;
        }
        let [v0, v1, v2, v3] = *tet;
        let m01 = midpoint(v0, v1, &mut vertices);
        let m02 = midpoint(v0, v2, &mut vertices);
        let m03 = midpoint(v0, v3, &mut vertices);
        let m12 = midpoint(v1, v2, &mut vertices);
        let m13 = midpoint(v1, v3, &mut vertices);
        let m23 = midpoint(v2, v3, &mut vertices);

        let parent_sign = tet_signed_volume(&mesh.tet_vertices(t)).signum();
        let mut push = |mut child: [usize; 4]| {
            let verts = [
                vertices[child[0]],
                vertices[child[1]],
                vertices[child[2]],
                vertices[child[3]],
            ];
            if tet_signed_volume(&verts).signum() != parent_sign {
                child.swap(2, 3);
            }
            tets.push(child);
        };

        push([v0, m01, m02, m03]);
        push([m01, v1, m12, m13]);
        push([m02, m12, v2, m23]);
        push([m03, m13, m23, v3]);

        // Central octahedron: cut along the shortest of its three
        // diagonals, then fan the remaining ring of four midpoints.
        let diagonals = [(m01, m23), (m02, m13), (m03, m12)];
        let rings = [
            [m02, m03, m13, m12],
            [m01, m03, m23, m12],
            [m01, m13, m23, m02],
        ];
        let mut best = 0;
        let mut best_len = f64::INFINITY;
        for (d, &(a, b)) in diagonals.iter().enumerate() {
            let len = (vertices[a] - vertices[b]).norm();
            if len < best_len {
                best_len = len;
                best = d;
            }
        }
        let (d0, d1) = diagonals[best];
        let ring = rings[best];
        for e in 0..4 {
            push([d0, d1, ring[e], ring[(e + 1) % 4]]);
        }
    }
    TetMesh { vertices, tets }
}

/// Writes `tetmesh <nv> <nt>`, then one `x y z` line per vertex, then
/// one `a b c d` line per tet (0-based indices).
pub fn write_tet_mesh(path: &Path, mesh: &TetMesh) -> Result<(), KdsmError> {
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "tetmesh {} {}", mesh.vertices.len(), mesh.tets.len())?;
    for v in &mesh.vertices {
        writeln!(out, "{} {} {}", v.x, v.y, v.z)?;
    }
    for t in &mesh.tets {
        writeln!(out, "{} {} {} {}", t[0], t[1], t[2], t[3])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_tet_mesh(path: &Path) -> Result<TetMesh, KdsmError> {
    let path_str = path.display().to_string();
    let parse_err = |line: usize, message: String| KdsmError::Parse {
        path: path_str.clone(),
        line,
        message,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?;
    let header = header?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != "tetmesh" {
        return Err(parse_err(1, "expected header: tetmesh <nv> <nt>".into()));
    }
    let nv: usize = fields[1]
        .parse()
        .map_err(|_| parse_err(1, format!("bad vertex count {:?}", fields[1])))?;
    let nt: usize = fields[2]
        .parse()
        .map_err(|_| parse_err(1, format!("bad tet count {:?}", fields[2])))?;

    let mut vertices = Vec::with_capacity(nv);
    let mut tets = Vec::with_capacity(nt);
    for _ in 0..nv {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| parse_err(nv + 1, "missing vertex lines".into()))?;
        let line = line?;
        let lineno = idx + 1;
        let mut coord = [0.0f64; 3];
        let mut fields = line.split_whitespace();
        for c in &mut coord {
            let field = fields
                .next()
                .ok_or_else(|| parse_err(lineno, "vertex needs 3 coordinates".into()))?;
            *c = field
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad float {field:?}")))?;
        }
        vertices.push(Point3::new(coord[0], coord[1], coord[2]));
    }
    for _ in 0..nt {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| parse_err(nv + nt + 1, "missing tet lines".into()))?;
        let line = line?;
        let lineno = idx + 1;
        let mut tet = [0usize; 4];
        let mut fields = line.split_whitespace();
        for v in &mut tet {
            let field = fields
                .next()
                .ok_or_else(|| parse_err(lineno, "tet needs 4 indices".into()))?;
            *v = field
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad index {field:?}")))?;
            if *v >= nv {
                return Err(parse_err(lineno, format!("vertex index {v} out of range")));
            }
        }
        tets.push(tet);
    }
    Ok(TetMesh { vertices, tets })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::barycentric_coords;

    fn constant_grid(value: f64, cells: [usize; 3], dx: f64) -> ScalarGrid {
        let dims = [cells[0] + 1, cells[1] + 1, cells[2] + 1];
        ScalarGrid {
            origin: Point3::origin(),
            dx,
            dims,
            values: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    #[test]
    fn full_block_has_expected_bcc_structure() {
        let grid = constant_grid(-1.0, [2, 2, 2], 1.0);
        let mesh = build_lattice(&grid, 1.0).unwrap();
        // 12 interior faces, 4 tets each.
        assert_eq!(mesh.tets.len(), 48);
        // 8 centers plus every corner except the 8 outermost ones.
        assert_eq!(mesh.vertices.len(), 27);
        for t in 0..mesh.tets.len() {
            let vol = mesh.tet_signed_volume(t);
            assert!((vol - 1.0 / 12.0).abs() < 1e-12, "tet {t}: {vol}");
        }
        assert!((mesh.total_volume() - 4.0).abs() < 1e-12);
        // Every vertex referenced.
        let mut seen = vec![false; mesh.vertices.len()];
        for tet in &mesh.tets {
            for &v in tet {
                seen[v] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn empty_region_is_an_error() {
        let grid = constant_grid(1.0, [3, 3, 3], 1.0);
        match build_lattice(&grid, 1.0) {
            Err(KdsmError::EmptyInput(_)) => {}
            other => panic!("expected empty lattice error, got {other:?}"),
        }
    }

    fn sphere_grid() -> ScalarGrid {
        let dims = [9, 9, 9];
        let origin = Point3::new(-4.0, -4.0, -4.0);
        let mut values = Vec::new();
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    let p = origin + Vector3::new(i as f64, j as f64, k as f64);
                    values.push(p.coords.norm() - 2.5);
                }
            }
        }
        ScalarGrid {
            origin,
            dx: 1.0,
            dims,
            values,
        }
    }

    #[test]
    fn keep_predicate_matches_independent_enumeration() {
        let grid = sphere_grid();
        let kept = build_lattice(&grid, 1.0).unwrap();

        // Re-enumerate the full lattice via an all-negative grid with the
        // same geometry, then apply the predicate tet by tet.
        let mut full_grid = grid.clone();
        full_grid.values.iter_mut().for_each(|v| *v = -1.0);
        let full = build_lattice(&full_grid, 1.0).unwrap();

        let predicate = |verts: &[Point3<f64>; 4]| {
            let centroid = Point3::from(
                (verts[0].coords + verts[1].coords + verts[2].coords + verts[3].coords) / 4.0,
            );
            verts
                .iter()
                .map(|p| grid.sample_clamped(p))
                .chain(std::iter::once(grid.sample_clamped(&centroid)))
                .any(|phi| phi < 0.0)
        };

        let key = |verts: &[Point3<f64>; 4]| {
            let mut k: Vec<(i64, i64, i64)> = verts
                .iter()
                .map(|p| {
                    (
                        (p.x * 4.0).round() as i64,
                        (p.y * 4.0).round() as i64,
                        (p.z * 4.0).round() as i64,
                    )
                })
                .collect();
            k.sort_unstable();
            k
        };

        let mut expected: Vec<_> = (0..full.tets.len())
            .map(|t| full.tet_vertices(t))
            .filter(|v| predicate(v))
            .map(|v| key(&v))
            .collect();
        let mut got: Vec<_> = (0..kept.tets.len())
            .map(|t| key(&kept.tet_vertices(t)))
            .collect();
        expected.sort();
        got.sort();
        assert!(!got.is_empty());
        assert_eq!(got, expected);

        for t in 0..kept.tets.len() {
            assert!(kept.tet_signed_volume(t) > 0.0);
        }
    }

    #[test]
    fn lattice_is_deterministic() {
        let grid = sphere_grid();
        let a = build_lattice(&grid, 1.0).unwrap();
        let b = build_lattice(&grid, 1.0).unwrap();
        assert_eq!(a.vertices, b.vertices);
        assert_eq!(a.tets, b.tets);
    }

    #[test]
    fn refine_unit_tet() {
        let mesh = TetMesh {
            vertices: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
                Point3::new(0.0, 0.0, 1.0),
            ],
            tets: vec![[0, 1, 2, 3]],
        };
        let refined = red_refine(&mesh, &[0]);
        assert_eq!(refined.tets.len(), 8);
        assert_eq!(refined.vertices.len(), 10);
        let total: f64 = (0..8).map(|t| refined.tet_signed_volume(t)).sum();
        assert!((total - 1.0 / 6.0).abs() < 1e-12);
        for t in 0..8 {
            assert!(refined.tet_signed_volume(t) > 0.0);
        }

        let untouched = red_refine(&mesh, &[]);
        assert_eq!(untouched.vertices, mesh.vertices);
        assert_eq!(untouched.tets, mesh.tets);
    }

    #[test]
    fn refine_dedupes_shared_midpoints() {
        let mesh = TetMesh {
            vertices: vec![
                Point3::new(0.0, 0.0, 0.0),
                Point3::new(1.0, 0.0, 0.0),
                Point3::new(0.0, 1.0, 0.0),
                Point3::new(0.3, 0.3, 1.0),
                Point3::new(0.3, 0.3, -1.0),
            ],
            tets: vec![[0, 1, 2, 3], [0, 2, 1, 4]],
        };
        let base_vol = mesh.total_volume();
        let refined = red_refine(&mesh, &[0, 1]);
        assert_eq!(refined.tets.len(), 16);
        // 5 original vertices plus 9 distinct edge midpoints (the three
        // shared-face edges count once).
        assert_eq!(refined.vertices.len(), 14);
        assert!((refined.total_volume() - base_vol).abs() < 1e-12 * base_vol.abs().max(1.0));
        // Marking twice is the same as once.
        let twice = red_refine(&mesh, &[0, 1, 1, 0]);
        assert_eq!(twice.tets, refined.tets);
    }

    #[test]
    fn refined_children_cover_the_parent() {
        let mesh = TetMesh {
            vertices: vec![
                Point3::new(0.2, -0.1, 0.0),
                Point3::new(1.3, 0.2, 0.1),
                Point3::new(0.1, 1.1, -0.2),
                Point3::new(0.4, 0.3, 1.2),
            ],
            tets: vec![[0, 1, 2, 3]],
        };
        let refined = red_refine(&mesh, &[0]);
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let parent = mesh.tet_vertices(0);
        for _ in 0..200 {
            // Random point inside the parent.
            let mut l = [0.0; 4];
            let mut sum = 0.0;
            for li in &mut l {
                *li = rng.gen_range(0.01..1.0);
                sum += *li;
            }
            for li in &mut l {
                *li /= sum;
            }
            let p = crate::geometry::point_from_barycentric(&parent, &l);
            let mut containing = 0;
            for t in 0..refined.tets.len() {
                let lam = barycentric_coords(&refined.tet_vertices(t), &p).unwrap();
                if lam.iter().all(|&x| x >= -1e-9) {
                    containing += 1;
                }
            }
            assert!(containing >= 1, "point {p:?} not covered by children");
        }
    }

    #[test]
    fn tet_file_round_trip_is_bit_exact() {
        let grid = sphere_grid();
        let mesh = build_lattice(&grid, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mesh.tet");
        write_tet_mesh(&path, &mesh).unwrap();
        let back = read_tet_mesh(&path).unwrap();
        assert_eq!(back.vertices, mesh.vertices);
        assert_eq!(back.tets, mesh.tets);
    }
}
