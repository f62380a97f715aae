//! Signed distance fields of triangle meshes on uniform grids.
//!
//! The field is sampled at grid nodes: exact point-triangle distance,
//! with the sign decided by counting signed ray crossings from the node
//! (negative inside). Both halves are accelerated by a small triangle
//! BVH, which is also reused elsewhere for closest-point queries
//! against the body surface.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::KdsmError;
use crate::geometry::{
    aabb_dist2, build_bvh_node, closest_point_on_triangle, Aabb, BvhNode, TriMesh,
};

/// Node-sampled scalar field on a uniform grid. `dims` are node counts
/// per axis (at least 2), spacing `dx` in cm, values in cm for signed
/// distances (negative inside). Storage is row-major with the last
/// axis fastest: index (i, j, k) -> (i * dims[1] + j) * dims[2] + k.
#[derive(Debug, Clone)]
pub struct ScalarGrid {
    pub origin: Point3<f64>,
    pub dx: f64,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }

    pub fn node_position(&self, i: usize, j: usize, k: usize) -> Point3<f64> {
        self.origin + Vector3::new(i as f64, j as f64, k as f64) * self.dx
    }

    /// Far corner of the grid domain.
    pub fn max_corner(&self) -> Point3<f64> {
        self.node_position(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1)
    }

    /// Trilinear interpolation at `p`. The point must lie inside the
    /// grid domain (boundary inclusive).
    pub fn sample(&self, p: &Point3<f64>) -> Result<f64, KdsmError> {
        let max = self.max_corner();
        for a in 0..3 {
            if p[a] < self.origin[a] || p[a] > max[a] {
                return Err(KdsmError::OutOfBounds {
                    x: p.x,
                    y: p.y,
                    z: p.z,
                });
            }
        }
        Ok(self.sample_unchecked(p))
    }

    /// Trilinear interpolation with `p` clamped into the grid domain
    /// first. Lattice construction uses this so that geometry touching
    /// the padded boundary reads the (positive) boundary values instead
    /// of failing.
    pub fn sample_clamped(&self, p: &Point3<f64>) -> f64 {
        let max = self.max_corner();
        let mut q = *p;
        for a in 0..3 {
            q[a] = q[a].clamp(self.origin[a], max[a]);
        }
        self.sample_unchecked(&q)
    }

    fn sample_unchecked(&self, p: &Point3<f64>) -> f64 {
        let mut cell = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let f = (p[a] - self.origin[a]) / self.dx;
            let i = (f.floor() as isize).clamp(0, self.dims[a] as isize - 2) as usize;
            cell[a] = i;
            frac[a] = f - i as f64;
        }
        let [i, j, k] = cell;
        let [fx, fy, fz] = frac;
        let c000 = self.value(i, j, k);
        let c001 = self.value(i, j, k + 1);
        let c010 = self.value(i, j + 1, k);
        let c011 = self.value(i, j + 1, k + 1);
        let c100 = self.value(i + 1, j, k);
        let c101 = self.value(i + 1, j, k + 1);
        let c110 = self.value(i + 1, j + 1, k);
        let c111 = self.value(i + 1, j + 1, k + 1);
        let c00 = c000 * (1.0 - fz) + c001 * fz;
        let c01 = c010 * (1.0 - fz) + c011 * fz;
        let c10 = c100 * (1.0 - fz) + c101 * fz;
        let c11 = c110 * (1.0 - fz) + c111 * fz;
        let c0 = c00 * (1.0 - fy) + c01 * fy;
        let c1 = c10 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fx) + c1 * fx
    }

    /// Uniform offset: subtracting c moves the zero isocontour outward
    /// by c, fattening the enclosed region.
    pub fn thicken(&self, c: f64) -> ScalarGrid {
        let mut out = self.clone();
        for v in &mut out.values {
            *v -= c;
        }
        out
    }

    /// Writes the grid: one ASCII header line
    /// `grid <ox> <oy> <oz> <dx> <nx> <ny> <nz>` followed by the values
    /// as little-endian f64 in storage order.
    pub fn write(&self, path: &Path) -> Result<(), KdsmError> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(
            out,
            "grid {} {} {} {} {} {} {}",
            self.origin.x, self.origin.y, self.origin.z, self.dx, self.dims[0], self.dims[1], self.dims[2]
        )?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<ScalarGrid, KdsmError> {
        let mut reader = BufReader::new(File::open(path)?);
        let mut header = Vec::new();
        let mut byte = [0u8; 1];
        loop {
            reader.read_exact(&mut byte)?;
            if byte[0] == b'\n' {
                break;
            }
            header.push(byte[0]);
            if header.len() > 4096 {
                return Err(parse_error(path, 1, "header line too long"));
            }
        }
        let header = String::from_utf8(header)
            .map_err(|_| parse_error(path, 1, "header is not UTF-8"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 8 || fields[0] != "grid" {
            return Err(parse_error(path, 1, "expected: grid ox oy oz dx nx ny nz"));
        }
        let float = |s: &str| -> Result<f64, KdsmError> {
            s.parse()
                .map_err(|_| parse_error(path, 1, &format!("bad float {s:?}")))
        };
        let count = |s: &str| -> Result<usize, KdsmError> {
            let n: usize = s
                .parse()
                .map_err(|_| parse_error(path, 1, &format!("bad count {s:?}")))?;
            if n < 2 {
                return Err(parse_error(path, 1, "grid needs at least 2 nodes per axis"));
            }
            Ok(n)
        };
        let origin = Point3::new(float(fields[1])?, float(fields[2])?, float(fields[3])?);
        let dx = float(fields[4])?;
        if !(dx > 0.0) {
            return Err(parse_error(path, 1, "dx must be positive"));
        }
        let dims = [count(fields[5])?, count(fields[6])?, count(fields[7])?];
        let n = dims[0] * dims[1] * dims[2];
        let mut values = vec![0.0f64; n];
        let mut buf = [0u8; 8];
        for v in &mut values {
            reader.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(ScalarGrid {
            origin,
            dx,
            dims,
            values,
        })
    }
}

fn parse_error(path: &Path, line: usize, message: &str) -> KdsmError {
    KdsmError::Parse {
        path: path.display().to_string(),
        line,
        message: message.to_string(),
    }
}

/// Result of a closest-point query against a [`TriBvh`].
#[derive(Debug, Clone, Copy)]
pub struct SurfacePoint {
    pub triangle: usize,
    pub point: Point3<f64>,
    /// Barycentric coordinates of `point` in its triangle.
    pub bary: [f64; 3],
    pub distance: f64,
}

/// Median-split AABB tree over a triangle soup. Holds copies of the
/// triangle vertices, so it is self-contained and cheap to query.
pub struct TriBvh {
    tris: Vec<[Point3<f64>; 3]>,
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
}

const TRI_LEAF_SIZE: usize = 4;

impl TriBvh {
    pub fn build(mesh: &TriMesh) -> Result<TriBvh, KdsmError> {
        if mesh.triangles.is_empty() {
            return Err(KdsmError::EmptyInput(
                "cannot build a BVH over an empty mesh".into(),
            ));
        }
        let tris: Vec<[Point3<f64>; 3]> = (0..mesh.triangles.len())
            .map(|t| mesh.triangle_vertices(t))
            .collect();
        let boxes: Vec<Aabb> = tris.iter().map(|t| Aabb::from_points(t)).collect();
        let centroids: Vec<Point3<f64>> = tris
            .iter()
            .map(|t| Point3::from((t[0].coords + t[1].coords + t[2].coords) / 3.0))
            .collect();
        let mut order: Vec<u32> = (0..tris.len() as u32).collect();
        let mut nodes = Vec::new();
        build_bvh_node(&mut nodes, &mut order, 0, tris.len(), &boxes, &centroids, TRI_LEAF_SIZE);
        Ok(TriBvh { tris, nodes, order })
    }

    /// Exact closest surface point to `p` over all triangles.
    pub fn closest_point(&self, p: &Point3<f64>) -> SurfacePoint {
        let mut best = SurfacePoint {
            triangle: usize::MAX,
            point: *p,
            bary: [0.0; 3],
            distance: f64::INFINITY,
        };
        let mut best_d2 = f64::INFINITY;
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            if aabb_dist2(&node.aabb, p) >= best_d2 {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let tri = &self.tris[t as usize];
                    let (q, bary) = closest_point_on_triangle(p, &tri[0], &tri[1], &tri[2]);
                    let d2 = (p - q).norm_squared();
                    if d2 < best_d2 {
                        best_d2 = d2;
                        best = SurfacePoint {
                            triangle: t as usize,
                            point: q,
                            bary,
                            distance: d2.sqrt(),
                        };
                    }
                }
            } else {
                // Visit the nearer child first so the bound tightens early.
                let l = node.left;
                let r = node.right;
                let dl = aabb_dist2(&self.nodes[l as usize].aabb, p);
                let dr = aabb_dist2(&self.nodes[r as usize].aabb, p);
                if dl <= dr {
                    stack.push(r);
                    stack.push(l);
                } else {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        best
    }

    /// True when `p` is inside the closed, outward-oriented surface.
    /// Signed ray crossings are summed so that overlapping closed
    /// components still count as inside; degenerate hits (edges,
    /// grazing, in-plane rays) fall back to jittered retry directions.
    pub fn is_inside(&self, p: &Point3<f64>) -> Result<bool, KdsmError> {
        for attempt in 0..32 {
            let dir = ray_direction(attempt);
            match self.signed_crossings(p, &dir) {
                Some(sum) => return Ok(sum > 0),
                None => continue,
            }
        }
        Err(KdsmError::SignResolution {
            x: p.x,
            y: p.y,
            z: p.z,
        })
    }

    /// Sum of signed crossings along origin + t dir, t > 0: +1 where the
    /// ray exits the surface, -1 where it enters. `None` when any hit is
    /// too close to a triangle boundary to classify.
    fn signed_crossings(&self, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<i32> {
        let mut sum = 0;
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            if !ray_hits_aabb(&node.aabb, origin, dir) {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    let tri = &self.tris[t as usize];
                    sum += ray_crossing(origin, dir, tri)?;
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        Some(sum)
    }
}

fn ray_hits_aabb(aabb: &Aabb, o: &Point3<f64>, d: &Vector3<f64>) -> bool {
    let mut tmin: f64 = 0.0;
    let mut tmax = f64::INFINITY;
    for a in 0..3 {
        if d[a] == 0.0 {
            // Parallel to this slab: inside-or-on passes, outside misses.
            if o[a] < aabb.min[a] || o[a] > aabb.max[a] {
                return false;
            }
            continue;
        }
        let inv = 1.0 / d[a];
        let mut t0 = (aabb.min[a] - o[a]) * inv;
        let mut t1 = (aabb.max[a] - o[a]) * inv;
        if inv < 0.0 {
            std::mem::swap(&mut t0, &mut t1);
        }
        tmin = tmin.max(t0);
        tmax = tmax.min(t1);
        if tmax < tmin {
            return false;
        }
    }
    true
}

/// First ray direction is +x; retries use seeded random unit vectors.
fn ray_direction(attempt: u64) -> Vector3<f64> {
    if attempt == 0 {
        return Vector3::x();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5D17_u64 ^ attempt);
    loop {
        let v = Vector3::new(
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
            rng.gen_range(-1.0..1.0),
        );
        let n = v.norm();
        if n > 0.3 {
            return v / n;
        }
    }
}

/// Signed crossing of one triangle: Some(+1) exiting, Some(-1) entering,
/// Some(0) miss, None when the hit cannot be classified robustly.
fn ray_crossing(o: &Point3<f64>, d: &Vector3<f64>, tri: &[Point3<f64>; 3]) -> Option<i32> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let pvec = d.cross(&e2);
    let det = e1.dot(&pvec);
    let scale = e1.norm() * e2.norm();
    if det.abs() <= 1e-12 * scale {
        // Near-parallel. If the ray's supporting plane distance is
        // clearly nonzero this is a clean miss; otherwise it grazes.
        let n = e1.cross(&e2);
        let nn = n.norm();
        if nn <= 1e-30 {
            return Some(0);
        }
        if ((o - tri[0]).dot(&n) / nn).abs() > 1e-7 {
            return Some(0);
        }
        return None;
    }
    let inv = 1.0 / det;
    let tvec = o - tri[0];
    let u = tvec.dot(&pvec) * inv;
    let qvec = tvec.cross(&e1);
    let v = d.dot(&qvec) * inv;
    let t = e2.dot(&qvec) * inv;
    const EPS: f64 = 1e-9;
    if u < -EPS || v < -EPS || u + v > 1.0 + EPS || t < -EPS {
        return Some(0);
    }
    if u < EPS || v < EPS || u + v > 1.0 - EPS || t < EPS {
        return None;
    }
    // det = -dir . (e1 x e2): negative det means the ray runs along the
    // outward normal, i.e. exits the enclosed region.
    Some(if det < 0.0 { 1 } else { -1 })
}

/// Samples the signed distance field of a closed mesh on a uniform grid
/// covering the mesh bounds inflated by `padding` (cm) on every side.
pub fn build_level_set(body: &TriMesh, dx: f64, padding: f64) -> Result<ScalarGrid, KdsmError> {
    if !(dx > 0.0) {
        return Err(KdsmError::EmptyInput("grid spacing must be positive".into()));
    }
    body.require_closed()?;
    let bvh = TriBvh::build(body)?;
    let aabb = body.bounding_box();
    let origin = aabb.min - Vector3::new(padding, padding, padding);
    let extent = aabb.extent() + Vector3::new(2.0 * padding, 2.0 * padding, 2.0 * padding);
    let dims = [
        (extent.x / dx).ceil() as usize + 1,
        (extent.y / dx).ceil() as usize + 1,
        (extent.z / dx).ceil() as usize + 1,
    ];
    let mut grid = ScalarGrid {
        origin,
        dx,
        dims,
        values: vec![0.0; dims[0] * dims[1] * dims[2]],
    };
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = grid.node_position(i, j, k);
                let dist = bvh.closest_point(&p).distance;
                let phi = if dist <= 1e-9 {
                    // On the surface to within noise; the sign query
                    // would be ill-posed and the value is ~0 either way.
                    0.0
                } else if bvh.is_inside(&p)? {
                    -dist
                } else {
                    dist
                };
                let idx = grid.index(i, j, k);
                grid.values[idx] = phi;
            }
        }
    }
    Ok(grid)
}
