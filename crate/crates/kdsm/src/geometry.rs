//! Triangle meshes, tetrahedra, barycentric coordinates, and volumes.
//!
//! Everything here works in centimeters. Positions are `Point3<f64>`,
//! displacements `Vector3<f64>`, texture coordinates `Vector2<f64>`.

use std::collections::HashMap;

use nalgebra::{Point3, Vector2, Vector3};

use crate::error::KdsmError;

/// Degeneracy floor for tetrahedra, in cm^3. A tet whose signed volume
/// has magnitude at or below this floor has no usable barycentric
/// coordinates. The magnitude is what matters: inverted tets (negative
/// volume) still invert cleanly and stay usable.
pub const DEGENERATE_TET_VOLUME: f64 = 1e-12;

/// Signed volume of the tetrahedron (v0, v1, v2, v3):
/// det[v1-v0, v2-v0, v3-v0] / 6. Positive when v3 lies on the side of
/// triangle (v0, v1, v2) that its counterclockwise normal points into.
pub fn tet_signed_volume(v: &[Point3<f64>; 4]) -> f64 {
    let a = v[1] - v[0];
    let b = v[2] - v[0];
    let c = v[3] - v[0];
    a.cross(&b).dot(&c) / 6.0
}

/// Barycentric coordinates of `p` relative to the tetrahedron `v`, by
/// Cramer's rule on the 3x3 system with columns v0-v3, v1-v3, v2-v3.
/// The last coordinate is the complement 1 - (l0 + l1 + l2), so a
/// left-to-right sum of the four returns exactly 1.0 whenever the
/// partial sum lies in [0, 2] — in particular for every point inside
/// the tet. Returns `None` when the tet is at or below the degeneracy
/// floor.
///
/// All four coordinates are in [0, 1] exactly when `p` is inside the
/// tet; points outside produce negative entries but remain well
/// defined, which point location relies on.
pub fn barycentric_coords(v: &[Point3<f64>; 4], p: &Point3<f64>) -> Option<[f64; 4]> {
    if tet_signed_volume(v).abs() <= DEGENERATE_TET_VOLUME {
        return None;
    }
    let a = v[0] - v[3];
    let b = v[1] - v[3];
    let c = v[2] - v[3];
    let r = p - v[3];
    let det = a.cross(&b).dot(&c);
    let l0 = r.dot(&b.cross(&c)) / det;
    let l1 = a.dot(&r.cross(&c)) / det;
    let l2 = a.cross(&b).dot(&r) / det;
    Some([l0, l1, l2, 1.0 - (l0 + l1 + l2)])
}

/// Recombines barycentric coordinates into a point: sum of lambda_i v_i.
pub fn point_from_barycentric(v: &[Point3<f64>; 4], lambda: &[f64; 4]) -> Point3<f64> {
    Point3::from(
        v[0].coords * lambda[0]
            + v[1].coords * lambda[1]
            + v[2].coords * lambda[2]
            + v[3].coords * lambda[3],
    )
}

/// Closest point to `p` on triangle (a, b, c), returned together with
/// its triangle barycentric coordinates (u, v, w) so that the point is
/// u a + v b + w c. Voronoi-region walk over the triangle's vertices,
/// edges, and face.
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> (Point3<f64>, [f64; 3]) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return (*a, [1.0, 0.0, 0.0]);
    }

    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return (*b, [0.0, 1.0, 0.0]);
    }

    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let t = d1 / (d1 - d3);
        return (a + ab * t, [1.0 - t, t, 0.0]);
    }

    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return (*c, [0.0, 0.0, 1.0]);
    }

    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let t = d2 / (d2 - d6);
        return (a + ac * t, [1.0 - t, 0.0, t]);
    }

    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let t = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return (b + (c - b) * t, [0.0, 1.0 - t, t]);
    }

    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    (a + ab * v + ac * w, [1.0 - v - w, v, w])
}

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy)]
pub struct Aabb {
    pub min: Point3<f64>,
    pub max: Point3<f64>,
}

impl Aabb {
    /// The empty box: min at +inf, max at -inf, absorbs under union.
    pub fn empty() -> Self {
        Aabb {
            min: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            max: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Point3<f64>>) -> Self {
        let mut aabb = Aabb::empty();
        for p in points {
            aabb.grow(p);
        }
        aabb
    }

    pub fn grow(&mut self, p: &Point3<f64>) {
        for i in 0..3 {
            self.min[i] = self.min[i].min(p[i]);
            self.max[i] = self.max[i].max(p[i]);
        }
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut out = *self;
        out.grow(&other.min);
        out.grow(&other.max);
        out
    }

    /// Expands the box by `by[i]` on both sides of axis i.
    pub fn inflate(&self, by: &Vector3<f64>) -> Aabb {
        Aabb {
            min: self.min - by,
            max: self.max + by,
        }
    }

    /// Inclusive containment test.
    pub fn contains(&self, p: &Point3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn extent(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min, &self.max)
    }

    pub fn longest_axis(&self) -> usize {
        let e = self.extent();
        if e.x >= e.y && e.x >= e.z {
            0
        } else if e.y >= e.z {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BvhNode {
    pub aabb: Aabb,
    /// Child node ids, or a leaf range into the item order when count > 0.
    pub left: u32,
    pub right: u32,
    pub start: u32,
    pub count: u32,
}

/// Recursive median-split build shared by the triangle and tet BVHs:
/// sorts `order[start..start+count]` by item centroid along the longest
/// centroid axis and splits at the middle until leaves are small.
pub(crate) fn build_bvh_node(
    nodes: &mut Vec<BvhNode>,
    order: &mut [u32],
    start: usize,
    count: usize,
    boxes: &[Aabb],
    centroids: &[Point3<f64>],
    leaf_size: usize,
) -> u32 {
    let mut aabb = Aabb::empty();
    for &t in &order[start..start + count] {
        aabb = aabb.union(&boxes[t as usize]);
    }
    let id = nodes.len() as u32;
    nodes.push(BvhNode {
        aabb,
        left: 0,
        right: 0,
        start: start as u32,
        count: count as u32,
    });
    if count <= leaf_size {
        return id;
    }
    let mut cbox = Aabb::empty();
    for &t in &order[start..start + count] {
        cbox.grow(&centroids[t as usize]);
    }
    let axis = cbox.longest_axis();
    order[start..start + count].sort_unstable_by(|&a, &b| {
        centroids[a as usize][axis]
            .partial_cmp(&centroids[b as usize][axis])
            .unwrap()
            .then(a.cmp(&b))
    });
    let half = count / 2;
    let left = build_bvh_node(nodes, order, start, half, boxes, centroids, leaf_size);
    let right = build_bvh_node(nodes, order, start + half, count - half, boxes, centroids, leaf_size);
    nodes[id as usize].left = left;
    nodes[id as usize].right = right;
    nodes[id as usize].count = 0;
    id
}

pub(crate) fn aabb_dist2(aabb: &Aabb, p: &Point3<f64>) -> f64 {
    let mut d2 = 0.0;
    for a in 0..3 {
        let d = (aabb.min[a] - p[a]).max(0.0).max(p[a] - aabb.max[a]);
        d2 += d * d;
    }
    d2
}

/// Indexed triangle mesh, optionally with one texture coordinate per
/// vertex (the meshes here never need per-corner UV splits).
#[derive(Debug, Clone, Default)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[usize; 3]>,
    pub uvs: Option<Vec<Vector2<f64>>>,
}

impl TriMesh {
    pub fn bounding_box(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }

    pub fn triangle_vertices(&self, t: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Undirected edges, each exactly once as (lo, hi), sorted.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = self
            .triangles
            .iter()
            .flat_map(|tri| {
                (0..3).map(|k| {
                    let a = tri[k];
                    let b = tri[(k + 1) % 3];
                    (a.min(b), a.max(b))
                })
            })
            .collect();
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Counts directed edges whose reverse is missing. Zero for a closed
    /// (watertight, consistently oriented) mesh.
    pub fn unmatched_directed_edges(&self) -> usize {
        let mut count: HashMap<(usize, usize), isize> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                *count.entry((a, b)).or_insert(0) += 1;
                *count.entry((b, a)).or_insert(0) -= 1;
            }
        }
        let unmatched: isize = count.values().map(|c| c.abs()).sum();
        // Each unmatched (a, b) was also counted as a negative (b, a).
        (unmatched / 2) as usize
    }

    pub fn is_closed(&self) -> bool {
        self.unmatched_directed_edges() == 0
    }

    /// Returns an error unless the mesh is closed.
    pub fn require_closed(&self) -> Result<(), KdsmError> {
        let unmatched = self.unmatched_directed_edges();
        if unmatched == 0 {
            Ok(())
        } else {
            Err(KdsmError::OpenMesh { unmatched })
        }
    }

    /// Boundary loops as vertex cycles, traced along the boundary
    /// direction induced by the triangles. Deterministic: loops start at
    /// their smallest starting vertex and are emitted sorted by it.
    pub fn boundary_loops(&self) -> Vec<Vec<usize>> {
        let mut count: HashMap<(usize, usize), isize> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                *count.entry((a, b)).or_insert(0) += 1;
            }
        }
        // A directed edge is on the boundary when its reverse never occurs.
        let mut next: HashMap<usize, Vec<usize>> = HashMap::new();
        for (&(a, b), &c) in &count {
            if c > 0 && count.get(&(b, a)).copied().unwrap_or(0) == 0 {
                next.entry(a).or_default().push(b);
            }
        }
        for targets in next.values_mut() {
            targets.sort_unstable();
        }

        let mut starts: Vec<usize> = next.keys().copied().collect();
        starts.sort_unstable();
        let mut loops = Vec::new();
        for start in starts {
            if next.get(&start).map_or(true, |t| t.is_empty()) {
                continue;
            }
            let mut cycle = vec![start];
            let mut at = start;
            loop {
                let targets = next.get_mut(&at).expect("boundary edge chain broke");
                let to = targets.remove(0);
                if to == start {
                    break;
                }
                cycle.push(to);
                at = to;
            }
            loops.push(cycle);
        }
        loops
    }

    /// Volume enclosed by the mesh via the divergence theorem,
    /// sum of v0 . (v1 x v2) / 6 over triangles. A mesh with boundary
    /// loops is first capped: each loop gets a triangle fan to its own
    /// centroid, oriented to continue the surrounding surface, so
    /// trimmed meshes still report the volume of the obvious closure.
    pub fn enclosed_volume(&self) -> f64 {
        let tri_term = |a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>| {
            a.coords.dot(&b.coords.cross(&c.coords)) / 6.0
        };
        let mut volume = 0.0;
        for tri in &self.triangles {
            volume += tri_term(
                &self.vertices[tri[0]],
                &self.vertices[tri[1]],
                &self.vertices[tri[2]],
            );
        }
        for cycle in self.boundary_loops() {
            let mut centroid = Vector3::zeros();
            for &v in &cycle {
                centroid += self.vertices[v].coords;
            }
            let centroid = Point3::from(centroid / cycle.len() as f64);
            // The boundary cycle runs with the surface's winding; the cap
            // must run against it, like the face that was removed did.
            for k in 0..cycle.len() {
                let a = cycle[k];
                let b = cycle[(k + 1) % cycle.len()];
                volume += tri_term(&self.vertices[b], &self.vertices[a], &centroid);
            }
        }
        volume
    }

    /// Area-weighted vertex normals (normalized; zero where a vertex has
    /// no incident area).
    pub fn vertex_normals(&self) -> Vec<Vector3<f64>> {
        let mut normals = vec![Vector3::zeros(); self.vertices.len()];
        for tri in &self.triangles {
            let [a, b, c] = *tri;
            let n = (self.vertices[b] - self.vertices[a])
                .cross(&(self.vertices[c] - self.vertices[a]));
            normals[a] += n;
            normals[b] += n;
            normals[c] += n;
        }
        for n in &mut normals {
            let len = n.norm();
            if len > 0.0 {
                *n /= len;
            }
        }
        normals
    }
}

/// Indexed tetrahedral mesh.
#[derive(Debug, Clone, Default)]
pub struct TetMesh {
    pub vertices: Vec<Point3<f64>>,
    pub tets: Vec<[usize; 4]>,
}

impl TetMesh {
    pub fn tet_vertices(&self, t: usize) -> [Point3<f64>; 4] {
        let [a, b, c, d] = self.tets[t];
        [
            self.vertices[a],
            self.vertices[b],
            self.vertices[c],
            self.vertices[d],
        ]
    }

    pub fn tet_signed_volume(&self, t: usize) -> f64 {
        tet_signed_volume(&self.tet_vertices(t))
    }

    /// Sum of signed tet volumes.
    pub fn total_volume(&self) -> f64 {
        (0..self.tets.len()).map(|t| self.tet_signed_volume(t)).sum()
    }

    /// Barycentric coordinates of `p` in tet `t`, failing on a tet at or
    /// below the degeneracy floor.
    pub fn barycentric(&self, t: usize, p: &Point3<f64>) -> Result<[f64; 4], KdsmError> {
        let verts = self.tet_vertices(t);
        barycentric_coords(&verts, p).ok_or_else(|| KdsmError::DegenerateTet {
            tet: t,
            volume: tet_signed_volume(&verts),
        })
    }

    pub fn point_from_barycentric(&self, t: usize, lambda: &[f64; 4]) -> Point3<f64> {
        point_from_barycentric(&self.tet_vertices(t), lambda)
    }

    pub fn bounding_box(&self) -> Aabb {
        Aabb::from_points(&self.vertices)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_tet() -> [Point3<f64>; 4] {
        [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ]
    }

    /// Closed unit cube [0,1]^3 with outward orientation.
    fn cube() -> TriMesh {
        let vertices = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(1.0, 1.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(1.0, 0.0, 1.0),
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(0.0, 1.0, 1.0),
        ];
        let triangles = vec![
            [0, 2, 1],
            [0, 3, 2], // z = 0, normal -z
            [4, 5, 6],
            [4, 6, 7], // z = 1, normal +z
            [0, 1, 5],
            [0, 5, 4], // y = 0
            [2, 3, 7],
            [2, 7, 6], // y = 1
            [0, 4, 7],
            [0, 7, 3], // x = 0
            [1, 2, 6],
            [1, 6, 5], // x = 1
        ];
        TriMesh {
            vertices,
            triangles,
            uvs: None,
        }
    }

    /// Octahedron with vertices on the axes at distance 1; volume 4/3.
    fn octahedron() -> TriMesh {
        let vertices = vec![
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(-1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, -1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(0.0, 0.0, -1.0),
        ];
        let triangles = vec![
            [0, 2, 4],
            [2, 1, 4],
            [1, 3, 4],
            [3, 0, 4],
            [2, 0, 5],
            [1, 2, 5],
            [3, 1, 5],
            [0, 3, 5],
        ];
        TriMesh {
            vertices,
            triangles,
            uvs: None,
        }
    }

    #[test]
    fn unit_tet_volume_is_one_sixth() {
        assert_eq!(tet_signed_volume(&unit_tet()), 1.0 / 6.0);
    }

    #[test]
    fn swapping_vertices_flips_volume_sign() {
        let v = unit_tet();
        let swapped = [v[1], v[0], v[2], v[3]];
        assert_eq!(tet_signed_volume(&swapped), -1.0 / 6.0);
    }

    #[test]
    fn volume_scales_cubically() {
        let v = unit_tet();
        let scaled = v.map(|p| Point3::from(p.coords * 3.0));
        let ratio = tet_signed_volume(&scaled) / tet_signed_volume(&v);
        assert!((ratio - 27.0).abs() < 1e-12);
    }

    #[test]
    fn barycentric_at_vertices_and_centroid() {
        let v = unit_tet();
        for (i, p) in v.iter().enumerate() {
            let l = barycentric_coords(&v, p).unwrap();
            for (j, &lj) in l.iter().enumerate() {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((lj - expected).abs() < 1e-14, "vertex {i}: {l:?}");
            }
        }
        let centroid = Point3::new(0.25, 0.25, 0.25);
        let l = barycentric_coords(&v, &centroid).unwrap();
        for &li in &l {
            assert!((li - 0.25).abs() < 1e-14);
        }
    }

    #[test]
    fn barycentric_sums_to_one_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = unit_tet();
        for _ in 0..100 {
            let p = Point3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let l = barycentric_coords(&v, &p).unwrap();
            assert_eq!(l[0] + l[1] + l[2] + l[3], 1.0);
        }
    }

    #[test]
    fn barycentric_round_trip_random_tets() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut done = 0;
        while done < 1000 {
            let v: [Point3<f64>; 4] = std::array::from_fn(|_| {
                Point3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            });
            if tet_signed_volume(&v).abs() < 1e-3 {
                continue;
            }
            // Include negative weights so points outside the tet are hit.
            let l0 = rng.gen_range(-0.2..0.6);
            let l1 = rng.gen_range(-0.2..0.6);
            let l2 = rng.gen_range(-0.2..0.6);
            let lambda = [l0, l1, l2, 1.0 - l0 - l1 - l2];
            let p = point_from_barycentric(&v, &lambda);
            let back = barycentric_coords(&v, &p).unwrap();
            for i in 0..4 {
                assert!(
                    (back[i] - lambda[i]).abs() < 1e-9,
                    "lambda {lambda:?} back {back:?}"
                );
            }
            done += 1;
        }
    }

    #[test]
    fn degenerate_tet_is_rejected() {
        let flat = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.5, 0.5, 0.0),
        ];
        assert!(barycentric_coords(&flat, &Point3::origin()).is_none());
        let mesh = TetMesh {
            vertices: flat.to_vec(),
            tets: vec![[0, 1, 2, 3]],
        };
        let err = mesh.barycentric(0, &Point3::origin()).unwrap_err();
        assert!(matches!(err, KdsmError::DegenerateTet { tet: 0, .. }));
    }

    #[test]
    fn inverted_tet_stays_usable() {
        let v = unit_tet();
        let inverted = [v[0], v[2], v[1], v[3]];
        assert!(tet_signed_volume(&inverted) < 0.0);
        let p = Point3::new(0.1, 0.2, 0.3);
        let l = barycentric_coords(&inverted, &p).unwrap();
        let back = point_from_barycentric(&inverted, &l);
        assert!((back - p).norm() < 1e-12);
    }

    #[test]
    fn cube_is_closed_with_unit_volume() {
        let mesh = cube();
        assert!(mesh.is_closed());
        assert!(mesh.boundary_loops().is_empty());
        assert!((mesh.enclosed_volume() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn octahedron_volume() {
        let mesh = octahedron();
        assert!(mesh.is_closed());
        assert!((mesh.enclosed_volume() - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn open_cube_is_capped_to_unit_volume() {
        let mut mesh = cube();
        // Drop the z = 1 lid; four directed edges lose their partners.
        mesh.triangles.remove(3);
        mesh.triangles.remove(2);
        assert!(!mesh.is_closed());
        assert_eq!(mesh.unmatched_directed_edges(), 4);
        let loops = mesh.boundary_loops();
        assert_eq!(loops.len(), 1);
        assert_eq!(loops[0].len(), 4);
        assert!((mesh.enclosed_volume() - 1.0).abs() < 1e-12);

        // Capping is translation invariant even though the raw
        // divergence sum of an open mesh is not.
        for v in &mut mesh.vertices {
            *v += Vector3::new(10.0, -7.0, 3.0);
        }
        assert!((mesh.enclosed_volume() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn two_boundary_loops_are_capped_independently() {
        let mut a = cube();
        a.triangles.remove(3);
        a.triangles.remove(2);
        let mut b = cube();
        b.triangles.remove(1);
        b.triangles.remove(0);
        let offset = b.vertices.len();
        let mut mesh = a.clone();
        for v in &b.vertices {
            mesh.vertices.push(v + Vector3::new(5.0, 0.0, 0.0));
        }
        for t in &b.triangles {
            mesh.triangles.push([t[0] + offset, t[1] + offset, t[2] + offset]);
        }
        assert_eq!(mesh.boundary_loops().len(), 2);
        assert!((mesh.enclosed_volume() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn closest_point_regions() {
        let a = Point3::new(0.0, 0.0, 0.0);
        let b = Point3::new(2.0, 0.0, 0.0);
        let c = Point3::new(0.0, 2.0, 0.0);

        // Face region: straight projection.
        let (p, bary) = closest_point_on_triangle(&Point3::new(0.5, 0.5, 3.0), &a, &b, &c);
        assert!((p - Point3::new(0.5, 0.5, 0.0)).norm() < 1e-14);
        assert!((bary[0] - 0.5).abs() < 1e-14);

        // Vertex region.
        let (p, bary) = closest_point_on_triangle(&Point3::new(-1.0, -1.0, 0.5), &a, &b, &c);
        assert_eq!(p, a);
        assert_eq!(bary, [1.0, 0.0, 0.0]);

        // Edge ab region.
        let (p, bary) = closest_point_on_triangle(&Point3::new(1.0, -2.0, 0.0), &a, &b, &c);
        assert!((p - Point3::new(1.0, 0.0, 0.0)).norm() < 1e-14);
        assert!((bary[1] - 0.5).abs() < 1e-14);

        // Reconstruction matches returned point everywhere.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let q = Point3::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let (p, bary) = closest_point_on_triangle(&q, &a, &b, &c);
            let rebuilt = Point3::from(
                a.coords * bary[0] + b.coords * bary[1] + c.coords * bary[2],
            );
            assert!((p - rebuilt).norm() < 1e-12);
            // No interior point can beat the reported distance.
            for _ in 0..20 {
                let u = rng.gen_range(0.0..1.0);
                let v = rng.gen_range(0.0..(1.0 - u));
                let s = Point3::from(
                    a.coords * (1.0 - u - v) + b.coords * u + c.coords * v,
                );
                assert!((q - s).norm() + 1e-12 >= (q - p).norm());
            }
        }
    }

    #[test]
    fn tet_mesh_volume_sums() {
        // Split the unit cube into 5 tets; total volume 1.
        let vertices = cube().vertices;
        let tets = vec![
            [0, 1, 2, 5],
            [0, 2, 7, 5],
            [0, 2, 3, 7],
            [0, 5, 7, 4],
            [2, 7, 5, 6],
        ];
        let mesh = TetMesh { vertices, tets };
        for t in 0..mesh.tets.len() {
            assert!(mesh.tet_signed_volume(t) > 0.0, "tet {t} inverted");
        }
        assert!((mesh.total_volume() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vertex_normals_point_outward_on_octahedron() {
        let mesh = octahedron();
        for (v, n) in mesh.vertices.iter().zip(mesh.vertex_normals()) {
            assert!((n.norm() - 1.0).abs() < 1e-12);
            assert!(n.dot(&v.coords) > 0.9);
        }
    }

    #[test]
    fn edge_list_counts_undirected_edges_once() {
        let mut mesh = TriMesh {
            vertices: vec![Point3::origin(); 4],
            triangles: vec![[0, 1, 2]],
            uvs: None,
        };
        assert_eq!(mesh.edge_list(), vec![(0, 1), (0, 2), (1, 2)]);
        mesh.triangles.push([1, 3, 2]);
        assert_eq!(mesh.edge_list().len(), 5);
        // Euler's formula on closed genus-0 meshes: E = V + F - 2.
        for mesh in [octahedron(), cube()] {
            let expected = mesh.vertices.len() + mesh.triangles.len() - 2;
            assert_eq!(mesh.edge_list().len(), expected);
        }
    }
}
