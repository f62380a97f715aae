//! Cloth-to-lattice embeddings and the training-label generators.
//!
//! The cloth rides the lattice through a fixed barycentric embedding:
//! each vertex stores a parent tet and weights, and posing the lattice
//! drags the cloth along. Training labels for the displacement model
//! are produced by back-mapping ground-truth cloth into the deformed
//! lattice and expressing it in material (rest) space; the three
//! generators differ in how they resolve points covered by several
//! deformed tets:
//!
//! * method 1 picks a covering tet at random — exact reconstruction,
//!   but the arbitrary choices make the field spatially noisy;
//! * method 2 ignores the lattice and carries the cloth in local
//!   UVN frames anchored to the body surface — smooth but approximate;
//! * the hybrid keeps method 1's exactness wherever the choice is
//!   unambiguous or close to method 2's answer, and fills the rest by
//!   morphing method 2's field.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::{point_from_barycentric, TetMesh, TriMesh};
use crate::level_set::TriBvh;
use crate::point_location::{
    prune_candidates, Candidate, TetBvh, DEFAULT_BARY_EPS, DEFAULT_BOX_EPS,
};
use crate::poisson_morph::poisson_morph;
use crate::KdsmError;

/// Hybrid agreement threshold between a candidate embedding and the
/// method 2 embedding, in material space (cm).
pub const DEFAULT_HYBRID_TAU: f64 = 1.0;

/// Fixed barycentric embedding of every cloth vertex in the rest
/// lattice: parent tet id plus weights that sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub parents: Vec<usize>,
    pub weights: Vec<[f64; 4]>,
}

/// Material-space plastic displacement of every cloth vertex for one
/// pose: the correction applied before re-embedding and skinning.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub pose: usize,
    pub d: Vec<Vector3<f64>>,
}

/// World-space cloth positions for one pose.
#[derive(Debug, Clone)]
pub struct GroundTruthFrame {
    pub pose: usize,
    pub positions: Vec<Point3<f64>>,
}

/// One material-space location a ground-truth vertex can map back to:
/// a deformed tet containing it, the barycentric weights there, and
/// those weights applied to the rest lattice.
#[derive(Debug, Clone, Copy)]
pub struct BackmapCandidate {
    pub tet: usize,
    pub lambda: [f64; 4],
    pub min_weight: f64,
    pub u_material: Point3<f64>,
}

/// Rest and posed copies of the lattice for one frame, with the
/// point-location index built over the posed tets.
pub struct PosedKdsm<'a> {
    pub rest_vertices: &'a [Point3<f64>],
    pub deformed_vertices: &'a [Point3<f64>],
    pub tets: &'a [[usize; 4]],
    pub bvh: TetBvh,
}

impl<'a> PosedKdsm<'a> {
    pub fn new(
        rest_vertices: &'a [Point3<f64>],
        deformed_vertices: &'a [Point3<f64>],
        tets: &'a [[usize; 4]],
    ) -> PosedKdsm<'a> {
        let bvh = TetBvh::build(deformed_vertices, tets, DEFAULT_BOX_EPS, DEFAULT_BARY_EPS);
        PosedKdsm {
            rest_vertices,
            deformed_vertices,
            tets,
            bvh,
        }
    }

    fn rest_tet_vertices(&self, t: usize) -> [Point3<f64>; 4] {
        let tet = self.tets[t];
        [
            self.rest_vertices[tet[0]],
            self.rest_vertices[tet[1]],
            self.rest_vertices[tet[2]],
            self.rest_vertices[tet[3]],
        ]
    }

    fn to_backmap(&self, c: &Candidate) -> BackmapCandidate {
        BackmapCandidate {
            tet: c.tet,
            lambda: c.lambda,
            min_weight: c.min_weight,
            u_material: point_from_barycentric(&self.rest_tet_vertices(c.tet), &c.lambda),
        }
    }
}

/// Embeds each cloth rest vertex into the rest lattice, choosing the
/// containing tet with the largest minimum barycentric weight. A vertex
/// outside every tet means the lattice was not thickened enough.
pub fn embed_rest(cloth_rest: &[Point3<f64>], lattice: &TetMesh) -> Result<Embedding, KdsmError> {
    let bvh = TetBvh::build(
        &lattice.vertices,
        &lattice.tets,
        DEFAULT_BOX_EPS,
        DEFAULT_BARY_EPS,
    );
    let mut parents = Vec::with_capacity(cloth_rest.len());
    let mut weights = Vec::with_capacity(cloth_rest.len());
    for (i, p) in cloth_rest.iter().enumerate() {
        let cands = bvh.candidates(p, DEFAULT_BARY_EPS);
        let best = cands.first().ok_or(KdsmError::NoParent { vertex: i })?;
        parents.push(best.tet);
        weights.push(best.lambda);
    }
    Ok(Embedding { parents, weights })
}

/// Embeds arbitrary material-space points, clamping any point that
/// falls outside every tet onto its least-bad tet with the weights
/// projected back onto the simplex. Used to re-embed displaced cloth,
/// where the displacement may push a vertex slightly out of the
/// lattice.
pub fn embed_clamped(points: &[Point3<f64>], bvh: &TetBvh) -> Result<Embedding, KdsmError> {
    let mut parents = Vec::with_capacity(points.len());
    let mut weights = Vec::with_capacity(points.len());
    for (i, p) in points.iter().enumerate() {
        let (tet, lambda) = match bvh.candidates(p, DEFAULT_BARY_EPS).first() {
            Some(best) => (best.tet, best.lambda),
            None => {
                let best = bvh
                    .global_best(p)
                    .ok_or(KdsmError::NoParent { vertex: i })?;
                (best.tet, project_to_simplex(&best.lambda))
            }
        };
        parents.push(tet);
        weights.push(lambda);
    }
    Ok(Embedding { parents, weights })
}

/// Euclidean projection of barycentric weights onto the probability
/// simplex: the closest point with all weights >= 0 summing to 1.
fn project_to_simplex(lambda: &[f64; 4]) -> [f64; 4] {
    let mut sorted = *lambda;
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut acc = 0.0;
    let mut theta = 0.0;
    for (k, &v) in sorted.iter().enumerate() {
        acc += v;
        let candidate = (acc - 1.0) / (k + 1) as f64;
        if v - candidate > 0.0 {
            theta = candidate;
        }
    }
    let mut out = [0.0; 4];
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(lambda) {
        *o = (l - theta).max(0.0);
        sum += *o;
    }
    // Exact unit sum, preserving the invariant of every embedding.
    out[3] = 1.0 - out[0] - out[1] - out[2];
    debug_assert!(sum > 0.5 && out[3] > -1e-12);
    out
}

/// Evaluates an embedding against any deformed copy of the lattice.
pub fn skin_embedded(
    emb: &Embedding,
    deformed: &[Point3<f64>],
    tets: &[[usize; 4]],
) -> Vec<Point3<f64>> {
    emb.parents
        .iter()
        .zip(&emb.weights)
        .map(|(&t, lambda)| {
            let tet = tets[t];
            point_from_barycentric(
                &[
                    deformed[tet[0]],
                    deformed[tet[1]],
                    deformed[tet[2]],
                    deformed[tet[3]],
                ],
                lambda,
            )
        })
        .collect()
}

/// Back-maps each ground-truth vertex through every deformed tet that
/// contains it, returning the pruned candidate list expressed in rest
/// (material) space. An empty list means the vertex escaped the
/// deformed lattice; such vertices are handled by the hybrid morph.
pub fn backmap_ground_truth(
    gt_positions: &[Point3<f64>],
    kdsm: &PosedKdsm,
) -> Vec<Vec<BackmapCandidate>> {
    gt_positions
        .iter()
        .map(|p| {
            let cands = kdsm.bvh.candidates(p, DEFAULT_BARY_EPS);
            prune_candidates(&cands, kdsm.tets)
                .iter()
                .map(|c| kdsm.to_backmap(c))
                .collect()
        })
        .collect()
}

/// Minimum barycentric weight for a candidate to count as genuinely
/// containing its query point, rather than lying within the location
/// slack of a neighbouring tet. Containing parents round-trip exactly
/// through re-embedding; slack-only parents do not once the lattice
/// shears, so the random choice is restricted to the containing ones.
const CONTAINMENT_EPS: f64 = 1e-12;

/// Method 1: uniform-random choice among the back-mapped candidates
/// that contain the ground-truth point. When only slack candidates
/// exist the best-ranked one is used, and vertices the lattice missed
/// entirely fall back to the least-bad tet over the whole lattice
/// (most negative weight closest to zero).
pub fn method1(
    pose: usize,
    backmap: &[Vec<BackmapCandidate>],
    gt_positions: &[Point3<f64>],
    kdsm: &PosedKdsm,
    cloth_rest: &[Point3<f64>],
    seed: u64,
) -> Result<DisplacementField, KdsmError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Vec::with_capacity(backmap.len());
    for (i, cands) in backmap.iter().enumerate() {
        let u_material = if cands.is_empty() {
            let best = kdsm
                .bvh
                .global_best(&gt_positions[i])
                .ok_or(KdsmError::NoParent { vertex: i })?;
            kdsm.to_backmap(&best).u_material
        } else {
            let containing: Vec<&BackmapCandidate> = cands
                .iter()
                .filter(|c| c.min_weight >= -CONTAINMENT_EPS)
                .collect();
            match containing.len() {
                0 => cands[0].u_material,
                1 => containing[0].u_material,
                k => containing[rng.gen_range(0..k)].u_material,
            }
        };
        d.push(u_material - cloth_rest[i]);
    }
    Ok(DisplacementField { pose, d })
}

/// A cloth vertex's fixed attachment to the body surface: the closest
/// surface point in the rest pose, stored barycentrically so it can be
/// re-evaluated on the posed body.
#[derive(Debug, Clone, Copy)]
pub struct UvnAnchor {
    pub triangle: usize,
    pub bary: [f64; 3],
}

/// Closest-point anchors for every cloth rest vertex.
pub fn compute_anchors(
    cloth_rest: &[Point3<f64>],
    body_rest: &TriMesh,
) -> Result<Vec<UvnAnchor>, KdsmError> {
    let bvh = TriBvh::build(body_rest)?;
    Ok(cloth_rest
        .iter()
        .map(|p| {
            let sp = bvh.closest_point(p);
            UvnAnchor {
                triangle: sp.triangle,
                bary: sp.bary,
            }
        })
        .collect())
}

/// Orthonormal surface frame at a triangle, columns [t_u, t_v, n]:
/// the direction of increasing texture u projected into the triangle
/// plane, its in-plane complement, and the normal. None when the
/// triangle or its UV chart is degenerate.
fn anchor_frame(
    positions: &[Point3<f64>],
    uvs: &[Vector2<f64>],
    tri: [usize; 3],
) -> Option<Matrix3<f64>> {
    let [a, b, c] = tri;
    let e1 = positions[b] - positions[a];
    let e2 = positions[c] - positions[a];
    let n = e1.cross(&e2);
    let n_len = n.norm();
    if n_len <= 1e-12 {
        return None;
    }
    let n = n / n_len;
    let duv1 = uvs[b] - uvs[a];
    let duv2 = uvs[c] - uvs[a];
    let det = duv1.x * duv2.y - duv2.x * duv1.y;
    if det.abs() <= 1e-12 {
        return None;
    }
    let t_raw = (e1 * duv2.y - e2 * duv1.y) / det;
    let t = t_raw - n * t_raw.dot(&n);
    let t_len = t.norm();
    if t_len <= 1e-9 {
        return None;
    }
    let t = t / t_len;
    let v = n.cross(&t);
    Some(Matrix3::from_columns(&[t, v, n]))
}

fn anchor_position(positions: &[Point3<f64>], tri: [usize; 3], bary: &[f64; 3]) -> Point3<f64> {
    Point3::from(
        positions[tri[0]].coords * bary[0]
            + positions[tri[1]].coords * bary[1]
            + positions[tri[2]].coords * bary[2],
    )
}

/// Method 2: express each ground-truth vertex as a UVN offset from its
/// posed anchor, then re-apply that offset in the rest-pose anchor
/// frame. Smooth by construction and free of candidate ambiguity, but
/// only approximate where the cloth slides over the body.
pub fn method2(
    pose: usize,
    gt_positions: &[Point3<f64>],
    anchors: &[UvnAnchor],
    body_rest: &TriMesh,
    body_posed: &[Point3<f64>],
    cloth_rest: &[Point3<f64>],
) -> Result<DisplacementField, KdsmError> {
    let uvs = body_rest.uvs.as_ref().ok_or_else(|| {
        KdsmError::ShapeMismatch("body mesh has no texture coordinates".into())
    })?;
    let mut rest_frames: BTreeMap<usize, Option<Matrix3<f64>>> = BTreeMap::new();
    let mut posed_frames: BTreeMap<usize, Option<Matrix3<f64>>> = BTreeMap::new();
    let mut d = Vec::with_capacity(gt_positions.len());
    for (i, anchor) in anchors.iter().enumerate() {
        let tri = body_rest.triangles[anchor.triangle];
        let rest_frame = *rest_frames
            .entry(anchor.triangle)
            .or_insert_with(|| anchor_frame(&body_rest.vertices, uvs, tri));
        let posed_frame = *posed_frames
            .entry(anchor.triangle)
            .or_insert_with(|| anchor_frame(body_posed, uvs, tri));
        let (rest_frame, posed_frame) = match (rest_frame, posed_frame) {
            (Some(r), Some(p)) => (r, p),
            _ => return Err(KdsmError::DegenerateFrame { vertex: i }),
        };
        let anchor_rest = anchor_position(&body_rest.vertices, tri, &anchor.bary);
        let anchor_posed = anchor_position(body_posed, tri, &anchor.bary);
        let offset = posed_frame.transpose() * (gt_positions[i] - anchor_posed);
        let u_material = anchor_rest + rest_frame * offset;
        d.push(u_material - cloth_rest[i]);
    }
    Ok(DisplacementField { pose, d })
}

/// Hybrid: exact candidates where unambiguous, the candidate nearest
/// method 2's answer where ambiguous (accepted only within `tau`), and
/// a Laplace morph of the method 2 field over whatever remains. Each
/// morph round freezes the vertices whose morphed value landed within
/// `tau` of method 2 and re-solves, until nothing new freezes.
pub fn hybrid(
    pose: usize,
    backmap: &[Vec<BackmapCandidate>],
    method2_field: &DisplacementField,
    cloth_rest: &[Point3<f64>],
    edges: &[(usize, usize)],
    tau: f64,
) -> Result<DisplacementField, KdsmError> {
    let n = cloth_rest.len();
    if backmap.len() != n || method2_field.d.len() != n {
        return Err(KdsmError::ShapeMismatch(format!(
            "hybrid inputs disagree: {} candidates, {} method-2 values, {} vertices",
            backmap.len(),
            method2_field.d.len(),
            n
        )));
    }
    let mut d = vec![Vector3::zeros(); n];
    let mut valid = vec![false; n];
    for (i, cands) in backmap.iter().enumerate() {
        match cands.len() {
            0 => {}
            1 => {
                d[i] = cands[0].u_material - cloth_rest[i];
                valid[i] = true;
            }
            _ => {
                let target = cloth_rest[i] + method2_field.d[i];
                let mut best = 0;
                let mut best_dist = (cands[0].u_material - target).norm();
                for (k, c) in cands.iter().enumerate().skip(1) {
                    let dist = (c.u_material - target).norm();
                    if dist < best_dist {
                        best = k;
                        best_dist = dist;
                    }
                }
                if best_dist < tau {
                    d[i] = cands[best].u_material - cloth_rest[i];
                    valid[i] = true;
                }
            }
        }
    }
    if !valid.iter().any(|&v| v) {
        // Nothing to anchor a morph on; the morph of the method 2 field
        // with no constraints is the field itself.
        return Ok(DisplacementField {
            pose,
            d: method2_field.d.clone(),
        });
    }
    if valid.iter().all(|&v| v) {
        return Ok(DisplacementField { pose, d });
    }
    loop {
        let dirichlet: BTreeMap<usize, Vector3<f64>> = valid
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| (i, d[i]))
            .collect();
        let morphed = poisson_morph(n, edges, &method2_field.d, &dirichlet)?;
        let mut newly_valid = false;
        for i in 0..n {
            if valid[i] {
                continue;
            }
            d[i] = morphed[i];
            if (morphed[i] - method2_field.d[i]).norm() < tau {
                valid[i] = true;
                newly_valid = true;
            }
        }
        if !newly_valid {
            break;
        }
        if valid.iter().all(|&v| v) {
            break;
        }
    }
    Ok(DisplacementField { pose, d })
}

/// Writes a displacement field: a one-line text header with the pose id
/// and vertex count, then the vectors as little-endian doubles.
pub fn write_displacement_field(path: &Path, field: &DisplacementField) -> Result<(), KdsmError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "disp {} {}", field.pose, field.d.len())?;
    for v in &field.d {
        for a in 0..3 {
            w.write_all(&v[a].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_displacement_field(path: &Path) -> Result<DisplacementField, KdsmError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_line(&mut r, path)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let parse_err = |message: &str| KdsmError::Parse {
        path: path.display().to_string(),
        line: 1,
        message: message.into(),
    };
    if parts.len() != 3 || parts[0] != "disp" {
        return Err(parse_err("expected header: disp <pose> <count>"));
    }
    let pose: usize = parts[1].parse().map_err(|_| parse_err("bad pose id"))?;
    let n: usize = parts[2].parse().map_err(|_| parse_err("bad vertex count"))?;
    let mut d = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        let mut v = Vector3::zeros();
        for a in 0..3 {
            r.read_exact(&mut buf)?;
            v[a] = f64::from_le_bytes(buf);
        }
        d.push(v);
    }
    Ok(DisplacementField { pose, d })
}

/// Writes an embedding: a one-line text header with the vertex count,
/// then per vertex the parent tet id and four weights, all binary.
pub fn write_embedding(path: &Path, emb: &Embedding) -> Result<(), KdsmError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "embed {}", emb.parents.len())?;
    for (&t, lambda) in emb.parents.iter().zip(&emb.weights) {
        w.write_all(&(t as u64).to_le_bytes())?;
        for l in lambda {
            w.write_all(&l.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding(path: &Path) -> Result<Embedding, KdsmError> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_line(&mut r, path)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let parse_err = |message: &str| KdsmError::Parse {
        path: path.display().to_string(),
        line: 1,
        message: message.into(),
    };
    if parts.len() != 2 || parts[0] != "embed" {
        return Err(parse_err("expected header: embed <count>"));
    }
    let n: usize = parts[1].parse().map_err(|_| parse_err("bad vertex count"))?;
    let mut parents = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        parents.push(u64::from_le_bytes(buf) as usize);
        let mut lambda = [0.0; 4];
        for l in &mut lambda {
            r.read_exact(&mut buf)?;
            *l = f64::from_le_bytes(buf);
        }
        weights.push(lambda);
    }
    Ok(Embedding { parents, weights })
}

pub(crate) fn read_header_line(r: &mut impl Read, path: &Path) -> Result<String, KdsmError> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        r.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 256 {
            return Err(KdsmError::Parse {
                path: path.display().to_string(),
                line: 1,
                message: "header line too long".into(),
            });
        }
    }
    String::from_utf8(line).map_err(|_| KdsmError::Parse {
        path: path.display().to_string(),
        line: 1,
        message: "header is not UTF-8".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::level_set::ScalarGrid;
    use crate::tet_lattice::build_lattice;
    use nalgebra::{Rotation3, Vector3};

    /// Solid 4x4x4 cm lattice block around the origin.
    pub(crate) fn block_lattice() -> TetMesh {
        let grid = ScalarGrid {
            origin: Point3::new(-2.0, -2.0, -2.0),
            dx: 2.0,
            dims: [3, 3, 3],
            values: vec![-1.0; 27],
        };
        build_lattice(&grid, 2.0).unwrap()
    }

    fn smooth_bend(p: &Point3<f64>) -> Point3<f64> {
        // A gentle twist around z plus shear; invertible in the block.
        let angle = 0.15 * p.z;
        let (s, c) = angle.sin_cos();
        Point3::new(
            c * p.x - s * p.y + 0.1 * p.z,
            s * p.x + c * p.y,
            p.z * (1.0 + 0.02 * p.x),
        )
    }

    /// Random points strictly inside lattice tets (the BCC block does
    /// not fill its bounding box, so box sampling would escape it).
    fn interior_points(lattice: &TetMesh, count: usize, seed: u64) -> Vec<Point3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let t = rng.gen_range(0..lattice.tets.len());
                let mut l = [0.0f64; 4];
                let mut sum = 0.0;
                for li in &mut l {
                    *li = rng.gen_range(0.5..1.0);
                    sum += *li;
                }
                for li in &mut l {
                    *li /= sum;
                }
                lattice.point_from_barycentric(t, &l)
            })
            .collect()
    }

    #[test]
    fn embed_rest_finds_centroids_and_vertices() {
        let lattice = block_lattice();
        let centroid = Point3::from(
            (lattice.vertices[lattice.tets[7][0]].coords
                + lattice.vertices[lattice.tets[7][1]].coords
                + lattice.vertices[lattice.tets[7][2]].coords
                + lattice.vertices[lattice.tets[7][3]].coords)
                / 4.0,
        );
        let on_vertex = lattice.vertices[lattice.tets[3][2]];
        let emb = embed_rest(&[centroid, on_vertex], &lattice).unwrap();
        for l in &emb.weights[0] {
            assert!((l - 0.25).abs() < 1e-12);
        }
        // The second point coincides with a lattice vertex: the chosen
        // parent must contain it with one weight 1.
        let max = emb.weights[1].iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 1.0).abs() < 1e-9);
        let parent = lattice.tets[emb.parents[1]];
        assert!(parent
            .iter()
            .any(|&v| (lattice.vertices[v] - on_vertex).norm() < 1e-12));
    }

    #[test]
    fn embed_rest_reports_escaped_vertices() {
        let lattice = block_lattice();
        let err = embed_rest(&[Point3::new(50.0, 0.0, 0.0)], &lattice).unwrap_err();
        assert!(matches!(err, KdsmError::NoParent { vertex: 0 }));
    }

    #[test]
    fn embed_clamped_projects_outside_points_into_a_tet() {
        let lattice = block_lattice();
        let kdsm = PosedKdsm::new(&lattice.vertices, &lattice.vertices, &lattice.tets);
        let outside = Point3::new(0.3, 0.1, 9.0);
        let inside = Point3::new(0.2, -0.1, 0.4);
        let emb = embed_clamped(&[outside, inside], &kdsm.bvh).unwrap();
        let sum: f64 = emb.weights[0].iter().sum();
        assert_eq!(sum, 1.0);
        assert!(emb.weights[0].iter().all(|&l| l >= -1e-12));
        let back = skin_embedded(&emb, &lattice.vertices, &lattice.tets);
        // The clamped point lands on its parent tet (nonnegative
        // weights mean a convex combination), well below the escape.
        assert!(back[0].z <= 2.0 + 1e-9);
        // Interior points are untouched by clamping.
        assert!((back[1] - inside).norm() < 1e-9);
    }

    #[test]
    fn embedding_reconstructs_interior_points() {
        let lattice = block_lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut points = Vec::new();
        for _ in 0..200 {
            let t = rng.gen_range(0..lattice.tets.len());
            let mut l = [0.0f64; 4];
            let mut sum = 0.0;
            for li in &mut l {
                *li = rng.gen_range(0.01..1.0);
                sum += *li;
            }
            for li in &mut l {
                *li /= sum;
            }
            points.push(lattice.point_from_barycentric(t, &l));
        }
        let emb = embed_rest(&points, &lattice).unwrap();
        let back = skin_embedded(&emb, &lattice.vertices, &lattice.tets);
        for (p, q) in points.iter().zip(&back) {
            assert!((p - q).norm() < 1e-9);
        }
    }

    #[test]
    fn skin_embedded_is_affine_invariant() {
        let lattice = block_lattice();
        let points = interior_points(&lattice, 50, 6);
        let emb = embed_rest(&points, &lattice).unwrap();
        let rot = Rotation3::from_euler_angles(0.4, -0.2, 1.1);
        let shift = Vector3::new(3.0, -1.0, 2.0);
        let moved: Vec<Point3<f64>> = lattice.vertices.iter().map(|v| rot * v + shift).collect();
        let skinned = skin_embedded(&emb, &moved, &lattice.tets);
        for (p, q) in points.iter().zip(&skinned) {
            assert!((rot * p + shift - q).norm() < 1e-9);
        }
    }

    #[test]
    fn nonnegative_embeddings_obey_the_parent_displacement_bound() {
        let lattice = block_lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // Build embeddings with strictly nonnegative weights directly.
        let mut emb = Embedding {
            parents: Vec::new(),
            weights: Vec::new(),
        };
        for _ in 0..500 {
            let t = rng.gen_range(0..lattice.tets.len());
            let mut l = [0.0f64; 4];
            let mut sum = 0.0;
            for li in &mut l {
                *li = rng.gen_range(0.0..1.0);
                sum += *li;
            }
            for li in &mut l {
                *li /= sum;
            }
            emb.parents.push(t);
            emb.weights.push(l);
        }
        let before = skin_embedded(&emb, &lattice.vertices, &lattice.tets);
        let moved: Vec<Point3<f64>> = lattice
            .vertices
            .iter()
            .map(|v| {
                v + Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let after = skin_embedded(&emb, &moved, &lattice.tets);
        for i in 0..emb.parents.len() {
            let tet = lattice.tets[emb.parents[i]];
            let max_parent = tet
                .iter()
                .map(|&v| (moved[v] - lattice.vertices[v]).norm())
                .fold(0.0, f64::max);
            assert!((after[i] - before[i]).norm() <= max_parent + 1e-12);
        }
    }

    #[test]
    fn backmap_identity_pose_is_exact() {
        let lattice = block_lattice();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloth: Vec<Point3<f64>> = (0..100)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.8..1.8),
                    rng.gen_range(-1.8..1.8),
                    rng.gen_range(-1.8..1.8),
                )
            })
            .collect();
        let kdsm = PosedKdsm::new(&lattice.vertices, &lattice.vertices, &lattice.tets);
        let backmap = backmap_ground_truth(&cloth, &kdsm);
        let field = method1(0, &backmap, &cloth, &kdsm, &cloth, 123).unwrap();
        for d in &field.d {
            assert!(d.norm() < 1e-9);
        }
    }

    #[test]
    fn single_candidate_backmap_round_trips() {
        let lattice = block_lattice();
        let deformed: Vec<Point3<f64>> = lattice.vertices.iter().map(smooth_bend).collect();
        let kdsm = PosedKdsm::new(&lattice.vertices, &deformed, &lattice.tets);
        let gt: Vec<Point3<f64>> = interior_points(&lattice, 100, 10)
            .iter()
            .map(smooth_bend)
            .collect();
        let backmap = backmap_ground_truth(&gt, &kdsm);
        let mut singles = 0;
        for (i, cands) in backmap.iter().enumerate() {
            assert!(!cands.is_empty(), "vertex {i} escaped a smooth bend");
            for c in cands {
                // Re-skinning any candidate reproduces the input point.
                let tet = lattice.tets[c.tet];
                let rebuilt = point_from_barycentric(
                    &[deformed[tet[0]], deformed[tet[1]], deformed[tet[2]], deformed[tet[3]]],
                    &c.lambda,
                );
                assert!((rebuilt - gt[i]).norm() < 1e-9);
            }
            if cands.len() == 1 {
                singles += 1;
            }
        }
        assert!(singles > 50, "smooth bend should be mostly unambiguous");
    }

    /// Rest: two separated tets. Deformed: the second slides onto the
    /// first, so points inside both exist. Their material locations
    /// stay distinct.
    fn overlapping_pair() -> (Vec<Point3<f64>>, Vec<Point3<f64>>, Vec<[usize; 4]>) {
        let unit = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
            Point3::new(0.0, 2.0, 0.0),
            Point3::new(0.0, 0.0, 2.0),
        ];
        let mut rest: Vec<Point3<f64>> = unit.to_vec();
        rest.extend(unit.iter().map(|p| p + Vector3::new(10.0, 0.0, 0.0)));
        let mut deformed: Vec<Point3<f64>> = unit.to_vec();
        deformed.extend(unit.iter().map(|p| p + Vector3::new(1.0, 0.0, 0.0)));
        let tets = vec![[0, 1, 2, 3], [4, 5, 6, 7]];
        (rest, deformed, tets)
    }

    #[test]
    fn constructed_overlap_yields_two_distinct_material_points() {
        let (rest, deformed, tets) = overlapping_pair();
        let kdsm = PosedKdsm::new(&rest, &deformed, &tets);
        let gt = vec![Point3::new(1.2, 0.3, 0.3)];
        let backmap = backmap_ground_truth(&gt, &kdsm);
        assert_eq!(backmap[0].len(), 2);
        let a = backmap[0][0].u_material;
        let b = backmap[0][1].u_material;
        assert!((a - b).norm() > 5.0);
        for c in &backmap[0] {
            let tet = tets[c.tet];
            let rebuilt = point_from_barycentric(
                &[deformed[tet[0]], deformed[tet[1]], deformed[tet[2]], deformed[tet[3]]],
                &c.lambda,
            );
            assert!((rebuilt - gt[0]).norm() < 1e-12);
        }
    }

    #[test]
    fn method1_seeds_differ_only_at_ambiguous_vertices() {
        let (rest, deformed, tets) = overlapping_pair();
        let kdsm = PosedKdsm::new(&rest, &deformed, &tets);
        // Vertex 0 unambiguous, vertex 1 inside the overlap.
        let gt = vec![Point3::new(0.3, 0.2, 0.2), Point3::new(1.2, 0.3, 0.3)];
        let cloth_rest = gt.clone();
        let backmap = backmap_ground_truth(&gt, &kdsm);
        assert_eq!(backmap[0].len(), 1);
        assert_eq!(backmap[1].len(), 2);
        let fields: Vec<DisplacementField> = (0..20)
            .map(|s| method1(0, &backmap, &gt, &kdsm, &cloth_rest, s).unwrap())
            .collect();
        let mut saw_both = [false, false];
        for f in &fields {
            assert_eq!(f.d[0], fields[0].d[0], "unambiguous vertex must not vary");
            let pick_far = f.d[1].norm() > 5.0;
            saw_both[pick_far as usize] = true;
        }
        assert_eq!(saw_both, [true, true], "both candidates should be drawn");
    }

    /// Flat rectangular body patch in the xy plane with uv = position.
    fn flat_body() -> TriMesh {
        let mut vertices = Vec::new();
        let mut uvs = Vec::new();
        let n = 6;
        for j in 0..n {
            for i in 0..n {
                let (x, y) = (i as f64, j as f64);
                vertices.push(Point3::new(x, y, 0.0));
                uvs.push(Vector2::new(x / (n - 1) as f64, y / (n - 1) as f64));
            }
        }
        let mut triangles = Vec::new();
        for j in 0..n - 1 {
            for i in 0..n - 1 {
                let a = j * n + i;
                let b = a + 1;
                let c = a + n;
                let d = c + 1;
                triangles.push([a, b, d]);
                triangles.push([a, d, c]);
            }
        }
        TriMesh {
            vertices,
            triangles,
            uvs: Some(uvs),
        }
    }

    #[test]
    fn method2_identity_and_rigid_motion_give_zero_displacement() {
        let body = flat_body();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let cloth: Vec<Point3<f64>> = (0..60)
            .map(|_| {
                Point3::new(
                    rng.gen_range(0.5..4.5),
                    rng.gen_range(0.5..4.5),
                    rng.gen_range(0.3..1.0),
                )
            })
            .collect();
        let anchors = compute_anchors(&cloth, &body).unwrap();
        let identity = method2(0, &cloth, &anchors, &body, &body.vertices, &cloth).unwrap();
        for d in &identity.d {
            assert!(d.norm() < 1e-9);
        }
        let rot = Rotation3::from_euler_angles(0.3, 0.7, -0.5);
        let shift = Vector3::new(4.0, -2.0, 6.0);
        let body_posed: Vec<Point3<f64>> = body.vertices.iter().map(|p| rot * p + shift).collect();
        let gt: Vec<Point3<f64>> = cloth.iter().map(|p| rot * p + shift).collect();
        let rigid = method2(0, &gt, &anchors, &body, &body_posed, &cloth).unwrap();
        for d in &rigid.d {
            assert!(d.norm() < 1e-6);
        }
    }

    #[test]
    fn method2_rejects_degenerate_uv_charts() {
        let mut body = flat_body();
        // Collapse the UV chart of the first triangle.
        let tri = body.triangles[0];
        let uvs = body.uvs.as_mut().unwrap();
        uvs[tri[1]] = uvs[tri[0]];
        uvs[tri[2]] = uvs[tri[0]];
        // A cloth vertex right above that triangle anchors to it.
        let cloth = vec![Point3::new(0.3, 0.3, 0.2)];
        let anchors = compute_anchors(&cloth, &body).unwrap();
        assert_eq!(anchors[0].triangle, 0);
        let err = method2(0, &cloth, &anchors, &body, &body.vertices, &cloth).unwrap_err();
        assert!(matches!(err, KdsmError::DegenerateFrame { vertex: 0 }));
    }

    #[test]
    fn hybrid_equals_method1_when_unambiguous() {
        let lattice = block_lattice();
        let deformed: Vec<Point3<f64>> = lattice.vertices.iter().map(smooth_bend).collect();
        let kdsm = PosedKdsm::new(&lattice.vertices, &deformed, &lattice.tets);
        let cloth = interior_points(&lattice, 40, 20);
        let gt: Vec<Point3<f64>> = cloth.iter().map(smooth_bend).collect();
        let mut backmap = backmap_ground_truth(&gt, &kdsm);
        // Force the unambiguous case by truncating to the best candidate.
        for c in &mut backmap {
            c.truncate(1);
            assert_eq!(c.len(), 1);
        }
        let m1 = method1(0, &backmap, &gt, &kdsm, &cloth, 99).unwrap();
        let m2 = DisplacementField {
            pose: 0,
            d: vec![Vector3::zeros(); cloth.len()],
        };
        let edges: Vec<(usize, usize)> = (0..cloth.len() - 1).map(|i| (i, i + 1)).collect();
        let h = hybrid(0, &backmap, &m2, &cloth, &edges, DEFAULT_HYBRID_TAU).unwrap();
        assert_eq!(h.d, m1.d);
    }

    #[test]
    fn hybrid_with_no_valid_vertices_returns_the_morphed_source() {
        let (rest, deformed, tets) = overlapping_pair();
        let kdsm = PosedKdsm::new(&rest, &deformed, &tets);
        // Both cloth vertices sit in the overlap: every candidate is
        // ambiguous, and the method 2 guesses below are kilometers off,
        // so nothing validates.
        let gt = vec![Point3::new(1.2, 0.3, 0.3), Point3::new(1.3, 0.25, 0.2)];
        let cloth_rest = gt.clone();
        let backmap = backmap_ground_truth(&gt, &kdsm);
        assert!(backmap.iter().all(|c| c.len() == 2));
        let m2 = DisplacementField {
            pose: 3,
            d: vec![Vector3::new(1000.0, 0.0, 0.0); 2],
        };
        let edges = vec![(0, 1)];
        let h = hybrid(3, &backmap, &m2, &cloth_rest, &edges, DEFAULT_HYBRID_TAU).unwrap();
        assert_eq!(h.d, m2.d);
        assert_eq!(h.pose, 3);
    }

    #[test]
    fn hybrid_morphs_escaped_vertices_toward_method2() {
        let lattice = block_lattice();
        let kdsm = PosedKdsm::new(&lattice.vertices, &lattice.vertices, &lattice.tets);
        // Three cloth vertices on a path; the middle one escapes the
        // lattice entirely, the outer two are unambiguous.
        let gt = vec![
            Point3::new(0.5, 0.5, 0.5),
            Point3::new(0.0, 0.0, 30.0),
            Point3::new(-0.5, -0.5, -0.5),
        ];
        let cloth_rest = vec![
            Point3::new(0.5, 0.5, 0.5),
            Point3::new(0.0, 0.0, 1.5),
            Point3::new(-0.5, -0.5, -0.5),
        ];
        let backmap = backmap_ground_truth(&gt, &kdsm);
        assert_eq!(backmap[1].len(), 0, "vertex 1 should escape");
        let m2 = DisplacementField {
            pose: 0,
            d: vec![
                Vector3::zeros(),
                Vector3::new(0.0, 0.0, 0.3),
                Vector3::zeros(),
            ],
        };
        let edges = vec![(0, 1), (1, 2)];
        let h = hybrid(0, &backmap, &m2, &cloth_rest, &edges, DEFAULT_HYBRID_TAU).unwrap();
        // Ends are the exact candidates.
        assert!(h.d[0].norm() < 1e-9);
        assert!(h.d[2].norm() < 1e-9);
        // The middle vertex was morphed: L x = L s with both neighbors
        // constrained near zero gives x_1 = s_1 + (x_0 + x_2 - s_0 - s_2)/2,
        // i.e. about the source value, far from the escaped GT.
        assert!((h.d[1] - m2.d[1]).norm() < 1e-6);
    }

    #[test]
    fn displacement_and_embedding_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let field = DisplacementField {
            pose: 17,
            d: vec![
                Vector3::new(0.1, -0.25, 1.0 / 3.0),
                Vector3::new(f64::MIN_POSITIVE, -2.5e300, 0.0),
            ],
        };
        let path = dir.path().join("f.disp");
        write_displacement_field(&path, &field).unwrap();
        let back = read_displacement_field(&path).unwrap();
        assert_eq!(back.pose, field.pose);
        assert_eq!(back.d, field.d);

        let emb = Embedding {
            parents: vec![3, 0, 12],
            weights: vec![[0.25; 4], [1.0, 0.0, 0.0, 0.0], [0.5, 0.5, 0.25, -0.25]],
        };
        let path = dir.path().join("e.embed");
        write_embedding(&path, &emb).unwrap();
        let back = read_embedding(&path).unwrap();
        assert_eq!(back, emb);
    }
}
