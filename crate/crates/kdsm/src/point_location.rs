//! Point location in a (possibly self-overlapping) deformed tet mesh.
//!
//! A deformed KDSM can fold over itself, so a query point may sit in
//! several tetrahedra at once, or in none while still being within a
//! whisker of one. Queries therefore return every tet whose barycentric
//! minimum weight is at least -eps, sorted best-first, and a pruning
//! pass collapses clusters of neighboring candidates.
//!
//! BVH boxes are inflated by eps_box plus 3 eps times the tet's extent
//! per axis. A point with all weights >= -eps can stray outside the
//! tet's tight box by at most 3 eps times its extent (at most three
//! weights are negative, each by at most eps), so box overlap is a
//! provable superset of the barycentric predicate and the exact filter
//! afterwards loses nothing.

use nalgebra::{Point3, Vector3};

use crate::geometry::{
    aabb_dist2, barycentric_coords, build_bvh_node, Aabb, BvhNode,
};

/// One near-containing tetrahedron of a query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub tet: usize,
    pub lambda: [f64; 4],
    pub min_weight: f64,
}

/// Default barycentric tolerance for candidacy.
pub const DEFAULT_BARY_EPS: f64 = 1e-4;
/// Default absolute box inflation in cm.
pub const DEFAULT_BOX_EPS: f64 = 1e-3;

const TET_LEAF_SIZE: usize = 4;

/// AABB tree over the deformed tets. Self-contained: holds copies of
/// the deformed tet vertex positions.
pub struct TetBvh {
    tet_verts: Vec<[Point3<f64>; 4]>,
    nodes: Vec<BvhNode>,
    order: Vec<u32>,
    eps_box: f64,
    /// Barycentric slack the boxes were inflated for; queries must not
    /// exceed it.
    pub bary_slack: f64,
}

impl TetBvh {
    pub fn build(
        deformed: &[Point3<f64>],
        tets: &[[usize; 4]],
        eps_box: f64,
        bary_slack: f64,
    ) -> TetBvh {
        let tet_verts: Vec<[Point3<f64>; 4]> = tets
            .iter()
            .map(|t| [deformed[t[0]], deformed[t[1]], deformed[t[2]], deformed[t[3]]])
            .collect();
        let boxes: Vec<Aabb> = tet_verts
            .iter()
            .map(|v| {
                let tight = Aabb::from_points(v);
                let pad = Vector3::from_element(eps_box) + tight.extent() * (3.0 * bary_slack);
                tight.inflate(&pad)
            })
            .collect();
        let centroids: Vec<Point3<f64>> = tet_verts
            .iter()
            .map(|v| Point3::from((v[0].coords + v[1].coords + v[2].coords + v[3].coords) / 4.0))
            .collect();
        let mut order: Vec<u32> = (0..tet_verts.len() as u32).collect();
        let mut nodes = Vec::new();
        if !tet_verts.is_empty() {
            build_bvh_node(
                &mut nodes,
                &mut order,
                0,
                tet_verts.len(),
                &boxes,
                &centroids,
                TET_LEAF_SIZE,
            );
        }
        TetBvh {
            tet_verts,
            nodes,
            order,
            eps_box,
            bary_slack,
        }
    }

    /// Tet ids whose inflated box contains `p`, ascending.
    pub fn overlapping_boxes(&self, p: &Point3<f64>) -> Vec<usize> {
        let mut out = Vec::new();
        if self.nodes.is_empty() {
            return out;
        }
        let mut stack = vec![0u32];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id as usize];
            if aabb_dist2(&node.aabb, p) > 0.0 {
                continue;
            }
            if node.count > 0 {
                for &t in &self.order[node.start as usize..(node.start + node.count) as usize] {
                    // Leaf boxes are unions of their tets' boxes, so each
                    // tet's own (inflated) box still needs checking.
                    if tet_box_contains(&self.tet_verts[t as usize], p, self) {
                        out.push(t as usize);
                    }
                }
            } else {
                stack.push(node.left);
                stack.push(node.right);
            }
        }
        out.sort_unstable();
        out
    }

    /// All tets whose barycentric minimum weight for `p` is at least
    /// -eps, skipping degenerate tets, sorted by that weight descending
    /// with ties broken by ascending tet id. Exactly equal to a brute
    /// force scan with the same predicate as long as eps <= bary_slack.
    pub fn candidates(&self, p: &Point3<f64>, eps: f64) -> Vec<Candidate> {
        debug_assert!(eps <= self.bary_slack);
        let mut out: Vec<Candidate> = Vec::new();
        for tet in self.overlapping_boxes(p) {
            if let Some(c) = self.evaluate(tet, p) {
                if c.min_weight >= -eps {
                    out.push(c);
                }
            }
        }
        sort_candidates(&mut out);
        out
    }

    /// Barycentric evaluation of one tet; None when degenerate.
    pub fn evaluate(&self, tet: usize, p: &Point3<f64>) -> Option<Candidate> {
        let lambda = barycentric_coords(&self.tet_verts[tet], p)?;
        let min_weight = lambda.iter().copied().fold(f64::INFINITY, f64::min);
        Some(Candidate {
            tet,
            lambda,
            min_weight,
        })
    }

    /// The globally best tet for `p` by maximum minimum weight, however
    /// negative; a full scan, for points that fail the -eps predicate
    /// everywhere. None only when every tet is degenerate.
    pub fn global_best(&self, p: &Point3<f64>) -> Option<Candidate> {
        let mut best: Option<Candidate> = None;
        for tet in 0..self.tet_verts.len() {
            if let Some(c) = self.evaluate(tet, p) {
                let better = match &best {
                    Some(b) => c.min_weight > b.min_weight,
                    None => true,
                };
                if better {
                    best = Some(c);
                }
            }
        }
        best
    }

    pub fn tet_count(&self) -> usize {
        self.tet_verts.len()
    }
}

fn tet_box_contains(verts: &[Point3<f64>; 4], p: &Point3<f64>, bvh: &TetBvh) -> bool {
    // Recompute the inflated box; cheaper than storing all leaf boxes.
    let tight = Aabb::from_points(verts);
    let pad = Vector3::from_element(bvh.eps_box) + tight.extent() * (3.0 * bvh.bary_slack);
    tight.inflate(&pad).contains(p)
}

fn sort_candidates(list: &mut [Candidate]) {
    list.sort_by(|a, b| {
        b.min_weight
            .partial_cmp(&a.min_weight)
            .unwrap()
            .then(a.tet.cmp(&b.tet))
    });
}

/// Greedy conflict pruning of a sorted candidate list: keep the best
/// entry, identify the face of its tet opposite the minimum-weight
/// corner, drop every later entry whose tet shares a vertex with that
/// face, and continue from the next survivor.
pub fn prune_candidates(list: &[Candidate], tets: &[[usize; 4]]) -> Vec<Candidate> {
    let mut kept: Vec<Candidate> = Vec::new();
    let mut removed = vec![false; list.len()];
    for i in 0..list.len() {
        if removed[i] {
            continue;
        }
        let cand = list[i];
        kept.push(cand);
        let tet = tets[cand.tet];
        let mut corner = 0;
        for k in 1..4 {
            if cand.lambda[k] < cand.lambda[corner] {
                corner = k;
            }
        }
        let face: [usize; 3] = std::array::from_fn(|k| tet[if k < corner { k } else { k + 1 }]);
        for (j, r) in removed.iter_mut().enumerate().skip(i + 1) {
            if !*r && tets[list[j].tet].iter().any(|v| face.contains(v)) {
                *r = true;
            }
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::tet_signed_volume;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_soup(n: usize, seed: u64) -> (Vec<Point3<f64>>, Vec<[usize; 4]>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vertices = Vec::new();
        let mut tets = Vec::new();
        while tets.len() < n {
            let center = Point3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let v: [Point3<f64>; 4] = std::array::from_fn(|_| {
                center
                    + Vector3::new(
                        rng.gen_range(-1.5..1.5),
                        rng.gen_range(-1.5..1.5),
                        rng.gen_range(-1.5..1.5),
                    )
            });
            if tet_signed_volume(&v).abs() < 1e-2 {
                continue;
            }
            let base = vertices.len();
            vertices.extend(v);
            tets.push([base, base + 1, base + 2, base + 3]);
        }
        (vertices, tets)
    }

    fn brute_force_candidates(
        vertices: &[Point3<f64>],
        tets: &[[usize; 4]],
        p: &Point3<f64>,
        eps: f64,
    ) -> Vec<Candidate> {
        let mut out = Vec::new();
        for (t, tet) in tets.iter().enumerate() {
            let verts = [
                vertices[tet[0]],
                vertices[tet[1]],
                vertices[tet[2]],
                vertices[tet[3]],
            ];
            if let Some(lambda) = barycentric_coords(&verts, p) {
                let min_weight = lambda.iter().copied().fold(f64::INFINITY, f64::min);
                if min_weight >= -eps {
                    out.push(Candidate {
                        tet: t,
                        lambda,
                        min_weight,
                    });
                }
            }
        }
        sort_candidates(&mut out);
        out
    }

    #[test]
    fn single_tet_queries() {
        let vertices = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        let tets = vec![[0, 1, 2, 3]];
        let bvh = TetBvh::build(&vertices, &tets, DEFAULT_BOX_EPS, DEFAULT_BARY_EPS);
        let inside = bvh.candidates(&Point3::new(0.2, 0.2, 0.2), DEFAULT_BARY_EPS);
        assert_eq!(inside.len(), 1);
        assert_eq!(inside[0].tet, 0);
        assert!(inside[0].min_weight > 0.0);
        // Far away: no box overlap at all.
        assert!(bvh.overlapping_boxes(&Point3::new(5.0, 5.0, 5.0)).is_empty());
        assert!(bvh.candidates(&Point3::new(5.0, 5.0, 5.0), DEFAULT_BARY_EPS).is_empty());
    }

    #[test]
    fn box_overlap_matches_brute_force_scan() {
        let (vertices, tets) = random_soup(300, 41);
        let bvh = TetBvh::build(&vertices, &tets, DEFAULT_BOX_EPS, DEFAULT_BARY_EPS);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..300 {
            let p = Point3::new(
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
            );
            let got = bvh.overlapping_boxes(&p);
            let mut expected = Vec::new();
            for (t, tet) in tets.iter().enumerate() {
                let tight = Aabb::from_points(&[
                    vertices[tet[0]],
                    vertices[tet[1]],
                    vertices[tet[2]],
                    vertices[tet[3]],
                ]);
                let pad = Vector3::from_element(DEFAULT_BOX_EPS)
                    + tight.extent() * (3.0 * DEFAULT_BARY_EPS);
                if tight.inflate(&pad).contains(&p) {
                    expected.push(t);
                }
            }
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn candidates_match_brute_force_including_boundary_points() {
        let (vertices, tets) = random_soup(200, 7);
        let bvh = TetBvh::build(&vertices, &tets, DEFAULT_BOX_EPS, DEFAULT_BARY_EPS);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut queries = Vec::new();
        for _ in 0..200 {
            queries.push(Point3::new(
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
            ));
        }
        // Points exactly on faces, edges, and vertices of actual tets:
        // one barycentric weight is exactly 0 (or two, or three).
        for _ in 0..200 {
            let t = rng.gen_range(0..tets.len());
            let tet = tets[t];
            let zeros = rng.gen_range(1..4);
            let mut l = [0.0f64; 4];
            for li in l.iter_mut().skip(zeros) {
                *li = rng.gen_range(0.1..1.0);
            }
            let sum: f64 = l.iter().sum();
            for li in &mut l {
                *li /= sum;
            }
            let verts = [
                vertices[tet[0]],
                vertices[tet[1]],
                vertices[tet[2]],
                vertices[tet[3]],
            ];
            queries.push(crate::geometry::point_from_barycentric(&verts, &l));
        }
        for p in &queries {
            let got = bvh.candidates(p, DEFAULT_BARY_EPS);
            let expected = brute_force_candidates(&vertices, &tets, p, DEFAULT_BARY_EPS);
            assert_eq!(got.len(), expected.len(), "point {p:?}");
            for (g, e) in got.iter().zip(&expected) {
                assert_eq!(g.tet, e.tet);
                assert_eq!(g.lambda, e.lambda);
            }
        }
    }

    #[test]
    fn larger_eps_returns_a_superset() {
        let (vertices, tets) = random_soup(150, 13);
        let loose = TetBvh::build(&vertices, &tets, DEFAULT_BOX_EPS, 1e-2);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let p = Point3::new(
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
                rng.gen_range(-12.0..12.0),
            );
            let tight: Vec<usize> = loose.candidates(&p, 1e-4).iter().map(|c| c.tet).collect();
            let wide: Vec<usize> = loose.candidates(&p, 1e-2).iter().map(|c| c.tet).collect();
            for t in &tight {
                assert!(wide.contains(t));
            }
        }
    }

    #[test]
    fn shared_face_point_sees_both_tets() {
        // Two tets sharing face (0, 1, 2).
        let vertices = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.3, 0.3, 1.0),
            Point3::new(0.3, 0.3, -1.0),
        ];
        let tets = vec![[0, 1, 2, 3], [0, 2, 1, 4]];
        let bvh = TetBvh::build(&vertices, &tets, DEFAULT_BOX_EPS, DEFAULT_BARY_EPS);
        // Centroid of the shared face.
        let p = Point3::new(1.0 / 3.0, 1.0 / 3.0, 0.0);
        let cands = bvh.candidates(&p, DEFAULT_BARY_EPS);
        assert_eq!(cands.len(), 2);
        for c in &cands {
            assert!(c.min_weight.abs() <= DEFAULT_BARY_EPS);
        }

        // Nudged inside tet 0: pruning keeps only tet 0, because tet 1
        // shares all three vertices of the face opposite the minimum
        // weight corner (the apex of tet 0).
        let p = Point3::new(1.0 / 3.0, 1.0 / 3.0, 1e-6);
        let cands = bvh.candidates(&p, DEFAULT_BARY_EPS);
        assert_eq!(cands.len(), 2);
        assert_eq!(cands[0].tet, 0);
        let pruned = prune_candidates(&cands, &tets);
        assert_eq!(pruned.len(), 1);
        assert_eq!(pruned[0].tet, 0);
    }

    #[test]
    fn disjoint_overlapping_tets_are_both_kept() {
        // A small tet fully inside a big one, sharing no vertex ids.
        let vertices = vec![
            Point3::new(-3.0, -3.0, -3.0),
            Point3::new(9.0, -3.0, -3.0),
            Point3::new(-3.0, 9.0, -3.0),
            Point3::new(-3.0, -3.0, 9.0),
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        let tets = vec![[0, 1, 2, 3], [4, 5, 6, 7]];
        let bvh = TetBvh::build(&vertices, &tets, DEFAULT_BOX_EPS, DEFAULT_BARY_EPS);
        let p = Point3::new(0.2, 0.2, 0.2);
        let cands = bvh.candidates(&p, DEFAULT_BARY_EPS);
        assert_eq!(cands.len(), 2);
        let pruned = prune_candidates(&cands, &tets);
        assert_eq!(pruned.len(), 2);
        // Single entries pass through pruning unchanged.
        let one = prune_candidates(&cands[..1], &tets);
        assert_eq!(one, cands[..1].to_vec());
    }

    #[test]
    fn pruning_keeps_the_best_entry_and_is_deterministic() {
        let (vertices, tets) = random_soup(120, 23);
        let bvh = TetBvh::build(&vertices, &tets, DEFAULT_BOX_EPS, DEFAULT_BARY_EPS);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..300 {
            let p = Point3::new(
                rng.gen_range(-11.0..11.0),
                rng.gen_range(-11.0..11.0),
                rng.gen_range(-11.0..11.0),
            );
            let cands = bvh.candidates(&p, DEFAULT_BARY_EPS);
            if cands.is_empty() {
                continue;
            }
            let pruned = prune_candidates(&cands, &tets);
            assert!(!pruned.is_empty());
            assert_eq!(pruned[0].tet, cands[0].tet);
            assert_eq!(prune_candidates(&cands, &tets), pruned);
            // Sort order preserved.
            for pair in pruned.windows(2) {
                assert!(
                    pair[0].min_weight > pair[1].min_weight
                        || (pair[0].min_weight == pair[1].min_weight
                            && pair[0].tet < pair[1].tet)
                );
            }
        }
    }

    #[test]
    fn global_best_finds_the_least_bad_tet() {
        let (vertices, tets) = random_soup(80, 31);
        let bvh = TetBvh::build(&vertices, &tets, DEFAULT_BOX_EPS, DEFAULT_BARY_EPS);
        // A point far outside everything still gets an answer.
        let p = Point3::new(50.0, 50.0, 50.0);
        let best = bvh.global_best(&p).unwrap();
        assert!(best.min_weight < 0.0);
        for t in 0..tets.len() {
            if let Some(c) = bvh.evaluate(t, &p) {
                assert!(c.min_weight <= best.min_weight);
            }
        }
        // For an interior point it agrees with the candidate list head.
        let verts = [
            vertices[tets[5][0]],
            vertices[tets[5][1]],
            vertices[tets[5][2]],
            vertices[tets[5][3]],
        ];
        let inside = crate::geometry::point_from_barycentric(&verts, &[0.25; 4]);
        let cands = bvh.candidates(&inside, DEFAULT_BARY_EPS);
        let best = bvh.global_best(&inside).unwrap();
        assert_eq!(best.tet, cands[0].tet);
    }
}
