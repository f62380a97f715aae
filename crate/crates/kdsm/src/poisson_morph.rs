//! Laplace/Poisson extension of a partially defined per-vertex field.
//!
//! Given a displacement field that is only trusted at some vertices, the
//! morph keeps those values fixed (Dirichlet constraints) and solves
//! L x = L s on the remaining vertices, where L is the uniform graph
//! Laplacian of the cloth mesh and s is the source field. The result
//! follows the source's shape where it can and blends smoothly into the
//! constraints. With a zero source this reduces to harmonic
//! interpolation of the constraint values.

use std::collections::BTreeMap;

use nalgebra::Vector3;

use crate::KdsmError;

/// Residual bound the solve must meet, infinity norm over free vertices.
pub const MORPH_RESIDUAL_TOL: f64 = 1e-8;

const CG_RELATIVE_TOL: f64 = 1e-10;

/// Uniform (combinatorial) graph Laplacian: degree on the diagonal,
/// -1 for every undirected edge.
pub struct LaplacianSystem {
    neighbors: Vec<Vec<usize>>,
}

impl LaplacianSystem {
    pub fn from_edges(vertex_count: usize, edges: &[(usize, usize)]) -> LaplacianSystem {
        let mut neighbors = vec![Vec::new(); vertex_count];
        for &(a, b) in edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        LaplacianSystem { neighbors }
    }

    pub fn vertex_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.neighbors[v].len()
    }

    /// y = L x.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.neighbors
            .iter()
            .enumerate()
            .map(|(i, nbrs)| {
                let mut y = nbrs.len() as f64 * x[i];
                for &j in nbrs {
                    y -= x[j];
                }
                y
            })
            .collect()
    }

    /// Vertex sets of the connected components (isolated vertices form
    /// their own components).
    fn components(&self) -> Vec<Vec<usize>> {
        let n = self.vertex_count();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut head = 0;
            while head < comp.len() {
                let v = comp[head];
                head += 1;
                for &w in &self.neighbors[v] {
                    if !seen[w] {
                        seen[w] = true;
                        comp.push(w);
                    }
                }
            }
            out.push(comp);
        }
        out
    }
}

/// Extends `source` over the whole mesh: the output equals `dirichlet`
/// exactly at constrained vertices and solves L x = L source elsewhere.
/// Every connected component of the edge graph must contain at least
/// one constraint, otherwise its system is singular.
pub fn poisson_morph(
    vertex_count: usize,
    edges: &[(usize, usize)],
    source: &[Vector3<f64>],
    dirichlet: &BTreeMap<usize, Vector3<f64>>,
) -> Result<Vec<Vector3<f64>>, KdsmError> {
    if source.len() != vertex_count {
        return Err(KdsmError::ShapeMismatch(format!(
            "source field has {} entries for {} vertices",
            source.len(),
            vertex_count
        )));
    }
    let lap = LaplacianSystem::from_edges(vertex_count, edges);
    for comp in lap.components() {
        if !comp.iter().any(|v| dirichlet.contains_key(v)) {
            return Err(KdsmError::MorphSolveFailure(format!(
                "connected component of vertex {} has no Dirichlet constraint",
                comp[0]
            )));
        }
    }

    let free: Vec<usize> = (0..vertex_count)
        .filter(|v| !dirichlet.contains_key(v))
        .collect();
    let mut out = source.to_vec();
    for (&v, &value) in dirichlet {
        out[v] = value;
    }
    if free.is_empty() {
        return Ok(out);
    }
    let mut free_index = vec![usize::MAX; vertex_count];
    for (k, &v) in free.iter().enumerate() {
        free_index[v] = k;
    }

    for axis in 0..3 {
        let s: Vec<f64> = source.iter().map(|d| d[axis]).collect();
        let ls = lap.apply(&s);
        // Reduced system over free vertices: move constrained neighbor
        // terms of L to the right-hand side.
        let mut b: Vec<f64> = free.iter().map(|&v| ls[v]).collect();
        for (k, &v) in free.iter().enumerate() {
            for &w in &lap.neighbors[v] {
                if let Some(c) = dirichlet.get(&w) {
                    b[k] += c[axis];
                }
            }
        }
        let apply_reduced = |x: &[f64], y: &mut [f64]| {
            for (k, &v) in free.iter().enumerate() {
                let mut acc = lap.degree(v) as f64 * x[k];
                for &w in &lap.neighbors[v] {
                    let fw = free_index[w];
                    if fw != usize::MAX {
                        acc -= x[fw];
                    }
                }
                y[k] = acc;
            }
        };
        let diag: Vec<f64> = free.iter().map(|&v| lap.degree(v) as f64).collect();
        let x = conjugate_gradient(apply_reduced, &b, &diag, 10 * vertex_count);
        for (k, &v) in free.iter().enumerate() {
            out[v][axis] = x[k];
        }
    }

    // The solve must reproduce L x = L s on free vertices.
    let mut worst = 0.0f64;
    for axis in 0..3 {
        let s: Vec<f64> = source.iter().map(|d| d[axis]).collect();
        let x: Vec<f64> = out.iter().map(|d| d[axis]).collect();
        let ls = lap.apply(&s);
        let lx = lap.apply(&x);
        for &v in &free {
            worst = worst.max((lx[v] - ls[v]).abs());
        }
    }
    if worst > MORPH_RESIDUAL_TOL {
        return Err(KdsmError::MorphSolveFailure(format!(
            "residual {worst:.3e} exceeds {MORPH_RESIDUAL_TOL:.0e}"
        )));
    }
    Ok(out)
}

/// Jacobi-preconditioned conjugate gradients for an SPD operator,
/// starting from x = 0. Runs until the residual drops by
/// CG_RELATIVE_TOL or the iteration budget is exhausted; the caller
/// checks the final residual it actually cares about.
fn conjugate_gradient(
    apply: impl Fn(&[f64], &mut [f64]),
    b: &[f64],
    diag: &[f64],
    max_iter: usize,
) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    let mut r = b.to_vec();
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return x;
    }
    let mut z: Vec<f64> = r.iter().zip(diag).map(|(ri, di)| ri / di).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for _ in 0..max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if dot(&r, &r).sqrt() <= CG_RELATIVE_TOL * b_norm {
            break;
        }
        for i in 0..n {
            z[i] = r[i] / diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    x
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
