//! Shared error type for the crate.

use thiserror::Error;

/// Errors produced by KDSM construction, embedding, and model code.
#[derive(Debug, Error)]
pub enum KdsmError {
    /// A tetrahedron's volume magnitude fell below the degeneracy floor
    /// (1e-12 cm^3), so barycentric coordinates are not computable.
    #[error("degenerate tetrahedron {tet}: |volume| = {volume:.3e} cm^3")]
    DegenerateTet { tet: usize, volume: f64 },

    /// A mesh expected to bound a volume has unmatched directed edges.
    #[error("mesh is not closed: {unmatched} unmatched directed edges")]
    OpenMesh { unmatched: usize },

    /// A mesh or lattice with no elements where at least one is required.
    #[error("{0}")]
    EmptyInput(String),

    /// Sample position outside the grid domain.
    #[error("point ({x}, {y}, {z}) outside grid bounds")]
    OutOfBounds { x: f64, y: f64, z: f64 },

    /// The inside/outside ray test kept hitting degenerate configurations
    /// after exhausting its jittered retry directions.
    #[error("inside/outside test failed to resolve at ({x}, {y}, {z})")]
    SignResolution { x: f64, y: f64, z: f64 },

    /// A cloth vertex could not be located in any lattice tetrahedron,
    /// even with the barycentric tolerance applied.
    #[error("cloth vertex {vertex} has no parent tetrahedron")]
    NoParent { vertex: usize },

    /// A UVN anchor frame could not be orthonormalized (zero-area
    /// triangle or degenerate UV chart at the anchor).
    #[error("degenerate anchor frame for cloth vertex {vertex}")]
    DegenerateFrame { vertex: usize },

    /// The Laplace solve behind a morph did not converge, or a mesh
    /// component contains no constrained vertex.
    #[error("morph solve failed: {0}")]
    MorphSolveFailure(String),

    /// Matrix/vector dimensions disagree (training data, model I/O).
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Malformed input file.
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// Malformed JSON input.
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
