//! Kinematically deforming skinned meshes (KDSM) for virtual cloth.
//!
//! A tetrahedral lattice is built around a body surface, skinned to the
//! body's skeleton, and used as a deformation proxy: cloth vertices are
//! embedded barycentrically in the lattice, so posing the skeleton drags
//! the cloth along kinematically. On top of that rigid ride-along, a
//! per-pose plastic displacement field stored on the cloth recovers the
//! non-rigid detail (folds, sliding, wrinkles), and a small regression
//! model learns pose -> displacement so novel poses can be dressed
//! without simulation.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: meshes, tetrahedra, barycentric coordinates, volumes.
//! * [`obj`]: Wavefront OBJ import/export for triangle meshes.
//! * [`level_set`]: signed distance fields sampled on uniform grids.
//! * [`tet_lattice`]: BCC lattice generation from a level set, refinement.
//! * [`skinning`]: skeletons, poses, linear blend skinning.
//! * [`point_location`]: BVH accelerated point-in-tet candidate queries.
//! * [`embedding`]: cloth embedding and plastic displacement training data.
//! * [`poisson_morph`]: Laplace interpolation of partial vertex fields.
//! * [`displacement_model`]: pixel-image displacement regression.
//! * [`pipeline`]: synthetic ground truth, metrics, end-to-end driver.

pub mod displacement_model;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod level_set;
pub mod obj;
pub mod pipeline;
pub mod point_location;
pub mod poisson_morph;
pub mod skinning;
pub mod tet_lattice;

pub use error::KdsmError;
