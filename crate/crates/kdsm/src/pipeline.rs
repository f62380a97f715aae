//! End-to-end driver: procedural body and shirt, synthetic ground
//! truth, label generation with all three methods, model training, and
//! the evaluation metrics.
//!
//! Everything here is deterministic given the config: meshes are
//! generated procedurally, poses and wrinkles are drawn from seeded
//! generators, and file outputs are byte-stable across reruns.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read as _, Write as _};
use std::path::Path;

use nalgebra::{IsometryMatrix3, Point3, Rotation3, Translation3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::displacement_model::{
    gather, infer, pose_feature, rasterize, read_cloth_image, read_regressor, train,
    write_cloth_image, write_regressor, ClothImage, Regressor, Side,
};
use crate::embedding::{
    backmap_ground_truth, compute_anchors, embed_clamped, embed_rest, hybrid, method1, method2,
    read_displacement_field, read_header_line, skin_embedded, write_displacement_field,
    DisplacementField, Embedding, GroundTruthFrame, PosedKdsm, UvnAnchor,
};
use crate::geometry::{TetMesh, TriMesh};
use crate::level_set::{build_level_set, TriBvh};
use crate::obj::write_obj;
use crate::point_location::{TetBvh, DEFAULT_BARY_EPS, DEFAULT_BOX_EPS};
use crate::skinning::{
    assign_weights, read_poses, skin_vertices, write_poses, write_skeleton, Joint, Pose, Skeleton,
    SkinWeights,
};
use crate::tet_lattice::{build_lattice, write_tet_mesh};
use crate::KdsmError;

/// All knobs of a full run. Lengths are centimeters, angles radians.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Number of poses (frames) in the dataset.
    pub poses: usize,
    /// Master seed; every random draw derives from it.
    pub seed: u64,
    /// Level-set grid spacing.
    pub grid_dx: f64,
    /// Level-set padding beyond the body bounds.
    pub padding: f64,
    /// Outward thickening of the body level set before meshing.
    pub thicken: f64,
    /// Lattice cell size.
    pub lattice_h: f64,
    /// Ground-truth wrinkle amplitude per radian of joint bend.
    pub wrinkle_amplitude: f64,
    /// Clearance the ground-truth contact pass restores between cloth
    /// and body (capped by each vertex's rest clearance). Non-positive
    /// disables the pass, leaving the raw skinned-plus-wrinkle cloth.
    pub contact_gap: f64,
    /// Fraction of poses constructed to press the arms into the torso.
    pub overlap_fraction: f64,
    /// Hybrid agreement threshold.
    pub tau: f64,
    /// Ridge penalty for the regressor.
    pub ridge_lambda: f64,
}

impl Default for PipelineConfig {
    fn default() -> PipelineConfig {
        PipelineConfig {
            poses: 500,
            seed: 20260819,
            grid_dx: 2.0,
            padding: 11.0,
            thicken: 9.5,
            lattice_h: 2.0,
            wrinkle_amplitude: 0.5,
            contact_gap: 0.0,
            overlap_fraction: 0.1,
            tau: 1.0,
            ridge_lambda: 1e-3,
        }
    }
}

pub fn read_config(path: &Path) -> Result<PipelineConfig, KdsmError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Writes the effective configuration next to the dataset it produced,
/// making the output directory self-describing for the later stages.
pub fn write_config(path: &Path, config: &PipelineConfig) -> Result<(), KdsmError> {
    let mut json = serde_json::to_string_pretty(config)?;
    json.push('\n');
    Ok(fs::write(path, json)?)
}

// ---------------------------------------------------------------------------
// Procedural assets
// ---------------------------------------------------------------------------

/// Extra clearance loss (beyond the rest state) a cloth vertex must
/// show before the ground-truth contact pass moves it; keeps the
/// identity pose bit-stable.
const CONTACT_SLACK: f64 = 0.05;

/// Closed capsule from `a` to `b`, tessellated with `seg` azimuthal
/// segments and `rings` rows per hemisphere. UVs wrap the azimuth into
/// u and run v from pole to pole.
pub fn capsule_mesh(
    a: Point3<f64>,
    b: Point3<f64>,
    radius: f64,
    seg: usize,
    rings: usize,
) -> TriMesh {
    let axis = b - a;
    let len = axis.norm();
    let w = if len > 1e-12 {
        axis / len
    } else {
        Vector3::z()
    };
    let pick = if w.x.abs() < 0.9 {
        Vector3::x()
    } else {
        Vector3::y()
    };
    let u = (pick - w * pick.dot(&w)).normalize();
    let v = w.cross(&u);

    // Profile rows from bottom pole to top pole: (center, ring radius).
    let cyl_rows = ((len / radius).ceil() as usize).max(1);
    let mut profile: Vec<(Point3<f64>, f64)> = Vec::new();
    profile.push((a - w * radius, 0.0));
    for q in 1..=rings {
        let theta = -std::f64::consts::FRAC_PI_2
            + std::f64::consts::FRAC_PI_2 * q as f64 / rings as f64;
        profile.push((a + w * (radius * theta.sin()), radius * theta.cos()));
    }
    for j in 1..cyl_rows {
        profile.push((a + w * (len * j as f64 / cyl_rows as f64), radius));
    }
    profile.push((b, radius));
    for q in 1..=rings {
        let theta = std::f64::consts::FRAC_PI_2 * q as f64 / rings as f64;
        profile.push((b + w * (radius * theta.sin()), radius * theta.cos()));
    }
    // The last entry has radius ~0; replace it with the exact pole.
    let rows = profile.len();
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    let mut row_start = vec![0usize; rows];
    for (r, &(center, ring_r)) in profile.iter().enumerate() {
        row_start[r] = vertices.len();
        let vcoord = r as f64 / (rows - 1) as f64;
        if r == 0 || r == rows - 1 {
            let pole = if r == 0 { a - w * radius } else { b + w * radius };
            vertices.push(pole);
            uvs.push(Vector2::new(0.0, vcoord));
        } else {
            for i in 0..seg {
                let phi = 2.0 * std::f64::consts::PI * i as f64 / seg as f64;
                vertices.push(center + (u * phi.cos() + v * phi.sin()) * ring_r);
                uvs.push(Vector2::new(i as f64 / seg as f64, vcoord));
            }
        }
    }
    let mut triangles = Vec::new();
    // Bottom fan, wound so normals point away from the axis midpoint.
    for i in 0..seg {
        let n = (i + 1) % seg;
        triangles.push([0, row_start[1] + n, row_start[1] + i]);
    }
    for r in 1..rows - 2 {
        for i in 0..seg {
            let n = (i + 1) % seg;
            let (p0, p1) = (row_start[r] + i, row_start[r] + n);
            let (q0, q1) = (row_start[r + 1] + i, row_start[r + 1] + n);
            triangles.push([p0, p1, q1]);
            triangles.push([p0, q1, q0]);
        }
    }
    let top = row_start[rows - 1];
    for i in 0..seg {
        let n = (i + 1) % seg;
        triangles.push([top, row_start[rows - 2] + i, row_start[rows - 2] + n]);
    }
    TriMesh {
        vertices,
        triangles,
        uvs: Some(uvs),
    }
}

fn merge_meshes(parts: &[TriMesh]) -> TriMesh {
    let mut out = TriMesh {
        vertices: Vec::new(),
        triangles: Vec::new(),
        uvs: Some(Vec::new()),
    };
    for part in parts {
        let base = out.vertices.len();
        out.vertices.extend_from_slice(&part.vertices);
        out.uvs
            .as_mut()
            .unwrap()
            .extend_from_slice(part.uvs.as_ref().unwrap());
        out.triangles
            .extend(part.triangles.iter().map(|t| [t[0] + base, t[1] + base, t[2] + base]));
    }
    out
}

/// 15-joint mannequin: pelvis up a spine to the head, clavicles and
/// two-segment arms held out in a T, and two leg stubs.
pub fn mannequin_skeleton() -> Skeleton {
    let joint = |name: &str, parent: Option<usize>, p: [f64; 3]| Joint {
        name: name.into(),
        parent,
        rest: IsometryMatrix3::from_parts(
            Translation3::new(p[0], p[1], p[2]),
            Rotation3::identity(),
        ),
    };
    Skeleton {
        joints: vec![
            joint("pelvis", None, [0.0, 0.0, 0.0]),
            joint("spine", Some(0), [0.0, 12.0, 0.0]),
            joint("chest", Some(1), [0.0, 24.0, 0.0]),
            joint("neck", Some(2), [0.0, 36.0, 0.0]),
            joint("head", Some(3), [0.0, 44.0, 0.0]),
            joint("l_clavicle", Some(2), [4.0, 33.0, 0.0]),
            joint("l_shoulder", Some(5), [16.0, 33.0, 0.0]),
            joint("l_elbow", Some(6), [42.0, 33.0, 0.0]),
            joint("l_wrist", Some(7), [64.0, 33.0, 0.0]),
            joint("r_clavicle", Some(2), [-4.0, 33.0, 0.0]),
            joint("r_shoulder", Some(9), [-16.0, 33.0, 0.0]),
            joint("r_elbow", Some(10), [-42.0, 33.0, 0.0]),
            joint("r_wrist", Some(11), [-64.0, 33.0, 0.0]),
            joint("l_hip", Some(0), [6.0, -10.0, 0.0]),
            joint("r_hip", Some(0), [-6.0, -10.0, 0.0]),
        ],
    }
}

/// The individual closed capsules whose union forms the mannequin
/// body. Kept separate so inside/outside queries stay well defined
/// where capsules interpenetrate.
pub fn mannequin_parts() -> Vec<TriMesh> {
    let p = |x: f64, y: f64, z: f64| Point3::new(x, y, z);
    vec![
        // Torso, neck, head.
        capsule_mesh(p(0.0, 0.0, 0.0), p(0.0, 24.0, 0.0), 13.0, 20, 4),
        capsule_mesh(p(0.0, 24.0, 0.0), p(0.0, 34.0, 0.0), 11.0, 20, 4),
        capsule_mesh(p(0.0, 34.0, 0.0), p(0.0, 42.0, 0.0), 5.0, 12, 3),
        capsule_mesh(p(0.0, 44.0, 0.0), p(0.0, 50.0, 0.0), 8.0, 14, 4),
        // Deltoids bridging torso to arms.
        capsule_mesh(p(8.0, 33.0, 0.0), p(16.0, 33.0, 0.0), 6.0, 14, 3),
        capsule_mesh(p(-8.0, 33.0, 0.0), p(-16.0, 33.0, 0.0), 6.0, 14, 3),
        // Upper arms and forearms.
        capsule_mesh(p(16.0, 33.0, 0.0), p(42.0, 33.0, 0.0), 5.0, 14, 3),
        capsule_mesh(p(-16.0, 33.0, 0.0), p(-42.0, 33.0, 0.0), 5.0, 14, 3),
        capsule_mesh(p(42.0, 33.0, 0.0), p(64.0, 33.0, 0.0), 4.5, 12, 3),
        capsule_mesh(p(-42.0, 33.0, 0.0), p(-64.0, 33.0, 0.0), 4.5, 12, 3),
        // Leg stubs.
        capsule_mesh(p(6.0, -4.0, 0.0), p(8.0, -20.0, 0.0), 6.5, 14, 3),
        capsule_mesh(p(-6.0, -4.0, 0.0), p(-8.0, -20.0, 0.0), 6.5, 14, 3),
    ]
}

/// The mannequin body as one mesh (the capsule parts concatenated).
pub fn mannequin_body() -> TriMesh {
    merge_meshes(&mannequin_parts())
}

/// The shirt with its per-vertex side labels.
pub struct ShirtAtlas {
    pub mesh: TriMesh,
    pub sides: Vec<Side>,
}

// Shirt pattern grid: torso columns 0..=NT, sleeves extend NS columns
// past each side; rows 0..=MT from hem to shoulder, sleeves occupy
// rows MB..=MT. The neck notch opens the top edge for |i - NT/2| < NW.
const SHIRT_NT: i64 = 32;
const SHIRT_MT: i64 = 36;
const SHIRT_NS: i64 = 12;
const SHIRT_MB: i64 = 23;
const SHIRT_NW: i64 = 4;

const SHIRT_HEM_Y: f64 = 0.0;
const SHIRT_TOP_Y: f64 = 40.0;
const SHIRT_HEM_R: f64 = 15.5;
const SHIRT_TOP_R: f64 = 13.0;
const SLEEVE_Y: f64 = 33.0;
const SLEEVE_R0: f64 = 7.5;
const SLEEVE_R1: f64 = 7.0;
const SLEEVE_X0: f64 = 15.0;
const SLEEVE_X1: f64 = 40.0;
/// z flattening of the top rows so the shirt closes over the shoulders.
const SHIRT_TOP_Z_SCALE: f64 = 0.45;

fn shirt_in_pattern(i: i64, j: i64) -> bool {
    if (0..=SHIRT_NT).contains(&i) {
        (0..=SHIRT_MT).contains(&j)
    } else if (-SHIRT_NS..=SHIRT_NT + SHIRT_NS).contains(&i) {
        (SHIRT_MB..=SHIRT_MT).contains(&j)
    } else {
        false
    }
}

/// Is the pattern vertex (i, j) on a seam (front and back panels share
/// one vertex) rather than in an opening or the interior?
fn shirt_on_seam(i: i64, j: i64) -> bool {
    if !shirt_in_pattern(i, j) {
        return false;
    }
    let center = SHIRT_NT / 2;
    if i <= -SHIRT_NS || i >= SHIRT_NT + SHIRT_NS {
        return false; // cuff openings
    }
    if j == 0 {
        return false; // hem opening
    }
    if (0..=SHIRT_NT).contains(&i) {
        if j == SHIRT_MT {
            // Top edge: shoulder seams outside the neck notch.
            return (i - center).abs() >= SHIRT_NW;
        }
        // Torso side seams below the sleeves.
        (i == 0 || i == SHIRT_NT) && j <= SHIRT_MB
    } else {
        // Sleeve top and underarm seams.
        j == SHIRT_MT || j == SHIRT_MB
    }
}

/// Front-panel 3D position of a pattern vertex; the back panel mirrors
/// z. Torso columns wrap the torso, sleeve columns wrap the arms, and
/// the junction column takes the sleeve map so the armhole opens into
/// the sleeve tube.
fn shirt_position(i: i64, j: i64) -> Point3<f64> {
    use std::f64::consts::PI;
    let center = SHIRT_NT / 2;
    let sleeve = !(0..=SHIRT_NT).contains(&i)
        || ((i == 0 || i == SHIRT_NT) && j >= SHIRT_MB);
    if sleeve {
        let (sign, cols) = if i <= 0 {
            (-1.0, -i as f64)
        } else {
            (1.0, (i - SHIRT_NT) as f64)
        };
        let f = cols / SHIRT_NS as f64;
        let x = sign * (SLEEVE_X0 + (SLEEVE_X1 - SLEEVE_X0) * f);
        let r = SLEEVE_R0 + (SLEEVE_R1 - SLEEVE_R0) * f;
        let psi = PI * (SHIRT_MT - j) as f64 / (SHIRT_MT - SHIRT_MB) as f64;
        Point3::new(x, SLEEVE_Y + r * psi.cos(), r * psi.sin())
    } else {
        let tj = j as f64 / SHIRT_MT as f64;
        let y = SHIRT_HEM_Y + (SHIRT_TOP_Y - SHIRT_HEM_Y) * tj;
        let radius = SHIRT_HEM_R + (SHIRT_TOP_R - SHIRT_HEM_R) * tj;
        let phi = -PI / 2.0 + PI * i as f64 / SHIRT_NT as f64;
        // Flatten z toward the top, fully on the shoulders (so front
        // and back meet at the seam) and partially at the neck.
        let ramp = ((j - SHIRT_MB) as f64 / (SHIRT_MT - SHIRT_MB) as f64).max(0.0);
        let taper = 1.0 - (1.0 - SHIRT_TOP_Z_SCALE) * ramp;
        let pinch = if (i - center).abs() >= SHIRT_NW {
            1.0 - ramp
        } else {
            1.0
        };
        Point3::new(radius * phi.sin(), y, radius * phi.cos() * taper * pinch)
    }
}

/// Builds the shirt: a flat two-panel pattern stitched along its seams
/// and wrapped around the mannequin, leaving the neck, hem, and two
/// cuffs as boundary loops. Roughly 3k vertices.
pub fn shirt_mesh() -> ShirtAtlas {
    let mut vertices = Vec::new();
    let mut uvs = Vec::new();
    let mut sides = Vec::new();
    let mut front_id: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    let mut back_id: BTreeMap<(i64, i64), usize> = BTreeMap::new();
    let total_cols = (SHIRT_NT + 2 * SHIRT_NS) as f64;
    for i in -SHIRT_NS..=SHIRT_NT + SHIRT_NS {
        for j in 0..=SHIRT_MT {
            if !shirt_in_pattern(i, j) {
                continue;
            }
            let p = shirt_position(i, j);
            let uv = Vector2::new(
                (i + SHIRT_NS) as f64 / total_cols,
                j as f64 / SHIRT_MT as f64,
            );
            let front = vertices.len();
            vertices.push(p);
            uvs.push(uv);
            sides.push(Side::Front);
            front_id.insert((i, j), front);
            if shirt_on_seam(i, j) {
                back_id.insert((i, j), front);
            } else {
                let back = vertices.len();
                vertices.push(Point3::new(p.x, p.y, -p.z));
                uvs.push(uv);
                sides.push(Side::Back);
                back_id.insert((i, j), back);
            }
        }
    }
    let mut triangles = Vec::new();
    for i in -SHIRT_NS..SHIRT_NT + SHIRT_NS {
        for j in 0..SHIRT_MT {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            if corners.iter().any(|&(a, b)| !shirt_in_pattern(a, b)) {
                continue;
            }
            let f: Vec<usize> = corners.iter().map(|c| front_id[c]).collect();
            let b: Vec<usize> = corners.iter().map(|c| back_id[c]).collect();
            triangles.push([f[0], f[1], f[2]]);
            triangles.push([f[0], f[2], f[3]]);
            triangles.push([b[0], b[2], b[1]]);
            triangles.push([b[0], b[3], b[2]]);
        }
    }
    ShirtAtlas {
        mesh: TriMesh {
            vertices,
            triangles,
            uvs: Some(uvs),
        },
        sides,
    }
}

// ---------------------------------------------------------------------------
// Scene
// ---------------------------------------------------------------------------

/// Everything pose-independent: the body, shirt, lattice, weights,
/// rest embedding, anchors, and the rest-lattice point index.
pub struct Scene {
    pub skeleton: Skeleton,
    pub body: TriMesh,
    pub body_weights: SkinWeights,
    pub shirt: TriMesh,
    pub sides: Vec<Side>,
    pub shirt_weights: SkinWeights,
    pub edges: Vec<(usize, usize)>,
    pub lattice: TetMesh,
    pub lattice_weights: SkinWeights,
    pub rest_embedding: Embedding,
    pub rest_bvh: TetBvh,
    pub anchors: Vec<UvnAnchor>,
}

pub fn build_scene(config: &PipelineConfig) -> Result<Scene, KdsmError> {
    let skeleton = mannequin_skeleton();
    skeleton.validate()?;
    let body = mannequin_body();
    let bones = skeleton.bone_segments();
    let body_weights = assign_weights(&body.vertices, &bones)?;
    let ShirtAtlas { mesh: shirt, sides } = shirt_mesh();
    let shirt_weights = assign_weights(&shirt.vertices, &bones)?;
    let edges = shirt.edge_list();

    let phi = build_level_set(&body, config.grid_dx, config.padding)?;
    let thick = phi.thicken(config.thicken);
    let lattice = build_lattice(&thick, config.lattice_h)?;
    let lattice_weights = assign_weights(&lattice.vertices, &bones)?;
    let rest_embedding = embed_rest(&shirt.vertices, &lattice)?;
    let rest_bvh = TetBvh::build(
        &lattice.vertices,
        &lattice.tets,
        DEFAULT_BOX_EPS,
        DEFAULT_BARY_EPS,
    );
    let anchors = compute_anchors(&shirt.vertices, &body)?;
    Ok(Scene {
        skeleton,
        body,
        body_weights,
        shirt,
        sides,
        shirt_weights,
        edges,
        lattice,
        lattice_weights,
        rest_embedding,
        rest_bvh,
        anchors,
    })
}

// ---------------------------------------------------------------------------
// Poses and ground truth
// ---------------------------------------------------------------------------

/// Per-joint uniform angle ranges (lo, hi) for random poses.
fn pose_ranges() -> Vec<[(f64, f64); 3]> {
    let z = (0.0, 0.0);
    vec![
        [z, z, z],                                  // pelvis fixed
        [(-0.12, 0.12), (-0.12, 0.12), (-0.12, 0.12)], // spine
        [(-0.12, 0.12), (-0.12, 0.12), (-0.12, 0.12)], // chest
        [(-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2)],    // neck
        [(-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2)],    // head
        [(-0.08, 0.08), (-0.08, 0.08), (-0.08, 0.08)], // l_clavicle
        [(-0.3, 0.3), (-0.5, 0.5), (-0.9, 0.3)],    // l_shoulder
        [(-0.2, 0.2), (-1.3, 0.0), z],              // l_elbow
        [(-0.3, 0.3), (-0.3, 0.3), (-0.3, 0.3)],    // l_wrist
        [(-0.08, 0.08), (-0.08, 0.08), (-0.08, 0.08)], // r_clavicle
        [(-0.3, 0.3), (-0.5, 0.5), (-0.3, 0.9)],    // r_shoulder
        [(-0.2, 0.2), (0.0, 1.3), z],               // r_elbow
        [(-0.3, 0.3), (-0.3, 0.3), (-0.3, 0.3)],    // r_wrist
        [(-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2)],    // l_hip
        [(-0.2, 0.2), (-0.2, 0.2), (-0.2, 0.2)],    // r_hip
    ]
}

/// Draws the pose set: mostly random poses within anatomical ranges,
/// with the first `overlap_fraction` of frames constructed to press
/// both arms against the torso so the deformed lattice overlaps
/// itself. Returns the poses and the overlap flags.
pub fn sample_poses(n: usize, overlap_fraction: f64, seed: u64) -> (Vec<Pose>, Vec<bool>) {
    let ranges = pose_ranges();
    let joints = ranges.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let overlap_count = ((n as f64) * overlap_fraction).round() as usize;
    let mut poses = Vec::with_capacity(n);
    let mut overlap = Vec::with_capacity(n);
    for frame in 0..n {
        let mut pose = Pose::identity(joints);
        for (j, range) in ranges.iter().enumerate() {
            for (a, &(lo, hi)) in range.iter().enumerate() {
                if hi > lo {
                    pose.angles[j][a] = rng.gen_range(lo..hi);
                }
            }
        }
        let constructed = frame < overlap_count;
        if constructed {
            // Full adduction: both arms swing down and press into the
            // torso sides, with a slight elbow bend.
            pose.angles[6].z = -1.5 - rng.gen_range(0.0..0.15);
            pose.angles[10].z = 1.5 + rng.gen_range(0.0..0.15);
            pose.angles[7].y = -rng.gen_range(0.2..0.5);
            pose.angles[11].y = rng.gen_range(0.2..0.5);
        }
        poses.push(pose);
        overlap.push(constructed);
    }
    (poses, overlap)
}

/// Deterministic per-bone wrinkle pattern parameters.
struct WrinklePattern {
    direction: Vector2<f64>,
    frequency: f64,
    phase: f64,
}

fn wrinkle_patterns(joint_count: usize, seed: u64) -> Vec<WrinklePattern> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x57524e4b);
    (0..joint_count)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            WrinklePattern {
                direction: Vector2::new(angle.cos(), angle.sin()),
                frequency: rng.gen_range(18.0..40.0),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect()
}

/// Synthetic ground-truth generator: skins the shirt, layers seeded
/// sinusoidal wrinkles along the vertex normals (amplitude
/// proportional to each joint's bend), then optionally resolves
/// cloth-body penetration against the posed body parts. A vertex is
/// only moved when its clearance to the body drops below its rest
/// clearance (capped at `contact_gap`), so the identity pose
/// reproduces the rest shirt exactly; a non-positive `contact_gap`
/// skips the pass entirely.
pub struct GtGenerator<'a> {
    shirt: &'a TriMesh,
    shirt_weights: &'a SkinWeights,
    skeleton: &'a Skeleton,
    parts: Vec<TriMesh>,
    part_weights: Vec<SkinWeights>,
    rest_clearance: Vec<f64>,
    amplitude: f64,
    contact_gap: f64,
    seed: u64,
}

/// Closest point on the union of closed parts: signed clearance
/// (negative inside), the surface point, and its outward normal.
fn union_clearance(
    parts: &[(TriBvh, &TriMesh)],
    p: &Point3<f64>,
) -> Result<(f64, Point3<f64>, Vector3<f64>), KdsmError> {
    let mut best: Option<(f64, Point3<f64>, Vector3<f64>)> = None;
    for (bvh, mesh) in parts {
        let cp = bvh.closest_point(p);
        let signed = if bvh.is_inside(p)? {
            -cp.distance
        } else {
            cp.distance
        };
        if best.as_ref().map_or(true, |b| signed < b.0) {
            let [a, b, c] = mesh.triangle_vertices(cp.triangle);
            let n = (b - a).cross(&(c - a));
            let n = if n.norm() > 1e-12 {
                n.normalize()
            } else {
                Vector3::y()
            };
            best = Some((signed, cp.point, n));
        }
    }
    Ok(best.expect("the body always has parts"))
}

impl<'a> GtGenerator<'a> {
    pub fn new(
        shirt: &'a TriMesh,
        shirt_weights: &'a SkinWeights,
        skeleton: &'a Skeleton,
        amplitude: f64,
        contact_gap: f64,
        seed: u64,
    ) -> Result<GtGenerator<'a>, KdsmError> {
        let parts = mannequin_parts();
        let bones = skeleton.bone_segments();
        let part_weights = parts
            .iter()
            .map(|part| assign_weights(&part.vertices, &bones))
            .collect::<Result<Vec<_>, _>>()?;
        let rest_bvhs = parts
            .iter()
            .map(|part| Ok((TriBvh::build(part)?, part)))
            .collect::<Result<Vec<_>, KdsmError>>()?;
        let rest_clearance = shirt
            .vertices
            .iter()
            .map(|p| Ok(union_clearance(&rest_bvhs, p)?.0))
            .collect::<Result<Vec<_>, KdsmError>>()?;
        Ok(GtGenerator {
            shirt,
            shirt_weights,
            skeleton,
            parts,
            part_weights,
            rest_clearance,
            amplitude,
            contact_gap,
            seed,
        })
    }

    pub fn frame(&self, pose_id: usize, pose: &Pose) -> Result<GroundTruthFrame, KdsmError> {
        let skinned =
            skin_vertices(&self.shirt.vertices, self.shirt_weights, self.skeleton, pose)?;
        let patterns = wrinkle_patterns(self.skeleton.joints.len(), self.seed);
        let posed = TriMesh {
            vertices: skinned.clone(),
            triangles: self.shirt.triangles.clone(),
            uvs: None,
        };
        let normals = posed.vertex_normals();
        let uvs = self.shirt.uvs.as_ref().expect("shirt always carries uvs");
        let mut positions = skinned;
        for (j, pattern) in patterns.iter().enumerate() {
            let bend = pose.angles[j].norm();
            if bend == 0.0 {
                continue;
            }
            let a = self.amplitude * bend;
            for ((p, n), uv) in positions.iter_mut().zip(&normals).zip(uvs) {
                let s = (pattern.frequency * pattern.direction.dot(uv) + pattern.phase).sin();
                *p += n * (a * s);
            }
        }
        // Contact: push any vertex that lost clearance (relative to its
        // rest state) back out along the posed body surface.
        if self.contact_gap <= 0.0 {
            return Ok(GroundTruthFrame {
                pose: pose_id,
                positions,
            });
        }
        let posed_parts: Vec<Vec<Point3<f64>>> = self
            .parts
            .iter()
            .zip(&self.part_weights)
            .map(|(part, w)| skin_vertices(&part.vertices, w, self.skeleton, pose))
            .collect::<Result<_, _>>()?;
        let posed_meshes: Vec<TriMesh> = self
            .parts
            .iter()
            .zip(posed_parts)
            .map(|(part, vertices)| TriMesh {
                vertices,
                triangles: part.triangles.clone(),
                uvs: None,
            })
            .collect();
        let posed_bvhs = posed_meshes
            .iter()
            .map(|mesh| Ok((TriBvh::build(mesh)?, mesh)))
            .collect::<Result<Vec<_>, KdsmError>>()?;
        for (v, p) in positions.iter_mut().enumerate() {
            let target = self.rest_clearance[v].min(self.contact_gap);
            let (signed, surface, normal) = union_clearance(&posed_bvhs, p)?;
            if signed < target - CONTACT_SLACK {
                *p = surface + normal * target;
            }
        }
        Ok(GroundTruthFrame {
            pose: pose_id,
            positions,
        })
    }
}

// ---------------------------------------------------------------------------
// Dataset splits
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitLabel {
    Train,
    Val,
    Test,
}

/// Deterministic shuffled 80/10/10 split (proportions exact to the
/// nearest frame).
pub fn split_dataset(n: usize, seed: u64) -> Vec<SplitLabel> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x53504c49);
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let train = n * 8 / 10;
    let val = n / 10;
    let mut labels = vec![SplitLabel::Test; n];
    for (rank, &frame) in order.iter().enumerate() {
        labels[frame] = if rank < train {
            SplitLabel::Train
        } else if rank < train + val {
            SplitLabel::Val
        } else {
            SplitLabel::Test
        };
    }
    labels
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Max and mean Euclidean vertex error between two matching arrays.
pub fn vertex_error(
    predicted: &[Point3<f64>],
    gt: &[Point3<f64>],
) -> Result<(f64, f64), KdsmError> {
    if predicted.len() != gt.len() || predicted.is_empty() {
        return Err(KdsmError::ShapeMismatch(format!(
            "vertex error over {} predicted vs {} ground-truth points",
            predicted.len(),
            gt.len()
        )));
    }
    let mut max = 0.0f64;
    let mut sum = 0.0;
    for (p, q) in predicted.iter().zip(gt) {
        let e = (p - q).norm();
        max = max.max(e);
        sum += e;
    }
    Ok((max, sum / predicted.len() as f64))
}

/// Max and mean of ‖d_a - d_b‖ over the mesh edges: how much the
/// displacement field varies between neighboring vertices.
pub fn delta_d_stats(field: &DisplacementField, edges: &[(usize, usize)]) -> (f64, f64) {
    if edges.is_empty() {
        return (0.0, 0.0);
    }
    let mut max = 0.0f64;
    let mut sum = 0.0;
    for &(a, b) in edges {
        let e = (field.d[a] - field.d[b]).norm();
        max = max.max(e);
        sum += e;
    }
    (max, sum / edges.len() as f64)
}

/// Absolute difference of the capped enclosed volumes of the same
/// garment topology carrying two position sets.
pub fn volume_error(
    topology: &TriMesh,
    predicted: &[Point3<f64>],
    gt: &[Point3<f64>],
) -> Result<f64, KdsmError> {
    let with_positions = |positions: &[Point3<f64>]| TriMesh {
        vertices: positions.to_vec(),
        triangles: topology.triangles.clone(),
        uvs: None,
    };
    let vp = with_positions(predicted).enclosed_volume();
    let vg = with_positions(gt).enclosed_volume();
    Ok((vp - vg).abs())
}

/// Mean, population standard deviation, and max of a value list.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
    pub max: f64,
}

pub fn stats(values: &[f64]) -> Stats {
    if values.is_empty() {
        return Stats {
            mean: 0.0,
            std: 0.0,
            max: 0.0,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Stats {
        mean,
        std: var.sqrt(),
        max,
    }
}

// ---------------------------------------------------------------------------
// Label generation and the end-to-end run
// ---------------------------------------------------------------------------

/// The label methods in canonical order: random-candidate, UVN-offset,
/// and the hybrid of the two. File names and report keys use these.
pub const METHOD_NAMES: [&str; 3] = ["method1", "method2", "hybrid"];

/// The three label fields for one frame.
pub struct FrameLabels {
    pub m1: DisplacementField,
    pub m2: DisplacementField,
    pub hybrid: DisplacementField,
}

/// Generates method 1, method 2, and hybrid labels for one frame.
pub fn generate_labels(
    scene: &Scene,
    pose: &Pose,
    frame: &GroundTruthFrame,
    config: &PipelineConfig,
) -> Result<FrameLabels, KdsmError> {
    let deformed = skin_vertices(
        &scene.lattice.vertices,
        &scene.lattice_weights,
        &scene.skeleton,
        pose,
    )?;
    let kdsm = PosedKdsm::new(&scene.lattice.vertices, &deformed, &scene.lattice.tets);
    let backmap = backmap_ground_truth(&frame.positions, &kdsm);
    let body_posed = skin_vertices(
        &scene.body.vertices,
        &scene.body_weights,
        &scene.skeleton,
        pose,
    )?;
    let m2 = method2(
        frame.pose,
        &frame.positions,
        &scene.anchors,
        &scene.body,
        &body_posed,
        &scene.shirt.vertices,
    )?;
    let m1 = method1(
        frame.pose,
        &backmap,
        &frame.positions,
        &kdsm,
        &scene.shirt.vertices,
        config.seed.wrapping_add(frame.pose as u64),
    )?;
    let h = hybrid(
        frame.pose,
        &backmap,
        &m2,
        &scene.shirt.vertices,
        &scene.edges,
        config.tau,
    )?;
    Ok(FrameLabels { m1, m2, hybrid: h })
}

/// Applies a displacement field: displace the rest shirt in material
/// space, re-embed it in the rest lattice, and skin it to the pose.
pub fn reconstruct(
    scene: &Scene,
    field: &DisplacementField,
    deformed_lattice: &[Point3<f64>],
) -> Result<Vec<Point3<f64>>, KdsmError> {
    let material: Vec<Point3<f64>> = scene
        .shirt
        .vertices
        .iter()
        .zip(&field.d)
        .map(|(p, d)| p + d)
        .collect();
    let emb = embed_clamped(&material, &scene.rest_bvh)?;
    Ok(skin_embedded(&emb, deformed_lattice, &scene.lattice.tets))
}

/// Ground-truth cloth positions for one frame, stored in the same
/// binary container as displacement fields.
pub fn write_ground_truth(path: &Path, frame: &GroundTruthFrame) -> Result<(), KdsmError> {
    let field = DisplacementField {
        pose: frame.pose,
        d: frame.positions.iter().map(|p| p.coords).collect(),
    };
    write_displacement_field(path, &field)
}

pub fn read_ground_truth(path: &Path) -> Result<GroundTruthFrame, KdsmError> {
    let field = read_displacement_field(path)?;
    Ok(GroundTruthFrame {
        pose: field.pose,
        positions: field.d.into_iter().map(Point3::from).collect(),
    })
}

/// Per-method numbers for the report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    /// Reconstruction quality of the labels themselves, over all frames:
    /// stats of the per-frame mean vertex error, plus the global max.
    pub label_vertex_error: Stats,
    pub label_max_vertex_error: f64,
    /// Field smoothness over all frames: stats of per-frame mean ‖Δd‖.
    pub label_delta_d: Stats,
    /// Mean ‖Δd‖ restricted to the constructed-overlap frames.
    pub overlap_avg_delta_d: f64,
    /// Test-split prediction quality: stats of per-example mean vertex
    /// error of the full inference chain.
    pub test_vertex_error: Stats,
    /// Test-split capped-volume error statistics.
    pub test_volume_error: Stats,
    /// Per-test-example mean vertex errors (histogram source), in
    /// test-frame order.
    pub per_example_test_error: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config: PipelineConfig,
    pub frames: usize,
    pub train_frames: usize,
    pub val_frames: usize,
    pub test_frames: usize,
    pub overlap_frames: usize,
    pub lattice_vertices: usize,
    pub lattice_tets: usize,
    pub shirt_vertices: usize,
    /// Test error of predicting the training-mean image for every pose.
    pub baseline_test_vertex_error: Stats,
    pub methods: BTreeMap<String, MethodReport>,
}

#[derive(Default)]
struct MethodAccumulator {
    per_frame_avg_err: Vec<f64>,
    max_err: f64,
    per_frame_avg_dd: Vec<f64>,
    overlap_avg_dd: Vec<f64>,
}

/// Mean image of a training set: the "predict the training mean"
/// baseline regressor output.
fn mean_image(images: &[ClothImage]) -> ClothImage {
    let mut out = ClothImage::zeros();
    out.mask = images[0].mask.clone();
    for img in images {
        for (o, v) in out.data.iter_mut().zip(&img.data) {
            *o += v;
        }
    }
    for o in &mut out.data {
        *o /= images.len() as f64;
    }
    out
}

/// Dataset generation: procedural scene assets, sampled poses, the
/// ground-truth frames, and label fields for every method, all written
/// under `out_dir`. The directory is self-describing afterwards: the
/// training and evaluation stages read everything they need back from
/// it.
pub fn generate_dataset(config: &PipelineConfig, out_dir: &Path) -> Result<(), KdsmError> {
    fs::create_dir_all(out_dir)?;
    write_config(&out_dir.join("config.json"), config)?;
    let scene = build_scene(config)?;
    write_obj(&out_dir.join("body.obj"), &scene.body)?;
    write_obj(&out_dir.join("shirt.obj"), &scene.shirt)?;
    write_skeleton(&out_dir.join("skeleton.json"), &scene.skeleton)?;
    write_tet_mesh(&out_dir.join("lattice.tet"), &scene.lattice)?;
    write_atlas(&out_dir.join("shirt.atlas"), scene.shirt.uvs.as_ref().unwrap(), &scene.sides)?;

    let (poses, _) = sample_poses(config.poses, config.overlap_fraction, config.seed);
    write_poses(&out_dir.join("poses.json"), &poses)?;

    let gt_dir = out_dir.join("gt");
    let labels_dir = out_dir.join("labels");
    fs::create_dir_all(&gt_dir)?;
    fs::create_dir_all(&labels_dir)?;
    let gt = GtGenerator::new(
        &scene.shirt,
        &scene.shirt_weights,
        &scene.skeleton,
        config.wrinkle_amplitude,
        config.contact_gap,
        config.seed,
    )?;
    for (id, pose) in poses.iter().enumerate() {
        let frame = gt.frame(id, pose)?;
        write_ground_truth(&gt_dir.join(format!("gt_{id:04}.pos")), &frame)?;
        let labels = generate_labels(&scene, pose, &frame, config)?;
        for (name, field) in METHOD_NAMES.iter().zip([&labels.m1, &labels.m2, &labels.hybrid]) {
            write_displacement_field(&labels_dir.join(format!("{name}_{id:04}.disp")), field)?;
        }
    }
    Ok(())
}

/// Model training: rasterizes one method's training-split labels into
/// images and fits the ridge regressor, writing `model_<method>.ridge`.
/// Training the hybrid method also writes `baseline.img`, the mean
/// training image behind the predict-the-training-mean baseline.
pub fn train_model(out_dir: &Path, method: &str) -> Result<Regressor, KdsmError> {
    let config = read_config(&out_dir.join("config.json"))?;
    let (uvs, sides) = read_atlas(&out_dir.join("shirt.atlas"))?;
    let poses = read_poses(&out_dir.join("poses.json"))?;
    let splits = split_dataset(poses.len(), config.seed);
    let labels_dir = out_dir.join("labels");
    let mut train_features = Vec::new();
    let mut train_images = Vec::new();
    for (id, pose) in poses.iter().enumerate() {
        if splits[id] != SplitLabel::Train {
            continue;
        }
        let field = read_displacement_field(&labels_dir.join(format!("{method}_{id:04}.disp")))?;
        train_images.push(rasterize(&field.d, &uvs, &sides)?);
        train_features.push(pose_feature(pose));
    }
    let model = train(&train_features, &train_images, config.ridge_lambda)?;
    write_regressor(&out_dir.join(format!("model_{method}.ridge")), &model)?;
    if method == "hybrid" {
        write_cloth_image(&out_dir.join("baseline.img"), &mean_image(&train_images))?;
    }
    Ok(model)
}

/// Metrics: reads the persisted dataset, labels, and models back and
/// computes the report, written as `report.json` plus the per-example
/// `histogram.csv`.
pub fn evaluate_dataset(out_dir: &Path) -> Result<MetricsReport, KdsmError> {
    let config = read_config(&out_dir.join("config.json"))?;
    let scene = build_scene(&config)?;
    let poses = read_poses(&out_dir.join("poses.json"))?;
    let splits = split_dataset(poses.len(), config.seed);
    let overlap_count = ((poses.len() as f64) * config.overlap_fraction).round() as usize;
    let gt_dir = out_dir.join("gt");
    let labels_dir = out_dir.join("labels");

    // Label quality, frame by frame.
    let mut accs: Vec<MethodAccumulator> = (0..3).map(|_| MethodAccumulator::default()).collect();
    let mut frames = Vec::with_capacity(poses.len());
    for (id, pose) in poses.iter().enumerate() {
        let frame = read_ground_truth(&gt_dir.join(format!("gt_{id:04}.pos")))?;
        let deformed = skin_vertices(
            &scene.lattice.vertices,
            &scene.lattice_weights,
            &scene.skeleton,
            pose,
        )?;
        for (acc, name) in accs.iter_mut().zip(METHOD_NAMES) {
            let field = read_displacement_field(&labels_dir.join(format!("{name}_{id:04}.disp")))?;
            let rebuilt = reconstruct(&scene, &field, &deformed)?;
            let (max, avg) = vertex_error(&rebuilt, &frame.positions)?;
            acc.max_err = acc.max_err.max(max);
            acc.per_frame_avg_err.push(avg);
            let (_, avg_dd) = delta_d_stats(&field, &scene.edges);
            acc.per_frame_avg_dd.push(avg_dd);
            if id < overlap_count {
                acc.overlap_avg_dd.push(avg_dd);
            }
        }
        frames.push(frame);
    }

    // Prediction quality of each trained model on the test split.
    let features: Vec<Vec<f64>> = poses.iter().map(pose_feature).collect();
    let train_count = splits.iter().filter(|&&s| s == SplitLabel::Train).count();
    let val_count = splits.iter().filter(|&&s| s == SplitLabel::Val).count();
    let test_ids: Vec<usize> = (0..poses.len())
        .filter(|&i| splits[i] == SplitLabel::Test)
        .collect();
    let uvs = scene.shirt.uvs.as_ref().unwrap();
    let baseline_d = gather(
        &read_cloth_image(&out_dir.join("baseline.img"))?,
        uvs,
        &scene.sides,
    )?;

    let mut methods = BTreeMap::new();
    let mut baseline_errors = Vec::new();
    for (m, name) in METHOD_NAMES.iter().enumerate() {
        let model = read_regressor(&out_dir.join(format!("model_{name}.ridge")))?;
        let mut per_example = Vec::with_capacity(test_ids.len());
        let mut volume_errors = Vec::with_capacity(test_ids.len());
        for &i in &test_ids {
            let deformed = skin_vertices(
                &scene.lattice.vertices,
                &scene.lattice_weights,
                &scene.skeleton,
                &poses[i],
            )?;
            let predicted = predict_cloth(&scene, &model, &features[i], &deformed)?;
            let (_, avg) = vertex_error(&predicted, &frames[i].positions)?;
            per_example.push(avg);
            volume_errors.push(volume_error(
                &scene.shirt,
                &predicted,
                &frames[i].positions,
            )?);
            if m == 2 {
                // The baseline shares the hybrid's training images.
                let field = DisplacementField {
                    pose: i,
                    d: baseline_d.clone(),
                };
                let rebuilt = reconstruct(&scene, &field, &deformed)?;
                let (_, avg) = vertex_error(&rebuilt, &frames[i].positions)?;
                baseline_errors.push(avg);
            }
        }
        methods.insert(
            name.to_string(),
            MethodReport {
                label_vertex_error: stats(&accs[m].per_frame_avg_err),
                label_max_vertex_error: accs[m].max_err,
                label_delta_d: stats(&accs[m].per_frame_avg_dd),
                overlap_avg_delta_d: stats(&accs[m].overlap_avg_dd).mean,
                test_vertex_error: stats(&per_example),
                test_volume_error: stats(&volume_errors),
                per_example_test_error: per_example,
            },
        );
    }

    let report = MetricsReport {
        config,
        frames: poses.len(),
        train_frames: train_count,
        val_frames: val_count,
        test_frames: test_ids.len(),
        overlap_frames: overlap_count,
        lattice_vertices: scene.lattice.vertices.len(),
        lattice_tets: scene.lattice.tets.len(),
        shirt_vertices: scene.shirt.vertices.len(),
        baseline_test_vertex_error: stats(&baseline_errors),
        methods,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    fs::write(out_dir.join("report.json"), json)?;

    let mut csv = String::from("method,test_example,avg_vertex_error\n");
    for name in METHOD_NAMES {
        for (k, err) in report.methods[name].per_example_test_error.iter().enumerate() {
            csv.push_str(&format!("{name},{},{err}\n", test_ids[k]));
        }
    }
    for (k, err) in baseline_errors.iter().enumerate() {
        csv.push_str(&format!("baseline,{},{err}\n", test_ids[k]));
    }
    fs::write(out_dir.join("histogram.csv"), csv)?;
    Ok(report)
}

/// Runs every stage end to end — dataset generation, one model per
/// label method, and evaluation — returning the metrics report.
pub fn run_pipeline(config: &PipelineConfig, out_dir: &Path) -> Result<MetricsReport, KdsmError> {
    generate_dataset(config, out_dir)?;
    for name in METHOD_NAMES {
        train_model(out_dir, name)?;
    }
    evaluate_dataset(out_dir)
}

/// Full inference chain: model image for the pose, gathered to a
/// displacement field, applied in material space, and skinned.
pub fn predict_cloth(
    scene: &Scene,
    model: &Regressor,
    feature: &[f64],
    deformed_lattice: &[Point3<f64>],
) -> Result<Vec<Point3<f64>>, KdsmError> {
    let image = infer(model, feature)?;
    let d = gather(&image, scene.shirt.uvs.as_ref().unwrap(), &scene.sides)?;
    let field = DisplacementField { pose: 0, d };
    reconstruct(scene, &field, deformed_lattice)
}

/// Cloth atlas file: one text header line, then per vertex the UV pair
/// as little-endian doubles and the side as one byte (0 front, 1 back).
pub fn write_atlas(
    path: &Path,
    uvs: &[Vector2<f64>],
    sides: &[Side],
) -> Result<(), KdsmError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "atlas {}", uvs.len())?;
    for (uv, side) in uvs.iter().zip(sides) {
        w.write_all(&uv.x.to_le_bytes())?;
        w.write_all(&uv.y.to_le_bytes())?;
        w.write_all(&[match side {
            Side::Front => 0u8,
            Side::Back => 1u8,
        }])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_atlas(path: &Path) -> Result<(Vec<Vector2<f64>>, Vec<Side>), KdsmError> {
    let mut r = std::io::BufReader::new(fs::File::open(path)?);
    let header = read_header_line(&mut r, path)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let parse_err = |message: &str| KdsmError::Parse {
        path: path.display().to_string(),
        line: 1,
        message: message.into(),
    };
    if parts.len() != 2 || parts[0] != "atlas" {
        return Err(parse_err("expected header: atlas <count>"));
    }
    let n: usize = parts[1].parse().map_err(|_| parse_err("bad vertex count"))?;
    let mut uvs = Vec::with_capacity(n);
    let mut sides = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    let mut byte = [0u8; 1];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        let u = f64::from_le_bytes(buf);
        r.read_exact(&mut buf)?;
        let v = f64::from_le_bytes(buf);
        r.read_exact(&mut byte)?;
        uvs.push(Vector2::new(u, v));
        sides.push(if byte[0] == 0 { Side::Front } else { Side::Back });
    }
    Ok((uvs, sides))
}
