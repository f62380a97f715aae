//! Skeletons, poses, and linear blend skinning.
//!
//! A skeleton is a topologically sorted list of joints with rigid rest
//! transforms (joint local frame -> world, in the T-pose). A pose gives
//! each joint a local rotation (and optional local translation); world
//! transforms compose parent to child. Skinning a vertex applies the
//! weighted average of per-joint motions: v(theta) = sum_j w_j W_j(theta)
//! B_j^-1 v_rest, where B_j is joint j's rest transform and W_j its
//! posed world transform.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{IsometryMatrix3, Point3, Rotation3, Translation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::KdsmError;

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest (T-pose) transform, joint local frame to world. Rigid.
    pub rest: IsometryMatrix3<f64>,
}

#[derive(Debug, Clone)]
pub struct Skeleton {
    pub joints: Vec<Joint>,
}

/// A bone as a weighted-assignment target: the rest-space segment it
/// spans and the joint whose motion it follows (the parent end).
#[derive(Debug, Clone, Copy)]
pub struct BoneSegment {
    pub joint: usize,
    pub a: Point3<f64>,
    pub b: Point3<f64>,
}

/// Per-joint local rotation angles (roll, pitch, yaw about x, y, z) and
/// local translations. The identity pose leaves every vertex at rest.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose {
    pub angles: Vec<Vector3<f64>>,
    pub translations: Vec<Vector3<f64>>,
}

impl Pose {
    pub fn identity(joint_count: usize) -> Pose {
        Pose {
            angles: vec![Vector3::zeros(); joint_count],
            translations: vec![Vector3::zeros(); joint_count],
        }
    }
}

/// Sparse per-vertex skinning weights: (joint id, weight) pairs, at
/// most four per vertex, nonnegative, summing to one.
pub type SkinWeights = Vec<Vec<(usize, f64)>>;

impl Skeleton {
    pub fn validate(&self) -> Result<(), KdsmError> {
        for (j, joint) in self.joints.iter().enumerate() {
            if let Some(p) = joint.parent {
                if p >= j {
                    return Err(KdsmError::ShapeMismatch(format!(
                        "joint {j} ({}) has parent {p}; parents must precede children",
                        joint.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn joint_position(&self, j: usize) -> Point3<f64> {
        Point3::from(self.joints[j].rest.translation.vector)
    }

    /// One segment per non-root joint, spanning from its parent's origin
    /// to its own and following the parent joint's motion.
    pub fn bone_segments(&self) -> Vec<BoneSegment> {
        self.joints
            .iter()
            .enumerate()
            .filter_map(|(j, joint)| {
                joint.parent.map(|p| BoneSegment {
                    joint: p,
                    a: self.joint_position(p),
                    b: self.joint_position(j),
                })
            })
            .collect()
    }

    /// Posed world transforms W_j, composed parent to child. In the
    /// identity pose W_j equals the rest transform.
    pub fn world_transforms(&self, pose: &Pose) -> Result<Vec<IsometryMatrix3<f64>>, KdsmError> {
        if pose.angles.len() != self.joints.len() || pose.translations.len() != self.joints.len() {
            return Err(KdsmError::ShapeMismatch(format!(
                "pose covers {} joints, skeleton has {}",
                pose.angles.len(),
                self.joints.len()
            )));
        }
        let mut world: Vec<IsometryMatrix3<f64>> = Vec::with_capacity(self.joints.len());
        for (j, joint) in self.joints.iter().enumerate() {
            let a = pose.angles[j];
            let local = Translation3::from(pose.translations[j])
                * Rotation3::from_euler_angles(a.x, a.y, a.z);
            let w = match joint.parent {
                // L_j = B_p^-1 B_j converts the parent's frame to j's.
                Some(p) => world[p] * (self.joints[p].rest.inverse() * joint.rest) * local,
                None => joint.rest * local,
            };
            world.push(w);
        }
        Ok(world)
    }

    /// Per-joint skinning matrices M_j = W_j B_j^-1 (rest world space to
    /// posed world space).
    pub fn skin_matrices(&self, pose: &Pose) -> Result<Vec<IsometryMatrix3<f64>>, KdsmError> {
        Ok(self
            .world_transforms(pose)?
            .iter()
            .zip(&self.joints)
            .map(|(w, joint)| w * joint.rest.inverse())
            .collect())
    }
}

fn point_segment_distance(p: &Point3<f64>, a: &Point3<f64>, b: &Point3<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Inverse-square-distance weights over the nearest four bone segments.
/// A vertex lying on a segment binds rigidly to that segment's joint.
/// Segments sharing a joint pool their weight. Entries are sorted by
/// joint id; weights sum to one.
pub fn assign_weights(
    vertices: &[Point3<f64>],
    bones: &[BoneSegment],
) -> Result<SkinWeights, KdsmError> {
    if bones.is_empty() {
        return Err(KdsmError::EmptyInput("need at least one bone".into()));
    }
    const ON_BONE: f64 = 1e-9;
    let mut weights = Vec::with_capacity(vertices.len());
    for p in vertices {
        let mut dists: Vec<(f64, usize)> = bones
            .iter()
            .enumerate()
            .map(|(b, bone)| (point_segment_distance(p, &bone.a, &bone.b), b))
            .collect();
        dists.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let mut entries: Vec<(usize, f64)> = Vec::with_capacity(4);
        if dists[0].0 <= ON_BONE {
            entries.push((bones[dists[0].1].joint, 1.0));
        } else {
            let nearest = &dists[..dists.len().min(4)];
            let total: f64 = nearest.iter().map(|(d, _)| 1.0 / (d * d)).sum();
            for &(d, b) in nearest {
                let w = 1.0 / (d * d) / total;
                let joint = bones[b].joint;
                match entries.iter_mut().find(|(j, _)| *j == joint) {
                    Some((_, acc)) => *acc += w,
                    None => entries.push((joint, w)),
                }
            }
        }
        entries.sort_by_key(|&(j, _)| j);
        weights.push(entries);
    }
    Ok(weights)
}

/// Linear blend skinning of `rest` under `pose`.
pub fn skin_vertices(
    rest: &[Point3<f64>],
    weights: &SkinWeights,
    skeleton: &Skeleton,
    pose: &Pose,
) -> Result<Vec<Point3<f64>>, KdsmError> {
    if weights.len() != rest.len() {
        return Err(KdsmError::ShapeMismatch(format!(
            "{} weight entries for {} vertices",
            weights.len(),
            rest.len()
        )));
    }
    let matrices = skeleton.skin_matrices(pose)?;
    let mut out = Vec::with_capacity(rest.len());
    for (v, entry) in rest.iter().zip(weights) {
        let mut p = Vector3::zeros();
        for &(j, w) in entry {
            p += (matrices[j] * v).coords * w;
        }
        out.push(Point3::from(p));
    }
    Ok(out)
}

// JSON representations. Rotations are stored as row-major 3x3 matrices
// so files stay readable and loaders stay trivial.

#[derive(Serialize, Deserialize)]
struct JointJson {
    name: String,
    parent: Option<usize>,
    translation: [f64; 3],
    rotation: [[f64; 3]; 3],
}

#[derive(Serialize, Deserialize)]
struct SkeletonJson {
    joints: Vec<JointJson>,
}

#[derive(Serialize, Deserialize)]
pub struct PoseJson {
    pub angles: Vec<[f64; 3]>,
    #[serde(default)]
    pub translations: Option<Vec<[f64; 3]>>,
}

impl From<&Pose> for PoseJson {
    fn from(pose: &Pose) -> PoseJson {
        PoseJson {
            angles: pose.angles.iter().map(|a| [a.x, a.y, a.z]).collect(),
            translations: if pose.translations.iter().all(|t| *t == Vector3::zeros()) {
                None
            } else {
                Some(pose.translations.iter().map(|t| [t.x, t.y, t.z]).collect())
            },
        }
    }
}

impl TryFrom<PoseJson> for Pose {
    type Error = KdsmError;

    fn try_from(json: PoseJson) -> Result<Pose, KdsmError> {
        let angles: Vec<Vector3<f64>> = json.angles.iter().map(|a| Vector3::from(*a)).collect();
        let translations = match json.translations {
            Some(t) => {
                if t.len() != angles.len() {
                    return Err(KdsmError::ShapeMismatch(format!(
                        "{} translations for {} joints",
                        t.len(),
                        angles.len()
                    )));
                }
                t.iter().map(|t| Vector3::from(*t)).collect()
            }
            None => vec![Vector3::zeros(); angles.len()],
        };
        Ok(Pose {
            angles,
            translations,
        })
    }
}

pub fn write_skeleton(path: &Path, skeleton: &Skeleton) -> Result<(), KdsmError> {
    let json = SkeletonJson {
        joints: skeleton
            .joints
            .iter()
            .map(|j| {
                let r = j.rest.rotation.matrix();
                JointJson {
                    name: j.name.clone(),
                    parent: j.parent,
                    translation: j.rest.translation.vector.into(),
                    rotation: [
                        [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                        [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                        [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
                    ],
                }
            })
            .collect(),
    };
    let out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(out, &json)?;
    Ok(())
}

pub fn read_skeleton(path: &Path) -> Result<Skeleton, KdsmError> {
    let json: SkeletonJson = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let joints = json
        .joints
        .into_iter()
        .map(|j| {
            let m = nalgebra::Matrix3::from_iterator(
                j.rotation.iter().flatten().copied(),
            )
            .transpose();
            Joint {
                name: j.name,
                parent: j.parent,
                rest: Translation3::from(Vector3::from(j.translation))
                    * Rotation3::from_matrix_unchecked(m),
            }
        })
        .collect();
    let skeleton = Skeleton { joints };
    skeleton.validate()?;
    Ok(skeleton)
}

pub fn write_pose(path: &Path, pose: &Pose) -> Result<(), KdsmError> {
    let out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(out, &PoseJson::from(pose))?;
    Ok(())
}

pub fn read_pose(path: &Path) -> Result<Pose, KdsmError> {
    let json: PoseJson = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    Pose::try_from(json)
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<(), KdsmError> {
    let json: Vec<PoseJson> = poses.iter().map(PoseJson::from).collect();
    let out = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(out, &json)?;
    Ok(())
}

pub fn read_poses(path: &Path) -> Result<Vec<Pose>, KdsmError> {
    let json: Vec<PoseJson> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    json.into_iter().map(Pose::try_from).collect()
}

pub fn write_weights(path: &Path, weights: &SkinWeights) -> Result<(), KdsmError> {
    let out = BufWriter::new(File::create(path)?);
    serde_json::to_writer(out, weights)?;
    Ok(())
}

pub fn read_weights(path: &Path) -> Result<SkinWeights, KdsmError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}
