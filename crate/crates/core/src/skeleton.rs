//! Kinematic body model: joint tree, rest offsets, forward kinematics and the
//! mapping from tracked segments to tree edges.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::so3::Rotation;

/// The shipped model file.
pub const DEFAULT_SKELETON_TOML: &str = include_str!("../assets/smpl22.skeleton.toml");

pub const SKELETON_FORMAT: &str = "bodyfuse-skeleton";
pub const SKELETON_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SkeletonError {
    #[error("skeleton file: {0}")]
    Parse(String),
    #[error("unsupported skeleton file version {0}")]
    Version(u32),
    #[error("invalid skeleton: {0}")]
    Invalid(String),
    #[error("unknown joint `{0}`")]
    UnknownJoint(String),
    #[error("unknown bone `{0}`")]
    UnknownBone(String),
    #[error("pose does not match skeleton: {0}")]
    PoseMismatch(String),
    #[error("motion sequence: {0}")]
    Sequence(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// The nine instrumented segments, in tracker-id order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrackedBone {
    Pelvis,
    LeftUpperArm,
    RightUpperArm,
    LeftForearm,
    RightForearm,
    LeftThigh,
    RightThigh,
    LeftShank,
    RightShank,
}

impl TrackedBone {
    pub const ALL: [TrackedBone; 9] = [
        TrackedBone::Pelvis,
        TrackedBone::LeftUpperArm,
        TrackedBone::RightUpperArm,
        TrackedBone::LeftForearm,
        TrackedBone::RightForearm,
        TrackedBone::LeftThigh,
        TrackedBone::RightThigh,
        TrackedBone::LeftShank,
        TrackedBone::RightShank,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrackedBone::Pelvis => "pelvis",
            TrackedBone::LeftUpperArm => "left_upper_arm",
            TrackedBone::RightUpperArm => "right_upper_arm",
            TrackedBone::LeftForearm => "left_forearm",
            TrackedBone::RightForearm => "right_forearm",
            TrackedBone::LeftThigh => "left_thigh",
            TrackedBone::RightThigh => "right_thigh",
            TrackedBone::LeftShank => "left_shank",
            TrackedBone::RightShank => "right_shank",
        }
    }

    /// Tracker id carried on the wire.
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    /// The tracked segment one level up the chain, if any.
    pub fn tracked_parent(self) -> Option<TrackedBone> {
        use TrackedBone::*;
        match self {
            Pelvis => None,
            LeftUpperArm | RightUpperArm => Some(Pelvis),
            LeftForearm => Some(LeftUpperArm),
            RightForearm => Some(RightUpperArm),
            LeftThigh | RightThigh => Some(Pelvis),
            LeftShank => Some(LeftThigh),
            RightShank => Some(RightThigh),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    /// Rest offset from the parent joint, meters, in the parent frame.
    pub offset: Vector3<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bone {
    pub name: String,
    /// Joint whose world rotation drives the bone.
    pub joint: usize,
    pub child: usize,
    /// Rest orientation of the bone frame (+Y along joint→child).
    pub rest: Rotation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonModel {
    pub name: String,
    pub version: u32,
    joints: Vec<Joint>,
    bones: Vec<Bone>,
    joint_lookup: HashMap<String, usize>,
    bone_lookup: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    format: String,
    version: u32,
    name: String,
    root: String,
    joints: Vec<JointEntry>,
    bones: Vec<BoneEntry>,
}

#[derive(Serialize, Deserialize)]
struct JointEntry {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parent: Option<String>,
    offset: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct BoneEntry {
    name: String,
    joint: String,
    child: String,
}

/// Orthonormal frame whose +Y is `dir`; +X follows world forward when
/// possible, world up otherwise.
pub fn bone_rest_frame(dir: &Vector3<f64>) -> Rotation {
    let y = dir.normalize();
    let helper = if y.x.abs() > 0.9 {
        Vector3::z()
    } else {
        Vector3::x()
    };
    let z = helper.cross(&y).normalize();
    let x = y.cross(&z);
    let m = Matrix3::from_columns(&[x, y, z]);
    Rotation::from_matrix(&m).expect("constructed frame is orthonormal")
}

impl SkeletonModel {
    pub fn from_toml_str(text: &str) -> Result<Self, SkeletonError> {
        let file: SkeletonFile =
            toml::from_str(text).map_err(|e| SkeletonError::Parse(e.to_string()))?;
        if file.format != SKELETON_FORMAT {
            return Err(SkeletonError::Parse(format!(
                "format `{}` is not `{SKELETON_FORMAT}`",
                file.format
            )));
        }
        if file.version != SKELETON_VERSION {
            return Err(SkeletonError::Version(file.version));
        }
        let mut joint_lookup = HashMap::new();
        let mut joints = Vec::with_capacity(file.joints.len());
        for (i, j) in file.joints.iter().enumerate() {
            if joint_lookup.insert(j.name.clone(), i).is_some() {
                return Err(SkeletonError::Invalid(format!("duplicate joint `{}`", j.name)));
            }
            let parent = match &j.parent {
                None => None,
                Some(p) => {
                    let pi = *joint_lookup.get(p).ok_or_else(|| {
                        SkeletonError::Invalid(format!(
                            "joint `{}` lists parent `{p}` that is not defined before it",
                            j.name
                        ))
                    })?;
                    Some(pi)
                }
            };
            joints.push(Joint {
                name: j.name.clone(),
                parent,
                offset: Vector3::from(j.offset),
            });
        }
        let root = *joint_lookup
            .get(&file.root)
            .ok_or_else(|| SkeletonError::UnknownJoint(file.root.clone()))?;
        let mut bones = Vec::with_capacity(file.bones.len());
        for b in &file.bones {
            let joint = *joint_lookup
                .get(&b.joint)
                .ok_or_else(|| SkeletonError::UnknownJoint(b.joint.clone()))?;
            let child = *joint_lookup
                .get(&b.child)
                .ok_or_else(|| SkeletonError::UnknownJoint(b.child.clone()))?;
            let offset = joints[child].offset;
            bones.push(Bone {
                name: b.name.clone(),
                joint,
                child,
                rest: if offset.norm() > 1e-12 {
                    bone_rest_frame(&offset)
                } else {
                    Rotation::identity()
                },
            });
        }
        let skeleton = Self::new(file.name, file.version, joints, bones)?;
        if root != 0 {
            return Err(SkeletonError::Invalid(format!(
                "root `{}` must be the first joint",
                file.root
            )));
        }
        Ok(skeleton)
    }

    pub fn load(path: &Path) -> Result<Self, SkeletonError> {
        let text = std::fs::read_to_string(path).map_err(|source| SkeletonError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let file = SkeletonFile {
            format: SKELETON_FORMAT.into(),
            version: self.version,
            name: self.name.clone(),
            root: self.joints[0].name.clone(),
            joints: self
                .joints
                .iter()
                .map(|j| JointEntry {
                    name: j.name.clone(),
                    parent: j.parent.map(|p| self.joints[p].name.clone()),
                    offset: [j.offset.x, j.offset.y, j.offset.z],
                })
                .collect(),
            bones: self
                .bones
                .iter()
                .map(|b| BoneEntry {
                    name: b.name.clone(),
                    joint: self.joints[b.joint].name.clone(),
                    child: self.joints[b.child].name.clone(),
                })
                .collect(),
        };
        toml::to_string(&file).expect("skeleton serializes")
    }

    /// Builds and validates a model from already-resolved parts.
    pub fn new(
        name: String,
        version: u32,
        joints: Vec<Joint>,
        bones: Vec<Bone>,
    ) -> Result<Self, SkeletonError> {
        if joints.is_empty() {
            return Err(SkeletonError::Invalid("no joints".into()));
        }
        let roots = joints.iter().filter(|j| j.parent.is_none()).count();
        if roots != 1 || joints[0].parent.is_some() {
            return Err(SkeletonError::Invalid(format!(
                "expected exactly one root at index 0, found {roots} roots"
            )));
        }
        for (i, j) in joints.iter().enumerate() {
            if let Some(p) = j.parent {
                if p >= i {
                    return Err(SkeletonError::Invalid(format!(
                        "joint `{}` (index {i}) has parent index {p}; parents must precede children",
                        j.name
                    )));
                }
            }
            if !j.offset.iter().all(|x| x.is_finite()) {
                return Err(SkeletonError::Invalid(format!(
                    "joint `{}` has a non-finite offset",
                    j.name
                )));
            }
        }
        let mut joint_lookup = HashMap::new();
        for (i, j) in joints.iter().enumerate() {
            if joint_lookup.insert(j.name.clone(), i).is_some() {
                return Err(SkeletonError::Invalid(format!("duplicate joint `{}`", j.name)));
            }
        }
        let mut bone_lookup = HashMap::new();
        for (i, b) in bones.iter().enumerate() {
            if b.joint >= joints.len() || b.child >= joints.len() {
                return Err(SkeletonError::Invalid(format!(
                    "bone `{}` references a missing joint",
                    b.name
                )));
            }
            if joints[b.child].parent != Some(b.joint) {
                return Err(SkeletonError::Invalid(format!(
                    "bone `{}`: `{}` is not a child of `{}`",
                    b.name, joints[b.child].name, joints[b.joint].name
                )));
            }
            if bone_lookup.insert(b.name.clone(), i).is_some() {
                return Err(SkeletonError::Invalid(format!("duplicate bone `{}`", b.name)));
            }
        }
        for t in TrackedBone::ALL {
            if !bone_lookup.contains_key(t.name()) {
                return Err(SkeletonError::Invalid(format!(
                    "tracked bone `{}` is not mapped",
                    t.name()
                )));
            }
        }
        Ok(Self {
            name,
            version,
            joints,
            bones,
            joint_lookup,
            bone_lookup,
        })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn bones(&self) -> &[Bone] {
        &self.bones
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn joint_index(&self, name: &str) -> Result<usize, SkeletonError> {
        self.joint_lookup
            .get(name)
            .copied()
            .ok_or_else(|| SkeletonError::UnknownJoint(name.into()))
    }

    pub fn bone(&self, name: &str) -> Result<&Bone, SkeletonError> {
        self.bone_lookup
            .get(name)
            .map(|&i| &self.bones[i])
            .ok_or_else(|| SkeletonError::UnknownBone(name.into()))
    }

    pub fn tracked(&self, bone: TrackedBone) -> &Bone {
        self.bone(bone.name()).expect("validated at construction")
    }

    /// Joints from `ancestor` (exclusive) down to `descendant` (inclusive),
    /// or `None` if `ancestor` is not on the path to the root.
    pub fn chain(&self, ancestor: usize, descendant: usize) -> Option<Vec<usize>> {
        let mut path = Vec::new();
        let mut j = descendant;
        while j != ancestor {
            path.push(j);
            j = self.joints[j].parent?;
        }
        path.reverse();
        Some(path)
    }

    pub fn children(&self, joint: usize) -> impl Iterator<Item = usize> + '_ {
        self.joints
            .iter()
            .enumerate()
            .filter(move |(_, j)| j.parent == Some(joint))
            .map(|(i, _)| i)
    }

    /// Leaf joints have no children, so their local rotation moves nothing.
    pub fn is_leaf(&self, joint: usize) -> bool {
        self.children(joint).next().is_none()
    }

    pub fn rest_pose(&self, timestamp_ms: i64) -> PoseFrame {
        PoseFrame {
            timestamp_ms,
            root_orientation: Rotation::identity(),
            root_position: Vector3::zeros(),
            joint_rotations: vec![Rotation::identity(); self.joints.len() - 1],
        }
    }
}

/// The shipped 22-joint humanoid.
pub fn default_skeleton() -> SkeletonModel {
    SkeletonModel::from_toml_str(DEFAULT_SKELETON_TOML).expect("shipped skeleton is valid")
}

/// One body configuration: root pose in the world plus local rotations of
/// every non-root joint (in joint order).
#[derive(Clone, Debug, PartialEq)]
pub struct PoseFrame {
    pub timestamp_ms: i64,
    pub root_orientation: Rotation,
    pub root_position: Vector3<f64>,
    pub joint_rotations: Vec<Rotation>,
}

impl PoseFrame {
    pub fn local_rotation(&self, joint: usize) -> Rotation {
        if joint == 0 {
            self.root_orientation
        } else {
            self.joint_rotations[joint - 1]
        }
    }

    pub fn set_local_rotation(&mut self, joint: usize, r: Rotation) {
        if joint == 0 {
            self.root_orientation = r;
        } else {
            self.joint_rotations[joint - 1] = r;
        }
    }

    fn check(&self, skeleton: &SkeletonModel) -> Result<(), SkeletonError> {
        if self.joint_rotations.len() + 1 != skeleton.joint_count() {
            return Err(SkeletonError::PoseMismatch(format!(
                "{} joint rotations for a {}-joint skeleton",
                self.joint_rotations.len(),
                skeleton.joint_count()
            )));
        }
        if !self.root_position.iter().all(|x| x.is_finite()) {
            return Err(SkeletonError::PoseMismatch("non-finite root position".into()));
        }
        Ok(())
    }
}

/// World-frame joint positions and joint orientations.
#[derive(Clone, Debug, PartialEq)]
pub struct Kinematics {
    pub positions: Vec<Vector3<f64>>,
    pub orientations: Vec<Rotation>,
}

impl Kinematics {
    pub fn bone_orientation(&self, bone: &Bone) -> Rotation {
        self.orientations[bone.joint] * bone.rest
    }
}

pub fn forward_kinematics(
    skeleton: &SkeletonModel,
    pose: &PoseFrame,
) -> Result<Kinematics, SkeletonError> {
    pose.check(skeleton)?;
    Ok(forward_kinematics_unchecked(skeleton, pose))
}

pub(crate) fn forward_kinematics_unchecked(skeleton: &SkeletonModel, pose: &PoseFrame) -> Kinematics {
    let n = skeleton.joint_count();
    let mut positions = Vec::with_capacity(n);
    let mut orientations: Vec<Rotation> = Vec::with_capacity(n);
    for (i, joint) in skeleton.joints.iter().enumerate() {
        match joint.parent {
            None => {
                positions.push(pose.root_position);
                orientations.push(pose.root_orientation);
            }
            Some(p) => {
                let parent_rot = orientations[p];
                positions.push(positions[p] + parent_rot.apply(&joint.offset));
                orientations.push(parent_rot * pose.local_rotation(i));
            }
        }
    }
    Kinematics {
        positions,
        orientations,
    }
}

pub fn bone_world_orientation(
    skeleton: &SkeletonModel,
    pose: &PoseFrame,
    bone_name: &str,
) -> Result<Rotation, SkeletonError> {
    let bone = skeleton.bone(bone_name)?;
    let kin = forward_kinematics(skeleton, pose)?;
    Ok(kin.bone_orientation(bone))
}

/// `(orientation of a)ᵀ · (orientation of b)`; unaffected by the root pose.
pub fn relative_rotation(
    skeleton: &SkeletonModel,
    pose: &PoseFrame,
    bone_a: &str,
    bone_b: &str,
) -> Result<Rotation, SkeletonError> {
    let a = skeleton.bone(bone_a)?;
    let b = skeleton.bone(bone_b)?;
    let kin = forward_kinematics(skeleton, pose)?;
    Ok(kin.bone_orientation(a).inverse() * kin.bone_orientation(b))
}

/// Time-ordered poses of one skeleton.
#[derive(Clone, Debug)]
pub struct MotionSequence {
    pub skeleton: Arc<SkeletonModel>,
    frames: Vec<PoseFrame>,
    pub rate_hz: f64,
}

impl MotionSequence {
    pub fn new(
        skeleton: Arc<SkeletonModel>,
        frames: Vec<PoseFrame>,
        rate_hz: f64,
    ) -> Result<Self, SkeletonError> {
        if !(rate_hz > 0.0) {
            return Err(SkeletonError::Sequence(format!("rate {rate_hz} Hz is not positive")));
        }
        for (k, f) in frames.iter().enumerate() {
            f.check(&skeleton)?;
            if k > 0 && f.timestamp_ms <= frames[k - 1].timestamp_ms {
                return Err(SkeletonError::Sequence(format!(
                    "timestamps not strictly increasing at frame {k}"
                )));
            }
        }
        Ok(Self {
            skeleton,
            frames,
            rate_hz,
        })
    }

    pub fn frames(&self) -> &[PoseFrame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.frames.iter().map(|f| f.timestamp_ms).collect()
    }

    pub fn into_frames(self) -> Vec<PoseFrame> {
        self.frames
    }
}

impl PartialEq for MotionSequence {
    fn eq(&self, other: &Self) -> bool {
        self.skeleton == other.skeleton && self.frames == other.frames && self.rate_hz == other.rate_hz
    }
}
