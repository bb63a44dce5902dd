//! Articulated skeleton, forward kinematics, HMD-signal extraction and MPJPE.

pub mod rotation;
mod skeleton;

pub use rotation::{Mat3, Real, Vec3};
pub use skeleton::{CurriculumGroups, Skeleton};

use rotation::{axis_angle_to_matrix, canonicalize_axis_angle, mat_mul, mat_vec, rot6d_decode, rot6d_encode};

use crate::error::{FlagError, Result};

/// Number of tracked joints (head, left hand, right hand).
pub const TRACKED: usize = 3;
/// Number of shape factors.
pub const SHAPE_DIM: usize = 2;
/// Per-joint observation width: 6-D rotation plus 3-D position.
pub const JOINT_FEATURE_DIM: usize = 9;
/// Width of the flow condition `[x_H, beta]`.
pub const COND_DIM: usize = TRACKED * JOINT_FEATURE_DIM + SHAPE_DIM;

/// Per-joint axis-angle rotations, each with magnitude at most pi.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    theta: Vec<Vec3>,
}

impl Pose {
    pub fn new(theta: Vec<Vec3>) -> Result<Self> {
        if theta.iter().flatten().any(|v| !v.is_finite()) {
            return Err(FlagError::Invalid("pose contains non-finite values".into()));
        }
        Ok(Self { theta: theta.into_iter().map(canonicalize_axis_angle).collect() })
    }

    pub fn zeros(joints: usize) -> Self {
        Self { theta: vec![[0.0; 3]; joints] }
    }

    /// From a joint-major flat vector.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(FlagError::Dimension(format!("flat pose length {} not a multiple of 3", flat.len())));
        }
        Self::new(flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.theta.iter().flatten().copied().collect()
    }

    pub fn joints(&self) -> &[Vec3] {
        &self.theta
    }

    pub fn joint_count(&self) -> usize {
        self.theta.len()
    }
}

/// Bone-length scale factors: (global height scale, limb scale).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ShapeParams([f64; SHAPE_DIM]);

impl ShapeParams {
    pub const MIN: f64 = 0.8;
    pub const MAX: f64 = 1.2;

    pub fn new(beta: [f64; SHAPE_DIM]) -> Result<Self> {
        if beta.iter().any(|b| !(Self::MIN..=Self::MAX).contains(b)) {
            return Err(FlagError::Invalid(format!("shape factors {beta:?} outside [0.8, 1.2]")));
        }
        Ok(Self(beta))
    }

    pub fn neutral() -> Self {
        Self([1.0, 1.0])
    }

    pub fn values(&self) -> [f64; SHAPE_DIM] {
        self.0
    }

    fn bone_scale(&self, limb: bool) -> f64 {
        if limb {
            self.0[0] * self.0[1]
        } else {
            self.0[0]
        }
    }
}

/// Head-and-hands observation: per tracked joint, 6-D global rotation then position.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HmdSignal {
    pub joints: [[f64; JOINT_FEATURE_DIM]; TRACKED],
}

impl HmdSignal {
    pub fn flat(&self) -> [f64; TRACKED * JOINT_FEATURE_DIM] {
        let mut out = [0.0; TRACKED * JOINT_FEATURE_DIM];
        for (k, j) in self.joints.iter().enumerate() {
            out[k * JOINT_FEATURE_DIM..(k + 1) * JOINT_FEATURE_DIM].copy_from_slice(j);
        }
        out
    }

    /// Decoded global rotation of tracked joint `k`.
    pub fn rotation(&self, k: usize) -> Result<Mat3> {
        let j = &self.joints[k];
        rot6d_decode(&[j[0], j[1], j[2], j[3], j[4], j[5]])
    }

    pub fn position(&self, k: usize) -> Vec3 {
        let j = &self.joints[k];
        [j[6], j[7], j[8]]
    }
}

/// Condition vector `[x_H, beta]` fed to the flow and the approximator.
pub fn condition(hmd: &HmdSignal, beta: &ShapeParams) -> [f64; COND_DIM] {
    let mut c = [0.0; COND_DIM];
    c[..TRACKED * JOINT_FEATURE_DIM].copy_from_slice(&hmd.flat());
    c[TRACKED * JOINT_FEATURE_DIM..].copy_from_slice(&beta.values());
    c
}

/// Global rotation and position of every joint.
#[derive(Clone, Debug, PartialEq)]
pub struct JointState {
    pub rotations: Vec<Mat3>,
    pub positions: Vec<Vec3>,
}

impl JointState {
    /// 9-D feature (6-D rotation, position) of every joint.
    pub fn features(&self) -> Vec<[f64; JOINT_FEATURE_DIM]> {
        self.rotations
            .iter()
            .zip(&self.positions)
            .map(|(r, p)| {
                let e = rot6d_encode(r);
                [e[0], e[1], e[2], e[3], e[4], e[5], p[0], p[1], p[2]]
            })
            .collect()
    }
}

/// Forward kinematics over any [`Real`] scalar; `theta` is joint-major flat.
///
/// The root sits at the origin. A child's position is its parent's position
/// plus the parent's global rotation applied to the scaled rest offset.
pub fn forward_kinematics_generic<T: Real>(
    skel: &Skeleton,
    theta: &[T],
    beta: &ShapeParams,
) -> Result<(Vec<Mat3<T>>, Vec<Vec3<T>>)> {
    let j = skel.joint_count();
    if theta.len() != 3 * j {
        return Err(FlagError::Dimension(format!(
            "pose has {} values, skeleton needs {}",
            theta.len(),
            3 * j
        )));
    }
    let mut rots: Vec<Mat3<T>> = Vec::with_capacity(j);
    let mut pos: Vec<Vec3<T>> = Vec::with_capacity(j);
    for i in 0..j {
        let local = axis_angle_to_matrix(&[theta[3 * i], theta[3 * i + 1], theta[3 * i + 2]]);
        match skel.parent(i) {
            None => {
                rots.push(local);
                pos.push([T::from(0.0); 3]);
            }
            Some(p) => {
                let s = beta.bone_scale(skel.is_limb(i));
                let o = skel.rest_offset(i);
                let off = [T::from(o[0] * s), T::from(o[1] * s), T::from(o[2] * s)];
                let d = mat_vec(&rots[p], &off);
                let pp = pos[p];
                pos.push([pp[0] + d[0], pp[1] + d[1], pp[2] + d[2]]);
                let g = mat_mul(&rots[p], &local);
                rots.push(g);
            }
        }
    }
    Ok((rots, pos))
}

pub fn forward_kinematics(skel: &Skeleton, pose: &Pose, beta: &ShapeParams) -> Result<JointState> {
    let (rotations, positions) = forward_kinematics_generic(skel, &pose.to_flat(), beta)?;
    Ok(JointState { rotations, positions })
}

/// Tracked joints' global 6-D rotation and position.
pub fn hmd_from_state(skel: &Skeleton, state: &JointState) -> HmdSignal {
    let mut joints = [[0.0; JOINT_FEATURE_DIM]; TRACKED];
    for (k, &t) in skel.tracked().iter().enumerate() {
        let e = rot6d_encode(&state.rotations[t]);
        let p = state.positions[t];
        joints[k] = [e[0], e[1], e[2], e[3], e[4], e[5], p[0], p[1], p[2]];
    }
    HmdSignal { joints }
}

pub fn hmd_from_pose(skel: &Skeleton, pose: &Pose, beta: &ShapeParams) -> Result<HmdSignal> {
    Ok(hmd_from_state(skel, &forward_kinematics(skel, pose, beta)?))
}

/// Mean per-joint position error over `subset`, in centimeters.
pub fn mpjpe(pred: &Pose, gt: &Pose, skel: &Skeleton, beta: &ShapeParams, subset: &[usize]) -> Result<f64> {
    let a = forward_kinematics(skel, pred, beta)?;
    let b = forward_kinematics(skel, gt, beta)?;
    mpjpe_states(&a, &b, subset)
}

pub fn mpjpe_states(a: &JointState, b: &JointState, subset: &[usize]) -> Result<f64> {
    if subset.is_empty() {
        return Err(FlagError::Invalid("MPJPE over an empty joint subset".into()));
    }
    let mut total = 0.0;
    for &j in subset {
        let (p, q) = (a.positions[j], b.positions[j]);
        total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
    }
    Ok(100.0 * total / subset.len() as f64)
}
