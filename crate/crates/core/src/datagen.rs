//! Procedural pose data: archetype blending with per-joint noise, dataset
//! files, and the two out-of-distribution generators.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FlagError, Result};
use crate::kinematics::rotation::{axis_angle_to_matrix, canonicalize_axis_angle, mat_mul, matrix_to_axis_angle, Mat3};
use crate::kinematics::{condition, hmd_from_pose, HmdSignal, Pose, ShapeParams, Skeleton, COND_DIM};

pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy)]
enum Axis {
    X,
    Y,
    Z,
}

fn rot(axis: Axis, angle: f64) -> Mat3 {
    axis_angle_to_matrix(&match axis {
        Axis::X => [angle, 0.0, 0.0],
        Axis::Y => [0.0, angle, 0.0],
        Axis::Z => [0.0, 0.0, angle],
    })
}

/// A joint rotation written as a product of elementary rotations, leftmost outermost.
fn compose(parts: &[(Axis, f64)]) -> [f64; 3] {
    let mut r = rot(Axis::X, 0.0);
    for &(a, t) in parts {
        r = mat_mul(&r, &rot(a, t));
    }
    matrix_to_axis_angle(&r)
}

/// Archetype library plus noise scales.
///
/// Axes: y up, z forward, x toward the body's left. Negative rotation about
/// x swings a hanging limb forward.
#[derive(Clone, Debug)]
pub struct MotionPrior {
    archetypes: Vec<(String, Vec<[f64; 3]>)>,
    noise: Vec<f64>,
    yaw_range: f64,
}

impl MotionPrior {
    pub fn standard(skel: &Skeleton) -> Self {
        use Axis::*;
        let j = skel.joint_count();
        let idx = |n: &str| skel.index_of(n).expect("standard joint names");
        let build = |name: &str, spec: &[(&str, &[(Axis, f64)])]| {
            let mut pose = vec![[0.0; 3]; j];
            for (joint, parts) in spec {
                pose[idx(joint)] = compose(parts);
            }
            (name.to_string(), pose)
        };
        let archetypes = vec![
            build(
                "stand",
                &[
                    ("left_shoulder", &[(Z, -1.3)]),
                    ("right_shoulder", &[(Z, 1.3)]),
                    ("left_elbow", &[(Y, -0.2)]),
                    ("right_elbow", &[(Y, 0.2)]),
                ],
            ),
            build(
                "sit",
                &[
                    ("left_hip", &[(X, -1.5)]),
                    ("right_hip", &[(X, -1.5)]),
                    ("left_knee", &[(X, 1.5)]),
                    ("right_knee", &[(X, 1.5)]),
                    ("spine1", &[(X, 0.15)]),
                    ("left_shoulder", &[(X, -0.5), (Z, -1.2)]),
                    ("right_shoulder", &[(X, -0.5), (Z, 1.2)]),
                    ("left_elbow", &[(Y, -1.0)]),
                    ("right_elbow", &[(Y, 1.0)]),
                ],
            ),
            build(
                "reach_up",
                &[
                    ("spine2", &[(X, -0.15)]),
                    ("neck", &[(X, -0.3)]),
                    ("left_shoulder", &[(Z, 1.2)]),
                    ("right_shoulder", &[(Z, -1.2)]),
                    ("left_ankle", &[(X, 0.3)]),
                    ("right_ankle", &[(X, 0.3)]),
                ],
            ),
            build(
                "walk_left",
                &[
                    ("left_hip", &[(X, -0.5)]),
                    ("right_hip", &[(X, 0.3)]),
                    ("left_knee", &[(X, 0.15)]),
                    ("right_knee", &[(X, 0.7)]),
                    ("spine3", &[(Y, 0.15)]),
                    ("left_shoulder", &[(X, 0.4), (Z, -1.3)]),
                    ("right_shoulder", &[(X, -0.5), (Z, 1.3)]),
                    ("right_elbow", &[(Y, 0.6)]),
                ],
            ),
            build(
                "walk_right",
                &[
                    ("right_hip", &[(X, -0.5)]),
                    ("left_hip", &[(X, 0.3)]),
                    ("right_knee", &[(X, 0.15)]),
                    ("left_knee", &[(X, 0.7)]),
                    ("spine3", &[(Y, -0.15)]),
                    ("right_shoulder", &[(X, 0.4), (Z, 1.3)]),
                    ("left_shoulder", &[(X, -0.5), (Z, -1.3)]),
                    ("left_elbow", &[(Y, -0.6)]),
                ],
            ),
            build(
                "squat",
                &[
                    ("left_hip", &[(X, -1.3), (Z, -0.2)]),
                    ("right_hip", &[(X, -1.3), (Z, 0.2)]),
                    ("left_knee", &[(X, 2.1)]),
                    ("right_knee", &[(X, 2.1)]),
                    ("left_ankle", &[(X, -0.5)]),
                    ("right_ankle", &[(X, -0.5)]),
                    ("spine1", &[(X, 0.4)]),
                    ("neck", &[(X, -0.3)]),
                    ("left_shoulder", &[(Y, -1.3)]),
                    ("right_shoulder", &[(Y, 1.3)]),
                ],
            ),
            build(
                "reach_forward",
                &[
                    ("left_hip", &[(X, -0.25)]),
                    ("right_hip", &[(X, -0.25)]),
                    ("left_knee", &[(X, 0.3)]),
                    ("right_knee", &[(X, 0.3)]),
                    ("spine1", &[(X, 0.3)]),
                    ("spine2", &[(X, 0.15)]),
                    ("left_shoulder", &[(Y, -1.45)]),
                    ("right_shoulder", &[(Y, 1.45)]),
                    ("left_elbow", &[(Y, -0.3)]),
                    ("right_elbow", &[(Y, 0.3)]),
                ],
            ),
        ];
        let mut noise = vec![0.22; j];
        for name in ["left_knee", "right_knee", "left_hip", "right_hip"] {
            noise[idx(name)] = 0.26;
        }
        for name in ["left_ankle", "right_ankle", "left_foot", "right_foot", "left_wrist", "right_wrist"] {
            noise[idx(name)] = 0.3;
        }
        for name in ["spine1", "spine2", "spine3", "neck", "left_collar", "right_collar"] {
            noise[idx(name)] = 0.12;
        }
        noise[idx("pelvis")] = 0.1;
        Self { archetypes, noise, yaw_range: std::f64::consts::FRAC_PI_3 }
    }

    pub fn archetype_names(&self) -> Vec<&str> {
        self.archetypes.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Blends two distinct archetypes, adds per-joint Gaussian noise and a
    /// random heading. Returns the pose and the dominant archetype index.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> (Pose, usize) {
        let k = self.archetypes.len();
        let a = rng.random_range(0..k);
        let b = (a + rng.random_range(1..k)) % k;
        let w: f64 = rng.random_range(0.0..1.0);
        let (pa, pb) = (&self.archetypes[a].1, &self.archetypes[b].1);
        let mut theta = Vec::with_capacity(pa.len());
        for j in 0..pa.len() {
            let n = Normal::new(0.0, self.noise[j]).expect("positive scale");
            let mut v = [0.0; 3];
            for c in 0..3 {
                v[c] = (1.0 - w) * pa[j][c] + w * pb[j][c] + n.sample(rng);
            }
            theta.push(v);
        }
        let yaw = rng.random_range(-self.yaw_range..self.yaw_range);
        let root = mat_mul(&rot(Axis::Y, yaw), &axis_angle_to_matrix(&theta[0]));
        theta[0] = matrix_to_axis_angle(&root);
        let pose = Pose::new(theta).expect("finite sample");
        (pose, if w < 0.5 { a } else { b })
    }
}

/// One training triplet; the observation is always re-derived from pose and shape.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub pose: Pose,
    pub beta: ShapeParams,
    pub hmd: HmdSignal,
}

impl DatasetRecord {
    pub fn new(skel: &Skeleton, pose: Pose, beta: ShapeParams) -> Result<Self> {
        let hmd = hmd_from_pose(skel, &pose, &beta)?;
        Ok(Self { pose, beta, hmd })
    }

    pub fn condition(&self) -> [f64; COND_DIM] {
        condition(&self.hmd, &self.beta)
    }
}

/// Per-coordinate pose ranges of a training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRanges {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl PoseRanges {
    pub fn from_records(records: &[DatasetRecord]) -> Option<Self> {
        let first = records.first()?.pose.to_flat();
        let (mut min, mut max) = (first.clone(), first);
        for r in &records[1..] {
            for (k, v) in r.pose.to_flat().into_iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        Some(Self { min, max })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    joints: usize,
    shape_dim: usize,
    skeleton_hash: String,
    count: usize,
    ranges: Option<PoseRanges>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Line {
    pose: Vec<f64>,
    beta: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    /// Ranges of the training split this set belongs to.
    pub ranges: Option<PoseRanges>,
    skeleton_hash: String,
}

impl Dataset {
    pub fn new(skel: &Skeleton, records: Vec<DatasetRecord>, ranges: Option<PoseRanges>) -> Self {
        Self { records, ranges, skeleton_hash: skel.hash().to_string() }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn skeleton_hash(&self) -> &str {
        &self.skeleton_hash
    }

    /// Flattened poses, `[n * D]`.
    pub fn poses(&self) -> Vec<f64> {
        self.records.iter().flat_map(|r| r.pose.to_flat()).collect()
    }

    /// Raw conditions, `[n * COND_DIM]`.
    pub fn conditions(&self) -> Vec<f64> {
        self.records.iter().flat_map(|r| r.condition()).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            ranges: self.ranges.clone(),
            skeleton_hash: self.skeleton_hash.clone(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| FlagError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let joints = self.records.first().map_or(0, |r| r.pose.joint_count());
        let header = Header {
            version: DATASET_VERSION,
            joints,
            shape_dim: 2,
            skeleton_hash: self.skeleton_hash.clone(),
            count: self.records.len(),
            ranges: self.ranges.clone(),
        };
        let io = |e| FlagError::io(path, e);
        writeln!(w, "{}", serde_json::to_string(&header).expect("serializable")).map_err(io)?;
        for r in &self.records {
            let line = Line { pose: r.pose.to_flat(), beta: r.beta.values() };
            writeln!(w, "{}", serde_json::to_string(&line).expect("serializable")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    /// Loads a dataset, re-deriving every observation and checking the header.
    pub fn read(path: &Path, skel: &Skeleton) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| FlagError::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let bad = |m: String| FlagError::Format(format!("{}: {m}", path.display()));
        let first = lines.next().ok_or_else(|| bad("empty file".into()))?.map_err(|e| FlagError::io(path, e))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| bad(format!("header: {e}")))?;
        if header.version != DATASET_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        if header.skeleton_hash != skel.hash() {
            return Err(FlagError::HashMismatch { expected: skel.hash().into(), found: header.skeleton_hash });
        }
        if header.count > 0 && header.joints != skel.joint_count() {
            return Err(bad(format!("{} joints, skeleton has {}", header.joints, skel.joint_count())));
        }
        let mut records = Vec::with_capacity(header.count);
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| FlagError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let l: Line = serde_json::from_str(&line).map_err(|e| bad(format!("record {i}: {e}")))?;
            let pose = Pose::from_flat(&l.pose)?;
            if pose.joint_count() != skel.joint_count() {
                return Err(bad(format!("record {i} has {} joints", pose.joint_count())));
            }
            records.push(DatasetRecord::new(skel, pose, ShapeParams::new(l.beta)?)?);
        }
        if records.len() != header.count {
            return Err(bad(format!("header says {} records, found {}", header.count, records.len())));
        }
        Ok(Self { records, ranges: header.ranges, skeleton_hash: header.skeleton_hash })
    }
}

const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;
const TEST_STREAM: u64 = 0x7465_7374_0000_0000;

/// Independent generator for record `index` of a split.
fn record_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stream ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Deterministic train and test sets; the two splits draw from disjoint seed streams.
pub fn generate_dataset(
    skel: &Skeleton,
    prior: &MotionPrior,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    let make = |n: usize, stream: u64| -> Result<Vec<DatasetRecord>> {
        (0..n)
            .map(|i| {
                let mut rng = record_rng(seed, stream, i as u64);
                let (pose, _) = prior.sample(&mut rng);
                let beta = ShapeParams::new([rng.random_range(0.9..=1.1), rng.random_range(0.9..=1.1)])?;
                DatasetRecord::new(skel, pose, beta)
            })
            .collect()
    };
    let train = make(n_train, TRAIN_STREAM)?;
    let test = make(n_test, TEST_STREAM)?;
    let ranges = PoseRanges::from_records(&train);
    Ok((Dataset::new(skel, train, ranges.clone()), Dataset::new(skel, test, ranges)))
}

/// Adds `N(0, noise_scale^2)` to every axis-angle coordinate of `subset`.
pub fn ood_manipulate<R: Rng>(pose: &Pose, subset: &[usize], noise_scale: f64, rng: &mut R) -> Result<Pose> {
    if subset.is_empty() {
        return Err(FlagError::Invalid("OOD manipulation needs at least one joint".into()));
    }
    if !(noise_scale > 0.0) {
        return Err(FlagError::Invalid(format!("noise scale {noise_scale} must be positive")));
    }
    let n = Normal::new(0.0, noise_scale).expect("positive scale");
    let mut theta = pose.joints().to_vec();
    for &j in subset {
        if j >= theta.len() {
            return Err(FlagError::Dimension(format!("joint {j} out of range")));
        }
        let mut v = theta[j];
        v.iter_mut().for_each(|c| *c += n.sample(rng));
        theta[j] = canonicalize_axis_angle(v);
    }
    Pose::new(theta)
}

/// `k` distinct untracked joints.
pub fn random_untracked_joints<R: Rng>(skel: &Skeleton, k: usize, rng: &mut R) -> Vec<usize> {
    let pool = crate::lra::full_mask(skel);
    let mut out: Vec<usize> = sample_indices(rng, pool.len(), k.min(pool.len())).into_iter().map(|i| pool[i]).collect();
    out.sort_unstable();
    out
}

/// Pose-like noise: each coordinate uniform within the training range.
///
/// Joints whose draw exceeds a rotation of pi are redrawn, so the result
/// needs no canonicalization and stays inside the box.
pub fn ood_noise<R: Rng>(ranges: Option<&PoseRanges>, rng: &mut R) -> Result<Pose> {
    let r = ranges.ok_or_else(|| FlagError::Format("dataset carries no training ranges".into()))?;
    if r.min.len() != r.max.len() || r.min.len() % 3 != 0 {
        return Err(FlagError::Format("malformed pose ranges".into()));
    }
    let draw = |k: usize, rng: &mut R| {
        let (lo, hi) = (r.min[k], r.max[k]);
        if hi > lo { rng.random_range(lo..=hi) } else { lo }
    };
    let mut theta = Vec::with_capacity(r.min.len() / 3);
    for j in 0..r.min.len() / 3 {
        let mut v = [0.0; 3];
        for _ in 0..1000 {
            v = [draw(3 * j, rng), draw(3 * j + 1, rng), draw(3 * j + 2, rng)];
            if v.iter().map(|c| c * c).sum::<f64>() < std::f64::consts::PI * std::f64::consts::PI {
                break;
            }
        }
        theta.push(v);
    }
    Pose::new(theta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archetypes_are_distinct_and_bounded() {
        let skel = Skeleton::standard();
        let prior = MotionPrior::standard(&skel);
        assert!(prior.archetype_names().len() >= 4);
        for (_, p) in &prior.archetypes {
            assert!(p.iter().all(|v| crate::kinematics::rotation::norm(v) <= std::f64::consts::PI));
        }
    }

    #[test]
    fn compose_single_axis_matches_axis_angle() {
        let aa = compose(&[(Axis::Z, 0.7)]);
        assert!((aa[2] - 0.7).abs() < 1e-12 && aa[0].abs() < 1e-12);
    }
}
