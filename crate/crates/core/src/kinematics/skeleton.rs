use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::rotation::Vec3;
use crate::error::{FlagError, Result};

const STANDARD_SKELETON: &str = include_str!("../../assets/skeleton.toml");

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    version: u32,
    name: String,
    upper_body: Vec<String>,
    tracked: Vec<String>,
    curriculum: CurriculumFile,
    joint: Vec<JointFile>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CurriculumFile {
    legs: Vec<String>,
    spine: Vec<String>,
    arms: Vec<String>,
    root: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JointFile {
    name: String,
    #[serde(default)]
    parent: Option<String>,
    offset: [f64; 3],
    #[serde(default)]
    limb: bool,
}

/// Joint groups masked in order by the curriculum.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumGroups {
    pub legs: Vec<usize>,
    pub spine: Vec<usize>,
    pub arms: Vec<usize>,
    pub root: Vec<usize>,
}

/// Fixed-topology kinematic tree. Joints are stored in topological order.
#[derive(Clone, Debug)]
pub struct Skeleton {
    name: String,
    names: Vec<String>,
    parent: Vec<Option<usize>>,
    rest_offset: Vec<Vec3>,
    limb: Vec<bool>,
    upper_body: Vec<usize>,
    tracked: [usize; 3],
    curriculum: CurriculumGroups,
    hash: String,
}

impl Skeleton {
    /// The bundled 22-joint skeleton.
    pub fn standard() -> Self {
        Self::from_toml_str(STANDARD_SKELETON).expect("bundled skeleton is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: SkeletonFile =
            toml::from_str(text).map_err(|e| FlagError::Format(format!("skeleton: {e}")))?;
        if file.version != 1 {
            return Err(FlagError::Format(format!("unsupported skeleton version {}", file.version)));
        }
        let names: Vec<String> = file.joint.iter().map(|j| j.name.clone()).collect();
        let lookup = |n: &str| -> Result<usize> {
            names
                .iter()
                .position(|x| x == n)
                .ok_or_else(|| FlagError::Format(format!("unknown joint {n:?}")))
        };
        let mut parent = Vec::with_capacity(names.len());
        for (i, j) in file.joint.iter().enumerate() {
            match &j.parent {
                None => parent.push(None),
                Some(p) => {
                    let pi = lookup(p)?;
                    if pi >= i {
                        return Err(FlagError::Format(format!(
                            "joint {} precedes its parent {p}",
                            j.name
                        )));
                    }
                    parent.push(Some(pi));
                }
            }
        }
        if parent.iter().filter(|p| p.is_none()).count() != 1 || parent.first() != Some(&None) {
            return Err(FlagError::Format("skeleton needs exactly one root, listed first".into()));
        }
        let group = |g: &[String]| g.iter().map(|n| lookup(n)).collect::<Result<Vec<_>>>();
        let upper_body = group(&file.upper_body)?;
        let tracked_v = group(&file.tracked)?;
        if tracked_v.len() != 3 {
            return Err(FlagError::Format("exactly three tracked joints required".into()));
        }
        if !tracked_v.iter().all(|t| upper_body.contains(t)) {
            return Err(FlagError::Format("tracked joints must be upper-body joints".into()));
        }
        let curriculum = CurriculumGroups {
            legs: group(&file.curriculum.legs)?,
            spine: group(&file.curriculum.spine)?,
            arms: group(&file.curriculum.arms)?,
            root: group(&file.curriculum.root)?,
        };
        let tracked = [tracked_v[0], tracked_v[1], tracked_v[2]];
        let all_groups = [&curriculum.legs, &curriculum.spine, &curriculum.arms, &curriculum.root];
        if all_groups.iter().any(|g| g.iter().any(|j| tracked.contains(j))) {
            return Err(FlagError::Format("curriculum must never mask tracked joints".into()));
        }
        let rest_offset: Vec<Vec3> = file.joint.iter().map(|j| j.offset).collect();
        let limb: Vec<bool> = file.joint.iter().map(|j| j.limb).collect();

        let mut canon = String::new();
        for i in 0..names.len() {
            canon.push_str(&format!(
                "{}|{:?}|{:?}|{}\n",
                names[i], parent[i], rest_offset[i], limb[i]
            ));
        }
        canon.push_str(&format!("{upper_body:?}|{tracked:?}"));
        let hash = hex::encode(&Sha256::digest(canon.as_bytes())[..8]);

        Ok(Self {
            name: file.name,
            names,
            parent,
            rest_offset,
            limb,
            upper_body,
            tracked,
            curriculum,
            hash,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    /// Length of a flattened pose vector (joint-major, 3 per joint).
    pub fn pose_dim(&self) -> usize {
        3 * self.names.len()
    }

    pub fn joint_name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn rest_offset(&self, i: usize) -> Vec3 {
        self.rest_offset[i]
    }

    pub fn is_limb(&self, i: usize) -> bool {
        self.limb[i]
    }

    pub fn upper_body(&self) -> &[usize] {
        &self.upper_body
    }

    pub fn all_joints(&self) -> Vec<usize> {
        (0..self.names.len()).collect()
    }

    /// (head, left hand, right hand).
    pub fn tracked(&self) -> [usize; 3] {
        self.tracked
    }

    pub fn curriculum(&self) -> &CurriculumGroups {
        &self.curriculum
    }

    /// Short content hash; checkpoints and datasets record it.
    pub fn hash(&self) -> &str {
        &self.hash
    }
}
