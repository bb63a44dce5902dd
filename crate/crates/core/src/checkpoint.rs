//! Binary checkpoints: a magic string, a little-endian `u64` manifest length,
//! the JSON manifest, then every tensor as little-endian `f64` in visit order.

use std::path::Path;

use diffmath::Array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FlagError, Result};
use crate::flow::{FlowConfig, FlowModel};
use crate::kinematics::Skeleton;
use crate::lra::{Lra, LraConfig};
use crate::nn::Module;
use crate::training::MlpBaseline;

pub const MAGIC: &[u8; 9] = b"FLAGCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Flow { config: FlowConfig, pose_dim: usize, cond_dim: usize },
    Lra { config: LraConfig, cond_dim: usize },
    Mlp { hidden: usize, latent: usize, cond_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub model: ModelSpec,
    pub skeleton_hash: String,
    /// Hash of the flow checkpoint an approximator or baseline was trained against.
    pub flow_hash: Option<String>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Flow(FlowModel),
    Lra(Lra),
    Mlp(MlpBaseline),
}

impl Model {
    fn spec(&self) -> ModelSpec {
        match self {
            Model::Flow(f) => ModelSpec::Flow { config: f.config.clone(), pose_dim: f.pose_dim(), cond_dim: f.cond_dim() },
            Model::Lra(l) => ModelSpec::Lra { config: l.config.clone(), cond_dim: l.cond_dim() },
            Model::Mlp(m) => ModelSpec::Mlp {
                hidden: m.net.layers[0].output_dim(),
                latent: m.net.output_dim(),
                cond_dim: m.net.input_dim(),
            },
        }
    }

    fn module(&self) -> &dyn Module {
        match self {
            Model::Flow(f) => f,
            Model::Lra(l) => l,
            Model::Mlp(m) => m,
        }
    }

    fn module_mut(&mut self) -> &mut dyn Module {
        match self {
            Model::Flow(f) => f,
            Model::Lra(l) => l,
            Model::Mlp(m) => m,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Flow(_) => "flow",
            Model::Lra(_) => "lra",
            Model::Mlp(_) => "mlp",
        }
    }
}

/// A loaded checkpoint with its manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub skeleton_hash: String,
    pub flow_hash: Option<String>,
}

impl Checkpoint {
    pub fn new(model: Model, skel: &Skeleton, flow_hash: Option<String>) -> Self {
        Self { model, skeleton_hash: skel.hash().to_string(), flow_hash }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let module = self.model.module();
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        module.visit("", &mut |name, a| {
            tensors.push(TensorEntry { name, shape: a.shape().to_vec() });
            for v in a.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        });
        let manifest = Manifest {
            model: self.model.spec(),
            skeleton_hash: self.skeleton_hash.clone(),
            flow_hash: self.flow_hash.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("serializable manifest");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn from_bytes(bytes: &[u8], skel: &Skeleton) -> Result<Self> {
        let bad = |m: &str| FlagError::Format(format!("checkpoint: {m}"));
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let mut len = [0u8; 8];
        len.copy_from_slice(&bytes[MAGIC.len()..MAGIC.len() + 8]);
        let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("manifest too large"))?;
        let start = MAGIC.len() + 8;
        let end = start.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[start..end]).map_err(|e| FlagError::Format(format!("checkpoint manifest: {e}")))?;
        if manifest.skeleton_hash != skel.hash() {
            return Err(FlagError::HashMismatch { expected: skel.hash().into(), found: manifest.skeleton_hash });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = match &manifest.model {
            ModelSpec::Flow { config, pose_dim, cond_dim } => Model::Flow(FlowModel::new(*pose_dim, *cond_dim, config, &mut rng)?),
            ModelSpec::Lra { config, cond_dim } => Model::Lra(Lra::new(skel, *cond_dim, config, &mut rng)?),
            ModelSpec::Mlp { hidden, latent, cond_dim } => {
                if *hidden == 0 || *latent == 0 || *cond_dim == 0 {
                    return Err(bad("empty baseline dimensions"));
                }
                Model::Mlp(MlpBaseline::new(*cond_dim, *hidden, *latent, &mut rng))
            }
        };
        let payload = &bytes[end..];
        let mut offset = 0usize;
        let mut index = 0usize;
        let mut err: Option<FlagError> = None;
        model.module_mut().visit_mut("", &mut |name, a| {
            if err.is_some() {
                return;
            }
            let Some(entry) = manifest.tensors.get(index) else {
                err = Some(bad("fewer tensors than the model needs"));
                return;
            };
            index += 1;
            if entry.name != name || entry.shape != a.shape() {
                err = Some(FlagError::Format(format!(
                    "checkpoint tensor {} {:?} does not match model tensor {name} {:?}",
                    entry.name,
                    entry.shape,
                    a.shape()
                )));
                return;
            }
            let need = a.len() * 8;
            if offset + need > payload.len() {
                err = Some(bad("truncated payload"));
                return;
            }
            for (k, v) in a.data_mut().iter_mut().enumerate() {
                let mut b = [0u8; 8];
                b.copy_from_slice(&payload[offset + 8 * k..offset + 8 * k + 8]);
                *v = f64::from_le_bytes(b);
            }
            offset += need;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if index != manifest.tensors.len() || offset != payload.len() {
            return Err(bad("trailing tensors or bytes"));
        }
        let mut finite = true;
        model.module().visit("", &mut |_, a: &Array| finite &= a.data().iter().all(|v| v.is_finite()));
        if !finite {
            return Err(FlagError::Numeric("checkpoint holds non-finite values".into()));
        }
        Ok(Self { model, skeleton_hash: manifest.skeleton_hash, flow_hash: manifest.flow_hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| FlagError::io(path, e))
    }

    pub fn load(path: &Path, skel: &Skeleton) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| FlagError::io(path, e))?;
        Self::from_bytes(&bytes, skel)
    }

    pub fn into_flow(self) -> Result<FlowModel> {
        match self.model {
            Model::Flow(f) => Ok(f),
            other => Err(FlagError::Format(format!("expected a flow checkpoint, found {}", other.kind()))),
        }
    }

    /// The approximator, after checking it was trained against `flow_hash`.
    pub fn into_lra(self, flow_hash: &str) -> Result<Lra> {
        self.check_flow(flow_hash)?;
        match self.model {
            Model::Lra(l) => Ok(l),
            other => Err(FlagError::Format(format!("expected an approximator checkpoint, found {}", other.kind()))),
        }
    }

    pub fn into_mlp(self, flow_hash: &str) -> Result<MlpBaseline> {
        self.check_flow(flow_hash)?;
        match self.model {
            Model::Mlp(m) => Ok(m),
            other => Err(FlagError::Format(format!("expected a baseline checkpoint, found {}", other.kind()))),
        }
    }

    fn check_flow(&self, flow_hash: &str) -> Result<()> {
        match &self.flow_hash {
            Some(h) if h == flow_hash => Ok(()),
            Some(h) => Err(FlagError::HashMismatch { expected: flow_hash.into(), found: h.clone() }),
            None => Err(FlagError::Format("checkpoint does not record its flow".into())),
        }
    }
}
