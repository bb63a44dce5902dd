use flag_core::checkpoint::{Checkpoint, Manifest, Model, MAGIC};
use flag_core::flow::{FlowConfig, FlowModel};
use flag_core::kinematics::{Skeleton, COND_DIM};
use flag_core::lra::{Lra, LraConfig};
use flag_core::training::MlpBaseline;
use flag_core::ErrorClass;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn flow() -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    FlowModel::new(66, COND_DIM, &FlowConfig { blocks: 2, hidden: 8, taps: vec![1] }, &mut rng).unwrap()
}

fn manifest(bytes: &[u8]) -> Manifest {
    let len = u64::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap()) as usize;
    serde_json::from_slice(&bytes[MAGIC.len() + 8..MAGIC.len() + 8 + len]).unwrap()
}

#[test]
fn save_load_save_is_byte_identical() {
    let skel = Skeleton::standard();
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lra_cfg = LraConfig { embed: 8, layers: 1, heads: 2, feedforward: 16, groups: 2, categories: 4, head_hidden: 8, tau: 1.0 };
    let models = [
        Checkpoint::new(Model::Flow(flow()), &skel, None),
        Checkpoint::new(Model::Lra(Lra::new(&skel, COND_DIM, &lra_cfg, &mut rng).unwrap()), &skel, Some("ab".into())),
        Checkpoint::new(Model::Mlp(MlpBaseline::new(COND_DIM, 8, 66, &mut rng)), &skel, Some("cd".into())),
    ];
    for (i, ck) in models.iter().enumerate() {
        let a = dir.path().join(format!("{i}a.ckpt"));
        let b = dir.path().join(format!("{i}b.ckpt"));
        ck.save(&a).unwrap();
        let loaded = Checkpoint::load(&a, &skel).unwrap();
        assert_eq!(&loaded, ck);
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }
}

#[test]
fn manifest_shapes_cover_the_payload() {
    let skel = Skeleton::standard();
    let bytes = Checkpoint::new(Model::Flow(flow()), &skel, None).to_bytes();
    let m = manifest(&bytes);
    let len = u64::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap()) as usize;
    let elements: usize = m.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    assert_eq!(elements * 8, bytes.len() - MAGIC.len() - 8 - len);
    assert_eq!(m.skeleton_hash, skel.hash());
}

#[test]
fn corrupted_files_are_data_errors() {
    let skel = Skeleton::standard();
    let good = Checkpoint::new(Model::Flow(flow()), &skel, None).to_bytes();
    let mut magic = good.clone();
    magic[0] = b'X';
    let truncated = good[..good.len() - 3].to_vec();
    let mut trailing = good.clone();
    trailing.extend_from_slice(&[0; 8]);
    let mut length = good.clone();
    length[MAGIC.len()..MAGIC.len() + 8].copy_from_slice(&u64::MAX.to_le_bytes());
    for bad in [magic, truncated, trailing, length, Vec::new()] {
        let e = Checkpoint::from_bytes(&bad, &skel).unwrap_err();
        assert_eq!(e.class(), ErrorClass::Data, "{e}");
    }
}

#[test]
fn non_finite_payload_is_rejected() {
    let skel = Skeleton::standard();
    let mut bytes = Checkpoint::new(Model::Flow(flow()), &skel, None).to_bytes();
    let n = bytes.len();
    bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    assert!(Checkpoint::from_bytes(&bytes, &skel).is_err());
}

#[test]
fn skeleton_hash_is_verified() {
    let skel = Skeleton::standard();
    let mut ck = Checkpoint::new(Model::Flow(flow()), &skel, None);
    ck.skeleton_hash = "0".repeat(64);
    let e = Checkpoint::from_bytes(&ck.to_bytes(), &skel).unwrap_err();
    assert_eq!(e.class(), ErrorClass::Data);
}

#[test]
fn companion_models_check_their_flow() {
    let skel = Skeleton::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ck = Checkpoint::new(Model::Mlp(MlpBaseline::new(COND_DIM, 4, 66, &mut rng)), &skel, Some("aa".into()));
    assert!(ck.clone().into_mlp("aa").is_ok());
    assert_eq!(ck.clone().into_mlp("bb").unwrap_err().class(), ErrorClass::Data);
    assert!(ck.into_flow().is_err());
}
