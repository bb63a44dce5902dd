use diffmath::{Array, Tape};
use flag_core::checkpoint::{Checkpoint, Model};
use flag_core::datagen::{generate_dataset, Dataset, MotionPrior};
use flag_core::flow::FlowConfig;
use flag_core::kinematics::{Skeleton, COND_DIM};
use flag_core::lra::{full_mask, gumbel_noise, lra_loss, mjp_loss, rec_loss, LraConfig, LraInput};
use flag_core::nn::Module;
use flag_core::training::*;
use flag_core::ErrorClass;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-3,
        batch_size: 64,
        flow_epochs: 1,
        lra_epochs: 1,
        mlp_epochs: 5,
        finetune_epochs: 1,
        validation_fraction: 0.1,
        mlp_hidden: 32,
        flow: FlowConfig { blocks: 4, hidden: 24, taps: vec![2] },
        lra: LraConfig {
            embed: 16,
            layers: 1,
            heads: 2,
            feedforward: 32,
            groups: 4,
            categories: 8,
            head_hidden: 32,
            tau: 1.0,
        },
        ..TrainConfig::default()
    }
}

fn tiny_data(n: usize) -> (Skeleton, Dataset) {
    let skel = Skeleton::standard();
    let prior = MotionPrior::standard(&skel);
    let (train, _) = generate_dataset(&skel, &prior, n, 0, 5).unwrap();
    (skel, train)
}

fn flow_hash(f: &flag_core::flow::FlowModel, skel: &Skeleton) -> String {
    Checkpoint::new(Model::Flow(f.clone()), skel, None).hash()
}

#[test]
fn adam_first_step_moves_by_the_learning_rate() {
    let mut adam = Adam::default();
    let mut p = vec![0.0];
    adam.step(&mut [&mut p], &[&[1.0]], 0.1).unwrap();
    // m_hat = 1, v_hat = 1, so the update is lr / (1 + eps)
    assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    assert_eq!(adam.steps(), 1);
}

#[test]
fn adam_second_step_follows_the_recurrence() {
    let mut adam = Adam::default();
    let mut p = vec![1.0];
    adam.step(&mut [&mut p], &[&[2.0]], 0.01).unwrap();
    adam.step(&mut [&mut p], &[&[-1.0]], 0.01).unwrap();
    let m = 0.9 * (0.1 * 2.0) + 0.1 * -1.0;
    let v = 0.999 * (0.001 * 4.0) + 0.001 * 1.0;
    let m_hat = m / (1.0 - 0.81);
    let v_hat = v / (1.0 - 0.999f64.powi(2));
    let expected = 1.0 - 0.01 * 2.0 / (2.0 + 1e-8) - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
    assert!((p[0] - expected).abs() < 1e-14, "{} vs {expected}", p[0]);
}

#[test]
fn adam_minimizes_a_parabola() {
    let mut adam = Adam::default();
    let mut x = vec![5.0];
    for _ in 0..2000 {
        let g = [2.0 * x[0]];
        adam.step(&mut [&mut x], &[&g], 0.05).unwrap();
    }
    assert!(x[0].abs() < 1e-3, "{}", x[0]);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut adam = Adam::default();
    let mut p = vec![0.3, -2.0];
    for _ in 0..5 {
        adam.step(&mut [&mut p], &[&[0.0, 0.0]], 0.1).unwrap();
    }
    assert_eq!(p, vec![0.3, -2.0]);
}

#[test]
fn adam_rejects_bad_gradients() {
    let mut adam = Adam::default();
    let mut p = vec![0.0];
    let e = adam.step(&mut [&mut p], &[&[f64::NAN]], 0.1).unwrap_err();
    assert_eq!(e.class(), ErrorClass::Numeric);
    assert!(adam.step(&mut [&mut p], &[&[1.0, 2.0]], 0.1).is_err());
    assert_eq!(p, vec![0.0]);
}

#[test]
fn config_parses_nested_fields_and_rejects_unknown_keys() {
    let cfg = TrainConfig::from_toml_str(
        "learning_rate = 0.001\nbatch_size = 32\n[flow]\nblocks = 4\nhidden = 16\ntaps = [2]\n[lra]\ngroups = 8\n",
    )
    .unwrap();
    assert_eq!(cfg.batch_size, 32);
    assert_eq!(cfg.flow.blocks, 4);
    assert_eq!(cfg.lra.groups, 8);
    assert_eq!(cfg.lambda_mjp, 1.0);
    for bad in ["learnin_rate = 0.1", "[flow]\nblock = 3", "hand_dropout = 1.5", "lambda_rec = -1.0", "[flow]\ntaps = [9]"] {
        let e = TrainConfig::from_toml_str(bad).unwrap_err();
        assert_eq!(e.class(), ErrorClass::Usage, "{bad}");
    }
}

#[test]
fn default_config_matches_the_documented_weights() {
    let c = TrainConfig::default();
    assert_eq!([c.lambda_nll, c.lambda_mjp, c.lambda_rec, c.lambda_lra], [1.0; 4]);
    assert_eq!([c.alpha_nll, c.alpha_rec, c.alpha_reg], [1.0, 0.5, 0.25]);
    assert_eq!(c.learning_rate, 1e-4);
    assert_eq!(c.hand_dropout, 0.2);
}

#[test]
fn one_flow_epoch_lowers_nll_and_is_deterministic() {
    let (skel, data) = tiny_data(400);
    let cfg = tiny_config();
    let mut logged = 0;
    let run = train_flow(&cfg, &data, &mut |_| logged += 1).unwrap();
    assert_eq!(logged, 1);
    let after = chunked_nll(&run.model, &data.poses(), &data.conditions(), false).unwrap();
    assert!(after < run.initial_nll, "{after} vs {}", run.initial_nll);
    assert!(run.history[0].validation_nll.unwrap().is_finite());
    let again = train_flow(&cfg, &data, &mut |_| {}).unwrap();
    assert_eq!(flow_hash(&run.model, &skel), flow_hash(&again.model, &skel));
    let off = TrainConfig { intermediate_supervision: false, ..cfg };
    let plain = train_flow(&off, &data, &mut |_| {}).unwrap();
    assert_ne!(flow_hash(&run.model, &skel), flow_hash(&plain.model, &skel));
}

#[test]
fn flow_training_rejects_empty_data() {
    let (skel, _) = tiny_data(1);
    let empty = Dataset::new(&skel, Vec::new(), None);
    assert!(train_flow(&tiny_config(), &empty, &mut |_| {}).is_err());
}

#[test]
fn region_training_leaves_the_flow_untouched() {
    let (skel, data) = tiny_data(200);
    let cfg = tiny_config();
    let flow = train_flow(&cfg, &data, &mut |_| {}).unwrap().model;
    let before = flow_hash(&flow, &skel);
    let run = train_lra(&cfg, &skel, &data, &flow, &mut |_| {}).unwrap();
    assert_eq!(flow_hash(&flow, &skel), before);
    assert_eq!(run.history.len(), 1);
    assert!(run.history[0].loss.is_finite());
    let again = train_lra(&cfg, &skel, &data, &flow, &mut |_| {}).unwrap();
    let h = |l: &flag_core::lra::Lra| Checkpoint::new(Model::Lra(l.clone()), &skel, Some(before.clone())).hash();
    assert_eq!(h(&run.model), h(&again.model));
}

#[test]
fn hand_dropout_frequency_matches_p() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let masks = hand_dropout_mask(10_000, 0.2, &mut rng);
    for side in 0..2 {
        let f = masks.iter().filter(|m| m[side]).count() as f64 / masks.len() as f64;
        assert!((f - 0.2).abs() < 0.01, "{f}");
    }
    assert!(hand_dropout_mask(100, 0.0, &mut rng).iter().all(|m| !m[0] && !m[1]));
}

#[test]
fn finetuned_model_handles_hidden_hands() {
    let (skel, data) = tiny_data(200);
    let cfg = tiny_config();
    let flow = train_flow(&cfg, &data, &mut |_| {}).unwrap().model;
    let lra = train_lra(&cfg, &skel, &data, &flow, &mut |_| {}).unwrap().model;
    let tuned = finetune_hand_dropout(&cfg, &skel, &data, &flow, &lra, 0.2, 1, &mut |_| {}).unwrap().model;
    let conds = data.conditions();
    let n = data.len();
    let input = LraInput::from_conditions(&tuned, &conds, &vec![[true; 2]; n]);
    let inf = tuned.infer(&input).unwrap();
    let mu: Vec<f64> = inf.regions.iter().flat_map(|r| r.mu.clone()).collect();
    let poses = flow.forward(&mu, &conds, n).unwrap();
    assert!(poses.iter().all(|v| v.is_finite()));
    assert!(finetune_hand_dropout(&cfg, &skel, &data, &flow, &lra, 1.5, 1, &mut |_| {}).is_err());
}

#[test]
fn zero_weight_baseline_predicts_its_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = MlpBaseline::new(COND_DIM, 8, 5, &mut rng);
    let bias = [0.5, -1.0, 2.0, 0.0, 3.0];
    let last = m.net.layers.len() - 1;
    m.visit_mut("", &mut |name, a| {
        if name == format!("net.{last}.bias") {
            a.data_mut().copy_from_slice(&bias);
        } else if name.ends_with("weight") || name.ends_with("bias") {
            a.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    });
    let raw: Vec<f64> = (0..3 * COND_DIM).map(|i| i as f64 * 0.1).collect();
    let out = m.predict(&raw);
    for r in 0..3 {
        assert_eq!(&out[r * 5..r * 5 + 5], &bias);
    }
}

#[test]
fn baseline_loss_decreases_over_the_first_epochs() {
    let (skel, data) = tiny_data(400);
    let cfg = tiny_config();
    let flow = train_flow(&cfg, &data, &mut |_| {}).unwrap().model;
    let run = train_mlp_baseline(&cfg, &skel, &data, &flow, &mut |_, _| {}).unwrap();
    assert_eq!(run.history.len(), 5);
    // smoothed over adjacent pairs
    let s: Vec<f64> = run.history.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
    assert!(s.windows(2).all(|w| w[1] < w[0]), "{:?}", run.history);
}

#[test]
fn combined_loss_is_the_weighted_sum_of_its_terms() {
    let (skel, data) = tiny_data(16);
    let cfg = TrainConfig { lambda_mjp: 0.7, lambda_rec: 1.3, lambda_lra: 0.4, ..tiny_config() };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let flow = flag_core::flow::FlowModel::new(66, COND_DIM, &cfg.flow, &mut rng).unwrap();
    let lra = flag_core::lra::Lra::new(&skel, COND_DIM, &cfg.lra, &mut rng).unwrap();
    let n = data.len();
    let conds = data.conditions();
    let tokens = joint_tokens(&skel, &data).unwrap();
    let poses = data.poses();
    let z_star = oracle_latents(&flow, &data).unwrap();
    let mut input = LraInput::from_conditions(&lra, &conds, &vec![[false; 2]; n]);
    input.tokens = tokens.clone();
    for r in 0..n {
        for j in 0..skel.joint_count() {
            input.masked[r * skel.joint_count() + j] = full_mask(&skel).contains(&j);
        }
    }
    let gumbel = gumbel_noise(n * cfg.lra.groups * cfg.lra.categories, &mut rng);

    let mut t = Tape::new();
    let bound = lra.bind(&mut t, true, &mut Vec::new());
    let terms = lra_objective(&mut t, &bound, &cfg, &input, &tokens, &poses, &z_star, &gumbel).unwrap();
    let total = t.value(terms.total).item().unwrap();

    let mut u = Tape::new();
    let b2 = lra.bind(&mut u, true, &mut Vec::new());
    let out = b2.forward(&mut u, &input, Some(&gumbel), false).unwrap();
    let mjp = mjp_loss(&mut u, out.joint_pred, &tokens, &input.masked, n).unwrap();
    let rec = rec_loss(&mut u, out.pose.unwrap(), &poses).unwrap();
    let reg = lra_loss(&mut u, out.mu, out.sigma, &z_star, &cfg.region_weights()).unwrap();
    let expected = 0.7 * u.value(mjp).item().unwrap() + 1.3 * u.value(rec).item().unwrap()
        + 0.4 * u.value(reg).item().unwrap();
    assert!((total - expected).abs() < 1e-10, "{total} vs {expected}");
}

#[test]
fn clipping_rescales_to_the_bound() {
    let mut g = vec![Array::vector(vec![3.0, 4.0]).unwrap(), Array::vector(vec![12.0]).unwrap()];
    let norm = clip_global_norm(&mut g, 6.5);
    assert!((norm - 13.0).abs() < 1e-12);
    assert!((g[0].data()[0] - 1.5).abs() < 1e-12);
    assert!((g[1].data()[0] - 6.0).abs() < 1e-12);
}
