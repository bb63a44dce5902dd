use flag_core::datagen::{generate_dataset, Dataset, MotionPrior};
use flag_core::eval::*;
use flag_core::flow::{FlowConfig, FlowModel};
use flag_core::kinematics::{Skeleton, COND_DIM};
use flag_core::lra::{Lra, LraConfig};
use flag_core::nn::Module;
use flag_core::refine::{LbfgsConfig, RefineObjective};
use flag_core::training::oracle_latents;
use flag_core::ErrorClass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup(n: usize) -> (Skeleton, Dataset, FlowModel, Lra) {
    let skel = Skeleton::standard();
    let prior = MotionPrior::standard(&skel);
    let (_, test) = generate_dataset(&skel, &prior, 50, n, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut flow = FlowModel::new(66, COND_DIM, &FlowConfig { blocks: 2, hidden: 8, taps: vec![] }, &mut rng).unwrap();
    flow.visit_mut("", &mut |name, a| {
        if !name.starts_with("cond_") {
            a.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
        }
    });
    let cfg = LraConfig { embed: 8, layers: 1, heads: 2, feedforward: 16, groups: 2, categories: 4, head_hidden: 8, tau: 1.0 };
    let lra = Lra::new(&skel, COND_DIM, &cfg, &mut rng).unwrap();
    (skel, test, flow, lra)
}

#[test]
fn csv_has_the_fixed_column_order() {
    let mut r = MetricsReport::new(7, "abc");
    r.push("mpjpe_full", "mu", 1.5, 10).unwrap();
    r.push("nll", "gt", -2.25, 3).unwrap();
    assert_eq!(
        r.to_csv().unwrap(),
        "metric,subset,value,count,seed,config_hash\nmpjpe_full,mu,1.5,10,7,abc\nnll,gt,-2.25,3,7,abc\n"
    );
    assert_eq!(r.push("x", "y", f64::NAN, 1).unwrap_err().class(), ErrorClass::Numeric);
}

#[test]
fn summaries_match_hand_values() {
    let s = summarize(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    // sample variance 5/3, se = sqrt(5/12)
    assert!((s.se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    let g = paired_gap(&[3.0, 5.0], &[1.0, 2.0]).unwrap();
    assert_eq!(g.mean, 2.5);
}

#[test]
fn relative_difference_follows_the_formula() {
    assert_eq!(relative_difference(4.0, 4.0).unwrap(), 0.0);
    assert_eq!(relative_difference(10.0, 5.0).unwrap(), 0.5);
    assert_eq!(relative_difference(5.0, 10.0).unwrap(), 0.5);
    assert!(relative_difference(0.0, -3.0).is_err());
}

#[test]
fn cosine_distance_extremes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
    let neg: Vec<f64> = z.iter().map(|v| -v).collect();
    let (same, zero) = cosine_distance(&z, &z, 4).unwrap();
    assert!(same.abs() < 1e-12);
    assert_eq!(zero, 0);
    assert!((cosine_distance(&neg, &z, 4).unwrap().0 - 2.0).abs() < 1e-12);
    let (d, zero) = cosine_distance(&vec![0.0; 40], &z, 4).unwrap();
    assert_eq!((d, zero), (1.0, 10));
    assert!(cosine_distance(&z[..8], &z, 4).is_err());
}

#[test]
fn sinkhorn_vanishes_on_identical_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z: Vec<f64> = (0..5 * 60).map(|_| rng.random_range(-2.0..2.0)).collect();
    let cfg = SinkhornConfig::default();
    assert!(sinkhorn_distance(&z, &z, 5, &cfg).unwrap() < 1e-9);
    let shifted: Vec<f64> = z.iter().map(|v| v + 1.0).collect();
    assert!(sinkhorn_distance(&shifted, &z, 5, &cfg).unwrap() > 0.1);
}

#[test]
fn sinkhorn_limits_on_two_points() {
    // two points each; the optimal plan pairs them crosswise, cost (0.1^2 + 0.1^2)/2
    let a = [0.0, 1.0];
    let b = [1.1, 0.1];
    let c = sinkhorn_divergence(&a, &b, 1, 1e-3, 200).unwrap();
    assert!((c - 0.01).abs() < 1e-9, "{c}");
    // a permutation plan pays KL = ln 2 against the product coupling
    let ot = entropic_ot(&a, &b, 1, 1e-3, 200).unwrap();
    assert!((ot - 0.01 - 1e-3 * 2f64.ln()).abs() < 1e-9, "{ot}");
    // heavy regularization tends to the product coupling: the divergence
    // becomes the squared distance between the means
    let c = sinkhorn_divergence(&a, &b, 1, 1e6, 200).unwrap();
    assert!((c - 0.01).abs() < 1e-6, "{c}");
    let ot = entropic_ot(&a, &b, 1, 1e6, 200).unwrap();
    assert!((ot - (1.21 + 0.01 + 0.01 + 0.81) / 4.0).abs() < 1e-6, "{ot}");
}

#[test]
fn planted_oracle_latents_decode_exactly() {
    let (skel, data, flow, _) = setup(12);
    let z = oracle_latents(&flow, &data).unwrap();
    let poses = decode(&flow, &z, &data.conditions()).unwrap();
    let e = pose_errors(&skel, &poses, &data).unwrap();
    assert!(e.full.iter().chain(&e.upper).all(|v| *v < 1e-8));
}

#[test]
fn floor_spread_gives_zero_uncertainty() {
    let (skel, data, flow, mut lra) = setup(6);
    lra.visit_mut("", &mut |name, a| {
        if name.starts_with("sigma_head") {
            let bias = name.ends_with("bias");
            a.data_mut().iter_mut().for_each(|v| *v = if bias { -60.0 } else { 0.0 });
        }
    });
    let models = Models { flow: &flow, lra: Some(&lra), mlp: None };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ev = evaluate(&skel, models, &data, LatentRule::Sample(4), Hands::Both, &mut rng).unwrap();
    let std = ev.joint_std.unwrap();
    assert_eq!(std.len(), 22);
    assert!(std.iter().all(|s| *s < 1e-4), "{std:?}");
    let mu = evaluate(&skel, models, &data, LatentRule::Mu, Hands::Both, &mut rng).unwrap();
    for (a, b) in ev.errors.full.iter().zip(&mu.errors.full) {
        assert!((a - b).abs() < 1e-4);
    }
}

#[test]
fn rules_needing_missing_models_are_usage_errors() {
    let (skel, data, flow, _) = setup(3);
    let models = Models { flow: &flow, lra: None, mlp: None };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for rule in [LatentRule::Mu, LatentRule::Mlp, LatentRule::Sample(2)] {
        let e = evaluate(&skel, models, &data, rule, Hands::Both, &mut rng).unwrap_err();
        assert_eq!(e.class(), ErrorClass::Usage);
    }
    assert!(evaluate(&skel, models, &data, LatentRule::Zero, Hands::Both, &mut rng).is_ok());
}

#[test]
fn parsing_of_rules_and_hands() {
    assert_eq!("sample-8".parse::<LatentRule>().unwrap(), LatentRule::Sample(8));
    assert!("sample-0".parse::<LatentRule>().is_err());
    assert_eq!("none".parse::<Hands>().unwrap().hidden(), [true, true]);
    assert_eq!("left".parse::<Hands>().unwrap().hidden(), [false, true]);
    assert!("feet".parse::<Hands>().is_err());
}

#[test]
fn identical_ood_set_has_zero_difference() {
    let (skel, data, flow, _) = setup(8);
    let sets = OodSets { manipulated: data.poses(), noise: data.poses() };
    let r = ood_eval(&flow, &data, &sets).unwrap();
    assert_eq!(r.rd_manipulated, 0.0);
    assert_eq!(r.nll_gt, r.nll_noise);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // the test split carries the training ranges
    let built = build_ood_sets(&skel, &data, data.ranges.as_ref(), 4, 0.1, &mut rng).unwrap();
    assert_eq!(built.noise.len(), data.poses().len());
    let changed = built.manipulated.chunks(3).zip(data.poses().chunks(3)).filter(|(a, b)| a != b).count();
    assert_eq!(changed, 4 * data.len());
    assert!(build_ood_sets(&skel, &data, None, 4, 0.1, &mut rng).is_err());
}

fn row(space: &str, init: &str, instance: usize, iteration: usize, v: f64) -> TraceRow {
    TraceRow { space: space.into(), init_rule: init.into(), instance, iteration, mpjpe_upper: v, mpjpe_full: 2.0 * v }
}

#[test]
fn report_orders_and_averages_rows() {
    let traces = vec![
        row("pose", "mu", 0, 2, 3.0),
        row("latent", "zero", 0, 0, 5.0),
        row("latent", "mu", 1, 2, 1.0),
        row("latent", "mu", 0, 2, 2.0),
        row("latent", "mu", 0, 0, 4.0),
    ];
    let r = report(&traces).unwrap();
    let keys: Vec<(&str, &str, usize)> = r.iter().map(|x| (x.space.as_str(), x.init_rule.as_str(), x.iteration)).collect();
    assert_eq!(keys, vec![("latent", "mu", 0), ("latent", "mu", 2), ("latent", "zero", 0), ("pose", "mu", 2)]);
    assert_eq!((r[1].mpjpe_upper, r[1].mpjpe_full, r[1].count), (1.5, 3.0, 2));
    assert!(report(&[]).is_err());
}

#[test]
fn constant_trace_gives_constant_rows() {
    let traces: Vec<TraceRow> = TRACE_ITERATIONS.iter().map(|&k| row("latent", "mu", 0, k, 2.5)).collect();
    assert!(report(&traces).unwrap().iter().all(|r| r.mpjpe_upper == 2.5));
}

#[test]
fn traces_round_trip_and_reject_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let traces = vec![row("latent", "mu", 0, 0, 1.25), row("pose", "mu", 3, 50, 0.5)];
    write_traces(&path, &traces).unwrap();
    assert_eq!(read_traces(&path).unwrap(), traces);
    std::fs::write(&path, "space,init_rule\nlatent\n").unwrap();
    assert_eq!(read_traces(&path).unwrap_err().class(), ErrorClass::Data);
}

#[test]
fn refinement_traces_cover_every_variant() {
    let (skel, data, flow, lra) = setup(2);
    let cfg = LbfgsConfig { max_iterations: 5, ..LbfgsConfig::default() };
    let rows = refinement_traces(&skel, &flow, &lra, &data, 2, &RefineObjective::default(), &cfg).unwrap();
    assert_eq!(rows.len(), 2 * 3 * TRACE_ITERATIONS.len());
    let r = report(&rows).unwrap();
    assert_eq!(r.len(), 3 * TRACE_ITERATIONS.len());
    assert!(r.iter().all(|x| x.count == 2 && x.mpjpe_full.is_finite()));
}

#[test]
fn hidden_hands_leave_no_trace_in_generation() {
    let (skel, data, mut flow, lra) = setup(5);
    let conds = data.conditions();
    flow.fit_standardizer(&conds).unwrap();
    let both = hide_hands(&flow, &conds, Hands::Both);
    assert_eq!(both, conds);
    let none = hide_hands(&flow, &conds, Hands::None);
    let left = hide_hands(&flow, &conds, Hands::Left);
    for r in 0..data.len() {
        let (a, b) = (&conds[r * COND_DIM..(r + 1) * COND_DIM], &none[r * COND_DIM..(r + 1) * COND_DIM]);
        // head and shape untouched, both hand spans at the training mean
        assert_eq!(a[..9], b[..9]);
        assert_eq!(a[27..], b[27..]);
        assert_eq!(b[9..27], flow.cond_mean.data()[9..27]);
        // only the left hand visible: the right span is imputed
        assert_eq!(left[r * COND_DIM + 9..r * COND_DIM + 18], a[9..18]);
        assert_eq!(left[r * COND_DIM + 18..r * COND_DIM + 27], flow.cond_mean.data()[18..27]);
    }

    // moving the hidden hands does not change the decoded poses
    let mut moved = data.clone();
    for rec in &mut moved.records {
        for k in [1, 2] {
            rec.hmd.joints[k] = [0.7; 9];
        }
    }
    let models = Models { flow: &flow, lra: Some(&lra), mlp: None };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = evaluate(&skel, models, &data, LatentRule::Mu, Hands::None, &mut rng).unwrap();
    let regions = latent_regions(&lra, &hide_hands(&flow, &moved.conditions(), Hands::None), Hands::None).unwrap();
    let z: Vec<f64> = regions.into_iter().flat_map(|r| r.mu).collect();
    let poses = decode(&flow, &z, &hide_hands(&flow, &moved.conditions(), Hands::None)).unwrap();
    assert_eq!(pose_errors(&skel, &poses, &data).unwrap(), a.errors);
}
