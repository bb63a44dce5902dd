use flag_core::datagen::{generate_dataset, ood_manipulate, ood_noise, random_untracked_joints, Dataset, MotionPrior};
use flag_core::kinematics::{hmd_from_pose, Skeleton};
use flag_core::ErrorClass;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (Skeleton, MotionPrior) {
    let skel = Skeleton::standard();
    let prior = MotionPrior::standard(&skel);
    (skel, prior)
}

#[test]
fn same_seed_gives_identical_files() {
    let (skel, prior) = setup();
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in 0..2 {
        let (train, test) = generate_dataset(&skel, &prior, 50, 20, 7).unwrap();
        let a = dir.path().join(format!("train{run}.jsonl"));
        let b = dir.path().join(format!("test{run}.jsonl"));
        train.write(&a).unwrap();
        test.write(&b).unwrap();
        bytes.push((std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap()));
    }
    assert_eq!(bytes[0], bytes[1]);
    let (other, _) = generate_dataset(&skel, &prior, 50, 20, 8).unwrap();
    let (base, _) = generate_dataset(&skel, &prior, 50, 20, 7).unwrap();
    assert_ne!(other.poses(), base.poses());
}

#[test]
fn train_and_test_do_not_share_samples() {
    let (skel, prior) = setup();
    let (train, test) = generate_dataset(&skel, &prior, 200, 200, 3).unwrap();
    for t in &test.records {
        assert!(train.records.iter().all(|r| r.pose != t.pose));
    }
}

#[test]
fn empty_train_split_is_a_valid_file() {
    let (skel, prior) = setup();
    let (train, test) = generate_dataset(&skel, &prior, 0, 5, 1).unwrap();
    assert!(train.is_empty() && test.ranges.is_none());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.jsonl");
    train.write(&p).unwrap();
    let back = Dataset::read(&p, &skel).unwrap();
    assert!(back.is_empty());
}

#[test]
fn round_trip_is_exact_and_observations_rederive() {
    let (skel, prior) = setup();
    let (train, _) = generate_dataset(&skel, &prior, 100, 0, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.jsonl");
    train.write(&p).unwrap();
    let back = Dataset::read(&p, &skel).unwrap();
    assert_eq!(back, train);
    for r in &back.records {
        assert_eq!(r.hmd, hmd_from_pose(&skel, &r.pose, &r.beta).unwrap());
        let b = r.beta.values();
        assert!(b.iter().all(|v| (0.9..=1.1).contains(v)));
    }
}

#[test]
fn skeleton_hash_mismatch_is_rejected() {
    let (skel, prior) = setup();
    let (train, _) = generate_dataset(&skel, &prior, 3, 0, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.jsonl");
    train.write(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap().replace(skel.hash(), "deadbeef");
    std::fs::write(&p, text).unwrap();
    let err = Dataset::read(&p, &skel).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Data);
}

#[test]
fn truncated_file_is_rejected() {
    let (skel, prior) = setup();
    let (train, _) = generate_dataset(&skel, &prior, 4, 0, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("train.jsonl");
    train.write(&p).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    let cut: Vec<&str> = text.lines().take(3).collect();
    std::fs::write(&p, cut.join("\n")).unwrap();
    assert!(Dataset::read(&p, &skel).is_err());
}

#[test]
fn rotation_magnitudes_bounded_by_pi() {
    let (skel, prior) = setup();
    let (train, _) = generate_dataset(&skel, &prior, 2000, 0, 5).unwrap();
    let mut max = 0.0f64;
    for r in &train.records {
        for v in r.pose.joints() {
            max = max.max((v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt());
        }
    }
    assert!(max <= std::f64::consts::PI + 1e-12, "max magnitude {max}");
    assert!(max > 1.0);
}

#[test]
fn samples_cover_at_least_four_archetypes() {
    let (_, prior) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut seen = vec![0usize; prior.archetype_names().len()];
    for _ in 0..500 {
        seen[prior.sample(&mut rng).1] += 1;
    }
    assert!(seen.iter().filter(|&&c| c > 0).count() >= 4, "{seen:?}");
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn upper_and_lower_body_are_correlated() {
    let (skel, prior) = setup();
    let (train, _) = generate_dataset(&skel, &prior, 3000, 0, 9).unwrap();
    let knee = skel.index_of("left_knee").unwrap();
    let spine = skel.index_of("spine1").unwrap();
    let k: Vec<f64> = train.records.iter().map(|r| r.pose.joints()[knee][0]).collect();
    let s: Vec<f64> = train.records.iter().map(|r| r.pose.joints()[spine][0]).collect();
    let rho = correlation(&k, &s);
    assert!(rho > 0.3, "knee/spine correlation {rho}");
}

#[test]
fn manipulation_touches_only_the_subset() {
    let (skel, prior) = setup();
    let (train, _) = generate_dataset(&skel, &prior, 20, 0, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for r in &train.records {
        let subset = random_untracked_joints(&skel, 4, &mut rng);
        assert_eq!(subset.len(), 4);
        let out = ood_manipulate(&r.pose, &subset, 0.1, &mut rng).unwrap();
        for j in 0..skel.joint_count() {
            let same = out.joints()[j] == r.pose.joints()[j];
            assert_eq!(same, !subset.contains(&j), "joint {j}");
        }
    }
}

#[test]
fn untracked_choice_excludes_head_and_hands() {
    let (skel, _) = setup();
    let tracked = skel.tracked();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let s = random_untracked_joints(&skel, 4, &mut rng);
        assert!(s.iter().all(|j| !tracked.contains(j)));
    }
}

#[test]
fn manipulation_rejects_bad_arguments() {
    let (skel, prior) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (pose, _) = prior.sample(&mut rng);
    assert!(ood_manipulate(&pose, &[], 0.1, &mut rng).is_err());
    assert!(ood_manipulate(&pose, &[1], 0.0, &mut rng).is_err());
    assert!(ood_manipulate(&pose, &[skel.joint_count()], 0.1, &mut rng).is_err());
}

#[test]
fn tiny_noise_leaves_pose_unchanged() {
    let (_, prior) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (pose, _) = prior.sample(&mut rng);
    let out = ood_manipulate(&pose, &[1, 4, 7], 1e-14, &mut rng).unwrap();
    for (a, b) in out.joints().iter().zip(pose.joints()) {
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn manipulation_deviation_matches_folded_normal() {
    // E|N(0, s^2)| = s * sqrt(2 / pi); start from small angles so canonicalization never wraps.
    let pose = flag_core::kinematics::Pose::zeros(22);
    let s = 0.1;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut sum, mut n) = (0.0, 0usize);
    for _ in 0..5000 {
        let out = ood_manipulate(&pose, &[3, 10], s, &mut rng).unwrap();
        for j in [3, 10] {
            for c in 0..3 {
                sum += out.joints()[j][c].abs();
                n += 1;
            }
        }
    }
    let expected = s * (2.0 / std::f64::consts::PI).sqrt();
    let mean = sum / n as f64;
    assert!((mean - expected).abs() < 0.02 * expected + 0.001, "{mean} vs {expected}");
}

#[test]
fn noise_poses_stay_in_range_and_cover_it() {
    let (skel, prior) = setup();
    let (train, _) = generate_dataset(&skel, &prior, 500, 0, 13).unwrap();
    let ranges = train.ranges.clone().unwrap();
    let d = ranges.min.len();
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let p = ood_noise(Some(&ranges), &mut rng).unwrap().to_flat();
        for k in 0..d {
            assert!(p[k] >= ranges.min[k] && p[k] <= ranges.max[k], "coordinate {k}");
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    for k in 0..d {
        let span = ranges.max[k] - ranges.min[k];
        assert!(hi[k] - lo[k] >= 0.95 * span, "coordinate {k}");
    }
}

#[test]
fn noise_differs_across_seeds_and_needs_ranges() {
    let (skel, prior) = setup();
    let (train, _) = generate_dataset(&skel, &prior, 50, 0, 13).unwrap();
    let r = train.ranges.as_ref();
    let a = ood_noise(r, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = ood_noise(r, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_ne!(a, b);
    assert!(ood_noise(None, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
}
