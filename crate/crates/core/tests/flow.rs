use diffmath::{grad_check, Array, Tape};
use flag_core::flow::{std_normal_log_density, CouplingBlock, FlowConfig, FlowModel};
use flag_core::nn::{collect_grads, Module};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randomize(model: &mut impl Module, seed: u64, scale: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.visit_mut("", &mut |name, a| {
        if name.contains("cond_") {
            return;
        }
        a.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-scale..scale));
    });
}

fn flow(dim: usize, cond: usize, blocks: usize, taps: Vec<usize>, seed: u64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = FlowModel::new(dim, cond, &FlowConfig { blocks, hidden: 16, taps }, &mut rng).unwrap();
    randomize(&mut f, seed + 100, 0.3);
    f
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Determinant by Gaussian elimination with partial pivoting.
fn det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut d = 1.0;
    for col in 0..n {
        let p = (col..n).max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap()).unwrap();
        if p != col {
            a.swap(p, col);
            d = -d;
        }
        d *= a[col][col];
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for k in col..n {
                a[r][k] -= f * a[col][k];
            }
        }
    }
    d
}

#[test]
fn hand_evaluated_two_dimensional_coupling() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut b = CouplingBlock::new(2, 1, 4, true, &mut rng);
    // Zero final weights; biases chosen so s = ln 2 after the Tanh and t = 0.5.
    let last_s = b.scale.layers.last_mut().unwrap();
    last_s.bias.data_mut()[0] = 2f64.ln().atanh();
    let last_t = b.translate.layers.last_mut().unwrap();
    last_t.bias.data_mut()[0] = 0.5;
    let (y, ld) = b.forward(&[1.0, 2.0], &[0.3], 1).unwrap();
    assert!((y[0] - 1.0).abs() < 1e-15 && (y[1] - 4.5).abs() < 1e-12, "{y:?}");
    assert!((ld[0] - 2f64.ln()).abs() < 1e-12);
    let (x, ild) = b.inverse(&[1.0, 4.5], &[0.3], 1).unwrap();
    assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-12);
    assert!((ild[0] + 2f64.ln()).abs() < 1e-12);
}

#[test]
fn zeroed_coupling_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = CouplingBlock::new(4, 2, 8, false, &mut rng);
    let x = [0.1, 0.2, -0.3, 0.4];
    let (y, ld) = b.forward(&x, &[1.0, -1.0], 1).unwrap();
    assert_eq!(y, x.to_vec());
    assert_eq!(ld, vec![0.0]);
    assert_eq!(b.inverse(&x, &[1.0, -1.0], 1).unwrap().0, x.to_vec());
}

#[test]
fn coupling_logdet_matches_finite_difference_jacobian() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..50 {
        let mut b = CouplingBlock::new(2, 1, 8, trial % 2 == 0, &mut rng);
        randomize(&mut b.scale, trial, 0.5);
        randomize(&mut b.translate, trial + 1000, 0.5);
        let x = uniform(&mut rng, 2, -2.0, 2.0);
        let c = uniform(&mut rng, 1, -1.0, 1.0);
        let h = 1e-6;
        let mut jac = vec![vec![0.0; 2]; 2];
        for k in 0..2 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            let yp = b.forward(&xp, &c, 1).unwrap().0;
            let ym = b.forward(&xm, &c, 1).unwrap().0;
            for i in 0..2 {
                jac[i][k] = (yp[i] - ym[i]) / (2.0 * h);
            }
        }
        let ld = b.forward(&x, &c, 1).unwrap().1[0];
        assert!((det(jac).abs().ln() - ld).abs() < 1e-6);
    }
}

#[test]
fn coupling_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut b = CouplingBlock::new(6, 3, 16, true, &mut rng);
    randomize(&mut b.scale, 7, 0.5);
    randomize(&mut b.translate, 8, 0.5);
    let n = 1000;
    let x = uniform(&mut rng, 6 * n, -3.0, 3.0);
    let c = uniform(&mut rng, 3 * n, -1.0, 1.0);
    let (y, _) = b.forward(&x, &c, n).unwrap();
    let (back, _) = b.inverse(&y, &c, n).unwrap();
    let worst = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst:e}");
}

#[test]
fn flow_round_trips_thousand_pairs() {
    let f = flow(66, 29, 8, vec![2, 4, 6], 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 1000;
    let z = uniform(&mut rng, 66 * n, -3.0, 3.0);
    let c = uniform(&mut rng, 29 * n, -1.0, 1.0);
    let x = f.forward(&z, &c, n).unwrap();
    let back = f.inverse(&x, &c, n).unwrap();
    let worst = z.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-6, "{worst:e}");
}

#[test]
fn block_order_matters() {
    let f = flow(6, 2, 2, vec![], 6);
    let mut swapped = f.clone();
    swapped.blocks.swap(0, 1);
    let z = [0.5, -0.2, 1.0, 0.3, -0.7, 0.1];
    let c = [0.2, 0.4];
    assert_ne!(f.forward(&z, &c, 1).unwrap(), swapped.forward(&z, &c, 1).unwrap());
}

#[test]
fn conditioning_changes_output() {
    let f = flow(6, 2, 4, vec![], 7);
    let z = [0.5, -0.2, 1.0, 0.3, -0.7, 0.1];
    assert_ne!(f.forward(&z, &[0.2, 0.4], 1).unwrap(), f.forward(&z, &[-0.2, 0.1], 1).unwrap());
}

#[test]
fn full_jacobian_logdet_for_six_dimensions() {
    let f = flow(6, 2, 2, vec![], 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let x = uniform(&mut rng, 6, -2.0, 2.0);
        let c = uniform(&mut rng, 2, -1.0, 1.0);
        let h = 1e-6;
        let mut jac = vec![vec![0.0; 6]; 6];
        for k in 0..6 {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[k] += h;
            xm[k] -= h;
            let zp = f.inverse(&xp, &c, 1).unwrap();
            let zm = f.inverse(&xm, &c, 1).unwrap();
            for i in 0..6 {
                jac[i][k] = (zp[i] - zm[i]) / (2.0 * h);
            }
        }
        let z = f.inverse(&x, &c, 1).unwrap();
        let (lp, _) = f.log_prob(&x, &c, 1, false).unwrap();
        let analytic = lp[0] - std_normal_log_density(&z);
        assert!((det(jac).abs().ln() - analytic).abs() < 1e-4);
    }
}

#[test]
fn taps_do_not_change_sampling() {
    let with = flow(6, 2, 4, vec![2], 10);
    let mut without = with.clone();
    without.config.taps.clear();
    let z = [0.5, -0.2, 1.0, 0.3, -0.7, 0.1];
    assert_eq!(with.forward(&z, &[0.1, 0.1], 1).unwrap(), without.forward(&z, &[0.1, 0.1], 1).unwrap());
    assert_eq!(with.log_prob(&z, &[0.1, 0.1], 1, true).unwrap().0, without.log_prob(&z, &[0.1, 0.1], 1, false).unwrap().0);
}

fn tape_nll(f: &FlowModel, x: &[f64], c: &[f64], n: usize, taps: bool) -> f64 {
    let mut t = Tape::new();
    let mut reg = Vec::new();
    let b = f.bind(&mut t, false, &mut reg);
    let xv = t.constant(Array::new(vec![n, f.pose_dim()], x.to_vec()).unwrap());
    let cv = b.condition(&mut t, c).unwrap();
    let l = b.nll_loss(&mut t, xv, cv, taps).unwrap();
    t.value(l).item().unwrap()
}

#[test]
fn nll_tap_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 7;
    let x = uniform(&mut rng, 6 * n, -1.0, 1.0);
    let c = uniform(&mut rng, 2 * n, -1.0, 1.0);
    let f = flow(6, 2, 4, vec![], 12);
    let (lp, _) = f.log_prob(&x, &c, n, false).unwrap();
    let plain = -lp.iter().sum::<f64>() / n as f64;
    assert!((f.nll(&x, &c, n, true).unwrap() - plain).abs() < 1e-12);
    assert!((tape_nll(&f, &x, &c, n, true) - plain).abs() < 1e-10);

    let mut last = f.clone();
    last.config.taps = vec![4];
    assert!((last.nll(&x, &c, n, true).unwrap() - 2.0 * plain).abs() < 1e-10);
    assert!((tape_nll(&last, &x, &c, n, true) - 2.0 * plain).abs() < 1e-10);
}

#[test]
fn desk_taps_match_hand_summation() {
    let f = flow(66, 29, 8, vec![2, 4, 6], 13);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 5;
    let x = uniform(&mut rng, 66 * n, -1.0, 1.0);
    let c = uniform(&mut rng, 29 * n, -1.0, 1.0);
    // Each sub-flow evaluated as a standalone flow built from the leading blocks.
    let mut brute = 0.0;
    for r in 0..n {
        let xr = &x[r * 66..(r + 1) * 66];
        let cr = &c[r * 29..(r + 1) * 29];
        let mut v = f.log_prob(xr, cr, 1, false).unwrap().0[0];
        for s in [2usize, 4, 6] {
            let mut sub = f.clone();
            sub.blocks.truncate(s);
            v += s as f64 / 8.0 * sub.log_prob(xr, cr, 1, false).unwrap().0[0];
        }
        brute -= v;
    }
    brute /= n as f64;
    assert!((f.nll(&x, &c, n, true).unwrap() - brute).abs() < 1e-10);
    assert!((tape_nll(&f, &x, &c, n, true) - brute).abs() < 1e-10);
}

#[test]
fn nll_gradient_wrt_input_matches_finite_differences() {
    let f = flow(4, 2, 2, vec![1], 15);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = Array::new(vec![3, 4], uniform(&mut rng, 12, -1.0, 1.0)).unwrap();
    let c = uniform(&mut rng, 6, -1.0, 1.0);
    let err = grad_check(
        |t, v| {
            let mut reg = Vec::new();
            let b = f.bind(t, false, &mut reg);
            let cv = b.condition(t, &c).unwrap();
            Ok(b.nll_loss(t, v, cv, true).unwrap())
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-5, "{err:e}");
}

#[test]
fn nll_parameter_gradients_match_finite_differences() {
    let f = flow(4, 2, 3, vec![2], 17);
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let n = 4;
    let x = uniform(&mut rng, 4 * n, -1.0, 1.0);
    let c = uniform(&mut rng, 2 * n, -1.0, 1.0);
    let mut t = Tape::new();
    let mut reg = Vec::new();
    let b = f.bind(&mut t, true, &mut reg);
    let xv = t.constant(Array::new(vec![n, 4], x.clone()).unwrap());
    let cv = b.condition(&mut t, &c).unwrap();
    let l = b.nll_loss(&mut t, xv, cv, true).unwrap();
    let grads = collect_grads(&t.backward(l).unwrap(), &reg).unwrap();

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (p, g) in grads.iter().enumerate() {
        for k in (0..g.len()).step_by(3) {
            let eval = |delta: f64| {
                let mut m = f.clone();
                let mut idx = 0;
                m.visit_mut("", &mut |name, a| {
                    if name.contains("cond_") {
                        return;
                    }
                    if idx == p {
                        a.data_mut()[k] += delta;
                    }
                    idx += 1;
                });
                m.nll(&x, &c, n, true).unwrap()
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let a = g.data()[k];
            worst = worst.max((a - num).abs() / a.abs().max(1.0));
        }
    }
    assert!(worst < 1e-5, "{worst:e}");
}
