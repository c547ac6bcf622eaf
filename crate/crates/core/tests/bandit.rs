use olpc_core::bandit::{meta_mab_grad, meta_mab_loss, meta_mab_train, policy_probs, run_mab, BanditPolicyParams};
use olpc_core::meta_bo::{MetaDataset, TaskRecord};
use olpc_core::objective::{Landscape, LandscapeObjective, OlpcGrid};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const N_ARMS: usize = 5;

fn inputs() -> Vec<Vec<f64>> {
    (0..N_ARMS).map(|i| vec![i as f64 / 4.0, (i as f64 * 0.7).sin()]).collect()
}

fn toy_task(arms: &[usize], rewards: &[f64]) -> TaskRecord {
    TaskRecord {
        arms: arms.to_vec(),
        inputs: arms.iter().map(|a| inputs()[*a].clone()).collect(),
        values: arms.iter().map(|a| rewards[*a]).collect(),
        probs: (0..arms.len()).map(|i| 1.0 / (N_ARMS - i) as f64).collect(),
        arm_rewards: Some(rewards.to_vec()),
        context: None,
    }
}

fn toy_data() -> MetaDataset {
    MetaDataset {
        tasks: vec![toy_task(&[1, 3, 4], &[1.0, 2.5, 0.5, 4.0, 3.0]), toy_task(&[0, 2], &[2.0, 1.0, 3.5, 0.2, 1.5])],
    }
}

fn params(seed: u64, omega: f64) -> BanditPolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    BanditPolicyParams::init(2, &[4], 3, omega, 1.0, &mut rng).unwrap()
}

/// Expected normalized reward written out term by term.
fn brute_force_loss(p: &BanditPolicyParams, data: &MetaDataset) -> f64 {
    let feats: Vec<Vec<f64>> = inputs().iter().map(|x| p.kernel_net.forward(x).unwrap()).collect();
    let k = |a: usize, b: usize| (-feats[a].iter().zip(&feats[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp();
    let mut total = 0.0;
    for task in &data.tasks {
        let scale = task.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let scores: Vec<f64> = (0..N_ARMS)
            .map(|x| (0..task.len()).map(|i| k(task.arms[i], x) * task.values[i] / (scale * task.probs[i])).sum())
            .collect();
        let z: f64 = scores.iter().map(|s| (s / p.temperature).exp()).sum();
        let rewards = task.arm_rewards.as_ref().unwrap();
        let mut expected = 0.0;
        for x in 0..N_ARMS {
            let prob = (1.0 - p.omega) * (scores[x] / p.temperature).exp() / z + p.omega / N_ARMS as f64;
            expected += prob * rewards[x] / scale;
        }
        total -= expected;
    }
    total / data.len() as f64
}

#[test]
fn two_arm_policy_hand_value() {
    let p = policy_probs(&[1.0, 0.0], 0.3, 1.0);
    assert!((p[0] - 0.661_741_005_041_003_4).abs() < 1e-12);
    assert!((p[1] - 0.338_258_994_958_996_6).abs() < 1e-12);
}

#[test]
fn loss_matches_brute_force_expectation() {
    let data = toy_data();
    for omega in [0.0, 0.3, 1.0] {
        let p = params(1, omega);
        let got = meta_mab_loss(&p, &data, &inputs()).unwrap();
        assert!((got - brute_force_loss(&p, &data)).abs() < 1e-12);
    }
}

#[test]
fn full_exploration_loss_is_mean_reward() {
    let data = toy_data();
    let p = params(2, 1.0);
    let mut want = 0.0;
    for task in &data.tasks {
        let scale = task.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        want -= task.arm_rewards.as_ref().unwrap().iter().sum::<f64>() / (N_ARMS as f64 * scale);
    }
    want /= 2.0;
    assert!((meta_mab_loss(&p, &data, &inputs()).unwrap() - want).abs() < 1e-12);
}

#[test]
fn gradient_matches_finite_differences() {
    let data = toy_data();
    let mut p = params(3, 0.3);
    let (_, grad) = meta_mab_grad(&p, &data, &inputs()).unwrap();
    let base = p.flat_params();
    let eps = 1e-6;
    for i in 0..base.len() {
        let mut q = base.clone();
        q[i] = base[i] + eps;
        p.set_flat_params(&q).unwrap();
        let fp = meta_mab_loss(&p, &data, &inputs()).unwrap();
        q[i] = base[i] - eps;
        p.set_flat_params(&q).unwrap();
        let fm = meta_mab_loss(&p, &data, &inputs()).unwrap();
        let fd = (fp - fm) / (2.0 * eps);
        let err = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4);
        assert!(err < 1e-4, "param {i}: fd {fd} analytic {}", grad[i]);
    }
}

#[test]
fn constant_rewards_give_zero_gradient() {
    let data = MetaDataset { tasks: vec![toy_task(&[0, 2, 4], &[1.5; N_ARMS]), toy_task(&[1], &[1.5; N_ARMS])] };
    let (_, grad) = meta_mab_grad(&params(4, 0.3), &data, &inputs()).unwrap();
    assert!(grad.iter().all(|g| g.abs() < 1e-14), "{grad:?}");
}

#[test]
fn omega_gradient_follows_exploitation_gain() {
    // One task whose history points at the best arm: the softmax beats uniform,
    // so raising omega raises the loss.
    let good = MetaDataset { tasks: vec![toy_task(&[3, 3, 3], &[0.1, 0.1, 0.1, 5.0, 0.1])] };
    let (_, g) = meta_mab_grad(&params(5, 0.3), &good, &inputs()).unwrap();
    assert!(*g.last().unwrap() > 0.0);
    let bad = MetaDataset { tasks: vec![toy_task(&[0, 0, 0], &[5.0, 0.0, 0.0, 0.0, 20.0])] };
    let (_, g) = meta_mab_grad(&params(5, 0.3), &bad, &inputs()).unwrap();
    assert!(*g.last().unwrap() < 0.0);
}

#[test]
fn descent_lowers_loss() {
    let data = toy_data();
    let out = meta_mab_train(&data, &inputs(), &params(6, 0.5), 0.1, 200).unwrap();
    assert!(out.losses[200] < out.losses[0]);
    assert!((0.0..=1.0).contains(&out.params.omega));
}

fn landscape() -> Landscape {
    let p0: Vec<f64> = (0..12).map(|i| -90.0 + 2.0 * i as f64).collect();
    let values = (0..12).map(|i| 1.0 + (i as f64 * 0.5).cos()).collect();
    Landscape { grid: OlpcGrid::new(p0, vec![1.0], 1, true).unwrap(), values }
}

#[test]
fn run_mab_reproducible() {
    let land = landscape();
    let p = BanditPolicyParams::rbf(2, 0.76, 0.3, 1.0).unwrap();
    let x = land.grid.inputs();
    let a = run_mab(&mut LandscapeObjective::new(&land, 0.05, 1), &x, &p, 30, 9).unwrap();
    let b = run_mab(&mut LandscapeObjective::new(&land, 0.05, 1), &x, &p, 30, 9).unwrap();
    assert_eq!(a, b);
    let c = run_mab(&mut LandscapeObjective::new(&land, 0.05, 1), &x, &p, 30, 10).unwrap();
    assert_ne!(
        a.rows.iter().map(|r| r.grid_index).collect::<Vec<_>>(),
        c.rows.iter().map(|r| r.grid_index).collect::<Vec<_>>()
    );
}

#[test]
fn run_mab_only_samples_supported_arms() {
    // A sharp greedy policy drives most probabilities to exactly zero.
    let land = landscape();
    let p = BanditPolicyParams::rbf(2, 0.05, 0.0, 1e-3).unwrap();
    let trace = run_mab(&mut LandscapeObjective::new(&land, 0.0, 0), &land.grid.inputs(), &p, 60, 3).unwrap();
    assert_eq!(trace.len(), 60);
    assert!(trace.best_value <= land.oracle_value());
}

#[test]
fn policy_file_round_trip() {
    let p = params(7, 0.25);
    let dir = tempfile::tempdir().unwrap();
    p.save(dir.path()).unwrap();
    assert_eq!(BanditPolicyParams::load(dir.path()).unwrap(), p);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn policy_on_simplex(
        scores in prop::collection::vec(-50.0f64..50.0, 1..40),
        omega in 0.0f64..=1.0,
        temperature in 0.05f64..20.0,
        shift in -100.0f64..100.0,
    ) {
        let p = policy_probs(&scores, omega, temperature);
        let n = scores.len() as f64;
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= omega / n - 1e-15));
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let q = policy_probs(&shifted, omega, temperature);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
