use olpc_core::nn::{Activation, Mlp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fd_check(sizes: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::glorot(sizes, Activation::Tanh, &mut rng).unwrap();
    // Nonzero biases so every parameter is exercised.
    for p in net.params_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
    let up: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let f = |n: &Mlp| -> f64 { n.forward(&x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum() };
    let grad = net.backward(&x, &up).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, g) in grad.iter().enumerate() {
        let orig = net.params()[i];
        net.params_mut()[i] = orig + h;
        let fp = f(&net);
        net.params_mut()[i] = orig - h;
        let fm = f(&net);
        net.params_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let err = (fd - g).abs() / fd.abs().max(g.abs()).max(1e-3);
        worst = worst.max(err);
    }
    worst
}

#[test]
fn gradients_match_finite_differences() {
    for layers in 1..=3 {
        for width in [1, 8, 32] {
            let mut sizes = vec![3];
            sizes.extend(std::iter::repeat_n(width, layers - 1));
            sizes.push(if layers == 1 { width } else { 2 });
            let err = fd_check(&sizes, (layers * 100 + width) as u64);
            assert!(err < 1e-5, "sizes {sizes:?}: relative error {err}");
        }
    }
}

#[test]
fn two_three_one_forward_by_hand() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let params: Vec<f64> = (0..Mlp::param_count(&[2, 3, 1])).map(|_| rng.random_range(-1.0..1.0)).collect();
    let net = Mlp::from_params(&[2, 3, 1], Activation::Tanh, params.clone()).unwrap();
    let x = [0.3, -0.8];
    let (w1, rest) = params.split_at(6);
    let (b1, rest) = rest.split_at(3);
    let (w2, b2) = rest.split_at(3);
    let hidden: Vec<f64> = (0..3).map(|j| (w1[2 * j] * x[0] + w1[2 * j + 1] * x[1] + b1[j]).tanh()).collect();
    let out = w2.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b2[0];
    assert!((net.forward(&x).unwrap()[0] - out).abs() < 1e-12);
}

#[test]
fn forward_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let net = Mlp::glorot(&[4, 8, 3], Activation::Tanh, &mut rng).unwrap();
    let before = net.clone();
    let x = [0.1, 0.2, -0.3, 0.9];
    let a = net.forward(&x).unwrap();
    let _ = net.backward(&x, &[1.0, 0.0, -1.0]).unwrap();
    assert_eq!(net.forward(&x).unwrap(), a);
    assert_eq!(net, before);
}

#[test]
fn saved_network_reloads_identically() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = Mlp::glorot(&[2, 5, 5, 1], Activation::Tanh, &mut rng).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.bin");
    net.save(&path).unwrap();
    assert_eq!(Mlp::load(&path).unwrap(), net);
}
