use nalgebra::{DMatrix, DVector, SymmetricEigen};
use olpc_core::bandit::BanditPolicyParams;
use olpc_core::context::{
    build_graph, common_max_dim, context_kernel, contextual_bo_loss_grad, contextual_mab_loss_grad,
    contextual_meta_train_bo, contextual_meta_train_mab, feature_vector, map_context, map_context_mab, task_kappas,
    ContextMapping, InterferenceGraph, DEFAULT_EDGE_THRESHOLD,
};
use olpc_core::meta_bo::{GpHyperparameters, MetaDataset, TaskRecord};
use olpc_core::sim::{sample_configuration, ConfigSpec, Configuration};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(seed: u64) -> Configuration {
    let spec = ConfigSpec { n_cells: 2, n_ues_per_cell: 3, n_rx: 2, n_tx: 1, ..ConfigSpec::default() };
    sample_configuration(&spec, seed).unwrap()
}

fn graph(seed: u64) -> InterferenceGraph {
    build_graph(&small_config(seed), DEFAULT_EDGE_THRESHOLD).unwrap()
}

/// Graphs whose in-degree profiles are not all identical.
fn distinct_graphs(n: usize) -> Vec<InterferenceGraph> {
    let mut out: Vec<InterferenceGraph> = Vec::new();
    let mut seed = 0;
    while out.len() < n {
        let g = graph(seed);
        seed += 1;
        let f = feature_vector(&g, 5);
        if f.iter().any(|v| *v > 0.0) && out.iter().all(|h| feature_vector(h, 5) != f) {
            out.push(g);
        }
    }
    out
}

fn two_link(serving: [f64; 2], cross: [f64; 2]) -> Configuration {
    let spec = ConfigSpec { n_cells: 2, n_ues_per_cell: 1, n_rx: 1, n_tx: 1, ..ConfigSpec::default() };
    let mut c = sample_configuration(&spec, 0).unwrap();
    c.distances_serving = vec![vec![serving[0]], vec![serving[1]]];
    c.distances_cross = vec![vec![vec![serving[0], cross[0]]], vec![vec![cross[1], serving[1]]]];
    c
}

#[test]
fn two_link_toy_has_one_edge() {
    // UE 0 sits 30 m from the far BS whose own UE is 100 m out: 0.3 < 1.8.
    // UE 1 sits 150 m from BS 0 whose UE is 20 m out: 7.5 > 1.8.
    let g = build_graph(&two_link([20.0, 100.0], [30.0, 150.0]), 1.8).unwrap();
    assert_eq!(g.edges, vec![(0, 1)]);
}

#[test]
fn tiny_threshold_gives_no_edges() {
    for seed in 0..5 {
        assert!(build_graph(&small_config(seed), 1e-9).unwrap().edges.is_empty());
    }
}

#[test]
fn kernel_self_similarity_and_empty_graph() {
    let g = distinct_graphs(1).remove(0);
    assert!((context_kernel(&g, &g, 5) - 1.0).abs() < 1e-15);
    let empty = build_graph(&small_config(0), 1e-9).unwrap();
    assert_eq!(context_kernel(&empty, &g, 5), 0.0);
}

#[test]
fn context_gram_is_psd() {
    let graphs: Vec<InterferenceGraph> = (0..20).map(graph).collect();
    let d = common_max_dim(&graphs);
    let gram = DMatrix::from_fn(20, 20, |i, j| context_kernel(&graphs[i], &graphs[j], d));
    assert!(SymmetricEigen::new(gram).eigenvalues.min() >= -1e-8);
}

#[test]
fn graph_file_round_trip() {
    let g = graph(3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.graph");
    g.save(&path).unwrap();
    assert_eq!(InterferenceGraph::load(&path).unwrap(), g);
}

fn mapping(l: usize, r: usize, anchors: Vec<InterferenceGraph>, seed: u64) -> ContextMapping {
    ContextMapping::init(l, r, anchors, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

#[test]
fn map_kappa_matches_dense_product() {
    let m = mapping(6, 2, distinct_graphs(4), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let kappa = DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0));
    let got = m.map_kappa(&kappa).unwrap();
    for i in 0..6 {
        let mut want = 0.0;
        for a in 0..2 {
            for n in 0..4 {
                want += m.v1[(i, a)] * m.v2[(n, a)] * kappa[n];
            }
        }
        assert!((got[i] - want).abs() < 1e-12);
    }
}

#[test]
fn one_hot_kappa_extracts_factor_product() {
    let m = mapping(6, 2, distinct_graphs(4), 3);
    for n in 0..4 {
        let e = DVector::from_fn(4, |i, _| if i == n { 1.0 } else { 0.0 });
        let want = &m.v1 * m.v2.row(n).transpose();
        assert!((m.map_kappa(&e).unwrap() - want).norm() < 1e-14);
    }
}

#[test]
fn zero_factors_map_to_zero() {
    let anchors = distinct_graphs(4);
    let m = ContextMapping::new(DMatrix::zeros(6, 2), DMatrix::zeros(4, 2), anchors.clone(), 5).unwrap();
    assert!(map_context(&m, &anchors[0]).unwrap().iter().all(|v| *v == 0.0));
}

#[test]
fn rank_must_stay_below_anchor_count() {
    let anchors = distinct_graphs(3);
    assert!(ContextMapping::new(DMatrix::zeros(6, 3), DMatrix::zeros(3, 3), anchors, 5).is_err());
}

#[test]
fn relabelled_context_maps_to_same_parameters() {
    let anchors = distinct_graphs(4);
    let m = mapping(6, 2, anchors.clone(), 4);
    let g = graph(77);
    let mut perm: Vec<usize> = (0..g.n_nodes()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(map_context(&m, &g).unwrap(), map_context(&m, &g.permuted(&perm)).unwrap());
}

#[test]
fn mapping_files_round_trip() {
    let m = mapping(6, 2, distinct_graphs(4), 6);
    let dir = tempfile::tempdir().unwrap();
    m.save(dir.path()).unwrap();
    let back = ContextMapping::load(dir.path()).unwrap();
    assert_eq!(back.anchors, m.anchors);
    assert_eq!(back.max_dim, m.max_dim);
    assert!((&back.v1 - &m.v1).norm() == 0.0 && (&back.v2 - &m.v2).norm() == 0.0);
}

const N_ARMS: usize = 6;

fn arm_inputs() -> Vec<Vec<f64>> {
    (0..N_ARMS).map(|i| vec![i as f64 / 5.0, (i % 2) as f64]).collect()
}

fn contextual_data(n: usize) -> MetaDataset {
    let graphs = distinct_graphs(n);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let inputs = arm_inputs();
    let tasks = graphs
        .into_iter()
        .map(|g| {
            let rewards: Vec<f64> = (0..N_ARMS).map(|_| rng.random_range(0.5..3.0)).collect();
            let arms = vec![rng.random_range(0..N_ARMS), rng.random_range(0..N_ARMS), rng.random_range(0..N_ARMS)];
            TaskRecord {
                inputs: arms.iter().map(|a| inputs[*a].clone()).collect(),
                values: arms.iter().map(|a| rewards[*a] + rng.random_range(-0.05..0.05)).collect(),
                probs: vec![1.0 / N_ARMS as f64; arms.len()],
                arms,
                arm_rewards: Some(rewards),
                context: Some(g),
            }
        })
        .collect();
    MetaDataset { tasks }
}

fn gp_template(scale: f64) -> GpHyperparameters {
    GpHyperparameters::init(2, &[3], 3, 1e-2, scale, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
}

fn bandit_template() -> BanditPolicyParams {
    BanditPolicyParams::init(2, &[3], 2, 0.5, 1.0, &mut ChaCha8Rng::seed_from_u64(10)).unwrap()
}

/// Central differences over every entry of `V1` then `V2`.
fn fd_check<F: Fn(&ContextMapping) -> f64>(m: &ContextMapping, g1: &DMatrix<f64>, g2: &DMatrix<f64>, f: F) {
    let eps = 1e-6;
    let check = |analytic: f64, fp: f64, fm: f64, what: &str| {
        let fd = (fp - fm) / (2.0 * eps);
        let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-4);
        assert!(err < 1e-4, "{what}: fd {fd} analytic {analytic}");
    };
    for idx in 0..m.v1.len() {
        let (mut p, mut q) = (m.clone(), m.clone());
        p.v1[idx] += eps;
        q.v1[idx] -= eps;
        check(g1[idx], f(&p), f(&q), &format!("v1[{idx}]"));
    }
    for idx in 0..m.v2.len() {
        let (mut p, mut q) = (m.clone(), m.clone());
        p.v2[idx] += eps;
        q.v2[idx] -= eps;
        check(g2[idx], f(&p), f(&q), &format!("v2[{idx}]"));
    }
}

#[test]
fn contextual_bo_gradient_matches_finite_differences() {
    let data = contextual_data(4);
    let template = gp_template(data.value_scale());
    let anchors: Vec<InterferenceGraph> = data.tasks.iter().map(|t| t.context.clone().unwrap()).collect();
    let m = mapping(template.n_params(), 2, anchors, 11);
    let kappas = task_kappas(&m, &data).unwrap();
    let (_, g) = contextual_bo_loss_grad(&m, &template, &data, &kappas, true).unwrap();
    let (g1, g2) = g.unwrap();
    fd_check(&m, &g1, &g2, |p| contextual_bo_loss_grad(p, &template, &data, &kappas, false).unwrap().0);
}

#[test]
fn contextual_mab_gradient_matches_finite_differences() {
    let data = contextual_data(4);
    let template = bandit_template();
    let anchors: Vec<InterferenceGraph> = data.tasks.iter().map(|t| t.context.clone().unwrap()).collect();
    let mut m = mapping(template.n_params(), 2, anchors, 12);
    // Keep every task's omega strictly inside (0, 1) so the loss is smooth.
    let last = m.n_params() - 1;
    for a in 0..m.rank() {
        m.v1[(last, a)] *= 0.1;
    }
    let kappas = task_kappas(&m, &data).unwrap();
    for k in &kappas {
        let omega = m.map_kappa(k).unwrap()[last];
        assert!(omega.abs() < 1.0);
    }
    let inputs = arm_inputs();
    let (_, g) = contextual_mab_loss_grad(&m, &template, &data, &inputs, &kappas, true).unwrap();
    let (g1, g2) = g.unwrap();
    fd_check(&m, &g1, &g2, |p| contextual_mab_loss_grad(p, &template, &data, &inputs, &kappas, false).unwrap().0);
}

#[test]
fn zero_steps_returns_initial_mapping() {
    let data = contextual_data(4);
    let template = gp_template(data.value_scale());
    let anchors: Vec<InterferenceGraph> = data.tasks.iter().map(|t| t.context.clone().unwrap()).collect();
    let m = mapping(template.n_params(), 2, anchors, 13);
    let out = contextual_meta_train_bo(&data, &template, &m, 1e-2, 0).unwrap();
    assert_eq!(out.params, m);
    assert_eq!(out.losses.len(), 1);
}

#[test]
fn contextual_training_lowers_losses() {
    let data = contextual_data(5);
    let anchors: Vec<InterferenceGraph> = data.tasks.iter().map(|t| t.context.clone().unwrap()).collect();
    let gp = gp_template(data.value_scale());
    let out = contextual_meta_train_bo(&data, &gp, &mapping(gp.n_params(), 2, anchors.clone(), 14), 1e-2, 100).unwrap();
    assert!(out.losses.last().unwrap() < &out.losses[0]);
    let mab = bandit_template();
    let init = mapping(mab.n_params(), 2, anchors, 15);
    let out = contextual_meta_train_mab(&data, &arm_inputs(), &mab, &init, 0.05, 100).unwrap();
    assert!(out.losses.last().unwrap() < &out.losses[0]);
    let policy = map_context_mab(&out.params, &mab, data.tasks[0].context.as_ref().unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&policy.omega));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn features_invariant_to_relabelling(seed in 0u64..10_000, shuffle in any::<u64>()) {
        let g = graph(seed);
        let mut perm: Vec<usize> = (0..g.n_nodes()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        prop_assert_eq!(feature_vector(&g, 5), feature_vector(&g.permuted(&perm), 5));
    }

    #[test]
    fn kernel_bounded_and_symmetric(a in 0u64..10_000, b in 0u64..10_000) {
        let (g, h) = (graph(a), graph(b));
        let k = context_kernel(&g, &h, 5);
        prop_assert!((0.0..=1.0 + 1e-15).contains(&k));
        prop_assert_eq!(k, context_kernel(&h, &g, 5));
    }
}
