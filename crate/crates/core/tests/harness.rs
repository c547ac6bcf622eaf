use olpc_core::harness::{run_experiment, scenario, sweep, test_landscape, OptimizerKind, SweepAxis};

#[test]
fn smoke_run_covers_every_optimizer() {
    let spec = scenario("smoke").unwrap();
    let r = run_experiment(&spec).unwrap();
    for opt in OptimizerKind::ALL {
        if opt == OptimizerKind::Oracle {
            continue;
        }
        let runs: Vec<_> = r.runs_of(opt).collect();
        assert_eq!(runs.len(), spec.n_test_configs * spec.n_test_seeds, "{opt}");
        for run in runs {
            assert_eq!(run.trace.len(), spec.t_max);
            let f = run.trace.fraction_at(spec.t_max).unwrap();
            assert!(f <= 1.0 + 1e-12, "{opt} fraction {f}");
        }
    }
    assert_eq!(r.oracles.len(), spec.n_test_configs * spec.n_csi_datasets);
}

#[test]
fn oracle_records_match_landscape_maximum() {
    let spec = scenario("smoke").unwrap();
    let r = run_experiment(&spec).unwrap();
    for o in &r.oracles {
        let (_, land) = test_landscape(&spec, o.config, o.csi_dataset).unwrap();
        assert_eq!(o.kpi, land.oracle_value());
        assert_eq!(o.grid_index, land.oracle_index());
        assert!(land.values.iter().all(|v| *v <= o.kpi));
    }
}

#[test]
fn single_round_gives_single_row() {
    let mut spec = scenario("smoke").unwrap();
    spec.optimizers = vec![OptimizerKind::Bo, OptimizerKind::Mab];
    spec.t_max = 1;
    spec.checkpoints = vec![1];
    let r = run_experiment(&spec).unwrap();
    assert!(r.runs.iter().all(|run| run.trace.len() == 1));
}

#[test]
fn experiment_outputs_are_byte_identical() {
    let spec = scenario("smoke").unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&spec).unwrap().write_all(a.path()).unwrap();
    run_experiment(&spec).unwrap().write_all(b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert_eq!(std::fs::read(a.path().join(&n)).unwrap(), std::fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn different_master_seeds_differ() {
    let mut spec = scenario("smoke").unwrap();
    spec.optimizers = vec![OptimizerKind::Oracle];
    let a = run_experiment(&spec).unwrap();
    spec.master_seed = 1;
    let b = run_experiment(&spec).unwrap();
    assert_ne!(a.oracles, b.oracles);
}

#[test]
fn duplicate_sweep_values_give_identical_rows() {
    let spec = scenario("smoke").unwrap();
    let rows = sweep(&spec, SweepAxis::NMetaTasks, &[3, 3], 4).unwrap();
    let half = rows.len() / 2;
    assert!(half > 0);
    for (a, b) in rows[..half].iter().zip(&rows[half..]) {
        assert_eq!(a, b);
    }
}

#[test]
fn bad_inputs_rejected() {
    let spec = scenario("smoke").unwrap();
    assert!(scenario("nope").is_err());
    assert!(sweep(&spec, SweepAxis::PerTaskEvals, &[], 4).is_err());
    assert!(sweep(&spec, SweepAxis::PerTaskEvals, &[2], 0).is_err());
    let mut bad = spec;
    bad.t_max = 0;
    assert!(run_experiment(&bad).is_err());
}
