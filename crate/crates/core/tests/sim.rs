use olpc_core::sim::{draw_csi, los_probability, pathloss_db, sample_configuration, ConfigSpec, CsiDataset};
use proptest::prelude::*;

fn small_spec() -> ConfigSpec {
    ConfigSpec { n_cells: 2, n_ues_per_cell: 3, n_rx: 4, n_tx: 2, ..ConfigSpec::default() }
}

#[test]
fn los_probability_at_36m() {
    // 18/36 + exp(-1) (1 - 18/36)
    let expected = 0.5 + 0.5 * (-1.0f64).exp();
    assert!((los_probability(36.0).unwrap() - expected).abs() < 1e-12);
    assert!((los_probability(36.0).unwrap() - 0.68394).abs() < 1e-5);
}

#[test]
fn los_probability_is_one_up_close() {
    assert_eq!(los_probability(5.0).unwrap(), 1.0);
    assert_eq!(los_probability(18.0).unwrap(), 1.0);
}

#[test]
fn pathloss_at_100m_los() {
    // 32.4 + 21 log10(100) + 20 log10(3.5)
    let expected = 32.4 + 42.0 + 20.0 * 3.5f64.log10();
    let pl = pathloss_db(100.0, 3.5, 1.5, true).unwrap();
    assert!((pl - expected).abs() < 1e-9);
    assert!((pl - 85.281).abs() < 1e-3);
}

#[test]
fn pathloss_reference_point() {
    assert!((pathloss_db(1.0, 1.0, 1.5, true).unwrap() - 32.4).abs() < 1e-12);
}

#[test]
fn nonpositive_distance_rejected() {
    assert!(los_probability(0.0).is_err());
    assert!(pathloss_db(-1.0, 3.5, 1.5, true).is_err());
}

#[test]
fn configuration_counts_match_spec() {
    let spec = small_spec();
    let c = sample_configuration(&spec, 11).unwrap();
    assert_eq!(c.n_ues_total(), 6);
    assert_eq!(c.distances_serving.len(), 2);
    assert!(c.distances_serving.iter().flatten().all(|d| (18.0..=200.0).contains(d)));
    for cell in 0..2 {
        for ue in 0..3 {
            assert_eq!(c.distances_cross[cell][ue][cell], c.distances_serving[cell][ue]);
        }
    }
}

#[test]
fn hundred_samples_all_finite() {
    let c = sample_configuration(&small_spec(), 3).unwrap();
    let d = draw_csi(&c, 100, 5).unwrap();
    assert_eq!(d.len(), 100);
    assert!(d.samples.iter().all(|s| s.is_finite()));
    assert_eq!(d.samples[0].matrix_count(), 2 * 3 * 2);
}

#[test]
fn csi_file_round_trip() {
    let c = sample_configuration(&small_spec(), 1).unwrap();
    let d = draw_csi(&c, 3, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("csi.bin");
    d.save(&path).unwrap();
    let back = CsiDataset::load(&path).unwrap();
    for (a, b) in d.samples.iter().zip(&back.samples) {
        for cell in 0..2 {
            for ue in 0..3 {
                for (x, y) in a.channel(cell, ue, 0).iter().zip(b.channel(cell, ue, 0)) {
                    assert!((x - y).norm() <= 1e-6 * x.norm());
                }
                assert!((a.serving_pathloss_db(cell, ue) - b.serving_pathloss_db(cell, ue)).abs() < 1e-4);
            }
        }
    }
    // Stored at single precision, so a second trip is lossless.
    back.save(&path).unwrap();
    assert_eq!(CsiDataset::load(&path).unwrap(), back);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn los_probability_in_unit_interval(d in 0.1f64..5000.0) {
        let p = los_probability(d).unwrap();
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn los_probability_non_increasing(d in 1.0f64..2000.0, dd in 0.0f64..500.0) {
        prop_assert!(los_probability(d + dd).unwrap() <= los_probability(d).unwrap() + 1e-15);
    }

    #[test]
    fn pathloss_non_decreasing(d in 1.0f64..2000.0, dd in 0.0f64..500.0, los in any::<bool>()) {
        prop_assert!(pathloss_db(d + dd, 3.5, 1.5, los).unwrap() >= pathloss_db(d, 3.5, 1.5, los).unwrap() - 1e-12);
    }

    #[test]
    fn nlos_never_below_los(d in 1.0f64..2000.0) {
        prop_assert!(pathloss_db(d, 3.5, 1.5, false).unwrap() >= pathloss_db(d, 3.5, 1.5, true).unwrap());
    }

    #[test]
    fn channels_finite_for_any_seed(cfg_seed in any::<u64>(), csi_seed in any::<u64>(), cells in 1usize..4, ues in 1usize..4) {
        let spec = ConfigSpec { n_cells: cells, n_ues_per_cell: ues, n_rx: 2, n_tx: 1, ..ConfigSpec::default() };
        let c = sample_configuration(&spec, cfg_seed).unwrap();
        let d = draw_csi(&c, 2, csi_seed).unwrap();
        prop_assert!(d.samples.iter().all(|s| s.is_finite()));
    }

    #[test]
    fn csi_reproducible(seed in any::<u64>()) {
        let c = sample_configuration(&small_spec(), 9).unwrap();
        prop_assert_eq!(draw_csi(&c, 2, seed).unwrap(), draw_csi(&c, 2, seed).unwrap());
    }
}
