use ncm_core::harness::{read_rows, run_sweep, write_outputs, ExperimentConfig, SweepAxis};
use ncm_core::linalg::spectral_norm;
use ncm_core::{corrupt_pairs, generate_cf_pairs, sample_scm, CfPairSet, DomainSpec};

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.scm.dim_latent = 30;
    cfg.scm.dim_obs = 30;
    cfg.scm.num_spurious = 6;
    cfg.data.n_train = 400;
    cfg.data.n_test = 400;
    cfg.data.n_indomain_test = 400;
    cfg.pairs.k = 12;
    cfg.pairs.epsilon = vec![0.0];
    cfg.sweep.axis = SweepAxis::K;
    cfg.sweep.values = vec![1.0, 3.0, 6.0, 12.0];
    cfg.sweep.num_seeds = 3;
    cfg.model.epochs = 40;
    cfg
}

#[test]
fn noise_norm_grows_with_epsilon() {
    let c = 0.25;
    for seed in 0..10 {
        let scm = sample_scm(
            20,
            20,
            4,
            vec![DomainSpec::train("a", 0.1, c, 0.5), DomainSpec::train("b", 3.0, c, 0.5), DomainSpec::test("t", 1.0, c)],
            seed,
        )
        .unwrap();
        let clean = generate_cf_pairs(&scm, "a", "b", 30, seed).unwrap();
        let norms: Vec<f64> = [0.0, 1.0, 5.0, 10.0]
            .iter()
            .map(|&e| spectral_norm(&(corrupt_pairs(&clean, e, seed + 100).unwrap().delta - &clean.delta)))
            .collect();
        assert_eq!(norms[0], 0.0);
        assert!(norms.windows(2).all(|w| w[1] > w[0]), "{norms:?}");
    }
}

#[test]
fn more_pairs_never_hurt_much_in_the_noiseless_k_sweep() {
    let res = run_sweep(&small(), 2).unwrap();
    let mean = |k: usize| {
        let v: Vec<f64> = res.rows.iter().filter(|r| r.k == Some(k)).filter_map(|r| r.test_acc).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(12) + 0.02 >= mean(1));
    assert!(mean(6) + 0.02 >= mean(3));
}

#[test]
fn outputs_round_trip_and_pairs_reload() {
    let cfg = small();
    let dir = tempfile::tempdir().unwrap();
    let res = run_sweep(&cfg, 1).unwrap();
    write_outputs(dir.path(), "run", &res.rows, &res.reports, &cfg.to_toml_string()).unwrap();
    let rows = read_rows(std::fs::File::open(dir.path().join("run.csv")).unwrap()).unwrap();
    assert_eq!(rows, res.rows);
    assert!(dir.path().join("run_summary.csv").exists());
    let echoed = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&echoed).unwrap(), cfg);

    let scm = cfg.build_scm(1).unwrap();
    let pairs = corrupt_pairs(&generate_cf_pairs(&scm, "train_a", "train_b", 5, 2).unwrap(), 0.5, 3).unwrap();
    let path = dir.path().join("pairs.csv");
    pairs.save(&path).unwrap();
    assert_eq!(CfPairSet::load(&path).unwrap(), pairs);
}
