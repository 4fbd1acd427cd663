use nalgebra::DMatrix;
use ncm_core::linalg::{orthonormality_error, singular_values_sorted};
use ncm_core::rng::{gaussian_rows, stream};
use ncm_core::{
    estimate_subspace, generate_cf_pairs, generate_dataset, sample_scm, second_moment_closed_form, subspace_distance,
    DomainSpec, LatentScm,
};

const C: f64 = 1.0 / 20.0;

fn scm(seed: u64) -> LatentScm {
    sample_scm(
        100,
        100,
        20,
        vec![
            DomainSpec::train("a", 0.1, C, 0.5),
            DomainSpec::train("b", 30.0, C, 0.5),
            DomainSpec::test("t", 8.0, C),
        ],
        seed,
    )
    .unwrap()
}

#[test]
fn observation_map_is_an_isometry() {
    let s = scm(1);
    assert!(orthonormality_error(&s.obs_map) < 1e-12);
    let exo = gaussian_rows(&mut stream(2, "exo", 0), 50, 100);
    let doms = vec![s.domain("b").unwrap(); 50];
    let (z, _) = s.latents(&exo, &doms).unwrap();
    let (x, _) = s.materialize(&exo, "b").unwrap();
    for i in 0..50 {
        assert!((x.row(i).norm() - z.row(i).norm()).abs() < 1e-10 * z.row(i).norm().max(1.0));
    }
}

#[test]
fn labels_and_invariant_part_do_not_depend_on_the_domain() {
    let s = scm(3);
    let inv = s.invariant_block();
    let exo = gaussian_rows(&mut stream(4, "exo", 0), 200, 100);
    let (xa, ya) = s.materialize(&exo, "a").unwrap();
    let (xt, yt) = s.materialize(&exo, "t").unwrap();
    assert_eq!(ya, yt);
    let diff = (&xa - &xt) * &inv;
    assert!(diff.amax() < 1e-10);
}

#[test]
fn spurious_conditional_mean_matches_coupling() {
    let s = scm(5);
    let n = 20_000;
    let ds = generate_dataset(&s, "a", n, 6, true).unwrap();
    let exo = ds.exo_noise.as_ref().unwrap();
    let (z, y) = s.latents(exo, &vec![s.domain("a").unwrap(); n]).unwrap();
    for label in [-1.0, 1.0] {
        let rows: Vec<usize> = (0..n).filter(|&i| y[i] == label).collect();
        let m = rows.len() as f64;
        for j in 80..100 {
            let mean = rows.iter().map(|&i| z[(i, j)]).sum::<f64>() / m;
            assert!((mean - C * label).abs() <= 4.0 * 0.1 / m.sqrt(), "coordinate {j}: {mean}");
        }
    }
}

#[test]
fn oracle_pair_differences_have_rank_of_the_intervention_set() {
    for seed in 0..3 {
        let s = scm(seed);
        let pairs = generate_cf_pairs(&s, "a", "b", 100, seed + 10).unwrap();
        let sv = singular_values_sorted(&pairs.delta);
        assert!(sv[19] > 1e-6 * sv[0]);
        assert!(sv[20] < 1e-10 * sv[0]);
    }
}

#[test]
fn invariant_scores_are_unchanged_across_a_pair() {
    let s = scm(7);
    let pairs = generate_cf_pairs(&s, "a", "b", 50, 8).unwrap();
    let theta = s.invariant_block() * gaussian_rows(&mut stream(9, "theta", 0), 80, 1);
    let gap = (&pairs.left * &theta - &pairs.right * &theta).amax();
    assert!(gap <= 1e-8, "{gap}");
}

#[test]
fn twenty_clean_pairs_recover_the_spurious_span() {
    let s = scm(11);
    let pairs = generate_cf_pairs(&s, "a", "b", 20, 12).unwrap();
    let est = estimate_subspace(&pairs.delta, 20).unwrap();
    let dist = subspace_distance(&est.basis, &s.spurious_block()).unwrap();
    assert!(dist <= 1e-6, "{dist}");
}

#[test]
fn second_moment_has_intervention_rank_and_lives_on_the_spurious_block() {
    let s = scm(13);
    let sm = second_moment_closed_form(&s, "t").unwrap();
    assert_eq!(sm.numerical_rank(), 20);
    let top: DMatrix<f64> = sm.leading(20);
    assert!(subspace_distance(&top, &s.spurious_block()).unwrap() <= 1e-8);
}
