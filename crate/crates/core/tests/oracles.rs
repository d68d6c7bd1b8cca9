mod common;

#[test]
fn sum_of_logs_matches_exact_product() {
    let worst = common::distance_oracle_trials(300, 11);
    assert!(worst <= 1e-9, "worst relative gap {worst}");
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in [1, 2, 3] {
        let (count, worst) = common::gradient_check(seed);
        assert_eq!(count, 43);
        assert!(worst <= 1e-4, "seed {seed}: worst relative error {worst}");
    }
}

#[test]
fn es_fixture_is_matched() {
    assert!(common::es_fixture_misses().is_empty());
}

#[test]
fn cliffs_optimized_equals_brute_force() {
    assert_eq!(common::cliffs_mismatches(200, 3), 0);
}
