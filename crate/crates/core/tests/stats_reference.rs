use compprof::rng;
use compprof::stats::{
    benjamini_hochberg, cliffs_delta, epps_singleton_default, ks_test, rank_sum_test,
};
use proptest::prelude::*;
use rand::Rng;
use serde::Deserialize;

#[derive(Deserialize)]
struct Pair {
    name: String,
    a: Vec<f64>,
    b: Vec<f64>,
    es_statistic: f64,
    es_pvalue: f64,
    ks_statistic: f64,
    ks_pvalue: f64,
    rank_sum_z: f64,
    rank_sum_pvalue: f64,
}

#[derive(Deserialize)]
struct Fixture {
    pairs: Vec<Pair>,
}

fn fixture() -> Fixture {
    let text = include_str!("fixtures/two_sample_reference.json");
    serde_json::from_str(text).unwrap()
}

fn close(got: f64, want: f64) -> bool {
    (got - want).abs() <= 1e-6 * want.abs().max(1.0)
}

#[test]
fn epps_singleton_matches_reference() {
    for p in fixture().pairs {
        let r = epps_singleton_default(&p.a, &p.b).unwrap();
        assert!(close(r.statistic, p.es_statistic), "{}: {} vs {}", p.name, r.statistic, p.es_statistic);
        assert!(close(r.p_value, p.es_pvalue), "{}: {} vs {}", p.name, r.p_value, p.es_pvalue);
    }
}

#[test]
fn identical_fixture_is_not_rejected() {
    let f = fixture();
    let p = f.pairs.iter().find(|p| p.name == "identical_normal_100").unwrap();
    assert!(epps_singleton_default(&p.a, &p.b).unwrap().p_value > 0.9);
}

#[test]
fn ks_and_rank_sum_match_reference() {
    for p in fixture().pairs {
        let ks = ks_test(&p.a, &p.b).unwrap();
        assert!(close(ks.statistic, p.ks_statistic), "{} ks D", p.name);
        assert!(close(ks.p_value, p.ks_pvalue), "{} ks p {} vs {}", p.name, ks.p_value, p.ks_pvalue);
        if p.name == "identical_normal_100" {
            continue;
        }
        let rs = rank_sum_test(&p.a, &p.b).unwrap();
        assert!(close(rs.statistic, p.rank_sum_z), "{} z", p.name);
        assert!(close(rs.p_value, p.rank_sum_pvalue), "{} rank-sum p", p.name);
    }
}

#[test]
fn es_is_affine_invariant() {
    for p in fixture().pairs {
        let t = |xs: &[f64]| xs.iter().map(|v| 2.0 * v + 3.0).collect::<Vec<_>>();
        let base = epps_singleton_default(&p.a, &p.b).unwrap();
        let moved = epps_singleton_default(&t(&p.a), &t(&p.b)).unwrap();
        let tol = 1e-9 * base.statistic.abs().max(1.0);
        assert!((base.statistic - moved.statistic).abs() <= tol, "{}", p.name);
    }
}

fn brute_force_delta(a: &[f64], b: &[f64]) -> f64 {
    let mut s: i64 = 0;
    for x in a {
        for y in b {
            s += i64::from(x > y) - i64::from(x < y);
        }
    }
    s as f64 / (a.len() * b.len()) as f64
}

#[test]
fn cliffs_delta_equals_brute_force() {
    let mut g = rng::generator(2024);
    for _ in 0..200 {
        let n = g.random_range(1..=50);
        let m = g.random_range(1..=50);
        // small integer support forces plenty of ties
        let a: Vec<f64> = (0..n).map(|_| f64::from(g.random_range(0..12u8))).collect();
        let b: Vec<f64> = (0..m).map(|_| f64::from(g.random_range(0..12u8)) + 0.5 * f64::from(g.random_range(0..2u8))).collect();
        assert_eq!(cliffs_delta(&a, &b).unwrap().delta, brute_force_delta(&a, &b));
    }
}

proptest! {
    #[test]
    fn cliffs_delta_is_antisymmetric(
        a in prop::collection::vec(-100.0f64..100.0, 1..40),
        b in prop::collection::vec(-100.0f64..100.0, 1..40),
    ) {
        let ab = cliffs_delta(&a, &b).unwrap().delta;
        let ba = cliffs_delta(&b, &a).unwrap().delta;
        prop_assert_eq!(ab, -ba);
        prop_assert!(ab.abs() <= 1.0);
    }

    #[test]
    fn bh_is_monotone_and_prefix(
        ps in prop::collection::vec(0.0f64..=1.0, 1..30),
        alpha in 0.001f64..0.2,
        bump in 0.0f64..0.5,
    ) {
        let lo = benjamini_hochberg(&ps, alpha).unwrap();
        let hi = benjamini_hochberg(&ps, (alpha + bump).min(1.0)).unwrap();
        for (l, h) in lo.iter().zip(&hi) {
            prop_assert!(!l || *h);
        }
        let max_rejected = ps.iter().zip(&lo).filter(|(_, r)| **r).map(|(p, _)| *p).fold(f64::NEG_INFINITY, f64::max);
        for (p, r) in ps.iter().zip(&lo) {
            if *p < max_rejected {
                prop_assert!(*r);
            }
        }
    }

    #[test]
    fn p_values_are_probabilities(
        a in prop::collection::vec(-10.0f64..10.0, 5..40),
        b in prop::collection::vec(-10.0f64..10.0, 5..40),
    ) {
        if let Ok(r) = epps_singleton_default(&a, &b) {
            prop_assert!((0.0..=1.0).contains(&r.p_value) && r.statistic.is_finite());
        }
        let ks = ks_test(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ks.p_value));
        if let Ok(rs) = rank_sum_test(&a, &b) {
            prop_assert!((0.0..=1.0).contains(&rs.p_value));
        }
    }
}
