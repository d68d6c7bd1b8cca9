//! Independent oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeMap;

use compprof::network::{init_model, LayerSpec};
use compprof::profiles::{ClassProfileModel, NeuronHistogram, Normalization, ProfileModelSet, StdMode};
use compprof::rng;
use compprof::stats::{cliffs_delta, epps_singleton_default};
use ndarray::Array2;
use num_bigint::BigUint;
use num_traits::ToPrimitive;
use rand::Rng;
use serde::Deserialize;

/// Natural log of an arbitrarily large integer.
fn ln_big(x: &BigUint) -> f64 {
    let bits = x.bits();
    if bits <= 64 {
        return (x.to_u64().unwrap() as f64).ln();
    }
    let shift = bits - 64;
    let top = (x >> shift).to_u64().unwrap() as f64;
    top.ln() + shift as f64 * std::f64::consts::LN_2
}

pub struct ToyInstance {
    pub set: ProfileModelSet,
    pub acts: Vec<f32>,
    pub class_id: usize,
}

/// Random 8-neuron profile set with a mix of observed, unobserved and dead
/// neurons, and one activation vector.
pub fn toy_instance(g: &mut rng::Generator) -> ToyInstance {
    let num_classes = g.random_range(2..=10usize);
    let normalization = if g.random_bool(0.5) { Normalization::Verbatim } else { Normalization::PerClass };
    let mut total = 0u64;
    let classes: Vec<ClassProfileModel> = (0..num_classes)
        .map(|k| {
            let n = g.random_range(5..=6000u64);
            total += n;
            let neurons = (0..8)
                .map(|_| {
                    if g.random_bool(0.1) {
                        return NeuronHistogram {
                            avg: 0.0,
                            std: 0.0,
                            width: 0.0,
                            dead: true,
                            sample_count: n,
                            bins: BTreeMap::new(),
                        };
                    }
                    let width = g.random_range(0.05..3.0);
                    let mut bins = BTreeMap::new();
                    let mut left = n;
                    let mut b = g.random_range(-2..3i64);
                    while left > 0 {
                        let take = if g.random_bool(0.3) { left } else { g.random_range(1..=left) };
                        *bins.entry(b).or_insert(0) += take;
                        left -= take;
                        b += g.random_range(1..4i64);
                    }
                    NeuronHistogram { avg: 1.0, std: width, width, dead: false, sample_count: n, bins }
                })
                .collect();
            ClassProfileModel { class_id: k, class_sample_count: n, neurons }
        })
        .collect();
    let extra = g.random_range(0..5000u64);
    let set = ProfileModelSet {
        layer: 1,
        c: 1.0,
        std_mode: StdMode::Population,
        normalization,
        floor_count: 0.5,
        total_train_count: total + extra,
        num_classes,
        classes,
    };
    let acts = (0..8).map(|_| g.random_range(-1.0f32..12.0)).collect();
    let class_id = g.random_range(0..num_classes);
    ToyInstance { set, acts, class_id }
}

/// `−ln Π p` with the product formed exactly as a ratio of big integers.
pub fn product_form_distance(inst: &ToyInstance) -> f64 {
    let set = &inst.set;
    let class = &set.classes[inst.class_id];
    let denom_unit: u64 = match set.normalization {
        Normalization::Verbatim => set.total_train_count * set.num_classes as u64,
        Normalization::PerClass => class.class_sample_count,
    };
    let mut num = BigUint::from(1u32);
    let mut den = BigUint::from(1u32);
    for (h, &a) in class.neurons.iter().zip(&inst.acts) {
        if h.dead {
            continue;
        }
        let bin = (f64::from(a) / h.width).floor() as i64;
        match h.bins.get(&bin) {
            Some(&f) => {
                num *= f;
                den *= denom_unit;
            }
            None => {
                // floor = 0.5 / denominator = 1 / (2 · denominator)
                den *= 2 * denom_unit;
            }
        }
    }
    ln_big(&den) - ln_big(&num)
}

/// Largest relative gap between the sum-of-logs and product forms.
pub fn distance_oracle_trials(trials: usize, seed: u64) -> f64 {
    let mut g = rng::generator(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let inst = toy_instance(&mut g);
        let got = inst.set.distance_of(&inst.acts, inst.class_id).unwrap();
        let want = product_form_distance(&inst);
        let rel = (got - want).abs() / want.abs().max(1e-300);
        worst = worst.max(if want == 0.0 { got.abs() } else { rel });
    }
    worst
}

pub fn brute_force_delta(a: &[f64], b: &[f64]) -> f64 {
    let mut s: i64 = 0;
    for x in a {
        for y in b {
            s += i64::from(x > y) - i64::from(x < y);
        }
    }
    s as f64 / (a.len() * b.len()) as f64
}

/// Number of random instances on which the optimized delta differs from brute force.
pub fn cliffs_mismatches(trials: usize, seed: u64) -> usize {
    let mut g = rng::generator(seed);
    (0..trials)
        .filter(|_| {
            let n = g.random_range(1..=50);
            let m = g.random_range(1..=50);
            let spread = g.random_range(3..40u32);
            let a: Vec<f64> = (0..n).map(|_| f64::from(g.random_range(0..spread)) * 0.5).collect();
            let b: Vec<f64> = (0..m).map(|_| f64::from(g.random_range(0..spread)) * 0.5 + 0.25 * f64::from(g.random_range(0..3u8))).collect();
            cliffs_delta(&a, &b).unwrap().delta != brute_force_delta(&a, &b)
        })
        .count()
}

#[derive(Deserialize)]
pub struct ReferencePair {
    pub name: String,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub es_statistic: f64,
    pub es_pvalue: f64,
}

#[derive(Deserialize)]
struct ReferenceFile {
    pairs: Vec<ReferencePair>,
}

pub fn reference_pairs() -> Vec<ReferencePair> {
    let text = include_str!("../fixtures/two_sample_reference.json");
    serde_json::from_str::<ReferenceFile>(text).unwrap().pairs
}

pub fn within_oracle_tolerance(got: f64, want: f64) -> bool {
    (got - want).abs() <= 1e-6 * want.abs().max(1.0)
}

/// Names of fixture pairs whose ES statistic or p-value misses the reference.
pub fn es_fixture_misses() -> Vec<String> {
    reference_pairs()
        .into_iter()
        .filter(|p| match epps_singleton_default(&p.a, &p.b) {
            Ok(r) => !(within_oracle_tolerance(r.statistic, p.es_statistic) && within_oracle_tolerance(r.p_value, p.es_pvalue)),
            Err(_) => true,
        })
        .map(|p| p.name)
        .collect()
}

/// Worst relative error between analytic and central-difference gradients on
/// a 4-5-3 network (43 parameters), evaluated in f64.
pub fn gradient_check(seed: u64) -> (usize, f64) {
    let model = init_model(&LayerSpec::chain(&[4, 5, 3]), seed).unwrap().cast::<f64>();
    let mut g = rng::generator(seed ^ 0x5eed);
    let inputs = Array2::from_shape_fn((6, 4), |_| g.random_range(-1.0..1.0));
    let targets: Vec<usize> = (0..6).map(|i| i % 3).collect();
    let analytic = model.loss_and_gradients(inputs.view(), &targets).unwrap();
    let loss = |m: &compprof::network::NetworkModel<f64>| m.loss_and_gradients(inputs.view(), &targets).unwrap().loss;

    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for j in 0..model.num_layers() {
        let (gw, gb) = &analytic.layers[j];
        let shape = gw.dim();
        let mut params: Vec<(Option<(usize, usize)>, usize, f64)> = Vec::new();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                params.push((Some((r, c)), 0, gw[[r, c]]));
            }
        }
        for r in 0..gb.len() {
            params.push((None, r, gb[r]));
        }
        for (wi, bi, grad) in params {
            let bump = |delta: f64| {
                let mut m = model.clone();
                let layer = &mut m.layers_mut()[j];
                match wi {
                    Some(rc) => layer.weights[rc] += delta,
                    None => layer.biases[bi] += delta,
                }
                loss(&m)
            };
            let numeric = (bump(h) - bump(-h)) / (2.0 * h);
            let scale = grad.abs().max(numeric.abs());
            let err = if scale < 1e-9 { (grad - numeric).abs() } else { (grad - numeric).abs() / scale };
            worst = worst.max(err);
            count += 1;
        }
    }
    (count, worst)
}
