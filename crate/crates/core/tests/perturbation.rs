mod common;

use bitalloc::fixtures::{desk_fixture, random_samples, random_tiny_net};
use bitalloc::net::Sample;
use bitalloc::oracle::{ggn_matrix, ggn_reference, quadratic_form};
use bitalloc::perturbation::{
    convergence_profile, perturbation_table, PerturbationTable, ProxyKind, QuantDeltas,
    StreamOptions,
};
use common::rel;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BITS: [u32; 4] = [1, 2, 4, 8];

fn table(net: &bitalloc::NetworkSpec, samples: &[Sample], proxy: ProxyKind) -> PerturbationTable {
    perturbation_table(net, samples, &BITS, proxy, StreamOptions::default()).unwrap()
}

#[test]
fn second_order_equals_gauss_newton_quadratic_form() {
    for seed in 0..12 {
        let net = random_tiny_net(seed).unwrap();
        let samples = random_samples(&net, 8, seed + 40).unwrap();
        let t = table(&net, &samples, ProxyKind::SecondOrder);
        let deltas = QuantDeltas::compute(&net, &BITS).unwrap();
        for l in 0..net.weighted_count() {
            for (j, bit) in BITS.iter().enumerate() {
                let dw = deltas.single_layer(&net, l, j);
                let reference = ggn_reference(&net, &samples, &dw).unwrap();
                let got = t.row(l)[j];
                assert!(
                    rel(got, reference) <= 1e-10,
                    "seed {seed} layer {l} bit {bit}: {got} vs {reference}"
                );
            }
        }
    }
}

#[test]
fn zero_perturbation_gives_zero_reference() {
    let net = random_tiny_net(2).unwrap();
    let samples = random_samples(&net, 3, 1).unwrap();
    assert_eq!(ggn_reference(&net, &samples, &vec![0.0; net.param_count()]).unwrap(), 0.0);
}

/// With only one layer perturbed the cross-layer blocks multiply zeros, so
/// the full Gauss-Newton quadratic form reduces to the table entry.
#[test]
fn single_layer_perturbation_matches_full_quadratic_form() {
    for seed in [3, 11, 19] {
        let net = random_tiny_net(seed).unwrap();
        let samples = random_samples(&net, 6, seed).unwrap();
        let h = ggn_matrix(&net, &samples).unwrap();
        let t = table(&net, &samples, ProxyKind::SecondOrder);
        let deltas = QuantDeltas::compute(&net, &BITS).unwrap();
        for l in 0..net.weighted_count() {
            for j in 0..BITS.len() {
                let full = quadratic_form(&h, &deltas.single_layer(&net, l, j));
                assert!(rel(full, t.row(l)[j]) <= 1e-10, "seed {seed}: {full} vs {}", t.row(l)[j]);
            }
        }
    }
}

#[test]
fn table_is_sample_weighted_average_over_concatenation() {
    let net = random_tiny_net(5).unwrap();
    let a = random_samples(&net, 7, 1).unwrap();
    let b = random_samples(&net, 12, 2).unwrap();
    let ab: Vec<Sample> = a.iter().chain(&b).cloned().collect();
    for proxy in [ProxyKind::SecondOrder, ProxyKind::HessianFree] {
        let (ta, tb, tab) = (table(&net, &a, proxy), table(&net, &b, proxy), table(&net, &ab, proxy));
        for ((x, y), z) in ta.iter().zip(tb.iter()).zip(tab.iter()) {
            let avg = (7.0 * x.2 + 12.0 * y.2) / 19.0;
            assert!(rel(avg, z.2) <= 1e-12, "{proxy} {} {}: {avg} vs {}", z.0, z.1, z.2);
        }
    }
}

#[test]
fn equal_checkpoints_give_identical_tables() {
    let net = random_tiny_net(8).unwrap();
    let samples = random_samples(&net, 20, 3).unwrap();
    let p = convergence_profile(&net, &samples, &BITS, &[10, 10], ProxyKind::SecondOrder, Some(4)).unwrap();
    assert_eq!(p[0].1, p[1].1);
}

#[test]
fn duplicated_data_converges_to_the_same_table() {
    let net = random_tiny_net(9).unwrap();
    let once = random_samples(&net, 16, 5).unwrap();
    let twice: Vec<Sample> = once.iter().chain(&once).cloned().collect();
    let p = convergence_profile(&net, &twice, &BITS, &[16, 32], ProxyKind::SecondOrder, None).unwrap();
    for (a, b) in p[0].1.iter().zip(p[1].1.iter()) {
        assert!(rel(a.2, b.2) <= 1e-12, "{a:?} vs {b:?}");
    }
}

#[test]
fn profile_prefixes_match_direct_tables() {
    let net = random_tiny_net(10).unwrap();
    let samples = random_samples(&net, 40, 6).unwrap();
    let p = convergence_profile(&net, &samples, &BITS, &[5, 17, 40], ProxyKind::SecondOrder, Some(9)).unwrap();
    let order = bitalloc::perturbation::calibration_order(40, Some(9));
    for (n, t) in &p {
        let prefix: Vec<Sample> = order[..*n].iter().map(|&i| samples[i].clone()).collect();
        let direct = table(&net, &prefix, ProxyKind::SecondOrder);
        assert_eq!(&direct, &t.clone().with_seed(None), "checkpoint {n}");
    }
}

#[test]
fn deterministic_mode_is_independent_of_thread_count() {
    let (net, samples) = desk_fixture(1, 300).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| table(&net, &samples, ProxyKind::Combined))
    };
    let one = run(1);
    assert_eq!(one, run(3));
    let fast = perturbation_table(
        &net,
        &samples,
        &BITS,
        ProxyKind::Combined,
        StreamOptions { deterministic: false },
    )
    .unwrap();
    for (a, b) in one.iter().zip(fast.iter()) {
        assert!(rel(a.2, b.2) <= 1e-12);
    }
}

#[test]
fn first_order_and_hessian_free_match_definitions() {
    let net = random_tiny_net(12).unwrap();
    let samples = random_samples(&net, 9, 2).unwrap();
    let deltas = QuantDeltas::compute(&net, &BITS).unwrap();
    let g = net.mean_grad_with(&net.weight_set(), &samples).unwrap();
    let first = table(&net, &samples, ProxyKind::FirstOrder);
    let free = table(&net, &samples, ProxyKind::HessianFree);
    let second = table(&net, &samples, ProxyKind::SecondOrder);
    let combined = table(&net, &samples, ProxyKind::Combined);
    for l in 0..net.weighted_count() {
        for j in 0..BITS.len() {
            let dw = deltas.get(l, j);
            let dot: f64 = g.block(l).iter().zip(dw).map(|(a, b)| a * b).sum();
            assert!(rel(first.row(l)[j], dot.abs()) <= 1e-12);
            let half: f64 = 0.5 * dw.iter().map(|d| d * d).sum::<f64>();
            assert!(rel(free.row(l)[j], half) <= 1e-15);
            assert!(rel(combined.row(l)[j], first.row(l)[j] + second.row(l)[j]) <= 1e-15);
        }
    }
}

fn relative_spread(tables: &[PerturbationTable]) -> f64 {
    let cells = tables[0].layers().len() * tables[0].bits().len();
    let mut total = 0.0;
    for c in 0..cells {
        let v: Vec<f64> = tables
            .iter()
            .map(|t| t.row(c / t.bits().len())[c % t.bits().len()])
            .collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        total += var.sqrt() / mean;
    }
    total / cells as f64
}

/// Estimates from 128 samples scatter more than estimates from 1024.
#[test]
fn small_subsets_scatter_more_than_full_resamples() {
    let (net, samples) = desk_fixture(0, 1024).unwrap();
    let bits = [2, 4, 6];
    let t = |s: &[Sample]| {
        perturbation_table(&net, s, &bits, ProxyKind::SecondOrder, StreamOptions::default()).unwrap()
    };
    let disjoint: Vec<_> = samples.chunks(128).take(8).map(t).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let boot: Vec<_> = (0..8)
        .map(|_| {
            let s: Vec<Sample> = (0..1024).map(|_| samples[rng.random_range(0..1024)].clone()).collect();
            t(&s)
        })
        .collect();
    let (small, large) = (relative_spread(&disjoint), relative_spread(&boot));
    assert!(small > large, "128-sample spread {small} <= 1024-sample spread {large}");
}

#[test]
fn csv_export_round_trips() {
    let net = random_tiny_net(13).unwrap();
    let samples = random_samples(&net, 5, 5).unwrap();
    let t = table(&net, &samples, ProxyKind::SecondOrder);
    let mut buf = Vec::new();
    t.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("layer,bit,delta_loss\n"));
    let back = PerturbationTable::read_csv(&buf[..], 5, ProxyKind::SecondOrder).unwrap();
    assert_eq!(back, t);
}

proptest! {
    #![proptest_config(common::prop_config(32))]

    #[test]
    fn every_proxy_is_non_negative(seed in 0u64..5_000, n in 1usize..6, bit in 1u32..9) {
        let net = random_tiny_net(seed).unwrap();
        let samples = random_samples(&net, n, seed + 1).unwrap();
        for proxy in ProxyKind::ALL {
            let t = perturbation_table(&net, &samples, &[bit], proxy, StreamOptions::default()).unwrap();
            prop_assert!(t.iter().all(|(_, _, v)| v >= 0.0 && v.is_finite()));
        }
    }
}
