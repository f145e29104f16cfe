mod common;

use std::path::PathBuf;

use bitalloc::fixtures::{desk_fixture, random_samples, random_tiny_net};
use bitalloc::net::{LayerSpec, NetworkSpec, Sample};
use bitalloc::oracle::{
    exact_hessian_quadratic, exact_loss_perturbation, fd_hessian, ggn_reference,
    ranking_fidelity_many, spearman, QuantizedNetView,
};
use bitalloc::perturbation::{calibration_subset, perturbation_table, ProxyKind, QuantDeltas, StreamOptions};
use bitalloc::validate::ProxySummary;
use bitalloc::{Error, Tensor};
use bitalloc::oracle::FD_STEP;
use common::{rel, relu_pattern};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn linear_classifier(w: Vec<f64>, d: usize, p: usize) -> NetworkSpec {
    NetworkSpec::new(
        vec![
            LayerSpec::dense("fc", Tensor::from_f64(vec![p, d], &w).unwrap()).unwrap(),
            LayerSpec::softmax("softmax"),
        ],
        vec![d],
        p,
    )
    .unwrap()
}

#[test]
fn empty_assignment_changes_nothing() {
    let net = random_tiny_net(1).unwrap();
    let samples = random_samples(&net, 10, 2).unwrap();
    assert_eq!(exact_loss_perturbation(&net, &samples, &[]).unwrap(), 0.0);
}

#[test]
fn representable_weights_change_nothing() {
    let w = vec![-2.0, -1.0, 0.0, 1.0, 1.0, -2.0];
    let net = linear_classifier(w, 3, 2);
    let samples = random_samples(&net, 6, 3).unwrap();
    assert_eq!(exact_loss_perturbation(&net, &samples, &[("fc".into(), 2)]).unwrap(), 0.0);
}

#[test]
fn eight_bits_hurt_less_than_one_bit() {
    let net = random_tiny_net(4).unwrap();
    let samples = random_samples(&net, 32, 5).unwrap();
    let at = |b| {
        let a: Vec<(String, u32)> = net.weighted_names().into_iter().map(|n| (n, b)).collect();
        exact_loss_perturbation(&net, &samples, &a).unwrap()
    };
    assert!(at(8).abs() < at(1).abs(), "{} vs {}", at(8), at(1));
}

#[test]
fn view_keeps_unassigned_layers_exact() {
    let net = random_tiny_net(6).unwrap();
    let names = net.weighted_names();
    let view = QuantizedNetView::new(&net, &[(names[0].clone(), 3)]).unwrap();
    assert_ne!(view.weights().block(0), net.weight_set().block(0));
    for i in 1..names.len() {
        assert_eq!(view.weights().block(i), net.weight_set().block(i));
    }
    assert!(QuantizedNetView::new(&net, &[("nope".into(), 3)]).is_err());
}

/// Softmax regression has the closed-form Hessian
/// `H[(k,i),(l,j)] = mean_n (f_k delta_kl - f_k f_l) x_i x_j`.
#[test]
fn finite_difference_hessian_matches_softmax_regression_closed_form() {
    let (d, p) = (4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let w: Vec<f64> = (0..d * p).map(|_| rng.random_range(-1.0..1.0)).collect();
    let net = linear_classifier(w, d, p);
    let samples = random_samples(&net, 5, 22).unwrap();
    let ws = net.weight_set();
    let dim = d * p;
    let mut h = vec![0.0; dim * dim];
    for s in &samples {
        let f = net.forward_with(&ws, &s.input).unwrap();
        let x = s.input.to_f64();
        for k in 0..p {
            for l in 0..p {
                let c = if k == l { f[k] } else { 0.0 } - f[k] * f[l];
                for i in 0..d {
                    for j in 0..d {
                        h[(k * d + i) * dim + l * d + j] += c * x[i] * x[j] / samples.len() as f64;
                    }
                }
            }
        }
    }
    for trial in 0..5 {
        let dw: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.3..0.3)).collect();
        let want = bitalloc::oracle::quadratic_form(&h, &dw);
        let got = exact_hessian_quadratic(&net, &samples, &dw).unwrap();
        assert!(rel(got, want) < 1e-4, "trial {trial}: {got} vs {want}");
    }
    assert_eq!(exact_hessian_quadratic(&net, &samples, &vec![0.0; dim]).unwrap(), 0.0);
}

/// True when some coordinate step of `FD_STEP` flips a ReLU on some
/// sample, so the loss is not twice differentiable across the stencil.
fn stencil_crosses_kink(net: &NetworkSpec, samples: &[Sample]) -> bool {
    let ws = net.weight_set();
    let flat = ws.flatten();
    samples.iter().any(|s| {
        let x = s.input.to_f64();
        let base = relu_pattern(net, &ws, &x);
        (0..flat.len()).any(|j| {
            [FD_STEP, -FD_STEP].iter().any(|d| {
                let mut w = flat.clone();
                w[j] += d;
                relu_pattern(net, &ws.split_like(&w).unwrap(), &x) != base
            })
        })
    })
}

#[test]
fn finite_difference_hessian_is_nearly_symmetric() {
    let mut smooth = 0;
    for seed in 0..20 {
        let net = random_tiny_net(seed).unwrap();
        let samples = random_samples(&net, 4, seed + 9).unwrap();
        let h = fd_hessian(&net, &samples).unwrap();
        if stencil_crosses_kink(&net, &samples) {
            eprintln!("seed {seed}: stencil crosses a ReLU kink, asymmetry {:.2e}", h.asymmetry);
        } else {
            smooth += 1;
            assert!(h.asymmetry < 1e-3, "seed {seed}: {}", h.asymmetry);
        }
        for i in 0..h.dim {
            for j in 0..h.dim {
                assert_eq!(h.matrix[i * h.dim + j], h.matrix[j * h.dim + i]);
            }
        }
    }
    assert!(smooth >= 15, "only {smooth} of 20 fixtures are smooth across the stencil");
}

#[test]
fn hessian_budget_is_enforced() {
    let (net, samples) = desk_fixture(0, 2).unwrap();
    let err = exact_hessian_quadratic(&net, &samples, &vec![0.0; net.param_count()]).unwrap_err();
    assert!(matches!(err, Error::Budget { .. }), "{err}");
}

/// The second-order proxy drops the network-curvature term of the Hessian;
/// the gap is reported rather than bounded.
#[test]
fn proxy_versus_full_hessian_gap_is_reported() {
    let mut ratios = Vec::new();
    for seed in 0..8 {
        let net = random_tiny_net(seed).unwrap();
        let samples = random_samples(&net, 8, seed + 3).unwrap();
        let deltas = QuantDeltas::compute(&net, &[2]).unwrap();
        let t = perturbation_table(&net, &samples, &[2], ProxyKind::SecondOrder, StreamOptions::default()).unwrap();
        for l in 0..net.weighted_count() {
            let dw = deltas.single_layer(&net, l, 0);
            let full = exact_hessian_quadratic(&net, &samples, &dw).unwrap();
            assert!(full.is_finite());
            ratios.push(t.row(l)[0] / full);
        }
    }
    eprintln!("second-order proxy / finite-difference Hessian form: {ratios:.3?}");
}

#[test]
fn closed_form_two_class_fixture() {
    let w = [0.8f32, -0.3, 0.2, 0.5];
    let net = NetworkSpec::new(
        vec![
            LayerSpec::dense("fc", Tensor::new(vec![2, 2], w.to_vec()).unwrap()).unwrap(),
            LayerSpec::softmax("sm"),
        ],
        vec![2],
        2,
    )
    .unwrap();
    let x = [1.0, -2.0];
    let s = Sample::new(Tensor::from_f64(vec![2], &x).unwrap(), 0);
    let wf: Vec<f64> = w.iter().map(|&v| f64::from(v)).collect();
    let z = [wf[0] * x[0] + wf[1] * x[1], wf[2] * x[0] + wf[3] * x[1]];
    let f0 = 1.0 / (1.0 + (z[1] - z[0]).exp());
    let g = [(f0 - 1.0) * x[0], (f0 - 1.0) * x[1], (1.0 - f0) * x[0], (1.0 - f0) * x[1]];
    let dw = bitalloc::delta_w(&wf, 1, bitalloc::Signedness::Signed).unwrap();
    let dot: f64 = g.iter().zip(&dw).map(|(a, b)| a * b).sum();
    let hand = 0.5 * dot * dot;
    let reference = ggn_reference(&net, std::slice::from_ref(&s), &dw).unwrap();
    assert!(rel(reference, hand) < 1e-12, "{reference} vs {hand}");
}

#[test]
fn ranking_of_exact_values_against_themselves() {
    let v = [0.3, 0.1, 0.7, 0.2, 0.9];
    assert_eq!(spearman(&v, &v), Some(1.0));
    let neg: Vec<f64> = v.iter().map(|x| -x).collect();
    assert_eq!(spearman(&v, &neg), Some(-1.0));
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/ranking_fidelity.toml")
}

#[derive(serde::Serialize)]
struct Golden {
    fixture_seed: u64,
    samples: usize,
    bits: Vec<u32>,
    proxies: Vec<ProxySummary>,
}

/// Rank correlations on the desk fixture, compared with the committed
/// golden file. Set `UPDATE_GOLDEN=1` to regenerate it from both paths.
#[test]
fn ranking_fidelity_matches_golden() {
    let (net, samples) = desk_fixture(0, 4096).unwrap();
    let calib = calibration_subset(&samples, 1024, Some(0)).unwrap();
    let bits: Vec<u32> = (1..=8).collect();
    let reports = ranking_fidelity_many(&net, &calib, &bits, &ProxyKind::ALL).unwrap();
    let golden = Golden {
        fixture_seed: 0,
        samples: calib.len(),
        bits,
        proxies: reports
            .iter()
            .map(|r| ProxySummary {
                proxy: r.proxy.as_str().into(),
                pooled_spearman: r.pooled,
                per_bit: r
                    .per_bit
                    .iter()
                    .map(|&(bit, spearman)| bitalloc::validate::BitCorrelation { bit, spearman })
                    .collect(),
            })
            .collect(),
    };
    let text = toml::to_string(&golden).unwrap();
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(golden_path(), &text).unwrap();
    }
    let committed = std::fs::read_to_string(golden_path())
        .expect("golden file missing; run with UPDATE_GOLDEN=1 to create it");
    assert_eq!(text, committed, "ranking fidelity drifted from the golden file");
}
