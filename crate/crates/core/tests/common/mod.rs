//! Test-only helpers shared by the integration suites.
#![allow(dead_code)]

use bitalloc::net::{LayerKind, NetworkSpec, Sample, WeightSet};

/// Straightforward forward pass written independently of the library's
/// evaluator: plain loops over the layer list, probabilities out.
pub fn reference_forward(net: &NetworkSpec, input: &[f64]) -> Vec<f64> {
    reference_forward_with(net, &net.weight_set(), input)
}

pub fn reference_forward_with(net: &NetworkSpec, ws: &WeightSet, input: &[f64]) -> Vec<f64> {
    reference_trace(net, ws, input).0
}

/// Which ReLU units are active, in layer order.
pub fn relu_pattern(net: &NetworkSpec, ws: &WeightSet, input: &[f64]) -> Vec<bool> {
    reference_trace(net, ws, input).1
}

fn reference_trace(net: &NetworkSpec, ws: &WeightSet, input: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let mut pattern = Vec::new();
    let mut shape = net.input_shape().to_vec();
    let mut x = input.to_vec();
    let mut block = 0;
    for layer in net.layers() {
        match layer.kind() {
            LayerKind::Dense => {
                let wshape = layer.weight().unwrap().shape();
                let (out, inp) = (wshape[0], wshape[1]);
                let w = ws.block(block);
                block += 1;
                let mut y = vec![0.0; out];
                for (o, yo) in y.iter_mut().enumerate() {
                    for i in 0..inp {
                        *yo += w[o * inp + i] * x[i];
                    }
                }
                x = y;
                shape = vec![out];
            }
            LayerKind::Conv2d { stride, padding } => {
                let wshape = layer.weight().unwrap().shape();
                let (co, ci, k) = (wshape[0], wshape[1], wshape[2]);
                let (h, wd) = (shape[1] as isize, shape[2] as isize);
                let oh = (shape[1] + 2 * padding - k) / stride + 1;
                let ow = (shape[2] + 2 * padding - k) / stride + 1;
                let w = ws.block(block);
                block += 1;
                let mut y = vec![0.0; co * oh * ow];
                for o in 0..co {
                    for r in 0..oh {
                        for c in 0..ow {
                            let mut acc = 0.0;
                            for i in 0..ci {
                                for kr in 0..k {
                                    for kc in 0..k {
                                        let ir = (r * stride + kr) as isize - padding as isize;
                                        let ic = (c * stride + kc) as isize - padding as isize;
                                        if ir < 0 || ic < 0 || ir >= h || ic >= wd {
                                            continue;
                                        }
                                        let xi = (i as isize * h + ir) * wd + ic;
                                        acc += w[((o * ci + i) * k + kr) * k + kc] * x[xi as usize];
                                    }
                                }
                            }
                            y[(o * oh + r) * ow + c] = acc;
                        }
                    }
                }
                x = y;
                shape = vec![co, oh, ow];
            }
            LayerKind::Relu => {
                pattern.extend(x.iter().map(|&v| v > 0.0));
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            LayerKind::Flatten => shape = vec![x.len()],
            LayerKind::GlobalAvgPool => {
                let per = shape[1..].iter().product::<usize>();
                x = x.chunks(per).map(|c| c.iter().sum::<f64>() / per as f64).collect();
                shape = vec![shape[0]];
            }
            LayerKind::Softmax => {
                let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                let z: f64 = e.iter().sum();
                x = e.iter().map(|v| v / z).collect();
            }
        }
    }
    (x, pattern)
}

pub fn reference_loss(net: &NetworkSpec, ws: &WeightSet, s: &Sample) -> f64 {
    -reference_forward_with(net, ws, &s.input.to_f64())[s.label].ln()
}

/// Relative difference, falling back to absolute near zero.
pub fn rel(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

use bitalloc::mckp::{MckpClass, MckpInstance};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::LN_2;

const LN_4: f64 = 2.0 * LN_2;

/// Random knapsack instance with up to `max_classes` classes of up to
/// `max_items` bit choices each and a capacity of at most 5000 bits between
/// the all-minimum and all-maximum weights. Losses fall by 4x per bit on
/// average, as quantization error does, with enough multiplicative noise
/// that dominated items are common.
pub fn random_instance(seed: u64, max_classes: usize, max_items: usize) -> MckpInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=max_classes);
    let classes: Vec<MckpClass> = (0..n)
        .map(|c| {
            let m = rng.random_range(1..=max_items);
            let mut bits: Vec<u32> = sample(&mut rng, 8, m).into_iter().map(|b| b as u32 + 1).collect();
            bits.sort_unstable();
            let params = rng.random_range(10..=100);
            let scale: f64 = rng.random_range(0.01..1.0);
            let losses: Vec<(u32, f64)> = bits
                .iter()
                .map(|&b| {
                    let noise: f64 = rng.random_range(-1.2..1.2);
                    (b, scale * (-LN_4 * f64::from(b) + noise).exp())
                })
                .collect();
            MckpClass::from_losses(format!("c{c}"), params, &losses)
        })
        .collect();
    let probe = MckpInstance::new(classes.clone(), 0).unwrap();
    let (lo, hi) = (probe.min_weight(), probe.max_weight().min(5000).max(probe.min_weight()));
    let cap = rng.random_range(lo..=hi);
    MckpInstance::new(classes, cap).unwrap()
}

/// Proptest settings for integration suites, which have no `src/` root for
/// regression files.
pub fn prop_config(cases: u32) -> proptest::test_runner::Config {
    proptest::test_runner::Config {
        cases,
        failure_persistence: None,
        ..Default::default()
    }
}
