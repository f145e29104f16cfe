//! Seeded synthetic networks and datasets.
//!
//! Everything here is a pure function of its seed so that tests, the
//! acceptance suite and the `fixture` subcommand all see the same models.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::net::{LayerSpec, NetworkSpec, Sample, WeightSet};
use crate::tensor::Tensor;

/// Input shape of the desk fixture.
pub const DESK_INPUT: [usize; 3] = [1, 8, 8];
/// Class count of the desk fixture.
pub const DESK_CLASSES: usize = 10;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::from_f64(shape, &data)
}

/// He-style initialisation for a weight of the given shape.
fn init_weight(rng: &mut ChaCha8Rng, shape: Vec<usize>, gain: f64) -> Result<Tensor> {
    let fan_in: usize = shape[1..].iter().product();
    normal_tensor(rng, shape, gain * (2.0 / fan_in as f64).sqrt())
}

/// A small random classifier with at most 500 parameters.
///
/// The architecture is drawn from a handful of families so that dense,
/// strided and padded convolution, and global average pooling all appear.
pub fn random_tiny_net(seed: u64) -> Result<NetworkSpec> {
    let mut r = rng(seed);
    let classes = r.random_range(2..=4);
    match r.random_range(0..3) {
        0 => {
            let d_in = r.random_range(3..=6);
            let hidden = r.random_range(3..=8);
            let layers = vec![
                LayerSpec::dense("fc1", init_weight(&mut r, vec![hidden, d_in], 1.0)?)?,
                LayerSpec::relu("relu1"),
                LayerSpec::dense("fc2", init_weight(&mut r, vec![classes, hidden], 1.0)?)?,
                LayerSpec::softmax("softmax"),
            ];
            NetworkSpec::new(layers, vec![d_in], classes)
        }
        1 => {
            let c_in = r.random_range(1..=2);
            let c_out = r.random_range(2..=3);
            let stride = r.random_range(1..=2);
            let padding = r.random_range(0..=1);
            let side = 5;
            let out = (side + 2 * padding - 3) / stride + 1;
            let flat = c_out * out * out;
            let layers = vec![
                LayerSpec::conv2d(
                    "conv1",
                    init_weight(&mut r, vec![c_out, c_in, 3, 3], 1.0)?,
                    stride,
                    padding,
                )?,
                LayerSpec::relu("relu1"),
                LayerSpec::flatten("flatten"),
                LayerSpec::dense("fc", init_weight(&mut r, vec![classes, flat], 1.0)?)?,
                LayerSpec::softmax("softmax"),
            ];
            NetworkSpec::new(layers, vec![c_in, side, side], classes)
        }
        _ => {
            let c_mid = r.random_range(2..=4);
            let c_out = r.random_range(3..=5);
            let layers = vec![
                LayerSpec::conv2d("conv1", init_weight(&mut r, vec![c_mid, 1, 3, 3], 1.0)?, 1, 1)?,
                LayerSpec::relu("relu1"),
                LayerSpec::conv2d(
                    "conv2",
                    init_weight(&mut r, vec![c_out, c_mid, 3, 3], 1.0)?,
                    2,
                    1,
                )?,
                LayerSpec::relu("relu2"),
                LayerSpec::global_avg_pool("gap"),
                LayerSpec::dense("fc", init_weight(&mut r, vec![classes, c_out], 1.5)?)?,
                LayerSpec::softmax("softmax"),
            ];
            NetworkSpec::new(layers, vec![1, 6, 6], classes)
        }
    }
}

/// Standard-normal inputs with uniform random labels, shaped for `net`.
pub fn random_samples(net: &NetworkSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let input = normal_tensor(&mut r, net.input_shape().to_vec(), 1.0)?;
            let label = r.random_range(0..net.classes());
            Ok(Sample::new(input, label))
        })
        .collect()
}

/// Class-prototype classification task: each sample is its class prototype
/// plus isotropic Gaussian noise.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    shape: Vec<usize>,
    prototypes: Vec<Vec<f64>>,
    noise: f64,
}

impl SyntheticTask {
    pub fn new(shape: Vec<usize>, classes: usize, noise: f64, seed: u64) -> Self {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, 1.0).expect("unit normal");
        let prototypes = (0..classes)
            .map(|_| (0..n).map(|_| dist.sample(&mut r)).collect())
            .collect();
        SyntheticTask {
            shape,
            prototypes,
            noise,
        }
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    /// `n` samples with labels cycling through the classes in shuffled order.
    pub fn samples(&self, n: usize, seed: u64) -> Result<Vec<Sample>> {
        let mut r = rng(seed);
        let dist = Normal::new(0.0, self.noise).expect("positive noise");
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes()).collect();
        labels.shuffle(&mut r);
        labels
            .into_iter()
            .map(|label| {
                let data: Vec<f64> = self.prototypes[label]
                    .iter()
                    .map(|p| p + dist.sample(&mut r))
                    .collect();
                Ok(Sample::new(Tensor::from_f64(self.shape.clone(), &data)?, label))
            })
            .collect()
    }
}

/// Plain minibatch SGD on the mean cross-entropy.
pub fn train_sgd(
    net: &NetworkSpec,
    samples: &[Sample],
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<NetworkSpec> {
    let mut r = rng(seed);
    let mut ws = net.weight_set();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for _ in 0..epochs {
        order.shuffle(&mut r);
        for idx in order.chunks(batch.max(1)) {
            let batch: Vec<Sample> = idx.iter().map(|&i| samples[i].clone()).collect();
            let g = net.mean_grad_with(&ws, &batch)?;
            let blocks = ws
                .blocks()
                .iter()
                .zip(g.blocks())
                .map(|(w, g)| w.iter().zip(g).map(|(w, g)| w - lr * g).collect())
                .collect();
            ws = WeightSet::new(blocks);
        }
    }
    net.with_weights(&ws)
}

/// The untrained desk architecture: two convolutions and two dense layers,
/// 18,248 parameters on 1×8×8 inputs with 10 classes.
pub fn desk_net(seed: u64) -> Result<NetworkSpec> {
    let mut r = rng(seed);
    let layers = vec![
        LayerSpec::conv2d("conv1", init_weight(&mut r, vec![8, 1, 3, 3], 1.0)?, 1, 1)?,
        LayerSpec::relu("relu1"),
        LayerSpec::conv2d("conv2", init_weight(&mut r, vec![16, 8, 3, 3], 1.0)?, 2, 1)?,
        LayerSpec::relu("relu2"),
        LayerSpec::flatten("flatten"),
        LayerSpec::dense("fc1", init_weight(&mut r, vec![64, 256], 1.0)?)?,
        LayerSpec::relu("relu3"),
        LayerSpec::dense("fc2", init_weight(&mut r, vec![DESK_CLASSES, 64], 1.0)?)?,
        LayerSpec::softmax("softmax"),
    ];
    NetworkSpec::new(layers, DESK_INPUT.to_vec(), DESK_CLASSES)
}

/// The synthetic task the desk fixture is trained on.
pub fn desk_task(seed: u64) -> SyntheticTask {
    SyntheticTask::new(DESK_INPUT.to_vec(), DESK_CLASSES, 1.5, seed ^ 0x7a5c)
}

/// Desk network briefly trained on its task, plus `n` held-out samples
/// drawn from the same task for calibration.
pub fn desk_fixture(seed: u64, n: usize) -> Result<(NetworkSpec, Vec<Sample>)> {
    let task = desk_task(seed);
    let train = task.samples(512, seed.wrapping_add(1))?;
    let net = train_sgd(&desk_net(seed)?, &train, 3, 32, 0.05, seed.wrapping_add(2))?;
    let calib = task.samples(n, seed.wrapping_add(3))?;
    Ok((net, calib))
}

/// Two dense layers with a ReLU between them, trained on a small task.
pub fn two_layer_fixture(seed: u64, n: usize) -> Result<(NetworkSpec, Vec<Sample>)> {
    let task = SyntheticTask::new(vec![12], 4, 1.0, seed ^ 0x51);
    let mut r = rng(seed);
    let layers = vec![
        LayerSpec::dense("fc1", init_weight(&mut r, vec![16, 12], 1.0)?)?,
        LayerSpec::relu("relu1"),
        LayerSpec::dense("fc2", init_weight(&mut r, vec![4, 16], 1.0)?)?,
        LayerSpec::softmax("softmax"),
    ];
    let net = NetworkSpec::new(layers, vec![12], 4)?;
    let train = task.samples(256, seed.wrapping_add(1))?;
    let net = train_sgd(&net, &train, 5, 16, 0.1, seed.wrapping_add(2))?;
    Ok((net, task.samples(n, seed.wrapping_add(3))?))
}
