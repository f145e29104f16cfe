//! Small feed-forward classifiers: shape checking, forward evaluation and
//! reverse-mode weight gradients.
//!
//! Weights live in the [`NetworkSpec`] as single-precision tensors. All
//! arithmetic runs in `f64`, and every evaluation entry point has a `*_with`
//! variant that takes an explicit [`WeightSet`] so callers can evaluate the
//! same graph at perturbed or quantized weights without rebuilding it.

use std::collections::HashSet;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Weight shape `(out_features, in_features)`, no bias.
    Dense,
    /// Weight shape `(c_out, c_in, k, k)`, no bias.
    Conv2d { stride: usize, padding: usize },
    Relu,
    Flatten,
    GlobalAvgPool,
    Softmax,
}

impl LayerKind {
    pub fn is_weighted(&self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2d { .. })
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::Flatten => "flatten",
            LayerKind::GlobalAvgPool => "global-avg-pool",
            LayerKind::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    name: String,
    kind: LayerKind,
    weight: Option<Tensor>,
}

impl LayerSpec {
    pub fn dense(name: impl Into<String>, weight: Tensor) -> Result<Self> {
        let name = name.into();
        if weight.shape().len() != 2 {
            return Err(Error::shape(
                name,
                format!("dense weight must be 2-D (out, in), got {:?}", weight.shape()),
            ));
        }
        Ok(LayerSpec {
            name,
            kind: LayerKind::Dense,
            weight: Some(weight),
        })
    }

    pub fn conv2d(
        name: impl Into<String>,
        weight: Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let name = name.into();
        let s = weight.shape();
        if s.len() != 4 || s[2] != s[3] {
            return Err(Error::shape(
                name,
                format!("conv2d weight must be (c_out, c_in, k, k), got {s:?}"),
            ));
        }
        if stride == 0 {
            return Err(Error::shape(name, "stride must be positive"));
        }
        Ok(LayerSpec {
            name,
            kind: LayerKind::Conv2d { stride, padding },
            weight: Some(weight),
        })
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self::unweighted(name, LayerKind::Relu)
    }

    pub fn flatten(name: impl Into<String>) -> Self {
        Self::unweighted(name, LayerKind::Flatten)
    }

    pub fn global_avg_pool(name: impl Into<String>) -> Self {
        Self::unweighted(name, LayerKind::GlobalAvgPool)
    }

    pub fn softmax(name: impl Into<String>) -> Self {
        Self::unweighted(name, LayerKind::Softmax)
    }

    fn unweighted(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
            weight: None,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn weight(&self) -> Option<&Tensor> {
        self.weight.as_ref()
    }

    /// Flattened parameter count `c_o * c_i * k^2`; zero for unweighted layers.
    pub fn param_count(&self) -> usize {
        self.weight.as_ref().map_or(0, Tensor::len)
    }

    /// Same layer with its weight replaced. Shape must not change.
    pub fn with_weight(&self, weight: Tensor) -> Result<Self> {
        match &self.weight {
            Some(w) if w.shape() == weight.shape() => Ok(LayerSpec {
                weight: Some(weight),
                ..self.clone()
            }),
            Some(w) => Err(Error::shape(
                &self.name,
                format!("replacement weight {:?} != {:?}", weight.shape(), w.shape()),
            )),
            None => Err(Error::shape(&self.name, "layer has no weight")),
        }
    }
}

/// Weight blocks in `f64`, one per weighted layer, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    blocks: Vec<Vec<f64>>,
}

impl WeightSet {
    pub fn new(blocks: Vec<Vec<f64>>) -> Self {
        WeightSet { blocks }
    }

    pub fn blocks(&self) -> &[Vec<f64>] {
        &self.blocks
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.blocks[i]
    }

    pub fn block_mut(&mut self, i: usize) -> &mut Vec<f64> {
        &mut self.blocks[i]
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks.concat()
    }

    /// Splits a flat vector into blocks sized like `self`.
    pub fn split_like(&self, flat: &[f64]) -> Result<WeightSet> {
        if flat.len() != self.total_len() {
            return Err(Error::Network(format!(
                "flat vector has {} entries, network has {} parameters",
                flat.len(),
                self.total_len()
            )));
        }
        let mut at = 0;
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let v = flat[at..at + b.len()].to_vec();
                at += b.len();
                v
            })
            .collect();
        Ok(WeightSet { blocks })
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &WeightSet) -> WeightSet {
        WeightSet {
            blocks: self
                .blocks
                .iter()
                .zip(&other.blocks)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: usize,
}

impl Sample {
    pub fn new(input: Tensor, label: usize) -> Self {
        Sample { input, label }
    }
}

/// Per-layer loss gradients keyed by layer name, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    entries: Vec<(String, Vec<f64>)>,
}

impl LayerGradients {
    pub fn get(&self, layer: &str) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(n, _)| n == layer)
            .map(|(_, g)| g.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(n, g)| (n.as_str(), g.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    classes: usize,
    /// `shapes[i]` is the input shape of layer `i`; the last entry is the output.
    shapes: Vec<Vec<usize>>,
    /// Layer indices of weighted layers.
    weighted: Vec<usize>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>, classes: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Network("no layers".into()));
        }
        if classes == 0 {
            return Err(Error::Network("class count must be positive".into()));
        }
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::Network(format!("bad input shape {input_shape:?}")));
        }
        let mut seen = HashSet::new();
        for l in &layers {
            if !seen.insert(l.name.as_str()) {
                return Err(Error::Network(format!("duplicate layer name `{}`", l.name)));
            }
        }
        let last = layers.len() - 1;
        for (i, l) in layers.iter().enumerate() {
            if (l.kind == LayerKind::Softmax) != (i == last) {
                return Err(Error::shape(
                    &l.name,
                    "softmax must appear exactly once, as the final layer",
                ));
            }
        }
        let weighted: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_weighted())
            .map(|(i, _)| i)
            .collect();
        if weighted.is_empty() {
            return Err(Error::Network("at least one dense or conv2d layer is required".into()));
        }

        let mut shapes = vec![input_shape.clone()];
        for l in &layers {
            let next = infer_shape(l, shapes.last().unwrap())?;
            shapes.push(next);
        }
        let out = shapes.last().unwrap();
        if out != &[classes] {
            return Err(Error::shape(
                &layers[last].name,
                format!("network output shape {out:?} does not match {classes} classes"),
            ));
        }
        Ok(NetworkSpec {
            layers,
            input_shape,
            classes,
            shapes,
            weighted,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Weighted layers in order.
    pub fn weighted_layers(&self) -> impl Iterator<Item = &LayerSpec> + '_ {
        self.weighted.iter().map(move |&i| &self.layers[i])
    }

    pub fn weighted_names(&self) -> Vec<String> {
        self.weighted_layers().map(|l| l.name.clone()).collect()
    }

    pub fn weighted_count(&self) -> usize {
        self.weighted.len()
    }

    pub fn param_count(&self) -> usize {
        self.weighted_layers().map(LayerSpec::param_count).sum()
    }

    /// Current weights widened to `f64`.
    pub fn weight_set(&self) -> WeightSet {
        WeightSet::new(
            self.weighted_layers()
                .map(|l| l.weight.as_ref().unwrap().to_f64())
                .collect(),
        )
    }

    /// Network with the weights of `ws` narrowed back to storage precision.
    pub fn with_weights(&self, ws: &WeightSet) -> Result<NetworkSpec> {
        self.check_weights(ws)?;
        let mut layers = self.layers.clone();
        for (ord, &li) in self.weighted.iter().enumerate() {
            let shape = layers[li].weight.as_ref().unwrap().shape().to_vec();
            layers[li].weight = Some(Tensor::from_f64(shape, ws.block(ord))?);
        }
        NetworkSpec::new(layers, self.input_shape.clone(), self.classes)
    }

    fn check_weights(&self, ws: &WeightSet) -> Result<()> {
        if ws.blocks.len() != self.weighted.len() {
            return Err(Error::Network(format!(
                "weight set has {} blocks, network has {} weighted layers",
                ws.blocks.len(),
                self.weighted.len()
            )));
        }
        for (b, l) in ws.blocks.iter().zip(self.weighted_layers()) {
            if b.len() != l.param_count() {
                return Err(Error::shape(
                    &l.name,
                    format!("weight block has {} values, expected {}", b.len(), l.param_count()),
                ));
            }
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(Error::shape(
                &self.layers[0].name,
                format!(
                    "input shape {:?} does not match network input {:?}",
                    input.shape(),
                    self.input_shape
                ),
            ));
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.classes {
            return Err(Error::Label {
                label,
                classes: self.classes,
            });
        }
        Ok(())
    }

    /// Class probabilities at explicit weights.
    pub fn forward_with(&self, ws: &WeightSet, input: &Tensor) -> Result<Vec<f64>> {
        self.check_weights(ws)?;
        self.check_input(input)?;
        Ok(self.run_forward(ws, input.to_f64(), false).probs)
    }

    /// Cross-entropy loss of one sample at explicit weights.
    pub fn loss_with(&self, ws: &WeightSet, sample: &Sample) -> Result<f64> {
        self.check_label(sample.label)?;
        let probs = self.forward_with(ws, &sample.input)?;
        cross_entropy(&probs, sample.label)
    }

    /// Loss and its gradient with respect to every weight block.
    pub fn loss_grad_with(&self, ws: &WeightSet, sample: &Sample) -> Result<(f64, WeightSet)> {
        self.check_weights(ws)?;
        self.check_input(&sample.input)?;
        self.check_label(sample.label)?;
        let trace = self.run_forward(ws, sample.input.to_f64(), true);
        let loss = cross_entropy(&trace.probs, sample.label)?;
        // d(-ln f_t)/dz = f - y for softmax logits z
        let mut dlogits = trace.probs.clone();
        dlogits[sample.label] -= 1.0;
        Ok((loss, self.backward(ws, &trace, dlogits)))
    }

    /// Probabilities plus the full Jacobian of the probability vector:
    /// entry `k` holds `d f_k / d w` as weight blocks.
    pub fn output_jacobian_with(
        &self,
        ws: &WeightSet,
        input: &Tensor,
    ) -> Result<(Vec<f64>, Vec<WeightSet>)> {
        self.check_weights(ws)?;
        self.check_input(input)?;
        let trace = self.run_forward(ws, input.to_f64(), true);
        let f = &trace.probs;
        let rows = (0..self.classes)
            .map(|k| {
                // d f_k / d z_j = f_k (delta_kj - f_j)
                let seed: Vec<f64> = (0..self.classes)
                    .map(|j| f[k] * (f64::from(u8::from(j == k)) - f[j]))
                    .collect();
                self.backward(ws, &trace, seed)
            })
            .collect();
        Ok((trace.probs.clone(), rows))
    }

    /// Mean cross-entropy at explicit weights. Per-sample losses may be
    /// computed in parallel; the sum is always taken in sample order.
    pub fn mean_loss_with(&self, ws: &WeightSet, samples: &[Sample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::EmptySamples);
        }
        let losses = samples
            .par_iter()
            .map(|s| self.loss_with(ws, s))
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / samples.len() as f64)
    }

    /// Gradient of the mean loss, summed in sample order.
    pub fn mean_grad_with(&self, ws: &WeightSet, samples: &[Sample]) -> Result<WeightSet> {
        if samples.is_empty() {
            return Err(Error::EmptySamples);
        }
        let grads = samples
            .par_iter()
            .map(|s| self.loss_grad_with(ws, s).map(|(_, g)| g))
            .collect::<Result<Vec<WeightSet>>>()?;
        let mut acc: Vec<Vec<f64>> = ws.blocks.iter().map(|b| vec![0.0; b.len()]).collect();
        for g in &grads {
            for (a, b) in acc.iter_mut().zip(&g.blocks) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        let n = samples.len() as f64;
        for a in &mut acc {
            for x in a.iter_mut() {
                *x /= n;
            }
        }
        Ok(WeightSet::new(acc))
    }

    fn run_forward(&self, ws: &WeightSet, input: Vec<f64>, keep: bool) -> Trace {
        let mut acts = Vec::with_capacity(if keep { self.layers.len() } else { 0 });
        let mut x = input;
        let mut ord = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = &self.shapes[i];
            let y = match layer.kind {
                LayerKind::Dense => {
                    let w = ws.block(ord);
                    ord += 1;
                    dense_forward(w, &x, self.shapes[i + 1][0])
                }
                LayerKind::Conv2d { stride, padding } => {
                    let w = ws.block(ord);
                    ord += 1;
                    let wshape = layer.weight.as_ref().unwrap().shape();
                    conv_forward(w, wshape, &x, in_shape, &self.shapes[i + 1], stride, padding)
                }
                LayerKind::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
                LayerKind::Flatten => x.clone(),
                LayerKind::GlobalAvgPool => {
                    let hw = in_shape[1] * in_shape[2];
                    x.chunks(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect()
                }
                LayerKind::Softmax => softmax(&x),
            };
            if keep {
                acts.push(x);
            }
            x = y;
        }
        Trace { acts, probs: x }
    }

    /// Propagates `dlogits` (gradient at the softmax input) back to the weights.
    fn backward(&self, ws: &WeightSet, trace: &Trace, dlogits: Vec<f64>) -> WeightSet {
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.weighted.len()];
        let mut ord = self.weighted.len();
        let mut dy = dlogits;
        let first_weighted = self.weighted[0];
        for i in (0..self.layers.len() - 1).rev() {
            let layer = &self.layers[i];
            let x = &trace.acts[i];
            let in_shape = &self.shapes[i];
            let need_dx = i > first_weighted;
            dy = match layer.kind {
                LayerKind::Dense => {
                    ord -= 1;
                    let (gw, dx) = dense_backward(ws.block(ord), x, &dy, need_dx);
                    grads[ord] = gw;
                    dx
                }
                LayerKind::Conv2d { stride, padding } => {
                    ord -= 1;
                    let wshape = layer.weight.as_ref().unwrap().shape();
                    let (gw, dx) = conv_backward(
                        ws.block(ord),
                        wshape,
                        x,
                        in_shape,
                        &self.shapes[i + 1],
                        &dy,
                        stride,
                        padding,
                        need_dx,
                    );
                    grads[ord] = gw;
                    dx
                }
                LayerKind::Relu => x
                    .iter()
                    .zip(&dy)
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect(),
                LayerKind::Flatten => dy,
                LayerKind::GlobalAvgPool => {
                    let hw = in_shape[1] * in_shape[2];
                    let scale = 1.0 / hw as f64;
                    dy.iter()
                        .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
                        .collect()
                }
                LayerKind::Softmax => unreachable!("softmax is validated to be last"),
            };
            if i <= first_weighted {
                break;
            }
        }
        WeightSet::new(grads)
    }
}

struct Trace {
    /// Input activation of every layer.
    acts: Vec<Vec<f64>>,
    probs: Vec<f64>,
}

fn infer_shape(layer: &LayerSpec, input: &[usize]) -> Result<Vec<usize>> {
    let err = |msg: String| Err(Error::shape(&layer.name, msg));
    match layer.kind {
        LayerKind::Dense => {
            let w = layer.weight.as_ref().unwrap().shape();
            if input.len() != 1 || input[0] != w[1] {
                return err(format!(
                    "dense expects input [{}], got {input:?}",
                    w[1]
                ));
            }
            Ok(vec![w[0]])
        }
        LayerKind::Conv2d { stride, padding } => {
            let w = layer.weight.as_ref().unwrap().shape();
            if input.len() != 3 || input[0] != w[1] {
                return err(format!(
                    "conv2d expects input ({}, h, w), got {input:?}",
                    w[1]
                ));
            }
            let k = w[2];
            let (h, wd) = (input[1] + 2 * padding, input[2] + 2 * padding);
            if h < k || wd < k {
                return err(format!("kernel {k} larger than padded input {h}x{wd}"));
            }
            Ok(vec![w[0], (h - k) / stride + 1, (wd - k) / stride + 1])
        }
        LayerKind::Relu => Ok(input.to_vec()),
        LayerKind::Flatten => Ok(vec![input.iter().product()]),
        LayerKind::GlobalAvgPool => {
            if input.len() != 3 {
                return err(format!("global-avg-pool expects (c, h, w), got {input:?}"));
            }
            Ok(vec![input[0]])
        }
        LayerKind::Softmax => {
            if input.len() != 1 {
                return err(format!("softmax expects a vector, got {input:?}"));
            }
            Ok(input.to_vec())
        }
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs[label];
    if p <= 0.0 {
        return Err(Error::ZeroProbability { label });
    }
    Ok(-p.ln())
}

fn dense_forward(w: &[f64], x: &[f64], out: usize) -> Vec<f64> {
    let n = x.len();
    (0..out)
        .map(|o| w[o * n..(o + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn dense_backward(w: &[f64], x: &[f64], dy: &[f64], need_dx: bool) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut gw = Vec::with_capacity(w.len());
    for &g in dy {
        gw.extend(x.iter().map(|&xv| g * xv));
    }
    let mut dx = Vec::new();
    if need_dx {
        dx = vec![0.0; n];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, &wv) in dx.iter_mut().zip(&w[o * n..(o + 1) * n]) {
                *d += wv * g;
            }
        }
    }
    (gw, dx)
}

fn conv_forward(
    w: &[f64],
    wshape: &[usize],
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    stride: usize,
    padding: usize,
) -> Vec<f64> {
    let (co, ci, k) = (wshape[0], wshape[1], wshape[2]);
    let (h, wd) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut y = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..k {
                        let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&v| v < h)
                        else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) =
                                (ox * stride + kx).checked_sub(padding).filter(|&v| v < wd)
                            else {
                                continue;
                            };
                            acc += w[((o * ci + c) * k + ky) * k + kx] * x[(c * h + iy) * wd + ix];
                        }
                    }
                }
                y[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    w: &[f64],
    wshape: &[usize],
    x: &[f64],
    in_shape: &[usize],
    out_shape: &[usize],
    dy: &[f64],
    stride: usize,
    padding: usize,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (co, ci, k) = (wshape[0], wshape[1], wshape[2]);
    let (h, wd) = (in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut gw = vec![0.0; w.len()];
    let mut dx = if need_dx { vec![0.0; x.len()] } else { Vec::new() };
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy[(o * oh + oy) * ow + ox];
                if g == 0.0 {
                    continue;
                }
                for c in 0..ci {
                    for ky in 0..k {
                        let Some(iy) = (oy * stride + ky).checked_sub(padding).filter(|&v| v < h)
                        else {
                            continue;
                        };
                        for kx in 0..k {
                            let Some(ix) =
                                (ox * stride + kx).checked_sub(padding).filter(|&v| v < wd)
                            else {
                                continue;
                            };
                            let wi = ((o * ci + c) * k + ky) * k + kx;
                            let xi = (c * h + iy) * wd + ix;
                            gw[wi] += g * x[xi];
                            if need_dx {
                                dx[xi] += g * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (gw, dx)
}

/// Class probabilities for `input`, narrowed to storage precision.
pub fn forward(net: &NetworkSpec, input: &Tensor) -> Result<Tensor> {
    let probs = net.forward_with(&net.weight_set(), input)?;
    Tensor::from_f64(vec![probs.len()], &probs)
}

/// Gradient of the sample's cross-entropy loss with respect to the flattened
/// weights of each weighted layer.
pub fn per_sample_loss_grad(net: &NetworkSpec, sample: &Sample) -> Result<LayerGradients> {
    let (_, grads) = net.loss_grad_with(&net.weight_set(), sample)?;
    Ok(LayerGradients {
        entries: net.weighted_names().into_iter().zip(grads.blocks).collect(),
    })
}

pub fn mean_loss(net: &NetworkSpec, samples: &[Sample]) -> Result<f64> {
    net.mean_loss_with(&net.weight_set(), samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn identity_net() -> NetworkSpec {
        NetworkSpec::new(
            vec![
                LayerSpec::dense("fc", t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap(),
                LayerSpec::softmax("sm"),
            ],
            vec![2],
            2,
        )
        .unwrap()
    }

    #[test]
    fn identity_dense_softmax_closed_form() {
        let net = identity_net();
        let x = Tensor::from_f64(vec![2], &[std::f64::consts::LN_2, 0.0]).unwrap();
        let p = net.forward_with(&net.weight_set(), &x).unwrap();
        // ln 2 narrowed to f32 shifts the result by ~1e-8
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-7, "{p:?}");
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn zero_logits_split_evenly() {
        let net = identity_net();
        let p = forward(&net, &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn single_dense_gradient_is_outer_product() {
        let net = NetworkSpec::new(
            vec![
                LayerSpec::dense("fc", t(&[2, 3], &[0.5, -1.0, 0.25, 2.0, 0.0, -0.5])).unwrap(),
                LayerSpec::softmax("sm"),
            ],
            vec![3],
            2,
        )
        .unwrap();
        let x = [1.0f64, 2.0, -1.0];
        let sample = Sample::new(Tensor::from_f64(vec![3], &x).unwrap(), 1);
        // logits by hand: [0.5 - 2 - 0.25, 2 + 0 + 0.5] = [-1.75, 2.5]
        let e0 = (-1.75f64).exp();
        let e1 = 2.5f64.exp();
        let f = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let y = [0.0, 1.0];
        let g = per_sample_loss_grad(&net, &sample).unwrap();
        let fc = g.get("fc").unwrap();
        for o in 0..2 {
            for j in 0..3 {
                let want = (f[o] - y[o]) * x[j];
                assert!((fc[o * 3 + j] - want).abs() < 1e-15);
            }
        }
        assert!(g.get("sm").is_none());
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn dead_relu_path_has_zero_gradient() {
        // hidden unit 1 always sees a negative pre-activation for x >= 0,
        // so its outgoing weights and its incoming row never matter
        let net = NetworkSpec::new(
            vec![
                LayerSpec::dense("fc1", t(&[2, 2], &[1.0, 1.0, -1.0, -1.0])).unwrap(),
                LayerSpec::relu("r"),
                LayerSpec::dense("fc2", t(&[2, 2], &[1.0, 0.3, -1.0, 0.7])).unwrap(),
                LayerSpec::softmax("sm"),
            ],
            vec![2],
            2,
        )
        .unwrap();
        let sample = Sample::new(t(&[2], &[0.5, 1.5]), 0);
        let g = per_sample_loss_grad(&net, &sample).unwrap();
        let fc1 = g.get("fc1").unwrap();
        assert_eq!(&fc1[2..4], &[0.0, 0.0]);
        let fc2 = g.get("fc2").unwrap();
        assert_eq!(fc2[1], 0.0);
        assert_eq!(fc2[3], 0.0);
        assert!(fc2[0] != 0.0);
    }

    #[test]
    fn uniform_predictor_loss_is_ln_p() {
        let net = NetworkSpec::new(
            vec![
                LayerSpec::dense("fc", Tensor::zeros(vec![5, 3]).unwrap()).unwrap(),
                LayerSpec::softmax("sm"),
            ],
            vec![3],
            5,
        )
        .unwrap();
        let samples: Vec<Sample> = (0..5)
            .map(|k| Sample::new(t(&[3], &[k as f32, 1.0, -2.0]), k))
            .collect();
        let l = mean_loss(&net, &samples).unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn half_probability_loss_is_ln_2() {
        let net = identity_net();
        let l = mean_loss(&net, &[Sample::new(t(&[2], &[0.0, 0.0]), 1)]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn error_paths() {
        let net = identity_net();
        assert!(matches!(mean_loss(&net, &[]), Err(Error::EmptySamples)));
        let bad_label = Sample::new(t(&[2], &[0.0, 0.0]), 2);
        assert!(matches!(
            per_sample_loss_grad(&net, &bad_label),
            Err(Error::Label { label: 2, classes: 2 })
        ));
        let err = forward(&net, &t(&[3], &[0.0, 0.0, 0.0])).unwrap_err();
        assert!(err.to_string().contains("`fc`"), "{err}");

        let big = NetworkSpec::new(
            vec![
                LayerSpec::dense("fc", t(&[2, 1], &[1000.0, -1000.0])).unwrap(),
                LayerSpec::softmax("sm"),
            ],
            vec![1],
            2,
        )
        .unwrap();
        let s = Sample::new(t(&[1], &[1.0]), 1);
        assert!(matches!(
            per_sample_loss_grad(&big, &s),
            Err(Error::ZeroProbability { label: 1 })
        ));
    }

    #[test]
    fn construction_checks() {
        let w = || t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        // softmax missing
        assert!(NetworkSpec::new(vec![LayerSpec::dense("a", w()).unwrap()], vec![2], 2).is_err());
        // no weighted layer
        assert!(NetworkSpec::new(vec![LayerSpec::softmax("s")], vec![2], 2).is_err());
        // duplicate names
        assert!(NetworkSpec::new(
            vec![LayerSpec::dense("a", w()).unwrap(), LayerSpec::softmax("a")],
            vec![2],
            2
        )
        .is_err());
        // shape break names the layer
        let err = NetworkSpec::new(
            vec![
                LayerSpec::dense("a", w()).unwrap(),
                LayerSpec::dense("b", t(&[2, 3], &[0.0; 6])).unwrap(),
                LayerSpec::softmax("s"),
            ],
            vec![2],
            2,
        )
        .unwrap_err();
        assert!(err.to_string().contains("`b`"), "{err}");
        // class count mismatch
        assert!(NetworkSpec::new(
            vec![LayerSpec::dense("a", w()).unwrap(), LayerSpec::softmax("s")],
            vec![2],
            3
        )
        .is_err());
    }

    #[test]
    fn conv_shapes() {
        let net = NetworkSpec::new(
            vec![
                LayerSpec::conv2d("c", Tensor::zeros(vec![4, 2, 3, 3]).unwrap(), 2, 1).unwrap(),
                LayerSpec::global_avg_pool("g"),
                LayerSpec::softmax("s"),
            ],
            vec![2, 5, 5],
            4,
        )
        .unwrap();
        assert_eq!(net.shapes[1], vec![4, 3, 3]);
        assert_eq!(net.param_count(), 72);
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let net = identity_net();
        let x = t(&[2], &[0.3, -1.2]);
        let a = net.forward_with(&net.weight_set(), &x).unwrap();
        let b = net.forward_with(&net.weight_set(), &x).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
