//! Run manifests: a TOML description of the model, calibration data and
//! planning parameters, plus the raw binary files it references.
//!
//! Weights and inputs are little-endian `f32` in row-major order; labels are
//! little-endian `u32`. Relative paths resolve against the manifest's
//! directory. Everything is validated eagerly by [`Manifest::resolve`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{LayerKind, LayerSpec, NetworkSpec, Sample};
use crate::perturbation::{ProxyKind, DEFAULT_SAMPLES};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub model: ModelSection,
    pub data: DataSection,
    pub plan: PlanSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub name: String,
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub inputs: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSection {
    pub bits: Vec<u32>,
    pub target_bits: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_proxy")]
    pub proxy: String,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<usize>>,
}

fn default_samples() -> usize {
    DEFAULT_SAMPLES
}

fn default_proxy() -> String {
    ProxyKind::SecondOrder.as_str().to_string()
}

fn default_true() -> bool {
    true
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl PlanSection {
    /// Defaults for everything except the bit set and target.
    pub fn new(bits: Vec<u32>, target_bits: f64) -> Self {
        PlanSection {
            bits,
            target_bits,
            samples: default_samples(),
            seed: 0,
            proxy: default_proxy(),
            deterministic: true,
            output_dir: default_output_dir(),
            checkpoints: None,
        }
    }
}

/// Command-line replacements for manifest fields. Paths are used as given,
/// so callers should make them absolute first.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub bits: Option<Vec<u32>>,
    pub target_bits: Option<f64>,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub proxy: Option<String>,
    pub deterministic: Option<bool>,
    pub output_dir: Option<PathBuf>,
    pub checkpoints: Option<Vec<usize>>,
    pub inputs: Option<PathBuf>,
    pub labels: Option<PathBuf>,
}

impl ManifestFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::manifest("manifest", e.message().to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::manifest("manifest", e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        let p = &mut self.plan;
        if let Some(v) = &o.bits {
            p.bits = v.clone();
        }
        if let Some(v) = o.target_bits {
            p.target_bits = v;
        }
        if let Some(v) = o.samples {
            p.samples = v;
        }
        if let Some(v) = o.seed {
            p.seed = v;
        }
        if let Some(v) = &o.proxy {
            p.proxy = v.clone();
        }
        if let Some(v) = o.deterministic {
            p.deterministic = v;
        }
        if let Some(v) = &o.output_dir {
            p.output_dir = v.clone();
        }
        if let Some(v) = &o.checkpoints {
            p.checkpoints = Some(v.clone());
        }
        if let Some(v) = &o.inputs {
            self.data.inputs = v.clone();
        }
        if let Some(v) = &o.labels {
            self.data.labels = v.clone();
        }
    }

    /// Copy with every path joined onto `base`.
    fn absolutized(&self, base: &Path) -> ManifestFile {
        let mut out = self.clone();
        for l in &mut out.model.layers {
            if let Some(w) = &mut l.weights {
                *w = base.join(&*w);
            }
        }
        out.data.inputs = base.join(&out.data.inputs);
        out.data.labels = base.join(&out.data.labels);
        out.plan.output_dir = base.join(&out.plan.output_dir);
        out
    }
}

/// A validated manifest with its model and calibration data loaded.
#[derive(Debug, Clone)]
pub struct Manifest {
    file: ManifestFile,
    net: NetworkSpec,
    samples: Vec<Sample>,
    proxy: ProxyKind,
}

/// Reads, parses and validates the manifest at `path`.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    load_manifest_with(path, &Overrides::default())
}

/// As [`load_manifest`], with field overrides applied before validation.
pub fn load_manifest_with(path: impl AsRef<Path>, overrides: &Overrides) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::manifest("manifest", format!("cannot read {}: {e}", path.display())))?;
    let mut file = ManifestFile::parse(&text)?;
    file.apply(overrides);
    let base = absolute_dir(path)?;
    Manifest::resolve(file, &base)
}

fn absolute_dir(manifest_path: &Path) -> Result<PathBuf> {
    let dir = match manifest_path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::path::absolute(dir).map_err(|e| Error::io(dir, e))
}

impl Manifest {
    /// Validates `file` with relative paths taken from `base`.
    pub fn resolve(file: ManifestFile, base: &Path) -> Result<Manifest> {
        let file = file.absolutized(base);
        let plan = &file.plan;

        check_bits(&plan.bits)?;
        let (lo, hi) = (
            *plan.bits.iter().min().unwrap(),
            *plan.bits.iter().max().unwrap(),
        );
        let t = plan.target_bits;
        if !t.is_finite() || t < f64::from(lo) || t > f64::from(hi) {
            return Err(Error::manifest(
                "plan.target_bits",
                format!("{t} is outside the candidate range [{lo}, {hi}]"),
            ));
        }
        if plan.samples == 0 {
            return Err(Error::manifest("plan.samples", "must be at least 1"));
        }
        let proxy: ProxyKind = plan.proxy.parse().map_err(|_| {
            Error::manifest(
                "plan.proxy",
                format!(
                    "unknown proxy `{}`; expected one of {}",
                    plan.proxy,
                    ProxyKind::ALL.map(|p| p.as_str()).join(", ")
                ),
            )
        })?;
        if let Some(cps) = &plan.checkpoints {
            if cps.is_empty() || cps[0] == 0 || cps.windows(2).any(|w| w[0] > w[1]) {
                return Err(Error::manifest(
                    "plan.checkpoints",
                    format!("{cps:?} must be non-empty, positive and ascending"),
                ));
            }
        }

        let net = build_network(&file.model)?;
        let samples = load_samples(&file.data, &net)?;
        if plan.samples > samples.len() {
            return Err(Error::manifest(
                "plan.samples",
                format!("{} requested but the data holds {}", plan.samples, samples.len()),
            ));
        }
        if let Some(&last) = plan.checkpoints.as_ref().and_then(|c| c.last()) {
            if last > samples.len() {
                return Err(Error::manifest(
                    "plan.checkpoints",
                    format!("{last} exceeds the {} available samples", samples.len()),
                ));
            }
        }
        Ok(Manifest {
            file,
            net,
            samples,
            proxy,
        })
    }

    /// The manifest as loaded, with absolute paths.
    pub fn file(&self) -> &ManifestFile {
        &self.file
    }

    pub fn plan(&self) -> &PlanSection {
        &self.file.plan
    }

    pub fn net(&self) -> &NetworkSpec {
        &self.net
    }

    /// Every sample in the data files, in file order.
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn proxy(&self) -> ProxyKind {
        self.proxy
    }

    pub fn output_dir(&self) -> &Path {
        &self.file.plan.output_dir
    }

    /// Sorted candidate bit-widths.
    pub fn bits(&self) -> Vec<u32> {
        let mut b = self.file.plan.bits.clone();
        b.sort_unstable();
        b
    }

    /// TOML text of the resolved manifest; loading it gives back an
    /// equivalent manifest.
    pub fn echo(&self) -> Result<String> {
        self.file.to_toml()
    }
}

fn check_bits(bits: &[u32]) -> Result<()> {
    if bits.is_empty() {
        return Err(Error::manifest("plan.bits", "no candidate bit-widths"));
    }
    if let Some(b) = bits.iter().find(|&&b| !(1..=32).contains(&b)) {
        return Err(Error::manifest("plan.bits", format!("bit-width {b} is outside [1, 32]")));
    }
    let mut sorted = bits.to_vec();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::manifest("plan.bits", format!("bit-width {} listed twice", w[0])));
    }
    Ok(())
}

fn parse_kind(field: &str, entry: &LayerEntry) -> Result<LayerKind> {
    let conv = || LayerKind::Conv2d {
        stride: entry.stride.unwrap_or(1),
        padding: entry.padding.unwrap_or(0),
    };
    let kind = match entry.kind.as_str() {
        "dense" => LayerKind::Dense,
        "conv2d" => conv(),
        "relu" => LayerKind::Relu,
        "flatten" => LayerKind::Flatten,
        "global-avg-pool" => LayerKind::GlobalAvgPool,
        "softmax" => LayerKind::Softmax,
        other => {
            return Err(Error::manifest(
                format!("{field}.kind"),
                format!("unknown layer kind `{other}`"),
            ))
        }
    };
    if !matches!(kind, LayerKind::Conv2d { .. }) && (entry.stride.is_some() || entry.padding.is_some())
    {
        return Err(Error::manifest(
            field,
            format!("stride and padding apply only to conv2d, not {}", entry.kind),
        ));
    }
    if !kind.is_weighted() && (entry.shape.is_some() || entry.weights.is_some()) {
        return Err(Error::manifest(
            field,
            format!("{} layers carry no weights", entry.kind),
        ));
    }
    Ok(kind)
}

fn build_network(model: &ModelSection) -> Result<NetworkSpec> {
    if model.input_shape.is_empty() || model.input_shape.contains(&0) {
        return Err(Error::manifest(
            "model.input_shape",
            format!("{:?} must be non-empty with positive extents", model.input_shape),
        ));
    }
    if model.classes == 0 {
        return Err(Error::manifest("model.classes", "must be at least 1"));
    }
    let layers = model
        .layers
        .iter()
        .enumerate()
        .map(|(i, entry)| {
            let field = format!("model.layers[{i}]");
            let kind = parse_kind(&field, entry)?;
            if !kind.is_weighted() {
                return Ok(match kind {
                    LayerKind::Relu => LayerSpec::relu(&entry.name),
                    LayerKind::Flatten => LayerSpec::flatten(&entry.name),
                    LayerKind::GlobalAvgPool => LayerSpec::global_avg_pool(&entry.name),
                    _ => LayerSpec::softmax(&entry.name),
                });
            }
            let shape = entry
                .shape
                .clone()
                .ok_or_else(|| Error::manifest(format!("{field}.shape"), "required for weighted layers"))?;
            let path = entry
                .weights
                .as_ref()
                .ok_or_else(|| Error::manifest(format!("{field}.weights"), "required for weighted layers"))?;
            let expected: usize = shape.iter().product();
            let values = read_f32(&format!("{field}.weights"), path, Some(expected))?;
            let weight = Tensor::new(shape, values)
                .map_err(|e| Error::manifest(format!("{field}.shape"), e.to_string()))?;
            let built = match kind {
                LayerKind::Dense => LayerSpec::dense(&entry.name, weight),
                LayerKind::Conv2d { stride, padding } => {
                    LayerSpec::conv2d(&entry.name, weight, stride, padding)
                }
                _ => unreachable!(),
            };
            built.map_err(|e| Error::manifest(format!("{field}.shape"), e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    NetworkSpec::new(layers, model.input_shape.clone(), model.classes)
        .map_err(|e| Error::manifest("model.layers", e.to_string()))
}

fn read_bytes(field: &str, path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::manifest(field, format!("cannot read {}: {e}", path.display())))
}

/// Reads little-endian `f32` values; with `expected`, the file must hold
/// exactly that many.
fn read_f32(field: &str, path: &Path, expected: Option<usize>) -> Result<Vec<f32>> {
    let bytes = read_bytes(field, path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::manifest(
            field,
            format!("{} has {} bytes, not a whole number of f32 values", path.display(), bytes.len()),
        ));
    }
    let n = bytes.len() / 4;
    if let Some(want) = expected {
        if n != want {
            return Err(Error::manifest(
                field,
                format!("size mismatch: {} holds {n} values, shape needs {want}", path.display()),
            ));
        }
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::manifest(
            field,
            format!("non-finite value at index {i} of {}", path.display()),
        ));
    }
    Ok(values)
}

fn load_samples(data: &DataSection, net: &NetworkSpec) -> Result<Vec<Sample>> {
    let shape = net.input_shape().to_vec();
    let per: usize = shape.iter().product();
    let inputs = read_f32("data.inputs", &data.inputs, None)?;
    if inputs.is_empty() || inputs.len() % per != 0 {
        return Err(Error::manifest(
            "data.inputs",
            format!(
                "size mismatch: {} values is not a positive multiple of the input size {per}",
                inputs.len()
            ),
        ));
    }
    let count = inputs.len() / per;
    let bytes = read_bytes("data.labels", &data.labels)?;
    if bytes.len() != 4 * count {
        return Err(Error::manifest(
            "data.labels",
            format!(
                "size mismatch: {} bytes of labels for {count} samples (expected {})",
                bytes.len(),
                4 * count
            ),
        ));
    }
    bytes
        .chunks_exact(4)
        .zip(inputs.chunks_exact(per))
        .enumerate()
        .map(|(i, (lb, x))| {
            let label = u32::from_le_bytes([lb[0], lb[1], lb[2], lb[3]]) as usize;
            if label >= net.classes() {
                return Err(Error::manifest(
                    "data.labels",
                    format!("label {label} at index {i} is out of range for {} classes", net.classes()),
                ));
            }
            let input = Tensor::new(shape.clone(), x.to_vec())
                .map_err(|e| Error::manifest("data.inputs", e.to_string()))?;
            Ok(Sample::new(input, label))
        })
        .collect()
}

pub fn write_f32_file(path: &Path, values: &[f32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path, &bytes)
}

pub fn write_u32_file(path: &Path, values: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_file(path, &bytes)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `net`, `samples` and a manifest referencing them into `dir`, with
/// paths relative to `dir`. Returns the manifest path.
pub fn write_bundle(
    dir: &Path,
    net: &NetworkSpec,
    samples: &[Sample],
    plan: PlanSection,
) -> Result<PathBuf> {
    let mut layers = Vec::with_capacity(net.layers().len());
    for l in net.layers() {
        let mut entry = LayerEntry {
            name: l.name().to_string(),
            kind: l.kind().name().to_string(),
            shape: None,
            stride: None,
            padding: None,
            weights: None,
        };
        if let LayerKind::Conv2d { stride, padding } = l.kind() {
            entry.stride = Some(stride);
            entry.padding = Some(padding);
        }
        if let Some(w) = l.weight() {
            let rel = PathBuf::from("weights").join(format!("{}.bin", l.name()));
            write_f32_file(&dir.join(&rel), w.data())?;
            entry.shape = Some(w.shape().to_vec());
            entry.weights = Some(rel);
        }
        layers.push(entry);
    }
    let inputs: Vec<f32> = samples.iter().flat_map(|s| s.input.data().iter().copied()).collect();
    let labels: Vec<u32> = samples.iter().map(|s| s.label as u32).collect();
    let data = DataSection {
        inputs: PathBuf::from("data/inputs.bin"),
        labels: PathBuf::from("data/labels.bin"),
    };
    write_f32_file(&dir.join(&data.inputs), &inputs)?;
    write_u32_file(&dir.join(&data.labels), &labels)?;
    let file = ManifestFile {
        model: ModelSection {
            input_shape: net.input_shape().to_vec(),
            classes: net.classes(),
            layers,
        },
        data,
        plan,
    };
    let path = dir.join("manifest.toml");
    write_file(&path, file.to_toml()?.as_bytes())?;
    Ok(path)
}
