//! Mixed-precision bit-width allocation driven by second-order loss
//! sensitivity.
//!
//! The pipeline quantizes every weighted layer at each candidate bit-width,
//! estimates the resulting loss increase from per-sample gradients, and
//! assigns bit-widths under a model-size budget by solving a multiple-choice
//! knapsack problem greedily.

pub mod error;
pub mod fixtures;
pub mod manifest;
pub mod mckp;
pub mod net;
pub mod oracle;
pub mod perturbation;
pub mod pipeline;
pub mod quantizer;
pub mod tensor;
pub mod validate;

pub use error::{Error, ErrorKind, Result};
pub use net::{
    forward, mean_loss, per_sample_loss_grad, LayerGradients, LayerKind, LayerSpec, NetworkSpec,
    Sample, WeightSet,
};
pub use manifest::{load_manifest, load_manifest_with, Manifest, ManifestFile, Overrides};
pub use mckp::{
    build_instance, dominance_filter, dp_exact, exhaustive, greedy_assign, BitAssignment,
    MckpInstance,
};
pub use oracle::{exact_hessian_quadratic, exact_loss_perturbation, ggn_reference, ranking_fidelity};
pub use perturbation::{convergence_profile, perturbation_table, PerturbationTable, ProxyKind};
pub use pipeline::{emit_reports, run_pipeline, RunReport, Solver};
pub use quantizer::{delta_w, quantize, solve_step_size, QuantGrid, QuantResult, Signedness};
pub use tensor::Tensor;
