//! Mean-field inference for fully connected pairwise CRFs, an exact
//! enumeration oracle and sampler, and the equivalent residual
//! graph-attention (CRF-GAT) network with end-to-end training.
//!
//! Labels are 0-based in memory and 1-based in every file format.

pub mod error;
pub mod fixtures;
pub mod gat;
pub mod io;
pub mod kernels;
pub mod meanfield;
pub mod model;
pub mod oracle;
pub mod table;
pub mod training;

pub use error::{CrfError, Result};
pub use gat::{
    attention, decode_argmin, gat_forward, gat_forward_traced, gat_layer, predict, CrfGatModel,
    GatLayerParams, GatTrace, LayerSnapshot,
};
pub use io::{accuracy, gen_synthetic, AnyModel, Artifact, SyntheticSpec, Topology};
pub use kernels::{
    eval_kernel, kernel_matrix, validate_spec, GaussianComponent, KernelSpec, KernelViolation,
};
pub use meanfield::{
    decode_argmax, init_marginals, mf_step, mf_step_compat_first, mf_step_kernel_first,
    mf_step_sequential, run_mean_field, update_node, MeanFieldConfig, MeanFieldDiagnostics,
    Schedule, SummationOrder,
};
pub use model::{
    distribution_from_potentials, gibbs_energy, unary_from_classifier, CompatibilityMatrix,
    CrfModel, Feature, LabelSpace, Labeling, MarginalField, ObservedSequence, PotentialField,
    UnaryPotentials,
};
pub use oracle::{
    enumerate_exact, exact_kl, gibbs_sample, EnergyTable, ExactResult, SamplerConfig,
    SamplerVariant,
};
pub use table::Table;
pub use training::{
    batch_loss, cross_entropy, grad_analytic, grad_fd, init_model, train, GridShape,
    LabeledDataset, LabeledItem, TrainConfig, UnaryClassifierParams,
};
