//! Decentralized distributed ADMM with learned hyperparameters.
//!
//! The solver targets consensus problems `min Σᵢ fᵢ(xᵢ)` subject to
//! `x₁ = … = x_m` over a communication graph, and runs the per-node
//! iteration in two provably equivalent forms: the classical neighborhood
//! scan and a two-block message-passing network. Small MLP heads predict
//! the step sizes and the communication weights per problem instance, and
//! are trained end-to-end by differentiating through `K` unrolled
//! iterations against the known minimizer.
//!
//! Module map:
//! - [`graph`]: communication graphs, weighted Laplacians, degree features
//! - [`problems`]: benchmark instances, exact minimizers, dataset files
//! - [`admm`]: the iteration in both forms, schedules, traces
//! - [`autodiff`]: the reverse-mode tape the training loss is recorded on
//! - [`nn`]: MLP heads, instance normalization, Adam with global clipping
//! - [`learned`]: hyperparameter heads and per-variant assembly
//! - [`training`]: unrolled loss, epoch loop, checkpoints
//! - [`evaluation`]: metrics, comparison reports, trace emission

// per-node update loops index several parallel arrays at once
#![allow(clippy::needless_range_loop)]

pub mod admm;
pub mod autodiff;
pub mod evaluation;
pub mod graph;
pub mod learned;
pub mod mat;
pub mod nn;
pub mod problems;
pub mod training;

pub use admm::{
    block1_aggregates, init_state, iterate_direct, iterate_mpnn, run, Aggregates, Alphas,
    CommMatrix, IterState, StepSchedule, SubproblemSolver, TraceRow,
};
pub use autodiff::{finite_difference, Data, Gradients, Tape, ValueId};
pub use evaluation::{
    consensus_metric, error_metric, relative_objective, MetricRow, Report, VariantTrace,
};
pub use graph::{
    erdos_renyi, is_connected, local_degree_profile, permute, weighted_laplacian, EdgeWeights,
    Graph, LocalDegreeProfile,
};
pub use learned::{assemble, AlphaMode, Model, ModelVariant};
pub use mat::Mat;
pub use nn::{adam_step, init_params, instance_norm, mlp_forward, AdamState, MlpParams};
pub use problems::{
    dataset_load, dataset_save, gen_consensus, gen_least_squares, generate_split, Dataset,
    GenConfig, Objective, ProblemClass, ProblemInstance, Split,
};
pub use training::{
    instance_loss, instance_loss_grad, train, validate, Checkpoint, TrainConfig, TrainResult,
};
