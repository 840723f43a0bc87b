//! Hyperparameter prediction heads and schedule assembly.
//!
//! Four learned variants exist on top of the non-learned baseline:
//! a graph-level step size (every node predicts, the mean is shared), a
//! node-level step size, learned edge weights (a fixed preconditioning
//! Laplacian predicted once before the first iteration), and the
//! combination of node-level step sizes with learned edge weights.
//!
//! Step-size heads are per-iteration MLPs covering iterations
//! `2..=10`; iteration 1 always runs with the default step size, and
//! iterations past the horizon freeze back to it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::admm::{Aggregates, CommMatrix, IterState, StepSchedule};
use crate::graph::{self, EdgeWeights, Graph};
use crate::nn::{self, MlpParams};
use crate::problems::ProblemInstance;

/// First iteration whose step size is predicted.
pub const FIRST_LEARNED_ITER: usize = 2;

/// Last iteration with its own head (`L = K`).
pub const LEARNED_HORIZON: usize = 10;

/// Number of per-iteration step-size heads.
pub const STEP_HEAD_COUNT: usize = LEARNED_HORIZON - FIRST_LEARNED_ITER + 1;

/// Step size used outside the learned window.
pub const DEFAULT_ALPHA: f64 = 1.0;

/// Edge-head input: two concatenated 5-feature local degree profiles.
pub const EDGE_IN_DIM: usize = 10;

/// Step-head input width for local dimension `n`:
/// `(x, y, λ, λ̄, ȳ)` blocks plus the node count.
pub fn step_in_dim(n: usize) -> usize {
    5 * n + 1
}

/// Whether the step size is shared across the graph or per node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelVariant {
    Baseline,
    GlobalAlpha,
    LocalAlpha,
    EdgeWeights,
    Combined,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 5] = [
        ModelVariant::Baseline,
        ModelVariant::GlobalAlpha,
        ModelVariant::LocalAlpha,
        ModelVariant::EdgeWeights,
        ModelVariant::Combined,
    ];

    pub fn alpha_mode(&self) -> Option<AlphaMode> {
        match self {
            ModelVariant::GlobalAlpha => Some(AlphaMode::Global),
            ModelVariant::LocalAlpha | ModelVariant::Combined => Some(AlphaMode::Local),
            ModelVariant::Baseline | ModelVariant::EdgeWeights => None,
        }
    }

    pub fn learns_edges(&self) -> bool {
        matches!(self, ModelVariant::EdgeWeights | ModelVariant::Combined)
    }
}

impl std::fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelVariant::Baseline => "baseline",
            ModelVariant::GlobalAlpha => "global_alpha",
            ModelVariant::LocalAlpha => "local_alpha",
            ModelVariant::EdgeWeights => "edge_weights",
            ModelVariant::Combined => "combined",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for ModelVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "baseline" => Ok(ModelVariant::Baseline),
            "global_alpha" => Ok(ModelVariant::GlobalAlpha),
            "local_alpha" => Ok(ModelVariant::LocalAlpha),
            "edge_weights" => Ok(ModelVariant::EdgeWeights),
            "combined" => Ok(ModelVariant::Combined),
            other => Err(format!("unknown variant '{other}'")),
        }
    }
}

/// Trainable parameters of one variant: step-size heads (one per learned
/// iteration) and/or the edge-weight head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub variant: ModelVariant,
    pub step_heads: Vec<MlpParams>,
    pub edge_head: Option<MlpParams>,
}

/// `softplus⁻¹(y) = ln(eʸ − 1)`.
fn softplus_inverse(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

/// Zeroes the output layer and sets its bias so the head initially
/// predicts exactly `target` for every input. Training then starts at the
/// default hyperparameters instead of paying a cold-start penalty.
fn calibrate_output(head: &mut MlpParams, target: f64) {
    head.w2 = crate::mat::Mat::zeros(1, nn::HIDDEN);
    head.b2 = softplus_inverse(target);
}

impl Model {
    /// Fresh model for `variant`: Glorot-uniform hidden layers with zero
    /// biases, drawn in a fixed order from `rng`, and output layers
    /// calibrated so the initial predictions equal the defaults
    /// (step size 1, edge weight 1).
    pub fn init<R: Rng>(variant: ModelVariant, n: usize, rng: &mut R) -> Self {
        let step_heads = if variant.alpha_mode().is_some() {
            (0..STEP_HEAD_COUNT)
                .map(|_| {
                    let mut head = nn::init_params(step_in_dim(n), rng);
                    calibrate_output(&mut head, DEFAULT_ALPHA);
                    head
                })
                .collect()
        } else {
            Vec::new()
        };
        let edge_head = variant.learns_edges().then(|| {
            let mut head = nn::init_params(EDGE_IN_DIM, rng);
            // the symmetrized weight sums two directed predictions
            calibrate_output(&mut head, 0.5);
            head
        });
        Self {
            variant,
            step_heads,
            edge_head,
        }
    }

    /// All-zero parameters (every head outputs `ln 2`); used by tests.
    pub fn zeroed(variant: ModelVariant, n: usize) -> Self {
        let step_heads = if variant.alpha_mode().is_some() {
            vec![MlpParams::zeros(step_in_dim(n)); STEP_HEAD_COUNT]
        } else {
            Vec::new()
        };
        let edge_head = variant.learns_edges().then(|| MlpParams::zeros(EDGE_IN_DIM));
        Self {
            variant,
            step_heads,
            edge_head,
        }
    }

    pub fn param_count(&self) -> usize {
        self.step_heads.iter().map(|h| h.param_count()).sum::<usize>()
            + self.edge_head.as_ref().map_or(0, |h| h.param_count())
    }

    /// Flat parameter vector: step heads in iteration order, then the edge
    /// head, each in [`MlpParams::flatten_into`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for h in &self.step_heads {
            h.flatten_into(&mut out);
        }
        if let Some(h) = &self.edge_head {
            h.flatten_into(&mut out);
        }
        out
    }

    /// Reads parameters back in [`Model::flatten`] order.
    pub fn set_from_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length mismatch");
        let mut offset = 0;
        for h in &mut self.step_heads {
            h.read_from(flat, &mut offset);
        }
        if let Some(h) = &mut self.edge_head {
            h.read_from(flat, &mut offset);
        }
    }
}

/// Per-node step-head inputs for one iteration: rows
/// `(x_i, y_i, λ_i, λ̄_→i, ȳ_→i)` are instance-normalized, then the raw node
/// count is appended as the final column.
pub fn step_input(state: &IterState, agg: &Aggregates, m: usize) -> Vec<Vec<f64>> {
    assert_eq!(state.x.len(), m);
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            let mut row = Vec::with_capacity(5 * state.x[i].len());
            row.extend_from_slice(&state.x[i]);
            row.extend_from_slice(&state.y[i]);
            row.extend_from_slice(&state.lambda[i]);
            row.extend_from_slice(&agg.lambda_in[i]);
            row.extend_from_slice(&agg.y_in[i]);
            row
        })
        .collect();
    let mut normalized = nn::instance_norm(&rows, nn::NORM_EPS);
    for row in &mut normalized {
        row.push(m as f64);
    }
    normalized
}

/// One positive step size per node; weights shared across nodes.
pub fn predict_alpha_local(head: &MlpParams, inputs: &[Vec<f64>]) -> Vec<f64> {
    inputs.iter().map(|row| nn::mlp_forward(head, row)).collect()
}

/// Mean of the per-node predictions, shared by every node this iteration.
pub fn predict_alpha_global(head: &MlpParams, inputs: &[Vec<f64>]) -> f64 {
    let locals = predict_alpha_local(head, inputs);
    locals.iter().sum::<f64>() * (1.0 / locals.len() as f64)
}

/// Predicts one positive weight per undirected edge by summing the two
/// directed evaluations of the head on concatenated local degree profiles.
/// Predicted once, before iteration 1, and reused for every iteration.
pub fn predict_edge_weights(head: &MlpParams, g: &Graph) -> EdgeWeights {
    let profiles: Vec<[f64; 5]> = (0..g.node_count())
        .map(|i| graph::local_degree_profile(g, i).to_array())
        .collect();
    let values: Vec<f64> = g
        .edges()
        .iter()
        .map(|&(a, b)| {
            let mut fwd = Vec::with_capacity(EDGE_IN_DIM);
            fwd.extend_from_slice(&profiles[a]);
            fwd.extend_from_slice(&profiles[b]);
            let mut rev = Vec::with_capacity(EDGE_IN_DIM);
            rev.extend_from_slice(&profiles[b]);
            rev.extend_from_slice(&profiles[a]);
            nn::mlp_forward(head, &fwd) + nn::mlp_forward(head, &rev)
        })
        .collect();
    EdgeWeights::new(g, values)
}

/// Builds the communication matrix and step schedule a variant runs with.
/// Edge-learning variants predict the weighted Laplacian from the model;
/// everything else uses unit weights.
pub fn assemble(model: &Model, instance: &ProblemInstance) -> (CommMatrix, StepSchedule) {
    let comm = match (&model.edge_head, model.variant.learns_edges()) {
        (Some(head), true) => {
            let weights = predict_edge_weights(head, &instance.graph);
            CommMatrix::new(&instance.graph, &weights)
        }
        (None, false) => CommMatrix::unit(&instance.graph),
        _ => panic!("model heads do not match variant {}", model.variant),
    };
    let sched = match model.variant.alpha_mode() {
        Some(mode) => {
            assert_eq!(
                model.step_heads.len(),
                STEP_HEAD_COUNT,
                "variant {} expects {} step heads",
                model.variant,
                STEP_HEAD_COUNT
            );
            StepSchedule::Learned {
                mode,
                heads: model.step_heads.clone(),
                first_learned: FIRST_LEARNED_ITER,
                horizon: LEARNED_HORIZON,
                default_alpha: DEFAULT_ALPHA,
            }
        }
        None => StepSchedule::Constant(DEFAULT_ALPHA),
    };
    (comm, sched)
}
