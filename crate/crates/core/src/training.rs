//! Unrolled-loss computation, the epoch loop, validation, and checkpoints.
//!
//! The training loss for one instance runs `K` iterations of the
//! message-passing form with the variant's predicted hyperparameters and
//! compares the final iterates against the known minimizer, normalized by
//! the stored reference run:
//!
//! ```text
//! loss = (1/m) Σᵢ ‖xᵢᴷ(θ) − x*‖² / max(‖x̂ᵢᴷ − x*‖², ε)
//! ```
//!
//! The differentiable path records the whole unrolled computation —
//! including the per-iteration MLP heads and the closed-form x solves — on
//! an autodiff tape and mirrors the plain `f64` iteration operation by
//! operation, so the two agree to machine precision.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Gradients, Tape, ValueId};
use crate::learned::{self, Model, ModelVariant};
use crate::mat;
use crate::nn::{self, AdamState, MlpLeaves, MlpParams};
use crate::problems::{ProblemClass, ProblemInstance};
use crate::{admm, graph};

/// Loss-denominator floor.
pub const DEFAULT_LOSS_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("baseline variant has no trainable parameters")]
    BaselineNotTrainable,
    #[error("empty dataset split")]
    EmptySplit,
    #[error("dataset class {dataset} does not match configured class {config}")]
    ClassMismatch {
        dataset: ProblemClass,
        config: ProblemClass,
    },
    #[error(
        "instance stores a baseline for K={stored} but K={requested} was requested; \
         regenerate the dataset with the matching unroll depth"
    )]
    BaselineKMismatch { stored: usize, requested: usize },
    #[error("non-finite loss on instance seed {instance_seed} at K={k}")]
    NonFinite { instance_seed: u64, k: usize },
    #[error("checkpoint was written for a different configuration (hash {found} vs {expected})")]
    CheckpointMismatch { found: String, expected: String },
    #[error(transparent)]
    Optim(#[from] nn::OptimError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Training hyperparameters; defaults are the published values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub class: ProblemClass,
    pub k: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub loss_eps: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(variant: ModelVariant, class: ProblemClass) -> Self {
        Self {
            variant,
            class,
            k: 10,
            epochs: 100,
            batch_size: 5,
            lr: 1e-4,
            clip: 1.0,
            loss_eps: DEFAULT_LOSS_EPS,
            seed: 0,
        }
    }

    /// Stable fingerprint tying checkpoints to the configuration that
    /// produced them. The epoch budget is excluded: resuming toward a
    /// larger budget is the expected use, while any change to the fields
    /// that shape the trajectory (data class, K, batching, optimizer
    /// settings, seed) must be refused.
    pub fn hash(&self) -> String {
        let mut fixed = self.clone();
        fixed.epochs = 0;
        let json = serde_json::to_string(&fixed).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// `max(‖x̂ᵢ − x*‖², ε)` per node.
fn loss_denominators(instance: &ProblemInstance, eps: f64) -> Vec<f64> {
    instance
        .baseline_xk
        .iter()
        .map(|xi| mat::norm_sq(&mat::vsub(xi, &instance.x_star)).max(eps))
        .collect()
}

/// Normalized distance loss of final iterates `x_final` for one instance.
pub fn loss_from_final(instance: &ProblemInstance, x_final: &[Vec<f64>], eps: f64) -> f64 {
    let denom = loss_denominators(instance, eps);
    let m = instance.node_count();
    assert_eq!(x_final.len(), m);
    let mut acc = 0.0;
    for i in 0..m {
        let num = mat::norm_sq(&mat::vsub(&x_final[i], &instance.x_star));
        acc += num * (1.0 / denom[i]);
    }
    acc * (1.0 / m as f64)
}

fn check_baseline(instance: &ProblemInstance, k: usize) -> Result<(), TrainError> {
    if instance.baseline_k != k {
        return Err(TrainError::BaselineKMismatch {
            stored: instance.baseline_k,
            requested: k,
        });
    }
    Ok(())
}

/// Plain (non-differentiable) instance loss: assembles the variant's
/// schedule and communication matrix, runs `k` iterations, and evaluates
/// the normalized loss. Used for validation and reporting.
pub fn instance_loss(
    model: &Model,
    instance: &ProblemInstance,
    k: usize,
    eps: f64,
) -> Result<f64, TrainError> {
    check_baseline(instance, k)?;
    let (comm, sched) = learned::assemble(model, instance);
    let (state, _) = admm::run(
        instance,
        &comm,
        &sched,
        k,
        false,
        admm::SubproblemSolver::ClosedForm,
    );
    let loss = loss_from_final(instance, &state.x, eps);
    if !loss.is_finite() {
        return Err(TrainError::NonFinite {
            instance_seed: instance.seed,
            k,
        });
    }
    Ok(loss)
}

// ---------------------------------------------------------------------------
// Tape-recorded unrolled loss
// ---------------------------------------------------------------------------

/// Leaf ids of a registered model, in [`Model::flatten`] order.
pub struct ModelLeaves {
    pub step_heads: Vec<MlpLeaves>,
    pub edge_head: Option<MlpLeaves>,
}

pub fn register_model(tape: &mut Tape, model: &Model) -> ModelLeaves {
    ModelLeaves {
        step_heads: model
            .step_heads
            .iter()
            .map(|h| nn::register_mlp(tape, h))
            .collect(),
        edge_head: model.edge_head.as_ref().map(|h| nn::register_mlp(tape, h)),
    }
}

/// Flat gradient vector aligned with [`Model::flatten`].
pub fn collect_model_grads(grads: &Gradients, leaves: &ModelLeaves) -> Vec<f64> {
    let mut out = Vec::new();
    for h in &leaves.step_heads {
        nn::collect_mlp_grads(grads, h, &mut out);
    }
    if let Some(h) = &leaves.edge_head {
        nn::collect_mlp_grads(grads, h, &mut out);
    }
    out
}

struct TapeState {
    x: Vec<ValueId>,
    y: Vec<ValueId>,
    lambda: Vec<ValueId>,
}

/// Records the full unrolled loss on `tape`. The recorded computation
/// mirrors the `f64` message-passing iteration exactly: same summation
/// orders, same solve, same schedule semantics.
pub fn record_instance_loss(
    tape: &mut Tape,
    leaves: &ModelLeaves,
    model: &Model,
    instance: &ProblemInstance,
    k_total: usize,
    eps: f64,
) -> Result<ValueId, TrainError> {
    check_baseline(instance, k_total)?;
    let g = &instance.graph;
    let m = g.node_count();
    let n = instance.n;
    let nonfinite = || TrainError::NonFinite {
        instance_seed: instance.seed,
        k: k_total,
    };

    // Edge weights: predicted once before iteration 1 for edge-learning
    // variants, constant 1 otherwise.
    let edge_vals: Vec<ValueId> = match (&leaves.edge_head, model.variant.learns_edges()) {
        (Some(head), true) => {
            let profiles: Vec<[f64; 5]> = (0..m)
                .map(|i| graph::local_degree_profile(g, i).to_array())
                .collect();
            g.edges()
                .iter()
                .map(|&(a, b)| {
                    let mut fwd = Vec::with_capacity(learned::EDGE_IN_DIM);
                    fwd.extend_from_slice(&profiles[a]);
                    fwd.extend_from_slice(&profiles[b]);
                    let mut rev = Vec::with_capacity(learned::EDGE_IN_DIM);
                    rev.extend_from_slice(&profiles[b]);
                    rev.extend_from_slice(&profiles[a]);
                    let fwd_in = tape.vector(fwd);
                    let rev_in = tape.vector(rev);
                    let e1 = nn::mlp_forward_tape(tape, head, fwd_in);
                    let e2 = nn::mlp_forward_tape(tape, head, rev_in);
                    tape.add(e1, e2)
                })
                .collect()
        }
        _ => g.edges().iter().map(|_| tape.scalar(1.0)).collect(),
    };
    for &e in &edge_vals {
        if !tape.scalar_value(e).is_finite() {
            return Err(nonfinite());
        }
    }
    let neg_edge: Vec<ValueId> = edge_vals.iter().map(|&e| tape.scale_const(-1.0, e)).collect();

    // sorted (neighbor, edge index) lists, mirroring CommMatrix
    let mut neighbors: Vec<Vec<(usize, usize)>> = vec![Vec::new(); m];
    for (idx, &(a, b)) in g.edges().iter().enumerate() {
        neighbors[a].push((b, idx));
        neighbors[b].push((a, idx));
    }
    for list in &mut neighbors {
        list.sort_unstable_by_key(|&(j, _)| j);
    }

    // per-node P_ii and M_ii as tape scalars (same fold order as CommMatrix)
    let mut weighted_degree = Vec::with_capacity(m);
    let mut penalty = Vec::with_capacity(m);
    for i in 0..m {
        let mut wd: Option<ValueId> = None;
        let mut sq: Option<ValueId> = None;
        for &(_, idx) in &neighbors[i] {
            let e = edge_vals[idx];
            let e_sq = tape.mul(e, e);
            wd = Some(match wd {
                None => e,
                Some(acc) => tape.add(acc, e),
            });
            sq = Some(match sq {
                None => e_sq,
                Some(acc) => tape.add(acc, e_sq),
            });
        }
        let wd = wd.expect("connected graph has no isolated nodes");
        let sq = sq.expect("connected graph has no isolated nodes");
        let wd_sq = tape.mul(wd, wd);
        penalty.push(tape.add(sq, wd_sq));
        weighted_degree.push(wd);
    }

    // constant per-node data terms
    let data_terms: Vec<ValueId> = (0..m)
        .map(|i| {
            let two_b = match &instance.objective {
                crate::problems::Objective::Consensus(o) => mat::vscale(2.0, &o.targets[i]),
                crate::problems::Objective::LeastSquares(o) => {
                    mat::vscale(2.0, &o.design[i].transpose().matvec(&o.obs[i]))
                }
            };
            tape.vector(two_b)
        })
        .collect();
    let gram2: Vec<Option<crate::mat::Mat>> = (0..m)
        .map(|i| match &instance.objective {
            crate::problems::Objective::Consensus(_) => None,
            crate::problems::Objective::LeastSquares(o) => Some(o.design[i].gram().scale(2.0)),
        })
        .collect();

    // zero start
    let mut state = TapeState {
        x: (0..m).map(|_| tape.vector(vec![0.0; n])).collect(),
        y: (0..m).map(|_| tape.vector(vec![0.0; n])).collect(),
        lambda: (0..m).map(|_| tape.vector(vec![0.0; n])).collect(),
    };

    let alpha_mode = model.variant.alpha_mode();
    let one = tape.scalar(1.0);

    for k in 1..=k_total {
        // block 1 aggregation: ascending source order per target node
        let mut lambda_in = Vec::with_capacity(m);
        let mut y_in = Vec::with_capacity(m);
        for i in 0..m {
            let mut l_acc: Option<ValueId> = None;
            let mut y_acc: Option<ValueId> = None;
            for &(j, idx) in &neighbors[i] {
                let lm = tape.scale(neg_edge[idx], state.lambda[j]);
                let ym = tape.scale(neg_edge[idx], state.y[j]);
                l_acc = Some(match l_acc {
                    None => lm,
                    Some(acc) => tape.add(acc, lm),
                });
                y_acc = Some(match y_acc {
                    None => ym,
                    Some(acc) => tape.add(acc, ym),
                });
            }
            lambda_in.push(l_acc.expect("no isolated nodes"));
            y_in.push(y_acc.expect("no isolated nodes"));
        }

        // step sizes for this iteration
        let alphas: Vec<ValueId> = match alpha_mode {
            Some(mode)
                if (learned::FIRST_LEARNED_ITER..=learned::LEARNED_HORIZON).contains(&k) =>
            {
                let head = &leaves.step_heads[k - learned::FIRST_LEARNED_ITER];
                let rows: Vec<ValueId> = (0..m)
                    .map(|i| {
                        tape.concat(&[
                            state.x[i],
                            state.y[i],
                            state.lambda[i],
                            lambda_in[i],
                            y_in[i],
                        ])
                    })
                    .collect();
                let normed = nn::instance_norm_tape(tape, &rows, nn::NORM_EPS);
                let m_const = tape.scalar(m as f64);
                let locals: Vec<ValueId> = normed
                    .iter()
                    .map(|&row| {
                        let input = tape.concat(&[row, m_const]);
                        nn::mlp_forward_tape(tape, head, input)
                    })
                    .collect();
                match mode {
                    learned::AlphaMode::Local => locals,
                    learned::AlphaMode::Global => {
                        let mut acc = locals[0];
                        for &l in &locals[1..] {
                            acc = tape.add(acc, l);
                        }
                        let mean = tape.scale_const(1.0 / m as f64, acc);
                        vec![mean; m]
                    }
                }
            }
            _ => vec![one; m],
        };
        if !alphas.iter().all(|&a| tape.scalar_value(a).is_finite()) {
            return Err(nonfinite());
        }

        // update 1: closed-form x solve per node
        let mut x_new = Vec::with_capacity(m);
        for i in 0..m {
            let alpha = alphas[i];
            let wd = weighted_degree[i];
            let pen = penalty[i];
            let t1 = tape.scale(pen, state.x[i]);
            let t2 = tape.scale(wd, state.y[i]);
            let t12 = tape.sub(t1, t2);
            let t = tape.sub(t12, y_in[i]);
            let wl = tape.scale(wd, state.lambda[i]);
            let r1 = tape.sub(data_terms[i], wl);
            let r2 = tape.sub(r1, lambda_in[i]);
            let at = tape.scale(alpha, t);
            let rhs = tape.add(r2, at);
            let x_next = match &gram2[i] {
                None => {
                    // diagonal system: scalar reciprocal
                    let am = tape.mul(alpha, pen);
                    let denom = tape.add_const(2.0, am);
                    let inv = tape.recip(denom);
                    tape.scale(inv, rhs)
                }
                Some(gram2_i) => {
                    let am = tape.mul(alpha, pen);
                    let identity = tape.matrix(crate::mat::Mat::identity(n));
                    let shift = tape.scale(am, identity);
                    let gram_const = tape.matrix(gram2_i.clone());
                    let a = tape.add(gram_const, shift);
                    tape.spd_solve(a, rhs)
                }
            };
            x_new.push(x_next);
        }

        // block 2: messages P_ij x_j, aggregation, (y, λ) update
        let mut y_new = Vec::with_capacity(m);
        let mut lambda_new = Vec::with_capacity(m);
        for i in 0..m {
            let mut x_acc: Option<ValueId> = None;
            for &(j, idx) in &neighbors[i] {
                let msg = tape.scale(neg_edge[idx], x_new[j]);
                x_acc = Some(match x_acc {
                    None => msg,
                    Some(acc) => tape.add(acc, msg),
                });
            }
            let x_in = x_acc.expect("no isolated nodes");
            let own = tape.scale(weighted_degree[i], x_new[i]);
            let summed = tape.add(x_in, own);
            let y_i = tape.scale_const(1.0 / (neighbors[i].len() as f64 + 1.0), summed);
            let ay = tape.scale(alphas[i], y_i);
            let l_i = tape.add(state.lambda[i], ay);
            y_new.push(y_i);
            lambda_new.push(l_i);
        }
        state = TapeState {
            x: x_new,
            y: y_new,
            lambda: lambda_new,
        };
    }

    // normalized loss against the stored reference run
    let denom = loss_denominators(instance, eps);
    let x_star = tape.vector(instance.x_star.clone());
    let mut acc: Option<ValueId> = None;
    for i in 0..m {
        let diff = tape.sub(state.x[i], x_star);
        let num = tape.sq_norm(diff);
        let term = tape.scale_const(1.0 / denom[i], num);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    let total = acc.expect("at least one node");
    Ok(tape.scale_const(1.0 / m as f64, total))
}

/// Records the loss, checks finiteness, and returns `(loss, dloss/dθ)` with
/// the gradient flattened in [`Model::flatten`] order.
pub fn instance_loss_grad(
    model: &Model,
    instance: &ProblemInstance,
    k: usize,
    eps: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    let mut tape = Tape::new();
    let leaves = register_model(&mut tape, model);
    let root = record_instance_loss(&mut tape, &leaves, model, instance, k, eps)?;
    if tape.ensure_finite().is_err() || !tape.scalar_value(root).is_finite() {
        return Err(TrainError::NonFinite {
            instance_seed: instance.seed,
            k,
        });
    }
    let grads = tape.backward(root);
    let flat = collect_model_grads(&grads, &leaves);
    Ok((tape.scalar_value(root), flat))
}

/// Mean plain loss over a split, in dataset order; no gradients recorded.
pub fn validate(
    model: &Model,
    split: &[ProblemInstance],
    k: usize,
    eps: f64,
) -> Result<f64, TrainError> {
    if split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    let losses: Result<Vec<f64>, TrainError> = split
        .par_iter()
        .map(|inst| instance_loss(model, inst, k, eps))
        .collect();
    let losses = losses?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

// ---------------------------------------------------------------------------
// Checkpoints and the epoch loop
// ---------------------------------------------------------------------------

/// Serialized training state: per-MLP flat parameter arrays (row-major),
/// optimizer moments, progress counters, and the config fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub variant: ModelVariant,
    pub n: usize,
    pub step_heads: Vec<Vec<f64>>,
    pub edge_head: Option<Vec<f64>>,
    pub adam: AdamState,
    pub epoch: usize,
    pub best_val: f64,
    pub config_hash: String,
    pub run_seed: u64,
}

impl Checkpoint {
    pub fn from_parts(
        model: &Model,
        adam: &AdamState,
        epoch: usize,
        best_val: f64,
        config_hash: String,
        run_seed: u64,
        n: usize,
    ) -> Self {
        let flatten_head = |h: &MlpParams| -> Vec<f64> {
            let mut v = Vec::with_capacity(h.param_count());
            h.flatten_into(&mut v);
            v
        };
        Self {
            variant: model.variant,
            n,
            step_heads: model.step_heads.iter().map(flatten_head).collect(),
            edge_head: model.edge_head.as_ref().map(flatten_head),
            adam: adam.clone(),
            epoch,
            best_val,
            config_hash,
            run_seed,
        }
    }

    pub fn to_model(&self) -> Model {
        let mut model = Model::zeroed(self.variant, self.n);
        for (head, flat) in model.step_heads.iter_mut().zip(&self.step_heads) {
            let mut off = 0;
            head.read_from(flat, &mut off);
        }
        if let (Some(head), Some(flat)) = (&mut model.edge_head, &self.edge_head) {
            let mut off = 0;
            head.read_from(flat, &mut off);
        }
        model
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        let json = serde_json::to_string(self)?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct TrainResult {
    /// State after the final epoch.
    pub last: Checkpoint,
    /// Best-validation checkpoint reached during this run, if any epoch
    /// improved on the resumed baseline.
    pub best: Option<Checkpoint>,
    pub update_steps: u64,
    pub logs: Vec<EpochLog>,
}

/// Number of optimizer updates a full run performs.
pub fn planned_update_steps(train_len: usize, batch_size: usize, epochs: usize) -> u64 {
    (train_len.div_ceil(batch_size) * epochs) as u64
}

fn shuffle_seed(run_seed: u64, epoch: usize) -> u64 {
    let mut z = run_seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z ^ (z >> 31)
}

/// Trains a model with seeded shuffling, batched unrolled gradients,
/// global clipping, and Adam. Writes `ckpt_last.json`, `ckpt_best.json`,
/// and `train_log.jsonl` into `run_dir` when given. Resuming from a
/// checkpoint continues at its recorded epoch and reproduces the
/// uninterrupted run exactly.
pub fn train(
    cfg: &TrainConfig,
    train_split: &[ProblemInstance],
    val_split: &[ProblemInstance],
    run_dir: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<TrainResult, TrainError> {
    if cfg.variant == ModelVariant::Baseline {
        return Err(TrainError::BaselineNotTrainable);
    }
    if train_split.is_empty() || val_split.is_empty() {
        return Err(TrainError::EmptySplit);
    }
    for inst in train_split.iter().chain(val_split) {
        let class = inst.objective.class();
        if class != cfg.class {
            return Err(TrainError::ClassMismatch {
                dataset: class,
                config: cfg.class,
            });
        }
        check_baseline(inst, cfg.k)?;
    }

    let n = train_split[0].n;
    let config_hash = cfg.hash();
    let (mut model, mut adam, start_epoch, mut best_val) = match resume {
        Some(ckpt) => {
            if ckpt.config_hash != config_hash {
                return Err(TrainError::CheckpointMismatch {
                    found: ckpt.config_hash.clone(),
                    expected: config_hash,
                });
            }
            (ckpt.to_model(), ckpt.adam.clone(), ckpt.epoch, ckpt.best_val)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let model = Model::init(cfg.variant, n, &mut rng);
            let adam = AdamState::new(model.param_count());
            (model, adam, 0, f64::INFINITY)
        }
    };

    let mut params = model.flatten();
    let mut best: Option<Checkpoint> = None;
    let mut logs = Vec::new();
    let mut update_steps: u64 = 0;

    if let Some(dir) = run_dir {
        fs::create_dir_all(dir)?;
    }

    for epoch in start_epoch..cfg.epochs {
        let clock = Instant::now();
        let mut order: Vec<usize> = (0..train_split.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed(cfg.seed, epoch));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let results: Result<Vec<(f64, Vec<f64>)>, TrainError> = batch
                .par_iter()
                .map(|&idx| instance_loss_grad(&model, &train_split[idx], cfg.k, cfg.loss_eps))
                .collect();
            let results = results?;
            // batch gradient: mean of per-instance gradients in batch order
            let scale = 1.0 / batch.len() as f64;
            let mut grad = vec![0.0; params.len()];
            for (loss, g) in &results {
                loss_sum += loss;
                mat::vaxpy(&mut grad, scale, g);
            }
            nn::adam_step(&mut params, &grad, &mut adam, cfg.lr, cfg.clip)?;
            model.set_from_flat(&params);
            update_steps += 1;
        }
        let train_loss = loss_sum / train_split.len() as f64;
        let val_loss = validate(&model, val_split, cfg.k, cfg.loss_eps)?;

        let completed = epoch + 1;
        let log = EpochLog {
            epoch: completed,
            train_loss,
            val_loss,
            wall_time_s: clock.elapsed().as_secs_f64(),
        };
        logs.push(log.clone());

        if val_loss < best_val {
            best_val = val_loss;
            best = Some(Checkpoint::from_parts(
                &model,
                &adam,
                completed,
                best_val,
                config_hash.clone(),
                cfg.seed,
                n,
            ));
        }
        if let Some(dir) = run_dir {
            let last = Checkpoint::from_parts(
                &model,
                &adam,
                completed,
                best_val,
                config_hash.clone(),
                cfg.seed,
                n,
            );
            last.save(&dir.join("ckpt_last.json"))?;
            if let Some(b) = &best {
                b.save(&dir.join("ckpt_best.json"))?;
            }
            let mut log_file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join("train_log.jsonl"))?;
            serde_json::to_writer(&mut log_file, &log)?;
            log_file.write_all(b"\n")?;
        }
    }

    let last = Checkpoint::from_parts(
        &model,
        &adam,
        cfg.epochs,
        best_val,
        config_hash,
        cfg.seed,
        n,
    );
    Ok(TrainResult {
        last,
        best,
        update_steps,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admm::{CommMatrix, StepSchedule, SubproblemSolver};
    use crate::autodiff::finite_difference;
    use crate::problems::{
        gen_consensus, gen_least_squares, generate_split, permute_instance, GenConfig, Split,
    };

    fn cfg_gen(k: usize) -> GenConfig {
        GenConfig {
            baseline_k: k,
            ..GenConfig::default()
        }
    }

    fn small_instance(class: ProblemClass, seed: u64, k: usize) -> ProblemInstance {
        let cfg = GenConfig {
            nodes: 4,
            baseline_k: k,
            ..GenConfig::default()
        };
        match class {
            ProblemClass::Consensus => gen_consensus(&cfg, seed).unwrap(),
            ProblemClass::LeastSquares => gen_least_squares(&cfg, seed).unwrap(),
        }
    }

    #[test]
    fn baseline_loss_is_exactly_one() {
        let instance = gen_consensus(&cfg_gen(10), 50).unwrap();
        let model = Model::zeroed(ModelVariant::Baseline, 2);
        let loss = instance_loss(&model, &instance, 10, DEFAULT_LOSS_EPS).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn loss_at_the_minimizer_is_zero() {
        let instance = gen_consensus(&cfg_gen(10), 51).unwrap();
        let at_star = vec![instance.x_star.clone(); 8];
        assert_eq!(loss_from_final(&instance, &at_star, DEFAULT_LOSS_EPS), 0.0);
    }

    #[test]
    fn hand_built_loss_value() {
        // m = 2, numerators {1, 1}, denominators {4, 1} → 0.625
        let mut instance = small_instance(ProblemClass::Consensus, 52, 10);
        instance.graph = crate::graph::Graph::new(2, [(0, 1)]);
        instance.objective = crate::problems::Objective::Consensus(
            crate::problems::ConsensusObjective {
                targets: vec![vec![0.0, 0.0], vec![0.0, 0.0]],
            },
        );
        instance.x_star = vec![0.0, 0.0];
        instance.baseline_xk = vec![vec![2.0, 0.0], vec![1.0, 0.0]];
        let x_final = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let loss = loss_from_final(&instance, &x_final, DEFAULT_LOSS_EPS);
        assert!((loss - 0.625).abs() < 1e-15);
    }

    #[test]
    fn mismatched_baseline_depth_is_rejected() {
        let instance = gen_consensus(&cfg_gen(10), 53).unwrap();
        let model = Model::zeroed(ModelVariant::Baseline, 2);
        assert!(matches!(
            instance_loss(&model, &instance, 7, DEFAULT_LOSS_EPS),
            Err(TrainError::BaselineKMismatch {
                stored: 10,
                requested: 7
            })
        ));
    }

    #[test]
    fn tape_forward_matches_plain_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for (variant, seed) in [
            (ModelVariant::GlobalAlpha, 61u64),
            (ModelVariant::LocalAlpha, 62),
            (ModelVariant::EdgeWeights, 63),
            (ModelVariant::Combined, 64),
        ] {
            for class in [ProblemClass::Consensus, ProblemClass::LeastSquares] {
                let instance = match class {
                    ProblemClass::Consensus => gen_consensus(&cfg_gen(10), seed).unwrap(),
                    ProblemClass::LeastSquares => gen_least_squares(&cfg_gen(10), seed).unwrap(),
                };
                let model = Model::init(variant, 2, &mut rng);
                let plain = instance_loss(&model, &instance, 10, DEFAULT_LOSS_EPS).unwrap();
                let (taped, _) =
                    instance_loss_grad(&model, &instance, 10, DEFAULT_LOSS_EPS).unwrap();
                assert!(
                    (plain - taped).abs() <= 1e-12 * plain.abs().max(1.0),
                    "{variant} on {class}: plain {plain} vs tape {taped}"
                );
            }
        }
    }

    #[test]
    fn unrolled_gradient_matches_finite_differences() {
        // miniature setting: m = 4, n = 2, K = 3
        for variant in [
            ModelVariant::GlobalAlpha,
            ModelVariant::LocalAlpha,
            ModelVariant::EdgeWeights,
            ModelVariant::Combined,
        ] {
            let instance = small_instance(ProblemClass::Consensus, 70, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(71);
            let model = Model::init(variant, 2, &mut rng);
            let theta = model.flatten();
            let (_, ad) = instance_loss_grad(&model, &instance, 3, DEFAULT_LOSS_EPS).unwrap();
            let fd = finite_difference(
                |p| {
                    let mut probe = model.clone();
                    probe.set_from_flat(p);
                    instance_loss(&probe, &instance, 3, DEFAULT_LOSS_EPS).unwrap()
                },
                &theta,
                1e-5,
            );
            let mut worst = 0.0f64;
            for (a, f) in ad.iter().zip(&fd) {
                let rel = (a - f).abs() / a.abs().max(f.abs()).max(1e-4);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "{variant}: max relative error {worst}");
        }
    }

    #[test]
    fn tape_size_grows_linearly_in_depth() {
        let instance = gen_consensus(&cfg_gen(10), 72).unwrap();
        let model = Model::init(ModelVariant::Combined, 2, &mut ChaCha8Rng::seed_from_u64(73));
        let nodes_at = |k: usize| -> usize {
            let mut inst = instance.clone();
            inst.baseline_k = k;
            let mut tape = Tape::new();
            let leaves = register_model(&mut tape, &model);
            record_instance_loss(&mut tape, &leaves, &model, &inst, k, DEFAULT_LOSS_EPS).unwrap();
            tape.len()
        };
        let at5 = nodes_at(5);
        let at10 = nodes_at(10);
        // affine in K: the K=10 tape is at most ~2.2x the K=5 tape
        assert!(at10 < at5 * 22 / 10, "tape grew superlinearly: {at5} -> {at10}");
    }

    #[test]
    fn loss_is_invariant_under_relabeling() {
        let instance = gen_consensus(&cfg_gen(10), 74).unwrap();
        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let permuted = permute_instance(&instance, &perm);
        let mut rng = ChaCha8Rng::seed_from_u64(75);
        for variant in [ModelVariant::LocalAlpha, ModelVariant::Combined] {
            let model = Model::init(variant, 2, &mut rng);
            let a = instance_loss(&model, &instance, 10, DEFAULT_LOSS_EPS).unwrap();
            let b = instance_loss(&model, &permuted, 10, DEFAULT_LOSS_EPS).unwrap();
            assert!((a - b).abs() <= 1e-9 * a.max(1.0), "{variant}: {a} vs {b}");
        }
    }

    #[test]
    fn constant_heads_match_explicit_schedule() {
        // zeroed step heads predict ln 2 everywhere; the run must equal a per-
        // iteration schedule [1, ln2 × 9] on the unit Laplacian
        let instance = gen_consensus(&cfg_gen(10), 76).unwrap();
        let model = Model::zeroed(ModelVariant::GlobalAlpha, 2);
        let loss_learned = instance_loss(&model, &instance, 10, DEFAULT_LOSS_EPS).unwrap();
        let mut alphas = vec![std::f64::consts::LN_2; 10];
        alphas[0] = 1.0;
        let sched = StepSchedule::PerIteration {
            alphas,
            default: 1.0,
        };
        let comm = CommMatrix::unit(&instance.graph);
        let (state, _) =
            admm::run(&instance, &comm, &sched, 10, false, SubproblemSolver::ClosedForm);
        let loss_plain = loss_from_final(&instance, &state.x, DEFAULT_LOSS_EPS);
        assert!((loss_learned - loss_plain).abs() <= 1e-12);
    }

    #[test]
    fn planned_updates_formula() {
        assert_eq!(planned_update_steps(900, 5, 100), 18_000);
        assert_eq!(planned_update_steps(20, 5, 3), 12);
        assert_eq!(planned_update_steps(21, 5, 1), 5);
    }

    fn tiny_dataset(k: usize) -> (Vec<ProblemInstance>, Vec<ProblemInstance>) {
        let cfg = cfg_gen(k);
        let train = generate_split(ProblemClass::Consensus, &cfg, 77, Split::Train, 10)
            .unwrap()
            .instances;
        let val = generate_split(ProblemClass::Consensus, &cfg, 77, Split::Val, 4)
            .unwrap()
            .instances;
        (train, val)
    }

    #[test]
    fn training_is_deterministic_and_counts_updates() {
        let (train_split, val_split) = tiny_dataset(5);
        let mut cfg = TrainConfig::new(ModelVariant::GlobalAlpha, ProblemClass::Consensus);
        cfg.k = 5;
        cfg.epochs = 2;
        cfg.seed = 11;
        let a = train(&cfg, &train_split, &val_split, None, None).unwrap();
        let b = train(&cfg, &train_split, &val_split, None, None).unwrap();
        assert_eq!(a.last, b.last);
        assert_eq!(a.update_steps, planned_update_steps(10, 5, 2));
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let (train_split, val_split) = tiny_dataset(5);
        let mut cfg = TrainConfig::new(ModelVariant::LocalAlpha, ProblemClass::Consensus);
        cfg.k = 5;
        cfg.epochs = 4;
        cfg.seed = 13;
        let full = train(&cfg, &train_split, &val_split, None, None).unwrap();

        let mut cfg_half = cfg.clone();
        cfg_half.epochs = 2;
        let half = train(&cfg_half, &train_split, &val_split, None, None).unwrap();
        // the epoch budget is excluded from the hash, so a shorter run's
        // checkpoint resumes cleanly toward the full budget
        let resumed = train(&cfg, &train_split, &val_split, None, Some(&half.last)).unwrap();
        assert_eq!(full.last.step_heads, resumed.last.step_heads);
        assert_eq!(full.last.adam, resumed.last.adam);

        let mut wrong = cfg.clone();
        wrong.lr = 2e-4;
        assert!(matches!(
            train(&wrong, &train_split, &val_split, None, Some(&half.last)),
            Err(TrainError::CheckpointMismatch { .. })
        ));
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let (train_split, val_split) = tiny_dataset(5);
        let mut cfg = TrainConfig::new(ModelVariant::GlobalAlpha, ProblemClass::Consensus);
        cfg.k = 5;
        cfg.epochs = 0;
        cfg.seed = 21;
        let out = train(&cfg, &train_split, &val_split, None, None).unwrap();
        assert_eq!(out.update_steps, 0);
        assert!(out.best.is_none());
        let fresh = Model::init(
            ModelVariant::GlobalAlpha,
            2,
            &mut ChaCha8Rng::seed_from_u64(21),
        );
        assert_eq!(out.last.to_model(), fresh);
    }

    #[test]
    fn smoke_training_decreases_the_loss() {
        // combined on consensus: mean training loss strictly lower at epoch
        // 10 than at epoch 1
        let cfg = cfg_gen(10);
        let train_split = generate_split(ProblemClass::Consensus, &cfg, 88, Split::Train, 40)
            .unwrap()
            .instances;
        let val_split = generate_split(ProblemClass::Consensus, &cfg, 88, Split::Val, 5)
            .unwrap()
            .instances;
        let mut tcfg = TrainConfig::new(ModelVariant::Combined, ProblemClass::Consensus);
        tcfg.epochs = 10;
        tcfg.seed = 6;
        let out = train(&tcfg, &train_split, &val_split, None, None).unwrap();
        let first = out.logs.first().unwrap().train_loss;
        let last = out.logs.last().unwrap().train_loss;
        assert!(
            last < first,
            "training loss did not improve: epoch 1 = {first}, epoch 10 = {last}"
        );
    }

    #[test]
    fn baseline_variant_is_rejected() {
        let (train_split, val_split) = tiny_dataset(5);
        let mut cfg = TrainConfig::new(ModelVariant::Baseline, ProblemClass::Consensus);
        cfg.k = 5;
        assert!(matches!(
            train(&cfg, &train_split, &val_split, None, None),
            Err(TrainError::BaselineNotTrainable)
        ));
    }

    #[test]
    fn validation_of_reloaded_checkpoint_is_identical() {
        let (train_split, val_split) = tiny_dataset(5);
        let mut cfg = TrainConfig::new(ModelVariant::Combined, ProblemClass::Consensus);
        cfg.k = 5;
        cfg.epochs = 1;
        let out = train(&cfg, &train_split, &val_split, None, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        out.last.save(&path).unwrap();
        let reloaded = Checkpoint::load(&path).unwrap();
        assert_eq!(reloaded, out.last);
        let a = validate(&out.last.to_model(), &val_split, 5, DEFAULT_LOSS_EPS).unwrap();
        let b = validate(&reloaded.to_model(), &val_split, 5, DEFAULT_LOSS_EPS).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn validate_rejects_empty_split() {
        let model = Model::zeroed(ModelVariant::Baseline, 2);
        assert!(matches!(
            validate(&model, &[], 10, DEFAULT_LOSS_EPS),
            Err(TrainError::EmptySplit)
        ));
    }
}
