//! Two-layer perceptrons with a softplus output head, instance
//! normalization, Glorot initialization, and Adam with global gradient
//! clipping.
//!
//! Each MLP maps an input vector to one strictly positive scalar:
//! `softplus(w2 · relu(w1 x + b1) + b2)`. The same forward pass exists in a
//! plain `f64` version and a tape-recorded version so that training can
//! differentiate through it.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{relu, softplus, Gradients, Tape, ValueId};
use crate::mat::{self, Mat};

/// Hidden layer width shared by every head.
pub const HIDDEN: usize = 32;

/// Normalization floor used by [`instance_norm`].
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite gradient at coordinate {index}")]
    NonFiniteGradient { index: usize },
}

/// Parameters of one two-layer MLP with scalar output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Mat,      // HIDDEN x in_dim
    pub b1: Vec<f64>, // HIDDEN
    pub w2: Mat,      // 1 x HIDDEN
    pub b2: f64,
}

impl MlpParams {
    pub fn zeros(in_dim: usize) -> Self {
        Self {
            w1: Mat::zeros(HIDDEN, in_dim),
            b1: vec![0.0; HIDDEN],
            w2: Mat::zeros(1, HIDDEN),
            b2: 0.0,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn param_count(&self) -> usize {
        HIDDEN * self.in_dim() + HIDDEN + HIDDEN + 1
    }

    /// Appends all parameters in a fixed order: w1 row-major, b1, w2, b2.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(self.w1.data());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.data());
        out.push(self.b2);
    }

    /// Reads parameters back in the order written by [`flatten_into`].
    pub fn read_from(&mut self, flat: &[f64], offset: &mut usize) {
        let in_dim = self.in_dim();
        let take = |offset: &mut usize, n: usize| -> &[f64] {
            let s = &flat[*offset..*offset + n];
            *offset += n;
            s
        };
        self.w1 = Mat::from_vec(HIDDEN, in_dim, take(offset, HIDDEN * in_dim).to_vec());
        self.b1 = take(offset, HIDDEN).to_vec();
        self.w2 = Mat::from_vec(1, HIDDEN, take(offset, HIDDEN).to_vec());
        self.b2 = take(offset, 1)[0];
    }
}

/// Glorot-uniform weights (`U[-a, a]`, `a = sqrt(6/(fan_in+fan_out))`) with
/// zero biases; deterministic given the RNG state.
pub fn init_params<R: Rng>(in_dim: usize, rng: &mut R) -> MlpParams {
    assert!(in_dim >= 1);
    let mut uniform = |a: f64, n: usize| -> Vec<f64> {
        (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * a).collect()
    };
    let a1 = (6.0 / (in_dim + HIDDEN) as f64).sqrt();
    let w1 = Mat::from_vec(HIDDEN, in_dim, uniform(a1, HIDDEN * in_dim));
    let a2 = (6.0 / (HIDDEN + 1) as f64).sqrt();
    let w2 = Mat::from_vec(1, HIDDEN, uniform(a2, HIDDEN));
    MlpParams {
        w1,
        b1: vec![0.0; HIDDEN],
        w2,
        b2: 0.0,
    }
}

/// `softplus(w2 · relu(w1 x + b1) + b2)`; always strictly positive.
pub fn mlp_forward(p: &MlpParams, x: &[f64]) -> f64 {
    assert_eq!(x.len(), p.in_dim(), "mlp input dimension mismatch");
    let mut hidden = p.w1.matvec(x);
    for (h, b) in hidden.iter_mut().zip(&p.b1) {
        *h = relu(*h + b);
    }
    let out = mat::dot(p.w2.row(0), &hidden) + p.b2;
    softplus(out)
}

/// Per-column standardization across the rows of one graph instance:
/// `(v - mean) / sqrt(var + eps)` with population variance over rows.
pub fn instance_norm(rows: &[Vec<f64>], eps: f64) -> Vec<Vec<f64>> {
    assert!(!rows.is_empty());
    assert!(eps > 0.0);
    // scale by a reciprocal (not a division) to stay bit-identical with the
    // tape-recorded version
    let inv_m = 1.0 / rows.len() as f64;
    let cols = rows[0].len();
    let mut mean = vec![0.0; cols];
    for row in rows {
        assert_eq!(row.len(), cols, "ragged feature rows");
        for (acc, v) in mean.iter_mut().zip(row) {
            *acc += v;
        }
    }
    for v in &mut mean {
        *v *= inv_m;
    }
    let mut var = vec![0.0; cols];
    for row in rows {
        for ((acc, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - mu;
            *acc += d * d;
        }
    }
    for v in &mut var {
        *v *= inv_m;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    rows.iter()
        .map(|row| {
            row.iter()
                .zip(&mean)
                .zip(&inv_std)
                .map(|((v, mu), inv)| (v - mu) * inv)
                .collect()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Tape-recorded counterparts
// ---------------------------------------------------------------------------

/// Leaf ids of one MLP registered on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MlpLeaves {
    pub w1: ValueId,
    pub b1: ValueId,
    pub w2: ValueId,
    pub b2: ValueId,
}

pub fn register_mlp(tape: &mut Tape, p: &MlpParams) -> MlpLeaves {
    MlpLeaves {
        w1: tape.matrix(p.w1.clone()),
        b1: tape.vector(p.b1.clone()),
        w2: tape.matrix(p.w2.clone()),
        b2: tape.scalar(p.b2),
    }
}

/// Tape version of [`mlp_forward`]; returns a positive scalar value.
pub fn mlp_forward_tape(tape: &mut Tape, leaves: &MlpLeaves, input: ValueId) -> ValueId {
    let pre = tape.matvec(leaves.w1, input);
    let pre = tape.add(pre, leaves.b1);
    let hidden = tape.relu(pre);
    let out = tape.matvec(leaves.w2, hidden);
    let out = tape.sum(out);
    let out = tape.add(out, leaves.b2);
    tape.softplus(out)
}

/// Tape version of [`instance_norm`] over per-row vector values.
pub fn instance_norm_tape(tape: &mut Tape, rows: &[ValueId], eps: f64) -> Vec<ValueId> {
    assert!(!rows.is_empty());
    let m = rows.len() as f64;
    let mut total = rows[0];
    for &r in &rows[1..] {
        total = tape.add(total, r);
    }
    let mean = tape.scale_const(1.0 / m, total);
    let centered: Vec<ValueId> = rows.iter().map(|&r| tape.sub(r, mean)).collect();
    let mut sq_total = tape.mul(centered[0], centered[0]);
    for &c in &centered[1..] {
        let sq = tape.mul(c, c);
        sq_total = tape.add(sq_total, sq);
    }
    let var = tape.scale_const(1.0 / m, sq_total);
    let shifted = tape.add_const(eps, var);
    let std = tape.sqrt(shifted);
    let inv_std = tape.recip(std);
    centered.iter().map(|&c| tape.mul(c, inv_std)).collect()
}

/// Appends the adjoints of one registered MLP in [`MlpParams::flatten_into`]
/// order.
pub fn collect_mlp_grads(grads: &Gradients, leaves: &MlpLeaves, out: &mut Vec<f64>) {
    out.extend_from_slice(grads.elems(leaves.w1));
    out.extend_from_slice(grads.elems(leaves.b1));
    out.extend_from_slice(grads.elems(leaves.w2));
    out.push(grads.scalar(leaves.b2));
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam moment estimates over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Rescales `grad` in place so its global 2-norm does not exceed `radius`;
/// returns the norm before clipping.
pub fn clip_global(grad: &mut [f64], radius: f64) -> f64 {
    let norm = mat::norm(grad);
    if norm > radius {
        let s = radius / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// One Adam update with bias correction, applied after global clipping of
/// the full gradient vector.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    lr: f64,
    clip_radius: f64,
) -> Result<(), OptimError> {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGradient { index });
    }
    let mut g = grads.to_vec();
    clip_global(&mut g, clip_radius);
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for i in 0..params.len() {
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g[i];
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}
