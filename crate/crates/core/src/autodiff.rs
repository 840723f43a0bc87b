//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! The primitive set is fixed to what the unrolled iteration and the MLP
//! heads need: vector arithmetic, matrix-vector products, reductions, the
//! two activations, and a differentiable SPD solve. Values are scalars,
//! vectors, or row-major matrices of `f64`.
//!
//! A [`Tape`] is built for one loss evaluation and discarded after
//! [`Tape::backward`]. Leaves (parameters and constants) are created with
//! [`Tape::scalar`] / [`Tape::vector`] / [`Tape::matrix`]; every other value
//! records the primitive that produced it.

use thiserror::Error;

use crate::mat::{self, Mat};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

/// Scalar, vector, or matrix payload of a tape node.
#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Mat),
}

impl Data {
    fn zeros_like(&self) -> Data {
        match self {
            Data::Scalar(_) => Data::Scalar(0.0),
            Data::Vector(v) => Data::Vector(vec![0.0; v.len()]),
            Data::Matrix(m) => Data::Matrix(Mat::zeros(m.rows(), m.cols())),
        }
    }

    fn len(&self) -> usize {
        match self {
            Data::Scalar(_) => 1,
            Data::Vector(v) => v.len(),
            Data::Matrix(m) => m.rows() * m.cols(),
        }
    }

    fn elems(&self) -> &[f64] {
        match self {
            Data::Scalar(s) => std::slice::from_ref(s),
            Data::Vector(v) => v,
            Data::Matrix(m) => m.data(),
        }
    }

    fn is_finite(&self) -> bool {
        self.elems().iter().all(|x| x.is_finite())
    }

    pub fn as_scalar(&self) -> f64 {
        match self {
            Data::Scalar(s) => *s,
            _ => panic!("expected scalar value"),
        }
    }

    pub fn as_vector(&self) -> &[f64] {
        match self {
            Data::Vector(v) => v,
            _ => panic!("expected vector value"),
        }
    }
}

#[derive(Debug, Error)]
#[error("non-finite value produced by tape node {node} ({op})")]
pub struct NonFiniteValue {
    pub node: usize,
    pub op: &'static str,
}

enum Op {
    Leaf,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    /// `scalar * tensor`, both differentiable.
    Scale(ValueId, ValueId),
    /// `constant * tensor`.
    ScaleConst(f64, ValueId),
    /// elementwise `tensor + constant`.
    AddConst(ValueId),
    /// elementwise product of same-shape values.
    Mul(ValueId, ValueId),
    MatVec(ValueId, ValueId),
    Dot(ValueId, ValueId),
    Sum(ValueId),
    Mean(ValueId),
    SqNorm(ValueId),
    Relu(ValueId),
    Softplus(ValueId),
    Recip(ValueId),
    Sqrt(ValueId),
    Concat(Vec<ValueId>),
    Slice {
        src: ValueId,
        start: usize,
        len: usize,
    },
    /// `x = A⁻¹ rhs` for symmetric positive definite `A`.
    SpdSolve(ValueId, ValueId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::ScaleConst(..) => "scale_const",
            Op::AddConst(..) => "add_const",
            Op::Mul(..) => "mul",
            Op::MatVec(..) => "matvec",
            Op::Dot(..) => "dot",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SqNorm(..) => "sq_norm",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Recip(..) => "recip",
            Op::Sqrt(..) => "sqrt",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::SpdSolve(..) => "spd_solve",
        }
    }
}

struct Node {
    data: Data,
    op: Op,
}

/// Recorded computation graph for one loss evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    first_nonfinite: Option<usize>,
}

/// Numerically stable `ln(1 + eˣ)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Data, op: Op) -> ValueId {
        if self.first_nonfinite.is_none() && !data.is_finite() {
            self.first_nonfinite = Some(self.nodes.len());
        }
        self.nodes.push(Node { data, op });
        ValueId(self.nodes.len() - 1)
    }

    /// Errors if any recorded forward value is non-finite.
    pub fn ensure_finite(&self) -> Result<(), NonFiniteValue> {
        match self.first_nonfinite {
            None => Ok(()),
            Some(node) => Err(NonFiniteValue {
                node,
                op: self.nodes[node].op.name(),
            }),
        }
    }

    pub fn scalar(&mut self, v: f64) -> ValueId {
        self.push(Data::Scalar(v), Op::Leaf)
    }

    pub fn vector(&mut self, v: Vec<f64>) -> ValueId {
        self.push(Data::Vector(v), Op::Leaf)
    }

    pub fn matrix(&mut self, m: Mat) -> ValueId {
        self.push(Data::Matrix(m), Op::Leaf)
    }

    pub fn value(&self, id: ValueId) -> &Data {
        &self.nodes[id.0].data
    }

    pub fn scalar_value(&self, id: ValueId) -> f64 {
        self.value(id).as_scalar()
    }

    pub fn vector_value(&self, id: ValueId) -> &[f64] {
        self.value(id).as_vector()
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let data = zip_same_shape(self.value(a), self.value(b), |x, y| x + y);
        self.push(data, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let data = zip_same_shape(self.value(a), self.value(b), |x, y| x - y);
        self.push(data, Op::Sub(a, b))
    }

    /// `s * t` where `s` is a scalar value; gradients flow to both.
    pub fn scale(&mut self, s: ValueId, t: ValueId) -> ValueId {
        let sv = self.scalar_value(s);
        let data = map_elems(self.value(t), |x| sv * x);
        self.push(data, Op::Scale(s, t))
    }

    pub fn scale_const(&mut self, c: f64, t: ValueId) -> ValueId {
        let data = map_elems(self.value(t), |x| c * x);
        self.push(data, Op::ScaleConst(c, t))
    }

    pub fn add_const(&mut self, c: f64, t: ValueId) -> ValueId {
        let data = map_elems(self.value(t), |x| x + c);
        self.push(data, Op::AddConst(t))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let data = zip_same_shape(self.value(a), self.value(b), |x, y| x * y);
        self.push(data, Op::Mul(a, b))
    }

    pub fn matvec(&mut self, m: ValueId, v: ValueId) -> ValueId {
        let (mv, vv) = match (self.value(m), self.value(v)) {
            (Data::Matrix(mm), Data::Vector(vv)) => (mm, vv),
            _ => panic!("matvec expects (matrix, vector)"),
        };
        let out = mv.matvec(vv);
        self.push(Data::Vector(out), Op::MatVec(m, v))
    }

    pub fn dot(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (av, bv) = (self.value(a).as_vector(), self.value(b).as_vector());
        let out = mat::dot(av, bv);
        self.push(Data::Scalar(out), Op::Dot(a, b))
    }

    pub fn sum(&mut self, t: ValueId) -> ValueId {
        let out = self.value(t).elems().iter().sum();
        self.push(Data::Scalar(out), Op::Sum(t))
    }

    pub fn mean(&mut self, t: ValueId) -> ValueId {
        let elems = self.value(t).elems();
        let out = elems.iter().sum::<f64>() / elems.len() as f64;
        self.push(Data::Scalar(out), Op::Mean(t))
    }

    pub fn sq_norm(&mut self, t: ValueId) -> ValueId {
        let out = mat::norm_sq(self.value(t).elems());
        self.push(Data::Scalar(out), Op::SqNorm(t))
    }

    pub fn relu(&mut self, t: ValueId) -> ValueId {
        let data = map_elems(self.value(t), relu);
        self.push(data, Op::Relu(t))
    }

    pub fn softplus(&mut self, t: ValueId) -> ValueId {
        let data = map_elems(self.value(t), softplus);
        self.push(data, Op::Softplus(t))
    }

    pub fn recip(&mut self, t: ValueId) -> ValueId {
        let data = map_elems(self.value(t), |x| 1.0 / x);
        self.push(data, Op::Recip(t))
    }

    pub fn sqrt(&mut self, t: ValueId) -> ValueId {
        let data = map_elems(self.value(t), f64::sqrt);
        self.push(data, Op::Sqrt(t))
    }

    /// Concatenates scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[ValueId]) -> ValueId {
        let mut out = Vec::new();
        for &p in parts {
            match self.value(p) {
                Data::Scalar(s) => out.push(*s),
                Data::Vector(v) => out.extend_from_slice(v),
                Data::Matrix(_) => panic!("concat does not accept matrices"),
            }
        }
        self.push(Data::Vector(out), Op::Concat(parts.to_vec()))
    }

    pub fn slice(&mut self, src: ValueId, start: usize, len: usize) -> ValueId {
        let v = self.value(src).as_vector();
        assert!(start + len <= v.len(), "slice out of range");
        let out = v[start..start + len].to_vec();
        self.push(Data::Vector(out), Op::Slice { src, start, len })
    }

    /// Solves `A x = rhs` for SPD `A`. Panics if `A` is not positive definite.
    pub fn spd_solve(&mut self, a: ValueId, rhs: ValueId) -> ValueId {
        let (am, rv) = match (self.value(a), self.value(rhs)) {
            (Data::Matrix(am), Data::Vector(rv)) => (am, rv),
            _ => panic!("spd_solve expects (matrix, vector)"),
        };
        let x = am
            .solve_spd(rv)
            .expect("spd_solve: matrix is not positive definite");
        self.push(Data::Vector(x), Op::SpdSolve(a, rhs))
    }

    /// Reverse sweep from a scalar root. Adjoints accumulate by addition in
    /// reverse recording order, which is deterministic.
    pub fn backward(&self, root: ValueId) -> Gradients {
        assert!(
            matches!(self.value(root), Data::Scalar(_)),
            "backward root must be scalar"
        );
        let mut adj: Vec<Data> = self.nodes.iter().map(|n| n.data.zeros_like()).collect();
        adj[root.0] = Data::Scalar(1.0);

        for idx in (0..=root.0).rev() {
            let g = std::mem::replace(&mut adj[idx], self.nodes[idx].data.zeros_like());
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    adj[idx] = g; // keep the leaf adjoint for lookup
                    continue;
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj[a.0], g.elems(), 1.0);
                    accumulate(&mut adj[b.0], g.elems(), 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj[a.0], g.elems(), 1.0);
                    accumulate(&mut adj[b.0], g.elems(), -1.0);
                }
                Op::Scale(s, t) => {
                    let sv = self.nodes[s.0].data.as_scalar();
                    let tv = self.nodes[t.0].data.elems();
                    let gs: f64 = g.elems().iter().zip(tv).map(|(gi, ti)| gi * ti).sum();
                    accumulate(&mut adj[s.0], &[gs], 1.0);
                    accumulate(&mut adj[t.0], g.elems(), sv);
                }
                Op::ScaleConst(c, t) => accumulate(&mut adj[t.0], g.elems(), *c),
                Op::AddConst(t) => accumulate(&mut adj[t.0], g.elems(), 1.0),
                Op::Mul(a, b) => {
                    let av = self.nodes[a.0].data.elems().to_vec();
                    let bv = self.nodes[b.0].data.elems();
                    let ga: Vec<f64> = g.elems().iter().zip(bv).map(|(gi, bi)| gi * bi).collect();
                    let gb: Vec<f64> = g.elems().iter().zip(&av).map(|(gi, ai)| gi * ai).collect();
                    accumulate(&mut adj[a.0], &ga, 1.0);
                    accumulate(&mut adj[b.0], &gb, 1.0);
                }
                Op::MatVec(m, v) => {
                    let gm = g.as_vector();
                    let (mm, vv) = match (&self.nodes[m.0].data, &self.nodes[v.0].data) {
                        (Data::Matrix(mm), Data::Vector(vv)) => (mm, vv),
                        _ => unreachable!(),
                    };
                    // v̄ += Mᵀ ḡ, M̄ += ḡ vᵀ
                    let gv = mm.transpose().matvec(gm);
                    let mut gmat = vec![0.0; mm.rows() * mm.cols()];
                    for i in 0..mm.rows() {
                        for j in 0..mm.cols() {
                            gmat[i * mm.cols() + j] = gm[i] * vv[j];
                        }
                    }
                    accumulate(&mut adj[v.0], &gv, 1.0);
                    accumulate(&mut adj[m.0], &gmat, 1.0);
                }
                Op::Dot(a, b) => {
                    let gs = g.as_scalar();
                    let av = self.nodes[a.0].data.as_vector().to_vec();
                    let bv = self.nodes[b.0].data.as_vector();
                    accumulate(&mut adj[a.0], bv, gs);
                    accumulate(&mut adj[b.0], &av, gs);
                }
                Op::Sum(t) => {
                    let gs = g.as_scalar();
                    let ones = vec![1.0; self.nodes[t.0].data.len()];
                    accumulate(&mut adj[t.0], &ones, gs);
                }
                Op::Mean(t) => {
                    let n = self.nodes[t.0].data.len();
                    let gs = g.as_scalar() / n as f64;
                    let ones = vec![1.0; n];
                    accumulate(&mut adj[t.0], &ones, gs);
                }
                Op::SqNorm(t) => {
                    let gs = g.as_scalar();
                    let tv = self.nodes[t.0].data.elems().to_vec();
                    accumulate(&mut adj[t.0], &tv, 2.0 * gs);
                }
                Op::Relu(t) => {
                    let tv = self.nodes[t.0].data.elems();
                    let gt: Vec<f64> = g
                        .elems()
                        .iter()
                        .zip(tv)
                        .map(|(gi, ti)| if *ti > 0.0 { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut adj[t.0], &gt, 1.0);
                }
                Op::Softplus(t) => {
                    let tv = self.nodes[t.0].data.elems();
                    let gt: Vec<f64> = g
                        .elems()
                        .iter()
                        .zip(tv)
                        .map(|(gi, ti)| gi * sigmoid(*ti))
                        .collect();
                    accumulate(&mut adj[t.0], &gt, 1.0);
                }
                Op::Recip(t) => {
                    // d(1/x)/dx = -1/x² = -out²
                    let out = node.data.elems();
                    let gt: Vec<f64> = g
                        .elems()
                        .iter()
                        .zip(out)
                        .map(|(gi, oi)| -gi * oi * oi)
                        .collect();
                    accumulate(&mut adj[t.0], &gt, 1.0);
                }
                Op::Sqrt(t) => {
                    let out = node.data.elems();
                    let gt: Vec<f64> = g
                        .elems()
                        .iter()
                        .zip(out)
                        .map(|(gi, oi)| gi / (2.0 * oi))
                        .collect();
                    accumulate(&mut adj[t.0], &gt, 1.0);
                }
                Op::Concat(parts) => {
                    let gv = g.as_vector();
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].data.len();
                        accumulate(&mut adj[p.0], &gv[offset..offset + len], 1.0);
                        offset += len;
                    }
                }
                Op::Slice { src, start, len } => {
                    let gv = g.as_vector();
                    let total = self.nodes[src.0].data.len();
                    let mut scatter = vec![0.0; total];
                    scatter[*start..*start + *len].copy_from_slice(gv);
                    accumulate(&mut adj[src.0], &scatter, 1.0);
                }
                Op::SpdSolve(a, rhs) => {
                    let gv = g.as_vector();
                    let am = match &self.nodes[a.0].data {
                        Data::Matrix(am) => am,
                        _ => unreachable!(),
                    };
                    let x = node.data.as_vector();
                    // w = A⁻¹ ḡ; rhs̄ += w; Ā += -(w xᵀ + x wᵀ)/2
                    let w = am.solve_spd(gv).expect("spd_solve backward: refactor failed");
                    let n = x.len();
                    let mut ga = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            ga[i * n + j] = -0.5 * (w[i] * x[j] + x[i] * w[j]);
                        }
                    }
                    accumulate(&mut adj[rhs.0], &w, 1.0);
                    accumulate(&mut adj[a.0], &ga, 1.0);
                }
            }
        }

        Gradients { adj }
    }
}

fn map_elems(d: &Data, f: impl Fn(f64) -> f64) -> Data {
    match d {
        Data::Scalar(s) => Data::Scalar(f(*s)),
        Data::Vector(v) => Data::Vector(v.iter().map(|x| f(*x)).collect()),
        Data::Matrix(m) => Data::Matrix(Mat::from_vec(
            m.rows(),
            m.cols(),
            m.data().iter().map(|x| f(*x)).collect(),
        )),
    }
}

fn zip_same_shape(a: &Data, b: &Data, f: impl Fn(f64, f64) -> f64) -> Data {
    match (a, b) {
        (Data::Scalar(x), Data::Scalar(y)) => Data::Scalar(f(*x, *y)),
        (Data::Vector(x), Data::Vector(y)) => {
            assert_eq!(x.len(), y.len(), "vector shape mismatch");
            Data::Vector(x.iter().zip(y).map(|(a, b)| f(*a, *b)).collect())
        }
        (Data::Matrix(x), Data::Matrix(y)) => {
            assert_eq!((x.rows(), x.cols()), (y.rows(), y.cols()), "matrix shape mismatch");
            Data::Matrix(Mat::from_vec(
                x.rows(),
                x.cols(),
                x.data().iter().zip(y.data()).map(|(a, b)| f(*a, *b)).collect(),
            ))
        }
        _ => panic!("shape mismatch between operands"),
    }
}

/// `target += c * src` elementwise, where `src` is a flat view.
fn accumulate(target: &mut Data, src: &[f64], c: f64) {
    let dst: &mut [f64] = match target {
        Data::Scalar(s) => std::slice::from_mut(s),
        Data::Vector(v) => v,
        Data::Matrix(m) => {
            // Mat has no mutable flat view; rebuild in place via raw data.
            let rows = m.rows();
            let cols = m.cols();
            let mut data = m.data().to_vec();
            assert_eq!(data.len(), src.len(), "adjoint shape mismatch");
            for (d, s) in data.iter_mut().zip(src) {
                *d += c * s;
            }
            *m = Mat::from_vec(rows, cols, data);
            return;
        }
    };
    assert_eq!(dst.len(), src.len(), "adjoint shape mismatch");
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Adjoints produced by one reverse sweep; leaves never reached stay zero.
pub struct Gradients {
    adj: Vec<Data>,
}

impl Gradients {
    pub fn get(&self, id: ValueId) -> &Data {
        &self.adj[id.0]
    }

    pub fn scalar(&self, id: ValueId) -> f64 {
        self.adj[id.0].as_scalar()
    }

    pub fn elems(&self, id: ValueId) -> &[f64] {
        self.adj[id.0].elems()
    }
}

/// Central finite differences `(f(θ+h eⱼ) − f(θ−h eⱼ)) / 2h` per coordinate.
pub fn finite_difference(
    mut f: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    h: f64,
) -> Vec<f64> {
    assert!(h > 0.0);
    let mut work = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for j in 0..theta.len() {
        let orig = work[j];
        work[j] = orig + h;
        let up = f(&work);
        work[j] = orig - h;
        let down = f(&work);
        work[j] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}
