//! Benchmark problem generation, objective evaluation, exact minimizers,
//! and dataset persistence.
//!
//! Two problem classes are supported. In the averaging class every node
//! holds a private vector and the network objective is
//! `Σᵢ ‖xᵢ − bᵢ‖²`; in the least-squares class every node holds a design
//! matrix and observation vector and the objective is `Σᵢ ‖Bᵢ xᵢ − bᵢ‖²`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admm::{self, CommMatrix, StepSchedule, SubproblemSolver};
use crate::graph::{self, EdgeWeights, Graph, GraphError, GraphFile};
use crate::mat::{self, Mat};

/// Standard deviation of the per-coordinate Gaussian node data
/// (variance 100).
pub const DATA_STD: f64 = 10.0;

/// Minimum allowed eigenvalue modulus of a sampled design matrix.
pub const MIN_EIG_MODULUS: f64 = 0.1;

/// Resample budget for the design-matrix eigenvalue filter.
pub const DESIGN_RESAMPLE_BUDGET: usize = 10_000;

const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("design matrix resample budget exhausted after {0} attempts")]
    DesignResampleBudget(usize),
    #[error("pooled normal equations are singular")]
    SingularSystem,
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("unsupported dataset schema version {found} (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("dataset line {line}: least_squares instance is missing design matrices")]
    MissingDesign { line: usize },
    #[error("dataset is empty")]
    Empty,
}

/// Per-node target vectors for the network averaging objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsensusObjective {
    pub targets: Vec<Vec<f64>>,
}

/// Per-node design matrices and observations for distributed least squares.
#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquaresObjective {
    pub design: Vec<Mat>,
    pub obs: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Consensus(ConsensusObjective),
    LeastSquares(LeastSquaresObjective),
}

impl Objective {
    pub fn class(&self) -> ProblemClass {
        match self {
            Objective::Consensus(_) => ProblemClass::Consensus,
            Objective::LeastSquares(_) => ProblemClass::LeastSquares,
        }
    }

    /// Local objective value `f_i(x)`.
    pub fn local_value(&self, node: usize, x: &[f64]) -> f64 {
        match self {
            Objective::Consensus(o) => mat::norm_sq(&mat::vsub(x, &o.targets[node])),
            Objective::LeastSquares(o) => {
                mat::norm_sq(&mat::vsub(&o.design[node].matvec(x), &o.obs[node]))
            }
        }
    }

    /// Gradient of `f_i` at `x`.
    pub fn local_grad(&self, node: usize, x: &[f64]) -> Vec<f64> {
        match self {
            Objective::Consensus(o) => mat::vscale(2.0, &mat::vsub(x, &o.targets[node])),
            Objective::LeastSquares(o) => {
                let b = &o.design[node];
                let r = mat::vsub(&b.matvec(x), &o.obs[node]);
                mat::vscale(2.0, &b.transpose().matvec(&r))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemClass {
    Consensus,
    LeastSquares,
}

impl std::fmt::Display for ProblemClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ProblemClass::Consensus => write!(f, "consensus"),
            ProblemClass::LeastSquares => write!(f, "least_squares"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Val => write!(f, "val"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// One optimization problem: topology, per-node objective data, the exact
/// global minimizer, and the stored reference run used for loss
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemInstance {
    pub graph: Graph,
    pub objective: Objective,
    pub n: usize,
    pub x_star: Vec<f64>,
    /// Final per-node iterates of the reference run (`alpha = 1`, unit
    /// weights, `baseline_k` iterations from the zero start).
    pub baseline_xk: Vec<Vec<f64>>,
    pub baseline_k: usize,
    pub seed: u64,
}

impl ProblemInstance {
    pub fn node_count(&self) -> usize {
        self.graph.node_count()
    }
}

/// Generation parameters; defaults follow the experimental setup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub nodes: usize,
    pub dim: usize,
    pub edge_prob: f64,
    pub baseline_k: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            nodes: 8,
            dim: 2,
            edge_prob: 0.5,
            baseline_k: 10,
        }
    }
}

fn sample_targets<R: Rng>(m: usize, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..m)
        .map(|_| {
            (0..n)
                .map(|_| DATA_STD * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Minimum eigenvalue modulus of a real square matrix. Uses the exact
/// quadratic formula for 2x2 inputs and falls back to a general
/// eigensolver otherwise.
pub fn min_eigenvalue_modulus(m: &Mat) -> f64 {
    assert_eq!(m.rows(), m.cols());
    if m.rows() == 2 {
        let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
        let tr = a + d;
        let det = a * d - b * c;
        let disc = tr * tr - 4.0 * det;
        if disc >= 0.0 {
            let s = disc.sqrt();
            let l1 = 0.5 * (tr + s);
            let l2 = 0.5 * (tr - s);
            l1.abs().min(l2.abs())
        } else {
            // complex conjugate pair: |λ|² = det
            det.sqrt()
        }
    } else {
        let na = nalgebra::DMatrix::from_row_slice(m.rows(), m.cols(), m.data());
        na.complex_eigenvalues()
            .iter()
            .map(|c| c.norm())
            .fold(f64::INFINITY, f64::min)
    }
}

fn sample_design<R: Rng>(n: usize, rng: &mut R) -> Result<Mat, ProblemError> {
    for _ in 0..DESIGN_RESAMPLE_BUDGET {
        let data: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
        let m = Mat::from_vec(n, n, data);
        if min_eigenvalue_modulus(&m) >= MIN_EIG_MODULUS {
            return Ok(m);
        }
    }
    Err(ProblemError::DesignResampleBudget(DESIGN_RESAMPLE_BUDGET))
}

/// Runs the reference iteration (`alpha = 1`, unit weights, zero start) and
/// stores its final per-node iterates on the instance.
fn attach_baseline(instance: &mut ProblemInstance, k: usize) {
    let comm = CommMatrix::unit(&instance.graph);
    let sched = StepSchedule::Constant(1.0);
    let (final_state, _) = admm::run(
        instance,
        &comm,
        &sched,
        k,
        false,
        SubproblemSolver::ClosedForm,
    );
    instance.baseline_xk = final_state.x;
    instance.baseline_k = k;
}

/// Generates one averaging instance; deterministic given `seed`.
pub fn gen_consensus(cfg: &GenConfig, seed: u64) -> Result<ProblemInstance, ProblemError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = graph::erdos_renyi(cfg.nodes, cfg.edge_prob, &mut rng)?;
    let targets = sample_targets(cfg.nodes, cfg.dim, &mut rng);
    let objective = ConsensusObjective { targets };
    let x_star = global_solution_consensus(&objective);
    let mut instance = ProblemInstance {
        graph,
        objective: Objective::Consensus(objective),
        n: cfg.dim,
        x_star,
        baseline_xk: Vec::new(),
        baseline_k: 0,
        seed,
    };
    attach_baseline(&mut instance, cfg.baseline_k);
    Ok(instance)
}

/// Generates one least-squares instance; deterministic given `seed`.
pub fn gen_least_squares(cfg: &GenConfig, seed: u64) -> Result<ProblemInstance, ProblemError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = graph::erdos_renyi(cfg.nodes, cfg.edge_prob, &mut rng)?;
    let design: Result<Vec<Mat>, ProblemError> =
        (0..cfg.nodes).map(|_| sample_design(cfg.dim, &mut rng)).collect();
    let obs = sample_targets(cfg.nodes, cfg.dim, &mut rng);
    let objective = LeastSquaresObjective {
        design: design?,
        obs,
    };
    let x_star = global_solution_least_squares(&objective)?;
    let mut instance = ProblemInstance {
        graph,
        objective: Objective::LeastSquares(objective),
        n: cfg.dim,
        x_star,
        baseline_xk: Vec::new(),
        baseline_k: 0,
        seed,
    };
    attach_baseline(&mut instance, cfg.baseline_k);
    Ok(instance)
}

/// Global objective `Σᵢ f_i(x_i)` evaluated on stacked per-node iterates.
pub fn objective_value(instance: &ProblemInstance, x: &[Vec<f64>]) -> f64 {
    assert_eq!(x.len(), instance.node_count(), "one block per node");
    x.iter()
        .enumerate()
        .map(|(i, xi)| {
            assert_eq!(xi.len(), instance.n, "block dimension mismatch");
            instance.objective.local_value(i, xi)
        })
        .sum()
}

/// The averaging minimizer: the arithmetic mean of the node targets.
pub fn global_solution_consensus(obj: &ConsensusObjective) -> Vec<f64> {
    let m = obj.targets.len() as f64;
    let n = obj.targets[0].len();
    let mut acc = vec![0.0; n];
    for t in &obj.targets {
        for (a, v) in acc.iter_mut().zip(t) {
            *a += v;
        }
    }
    mat::vscale(1.0 / m, &acc)
}

/// Solves the pooled normal equations `(Σ BᵢᵀBᵢ) x = Σ Bᵢᵀbᵢ`.
pub fn global_solution_least_squares(
    obj: &LeastSquaresObjective,
) -> Result<Vec<f64>, ProblemError> {
    let n = obj.obs[0].len();
    let mut lhs = Mat::zeros(n, n);
    let mut rhs = vec![0.0; n];
    for (b, y) in obj.design.iter().zip(&obj.obs) {
        lhs = lhs.add(&b.gram());
        let bty = b.transpose().matvec(y);
        for (r, v) in rhs.iter_mut().zip(&bty) {
            *r += v;
        }
    }
    lhs.solve_spd(&rhs).ok_or(ProblemError::SingularSystem)
}

/// Relabels an instance's nodes: node `i` becomes `perm[i]`. Per-node data
/// moves with the nodes; the global minimizer is unchanged.
pub fn permute_instance(instance: &ProblemInstance, perm: &[usize]) -> ProblemInstance {
    let weights = EdgeWeights::unit(&instance.graph);
    let (graph, _) = graph::permute(&instance.graph, &weights, perm);
    let m = instance.node_count();
    let relocate = |data: &[Vec<f64>]| -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); m];
        for (i, v) in data.iter().enumerate() {
            out[perm[i]] = v.clone();
        }
        out
    };
    let objective = match &instance.objective {
        Objective::Consensus(o) => Objective::Consensus(ConsensusObjective {
            targets: relocate(&o.targets),
        }),
        Objective::LeastSquares(o) => {
            let mut design = vec![Mat::zeros(instance.n, instance.n); m];
            for (i, b) in o.design.iter().enumerate() {
                design[perm[i]] = b.clone();
            }
            Objective::LeastSquares(LeastSquaresObjective {
                design,
                obs: relocate(&o.obs),
            })
        }
    };
    ProblemInstance {
        graph,
        objective,
        n: instance.n,
        x_star: instance.x_star.clone(),
        baseline_xk: relocate(&instance.baseline_xk),
        baseline_k: instance.baseline_k,
        seed: instance.seed,
    }
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// A generated split of problem instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub class: ProblemClass,
    pub seed: u64,
    pub instances: Vec<ProblemInstance>,
}

/// Default split sizes: 900 train / 100 val / 100 test.
pub const DEFAULT_COUNTS: (usize, usize, usize) = (900, 100, 100);

fn mix_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    // splitmix64 over (seed, split, index) so every instance owns an
    // independent, reproducible stream
    let mut z = dataset_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add((split as u64) << 32)
        .wrapping_add(index as u64 + 1);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates one split. Instances derive their RNG streams from
/// `(seed, split, index)`, so results are independent of generation order.
pub fn generate_split(
    class: ProblemClass,
    cfg: &GenConfig,
    seed: u64,
    split: Split,
    count: usize,
) -> Result<Dataset, ProblemError> {
    let instances: Result<Vec<_>, _> = (0..count)
        .map(|i| {
            let instance_seed = mix_seed(seed, split, i);
            match class {
                ProblemClass::Consensus => gen_consensus(cfg, instance_seed),
                ProblemClass::LeastSquares => gen_least_squares(cfg, instance_seed),
            }
        })
        .collect();
    Ok(Dataset {
        split,
        class,
        seed,
        instances: instances?,
    })
}

/// One JSON line of a dataset file.
#[derive(Serialize, Deserialize)]
struct InstanceLine {
    schema: u32,
    split: Split,
    dataset_seed: u64,
    graph: GraphFile,
    class: ProblemClass,
    n: usize,
    b: Vec<Vec<f64>>,
    #[serde(rename = "B", skip_serializing_if = "Option::is_none")]
    design: Option<Vec<Vec<Vec<f64>>>>,
    x_star: Vec<f64>,
    #[serde(rename = "baseline_xK")]
    baseline_xk: Vec<Vec<f64>>,
    #[serde(rename = "K")]
    k: usize,
    seed: u64,
}

fn mat_to_rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

fn instance_to_line(ds: &Dataset, instance: &ProblemInstance) -> InstanceLine {
    let (b, design) = match &instance.objective {
        Objective::Consensus(o) => (o.targets.clone(), None),
        Objective::LeastSquares(o) => (
            o.obs.clone(),
            Some(o.design.iter().map(mat_to_rows).collect()),
        ),
    };
    InstanceLine {
        schema: SCHEMA_VERSION,
        split: ds.split,
        dataset_seed: ds.seed,
        graph: GraphFile::from_parts(&instance.graph, &EdgeWeights::unit(&instance.graph)),
        class: instance.objective.class(),
        n: instance.n,
        b,
        design,
        x_star: instance.x_star.clone(),
        baseline_xk: instance.baseline_xk.clone(),
        k: instance.baseline_k,
        seed: instance.seed,
    }
}

fn line_to_instance(line: InstanceLine, line_no: usize) -> Result<ProblemInstance, ProblemError> {
    let (graph, _) = line.graph.into_parts();
    let objective = match line.class {
        ProblemClass::Consensus => Objective::Consensus(ConsensusObjective { targets: line.b }),
        ProblemClass::LeastSquares => {
            let design = line
                .design
                .ok_or(ProblemError::MissingDesign { line: line_no })?
                .into_iter()
                .map(|rows| Mat::from_rows(&rows))
                .collect();
            Objective::LeastSquares(LeastSquaresObjective {
                design,
                obs: line.b,
            })
        }
    };
    Ok(ProblemInstance {
        graph,
        objective,
        n: line.n,
        x_star: line.x_star,
        baseline_xk: line.baseline_xk,
        baseline_k: line.k,
        seed: line.seed,
    })
}

/// Writes one dataset split as JSON Lines. Numeric fields round-trip
/// bit-exactly (shortest-representation float serialization).
pub fn dataset_save(ds: &Dataset, path: &Path) -> Result<(), ProblemError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for instance in &ds.instances {
        let line = instance_to_line(ds, instance);
        serde_json::to_writer(&mut out, &line).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a dataset split written by [`dataset_save`].
pub fn dataset_load(path: &Path) -> Result<Dataset, ProblemError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut instances = Vec::new();
    let mut meta: Option<(Split, ProblemClass, u64)> = None;
    for (idx, line) in reader.lines().enumerate() {
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed: InstanceLine =
            serde_json::from_str(&text).map_err(|source| ProblemError::Parse {
                line: idx + 1,
                source,
            })?;
        if parsed.schema != SCHEMA_VERSION {
            return Err(ProblemError::SchemaVersion {
                found: parsed.schema,
                expected: SCHEMA_VERSION,
            });
        }
        meta.get_or_insert((parsed.split, parsed.class, parsed.dataset_seed));
        instances.push(line_to_instance(parsed, idx + 1)?);
    }
    let (split, class, seed) = meta.ok_or(ProblemError::Empty)?;
    Ok(Dataset {
        split,
        class,
        seed,
        instances,
    })
}
