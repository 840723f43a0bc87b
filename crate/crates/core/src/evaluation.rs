//! Evaluation metrics and cross-variant comparison reports.

use rayon::prelude::*;
use thiserror::Error;

use crate::admm::{self, StepSchedule, SubproblemSolver, TraceRow};
use crate::learned::{self, Model, ModelVariant};
use crate::mat;
use crate::problems::{self, ProblemClass, ProblemInstance};

/// Guard for the relative-objective denominator.
pub const REL_OBJ_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no checkpoint supplied for variant {0}")]
    MissingModel(ModelVariant),
    #[error("model variant {model} does not match requested variant {requested}")]
    VariantMismatch {
        model: ModelVariant,
        requested: ModelVariant,
    },
    #[error("empty test split")]
    EmptySplit,
}

/// Mean squared distance to the minimizer: `(1/m) Σᵢ ‖xᵢ − x*‖²`.
pub fn error_metric(x: &[Vec<f64>], x_star: &[f64]) -> f64 {
    let m = x.len() as f64;
    x.iter()
        .map(|xi| {
            assert_eq!(xi.len(), x_star.len(), "dimension mismatch");
            mat::norm_sq(&mat::vsub(xi, x_star))
        })
        .sum::<f64>()
        / m
}

/// Mean (unsquared) distance to the average iterate:
/// `(1/m) Σᵢ ‖xᵢ − x̄‖` with `x̄ = (1/m) Σᵢ xᵢ`.
pub fn consensus_metric(x: &[Vec<f64>]) -> f64 {
    let m = x.len() as f64;
    let n = x[0].len();
    let mut mean = vec![0.0; n];
    for xi in x {
        for (a, v) in mean.iter_mut().zip(xi) {
            *a += v;
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    x.iter().map(|xi| mat::norm(&mat::vsub(xi, &mean))).sum::<f64>() / m
}

/// `|f(xᵏ) − f(x*)| / |f(x*)|` with the objective evaluated on the stacked
/// per-node iterates and the denominator guarded away from zero.
pub fn relative_objective(instance: &ProblemInstance, x: &[Vec<f64>]) -> f64 {
    let f_k = problems::objective_value(instance, x);
    let f_star = problems::objective_value(
        instance,
        &vec![instance.x_star.clone(); instance.node_count()],
    );
    (f_k - f_star).abs() / f_star.abs().max(REL_OBJ_EPS)
}

/// One aggregated table cell set: metrics for a variant at iteration `k`,
/// averaged over the test split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub class: ProblemClass,
    pub variant: ModelVariant,
    pub k: usize,
    pub error: f64,
    pub consensus: f64,
    pub rel_obj: f64,
}

/// Instance-averaged per-iteration series for one variant.
#[derive(Debug, Clone)]
pub struct VariantTrace {
    pub variant: ModelVariant,
    pub rows: Vec<TraceRow>,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub class: ProblemClass,
    pub rows: Vec<MetricRow>,
    pub traces: Vec<VariantTrace>,
}

/// Evaluates each `(variant, model)` pair on the test split. `None` is only
/// valid for the baseline. Metrics are averaged per instance first (the
/// metrics are per-instance means over nodes), then over the split in
/// dataset order. Traces cover `k = 0..=trace_k`.
pub fn report(
    entries: &[(ModelVariant, Option<&Model>)],
    test: &[ProblemInstance],
    ks: &[usize],
    trace_k: usize,
) -> Result<Report, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let class = test[0].objective.class();
    let k_max = trace_k.max(ks.iter().copied().max().unwrap_or(0));
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for &(variant, model) in entries {
        let avg = average_trace(variant, model, test, k_max)?;
        for &k in ks {
            rows.push(MetricRow {
                class,
                variant,
                k,
                error: avg[k].error,
                consensus: avg[k].consensus,
                rel_obj: avg[k].relative_objective,
            });
        }
        traces.push(VariantTrace {
            variant,
            rows: avg[..=trace_k].to_vec(),
        });
    }
    Ok(Report { class, rows, traces })
}

/// Runs one variant over the split and averages the per-iteration traces.
pub fn average_trace(
    variant: ModelVariant,
    model: Option<&Model>,
    test: &[ProblemInstance],
    k_max: usize,
) -> Result<Vec<TraceRow>, EvalError> {
    if variant != ModelVariant::Baseline {
        let model = model.ok_or(EvalError::MissingModel(variant))?;
        if model.variant != variant {
            return Err(EvalError::VariantMismatch {
                model: model.variant,
                requested: variant,
            });
        }
    }
    let per_instance: Vec<Vec<TraceRow>> = test
        .par_iter()
        .map(|instance| {
            let (comm, sched) = match model {
                Some(m) => learned::assemble(m, instance),
                None => (
                    admm::CommMatrix::unit(&instance.graph),
                    StepSchedule::Constant(1.0),
                ),
            };
            let (_, trace) = admm::run(
                instance,
                &comm,
                &sched,
                k_max,
                true,
                SubproblemSolver::ClosedForm,
            );
            trace.expect("trace requested")
        })
        .collect();

    let count = per_instance.len() as f64;
    let mut avg = Vec::with_capacity(k_max + 1);
    for k in 0..=k_max {
        let mut row = TraceRow {
            k,
            error: 0.0,
            consensus: 0.0,
            relative_objective: 0.0,
        };
        // fixed dataset order for deterministic aggregation
        for t in &per_instance {
            row.error += t[k].error;
            row.consensus += t[k].consensus;
            row.relative_objective += t[k].relative_objective;
        }
        row.error /= count;
        row.consensus /= count;
        row.relative_objective /= count;
        avg.push(row);
    }
    Ok(avg)
}

/// Report CSV: `class,variant,k,error,consensus,rel_obj`.
pub fn render_report_csv(report: &Report) -> String {
    let mut out = String::from("class,variant,k,error,consensus,rel_obj\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.class, r.variant, r.k, r.error, r.consensus, r.rel_obj
        ));
    }
    out
}

/// Human-readable aligned table, one block per k.
pub fn render_report_table(report: &Report) -> String {
    let mut out = String::new();
    out.push_str(&format!("problem class: {}\n", report.class));
    let mut ks: Vec<usize> = report.rows.iter().map(|r| r.k).collect();
    ks.sort_unstable();
    ks.dedup();
    for k in ks {
        out.push_str(&format!("\nk = {k}\n"));
        out.push_str(&format!(
            "{:<14} {:>14} {:>14} {:>14}\n",
            "variant", "error", "consensus", "rel_obj"
        ));
        for r in report.rows.iter().filter(|r| r.k == k) {
            out.push_str(&format!(
                "{:<14} {:>14.6} {:>14.6} {:>14.6}\n",
                r.variant.to_string(),
                r.error,
                r.consensus,
                r.rel_obj
            ));
        }
    }
    out
}
