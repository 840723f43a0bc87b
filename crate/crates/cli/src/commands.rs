//! Command implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use dadmm_core::admm;
use dadmm_core::evaluation::{self, EvalError};
use dadmm_core::learned::{Model, ModelVariant};
use dadmm_core::problems::{self, Dataset, GenConfig, ProblemClass, Split};
use dadmm_core::training::{self, Checkpoint, TrainConfig};

use crate::config::{
    load_config_file, resolve_seed, write_config_file, EvalConfig, GenerateConfig, TraceConfig,
    TrainCliConfig,
};
use crate::{CliError, EvalArgs, GenerateArgs, TraceArgs, TrainArgs};

fn parse_class(text: &str) -> Result<ProblemClass, CliError> {
    match text.replace('-', "_").as_str() {
        "consensus" => Ok(ProblemClass::Consensus),
        "least_squares" => Ok(ProblemClass::LeastSquares),
        other => Err(CliError::Config(format!(
            "unknown problem class '{other}' (expected consensus or least-squares)"
        ))),
    }
}

fn parse_variant(text: &str) -> Result<ModelVariant, CliError> {
    text.parse::<ModelVariant>().map_err(CliError::Config)
}

fn split_path(data: &Path, split: Split) -> PathBuf {
    data.join(format!("{split}.jsonl"))
}

fn load_split(data: &Path, split: Split) -> Result<Dataset, CliError> {
    Ok(problems::dataset_load(&split_path(data, split))?)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::Io(format!("creating {}: {e}", parent.display())))?;
        }
    }
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

pub fn generate(args: GenerateArgs) -> Result<(), CliError> {
    let base: Option<GenerateConfig> = args.config.as_deref().map(load_config_file).transpose()?;
    let class = match (&args.class, &base) {
        (Some(text), _) => parse_class(text)?,
        (None, Some(cfg)) => cfg.class,
        (None, None) => return Err(CliError::Config("--class is required".into())),
    };
    let out = args
        .out
        .or_else(|| base.as_ref().map(|c| c.out.clone()))
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    let effective = GenerateConfig {
        class,
        out: out.clone(),
        train_count: args
            .train_count
            .or(base.as_ref().map(|c| c.train_count))
            .unwrap_or(problems::DEFAULT_COUNTS.0),
        val_count: args
            .val_count
            .or(base.as_ref().map(|c| c.val_count))
            .unwrap_or(problems::DEFAULT_COUNTS.1),
        test_count: args
            .test_count
            .or(base.as_ref().map(|c| c.test_count))
            .unwrap_or(problems::DEFAULT_COUNTS.2),
        seed: resolve_seed(args.seed, base.as_ref().map(|c| c.seed).unwrap_or(0))?,
        nodes: args.nodes.or(base.as_ref().map(|c| c.nodes)).unwrap_or(8),
        dim: args.dim.or(base.as_ref().map(|c| c.dim)).unwrap_or(2),
        edge_prob: args
            .edge_prob
            .or(base.as_ref().map(|c| c.edge_prob))
            .unwrap_or(0.5),
        baseline_k: args
            .baseline_k
            .or(base.as_ref().map(|c| c.baseline_k))
            .unwrap_or(10),
    };
    write_config_file(&effective, &out.join("generate.config.json"))?;

    let gen_cfg = GenConfig {
        nodes: effective.nodes,
        dim: effective.dim,
        edge_prob: effective.edge_prob,
        baseline_k: effective.baseline_k,
    };
    for (split, count) in [
        (Split::Train, effective.train_count),
        (Split::Val, effective.val_count),
        (Split::Test, effective.test_count),
    ] {
        let ds = problems::generate_split(effective.class, &gen_cfg, effective.seed, split, count)?;
        problems::dataset_save(&ds, &split_path(&out, split))?;
        println!("wrote {} ({count} instances)", split_path(&out, split).display());
    }
    Ok(())
}

pub fn train(args: TrainArgs) -> Result<(), CliError> {
    let base: Option<TrainCliConfig> = args.config.as_deref().map(load_config_file).transpose()?;
    let data = args
        .data
        .or_else(|| base.as_ref().map(|c| c.data.clone()))
        .ok_or_else(|| CliError::Config("--data is required".into()))?;
    let out = args
        .out
        .or_else(|| base.as_ref().map(|c| c.out.clone()))
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    let variant = match (&args.variant, &base) {
        (Some(text), _) => parse_variant(text)?,
        (None, Some(cfg)) => cfg.variant,
        (None, None) => return Err(CliError::Config("--variant is required".into())),
    };
    if variant == ModelVariant::Baseline {
        return Err(CliError::Config(
            "the baseline has no trainable parameters; train a learned variant \
             (global-alpha, local-alpha, edge-weights, combined)"
                .into(),
        ));
    }

    let train_ds = load_split(&data, Split::Train)?;
    let val_ds = load_split(&data, Split::Val)?;

    let effective = TrainCliConfig {
        data: data.clone(),
        out: out.clone(),
        variant,
        class: train_ds.class,
        k: args.k.or(base.as_ref().map(|c| c.k)).unwrap_or(10),
        epochs: args.epochs.or(base.as_ref().map(|c| c.epochs)).unwrap_or(100),
        batch_size: args
            .batch_size
            .or(base.as_ref().map(|c| c.batch_size))
            .unwrap_or(5),
        lr: args.lr.or(base.as_ref().map(|c| c.lr)).unwrap_or(1e-4),
        clip: args.clip.or(base.as_ref().map(|c| c.clip)).unwrap_or(1.0),
        loss_eps: args
            .loss_eps
            .or(base.as_ref().map(|c| c.loss_eps))
            .unwrap_or(training::DEFAULT_LOSS_EPS),
        seed: resolve_seed(args.seed, base.as_ref().map(|c| c.seed).unwrap_or(0))?,
        resume: args.resume.or_else(|| base.as_ref().and_then(|c| c.resume.clone())),
    };
    write_config_file(&effective, &out.join("train.config.json"))?;

    let core_cfg = TrainConfig {
        variant: effective.variant,
        class: effective.class,
        k: effective.k,
        epochs: effective.epochs,
        batch_size: effective.batch_size,
        lr: effective.lr,
        clip: effective.clip,
        loss_eps: effective.loss_eps,
        seed: effective.seed,
    };
    let resume = effective
        .resume
        .as_deref()
        .map(Checkpoint::load)
        .transpose()?;
    let result = training::train(
        &core_cfg,
        &train_ds.instances,
        &val_ds.instances,
        Some(&out),
        resume.as_ref(),
    )?;
    let best_epoch = result.best.as_ref().map(|b| b.epoch);
    println!(
        "trained {} for {} updates; best validation {:.6}{}",
        effective.variant,
        result.update_steps,
        result.last.best_val,
        best_epoch.map_or(String::new(), |e| format!(" (epoch {e})")),
    );
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<(), CliError> {
    let base: Option<EvalConfig> = args.config.as_deref().map(load_config_file).transpose()?;
    let data = args
        .data
        .or_else(|| base.as_ref().map(|c| c.data.clone()))
        .ok_or_else(|| CliError::Config("--data is required".into()))?;
    let out = args
        .out
        .or_else(|| base.as_ref().map(|c| c.out.clone()))
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    let checkpoints = if args.checkpoints.is_empty() {
        base.as_ref().map(|c| c.checkpoints.clone()).unwrap_or_default()
    } else {
        args.checkpoints
    };
    let variants: Option<Vec<ModelVariant>> = match (&args.variants, &base) {
        (Some(texts), _) => Some(
            texts
                .iter()
                .map(|t| parse_variant(t))
                .collect::<Result<Vec<_>, _>>()?,
        ),
        (None, Some(cfg)) => cfg.variants.clone(),
        (None, None) => None,
    };
    let effective = EvalConfig {
        data: data.clone(),
        out: out.clone(),
        checkpoints: checkpoints.clone(),
        variants: variants.clone(),
        ks: args
            .ks
            .or_else(|| base.as_ref().map(|c| c.ks.clone()))
            .unwrap_or_else(|| vec![5, 10, 20]),
        trace_k: args.trace_k.or(base.as_ref().map(|c| c.trace_k)).unwrap_or(20),
    };
    write_config_file(&effective, &out.join("eval.config.json"))?;

    let test_ds = load_split(&data, Split::Test)?;

    // one model per variant, baseline always present
    let mut models: BTreeMap<String, Model> = BTreeMap::new();
    for path in &checkpoints {
        let ckpt = Checkpoint::load(path)?;
        let variant = ckpt.variant;
        if models.insert(variant.to_string(), ckpt.to_model()).is_some() {
            return Err(CliError::Config(format!(
                "multiple checkpoints supplied for variant {variant}"
            )));
        }
    }
    let requested: Vec<ModelVariant> = match &effective.variants {
        Some(list) => {
            let missing: Vec<String> = list
                .iter()
                .filter(|v| **v != ModelVariant::Baseline && !models.contains_key(&v.to_string()))
                .map(|v| v.to_string())
                .collect();
            if !missing.is_empty() {
                return Err(CliError::Config(format!(
                    "no checkpoint supplied for requested variant(s): {}",
                    missing.join(", ")
                )));
            }
            list.clone()
        }
        None => {
            let mut list = vec![ModelVariant::Baseline];
            list.extend(
                ModelVariant::ALL
                    .iter()
                    .filter(|v| models.contains_key(&v.to_string()))
                    .copied(),
            );
            list
        }
    };

    let entries: Vec<(ModelVariant, Option<&Model>)> = requested
        .iter()
        .map(|v| (*v, models.get(&v.to_string())))
        .collect();
    let report = evaluation::report(&entries, &test_ds.instances, &effective.ks, effective.trace_k)
        .map_err(|e| match e {
            EvalError::MissingModel(_) | EvalError::VariantMismatch { .. } => {
                CliError::Config(e.to_string())
            }
            EvalError::EmptySplit => CliError::Config(e.to_string()),
        })?;

    write_text(&out.join("report.csv"), &evaluation::render_report_csv(&report))?;
    write_text(&out.join("report.txt"), &evaluation::render_report_table(&report))?;
    for trace in &report.traces {
        let name = format!("trace_{}_{}.csv", report.class, trace.variant);
        write_text(&out.join(name), &admm::render_trace_csv(&trace.rows))?;
    }
    println!(
        "evaluated {} variant(s) on {} instances; report at {}",
        report.traces.len(),
        test_ds.instances.len(),
        out.join("report.csv").display()
    );
    Ok(())
}

pub fn trace(args: TraceArgs) -> Result<(), CliError> {
    let base: Option<TraceConfig> = args.config.as_deref().map(load_config_file).transpose()?;
    let data = args
        .data
        .or_else(|| base.as_ref().map(|c| c.data.clone()))
        .ok_or_else(|| CliError::Config("--data is required".into()))?;
    let out = args
        .out
        .or_else(|| base.as_ref().map(|c| c.out.clone()))
        .ok_or_else(|| CliError::Config("--out is required".into()))?;
    let effective = TraceConfig {
        data: data.clone(),
        split: args
            .split
            .or_else(|| base.as_ref().map(|c| c.split.clone()))
            .unwrap_or_else(|| "test".into()),
        instance: args
            .instance
            .or(base.as_ref().map(|c| c.instance))
            .unwrap_or(0),
        out: out.clone(),
        checkpoint: args
            .checkpoint
            .or_else(|| base.as_ref().and_then(|c| c.checkpoint.clone())),
        k_max: args.k_max.or(base.as_ref().map(|c| c.k_max)).unwrap_or(20),
    };
    let split = match effective.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => {
            return Err(CliError::Config(format!(
                "unknown split '{other}' (expected train, val, or test)"
            )))
        }
    };
    let config_path = out.with_extension("config.json");
    write_config_file(&effective, &config_path)?;

    let ds = load_split(&data, split)?;
    let instance = ds.instances.get(effective.instance).ok_or_else(|| {
        CliError::Config(format!(
            "instance index {} out of range ({} instances in {split_name})",
            effective.instance,
            ds.instances.len(),
            split_name = effective.split
        ))
    })?;

    let model = match &effective.checkpoint {
        Some(path) => Checkpoint::load(path)?.to_model(),
        None => Model::zeroed(ModelVariant::Baseline, instance.n),
    };
    let (comm, sched) = dadmm_core::learned::assemble(&model, instance);
    let (_, trace) = admm::run(
        instance,
        &comm,
        &sched,
        effective.k_max,
        true,
        admm::SubproblemSolver::ClosedForm,
    );
    write_text(&out, &admm::render_trace_csv(&trace.expect("trace recorded")))?;
    println!(
        "wrote trace of {} instance {} ({} rows) to {}",
        model.variant,
        effective.instance,
        effective.k_max + 1,
        out.display()
    );
    Ok(())
}
