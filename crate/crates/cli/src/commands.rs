//! Subcommand implementations. Each returns `Ok(())` or a [`CliError`]
//! carrying the exit code.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use hotswap_core::backfill::{EncodedEval, UncertaintyStrategy};
use hotswap_core::encoder::{load_checkpoint, Activation, EncoderDescriptor, ModelPair};
use hotswap_core::features_io::{write_features, DatasetCounts, DatasetManifest};
use hotswap_core::losses::{LossConfig, LossVariant};
use hotswap_core::optim::{grad_check, toy_problem, GradCheckOptions};
use hotswap_core::Dataset;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{
    self, per_query_rows, read_csv, run_id, seed_dir, training_log_rows, write_csv, write_json, EvalSummary,
    SeedSummary, TrajectoryRow,
};
use crate::pipeline::{self, endpoints, prepare_data, train_pair, SeedOutcome};

/// Options shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub strategy: Option<String>,
}

/// Loads the config and applies command-line overrides.
pub fn load_config(path: &Path, ov: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &ov.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seeds) = &ov.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(s) = &ov.strategy {
        cfg.strategy = UncertaintyStrategy::from_name(s)
            .ok_or_else(|| CliError::Config(format!("strategy: unknown strategy {s:?}")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>, CliError> {
    s.split(',')
        .map(|t| t.trim().parse::<u64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(format!("seeds: {e}")))
}

/// Worker count from `HOTSWAP_THREADS`; 0 lets rayon decide.
pub fn worker_threads() -> usize {
    std::env::var("HOTSWAP_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0)
}

fn in_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_threads())
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Runs every seed of the config; results come back in seed-list order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<Vec<SeedOutcome>, CliError> {
    cfg.seeds.par_iter().map(|&s| pipeline::run_seed(cfg, s)).collect()
}

pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    for &seed in &cfg.seeds {
        let data = prepare_data(cfg, seed)?;
        let dir = seed_dir(out, seed);
        fs::create_dir_all(&dir)?;
        let write = |name: &str, ds: &Dataset| -> Result<(), CliError> {
            write_features(dir.join(format!("{name}.hswb")), &ds.inputs(), &ds.labels())?;
            Ok(())
        };
        write("old_train", &data.allocation.old_train)?;
        write("new_train", &data.allocation.new_train)?;
        write("queries", &data.eval.queries)?;
        write("gallery", &data.eval.gallery)?;
        write_json(
            &dir.join("dataset.json"),
            &DatasetManifest {
                seed: data.seeds.data,
                allocation: data.allocation.allocation_type,
                counts: DatasetCounts {
                    old_train: data.allocation.old_train.len(),
                    new_train: data.allocation.new_train.len(),
                    queries: data.eval.queries.len(),
                    gallery: data.eval.gallery.len(),
                },
            },
        )?;
        println!("seed {seed}: wrote {}", dir.display());
    }
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;
    let outcomes: Vec<SeedOutcome> = in_pool(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                if cfg.sequential.is_some() {
                    return pipeline::run_sequential(cfg, seed);
                }
                let data = prepare_data(cfg, seed)?;
                let t = train_pair(cfg, &data)?;
                Ok(SeedOutcome {
                    seed,
                    trajectories: Vec::new(),
                    no_refresh: Vec::new(),
                    endpoints: None,
                    witnesses: Vec::new(),
                    models: vec![t.old, t.new],
                })
            })
            .collect::<Result<Vec<_>, CliError>>()
    })??;
    let mut logs = Vec::new();
    for o in &outcomes {
        output::write_checkpoints(&out, o)?;
        logs.extend(training_log_rows(o));
    }
    write_csv(&out.join(output::TRAINING_LOG_CSV), &output::TRAINING_LOG_HEADER, &logs)?;
    println!("trained {} seed(s) into {}", outcomes.len(), out.display());
    Ok(())
}

/// Names of the two checkpoints `eval` compares.
fn eval_model_names(cfg: &ExperimentConfig) -> (String, String) {
    match &cfg.sequential {
        Some(seq) => ("gen0".into(), format!("gen{}", seq.fractions.len() - 1)),
        None => ("old".into(), "new".into()),
    }
}

pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let out = &cfg.output_dir;
    let (old_name, new_name) = eval_model_names(cfg);
    let mut summaries = Vec::new();
    let mut per_query = Vec::new();
    for &seed in &cfg.seeds {
        let dir = seed_dir(out, seed);
        let load = |name: &str| {
            load_checkpoint::<f64>(dir.join(name))
                .map_err(|e| CliError::Runtime(format!("checkpoint {}/{name}: {e}", dir.display())))
        };
        let (old, _) = load(&old_name)?;
        let (new, cls) = load(&new_name)?;
        let cls = cls.ok_or_else(|| CliError::Runtime(format!("checkpoint {new_name} has no classifier")))?;
        let pair = ModelPair::new(old, new, cls)?;
        let data = prepare_data(cfg, seed)?;
        let enc = EncodedEval::new(&pair, &data.eval)?;
        let ends = endpoints(&enc, &data.eval, cfg.k)?;
        per_query.extend(per_query_rows(seed, &ends));
        println!(
            "seed {seed}: old/old {:.4}  new/old {:.4}  new/new {:.4}",
            ends.old_system.map_at_k, ends.new_to_old.map_at_k, ends.new_system.map_at_k
        );
        summaries.push(SeedSummary {
            seed,
            old_system_map: Some(ends.old_system.map_at_k),
            new_to_old_map: Some(ends.new_to_old.map_at_k),
            new_system_map: Some(ends.new_system.map_at_k),
            final_hot_refresh_map: None,
            final_no_refresh_map: None,
        });
    }
    write_csv(&out.join(output::PER_QUERY_CSV), &output::PER_QUERY_HEADER, &per_query)?;
    write_json(
        &out.join(output::EVAL_JSON),
        &EvalSummary {
            config_hash: cfg.hash(),
            k: cfg.k,
            seeds: summaries,
        },
    )
}

/// Full pipeline: data, training, simulation, artifacts.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let outcomes = in_pool(|| run_all(cfg))??;
    let manifest = output::write_run(&cfg.output_dir, cfg, &outcomes)?;
    for o in &outcomes {
        if let Some((_, t)) = o.trajectories.last() {
            let (first, last) = (t[0], t[t.len() - 1]);
            println!(
                "seed {}: mAP@{} {:.4} -> {:.4}, NFR@{} at f=0: {:.4}",
                o.seed, cfg.k, first.map_at_k, last.map_at_k, cfg.nfr_k, first.nfr_at_k
            );
        }
    }
    println!("config {}  ->  {}", &manifest.config_hash[..12], cfg.output_dir.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Tau,
    Lambda,
    Eta,
    BatchSize,
    Strategy,
    Variant,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Tau => "tau",
            SweepAxis::Lambda => "lambda",
            SweepAxis::Eta => "eta",
            SweepAxis::BatchSize => "batch_size",
            SweepAxis::Strategy => "strategy",
            SweepAxis::Variant => "variant",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [
            SweepAxis::Tau,
            SweepAxis::Lambda,
            SweepAxis::Eta,
            SweepAxis::BatchSize,
            SweepAxis::Strategy,
            SweepAxis::Variant,
        ]
        .into_iter()
        .find(|a| a.name() == s)
    }

    /// Copy of `base` with this axis set to `value`. Tau sets both
    /// temperatures; batch size applies to the new model's training.
    pub fn apply(self, base: &ExperimentConfig, value: &str) -> Result<ExperimentConfig, CliError> {
        let bad = |e: &dyn fmt::Display| CliError::Config(format!("{}: bad value {value:?}: {e}", self.name()));
        let num = || value.trim().parse::<f64>().map_err(|e| bad(&e));
        let mut cfg = base.clone();
        match self {
            SweepAxis::Tau => {
                let t = num()?;
                cfg.loss.tau_n2o = t;
                cfg.loss.tau_n2n = t;
            }
            SweepAxis::Lambda => cfg.loss.lambda = num()?,
            SweepAxis::Eta => cfg.loss.eta = num()?,
            SweepAxis::BatchSize => cfg.new_train.batch_size = value.trim().parse().map_err(|e| bad(&e))?,
            SweepAxis::Strategy => {
                cfg.strategy = UncertaintyStrategy::from_name(value.trim()).ok_or_else(|| bad(&"unknown strategy"))?
            }
            SweepAxis::Variant => {
                cfg.loss.variant = LossVariant::ALL
                    .into_iter()
                    .find(|v| v.name() == value.trim())
                    .ok_or_else(|| bad(&"unknown variant"))?
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: String,
    pub run_id: String,
    pub generation: usize,
    pub strategy: String,
    pub fraction: f64,
    pub k: usize,
    pub map_at_k: f64,
    pub nfr_at_k: f64,
    pub seed: u64,
}

pub const SWEEP_CSV: &str = "sweep.csv";

/// One sub-run per value under `<out>/<axis>-<value>/`, then a merged
/// `sweep.csv` in value order.
pub fn cmd_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<(), CliError> {
    if values.is_empty() {
        return Err(CliError::Config("values: must not be empty".into()));
    }
    let subs = values
        .iter()
        .map(|v| {
            let mut cfg = axis.apply(base, v)?;
            cfg.output_dir = base.output_dir.join(format!("{}-{}", axis.name(), v.trim()));
            Ok(cfg)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    in_pool(|| {
        subs.par_iter()
            .map(|cfg| {
                let outcomes = run_all(cfg)?;
                output::write_run(&cfg.output_dir, cfg, &outcomes).map(|_| ())
            })
            .collect::<Result<Vec<()>, CliError>>()
    })??;

    let mut merged = Vec::new();
    for (v, cfg) in values.iter().zip(&subs) {
        let rows: Vec<TrajectoryRow> = read_csv(&cfg.output_dir.join(output::TRAJECTORY_CSV))?;
        println!("{}={}: {} rows ({})", axis.name(), v.trim(), rows.len(), run_id(cfg));
        merged.extend(rows.into_iter().map(|r| SweepRow {
            axis: axis.name().into(),
            value: v.trim().into(),
            run_id: r.run_id,
            generation: r.generation,
            strategy: r.strategy,
            fraction: r.fraction,
            k: r.k,
            map_at_k: r.map_at_k,
            nfr_at_k: r.nfr_at_k,
            seed: r.seed,
        }));
    }
    let header = [
        "axis", "value", "run_id", "generation", "strategy", "fraction", "k", "map_at_k", "nfr_at_k", "seed",
    ];
    write_csv(&base.output_dir.join(SWEEP_CSV), &header, &merged)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub variant: LossVariant,
    pub parameterizations: usize,
    pub coords_checked: usize,
    pub coords_skipped: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub const GRAD_CHECK_SEEDS: u64 = 5;

/// Gradient check of every loss variant with the config's loss settings on
/// small random problems: a linear and a one-hidden-layer encoder for each of
/// [`GRAD_CHECK_SEEDS`] seeds.
pub fn grad_check_rows(cfg: &ExperimentConfig, corrupt: bool) -> Result<Vec<GradCheckRow>, CliError> {
    let activation = cfg.new_encoder.activation;
    let descriptors = [
        EncoderDescriptor {
            input_dim: 6,
            hidden_dims: Vec::new(),
            embed_dim: 4,
            activation: Activation::Relu,
        },
        EncoderDescriptor {
            input_dim: 6,
            hidden_dims: vec![5],
            embed_dim: 4,
            activation,
        },
    ];
    let bias = cfg.new_train.classifier_bias;
    let mut rows = Vec::new();
    for variant in LossVariant::ALL {
        let loss = LossConfig {
            variant,
            ..cfg.loss.clone()
        };
        let mut row = GradCheckRow {
            variant,
            parameterizations: 0,
            coords_checked: 0,
            coords_skipped: 0,
            max_rel_err: 0.0,
            tolerance: if variant.is_triplet() { 1e-5 } else { 1e-6 },
        };
        for seed in 0..GRAD_CHECK_SEEDS {
            for d in &descriptors {
                let (pair, batch) = toy_problem::<f64>(d, 3, 6, bias, seed)?;
                let opts = GradCheckOptions {
                    seed,
                    corrupt_gradient: corrupt,
                    ..GradCheckOptions::default()
                };
                let r = grad_check(&pair, &batch, &loss, &opts)?;
                row.parameterizations += 1;
                row.max_rel_err = row.max_rel_err.max(r.max_rel_err);
                for t in &r.tensors {
                    row.coords_checked += t.coords_checked;
                    row.coords_skipped += t.coords_skipped;
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn format_grad_table(rows: &[GradCheckRow]) -> String {
    let mut s = format!(
        "{:<16} {:>6} {:>8} {:>8} {:>12} {:>10}  status\n",
        "variant", "params", "checked", "skipped", "max_rel_err", "tolerance"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>6} {:>8} {:>8} {:>12.3e} {:>10.0e}  {}\n",
            r.variant.name(),
            r.parameterizations,
            r.coords_checked,
            r.coords_skipped,
            r.max_rel_err,
            r.tolerance,
            if r.passed() { "ok" } else { "FAIL" }
        ));
    }
    s
}

pub fn cmd_grad_check(cfg: &ExperimentConfig, corrupt: bool) -> Result<(), CliError> {
    let rows = grad_check_rows(cfg, corrupt)?;
    let table = format_grad_table(&rows);
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed()).map(|r| r.variant.name()).collect();
    if failed.is_empty() {
        print!("{table}");
        Ok(())
    } else {
        eprint!("{table}");
        Err(CliError::Tolerance(failed.join(", ")))
    }
}
