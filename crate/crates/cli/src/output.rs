//! CSV and JSON artifacts of a run, and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use hotswap_core::encoder::save_checkpoint;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, ExperimentConfig};
use crate::error::CliError;
use crate::pipeline::{Endpoints, SeedOutcome};

pub const TRAJECTORY_CSV: &str = "trajectory.csv";
pub const NO_REFRESH_CSV: &str = "no_refresh.csv";
pub const EVAL_JSON: &str = "eval.json";
pub const PER_QUERY_CSV: &str = "per_query_ap.csv";
pub const TRAINING_LOG_CSV: &str = "training_log.csv";
pub const WITNESSES_JSONL: &str = "witnesses.jsonl";
pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub run_id: String,
    pub generation: usize,
    pub strategy: String,
    pub fraction: f64,
    pub k: usize,
    pub map_at_k: f64,
    pub nfr_at_k: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoRefreshRow {
    pub run_id: String,
    pub generation: usize,
    pub k: usize,
    pub map_at_k: f64,
    pub nfr_at_k: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLogRow {
    pub seed: u64,
    pub model: String,
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub cls_term: f64,
    pub compat_term: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerQueryRow {
    pub seed: u64,
    pub system: String,
    pub query_id: u64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub old_system_map: Option<f64>,
    pub new_to_old_map: Option<f64>,
    pub new_system_map: Option<f64>,
    pub final_hot_refresh_map: Option<f64>,
    pub final_no_refresh_map: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub config_hash: String,
    pub k: usize,
    pub seeds: Vec<SeedSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedChecksum {
    pub seed: u64,
    pub trajectory_sha256: String,
    pub checkpoints_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub seeds: Vec<SeedChecksum>,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    cfg.hash()[..12].to_string()
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))
}

/// Writes a CSV with a header row, even when `rows` is empty.
pub fn write_csv<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), CliError> {
    let bytes = if rows.is_empty() {
        format!("{}\n", header.join(",")).into_bytes()
    } else {
        csv_bytes(rows)?
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}

pub const TRAJECTORY_HEADER: [&str; 8] = [
    "run_id", "generation", "strategy", "fraction", "k", "map_at_k", "nfr_at_k", "seed",
];
pub const NO_REFRESH_HEADER: [&str; 6] = ["run_id", "generation", "k", "map_at_k", "nfr_at_k", "seed"];
pub const TRAINING_LOG_HEADER: [&str; 7] = ["seed", "model", "epoch", "lr", "total", "cls_term", "compat_term"];
pub const PER_QUERY_HEADER: [&str; 4] = ["seed", "system", "query_id", "ap"];

pub fn trajectory_rows(cfg: &ExperimentConfig, run_id: &str, o: &SeedOutcome) -> Vec<TrajectoryRow> {
    o.trajectories
        .iter()
        .flat_map(|(generation, points)| {
            points.iter().map(move |p| TrajectoryRow {
                run_id: run_id.to_string(),
                generation: *generation,
                strategy: cfg.strategy.name().to_string(),
                fraction: p.fraction,
                k: cfg.k,
                map_at_k: p.map_at_k,
                nfr_at_k: p.nfr_at_k,
                seed: o.seed,
            })
        })
        .collect()
}

pub fn training_log_rows(o: &SeedOutcome) -> Vec<TrainingLogRow> {
    o.models
        .iter()
        .flat_map(|m| {
            m.log.iter().map(move |e| TrainingLogRow {
                seed: o.seed,
                model: m.name.clone(),
                epoch: e.epoch,
                lr: e.lr,
                total: e.total,
                cls_term: e.cls_term,
                compat_term: e.compat_term,
            })
        })
        .collect()
}

pub fn per_query_rows(seed: u64, ends: &Endpoints) -> Vec<PerQueryRow> {
    [
        ("old_system", &ends.old_system),
        ("new_to_old", &ends.new_to_old),
        ("new_system", &ends.new_system),
    ]
    .into_iter()
    .flat_map(|(system, report)| {
        report.per_query_ap.iter().map(move |(q, ap)| PerQueryRow {
            seed,
            system: system.to_string(),
            query_id: q.0,
            ap: *ap,
        })
    })
    .collect()
}

pub fn seed_summary(o: &SeedOutcome) -> SeedSummary {
    let e = o.endpoints.as_ref();
    let sequential = !o.no_refresh.is_empty();
    SeedSummary {
        seed: o.seed,
        old_system_map: e.map(|e| e.old_system.map_at_k),
        new_to_old_map: e.map(|e| e.new_to_old.map_at_k),
        new_system_map: e.map(|e| e.new_system.map_at_k),
        final_hot_refresh_map: sequential
            .then(|| o.trajectories.last().and_then(|(_, t)| t.last()).map(|p| p.map_at_k))
            .flatten(),
        final_no_refresh_map: o.no_refresh.last().map(|p| p.map_at_k),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Saves every model of the outcome and returns the SHA-256 over the
/// checkpoint files in write order.
pub fn write_checkpoints(out: &Path, o: &SeedOutcome) -> Result<String, CliError> {
    let dir = seed_dir(out, o.seed);
    fs::create_dir_all(&dir)?;
    let mut h = Sha256::new();
    for m in &o.models {
        let stem = dir.join(&m.name);
        save_checkpoint(&stem, &m.encoder, Some(&m.classifier))?;
        for ext in ["json", "bin"] {
            h.update(fs::read(stem.with_extension(ext))?);
        }
    }
    Ok(hex(&h.finalize()))
}

/// Writes all artifacts of a finished run into `out`.
pub fn write_run(out: &Path, cfg: &ExperimentConfig, outcomes: &[SeedOutcome]) -> Result<RunManifest, CliError> {
    fs::create_dir_all(out)?;
    let config_hash = cfg.hash();
    let id = run_id(cfg);

    let mut trajectory = Vec::new();
    let mut checksums = Vec::new();
    for o in outcomes {
        let rows = trajectory_rows(cfg, &id, o);
        let trajectory_sha256 = hex(&Sha256::digest(csv_bytes(&rows)?));
        let checkpoints_sha256 = write_checkpoints(out, o)?;
        checksums.push(SeedChecksum {
            seed: o.seed,
            trajectory_sha256,
            checkpoints_sha256,
        });
        trajectory.extend(rows);
    }
    write_csv(&out.join(TRAJECTORY_CSV), &TRAJECTORY_HEADER, &trajectory)?;

    let mut artifacts = vec![TRAJECTORY_CSV.to_string()];
    let no_refresh: Vec<NoRefreshRow> = outcomes
        .iter()
        .flat_map(|o| {
            let id = &id;
            o.no_refresh.iter().map(move |p| NoRefreshRow {
                run_id: id.clone(),
                generation: p.generation,
                k: cfg.k,
                map_at_k: p.map_at_k,
                nfr_at_k: p.nfr_at_k,
                seed: o.seed,
            })
        })
        .collect();
    if cfg.sequential.is_some() {
        write_csv(&out.join(NO_REFRESH_CSV), &NO_REFRESH_HEADER, &no_refresh)?;
        artifacts.push(NO_REFRESH_CSV.into());
    }

    let logs: Vec<TrainingLogRow> = outcomes.iter().flat_map(training_log_rows).collect();
    write_csv(&out.join(TRAINING_LOG_CSV), &TRAINING_LOG_HEADER, &logs)?;
    artifacts.push(TRAINING_LOG_CSV.into());

    let per_query: Vec<PerQueryRow> = outcomes
        .iter()
        .filter_map(|o| o.endpoints.as_ref().map(|e| per_query_rows(o.seed, e)))
        .flatten()
        .collect();
    write_csv(&out.join(PER_QUERY_CSV), &PER_QUERY_HEADER, &per_query)?;
    artifacts.push(PER_QUERY_CSV.into());

    write_json(
        &out.join(EVAL_JSON),
        &EvalSummary {
            config_hash: config_hash.clone(),
            k: cfg.k,
            seeds: outcomes.iter().map(seed_summary).collect(),
        },
    )?;
    artifacts.push(EVAL_JSON.into());

    let mut jsonl = String::new();
    for o in outcomes {
        for w in &o.witnesses {
            jsonl.push_str(&serde_json::to_string(w)?);
            jsonl.push('\n');
        }
    }
    fs::write(out.join(WITNESSES_JSONL), jsonl)?;
    artifacts.push(WITNESSES_JSONL.into());

    for o in outcomes {
        for m in &o.models {
            for ext in ["json", "bin"] {
                artifacts.push(format!("seed-{}/{}.{ext}", o.seed, m.name));
            }
        }
    }

    let manifest = RunManifest {
        config_hash,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        artifacts,
        seeds: checksums,
    };
    write_json(&out.join(MANIFEST_JSON), &manifest)?;
    Ok(manifest)
}
