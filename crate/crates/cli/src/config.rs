//! Experiment configuration files.

use std::fs;
use std::path::{Path, PathBuf};

use hotswap_core::backfill::{default_fraction_grid, validate_grid, BaselineMode, UncertaintyStrategy};
use hotswap_core::encoder::{Activation, EncoderDescriptor};
use hotswap_core::losses::LossConfig;
use hotswap_core::optim::TrainConfig;
use hotswap_core::rng::derive_seed;
use hotswap_core::{AllocationType, SyntheticSpec};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AllocationSection {
    #[serde(rename = "type")]
    pub kind: AllocationType,
    pub old_fraction: f64,
}

impl Default for AllocationSection {
    fn default() -> Self {
        Self {
            kind: AllocationType::Expansion,
            old_fraction: 0.3,
        }
    }
}

/// Encoder architecture; the input width comes from the synthetic spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            hidden_dims: Vec::new(),
            embed_dim: 32,
            activation: Activation::Relu,
        }
    }
}

impl EncoderSection {
    pub fn descriptor(&self, input_dim: usize) -> EncoderDescriptor {
        EncoderDescriptor {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            embed_dim: self.embed_dim,
            activation: self.activation,
        }
    }
}

/// Optimizer settings of one training run. Seeds and the loss are filled in
/// per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    pub decay_classifier: bool,
    pub classifier_bias: bool,
    pub aug_sigma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr0: d.lr0,
            lr_decay_factor: d.lr_decay_factor,
            lr_decay_every: d.lr_decay_every,
            weight_decay: d.weight_decay,
            decay_classifier: d.decay_classifier,
            classifier_bias: d.classifier_bias,
            aug_sigma: d.aug_sigma,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64, loss_cfg: &LossConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr0,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_every: self.lr_decay_every,
            weight_decay: self.weight_decay,
            decay_classifier: self.decay_classifier,
            classifier_bias: self.classifier_bias,
            aug_sigma: self.aug_sigma,
            seed,
            loss_cfg: loss_cfg.clone(),
        }
    }
}

/// Multi-generation upgrade: generation `g` trains on `fractions[g]` of the
/// training set. Generation 0 uses the old encoder and training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequentialSection {
    pub fractions: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WitnessSection {
    /// Grid fraction whose mixed gallery is searched for flip witnesses.
    pub fraction: f64,
    /// Witnesses kept per query, largest violations first.
    pub per_query: usize,
}

impl Default for WitnessSection {
    fn default() -> Self {
        Self {
            fraction: 0.5,
            per_query: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticSpec,
    pub allocation: AllocationSection,
    pub old_encoder: EncoderSection,
    pub new_encoder: EncoderSection,
    pub old_train: TrainSection,
    pub new_train: TrainSection,
    pub loss: LossConfig,
    pub strategy: UncertaintyStrategy,
    pub fraction_grid: Vec<f64>,
    pub k: usize,
    pub nfr_k: usize,
    pub baseline: BaselineMode,
    pub seeds: Vec<u64>,
    pub sequential: Option<SequentialSection>,
    pub witnesses: WitnessSection,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            allocation: AllocationSection::default(),
            old_encoder: EncoderSection::default(),
            new_encoder: EncoderSection::default(),
            old_train: TrainSection::default(),
            new_train: TrainSection::default(),
            loss: LossConfig::default(),
            strategy: UncertaintyStrategy::Random,
            fraction_grid: default_fraction_grid(),
            k: 10,
            nfr_k: 1,
            baseline: BaselineMode::OldSystem,
            seeds: vec![0],
            sequential: None,
            witnesses: WitnessSection::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

fn invalid(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CliError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synthetic.validate().map_err(|e| invalid("synthetic", e))?;
        let f = self.allocation.old_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(invalid("allocation.old_fraction", format!("{f} must lie in (0, 1)")));
        }
        for (name, enc) in [("old_encoder", &self.old_encoder), ("new_encoder", &self.new_encoder)] {
            enc.descriptor(self.synthetic.input_dim)
                .validate()
                .map_err(|e| invalid(name, e))?;
        }
        if self.old_encoder.embed_dim != self.new_encoder.embed_dim {
            return Err(invalid(
                "new_encoder.embed_dim",
                format!(
                    "{} must equal old_encoder.embed_dim {}",
                    self.new_encoder.embed_dim, self.old_encoder.embed_dim
                ),
            ));
        }
        for (name, t) in [("old_train", &self.old_train), ("new_train", &self.new_train)] {
            t.train_config(0, &LossConfig::default())
                .validate()
                .map_err(|e| invalid(name, e))?;
        }
        self.loss.validate().map_err(|e| CliError::Config(e.to_string()))?;
        validate_grid(&self.fraction_grid).map_err(|e| invalid("fraction_grid", e))?;
        if self.k == 0 {
            return Err(invalid("k", "must be >= 1"));
        }
        if self.nfr_k == 0 {
            return Err(invalid("nfr_k", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "must not be empty"));
        }
        if let Some(seq) = &self.sequential {
            if seq.fractions.len() < 2 {
                return Err(invalid("sequential.fractions", "needs at least 2 generations"));
            }
            if seq.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
                return Err(invalid("sequential.fractions", "values must lie in (0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.witnesses.fraction) {
            return Err(invalid("witnesses.fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// SHA-256 of the compact, key-sorted JSON form without `output_dir`.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let serde_json::Value::Object(map) = &mut v {
            map.remove("output_dir");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        hex(&Sha256::digest(canonical.as_bytes()))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-run seeds, all derived from the run seed and a purpose tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RunSeeds {
    pub data: u64,
    pub allocation: u64,
    pub split: u64,
    pub train_old: u64,
    pub backfill: u64,
    run: u64,
}

impl RunSeeds {
    pub fn new(run: u64, synthetic_seed: u64) -> Self {
        Self {
            data: derive_seed(run, "data", synthetic_seed),
            allocation: derive_seed(run, "allocation", 0),
            split: derive_seed(run, "split", 0),
            train_old: derive_seed(run, "train/old", 0),
            backfill: derive_seed(run, "backfill", 0),
            run,
        }
    }

    /// Training seed of upgrade generation `g` (1-based).
    pub fn train_new(&self, generation: u64) -> u64 {
        derive_seed(self.run, "train/new", generation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ExperimentConfig, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(s).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(parse("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn errors_name_the_field() {
        let e = parse(r#"{"loss": {"tau_n2o": 0}}"#).unwrap_err().to_string();
        assert!(e.contains("tau"), "{e}");
        let e = parse(r#"{"seeds": []}"#).unwrap_err().to_string();
        assert!(e.contains("seeds"), "{e}");
        let e = parse(r#"{"new_train": {"batch_size": 0}}"#).unwrap_err().to_string();
        assert!(e.contains("new_train") && e.contains("batch_size"), "{e}");
        let e = parse(r#"{"loss": {"temperature": 1}}"#).unwrap_err().to_string();
        assert!(e.contains("temperature"), "{e}");
        let e = parse(r#"{"new_encoder": {"embed_dim": 16}}"#).unwrap_err().to_string();
        assert!(e.contains("embed_dim"), "{e}");
        assert!(matches!(parse(r#"{"k": 0}"#), Err(CliError::Config(_))));
    }

    #[test]
    fn hash_ignores_key_order_and_output_dir() {
        let a = parse(r#"{"k": 5, "seeds": [1, 2], "output_dir": "a"}"#).unwrap();
        let b = parse(r#"{"output_dir": "b", "seeds": [1, 2], "k": 5}"#).unwrap();
        assert_eq!(a.hash(), b.hash());
        let explicit_default = parse(r#"{"k": 10}"#).unwrap();
        assert_eq!(explicit_default.hash(), ExperimentConfig::default().hash());
        let c = parse(r#"{"k": 6, "seeds": [1, 2]}"#).unwrap();
        assert_ne!(a.hash(), c.hash());
        let d = parse(r#"{"k": 5, "seeds": [1, 2], "loss": {"lambda": 0.5}}"#).unwrap();
        assert_ne!(a.hash(), d.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn run_seeds_differ_by_purpose() {
        let s = RunSeeds::new(3, 0);
        let all = [s.data, s.allocation, s.split, s.train_old, s.backfill, s.train_new(1), s.train_new(2)];
        let distinct: std::collections::BTreeSet<u64> = all.iter().copied().collect();
        assert_eq!(distinct.len(), all.len());
        assert_eq!(s, RunSeeds::new(3, 0));
        assert_ne!(s.data, RunSeeds::new(3, 1).data);
    }
}
