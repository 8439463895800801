//! One seed of an experiment: data, training, trajectory simulation.

use hotswap_core::backfill::{
    make_plan, mixed_gallery, negative_flip_witnesses, sequential_upgrade, simulate_encoded, EncodedEval,
    FlipWitness, GenerationSpec, NoRefreshPoint, SequentialOptions, TrajectoryPoint, UpgradeScenario,
};
use hotswap_core::data::{allocate_training, generate_dataset, stratified_fraction};
use hotswap_core::encoder::{ClassifierParams, EncoderParams, ModelPair};
use hotswap_core::optim::{train_new, train_old, EpochLog};
use hotswap_core::retrieval::{map_at_k, EvalReport, Gallery};
use hotswap_core::{DataAllocation, Dataset, EvalSplit, SampleId};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, RunSeeds};
use crate::error::CliError;

pub struct SeedData {
    pub seeds: RunSeeds,
    pub train: Dataset,
    pub eval: EvalSplit,
    pub allocation: DataAllocation,
}

pub fn prepare_data(cfg: &ExperimentConfig, run_seed: u64) -> Result<SeedData, CliError> {
    let seeds = RunSeeds::new(run_seed, cfg.synthetic.seed);
    let spec = hotswap_core::SyntheticSpec {
        seed: seeds.data,
        ..cfg.synthetic.clone()
    };
    let (train, eval) = generate_dataset(&spec)?;
    let allocation = allocate_training(&train, cfg.allocation.kind, cfg.allocation.old_fraction, seeds.allocation)?;
    Ok(SeedData {
        seeds,
        train,
        eval,
        allocation,
    })
}

/// A trained model saved under `name` in the seed directory.
pub struct NamedModel {
    pub name: String,
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
    pub log: Vec<EpochLog>,
}

pub struct TrainedPair {
    pub old: NamedModel,
    pub new: NamedModel,
}

impl TrainedPair {
    pub fn model_pair(&self) -> Result<ModelPair, CliError> {
        Ok(ModelPair::new(
            self.old.encoder.clone(),
            self.new.encoder.clone(),
            self.new.classifier.clone(),
        )?)
    }
}

pub fn train_pair(cfg: &ExperimentConfig, data: &SeedData) -> Result<TrainedPair, CliError> {
    let input_dim = cfg.synthetic.input_dim;
    let old_cfg = cfg.old_train.train_config(data.seeds.train_old, &cfg.loss);
    let (old_enc, old_cls, old_log) = train_old(
        &data.allocation.old_train,
        &cfg.old_encoder.descriptor(input_dim),
        &old_cfg,
    )?;
    let new_cfg = cfg.new_train.train_config(data.seeds.train_new(1), &cfg.loss);
    let (pair, new_log) = train_new(
        &data.allocation.new_train,
        &old_enc,
        &cfg.new_encoder.descriptor(input_dim),
        &new_cfg,
    )?;
    Ok(TrainedPair {
        old: NamedModel {
            name: "old".into(),
            encoder: old_enc,
            classifier: old_cls,
            log: old_log,
        },
        new: NamedModel {
            name: "new".into(),
            encoder: pair.new,
            classifier: pair.new_classifier,
            log: new_log,
        },
    })
}

/// The three whole-gallery systems around an upgrade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Endpoints {
    /// Old queries against the old gallery.
    pub old_system: EvalReport,
    /// New queries against the old gallery.
    pub new_to_old: EvalReport,
    /// New queries against the new gallery.
    pub new_system: EvalReport,
}

fn tagged(ids: &[SampleId], feats: &[hotswap_core::FeatureVector]) -> Vec<(SampleId, hotswap_core::FeatureVector)> {
    ids.iter().copied().zip(feats.iter().cloned()).collect()
}

pub fn endpoints(enc: &EncodedEval, eval: &EvalSplit, k: usize) -> Result<Endpoints, CliError> {
    let old_g = Gallery::new(enc.gallery_ids.clone(), enc.old_gallery.clone())?;
    let new_g = Gallery::new(enc.gallery_ids.clone(), enc.new_gallery.clone())?;
    let old_q = tagged(&enc.query_ids, &enc.old_queries);
    let new_q = tagged(&enc.query_ids, &enc.new_queries);
    Ok(Endpoints {
        old_system: map_at_k(&old_q, &old_g, &eval.relevance, k)?,
        new_to_old: map_at_k(&new_q, &old_g, &eval.relevance, k)?,
        new_system: map_at_k(&new_q, &new_g, &eval.relevance, k)?,
    })
}

pub fn scenario<'a>(
    cfg: &ExperimentConfig,
    data: &'a SeedData,
    pair: &'a ModelPair,
) -> UpgradeScenario<'a> {
    UpgradeScenario {
        model_pair: pair,
        eval: &data.eval,
        strategy: cfg.strategy,
        fraction_grid: cfg.fraction_grid.clone(),
        k: cfg.k,
        nfr_k: cfg.nfr_k,
        seed: data.seeds.backfill,
        baseline: cfg.baseline,
    }
}

/// Flip witnesses at the configured backfill fraction, largest violations
/// first, at most `per_query` per query.
pub fn witnesses(
    cfg: &ExperimentConfig,
    data: &SeedData,
    pair: &ModelPair,
    enc: &EncodedEval,
) -> Result<Vec<FlipWitness>, CliError> {
    let plan = make_plan(&enc.old_gallery, &pair.new_classifier, cfg.strategy, data.seeds.backfill)?;
    let mixed = mixed_gallery(
        &enc.gallery_ids,
        &enc.old_gallery,
        &enc.new_gallery,
        &plan,
        cfg.witnesses.fraction,
    )?;
    let mut out = Vec::new();
    for q in &data.eval.queries.samples {
        let relevant = data.eval.relevance.get(&q.id).cloned().unwrap_or_default();
        let mut w = negative_flip_witnesses(q.id, &q.input, pair, &mixed, &relevant)?;
        w.sort_by(|a, b| {
            (b.s_neg_n2n - b.s_pos_n2o)
                .total_cmp(&(a.s_neg_n2n - a.s_pos_n2o))
                .then(a.positive.cmp(&b.positive))
                .then(a.negative.cmp(&b.negative))
        });
        w.truncate(cfg.witnesses.per_query);
        out.extend(w);
    }
    Ok(out)
}

pub struct SeedOutcome {
    pub seed: u64,
    /// `(generation, points)`; a single upgrade is generation 1.
    pub trajectories: Vec<(usize, Vec<TrajectoryPoint>)>,
    pub no_refresh: Vec<NoRefreshPoint>,
    pub endpoints: Option<Endpoints>,
    pub witnesses: Vec<FlipWitness>,
    pub models: Vec<NamedModel>,
}

/// Single upgrade: train old and new models, simulate the trajectory.
pub fn run_single(cfg: &ExperimentConfig, run_seed: u64) -> Result<SeedOutcome, CliError> {
    let data = prepare_data(cfg, run_seed)?;
    let trained = train_pair(cfg, &data)?;
    let pair = trained.model_pair()?;
    let enc = EncodedEval::new(&pair, &data.eval)?;
    let trajectory = simulate_encoded(&scenario(cfg, &data, &pair), &enc)?;
    let ends = endpoints(&enc, &data.eval, cfg.k)?;
    let witnesses = witnesses(cfg, &data, &pair, &enc)?;
    Ok(SeedOutcome {
        seed: run_seed,
        trajectories: vec![(1, trajectory)],
        no_refresh: Vec::new(),
        endpoints: Some(ends),
        witnesses,
        models: vec![trained.old, trained.new],
    })
}

/// Multi-generation upgrade on growing, nested training splits.
pub fn run_sequential(cfg: &ExperimentConfig, run_seed: u64) -> Result<SeedOutcome, CliError> {
    let seq = cfg
        .sequential
        .as_ref()
        .ok_or_else(|| CliError::Config("sequential: section missing".into()))?;
    let data = prepare_data(cfg, run_seed)?;
    let input_dim = cfg.synthetic.input_dim;
    let mut gens = Vec::with_capacity(seq.fractions.len());
    for (g, &fraction) in seq.fractions.iter().enumerate() {
        // one split seed for every generation keeps the splits nested
        let train = stratified_fraction(&data.train, fraction, data.seeds.split)?;
        let (descriptor, train_cfg) = if g == 0 {
            (
                cfg.old_encoder.descriptor(input_dim),
                cfg.old_train.train_config(data.seeds.train_old, &cfg.loss),
            )
        } else {
            (
                cfg.new_encoder.descriptor(input_dim),
                cfg.new_train.train_config(data.seeds.train_new(g as u64), &cfg.loss),
            )
        };
        gens.push(GenerationSpec {
            train,
            descriptor,
            train_cfg,
        });
    }
    let opts = SequentialOptions {
        strategy: cfg.strategy,
        fraction_grid: cfg.fraction_grid.clone(),
        k: cfg.k,
        nfr_k: cfg.nfr_k,
        seed: data.seeds.backfill,
        baseline: cfg.baseline,
    };
    let result = sequential_upgrade(&gens, &data.eval, &opts)?;
    let models = result
        .encoders
        .into_iter()
        .zip(result.classifiers)
        .zip(result.logs)
        .enumerate()
        .map(|(g, ((encoder, classifier), log))| NamedModel {
            name: format!("gen{g}"),
            encoder,
            classifier,
            log,
        })
        .collect();
    Ok(SeedOutcome {
        seed: run_seed,
        trajectories: result
            .trajectories
            .into_iter()
            .enumerate()
            .map(|(i, t)| (i + 1, t))
            .collect(),
        no_refresh: result.no_refresh,
        endpoints: None,
        witnesses: Vec::new(),
        models,
    })
}

pub fn run_seed(cfg: &ExperimentConfig, run_seed: u64) -> Result<SeedOutcome, CliError> {
    if cfg.sequential.is_some() {
        run_sequential(cfg, run_seed)
    } else {
        run_single(cfg, run_seed)
    }
}

/// Trapezoidal area under the mAP-vs-fraction curve.
pub fn map_area(points: &[TrajectoryPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| 0.5 * (w[0].map_at_k + w[1].map_at_k) * (w[1].fraction - w[0].fraction))
        .sum()
}

/// Mean NFR over the points whose fraction is in `fractions`.
pub fn mean_nfr_at(points: &[TrajectoryPoint], fractions: &[f64]) -> f64 {
    let picked: Vec<f64> = points
        .iter()
        .filter(|p| fractions.iter().any(|f| (f - p.fraction).abs() < 1e-9))
        .map(|p| p.nfr_at_k)
        .collect();
    picked.iter().sum::<f64>() / picked.len().max(1) as f64
}
