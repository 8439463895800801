//! Hot-refresh upgrade simulation: backfill orderings, mixed galleries,
//! mAP/NFR trajectories, regression checks and sequential upgrades.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EvalSplit};
use crate::embedding::{FeatureVector, SampleId};
use crate::encoder::{class_logits, softmax_probs, ClassifierParams, EncoderDescriptor, EncoderParams, ModelPair};
use crate::error::{Error, Result};
use crate::optim::{encode_dataset, train_new, train_old, EpochLog, TrainConfig};
use crate::retrieval::{map_from_rankings, nfr_at_k, rank_all, Gallery, RankedList, Relevance};
use crate::rng;
use crate::scalar::{dot, Scalar};

/// Additive stabilizer inside the entropy logarithm.
pub const ENTROPY_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyStrategy {
    #[default]
    Random,
    LeastConfidence,
    MarginOfConfidence,
    Entropy,
}

impl UncertaintyStrategy {
    pub const ALL: [UncertaintyStrategy; 4] = [
        UncertaintyStrategy::Random,
        UncertaintyStrategy::LeastConfidence,
        UncertaintyStrategy::MarginOfConfidence,
        UncertaintyStrategy::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UncertaintyStrategy::Random => "random",
            UncertaintyStrategy::LeastConfidence => "least_confidence",
            UncertaintyStrategy::MarginOfConfidence => "margin_of_confidence",
            UncertaintyStrategy::Entropy => "entropy",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

/// Which system defines the queries that count as hits before the upgrade.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Old queries against the old gallery.
    #[default]
    OldSystem,
    /// New queries against the old gallery.
    NewQueryOldGallery,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackfillPlan {
    /// Gallery indices, refreshed first to last.
    pub order: Vec<usize>,
    pub strategy: UncertaintyStrategy,
    pub seed: Option<u64>,
}

impl BackfillPlan {
    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.order.len()];
        for &i in &self.order {
            if i >= seen.len() || seen[i] {
                return false;
            }
            seen[i] = true;
        }
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Old,
    New,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedItem<S: Scalar = f64> {
    pub id: SampleId,
    pub feature: FeatureVector<S>,
    pub provenance: Provenance,
}

/// Gallery in the middle of a backfill, in storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedGallery<S: Scalar = f64> {
    pub items: Vec<MixedItem<S>>,
    pub backfill_fraction: f64,
}

impl<S: Scalar> MixedGallery<S> {
    pub fn new_count(&self) -> usize {
        self.items.iter().filter(|i| i.provenance == Provenance::New).count()
    }

    pub fn refreshed(&self) -> BTreeSet<SampleId> {
        self.items
            .iter()
            .filter(|i| i.provenance == Provenance::New)
            .map(|i| i.id)
            .collect()
    }

    pub fn to_gallery(&self) -> Gallery<S> {
        Gallery {
            ids: self.items.iter().map(|i| i.id).collect(),
            feats: self.items.iter().map(|i| i.feature.clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub fraction: f64,
    pub map_at_k: f64,
    pub nfr_at_k: f64,
}

/// One hot-refresh upgrade to simulate.
#[derive(Clone, Debug)]
pub struct UpgradeScenario<'a, S: Scalar = f64> {
    pub model_pair: &'a ModelPair<S>,
    pub eval: &'a EvalSplit<S>,
    pub strategy: UncertaintyStrategy,
    pub fraction_grid: Vec<f64>,
    pub k: usize,
    pub nfr_k: usize,
    pub seed: u64,
    pub baseline: BaselineMode,
}

/// `{0, 0.1, …, 1.0}`.
pub fn default_fraction_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("fraction_grid is empty".into()));
    }
    if grid.iter().any(|f| !(0.0..=1.0).contains(f)) {
        return Err(Error::InvalidConfig("fraction_grid values must lie in [0, 1]".into()));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidConfig("fraction_grid must be strictly ascending".into()));
    }
    if grid[0] != 0.0 || grid[grid.len() - 1] != 1.0 {
        return Err(Error::InvalidConfig("fraction_grid must include 0 and 1".into()));
    }
    Ok(())
}

/// Number of refreshed items, `⌈fraction·n⌉`. Products within a relative
/// 1e-9 of an integer count as that integer, so 0.3·780 gives 234.
pub fn refresh_count(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    let c = if (x - r).abs() <= 1e-9 * x { r } else { x.ceil() };
    (c.max(0.0) as usize).min(n)
}

/// Uncertainty of one probability vector.
pub fn uncertainty_from_probs<S: Scalar>(probs: &[S], strategy: UncertaintyStrategy) -> Result<S> {
    let mut p = probs.to_vec();
    p.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    match strategy {
        UncertaintyStrategy::Random => Err(Error::InvalidConfig(
            "random backfilling has no uncertainty score".into(),
        )),
        UncertaintyStrategy::LeastConfidence => Ok(S::one() - p[0]),
        UncertaintyStrategy::MarginOfConfidence => {
            if p.len() < 2 {
                return Err(Error::NeedsAtLeastTwoClasses);
            }
            Ok(S::one() - (p[0] - p[1]))
        }
        UncertaintyStrategy::Entropy => {
            let eps = S::lit(ENTROPY_EPS);
            Ok(-p.iter().map(|q| *q * (*q + eps).ln()).sum::<S>())
        }
    }
}

/// Scores each old gallery feature with the new classifier.
pub fn uncertainty_scores<S: Scalar>(
    old_gallery_feats: &[FeatureVector<S>],
    new_classifier: &ClassifierParams<S>,
    strategy: UncertaintyStrategy,
) -> Result<Vec<S>> {
    old_gallery_feats
        .iter()
        .map(|f| {
            let probs = softmax_probs(&class_logits(new_classifier, f)?)?;
            uncertainty_from_probs(&probs, strategy)
        })
        .collect()
}

/// Most uncertain first; equal scores keep index order.
pub fn backfill_order<S: Scalar>(scores: &[S], strategy: UncertaintyStrategy) -> Result<BackfillPlan> {
    if scores.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(BackfillPlan {
        order,
        strategy,
        seed: None,
    })
}

pub fn random_order(n: usize, seed: u64) -> Result<BackfillPlan> {
    if n == 0 {
        return Err(Error::EmptyGallery);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "backfill/random"));
    Ok(BackfillPlan {
        order,
        strategy: UncertaintyStrategy::Random,
        seed: Some(seed),
    })
}

/// Builds the plan for `strategy` over the currently deployed gallery features.
pub fn make_plan<S: Scalar>(
    deployed: &[FeatureVector<S>],
    new_classifier: &ClassifierParams<S>,
    strategy: UncertaintyStrategy,
    seed: u64,
) -> Result<BackfillPlan> {
    match strategy {
        UncertaintyStrategy::Random => random_order(deployed.len(), seed),
        _ => backfill_order(&uncertainty_scores(deployed, new_classifier, strategy)?, strategy),
    }
}

pub fn mixed_gallery<S: Scalar>(
    ids: &[SampleId],
    old_feats: &[FeatureVector<S>],
    new_feats: &[FeatureVector<S>],
    plan: &BackfillPlan,
    fraction: f64,
) -> Result<MixedGallery<S>> {
    if old_feats.len() != new_feats.len() {
        return Err(Error::LengthMismatch(old_feats.len(), new_feats.len()));
    }
    if ids.len() != old_feats.len() || plan.order.len() != old_feats.len() {
        return Err(Error::LengthMismatch(ids.len(), plan.order.len()));
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidFraction(fraction));
    }
    let mut fresh = vec![false; old_feats.len()];
    for &i in &plan.order[..refresh_count(fraction, old_feats.len())] {
        fresh[i] = true;
    }
    let items = (0..ids.len())
        .map(|i| MixedItem {
            id: ids[i],
            feature: if fresh[i] { new_feats[i].clone() } else { old_feats[i].clone() },
            provenance: if fresh[i] { Provenance::New } else { Provenance::Old },
        })
        .collect();
    Ok(MixedGallery {
        items,
        backfill_fraction: fraction,
    })
}

/// Features of every query and gallery item under both encoders.
#[derive(Clone, Debug)]
pub struct EncodedEval<S: Scalar = f64> {
    pub query_ids: Vec<SampleId>,
    pub gallery_ids: Vec<SampleId>,
    pub old_queries: Vec<FeatureVector<S>>,
    pub new_queries: Vec<FeatureVector<S>>,
    pub old_gallery: Vec<FeatureVector<S>>,
    pub new_gallery: Vec<FeatureVector<S>>,
}

impl<S: Scalar> EncodedEval<S> {
    pub fn new(pair: &ModelPair<S>, eval: &EvalSplit<S>) -> Result<Self> {
        Ok(Self {
            query_ids: eval.queries.ids(),
            gallery_ids: eval.gallery.ids(),
            old_queries: encode_dataset(&pair.old, &eval.queries)?,
            new_queries: encode_dataset(&pair.new, &eval.queries)?,
            old_gallery: encode_dataset(&pair.old, &eval.gallery)?,
            new_gallery: encode_dataset(&pair.new, &eval.gallery)?,
        })
    }
}

fn tag<S: Scalar>(ids: &[SampleId], feats: &[FeatureVector<S>]) -> Vec<(SampleId, FeatureVector<S>)> {
    ids.iter().copied().zip(feats.iter().cloned()).collect()
}

/// Rankings of the pre-upgrade system used to find baseline hits.
pub fn baseline_rankings<S: Scalar>(enc: &EncodedEval<S>, mode: BaselineMode) -> Result<Vec<RankedList>> {
    let queries = match mode {
        BaselineMode::OldSystem => &enc.old_queries,
        BaselineMode::NewQueryOldGallery => &enc.new_queries,
    };
    let gallery = Gallery::new(enc.gallery_ids.clone(), enc.old_gallery.clone())?;
    rank_all(&tag(&enc.query_ids, queries), &gallery)
}

/// Evaluation inputs shared by every point of a trajectory.
pub struct TrajectoryInputs<'a, S: Scalar> {
    pub gallery_ids: &'a [SampleId],
    pub deployed: &'a [FeatureVector<S>],
    pub refreshed: &'a [FeatureVector<S>],
    pub queries: &'a [(SampleId, FeatureVector<S>)],
    pub baseline: &'a [RankedList],
    pub relevance: &'a Relevance,
    pub k: usize,
    pub nfr_k: usize,
}

/// Evaluates every grid fraction with one shared plan.
pub fn trajectory_points<S: Scalar>(
    inputs: &TrajectoryInputs<'_, S>,
    plan: &BackfillPlan,
    grid: &[f64],
) -> Result<Vec<TrajectoryPoint>> {
    grid.iter()
        .map(|&fraction| {
            let mixed = mixed_gallery(inputs.gallery_ids, inputs.deployed, inputs.refreshed, plan, fraction)?;
            let ranked = rank_all(inputs.queries, &mixed.to_gallery())?;
            let report = map_from_rankings(&ranked, inputs.relevance, inputs.k)?;
            let flips = nfr_at_k(inputs.baseline, &ranked, inputs.relevance, inputs.nfr_k)?;
            Ok(TrajectoryPoint {
                fraction,
                map_at_k: report.map_at_k,
                nfr_at_k: flips.nfr,
            })
        })
        .collect()
}

/// mAP@k and NFR@k of new queries against a gallery refreshed progressively
/// along one backfill plan.
pub fn simulate_trajectory<S: Scalar>(scenario: &UpgradeScenario<'_, S>) -> Result<Vec<TrajectoryPoint>> {
    validate_grid(&scenario.fraction_grid)?;
    let enc = EncodedEval::new(scenario.model_pair, scenario.eval)?;
    simulate_encoded(scenario, &enc)
}

/// Same as [`simulate_trajectory`] with the features already computed.
pub fn simulate_encoded<S: Scalar>(
    scenario: &UpgradeScenario<'_, S>,
    enc: &EncodedEval<S>,
) -> Result<Vec<TrajectoryPoint>> {
    validate_grid(&scenario.fraction_grid)?;
    let plan = make_plan(
        &enc.old_gallery,
        &scenario.model_pair.new_classifier,
        scenario.strategy,
        scenario.seed,
    )?;
    let baseline = baseline_rankings(enc, scenario.baseline)?;
    let queries = tag(&enc.query_ids, &enc.new_queries);
    let inputs = TrajectoryInputs {
        gallery_ids: &enc.gallery_ids,
        deployed: &enc.old_gallery,
        refreshed: &enc.new_gallery,
        queries: &queries,
        baseline: &baseline,
        relevance: &scenario.eval.relevance,
        k: scenario.k,
        nfr_k: scenario.nfr_k,
    };
    trajectory_points(&inputs, &plan, &scenario.fraction_grid)
}

/// Grid fractions whose mAP falls below the mAP at fraction 0.
pub fn detect_regression(trajectory: &[TrajectoryPoint]) -> Result<Vec<f64>> {
    let start = trajectory
        .iter()
        .find(|p| p.fraction == 0.0)
        .ok_or(Error::MissingZeroPoint)?
        .map_at_k;
    Ok(trajectory
        .iter()
        .filter(|p| p.map_at_k < start)
        .map(|p| p.fraction)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipWitness {
    pub query: SampleId,
    pub positive: SampleId,
    pub negative: SampleId,
    pub s_pos_n2o: f64,
    pub s_neg_n2n: f64,
}

/// Pairs where a relevant old-feature item scores below an irrelevant
/// new-feature item for the new-encoded query.
pub fn negative_flip_witnesses<S: Scalar>(
    query: SampleId,
    query_input: &[S],
    pair: &ModelPair<S>,
    mixed: &MixedGallery<S>,
    relevant: &BTreeSet<SampleId>,
) -> Result<Vec<FlipWitness>> {
    let q = pair.new.forward(query_input)?.feature;
    let mut out = Vec::new();
    for pos in &mixed.items {
        if pos.provenance != Provenance::Old || !relevant.contains(&pos.id) {
            continue;
        }
        let s_pos = dot(q.as_slice(), pos.feature.as_slice());
        for neg in &mixed.items {
            if neg.provenance != Provenance::New || relevant.contains(&neg.id) {
                continue;
            }
            let s_neg = dot(q.as_slice(), neg.feature.as_slice());
            if s_pos < s_neg {
                out.push(FlipWitness {
                    query,
                    positive: pos.id,
                    negative: neg.id,
                    s_pos_n2o: s_pos.to_f64_lossy(),
                    s_neg_n2n: s_neg.to_f64_lossy(),
                });
            }
        }
    }
    Ok(out)
}

/// One model generation: its training data and how to train it.
#[derive(Clone, Debug)]
pub struct GenerationSpec<S: Scalar = f64> {
    pub train: Dataset<S>,
    pub descriptor: EncoderDescriptor,
    pub train_cfg: TrainConfig,
}

#[derive(Clone, Debug)]
pub struct SequentialOptions {
    pub strategy: UncertaintyStrategy,
    pub fraction_grid: Vec<f64>,
    pub k: usize,
    pub nfr_k: usize,
    pub seed: u64,
    pub baseline: BaselineMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoRefreshPoint {
    pub generation: usize,
    pub map_at_k: f64,
    pub nfr_at_k: f64,
}

#[derive(Clone, Debug)]
pub struct SequentialResult<S: Scalar = f64> {
    /// Entry `g - 1` is the hot-refresh trajectory of the upgrade to generation `g`.
    pub trajectories: Vec<Vec<TrajectoryPoint>>,
    /// Queries of each generation against the generation-0 gallery.
    pub no_refresh: Vec<NoRefreshPoint>,
    pub encoders: Vec<EncoderParams<S>>,
    pub classifiers: Vec<ClassifierParams<S>>,
    pub logs: Vec<Vec<EpochLog>>,
}

impl<S: Scalar> SequentialResult<S> {
    pub fn final_hot_refresh_map(&self) -> f64 {
        self.trajectories.last().and_then(|t| t.last()).map_or(0.0, |p| p.map_at_k)
    }

    pub fn final_no_refresh_map(&self) -> f64 {
        self.no_refresh.last().map_or(0.0, |p| p.map_at_k)
    }
}

/// Trains generation 0 with classification only, then each later generation
/// against the previous frozen encoder, and backfills after every upgrade.
///
/// Each hot-refresh upgrade starts from the previous generation's fully
/// backfilled gallery; its flips are measured against the previous
/// generation's system. The no-refresh series keeps the generation-0 gallery
/// and measures flips against the generation-0 system.
pub fn sequential_upgrade<S: Scalar>(
    generations: &[GenerationSpec<S>],
    eval: &EvalSplit<S>,
    opts: &SequentialOptions,
) -> Result<SequentialResult<S>> {
    if generations.len() < 2 {
        return Err(Error::InvalidConfig(
            "sequential upgrades need at least 2 generations".into(),
        ));
    }
    validate_grid(&opts.fraction_grid)?;
    let g0 = &generations[0];
    let (enc0, cls0, log0) = train_old(&g0.train, &g0.descriptor, &g0.train_cfg)?;
    let mut encoders = vec![enc0];
    let mut classifiers = vec![cls0];
    let mut logs = vec![log0];
    for spec in &generations[1..] {
        let (pair, log) = train_new(&spec.train, encoders.last().unwrap(), &spec.descriptor, &spec.train_cfg)?;
        encoders.push(pair.new);
        classifiers.push(pair.new_classifier);
        logs.push(log);
    }

    let query_ids = eval.queries.ids();
    let gallery_ids = eval.gallery.ids();
    let query_feats = encoders
        .iter()
        .map(|e| encode_dataset(e, &eval.queries))
        .collect::<Result<Vec<_>>>()?;
    let gallery_feats = encoders
        .iter()
        .map(|e| encode_dataset(e, &eval.gallery))
        .collect::<Result<Vec<_>>>()?;

    let system = |qg: usize, gg: usize| -> Result<Vec<RankedList>> {
        let gallery = Gallery::new(gallery_ids.clone(), gallery_feats[gg].clone())?;
        rank_all(&tag(&query_ids, &query_feats[qg]), &gallery)
    };

    let mut trajectories = Vec::new();
    for g in 1..encoders.len() {
        let baseline = match opts.baseline {
            BaselineMode::OldSystem => system(g - 1, g - 1)?,
            BaselineMode::NewQueryOldGallery => system(g, g - 1)?,
        };
        let queries = tag(&query_ids, &query_feats[g]);
        let plan = make_plan(&gallery_feats[g - 1], &classifiers[g], opts.strategy, opts.seed)?;
        let inputs = TrajectoryInputs {
            gallery_ids: &gallery_ids,
            deployed: &gallery_feats[g - 1],
            refreshed: &gallery_feats[g],
            queries: &queries,
            baseline: &baseline,
            relevance: &eval.relevance,
            k: opts.k,
            nfr_k: opts.nfr_k,
        };
        trajectories.push(trajectory_points(&inputs, &plan, &opts.fraction_grid)?);
    }

    let base0 = system(0, 0)?;
    let mut no_refresh = Vec::new();
    for g in 0..encoders.len() {
        let ranked = system(g, 0)?;
        no_refresh.push(NoRefreshPoint {
            generation: g,
            map_at_k: map_from_rankings(&ranked, &eval.relevance, opts.k)?.map_at_k,
            nfr_at_k: nfr_at_k(&base0, &ranked, &eval.relevance, opts.nfr_k)?.nfr,
        });
    }

    Ok(SequentialResult {
        trajectories,
        no_refresh,
        encoders,
        classifiers,
        logs,
    })
}
