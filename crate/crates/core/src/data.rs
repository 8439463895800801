//! Synthetic class-structured datasets, training-data allocations and
//! open-set evaluation splits.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{ClassLabel, SampleId};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::scalar::{norm, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_train_classes: usize,
    pub num_eval_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_train_classes: 50,
            num_eval_classes: 20,
            samples_per_class: 40,
            input_dim: 32,
            noise_sigma: 0.3,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidSpec(msg.to_string()))
            }
        };
        check(self.num_train_classes >= 2, "num_train_classes must be >= 2")?;
        check(self.num_eval_classes >= 2, "num_eval_classes must be >= 2")?;
        check(self.samples_per_class >= 2, "samples_per_class must be >= 2")?;
        check(self.input_dim >= 2, "input_dim must be >= 2")?;
        check(
            self.noise_sigma.is_finite() && self.noise_sigma >= 0.0,
            "noise_sigma must be finite and >= 0",
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample<S: Scalar = f64> {
    pub id: SampleId,
    pub input: Vec<S>,
    pub label: ClassLabel,
}

/// Labeled raw inputs. Labels are dense in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<S: Scalar = f64> {
    pub samples: Vec<Sample<S>>,
    pub num_classes: usize,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.input.len())
    }

    pub fn ids(&self) -> Vec<SampleId> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn inputs(&self) -> Vec<&[S]> {
        self.samples.iter().map(|s| s.input.as_slice()).collect()
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_set(&self) -> BTreeSet<ClassLabel> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Checks the dataset invariants: labels in range, unique ids, every
    /// class populated.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        let mut seen = vec![false; self.num_classes];
        for s in &self.samples {
            if s.label.index() >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label.index(),
                    classes: self.num_classes,
                });
            }
            if !ids.insert(s.id) {
                return Err(Error::InvalidSpec(format!("duplicate sample id {}", s.id.0)));
            }
            seen[s.label.index()] = true;
        }
        if let Some(c) = seen.iter().position(|x| !x) {
            return Err(Error::TooFewSamples(format!("class {c} has no samples")));
        }
        Ok(())
    }

    fn by_class(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for (i, s) in self.samples.iter().enumerate() {
            groups[s.label.index()].push(i);
        }
        groups
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocationType {
    /// Old split is a subset of the new split, same classes.
    Expansion,
    /// Disjoint samples, same classes.
    OpenData,
    /// Disjoint classes.
    OpenClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataAllocation<S: Scalar = f64> {
    pub old_train: Dataset<S>,
    pub new_train: Dataset<S>,
    pub allocation_type: AllocationType,
}

/// Queries and gallery for open-set retrieval evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSplit<S: Scalar = f64> {
    pub queries: Dataset<S>,
    pub gallery: Dataset<S>,
    pub relevance: BTreeMap<SampleId, BTreeSet<SampleId>>,
}

fn gaussian_vec<S: Scalar>(rng: &mut Rng, dim: usize, sigma: f64) -> Vec<S> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::lit(z * sigma)
        })
        .collect()
}

fn unit_centroid<S: Scalar>(rng: &mut Rng, dim: usize) -> Vec<S> {
    loop {
        let v: Vec<S> = gaussian_vec(rng, dim, 1.0);
        let n = norm(&v);
        if n > S::lit(1e-6) {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn draw_classes<S: Scalar>(
    rng: &mut Rng,
    spec: &SyntheticSpec,
    num_classes: usize,
    first_id: u64,
) -> Vec<Sample<S>> {
    let centroids: Vec<Vec<S>> = (0..num_classes)
        .map(|_| unit_centroid(rng, spec.input_dim))
        .collect();
    let mut samples = Vec::with_capacity(num_classes * spec.samples_per_class);
    let mut next = first_id;
    for (c, centroid) in centroids.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            let noise: Vec<S> = gaussian_vec(rng, spec.input_dim, spec.noise_sigma);
            let input = centroid.iter().zip(&noise).map(|(a, b)| *a + *b).collect();
            samples.push(Sample {
                id: SampleId(next),
                input,
                label: ClassLabel(c as u32),
            });
            next += 1;
        }
    }
    samples
}

/// Draws the training set and a class-disjoint evaluation split.
///
/// Each class gets a centroid on the unit sphere and samples
/// `centroid + N(0, noise_sigma² I)`. The first sample of every evaluation
/// class becomes its query and the rest form the gallery. Sample ids are unique
/// across train, queries and gallery.
pub fn generate_dataset<S: Scalar>(spec: &SyntheticSpec) -> Result<(Dataset<S>, EvalSplit<S>)> {
    spec.validate()?;
    let mut train_rng = rng::stream(spec.seed, "data/train");
    let mut eval_rng = rng::stream(spec.seed, "data/eval");

    let train = Dataset {
        samples: draw_classes(&mut train_rng, spec, spec.num_train_classes, 0),
        num_classes: spec.num_train_classes,
    };
    let first_eval_id = (spec.num_train_classes * spec.samples_per_class) as u64;
    let eval_samples = draw_classes::<S>(&mut eval_rng, spec, spec.num_eval_classes, first_eval_id);

    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for (i, s) in eval_samples.into_iter().enumerate() {
        if i % spec.samples_per_class == 0 {
            queries.push(s);
        } else {
            gallery.push(s);
        }
    }
    let queries = Dataset {
        samples: queries,
        num_classes: spec.num_eval_classes,
    };
    let gallery = Dataset {
        samples: gallery,
        num_classes: spec.num_eval_classes,
    };
    let relevance = relevance_by_class(&queries, &gallery);
    Ok((
        train,
        EvalSplit {
            queries,
            gallery,
            relevance,
        },
    ))
}

/// Relevant gallery ids for each query: the items sharing its class.
pub fn relevance_by_class<S: Scalar>(
    queries: &Dataset<S>,
    gallery: &Dataset<S>,
) -> BTreeMap<SampleId, BTreeSet<SampleId>> {
    queries
        .samples
        .iter()
        .map(|q| {
            let rel = gallery
                .samples
                .iter()
                .filter(|g| g.label == q.label)
                .map(|g| g.id)
                .collect();
            (q.id, rel)
        })
        .collect()
}

/// Number of items to take out of `n` for a fraction, clamped to `[lo, hi]`.
fn portion(n: usize, fraction: f64, lo: usize, hi: usize) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(lo, hi)
}

fn subset<S: Scalar>(train: &Dataset<S>, idx: &[usize], num_classes: usize) -> Dataset<S> {
    let mut idx = idx.to_vec();
    idx.sort_unstable();
    Dataset {
        samples: idx.iter().map(|&i| train.samples[i].clone()).collect(),
        num_classes,
    }
}

/// Relabels a dataset so its labels are dense, preserving the class order.
fn densify<S: Scalar>(mut ds: Dataset<S>) -> Dataset<S> {
    let classes: Vec<ClassLabel> = ds.class_set().into_iter().collect();
    let map: BTreeMap<ClassLabel, ClassLabel> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (*c, ClassLabel(i as u32)))
        .collect();
    for s in &mut ds.samples {
        s.label = map[&s.label];
    }
    ds.num_classes = classes.len();
    ds
}

/// Splits a training set into old and new parts.
///
/// Expansion and OpenData sample `old_fraction` of every class (stratified,
/// at least one sample per class on each side that needs one). OpenClass
/// assigns `old_fraction` of the classes to the old split. Both OpenClass
/// splits are relabeled densely.
pub fn allocate_training<S: Scalar>(
    train: &Dataset<S>,
    allocation_type: AllocationType,
    old_fraction: f64,
    seed: u64,
) -> Result<DataAllocation<S>> {
    if !(old_fraction > 0.0 && old_fraction < 1.0) {
        return Err(Error::InvalidFraction(old_fraction));
    }
    let mut rng = rng::stream(seed, "allocation");
    let groups = train.by_class();

    let (old_train, new_train) = match allocation_type {
        AllocationType::Expansion | AllocationType::OpenData => {
            let disjoint = allocation_type == AllocationType::OpenData;
            let mut old_idx = Vec::new();
            let mut new_idx = Vec::new();
            for (c, members) in groups.iter().enumerate() {
                let min_len = if disjoint { 2 } else { 1 };
                if members.len() < min_len {
                    return Err(Error::TooFewSamples(format!(
                        "class {c} has {} samples, need {min_len}",
                        members.len()
                    )));
                }
                let mut members = members.clone();
                members.shuffle(&mut rng);
                let hi = if disjoint { members.len() - 1 } else { members.len() };
                let take = portion(members.len(), old_fraction, 1, hi);
                old_idx.extend_from_slice(&members[..take]);
                if disjoint {
                    new_idx.extend_from_slice(&members[take..]);
                }
            }
            if !disjoint {
                new_idx = (0..train.len()).collect();
            }
            (
                subset(train, &old_idx, train.num_classes),
                subset(train, &new_idx, train.num_classes),
            )
        }
        AllocationType::OpenClass => {
            if train.num_classes < 2 {
                return Err(Error::TooFewSamples(
                    "open-class allocation needs at least two classes".into(),
                ));
            }
            let mut classes: Vec<usize> = (0..train.num_classes).collect();
            classes.shuffle(&mut rng);
            let take = portion(classes.len(), old_fraction, 1, classes.len() - 1);
            let old_classes: BTreeSet<usize> = classes[..take].iter().copied().collect();
            let (mut old_idx, mut new_idx) = (Vec::new(), Vec::new());
            for (i, s) in train.samples.iter().enumerate() {
                if old_classes.contains(&s.label.index()) {
                    old_idx.push(i);
                } else {
                    new_idx.push(i);
                }
            }
            (
                densify(subset(train, &old_idx, train.num_classes)),
                densify(subset(train, &new_idx, train.num_classes)),
            )
        }
    };
    Ok(DataAllocation {
        old_train,
        new_train,
        allocation_type,
    })
}

/// Random subset of each class, used for growing splits in sequential upgrades.
pub fn stratified_fraction<S: Scalar>(train: &Dataset<S>, fraction: f64, seed: u64) -> Result<Dataset<S>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidFraction(fraction));
    }
    if fraction == 1.0 {
        return Ok(train.clone());
    }
    Ok(allocate_training(train, AllocationType::Expansion, fraction, seed)?.old_train)
}
