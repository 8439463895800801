//! Ranking, AP@k / mAP@k, top-k hits and the negative flip rate.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::embedding::{FeatureVector, SampleId};
use crate::error::{Error, Result};
use crate::scalar::{dot, Scalar};

pub type Relevance = BTreeMap<SampleId, BTreeSet<SampleId>>;

/// Gallery items with their features, in storage order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery<S: Scalar = f64> {
    pub ids: Vec<SampleId>,
    pub feats: Vec<FeatureVector<S>>,
}

impl<S: Scalar> Gallery<S> {
    pub fn new(ids: Vec<SampleId>, feats: Vec<FeatureVector<S>>) -> Result<Self> {
        if ids.len() != feats.len() {
            return Err(Error::LengthMismatch(ids.len(), feats.len()));
        }
        Ok(Self { ids, feats })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: SampleId,
    pub items: Vec<SampleId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub map_at_k: f64,
    pub per_query_ap: BTreeMap<SampleId, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlipAnalysis {
    pub k: usize,
    pub baseline_hits: BTreeSet<SampleId>,
    pub upgraded_misses: BTreeSet<SampleId>,
    pub nfr: f64,
}

/// Gallery ids by descending similarity to the query; equal similarities keep
/// storage order.
pub fn rank_gallery<S: Scalar>(
    query: SampleId,
    query_feat: &FeatureVector<S>,
    gallery: &Gallery<S>,
) -> Result<RankedList> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut scored = Vec::with_capacity(gallery.len());
    for (i, g) in gallery.feats.iter().enumerate() {
        if g.dim() != query_feat.dim() {
            return Err(Error::DimensionMismatch {
                expected: query_feat.dim(),
                actual: g.dim(),
            });
        }
        scored.push((dot(query_feat.as_slice(), g.as_slice()), i));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    Ok(RankedList {
        query,
        items: scored.into_iter().map(|(_, i)| gallery.ids[i]).collect(),
    })
}

/// `AP@k = (1 / min(|relevant|, k)) · Σ_{i ≤ k} P@i · rel(i)`.
pub fn ap_at_k(ranked: &RankedList, relevant: &BTreeSet<SampleId>, k: usize) -> Result<f64> {
    if relevant.is_empty() {
        return Err(Error::EmptyRelevantSet);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.items.iter().take(k).enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / relevant.len().min(k) as f64)
}

pub fn top_k_hit(ranked: &RankedList, relevant: &BTreeSet<SampleId>, k: usize) -> bool {
    ranked.items.iter().take(k).any(|id| relevant.contains(id))
}

/// Ranks every query against the gallery.
pub fn rank_all<S: Scalar>(
    queries: &[(SampleId, FeatureVector<S>)],
    gallery: &Gallery<S>,
) -> Result<Vec<RankedList>> {
    queries
        .iter()
        .map(|(id, f)| rank_gallery(*id, f, gallery))
        .collect()
}

pub fn map_at_k<S: Scalar>(
    queries: &[(SampleId, FeatureVector<S>)],
    gallery: &Gallery<S>,
    relevance: &Relevance,
    k: usize,
) -> Result<EvalReport> {
    let ranked = rank_all(queries, gallery)?;
    map_from_rankings(&ranked, relevance, k)
}

pub fn map_from_rankings(ranked: &[RankedList], relevance: &Relevance, k: usize) -> Result<EvalReport> {
    if ranked.is_empty() {
        return Err(Error::EmptyInput("no queries to evaluate"));
    }
    let mut per_query_ap = BTreeMap::new();
    for r in ranked {
        let rel = relevance.get(&r.query).ok_or(Error::EmptyRelevantSet)?;
        per_query_ap.insert(r.query, ap_at_k(r, rel, k)?);
    }
    let map_at_k = per_query_ap.values().sum::<f64>() / per_query_ap.len() as f64;
    Ok(EvalReport {
        k,
        map_at_k,
        per_query_ap,
    })
}

/// Negative flip rate: the share of baseline top-k hits that miss after the upgrade.
pub fn nfr_at_k(
    baseline: &[RankedList],
    upgraded: &[RankedList],
    relevance: &Relevance,
    k: usize,
) -> Result<FlipAnalysis> {
    let base_q: BTreeSet<SampleId> = baseline.iter().map(|r| r.query).collect();
    let up_q: BTreeSet<SampleId> = upgraded.iter().map(|r| r.query).collect();
    if base_q != up_q || base_q.len() != baseline.len() || up_q.len() != upgraded.len() {
        return Err(Error::QuerySetMismatch);
    }
    let empty = BTreeSet::new();
    let rel = |q: &SampleId| relevance.get(q).unwrap_or(&empty);
    let baseline_hits: BTreeSet<SampleId> = baseline
        .iter()
        .filter(|r| top_k_hit(r, rel(&r.query), k))
        .map(|r| r.query)
        .collect();
    let upgraded_misses: BTreeSet<SampleId> = upgraded
        .iter()
        .filter(|r| !top_k_hit(r, rel(&r.query), k))
        .map(|r| r.query)
        .collect();
    let flips = baseline_hits.intersection(&upgraded_misses).count();
    let nfr = if baseline_hits.is_empty() {
        0.0
    } else {
        flips as f64 / baseline_hits.len() as f64
    };
    Ok(FlipAnalysis {
        k,
        baseline_hits,
        upgraded_misses,
        nfr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::l2_normalize;

    fn ids(v: &[u64]) -> Vec<SampleId> {
        v.iter().map(|i| SampleId(*i)).collect()
    }

    fn set(v: &[u64]) -> BTreeSet<SampleId> {
        ids(v).into_iter().collect()
    }

    fn ranked(items: &[u64]) -> RankedList {
        RankedList { query: SampleId(100), items: ids(items) }
    }

    fn at(theta: f64) -> FeatureVector {
        l2_normalize(&[theta.cos(), theta.sin()]).unwrap()
    }

    #[test]
    fn ranking_examples() {
        let q = at(0.3);
        let g = Gallery::new(ids(&[0, 1, 2]), vec![at(1.0), at(0.3), at(2.0)]).unwrap();
        assert_eq!(rank_gallery(SampleId(9), &q, &g).unwrap().items[0], SampleId(1));

        let g = Gallery::new(ids(&[5, 6, 7]), vec![at(1.0), at(1.0), at(0.0)]).unwrap();
        let r = rank_gallery(SampleId(9), &at(1.0), &g).unwrap();
        assert_eq!(r.items, ids(&[5, 6, 7]));

        // brute-force comparison on a hand-built gallery
        let angles = [0.9, -0.2, 2.5, 0.4];
        let g = Gallery::new(ids(&[0, 1, 2, 3]), angles.iter().map(|a| at(*a)).collect()).unwrap();
        let q = at(0.1);
        let mut oracle: Vec<(f64, u64)> =
            angles.iter().enumerate().map(|(i, a)| ((a - 0.1f64).cos(), i as u64)).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let r = rank_gallery(SampleId(9), &q, &g).unwrap();
        assert_eq!(r.items, oracle.iter().map(|(_, i)| SampleId(*i)).collect::<Vec<_>>());

        let empty: Gallery = Gallery::new(vec![], vec![]).unwrap();
        assert!(matches!(rank_gallery(SampleId(0), &q, &empty), Err(Error::EmptyGallery)));
        let g3 = Gallery::new(ids(&[0]), vec![l2_normalize(&[1.0, 0.0, 0.0]).unwrap()]).unwrap();
        assert!(matches!(rank_gallery(SampleId(0), &q, &g3), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn ap_examples() {
        assert_eq!(ap_at_k(&ranked(&[1, 2, 3]), &set(&[1]), 10).unwrap(), 1.0);
        assert_eq!(ap_at_k(&ranked(&[1, 2, 3]), &set(&[9]), 10).unwrap(), 0.0);
        let ap = ap_at_k(&ranked(&[1, 2, 3, 4]), &set(&[1, 3]), 10).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-15);
        assert!((ap - 0.83333).abs() < 1e-5);
        assert!(matches!(ap_at_k(&ranked(&[1]), &set(&[]), 1), Err(Error::EmptyRelevantSet)));
        // normalizer is min(|relevant|, k)
        let ap = ap_at_k(&ranked(&[1, 2, 3, 4]), &set(&[1, 2, 3, 4]), 2).unwrap();
        assert_eq!(ap, 1.0);
    }

    #[test]
    fn top_k_examples() {
        assert!(top_k_hit(&ranked(&[1, 2]), &set(&[1]), 1));
        assert!(!top_k_hit(&ranked(&[1, 2, 3]), &set(&[3]), 2));
        assert!(top_k_hit(&ranked(&[1, 2, 3]), &set(&[3]), 10));
    }

    #[test]
    fn map_examples() {
        let g = Gallery::new(ids(&[0, 1, 2]), vec![at(0.0), at(1.0), at(2.0)]).unwrap();
        let queries = vec![(SampleId(10), at(0.1))];
        let mut rel = Relevance::new();
        rel.insert(SampleId(10), set(&[1]));
        let r = map_at_k(&queries, &g, &rel, 10).unwrap();
        assert_eq!(r.map_at_k, r.per_query_ap[&SampleId(10)]);
        assert_eq!(r.map_at_k, 0.5);

        rel.insert(SampleId(10), set(&[55]));
        assert_eq!(map_at_k(&queries, &g, &rel, 10).unwrap().map_at_k, 0.0);
    }

    #[test]
    fn nfr_examples() {
        let mut rel = Relevance::new();
        let mut base = Vec::new();
        for q in 0..5u64 {
            rel.insert(SampleId(q), set(&[q + 10]));
            base.push(RankedList { query: SampleId(q), items: ids(&[q + 10, 99]) });
        }
        // query 4 misses under the baseline
        base[4].items = ids(&[99, 14]);
        let same = nfr_at_k(&base, &base, &rel, 1).unwrap();
        assert_eq!(same.nfr, 0.0);
        assert_eq!(same.baseline_hits.len(), 4);

        let mut up = base.clone();
        up[0].items = ids(&[99, 10]);
        let f = nfr_at_k(&base, &up, &rel, 1).unwrap();
        assert_eq!(f.nfr, 0.25);

        let misses: Vec<RankedList> = base
            .iter()
            .map(|r| RankedList { query: r.query, items: ids(&[99]) })
            .collect();
        assert_eq!(nfr_at_k(&misses, &up, &rel, 1).unwrap().nfr, 0.0);

        assert!(matches!(nfr_at_k(&base, &up[..4], &rel, 1), Err(Error::QuerySetMismatch)));
    }
}
