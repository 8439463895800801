//! Training objectives: the classification pretext loss, the compatible
//! contrastive losses (vanilla, regression-alleviating, split-weighted), the
//! triplet forms, and analytic gradients through the whole new model.
//!
//! Notation used below for an anchor `x` in a mini-batch `B`:
//! `s_pos = ⟨new(x), old(x)⟩`, `s_n2o(k) = ⟨new(x), old(k)⟩`,
//! `s_n2n(k) = ⟨new(x), new(k)⟩`, and negatives range over `k ∈ B \ p(x)`
//! where `p(x)` is the set of same-class batch members (including `x`).

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::{ClassLabel, FeatureVector, SampleId};
use crate::encoder::{
    class_logits, encode_batch, softmax_probs, ClassifierParams, EncoderParams, ModelPair, Trainable,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{dot, Scalar};

/// Penalty subtracted from masked logits in the concatenated-logits
/// formulation. The direct formulas exclude masked terms instead.
pub const MASK_PENALTY: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Vanilla,
    RaComp,
    RaCompSplit,
    TripletVanilla,
    TripletRa,
}

impl LossVariant {
    pub const ALL: [LossVariant; 5] = [
        LossVariant::Vanilla,
        LossVariant::RaComp,
        LossVariant::RaCompSplit,
        LossVariant::TripletVanilla,
        LossVariant::TripletRa,
    ];

    pub fn is_triplet(self) -> bool {
        matches!(self, LossVariant::TripletVanilla | LossVariant::TripletRa)
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::Vanilla => "vanilla",
            LossVariant::RaComp => "ra_comp",
            LossVariant::RaCompSplit => "ra_comp_split",
            LossVariant::TripletVanilla => "triplet_vanilla",
            LossVariant::TripletRa => "triplet_ra",
        }
    }
}

/// Sign convention inside the triplet hinge.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletSign {
    /// `max(s_pos − s_neg + m, 0)`.
    #[default]
    AsPrinted,
    /// `max(s_neg − s_pos + m, 0)`, the usual metric-learning orientation.
    Conventional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Temperature for the positive and new-to-old negatives.
    pub tau_n2o: f64,
    /// Temperature for new-to-new negatives.
    pub tau_n2n: f64,
    pub lambda: f64,
    pub eta: f64,
    pub margin_m: f64,
    pub variant: LossVariant,
    pub positive_sampler: bool,
    pub triplet_sign: TripletSign,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau_n2o: 0.05,
            tau_n2n: 0.05,
            lambda: 1.0,
            eta: 1.0,
            margin_m: 0.8,
            variant: LossVariant::RaComp,
            positive_sampler: false,
            triplet_sign: TripletSign::AsPrinted,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, v: f64, rule: &str| {
            Err(Error::InvalidConfig(format!("loss.{field} = {v} must be {rule}")))
        };
        if !(self.tau_n2o.is_finite() && self.tau_n2o > 0.0) {
            return bad("tau_n2o", self.tau_n2o, "> 0");
        }
        if !(self.tau_n2n.is_finite() && self.tau_n2n > 0.0) {
            return bad("tau_n2n", self.tau_n2n, "> 0");
        }
        for (name, v) in [("lambda", self.lambda), ("eta", self.eta), ("margin_m", self.margin_m)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(name, v, ">= 0");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValue<S: Scalar = f64> {
    pub total: S,
    pub cls_term: S,
    pub compat_term: S,
}

/// Square boolean matrix, `(i, j)` true iff samples `i` and `j` share a label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntraMask {
    n: usize,
    data: Vec<bool>,
}

impl IntraMask {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    /// Indices that count as negatives for anchor `i`.
    pub fn negatives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(i).iter().enumerate().filter(|(_, m)| !**m).map(|(k, _)| k)
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        (0..self.n).map(|i| self.row(i).to_vec()).collect()
    }

    /// Builds a mask from explicit rows. Used to test exclusion of specific pairs.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("mask must be square".into()));
        }
        Ok(Self {
            n,
            data: rows.concat(),
        })
    }
}

pub fn intra_class_mask(labels: &[ClassLabel]) -> IntraMask {
    let n = labels.len();
    let mut data = Vec::with_capacity(n * n);
    for a in labels {
        for b in labels {
            data.push(a == b);
        }
    }
    IntraMask { n, data }
}

/// One mini-batch with two independently augmented views of every sample.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch<S: Scalar = f64> {
    pub indices: Vec<SampleId>,
    pub inputs_old_view: Vec<Vec<S>>,
    pub inputs_new_view: Vec<Vec<S>>,
    pub labels: Vec<ClassLabel>,
    pub intra_mask: IntraMask,
    /// Index of the old-feature positive for each anchor. The identity unless
    /// positives were resampled with [`MiniBatch::sample_positives`].
    pub positives: Vec<usize>,
}

impl<S: Scalar> MiniBatch<S> {
    pub fn new(
        indices: Vec<SampleId>,
        inputs_old_view: Vec<Vec<S>>,
        inputs_new_view: Vec<Vec<S>>,
        labels: Vec<ClassLabel>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::EmptyInput("mini-batch needs at least one sample"));
        }
        for len in [indices.len(), inputs_old_view.len(), inputs_new_view.len()] {
            if len != n {
                return Err(Error::ShapeMismatch(format!(
                    "mini-batch fields have lengths {n} and {len}"
                )));
            }
        }
        Ok(Self {
            indices,
            inputs_old_view,
            inputs_new_view,
            intra_mask: intra_class_mask(&labels),
            labels,
            positives: (0..n).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Replaces every anchor's positive by a uniformly drawn same-class batch
    /// member (possibly the anchor itself).
    pub fn sample_positives(&mut self, rng: &mut Rng) {
        for i in 0..self.len() {
            let same: Vec<usize> = (0..self.len()).filter(|&k| self.intra_mask.get(i, k)).collect();
            self.positives[i] = same[rng.random_range(0..same.len())];
        }
    }
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn loss_cls<S: Scalar>(logits: &[Vec<S>], labels: &[ClassLabel]) -> Result<(S, Vec<Vec<S>>)> {
    if logits.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::EmptyInput("classification loss of an empty batch"));
    }
    let n = S::lit(logits.len() as f64);
    let mut loss = S::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for (z, y) in logits.iter().zip(labels) {
        let c = y.index();
        if c >= z.len() {
            return Err(Error::LabelOutOfRange {
                label: c,
                classes: z.len(),
            });
        }
        let p = softmax_probs(z)?;
        loss += log_sum_exp(z) - z[c];
        let mut g: Vec<S> = p.into_iter().map(|v| v / n).collect();
        g[c] -= S::one() / n;
        grads.push(g);
    }
    Ok((loss / n, grads))
}

fn log_sum_exp<S: Scalar>(z: &[S]) -> S {
    let max = z.iter().fold(S::neg_infinity(), |m, v| m.max(*v));
    let sum: S = z.iter().map(|v| (*v - max).exp()).sum();
    max + sum.ln()
}

fn check_features<S: Scalar>(
    new: &[FeatureVector<S>],
    old: &[FeatureVector<S>],
    mask: &IntraMask,
) -> Result<()> {
    if new.len() != old.len() || mask.len() != new.len() {
        return Err(Error::DimensionMismatch {
            expected: new.len(),
            actual: if new.len() != old.len() { old.len() } else { mask.len() },
        });
    }
    let d = new.first().map_or(0, |f| f.dim());
    if let Some(f) = new.iter().chain(old).find(|f| f.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: f.dim(),
        });
    }
    Ok(())
}

/// Which negative pools a softmax term draws from.
#[derive(Clone, Copy)]
struct Pools {
    n2o: bool,
    n2n: bool,
}

/// Per-anchor softmax term `lse({l_pos} ∪ negatives) − l_pos`, with its
/// gradient (scaled by `weight`) accumulated into `grad`.
#[allow(clippy::too_many_arguments)]
fn softmax_term<S: Scalar>(
    i: usize,
    p: usize,
    new: &[FeatureVector<S>],
    old: &[FeatureVector<S>],
    mask: &IntraMask,
    pools: Pools,
    tau_n2o: S,
    tau_n2n: S,
    weight: S,
    grad: &mut [Vec<S>],
) -> S {
    let a = new[i].as_slice();
    // (logit, kind, k): kind 0 = positive, 1 = n2o, 2 = n2n
    let mut terms: Vec<(S, u8, usize)> = vec![(dot(a, old[p].as_slice()) / tau_n2o, 0, p)];
    for k in mask.negatives(i) {
        if pools.n2n {
            terms.push((dot(a, new[k].as_slice()) / tau_n2n, 2, k));
        }
        if pools.n2o {
            terms.push((dot(a, old[k].as_slice()) / tau_n2o, 1, k));
        }
    }
    let max = terms.iter().fold(S::neg_infinity(), |m, t| m.max(t.0));
    let sum: S = terms.iter().map(|t| (t.0 - max).exp()).sum();
    let lse = max + sum.ln();
    let value = lse - terms[0].0;

    if weight != S::zero() {
        for (idx, (logit, kind, k)) in terms.iter().enumerate() {
            let mut d = (*logit - lse).exp() * weight;
            if idx == 0 {
                d -= weight;
            }
            match kind {
                0 | 1 => {
                    let scale = d / tau_n2o;
                    for (g, o) in grad[i].iter_mut().zip(old[*k].as_slice()) {
                        *g += scale * *o;
                    }
                }
                _ => {
                    let scale = d / tau_n2n;
                    let other = new[*k].as_slice().to_vec();
                    for (g, o) in grad[i].iter_mut().zip(&other) {
                        *g += scale * *o;
                    }
                    for (g, o) in grad[*k].iter_mut().zip(a) {
                        *g += scale * *o;
                    }
                }
            }
        }
    }
    value
}

/// Hinge arguments of the triplet losses for anchor `i`, as
/// `(argument, is_n2n, k)` triples.
#[allow(clippy::too_many_arguments)]
fn triplet_args<S: Scalar>(
    i: usize,
    p: usize,
    new: &[FeatureVector<S>],
    old: &[FeatureVector<S>],
    mask: &IntraMask,
    margin: S,
    ra: bool,
    sign: TripletSign,
) -> Vec<(S, bool, usize)> {
    let a = new[i].as_slice();
    let s_pos = dot(a, old[p].as_slice());
    let arg = |s_neg: S| match sign {
        TripletSign::AsPrinted => s_pos - s_neg + margin,
        TripletSign::Conventional => s_neg - s_pos + margin,
    };
    let mut out = Vec::new();
    for k in mask.negatives(i) {
        out.push((arg(dot(a, old[k].as_slice())), false, k));
        if ra {
            out.push((arg(dot(a, new[k].as_slice())), true, k));
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn triplet_term<S: Scalar>(
    i: usize,
    p: usize,
    new: &[FeatureVector<S>],
    old: &[FeatureVector<S>],
    mask: &IntraMask,
    margin: S,
    ra: bool,
    sign: TripletSign,
    weight: S,
    grad: &mut [Vec<S>],
) -> S {
    let count = mask.negatives(i).count();
    if count == 0 {
        return S::zero();
    }
    let inv = S::one() / S::lit(count as f64);
    let args = triplet_args(i, p, new, old, mask, margin, ra, sign);
    let mut value = S::zero();
    // derivative of the argument w.r.t. s_pos; w.r.t. s_neg it is the negation
    let d_pos = match sign {
        TripletSign::AsPrinted => S::one(),
        TripletSign::Conventional => -S::one(),
    };
    let a = new[i].as_slice().to_vec();
    for (arg, is_n2n, k) in args {
        if arg > S::zero() {
            value += arg;
            if weight != S::zero() {
                let w = weight * inv;
                for (g, o) in grad[i].iter_mut().zip(old[p].as_slice()) {
                    *g += w * d_pos * *o;
                }
                let neg = if is_n2n { new[k].as_slice().to_vec() } else { old[k].as_slice().to_vec() };
                for (g, o) in grad[i].iter_mut().zip(&neg) {
                    *g -= w * d_pos * *o;
                }
                if is_n2n {
                    for (g, o) in grad[k].iter_mut().zip(&a) {
                        *g -= w * d_pos * *o;
                    }
                }
            }
        }
    }
    value * inv
}

/// Batch-mean compatibility loss for `cfg.variant` and its gradient with
/// respect to the new features. `positives[i]` selects the old feature used as
/// anchor `i`'s positive.
pub fn compat_loss_and_grad<S: Scalar>(
    new: &[FeatureVector<S>],
    old: &[FeatureVector<S>],
    mask: &IntraMask,
    positives: &[usize],
    cfg: &LossConfig,
) -> Result<(S, Vec<Vec<S>>)> {
    check_features(new, old, mask)?;
    if positives.len() != new.len() {
        return Err(Error::ShapeMismatch("one positive per anchor required".into()));
    }
    let n = new.len();
    if n == 0 {
        return Err(Error::EmptyInput("compatibility loss of an empty batch"));
    }
    let d = new[0].dim();
    let mut grad = vec![vec![S::zero(); d]; n];
    let w = S::one() / S::lit(n as f64);
    let (t1, t2) = (S::lit(cfg.tau_n2o), S::lit(cfg.tau_n2n));
    let mut total = S::zero();
    for (i, &p) in positives.iter().enumerate().take(n) {
        total += match cfg.variant {
            LossVariant::Vanilla => softmax_term(
                i, p, new, old, mask, Pools { n2o: true, n2n: false }, t1, t2, w, &mut grad,
            ),
            LossVariant::RaComp => softmax_term(
                i, p, new, old, mask, Pools { n2o: true, n2n: true }, t1, t2, w, &mut grad,
            ),
            LossVariant::RaCompSplit => {
                let eta = S::lit(cfg.eta);
                let a = softmax_term(
                    i, p, new, old, mask, Pools { n2o: true, n2n: false }, t1, t1, w, &mut grad,
                );
                let b = softmax_term(
                    i, p, new, old, mask, Pools { n2o: false, n2n: true }, t1, t1, w * eta, &mut grad,
                );
                a + eta * b
            }
            LossVariant::TripletVanilla | LossVariant::TripletRa => triplet_term(
                i,
                p,
                new,
                old,
                mask,
                S::lit(cfg.margin_m),
                cfg.variant == LossVariant::TripletRa,
                cfg.triplet_sign,
                w,
                &mut grad,
            ),
        };
    }
    Ok((total * w, grad))
}

fn identity(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn value_only<S: Scalar>(
    new: &[FeatureVector<S>],
    old: &[FeatureVector<S>],
    mask: &IntraMask,
    cfg: &LossConfig,
) -> Result<S> {
    compat_loss_and_grad(new, old, mask, &identity(new.len()), cfg).map(|(v, _)| v)
}

/// Vanilla compatible contrastive loss: new-to-old negatives only.
pub fn loss_comp<S: Scalar>(
    new: &[FeatureVector<S>],
    old: &[FeatureVector<S>],
    mask: &IntraMask,
    tau: f64,
) -> Result<S> {
    let cfg = LossConfig {
        tau_n2o: tau,
        variant: LossVariant::Vanilla,
        ..LossConfig::default()
    };
    value_only(new, old, mask, &cfg)
}

/// Regression-alleviating loss: new-to-new negatives join the denominator.
pub fn loss_ra_comp<S: Scalar>(
    new: &[FeatureVector<S>],
    old: &[FeatureVector<S>],
    mask: &IntraMask,
    tau_n2o: f64,
    tau_n2n: f64,
) -> Result<S> {
    let cfg = LossConfig {
        tau_n2o,
        tau_n2n,
        variant: LossVariant::RaComp,
        ..LossConfig::default()
    };
    value_only(new, old, mask, &cfg)
}

/// The regression-alleviating loss split into a new-to-old term and an
/// `eta`-weighted new-to-new term, both at temperature `tau`.
pub fn loss_ra_comp_split<S: Scalar>(
    new: &[FeatureVector<S>],
    old: &[FeatureVector<S>],
    mask: &IntraMask,
    tau: f64,
    eta: f64,
) -> Result<S> {
    let cfg = LossConfig {
        tau_n2o: tau,
        eta,
        variant: LossVariant::RaCompSplit,
        ..LossConfig::default()
    };
    value_only(new, old, mask, &cfg)
}

/// Triplet compatibility loss, averaged over each anchor's negatives (zero
/// when an anchor has none) and then over the batch.
pub fn loss_triplet<S: Scalar>(
    new: &[FeatureVector<S>],
    old: &[FeatureVector<S>],
    mask: &IntraMask,
    margin: f64,
    ra: bool,
    sign: TripletSign,
) -> Result<S> {
    let cfg = LossConfig {
        margin_m: margin,
        variant: if ra { LossVariant::TripletRa } else { LossVariant::TripletVanilla },
        triplet_sign: sign,
        ..LossConfig::default()
    };
    value_only(new, old, mask, &cfg)
}

/// The regression-alleviating loss computed the way a deep-learning framework
/// would: each anchor's row `[l_pos, s_n2n(·) − 1e9·mask, s_n2o(·) − 1e9·mask] / τ`
/// fed to a cross-entropy with target 0. Kept as an independent route for
/// cross-checking [`loss_ra_comp`].
pub fn loss_ra_comp_concat_logits<S: Scalar>(
    new: &[FeatureVector<S>],
    old: &[FeatureVector<S>],
    mask: &IntraMask,
    tau: f64,
) -> Result<S> {
    check_features(new, old, mask)?;
    let n = new.len();
    if n == 0 {
        return Err(Error::EmptyInput("compatibility loss of an empty batch"));
    }
    let tau = S::lit(tau);
    let penalty = S::lit(MASK_PENALTY);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let a = new[i].as_slice();
        let mut row = Vec::with_capacity(1 + 2 * n);
        row.push(dot(a, old[i].as_slice()));
        for (k, nk) in new.iter().enumerate().take(n) {
            let m = if mask.get(i, k) { penalty } else { S::zero() };
            row.push(dot(a, nk.as_slice()) - m);
        }
        for (k, ok) in old.iter().enumerate().take(n) {
            let m = if mask.get(i, k) { penalty } else { S::zero() };
            row.push(dot(a, ok.as_slice()) - m);
        }
        rows.push(row.into_iter().map(|v| v / tau).collect::<Vec<S>>());
    }
    let targets = vec![ClassLabel(0); n];
    loss_cls(&rows, &targets).map(|(v, _)| v)
}

/// Hinge arguments of the selected triplet variant over the whole batch, for
/// locating kinks. Empty for contrastive variants.
pub fn triplet_hinge_arguments<S: Scalar>(
    new: &[FeatureVector<S>],
    old: &[FeatureVector<S>],
    mask: &IntraMask,
    positives: &[usize],
    cfg: &LossConfig,
) -> Vec<S> {
    if !cfg.variant.is_triplet() {
        return Vec::new();
    }
    (0..new.len())
        .flat_map(|i| {
            triplet_args(
                i,
                positives[i],
                new,
                old,
                mask,
                S::lit(cfg.margin_m),
                cfg.variant == LossVariant::TripletRa,
                cfg.triplet_sign,
            )
        })
        .map(|(a, _, _)| a)
        .collect()
}

/// Features and logits of one forward pass over a batch, shared by the loss
/// evaluation and the gradient check.
pub struct BatchForward<S: Scalar = f64> {
    pub old_feats: Vec<FeatureVector<S>>,
    pub new_feats: Vec<FeatureVector<S>>,
    pub logits: Vec<Vec<S>>,
}

pub fn forward_batch<S: Scalar>(
    pair: &ModelPair<S>,
    batch: &MiniBatch<S>,
) -> Result<BatchForward<S>> {
    let old_feats = encode_batch(&pair.old, &batch.inputs_old_view)?;
    let new_feats = encode_batch(&pair.new, &batch.inputs_new_view)?;
    let logits = new_feats
        .iter()
        .map(|f| class_logits(&pair.new_classifier, f))
        .collect::<Result<_>>()?;
    Ok(BatchForward {
        old_feats,
        new_feats,
        logits,
    })
}

fn positives_for<'a, S: Scalar>(batch: &'a MiniBatch<S>, cfg: &LossConfig, fallback: &'a [usize]) -> &'a [usize] {
    if cfg.positive_sampler {
        &batch.positives
    } else {
        fallback
    }
}

/// `L_cls + λ·L_variant` and its gradient with respect to the new encoder and
/// classifier. The old encoder only runs forward.
pub fn total_loss_and_grad<S: Scalar>(
    pair: &ModelPair<S>,
    batch: &MiniBatch<S>,
    cfg: &LossConfig,
) -> Result<(LossValue<S>, Trainable<S>)> {
    loss_and_grad_parts(&pair.old, &pair.new, &pair.new_classifier, batch, cfg)
}

/// [`total_loss_and_grad`] on borrowed parts, for training loops that own the
/// trainable half separately.
pub fn loss_and_grad_parts<S: Scalar>(
    old: &EncoderParams<S>,
    new: &EncoderParams<S>,
    classifier: &ClassifierParams<S>,
    batch: &MiniBatch<S>,
    cfg: &LossConfig,
) -> Result<(LossValue<S>, Trainable<S>)> {
    let n = batch.len();
    let old_feats = encode_batch(old, &batch.inputs_old_view)?;
    let caches = batch
        .inputs_new_view
        .iter()
        .map(|x| new.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let new_feats: Vec<FeatureVector<S>> = caches.iter().map(|c| c.feature.clone()).collect();
    let logits = new_feats
        .iter()
        .map(|f| class_logits(classifier, f))
        .collect::<Result<Vec<_>>>()?;

    let (cls_term, grad_logits) = loss_cls(&logits, &batch.labels)?;
    let lambda = S::lit(cfg.lambda);
    let ident = identity(n);
    let positives = positives_for(batch, cfg, &ident);
    let (compat_term, grad_compat) =
        compat_loss_and_grad(&new_feats, &old_feats, &batch.intra_mask, positives, cfg)?;

    let mut grads = Trainable {
        encoder: new.zeros_like(),
        classifier: classifier.zeros_like(),
    };
    for i in 0..n {
        let f = new_feats[i].as_slice();
        grads.classifier.weight.add_outer(&grad_logits[i], f);
        if let Some(b) = grads.classifier.bias.as_mut() {
            for (bj, gj) in b.iter_mut().zip(&grad_logits[i]) {
                *bj += *gj;
            }
        }
        let mut grad_f = classifier.weight.tr_mul_vec(&grad_logits[i]);
        for (g, c) in grad_f.iter_mut().zip(&grad_compat[i]) {
            *g += lambda * *c;
        }
        new.backward(&caches[i], &grad_f, &mut grads.encoder);
    }
    let value = LossValue {
        total: cls_term + lambda * compat_term,
        cls_term,
        compat_term,
    };
    Ok((value, grads))
}

/// Loss value only; used by finite-difference checks.
pub fn total_loss<S: Scalar>(pair: &ModelPair<S>, batch: &MiniBatch<S>, cfg: &LossConfig) -> Result<LossValue<S>> {
    let fwd = forward_batch(pair, batch)?;
    let (cls_term, _) = loss_cls(&fwd.logits, &batch.labels)?;
    let ident = identity(batch.len());
    let positives = positives_for(batch, cfg, &ident);
    let (compat_term, _) =
        compat_loss_and_grad(&fwd.new_feats, &fwd.old_feats, &batch.intra_mask, positives, cfg)?;
    let lambda = S::lit(cfg.lambda);
    Ok(LossValue {
        total: cls_term + lambda * compat_term,
        cls_term,
        compat_term,
    })
}
