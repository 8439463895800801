//! Adam with decoupled weight decay, the step learning-rate schedule, the
//! old/new training loops and a finite-difference gradient checker.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::embedding::{FeatureVector, SampleId};
use crate::encoder::{
    class_logits, init_classifier, init_encoder, predict, Activation, ClassifierParams, EncoderDescriptor, EncoderParams,
    ModelPair, ParamTensors, Trainable,
};
use crate::error::{Error, Result};
use crate::extended::DoubleDouble;
use crate::losses::{
    forward_batch, loss_and_grad_parts, loss_cls, total_loss, total_loss_and_grad, triplet_hinge_arguments, LossConfig, MiniBatch,
};
use crate::rng::{self, Rng};
use crate::scalar::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub weight_decay: f64,
    /// Apply weight decay to the classifier head as well as the encoder.
    pub decay_classifier: bool,
    pub classifier_bias: bool,
    /// Standard deviation of the Gaussian input noise used as augmentation.
    pub aug_sigma: f64,
    pub seed: u64,
    pub loss_cfg: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            lr0: 0.01,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            weight_decay: 1e-4,
            decay_classifier: true,
            classifier_bias: false,
            aug_sigma: 0.05,
            seed: 0,
            loss_cfg: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return fail(format!("lr0 = {} must be > 0", self.lr0));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return fail(format!("lr_decay_factor = {} must be > 0", self.lr_decay_factor));
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every must be >= 1".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail(format!("weight_decay = {} must be >= 0", self.weight_decay));
        }
        if !(self.aug_sigma.is_finite() && self.aug_sigma >= 0.0) {
            return fail(format!("aug_sigma = {} must be >= 0", self.aug_sigma));
        }
        self.loss_cfg.validate()
    }
}

/// `lr0 · decay_factor^⌊epoch / decay_every⌋`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    let stage = epoch / cfg.lr_decay_every.max(1);
    cfg.lr0 * cfg.lr_decay_factor.powi(stage as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S: Scalar = f64> {
    pub first_moment: Vec<Vec<S>>,
    pub second_moment: Vec<Vec<S>>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new<P: ParamTensors<S>>(params: &P) -> Self {
        let zeros: Vec<Vec<S>> = params.tensors().iter().map(|t| vec![S::zero(); t.len()]).collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step: 0,
        }
    }
}

/// One Adam step. Weight decay is decoupled: `θ ← θ − lr·wd·θ` is applied
/// before the bias-corrected Adam update.
pub fn adam_step<S: Scalar, P: ParamTensors<S>>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<S>,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    let n = params.tensors().len();
    adam_step_masked(params, grads, state, lr, weight_decay, &vec![true; n])
}

/// [`adam_step`] with weight decay applied only to tensors whose `decay`
/// entry is true.
pub fn adam_step_masked<S: Scalar, P: ParamTensors<S>>(
    params: &mut P,
    grads: &P,
    state: &mut OptimizerState<S>,
    lr: f64,
    weight_decay: f64,
    decay: &[bool],
) -> Result<()> {
    let grads = grads.tensors();
    let mut params = params.tensors_mut();
    let shapes_ok = params.len() == grads.len()
        && params.len() == state.first_moment.len()
        && params.len() == decay.len()
        && params
            .iter()
            .zip(&grads)
            .zip(&state.first_moment)
            .all(|((p, g), m)| p.len() == g.len() && p.len() == m.len());
    if !shapes_ok {
        return Err(Error::ShapeMismatch("parameters, gradients and optimizer state differ".into()));
    }
    if grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
        return Err(Error::NonFiniteGradient);
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(ADAM_BETA1), S::lit(ADAM_BETA2));
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    let lr = S::lit(lr);
    let wd = S::lit(weight_decay);
    let eps = S::lit(ADAM_EPS);
    for (i, (p, g)) in params.iter_mut().zip(&grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.len() {
            let gj = g[j];
            m[j] = b1 * m[j] + (S::one() - b1) * gj;
            v[j] = b2 * v[j] + (S::one() - b2) * gj * gj;
            if decay[i] {
                p[j] -= lr * wd * p[j];
            }
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub cls_term: f64,
    pub compat_term: f64,
}

fn augment<S: Scalar>(rng: &mut Rng, x: &[S], sigma: f64) -> Vec<S> {
    if sigma == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            *v + S::lit(z * sigma)
        })
        .collect()
}

/// Mean classification loss and gradient for the encoder and classifier.
fn classification_grad<S: Scalar>(
    model: &Trainable<S>,
    inputs: &[Vec<S>],
    labels: &[crate::embedding::ClassLabel],
) -> Result<(S, Trainable<S>)> {
    let caches = inputs
        .iter()
        .map(|x| model.encoder.forward(x))
        .collect::<Result<Vec<_>>>()?;
    let logits = caches
        .iter()
        .map(|c| class_logits(&model.classifier, &c.feature))
        .collect::<Result<Vec<_>>>()?;
    let (loss, grad_logits) = loss_cls(&logits, labels)?;
    let mut grads = model.zeros_like();
    for (c, g) in caches.iter().zip(&grad_logits) {
        grads.classifier.weight.add_outer(g, c.feature.as_slice());
        if let Some(b) = grads.classifier.bias.as_mut() {
            for (bj, gj) in b.iter_mut().zip(g) {
                *bj += *gj;
            }
        }
        let grad_f = model.classifier.weight.tr_mul_vec(g);
        model.encoder.backward(c, &grad_f, &mut grads.encoder);
    }
    Ok((loss, grads))
}

enum Objective<'a, S: Scalar> {
    Classification,
    Compatible(&'a EncoderParams<S>),
}

fn train_loop<S: Scalar>(
    dataset: &Dataset<S>,
    descriptor: &EncoderDescriptor,
    cfg: &TrainConfig,
    objective: Objective<'_, S>,
) -> Result<(Trainable<S>, Vec<EpochLog>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training set is empty"));
    }
    if descriptor.input_dim != dataset.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: descriptor.input_dim,
            actual: dataset.input_dim(),
        });
    }
    let mut model = Trainable {
        encoder: init_encoder(descriptor, rng::derive_seed(cfg.seed, "init/encoder", 0))?,
        classifier: init_classifier(
            dataset.num_classes,
            descriptor.embed_dim,
            cfg.classifier_bias,
            rng::derive_seed(cfg.seed, "init/classifier", 0),
        )?,
    };
    let mut state = OptimizerState::new(&model);
    let n_enc = model.encoder.tensors().len();
    let decay: Vec<bool> = (0..model.tensors().len())
        .map(|i| i < n_enc || cfg.decay_classifier)
        .collect();
    let mut rng = rng::stream(cfg.seed, "train");
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<_> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let old_view: Vec<Vec<S>> = samples.iter().map(|s| augment(&mut rng, &s.input, cfg.aug_sigma)).collect();
            let new_view: Vec<Vec<S>> = samples.iter().map(|s| augment(&mut rng, &s.input, cfg.aug_sigma)).collect();
            let labels = samples.iter().map(|s| s.label).collect::<Vec<_>>();

            let (value, grads) = match &objective {
                Objective::Classification => {
                    let (loss, grads) = classification_grad(&model, &new_view, &labels)?;
                    ([loss.to_f64_lossy(), loss.to_f64_lossy(), 0.0], grads)
                }
                Objective::Compatible(old) => {
                    let ids = samples.iter().map(|s| s.id).collect();
                    let mut batch = MiniBatch::new(ids, old_view, new_view, labels)?;
                    if cfg.loss_cfg.positive_sampler {
                        batch.sample_positives(&mut rng);
                    }
                    let (v, grads) =
                        loss_and_grad_parts(old, &model.encoder, &model.classifier, &batch, &cfg.loss_cfg)?;
                    (
                        [v.total.to_f64_lossy(), v.cls_term.to_f64_lossy(), v.compat_term.to_f64_lossy()],
                        grads,
                    )
                }
            };
            adam_step_masked(&mut model, &grads, &mut state, lr, cfg.weight_decay, &decay)?;
            for (s, v) in sums.iter_mut().zip(value) {
                *s += v;
            }
            batches += 1;
        }
        let b = batches as f64;
        log.push(EpochLog {
            epoch,
            lr,
            total: sums[0] / b,
            cls_term: sums[1] / b,
            compat_term: sums[2] / b,
        });
    }
    Ok((model, log))
}

/// Trains an encoder and classifier with the classification loss only.
pub fn train_old<S: Scalar>(
    dataset: &Dataset<S>,
    descriptor: &EncoderDescriptor,
    cfg: &TrainConfig,
) -> Result<(EncoderParams<S>, ClassifierParams<S>, Vec<EpochLog>)> {
    let (model, log) = train_loop(dataset, descriptor, cfg, Objective::Classification)?;
    Ok((model.encoder, model.classifier, log))
}

/// Trains a new encoder and classifier against a frozen old encoder with
/// `L_cls + λ·L_compat`.
pub fn train_new<S: Scalar>(
    new_train: &Dataset<S>,
    old_model: &EncoderParams<S>,
    descriptor: &EncoderDescriptor,
    cfg: &TrainConfig,
) -> Result<(ModelPair<S>, Vec<EpochLog>)> {
    if old_model.embed_dim() != descriptor.embed_dim {
        return Err(Error::DimensionMismatch {
            expected: old_model.embed_dim(),
            actual: descriptor.embed_dim,
        });
    }
    let (model, log) = train_loop(new_train, descriptor, cfg, Objective::Compatible(old_model))?;
    let pair = ModelPair::new(old_model.clone(), model.encoder, model.classifier)?;
    Ok((pair, log))
}

/// Fraction of samples whose predicted class matches the label.
pub fn accuracy<S: Scalar>(
    encoder: &EncoderParams<S>,
    classifier: &ClassifierParams<S>,
    dataset: &Dataset<S>,
) -> Result<f64> {
    let mut correct = 0usize;
    for s in &dataset.samples {
        let f = encoder.forward(&s.input)?.feature;
        if predict(classifier, &f)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len().max(1) as f64)
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step_h: f64,
    /// Coordinates checked per tensor; `None` checks all of them.
    pub coords_per_tensor: Option<usize>,
    /// Hinge arguments closer than this to zero count as kinks.
    pub kink_tolerance: f64,
    pub seed: u64,
    /// Test hook: perturb the analytic gradient so the check must fail.
    pub corrupt_gradient: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step_h: 1e-5,
            coords_per_tensor: None,
            kink_tolerance: 1e-3,
            seed: 0,
            corrupt_gradient: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub coords_checked: usize,
    pub coords_skipped: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    /// Smallest |hinge argument| at the checked point (infinite when the
    /// variant has no hinge).
    pub min_hinge_margin: f64,
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Relu pre-activations of the new encoder on the new view.
fn relu_pre_activations<T: Scalar>(p: &ModelPair<T>, batch: &MiniBatch<T>) -> Result<Vec<f64>> {
    let mut args = Vec::new();
    if p.new.descriptor.activation == Activation::Relu {
        for x in &batch.inputs_new_view {
            for z in p.new.forward(x)?.hidden_pre().iter().flatten() {
                args.push(z.to_f64_lossy());
            }
        }
    }
    Ok(args)
}

fn hinge_args<T: Scalar>(p: &ModelPair<T>, batch: &MiniBatch<T>, cfg: &LossConfig) -> Result<Vec<f64>> {
    let fwd = forward_batch(p, batch)?;
    let ident: Vec<usize> = (0..batch.len()).collect();
    let pos = if cfg.positive_sampler { &batch.positives } else { &ident };
    Ok(
        triplet_hinge_arguments(&fwd.new_feats, &fwd.old_feats, &batch.intra_mask, pos, cfg)
            .into_iter()
            .map(|a| a.to_f64_lossy())
            .collect(),
    )
}

fn widen_encoder<S: Scalar>(e: &EncoderParams<S>) -> Result<EncoderParams<DoubleDouble>> {
    let mut w = init_encoder::<DoubleDouble>(&e.descriptor, 0)?;
    for (dst, src) in w.tensors_mut().into_iter().zip(e.tensors()) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = DoubleDouble::from_f64(s.to_f64_lossy());
        }
    }
    Ok(w)
}

fn widen_classifier<S: Scalar>(c: &ClassifierParams<S>) -> Result<ClassifierParams<DoubleDouble>> {
    let mut w = init_classifier::<DoubleDouble>(c.num_classes(), c.embed_dim(), c.bias.is_some(), 0)?;
    for (dst, src) in w.tensors_mut().into_iter().zip(c.tensors()) {
        for (d, s) in dst.iter_mut().zip(src) {
            *d = DoubleDouble::from_f64(s.to_f64_lossy());
        }
    }
    Ok(w)
}

fn widen_rows<S: Scalar>(rows: &[Vec<S>]) -> Vec<Vec<DoubleDouble>> {
    rows.iter()
        .map(|r| r.iter().map(|v| DoubleDouble::from_f64(v.to_f64_lossy())).collect())
        .collect()
}

/// Compares analytic gradients of the total objective with the five-point
/// central difference `(−f(θ+2h) + 8f(θ+h) − 8f(θ−h) + f(θ−2h)) / 12h`.
///
/// The differences are taken in double-double arithmetic, so the only
/// error left on the numeric side is the O(h⁴) truncation. Coordinates whose
/// perturbation moves a hinge argument or a relu pre-activation across its
/// kink are skipped and counted.
pub fn grad_check<S: Scalar>(
    pair: &ModelPair<S>,
    batch: &MiniBatch<S>,
    cfg: &LossConfig,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, mut grads) = total_loss_and_grad(pair, batch, cfg)?;
    if opts.corrupt_gradient {
        for t in grads.tensors_mut() {
            for g in t.iter_mut() {
                *g = *g * S::lit(1.01) + S::lit(1e-3);
            }
        }
    }
    let min_hinge_margin = hinge_args(pair, batch, cfg)?
        .iter()
        .fold(f64::INFINITY, |m, a| m.min(a.abs()));

    type D = DoubleDouble;
    let old = widen_encoder(&pair.old)?;
    let mut wide_batch = MiniBatch::new(
        batch.indices.clone(),
        widen_rows(&batch.inputs_old_view),
        widen_rows(&batch.inputs_new_view),
        batch.labels.clone(),
    )?;
    wide_batch.positives = batch.positives.clone();
    let trainable = Trainable {
        encoder: widen_encoder(&pair.new)?,
        classifier: widen_classifier(&pair.new_classifier)?,
    };
    let to_pair = |t: &Trainable<D>| -> Result<ModelPair<D>> {
        ModelPair::new(old.clone(), t.encoder.clone(), t.classifier.clone())
    };
    // hinge arguments followed by relu pre-activations of the new encoder
    let kink_args = |p: &ModelPair<D>| -> Result<Vec<f64>> {
        let mut args = hinge_args(p, &wide_batch, cfg)?;
        args.extend(relu_pre_activations(p, &wide_batch)?);
        Ok(args)
    };
    let base_args = kink_args(&to_pair(&trainable)?)?;

    let names = trainable.tensor_names();
    let sizes: Vec<usize> = trainable.tensors().iter().map(|t| t.len()).collect();
    let analytic: Vec<Vec<f64>> = grads
        .tensors()
        .iter()
        .map(|t| t.iter().map(|g| g.to_f64_lossy()).collect())
        .collect();
    let mut rng = rng::stream(opts.seed, "grad_check");
    let eval = |t: &Trainable<D>| -> Result<(D, Vec<f64>)> {
        let p = to_pair(t)?;
        Ok((total_loss(&p, &wide_batch, cfg)?.total, kink_args(&p)?))
    };

    let mut tensors = Vec::with_capacity(sizes.len());
    let mut overall = 0.0f64;
    for (ti, (&size, name)) in sizes.iter().zip(names).enumerate() {
        let mut coords: Vec<usize> = (0..size).collect();
        if let Some(k) = opts.coords_per_tensor {
            coords.shuffle(&mut rng);
            coords.truncate(k);
            coords.sort_unstable();
        }
        let mut worst = 0.0f64;
        let (mut checked, mut skipped) = (0, 0);
        for j in coords {
            let mut values = [D::from_f64(0.0); 4];
            let mut crosses = false;
            for (slot, mult) in [2.0, 1.0, -1.0, -2.0].into_iter().enumerate() {
                let mut t = trainable.clone();
                t.tensors_mut()[ti][j] += D::from_f64(opts.step_h * mult);
                let (v, args) = eval(&t)?;
                values[slot] = v;
                crosses |= base_args
                    .iter()
                    .zip(&args)
                    .any(|(b, a)| (*b > 0.0) != (*a > 0.0));
            }
            if crosses {
                skipped += 1;
                continue;
            }
            let numeric = (D::from_f64(8.0) * (values[1] - values[2]) - (values[0] - values[3]))
                / D::from_f64(12.0 * opts.step_h);
            worst = worst.max(rel_err(analytic[ti][j], numeric.to_f64_lossy()));
            checked += 1;
        }
        overall = overall.max(worst);
        tensors.push(TensorCheck {
            name,
            coords_checked: checked,
            coords_skipped: skipped,
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport {
        tensors,
        max_rel_err: overall,
        min_hinge_margin,
    })
}

fn fill_normal<S: Scalar, P: ParamTensors<S>>(params: &mut P, rng: &mut Rng, normal: &Normal<f64>) {
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            *v = S::lit(normal.sample(rng));
        }
    }
}

/// Small random problem for gradient checks: parameters drawn from
/// `N(0, 0.1²)`, inputs from `N(0, 1)`, labels cycling over `num_classes`.
pub fn toy_problem<S: Scalar>(
    descriptor: &EncoderDescriptor,
    num_classes: usize,
    batch_size: usize,
    classifier_bias: bool,
    seed: u64,
) -> Result<(ModelPair<S>, MiniBatch<S>)> {
    let mut rng = rng::stream(seed, "toy");
    let normal = Normal::new(0.0, 0.1).expect("valid normal");
    let mut old = init_encoder::<S>(descriptor, seed)?;
    let mut new = init_encoder::<S>(descriptor, seed + 1)?;
    let mut cls = init_classifier::<S>(num_classes, descriptor.embed_dim, classifier_bias, seed)?;
    fill_normal(&mut old, &mut rng, &normal);
    fill_normal(&mut new, &mut rng, &normal);
    fill_normal(&mut cls, &mut rng, &normal);
    let pair = ModelPair::new(old, new, cls)?;

    let view = |rng: &mut Rng| -> Vec<Vec<S>> {
        (0..batch_size)
            .map(|_| {
                (0..descriptor.input_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        S::lit(z)
                    })
                    .collect()
            })
            .collect()
    };
    let a = view(&mut rng);
    let b = view(&mut rng);
    let labels = (0..batch_size)
        .map(|i| crate::embedding::ClassLabel((i % num_classes) as u32))
        .collect();
    let mut batch = MiniBatch::new((0..batch_size as u64).map(SampleId).collect(), a, b, labels)?;
    batch.sample_positives(&mut rng);
    Ok((pair, batch))
}

/// Encodes a dataset's inputs with `encoder`.
pub fn encode_dataset<S: Scalar>(encoder: &EncoderParams<S>, ds: &Dataset<S>) -> Result<Vec<FeatureVector<S>>> {
    crate::encoder::encode_batch(encoder, &ds.inputs())
}
