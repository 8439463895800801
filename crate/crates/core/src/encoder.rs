//! Multilayer perceptron encoders and the linear classifier head.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize, ClassLabel, FeatureVector, Matrix};
use crate::error::{Error, Result};
use crate::features_io::{decode_block, encode_block};
use crate::rng;
use crate::scalar::{dot, norm, Scalar};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(S::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn derivative<S: Scalar>(self, z: S) -> S {
        match self {
            Activation::Identity => S::one(),
            Activation::Relu => {
                if z > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                S::one() - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDescriptor {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl EncoderDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidDescriptor(format!(
                "all layer widths must be positive: input {}, hidden {:?}, embed {}",
                self.input_dim, self.hidden_dims, self.embed_dim
            )));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` for every layer, input side first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.embed_dim);
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<S: Scalar = f64> {
    /// `fan_out × fan_in`.
    pub weight: Matrix<S>,
    pub bias: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<S: Scalar = f64> {
    pub descriptor: EncoderDescriptor,
    pub layers: Vec<Layer<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams<S: Scalar = f64> {
    /// `num_classes × embed_dim`.
    pub weight: Matrix<S>,
    pub bias: Option<Vec<S>>,
}

/// Frozen old encoder, trainable new encoder and the new classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelPair<S: Scalar = f64> {
    pub old: EncoderParams<S>,
    pub new: EncoderParams<S>,
    pub new_classifier: ClassifierParams<S>,
}

impl<S: Scalar> ModelPair<S> {
    pub fn new(
        old: EncoderParams<S>,
        new: EncoderParams<S>,
        new_classifier: ClassifierParams<S>,
    ) -> Result<Self> {
        let d = old.descriptor.embed_dim;
        for actual in [new.descriptor.embed_dim, new_classifier.embed_dim()] {
            if actual != d {
                return Err(Error::DimensionMismatch { expected: d, actual });
            }
        }
        Ok(Self {
            old,
            new,
            new_classifier,
        })
    }
}

/// Flat access to parameter tensors, in a fixed order.
pub trait ParamTensors<S: Scalar> {
    fn tensors(&self) -> Vec<&[S]>;
    fn tensors_mut(&mut self) -> Vec<&mut [S]>;
    fn tensor_names(&self) -> Vec<String>;
}

impl<S: Scalar> ParamTensors<S> for EncoderParams<S> {
    fn tensors(&self) -> Vec<&[S]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    fn tensor_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| [format!("layer{i}.weight"), format!("layer{i}.bias")])
            .collect()
    }
}

impl<S: Scalar> ParamTensors<S> for ClassifierParams<S> {
    fn tensors(&self) -> Vec<&[S]> {
        let mut t = vec![self.weight.as_slice()];
        if let Some(b) = &self.bias {
            t.push(b.as_slice());
        }
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut t = vec![self.weight.as_mut_slice()];
        if let Some(b) = &mut self.bias {
            t.push(b.as_mut_slice());
        }
        t
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut n = vec!["classifier.weight".to_string()];
        if self.bias.is_some() {
            n.push("classifier.bias".into());
        }
        n
    }
}

/// New encoder and classifier together, the trainable half of a [`ModelPair`].
#[derive(Clone, Debug, PartialEq)]
pub struct Trainable<S: Scalar = f64> {
    pub encoder: EncoderParams<S>,
    pub classifier: ClassifierParams<S>,
}

impl<S: Scalar> ParamTensors<S> for Trainable<S> {
    fn tensors(&self) -> Vec<&[S]> {
        let mut t = self.encoder.tensors();
        t.extend(self.classifier.tensors());
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.classifier.tensors_mut());
        t
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut n = self.encoder.tensor_names();
        n.extend(self.classifier.tensor_names());
        n
    }
}

impl<S: Scalar> EncoderParams<S> {
    pub fn zeros_like(&self) -> Self {
        Self {
            descriptor: self.descriptor.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![S::zero(); l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.descriptor.embed_dim
    }
}

impl<S: Scalar> ClassifierParams<S> {
    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: self.bias.as_ref().map(|b| vec![S::zero(); b.len()]),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.cols()
    }
}

impl<S: Scalar> Trainable<S> {
    pub fn zeros_like(&self) -> Self {
        Self {
            encoder: self.encoder.zeros_like(),
            classifier: self.classifier.zeros_like(),
        }
    }
}

fn uniform_matrix<S: Scalar>(rng: &mut rng::Rng, rows: usize, cols: usize) -> Matrix<S> {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::lit(rng.random_range(-bound..bound)))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("shape matches data length")
}

/// Weights `U(-1/√fan_in, 1/√fan_in)`, biases zero.
pub fn init_encoder<S: Scalar>(descriptor: &EncoderDescriptor, seed: u64) -> Result<EncoderParams<S>> {
    descriptor.validate()?;
    let mut rng = rng::stream(seed, "init/encoder");
    let layers = descriptor
        .layer_shapes()
        .into_iter()
        .map(|(out, inp)| Layer {
            weight: uniform_matrix(&mut rng, out, inp),
            bias: vec![S::zero(); out],
        })
        .collect();
    Ok(EncoderParams {
        descriptor: descriptor.clone(),
        layers,
    })
}

pub fn init_classifier<S: Scalar>(
    num_classes: usize,
    embed_dim: usize,
    with_bias: bool,
    seed: u64,
) -> Result<ClassifierParams<S>> {
    if num_classes < 2 || embed_dim == 0 {
        return Err(Error::InvalidDescriptor(format!(
            "classifier needs >= 2 classes and a positive width, got {num_classes}x{embed_dim}"
        )));
    }
    let mut rng = rng::stream(seed, "init/classifier");
    Ok(ClassifierParams {
        weight: uniform_matrix(&mut rng, num_classes, embed_dim),
        bias: with_bias.then(|| vec![S::zero(); num_classes]),
    })
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardCache<S: Scalar = f64> {
    /// Layer inputs; `inputs[0]` is the raw input.
    inputs: Vec<Vec<S>>,
    /// Pre-activations of every layer; the last one is the unnormalized output.
    pre: Vec<Vec<S>>,
    pub feature: FeatureVector<S>,
}

impl<S: Scalar> ForwardCache<S> {
    /// Pre-activations of the hidden layers.
    pub fn hidden_pre(&self) -> &[Vec<S>] {
        &self.pre[..self.pre.len() - 1]
    }
}

impl<S: Scalar> EncoderParams<S> {
    pub fn forward(&self, input: &[S]) -> Result<ForwardCache<S>> {
        if input.len() != self.descriptor.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.descriptor.input_dim,
                actual: input.len(),
            });
        }
        let act = self.descriptor.activation;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.weight.mul_vec(&h);
            for (zj, bj) in z.iter_mut().zip(&layer.bias) {
                *zj += *bj;
            }
            let next = if i == last {
                z.clone()
            } else {
                z.iter().map(|v| act.apply(*v)).collect()
            };
            inputs.push(std::mem::replace(&mut h, next));
            pre.push(z);
        }
        let feature = l2_normalize(&h)?;
        Ok(ForwardCache {
            inputs,
            pre,
            feature,
        })
    }

    /// Accumulates into `grads` the gradient of a scalar objective whose
    /// gradient with respect to the normalized feature is `grad_feature`.
    pub fn backward(&self, cache: &ForwardCache<S>, grad_feature: &[S], grads: &mut EncoderParams<S>) {
        let f = cache.feature.as_slice();
        let out = cache.pre.last().expect("encoder has at least one layer");
        let n = norm(out);
        // d f / d u for f = u / |u| applied to grad_feature
        let proj = dot(f, grad_feature);
        let mut g: Vec<S> = grad_feature
            .iter()
            .zip(f)
            .map(|(gi, fi)| (*gi - *fi * proj) / n)
            .collect();

        let act = self.descriptor.activation;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let gl = &mut grads.layers[i];
            gl.weight.add_outer(&g, &cache.inputs[i]);
            for (b, gi) in gl.bias.iter_mut().zip(&g) {
                *b += *gi;
            }
            if i > 0 {
                let mut below = layer.weight.tr_mul_vec(&g);
                for (v, z) in below.iter_mut().zip(&cache.pre[i - 1]) {
                    *v *= act.derivative(*z);
                }
                g = below;
            }
        }
    }
}

/// Encodes every input and normalizes the outputs.
pub fn encode_batch<S: Scalar, R: AsRef<[S]>>(
    params: &EncoderParams<S>,
    inputs: &[R],
) -> Result<Vec<FeatureVector<S>>> {
    inputs
        .iter()
        .map(|x| params.forward(x.as_ref()).map(|c| c.feature))
        .collect()
}

pub fn class_logits<S: Scalar>(classifier: &ClassifierParams<S>, f: &FeatureVector<S>) -> Result<Vec<S>> {
    if f.dim() != classifier.embed_dim() {
        return Err(Error::DimensionMismatch {
            expected: classifier.embed_dim(),
            actual: f.dim(),
        });
    }
    let mut z = classifier.weight.mul_vec(f.as_slice());
    if let Some(b) = &classifier.bias {
        for (zi, bi) in z.iter_mut().zip(b) {
            *zi += *bi;
        }
    }
    Ok(z)
}

/// Softmax with the maximum subtracted first.
pub fn softmax_probs<S: Scalar>(logits: &[S]) -> Result<Vec<S>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax of an empty vector"));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let max = logits.iter().fold(S::neg_infinity(), |m, z| m.max(*z));
    let exps: Vec<S> = logits.iter().map(|z| (*z - max).exp()).collect();
    let sum: S = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Class of the largest logit, lowest index on ties.
pub fn predict<S: Scalar>(classifier: &ClassifierParams<S>, f: &FeatureVector<S>) -> Result<ClassLabel> {
    let z = class_logits(classifier, f)?;
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    Ok(ClassLabel(best as u32))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    encoder: EncoderDescriptor,
    classifier: Option<ClassifierHeader>,
    /// Tensors in the order their HSWB blocks appear in the binary file.
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ClassifierHeader {
    num_classes: usize,
    bias: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

const CHECKPOINT_FORMAT: &str = "hotswap-checkpoint";

fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` (descriptor and tensor list) and `<stem>.bin` (one
/// HSWB block per tensor: `layer{i}.weight`, `layer{i}.bias` for each layer,
/// then `classifier.weight` and `classifier.bias` when present). Matrices are
/// stored with count = rows and dim = cols, vectors as a single row.
pub fn save_checkpoint<S: Scalar>(
    stem: impl AsRef<Path>,
    encoder: &EncoderParams<S>,
    classifier: Option<&ClassifierParams<S>>,
) -> Result<()> {
    let mut shapes: Vec<(usize, usize)> = encoder
        .layers
        .iter()
        .flat_map(|l| [(l.weight.rows(), l.weight.cols()), (1, l.bias.len())])
        .collect();
    let mut names = encoder.tensor_names();
    let mut data = encoder.tensors();
    if let Some(c) = classifier {
        shapes.push((c.weight.rows(), c.weight.cols()));
        if let Some(b) = &c.bias {
            shapes.push((1, b.len()));
        }
        names.extend(c.tensor_names());
        data.extend(c.tensors());
    }
    let mut bin = Vec::new();
    let mut entries = Vec::new();
    for ((name, (rows, cols)), values) in names.into_iter().zip(shapes).zip(data) {
        let row_vecs: Vec<&[S]> = values.chunks(cols.max(1)).collect();
        let labels = vec![ClassLabel(0); rows];
        bin.extend(encode_block(&row_vecs, &labels)?);
        entries.push(TensorEntry { name, rows, cols });
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        encoder: encoder.descriptor.clone(),
        classifier: classifier.map(|c| ClassifierHeader {
            num_classes: c.num_classes(),
            bias: c.bias.is_some(),
        }),
        tensors: entries,
    };
    let (json_path, bin_path) = checkpoint_paths(stem.as_ref());
    fs::write(json_path, serde_json::to_string_pretty(&header)?)?;
    fs::write(bin_path, bin)?;
    Ok(())
}

pub type Checkpoint<S> = (EncoderParams<S>, Option<ClassifierParams<S>>);

pub fn load_checkpoint<S: Scalar>(stem: impl AsRef<Path>) -> Result<Checkpoint<S>> {
    let (json_path, bin_path) = checkpoint_paths(stem.as_ref());
    let header: CheckpointHeader = serde_json::from_slice(&fs::read(json_path)?)?;
    if header.format != CHECKPOINT_FORMAT || header.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint {} v{}",
            header.format, header.version
        )));
    }
    let mut encoder = init_encoder::<S>(&header.encoder, 0)?;
    let mut classifier = match &header.classifier {
        Some(c) => Some(init_classifier::<S>(c.num_classes, header.encoder.embed_dim, c.bias, 0)?),
        None => None,
    };
    let bytes = fs::read(bin_path)?;
    let mut targets = encoder.tensors_mut();
    if let Some(c) = classifier.as_mut() {
        targets.extend(c.tensors_mut());
    }
    if targets.len() != header.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, header lists {}",
            targets.len(),
            header.tensors.len()
        )));
    }
    let mut off = 0;
    for (target, entry) in targets.into_iter().zip(&header.tensors) {
        let (rows, _, used) = decode_block::<S>(&bytes[off..])?;
        off += used;
        let flat: Vec<S> = rows.into_iter().flatten().collect();
        if flat.len() != target.len() || flat.len() != entry.rows * entry.cols {
            return Err(Error::Checkpoint(format!("tensor {} has the wrong size", entry.name)));
        }
        target.copy_from_slice(&flat);
    }
    Ok((encoder, classifier))
}
