//! Fully connected RELU classifier with a softmax output layer.
//!
//! Weights are stored per layer as `output_size × input_size` matrices. All
//! forward passes go through the batched path, so a single-image forward and
//! a row of a batch forward produce the same bits.

use std::fmt::Debug;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Image, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "compprof-network";
const BATCH_ROWS: usize = 512;

pub trait Scalar:
    LinalgScalar + Float + FromPrimitive + ToPrimitive + Debug + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input_size: usize,
    pub output_size: usize,
    pub activation: Activation,
}

impl LayerSpec {
    /// RELU layers between consecutive `sizes`, softmax on the last one.
    pub fn chain(sizes: &[usize]) -> Vec<LayerSpec> {
        let n = sizes.len().saturating_sub(1);
        (0..n)
            .map(|j| LayerSpec {
                input_size: sizes[j],
                output_size: sizes[j + 1],
                activation: if j + 1 == n { Activation::Softmax } else { Activation::Relu },
            })
            .collect()
    }
}

/// 784 → 256 → 64 → 10.
pub fn default_architecture() -> Vec<LayerSpec> {
    LayerSpec::chain(&[784, 256, 64, 10])
}

pub fn validate_architecture(arch: &[LayerSpec]) -> Result<()> {
    if arch.is_empty() {
        return Err(Error::Architecture("no layers".into()));
    }
    for (j, l) in arch.iter().enumerate() {
        if l.input_size == 0 || l.output_size == 0 {
            return Err(Error::Architecture(format!("layer {} has a zero size", j + 1)));
        }
        let last = j + 1 == arch.len();
        match (l.activation, last) {
            (Activation::Softmax, false) => {
                return Err(Error::Architecture(format!(
                    "softmax on hidden layer {}",
                    j + 1
                )))
            }
            (Activation::Relu, true) => {
                return Err(Error::Architecture("output layer must be softmax".into()))
            }
            _ => {}
        }
        if j > 0 && arch[j - 1].output_size != l.input_size {
            return Err(Error::Architecture(format!(
                "layer {} expects {} inputs but layer {} emits {}",
                j + 1,
                l.input_size,
                j,
                arch[j - 1].output_size
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub weights: Array2<T>,
    pub biases: Array1<T>,
}

/// Output of one backward pass.
#[derive(Debug, Clone)]
pub struct BatchGradients<T> {
    pub loss: f64,
    /// Inputs whose pre-update prediction matched the target.
    pub correct: usize,
    /// `(d loss / d weights, d loss / d biases)` per layer.
    pub layers: Vec<(Array2<T>, Array1<T>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel<T = f32> {
    layers: Vec<Layer<T>>,
    seed: u64,
}

/// Post-activation values of every layer for one input. Layers are numbered
/// from 1 to N; layer N is the softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    layers: Vec<Vec<f32>>,
}

impl ActivationTrace {
    pub fn new(layers: Vec<Vec<f32>>) -> Self {
        ActivationTrace { layers }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Activations of layer `j` (1-based).
    pub fn layer(&self, j: usize) -> Option<&[f32]> {
        j.checked_sub(1).and_then(|i| self.layers.get(i)).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub best_class: usize,
    pub probabilities: Vec<f64>,
}

pub(crate) fn argmax<T: PartialOrd + Copy>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v = None;
    for (i, v) in values.into_iter().enumerate() {
        if best_v.is_none_or(|b| v > b) {
            best = i;
            best_v = Some(v);
        }
    }
    best
}

/// Stacks images into an `n × 784` input matrix.
pub fn input_matrix(images: &[Image]) -> Array2<f32> {
    let cols = images.first().map_or(0, |i| i.pixels().len());
    let mut m = Array2::zeros((images.len(), cols));
    for (mut row, img) in m.rows_mut().into_iter().zip(images) {
        for (dst, &p) in row.iter_mut().zip(img.pixels()) {
            *dst = p as f32;
        }
    }
    m
}

/// He-uniform initialization: weights in ±sqrt(6 / fan_in), zero biases.
pub fn init_model(architecture: &[LayerSpec], seed: u64) -> Result<NetworkModel> {
    validate_architecture(architecture)?;
    let mut gen = rng::generator(seed);
    let layers = architecture
        .iter()
        .map(|&spec| {
            let bound = (6.0 / spec.input_size as f64).sqrt();
            let weights = Array2::from_shape_simple_fn((spec.output_size, spec.input_size), || {
                gen.random_range(-bound..bound) as f32
            });
            Layer { spec, weights, biases: Array1::zeros(spec.output_size) }
        })
        .collect();
    Ok(NetworkModel { layers, seed })
}

fn relu_inplace<T: Scalar>(m: &mut Array2<T>) {
    m.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

fn softmax_rows_inplace<T: Scalar>(m: &mut Array2<T>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().copied().fold(T::zero(), |a, b| a + b);
        row.mapv_inplace(|v| v / sum);
    }
}

impl<T: Scalar> NetworkModel<T> {
    pub fn from_layers(layers: Vec<Layer<T>>, seed: u64) -> Result<Self> {
        let specs: Vec<_> = layers.iter().map(|l| l.spec).collect();
        validate_architecture(&specs)?;
        for (j, l) in layers.iter().enumerate() {
            let shape = (l.spec.output_size, l.spec.input_size);
            if l.weights.dim() != shape || l.biases.len() != l.spec.output_size {
                return Err(Error::Architecture(format!(
                    "layer {} parameters do not match its spec",
                    j + 1
                )));
            }
            if l.weights.iter().chain(l.biases.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Architecture(format!("layer {} has non-finite values", j + 1)));
            }
        }
        Ok(NetworkModel { layers, seed })
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn architecture(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// N, the number of layers.
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].spec.input_size
    }

    pub fn num_classes(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NetworkModel<U> {
        let conv = |v: &T| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan());
        NetworkModel {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    spec: l.spec,
                    weights: l.weights.map(conv),
                    biases: l.biases.map(conv),
                })
                .collect(),
            seed: self.seed,
        }
    }

    /// Pre-activations and post-activations for every layer.
    fn propagate(&self, inputs: ArrayView2<T>) -> Result<(Vec<Array2<T>>, Vec<Array2<T>>)> {
        if inputs.ncols() != self.input_size() {
            return Err(Error::Dimension { expected: self.input_size(), found: inputs.ncols() });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post: Vec<Array2<T>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = post.last().map_or(inputs, |a| a.view());
            let z = x.dot(&layer.weights.t()) + &layer.biases;
            let mut a = z.clone();
            match layer.spec.activation {
                Activation::Relu => relu_inplace(&mut a),
                Activation::Softmax => softmax_rows_inplace(&mut a),
            }
            pre.push(z);
            post.push(a);
        }
        Ok((pre, post))
    }

    /// Post-activation matrices (one row per input) for every layer.
    pub fn forward_batch(&self, inputs: ArrayView2<T>) -> Result<Vec<Array2<T>>> {
        Ok(self.propagate(inputs)?.1)
    }

    /// Mean softmax cross-entropy over the batch and its gradient with
    /// respect to every weight and bias.
    pub fn loss_and_gradients(
        &self,
        inputs: ArrayView2<T>,
        targets: &[usize],
    ) -> Result<BatchGradients<T>> {
        if inputs.nrows() != targets.len() {
            return Err(Error::Dimension { expected: inputs.nrows(), found: targets.len() });
        }
        let k = self.num_classes();
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::UnknownClass { class: t, num_classes: k });
        }
        let (pre, post) = self.propagate(inputs)?;
        let batch = inputs.nrows();
        let scale = T::from_usize(batch).unwrap_or_else(T::one).recip();

        let probs = &post[post.len() - 1];
        let correct = probs
            .rows()
            .into_iter()
            .zip(targets)
            .filter(|(r, &t)| argmax(r.iter().copied()) == t)
            .count();
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -probs[[r, t]].to_f64().unwrap_or(0.0).max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / batch as f64;

        let mut delta = probs.clone();
        for (r, &t) in targets.iter().enumerate() {
            delta[[r, t]] = delta[[r, t]] - T::one();
        }
        delta.mapv_inplace(|v| v * scale);

        let mut grads = Vec::with_capacity(self.layers.len());
        for j in (0..self.layers.len()).rev() {
            let prev = if j == 0 { inputs } else { post[j - 1].view() };
            let grad_w = delta.t().dot(&prev);
            let grad_b = delta.sum_axis(Axis(0));
            if j > 0 {
                let mut back = delta.dot(&self.layers[j].weights);
                ndarray::Zip::from(&mut back).and(&pre[j - 1]).for_each(|b, &z| {
                    if z <= T::zero() {
                        *b = T::zero();
                    }
                });
                delta = back;
            }
            grads.push((grad_w, grad_b));
        }
        grads.reverse();
        Ok(BatchGradients { loss, correct, layers: grads })
    }

    /// Plain gradient step: `param -= learning_rate * grad`.
    pub fn apply_gradients(&mut self, grads: &[(Array2<T>, Array1<T>)], learning_rate: T) {
        for (layer, (gw, gb)) in self.layers.iter_mut().zip(grads) {
            layer.weights.scaled_add(-learning_rate, gw);
            layer.biases.scaled_add(-learning_rate, gb);
        }
    }
}

impl NetworkModel<f32> {
    pub fn forward(&self, image: &Image) -> Result<(PredictionResult, ActivationTrace)> {
        let input = input_matrix(std::slice::from_ref(image));
        let post = self.forward_batch(input.view())?;
        let probabilities: Vec<f64> = post[post.len() - 1].row(0).iter().map(|&v| f64::from(v)).collect();
        let best_class = argmax(probabilities.iter().copied());
        let trace = ActivationTrace::new(post.iter().map(|a| a.row(0).to_vec()).collect());
        Ok((PredictionResult { best_class, probabilities }, trace))
    }

    pub fn predict(&self, image: &Image) -> Result<usize> {
        Ok(self.forward(image)?.0.best_class)
    }

    /// Best class for every image, plus the activations of `layer` (1-based)
    /// as one row per image.
    pub fn predict_with_layer(&self, images: &[Image], layer: usize) -> Result<(Vec<usize>, Array2<f32>)> {
        if layer == 0 || layer > self.num_layers() {
            return Err(Error::Parameter(format!(
                "layer {layer} outside 1..={}",
                self.num_layers()
            )));
        }
        let width = self.layers[layer - 1].spec.output_size;
        let mut best = Vec::with_capacity(images.len());
        let mut acts = Array2::zeros((images.len(), width));
        for (chunk_idx, chunk) in images.chunks(BATCH_ROWS).enumerate() {
            let post = self.forward_batch(input_matrix(chunk).view())?;
            best.extend(post[post.len() - 1].rows().into_iter().map(|r| argmax(r.iter().copied())));
            let start = chunk_idx * BATCH_ROWS;
            acts.slice_mut(s![start..start + chunk.len(), ..]).assign(&post[layer - 1]);
        }
        Ok((best, acts))
    }

    pub fn predict_all(&self, images: &[Image]) -> Result<Vec<usize>> {
        let n = self.num_layers();
        Ok(self.predict_with_layer(images, n)?.0)
    }

    /// SHA-256 over the architecture and the little-endian parameter bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for l in &self.layers {
            h.update((l.spec.input_size as u64).to_le_bytes());
            h.update((l.spec.output_size as u64).to_le_bytes());
            h.update([l.spec.activation as u8]);
            h.update(f32_bytes(l.weights.iter()));
            h.update(f32_bytes(l.biases.iter()));
        }
        hex::encode(h.finalize())
    }
}

fn f32_bytes<'a>(values: impl Iterator<Item = &'a f32>) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub master_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig { epochs: 10, batch_size: 64, learning_rate: 0.05, master_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
}

/// Mini-batch SGD on softmax cross-entropy.
pub fn train(
    model: NetworkModel,
    data: &LabeledDataset,
    config: &TrainingConfig,
) -> Result<(NetworkModel, Vec<EpochStats>)> {
    train_with(model, data, config, |_, _| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
///
/// Epoch `e` shuffles with the child seed `shuffle-<e>` of the master seed.
pub fn train_with(
    mut model: NetworkModel,
    data: &LabeledDataset,
    config: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochStats, &NetworkModel),
) -> Result<(NetworkModel, Vec<EpochStats>)> {
    if config.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::Parameter("learning rate must be positive".into()));
    }
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let labels = data.class_labels()?;
    let inputs = input_matrix(data.images());
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 1..=config.epochs {
        let mut gen = rng::generator(rng::child_seed(config.master_seed, &format!("shuffle-{epoch}")));
        order.sort_unstable();
        order.shuffle(&mut gen);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            let x = inputs.select(Axis(0), batch);
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let step = model.loss_and_gradients(x.view(), &targets)?;
            if !step.loss.is_finite() {
                return Err(Error::Divergence { epoch, loss: step.loss });
            }
            correct += step.correct;
            loss_sum += step.loss * batch.len() as f64;
            model.apply_gradients(&step.layers, config.learning_rate);
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        };
        if !stats.mean_loss.is_finite()
            || model.layers.iter().any(|l| l.weights.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Divergence { epoch, loss: stats.mean_loss });
        }
        on_epoch(&stats, &model);
        log.push(stats);
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class_correct: Vec<usize>,
    pub per_class_total: Vec<usize>,
    pub predictions: Vec<usize>,
}

pub fn evaluate(model: &NetworkModel, data: &LabeledDataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let labels = data.class_labels()?;
    let predictions = model.predict_all(data.images())?;
    let k = model.num_classes();
    let mut per_class_correct = vec![0; k];
    let mut per_class_total = vec![0; k];
    for (&l, &p) in labels.iter().zip(&predictions) {
        if l >= k {
            return Err(Error::UnknownClass { class: l, num_classes: k });
        }
        per_class_total[l] += 1;
        if l == p {
            per_class_correct[l] += 1;
        }
    }
    let correct: usize = per_class_correct.iter().sum();
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        per_class_correct,
        per_class_total,
        predictions,
    })
}

#[derive(Serialize, Deserialize)]
struct LayerDocument {
    weights: String,
    biases: String,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    format: String,
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generator: Option<String>,
    seed: u64,
    architecture: Vec<LayerSpec>,
    layers: Vec<LayerDocument>,
}

fn decode_f32(text: &str, expected: usize) -> Result<Vec<f32>> {
    let bytes = BASE64.decode(text).map_err(|e| Error::Format(format!("bad base64: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Length { expected: expected * 4, found: bytes.len() });
    }
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

impl NetworkModel<f32> {
    /// Checkpoint document: JSON with base64 little-endian f32 arrays.
    pub fn to_document(&self, generator: Option<&str>) -> String {
        let doc = ModelDocument {
            format: FORMAT_NAME.into(),
            format_version: FORMAT_VERSION,
            generator: generator.map(str::to_string),
            seed: self.seed,
            architecture: self.architecture(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerDocument {
                    weights: BASE64.encode(f32_bytes(l.weights.iter())),
                    biases: BASE64.encode(f32_bytes(l.biases.iter())),
                })
                .collect(),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("model document serializes");
        text.push('\n');
        text
    }

    pub fn from_document(text: &str) -> Result<Self> {
        let probe: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("model file: {e}")))?;
        let version = probe.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| {
            Error::Format("model file lacks format_version".into())
        })?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(Error::Version { found: version as u32, supported: FORMAT_VERSION });
        }
        let doc: ModelDocument =
            serde_json::from_value(probe).map_err(|e| Error::Format(format!("model file: {e}")))?;
        if doc.format != FORMAT_NAME {
            return Err(Error::Format(format!("not a network checkpoint: {:?}", doc.format)));
        }
        if doc.architecture.len() != doc.layers.len() {
            return Err(Error::Format("architecture and layer count differ".into()));
        }
        let layers = doc
            .architecture
            .iter()
            .zip(&doc.layers)
            .map(|(&spec, l)| {
                let w = decode_f32(&l.weights, spec.input_size * spec.output_size)?;
                let b = decode_f32(&l.biases, spec.output_size)?;
                Ok(Layer {
                    spec,
                    weights: Array2::from_shape_vec((spec.output_size, spec.input_size), w)
                        .map_err(|e| Error::Format(e.to_string()))?,
                    biases: Array1::from(b),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        NetworkModel::from_layers(layers, doc.seed)
    }
}

pub fn save_model(model: &NetworkModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, model.to_document(None)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<NetworkModel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    NetworkModel::from_document(&text)
}
