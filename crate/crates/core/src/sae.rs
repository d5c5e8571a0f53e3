//! Supervised autoencoder MLP trained by mini-batch gradient descent.
//!
//! The encoder compresses the (noise-augmented) input into a bottleneck code. The
//! decoder reconstructs the clean input from the code alone, and the task head sees
//! the code concatenated with the input. Both parts are trained jointly on
//! `alpha * reconstruction_mse + (1 - alpha) * task_loss`.
//!
//! With `use_autoencoder = false` the encoder and decoder are dropped and the head is
//! a plain MLP on the input.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labeling::Label;
use crate::stats::population_std;

const LOG_EPS: f64 = 1e-12;
const FORMAT_MAGIC: &str = "tblsae-model";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// `x * sigmoid(x)`
    Swish,
    /// No nonlinearity; used for linear models and tests.
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Swish => z * sigmoid(z),
            Activation::Identity => z,
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Swish => {
                let s = sigmoid(z);
                s + z * s * (1.0 - s)
            }
            Activation::Identity => 1.0,
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    /// One linear output trained on squared error.
    Regression,
    /// Softmax over classes (-1, +1) trained on log-loss.
    Binary,
    /// Softmax over classes (-1, 0, +1) trained on log-loss.
    Ternary,
}

impl OutputMode {
    pub fn width(self) -> usize {
        match self {
            OutputMode::Regression => 1,
            OutputMode::Binary => 2,
            OutputMode::Ternary => 3,
        }
    }

    pub fn class_index(self, label: Label) -> Option<usize> {
        match (self, label) {
            (OutputMode::Binary, -1) => Some(0),
            (OutputMode::Binary, 1) => Some(1),
            (OutputMode::Ternary, -1..=1) => Some((label + 1) as usize),
            _ => None,
        }
    }

    pub fn class_label(self, index: usize) -> Label {
        match self {
            OutputMode::Binary => [-1, 1][index],
            _ => index as Label - 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeConfig {
    pub input_dim: usize,
    /// Bottleneck size as a fraction of `input_dim`, rounded, at least one unit.
    pub bottleneck_fraction: f64,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub classifier_layers: usize,
    /// Width of encoder/decoder hidden layers; defaults to `input_dim`.
    pub hidden_width: Option<usize>,
    /// Width of head hidden layers; defaults to the head's input width.
    pub classifier_width: Option<usize>,
    pub use_autoencoder: bool,
    pub activation: Activation,
    /// Noise standard deviation as a fraction of each feature's standard deviation.
    pub noise_rate: f64,
    /// Weight of the reconstruction loss.
    pub loss_mix: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub output_mode: OutputMode,
    pub optimizer: Optimizer,
}

impl Default for SaeConfig {
    fn default() -> Self {
        SaeConfig {
            input_dim: 1,
            bottleneck_fraction: 0.4,
            encoder_layers: 1,
            decoder_layers: 1,
            classifier_layers: 1,
            hidden_width: None,
            classifier_width: None,
            use_autoencoder: true,
            activation: Activation::Swish,
            noise_rate: 0.05,
            loss_mix: 0.5,
            epochs: 50,
            learning_rate: 0.01,
            batch_size: 32,
            seed: 0,
            output_mode: OutputMode::Ternary,
            optimizer: Optimizer::Sgd,
        }
    }
}

impl SaeConfig {
    pub fn bottleneck(&self) -> usize {
        ((self.bottleneck_fraction * self.input_dim as f64).round() as usize).max(1)
    }

    pub fn hidden(&self) -> usize {
        self.hidden_width.unwrap_or(self.input_dim)
    }

    fn head_input(&self) -> usize {
        if self.use_autoencoder {
            self.bottleneck() + self.input_dim
        } else {
            self.input_dim
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1".into());
        }
        if !(self.bottleneck_fraction > 0.0 && self.bottleneck_fraction <= 1.0) {
            return bad(format!("bottleneck_fraction {} outside (0, 1]", self.bottleneck_fraction));
        }
        if self.hidden_width == Some(0) || self.classifier_width == Some(0) {
            return bad("layer widths must be >= 1".into());
        }
        if !(self.noise_rate >= 0.0) || !self.noise_rate.is_finite() {
            return bad(format!("noise_rate must be >= 0, got {}", self.noise_rate));
        }
        if !(0.0..=1.0).contains(&self.loss_mix) {
            return bad(format!("loss_mix {} outside [0, 1]", self.loss_mix));
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        match self.optimizer {
            Optimizer::Sgd => {}
            Optimizer::Momentum { beta } if (0.0..1.0).contains(&beta) => {}
            Optimizer::Adam { beta1, beta2, eps }
                if (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0 => {}
            other => return bad(format!("invalid optimizer settings {other:?}")),
        }
        Ok(())
    }

    /// Effective reconstruction weight (zero without an autoencoder).
    fn recon_weight(&self) -> f64 {
        if self.use_autoencoder {
            self.loss_mix
        } else {
            0.0
        }
    }
}

/// Fully connected layer `z = x W + b` (W is `in x out`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        Dense {
            weights: Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng)),
            bias: Array1::zeros(fan_out),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Stack {
    layers: Vec<Dense>,
    activate_last: bool,
}

struct StackCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Stack {
    fn new(widths: &[usize], activate_last: bool, rng: &mut impl Rng) -> Self {
        Stack {
            layers: widths.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect(),
            activate_last,
        }
    }

    fn is_activated(&self, layer: usize) -> bool {
        layer + 1 < self.layers.len() || self.activate_last
    }

    fn forward(&self, x: ArrayView2<f64>, act: Activation) -> StackCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut current = x.to_owned();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = current.dot(&layer.weights) + &layer.bias;
            let a = if self.is_activated(i) { z.mapv(|v| act.apply(v)) } else { z.clone() };
            inputs.push(current);
            pre.push(z);
            current = a;
        }
        StackCache {
            inputs,
            pre,
            output: current,
        }
    }

    /// Returns per-layer gradients and the gradient with respect to the stack input.
    fn backward(&self, cache: &StackCache, d_out: Array2<f64>, act: Activation) -> (Vec<Dense>, Array2<f64>) {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_out;
        for i in (0..self.layers.len()).rev() {
            if self.is_activated(i) {
                delta.zip_mut_with(&cache.pre[i], |d, &z| *d *= act.derivative(z));
            }
            let dw = cache.inputs[i].t().dot(&delta);
            let db = delta.sum_axis(Axis(0));
            let d_in = delta.dot(&self.layers[i].weights.t());
            grads.push(Dense { weights: dw, bias: db });
            delta = d_in;
        }
        grads.reverse();
        (grads, delta)
    }
}

/// Per-epoch averages of the training loss and its two parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub total: f64,
    pub reconstruction: f64,
    pub task: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLoss>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    pub config: SaeConfig,
    encoder: Stack,
    decoder: Stack,
    head: Stack,
    pub log: TrainingLog,
}

/// Training targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Values(Vec<f64>),
    Labels(Vec<Label>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(v) => v.len(),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn subset(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Values(v) => Targets::Values(idx.iter().map(|&i| v[i]).collect()),
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

/// Output of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Empty (zero columns) when the model has no autoencoder.
    pub reconstruction: Array2<f64>,
    /// Raw value for regression, class probabilities otherwise.
    pub scores: Array2<f64>,
    /// Empty (zero columns) when the model has no autoencoder.
    pub codes: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub task: f64,
}

/// Parameter gradients laid out like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    encoder: Vec<Dense>,
    decoder: Vec<Dense>,
    head: Vec<Dense>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(self.encoder.iter().chain(&self.decoder).chain(&self.head))
    }
}

fn flatten_layers<'a>(layers: impl Iterator<Item = &'a Dense>) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter());
        out.extend(l.bias.iter());
    }
    out
}

struct Cache {
    encoder: Option<StackCache>,
    decoder: Option<StackCache>,
    head: StackCache,
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn check_width(batch: ArrayView2<f64>, dim: usize) -> Result<()> {
    if batch.ncols() != dim {
        return Err(Error::ShapeMismatch {
            expected: format!("{dim} feature columns"),
            actual: format!("{} columns", batch.ncols()),
        });
    }
    Ok(())
}

impl SaeModel {
    /// Glorot-uniform weights and zero biases drawn from stream 0 of the seed.
    pub fn init(config: &SaeConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(config.seed, 0);
        let d = config.input_dim;
        let k = config.bottleneck();
        let h = config.hidden();

        let (encoder, decoder) = if config.use_autoencoder {
            let mut enc = vec![d];
            enc.extend(std::iter::repeat_n(h, config.encoder_layers));
            enc.push(k);
            let mut dec = vec![k];
            dec.extend(std::iter::repeat_n(h, config.decoder_layers));
            dec.push(d);
            (Stack::new(&enc, true, &mut rng), Stack::new(&dec, false, &mut rng))
        } else {
            (
                Stack {
                    layers: vec![],
                    activate_last: true,
                },
                Stack {
                    layers: vec![],
                    activate_last: false,
                },
            )
        };
        let head_in = config.head_input();
        let cw = config.classifier_width.unwrap_or(head_in);
        let mut widths = vec![head_in];
        widths.extend(std::iter::repeat_n(cw, config.classifier_layers));
        widths.push(config.output_mode.width());
        let head = Stack::new(&widths, false, &mut rng);

        Ok(SaeModel {
            config: config.clone(),
            encoder,
            decoder,
            head,
            log: TrainingLog::default(),
        })
    }

    fn forward_cached(&self, x: ArrayView2<f64>) -> Cache {
        let act = self.config.activation;
        if !self.config.use_autoencoder {
            return Cache {
                encoder: None,
                decoder: None,
                head: self.head.forward(x, act),
            };
        }
        let enc = self.encoder.forward(x, act);
        let dec = self.decoder.forward(enc.output.view(), act);
        let head_in = concatenate![Axis(1), enc.output, x];
        let head = self.head.forward(head_in.view(), act);
        Cache {
            encoder: Some(enc),
            decoder: Some(dec),
            head,
        }
    }

    fn scores_from(&self, raw: &Array2<f64>) -> Array2<f64> {
        match self.config.output_mode {
            OutputMode::Regression => raw.clone(),
            _ => softmax_rows(raw),
        }
    }

    pub fn forward(&self, batch: ArrayView2<f64>) -> Result<ForwardOutput> {
        check_width(batch, self.config.input_dim)?;
        let cache = self.forward_cached(batch);
        let empty = Array2::zeros((batch.nrows(), 0));
        Ok(ForwardOutput {
            reconstruction: cache.decoder.as_ref().map_or(empty.clone(), |c| c.output.clone()),
            scores: self.scores_from(&cache.head.output),
            codes: cache.encoder.as_ref().map_or(empty, |c| c.output.clone()),
        })
    }

    /// Loss and parameter gradients for one batch. `input` feeds the network and may be
    /// noised; `clean` is the reconstruction target.
    pub fn loss_and_gradients(
        &self,
        input: ArrayView2<f64>,
        clean: ArrayView2<f64>,
        targets: &Targets,
    ) -> Result<(LossParts, Gradients)> {
        check_width(input, self.config.input_dim)?;
        check_width(clean, self.config.input_dim)?;
        if input.nrows() != targets.len() || clean.nrows() != input.nrows() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} rows", input.nrows()),
                actual: format!("{} targets / {} clean rows", targets.len(), clean.nrows()),
            });
        }
        let rows = input.nrows().max(1) as f64;
        let alpha = self.config.recon_weight();
        let act = self.config.activation;
        let cache = self.forward_cached(input);

        let (task, d_raw) = task_loss(self.config.output_mode, &cache.head.output, targets, rows)?;
        let d_raw = d_raw * (1.0 - alpha);

        let (head_grads, d_head_in) = self.head.backward(&cache.head, d_raw, act);

        let (recon, encoder, decoder) = match (&cache.encoder, &cache.decoder) {
            (Some(enc), Some(dec)) => {
                let diff = &dec.output - &clean;
                let count = diff.len().max(1) as f64;
                let recon = diff.iter().map(|v| v * v).sum::<f64>() / count;
                let d_recon = diff * (2.0 * alpha / count);
                let (dec_grads, d_code_dec) = self.decoder.backward(dec, d_recon, act);
                let k = enc.output.ncols();
                let d_code = d_code_dec + d_head_in.slice(s![.., ..k]);
                let (enc_grads, _) = self.encoder.backward(enc, d_code, act);
                (recon, enc_grads, dec_grads)
            }
            _ => (0.0, vec![], vec![]),
        };

        Ok((
            LossParts {
                total: alpha * recon + (1.0 - alpha) * task,
                reconstruction: recon,
                task,
            },
            Gradients {
                encoder,
                decoder,
                head: head_grads,
            },
        ))
    }

    /// Loss without gradients.
    pub fn loss(&self, input: ArrayView2<f64>, clean: ArrayView2<f64>, targets: &Targets) -> Result<LossParts> {
        Ok(self.loss_and_gradients(input, clean, targets)?.0)
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.layers.iter().chain(&self.decoder.layers).chain(&self.head.layers)
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder
            .layers
            .iter_mut()
            .chain(self.decoder.layers.iter_mut())
            .chain(self.head.layers.iter_mut())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters: encoder, decoder, then head; each layer's weights row-major,
    /// then its bias.
    pub fn parameters(&self) -> Vec<f64> {
        flatten_layers(self.layers())
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.parameter_count()),
                actual: format!("{}", flat.len()),
            });
        }
        let mut it = flat.iter();
        for l in self.layers_mut() {
            for w in l.weights.iter_mut() {
                *w = *it.next().expect("length checked");
            }
            for b in l.bias.iter_mut() {
                *b = *it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers()
            .all(|l| l.weights.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn predict(&self, features: ArrayView2<f64>) -> Result<Predictions> {
        check_width(features, self.config.input_dim)?;
        let out = self.forward(features)?;
        Ok(match self.config.output_mode {
            OutputMode::Regression => Predictions::Values(out.scores.column(0).to_vec()),
            OutputMode::Binary => Predictions::Labels(
                out.scores
                    .rows()
                    .into_iter()
                    .map(|r| if r[1] >= 0.5 { 1 } else { -1 })
                    .collect(),
            ),
            OutputMode::Ternary => Predictions::Labels(out.scores.rows().into_iter().map(|r| ternary_argmax(&[r[0], r[1], r[2]])).collect()),
        })
    }
}

/// Argmax over (-1, 0, +1) probabilities; ties go to 0, then to -1.
pub fn ternary_argmax(p: &[f64; 3]) -> Label {
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if p[1] == max {
        0
    } else if p[0] == max {
        -1
    } else {
        1
    }
}

fn task_loss(mode: OutputMode, raw: &Array2<f64>, targets: &Targets, rows: f64) -> Result<(f64, Array2<f64>)> {
    match (mode, targets) {
        (OutputMode::Regression, Targets::Values(y)) => {
            let mut grad = raw.clone();
            let mut loss = 0.0;
            for (i, g) in grad.column_mut(0).iter_mut().enumerate() {
                let diff = *g - y[i];
                loss += diff * diff;
                *g = 2.0 * diff / rows;
            }
            Ok((loss / rows, grad))
        }
        (OutputMode::Binary | OutputMode::Ternary, Targets::Labels(labels)) => {
            let probs = softmax_rows(raw);
            let mut grad = probs.clone();
            let mut loss = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                let c = mode.class_index(label).ok_or_else(|| {
                    Error::InvalidParameter(format!("label {label} is not a class of {mode:?} output"))
                })?;
                let p = probs[(i, c)];
                loss -= p.max(LOG_EPS).ln();
                let mut row = grad.row_mut(i);
                if p < LOG_EPS {
                    // clamped region: the loss is flat in the logits
                    row.fill(0.0);
                } else {
                    row[c] -= 1.0;
                    row.mapv_inplace(|v| v / rows);
                }
            }
            Ok((loss / rows, grad))
        }
        _ => Err(Error::InvalidParameter(format!("targets do not match output mode {mode:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Predictions {
    Values(Vec<f64>),
    Labels(Vec<Label>),
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Values(v) => v.len(),
            Predictions::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_f64(&self) -> Vec<f64> {
        match self {
            Predictions::Values(v) => v.clone(),
            Predictions::Labels(l) => l.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adds `Normal(0, (rate * std[j])^2)` noise to column `j`.
pub fn add_noise(features: ArrayView2<f64>, rate: f64, std: &[f64], seed: u64) -> Result<Array2<f64>> {
    add_noise_with(features, rate, std, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn add_noise_with(features: ArrayView2<f64>, rate: f64, std: &[f64], rng: &mut impl Rng) -> Result<Array2<f64>> {
    if !(rate >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise rate must be >= 0, got {rate}")));
    }
    if std.len() != features.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} standard deviations", features.ncols()),
            actual: format!("{}", std.len()),
        });
    }
    if std.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::InvalidParameter("feature standard deviations must be >= 0".into()));
    }
    let mut out = features.to_owned();
    if rate == 0.0 {
        return Ok(out);
    }
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    for mut row in out.rows_mut() {
        for (v, s) in row.iter_mut().zip(std) {
            *v += rate * s * unit.sample(rng);
        }
    }
    Ok(out)
}

struct OptimizerState {
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl OptimizerState {
    fn new(n: usize) -> Self {
        OptimizerState {
            step: 0,
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }

    fn apply(&mut self, optimizer: Optimizer, lr: f64, params: &mut [f64], grads: &[f64]) {
        self.step += 1;
        match optimizer {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            Optimizer::Momentum { beta } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    *v = beta * *v + g;
                    *p -= lr * *v;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

fn select_rows(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Trains a fresh model. Each epoch `e` draws its shuffle and its noise from stream
/// `e + 1` of the seed, so runs are reproducible bit for bit.
pub fn train(config: &SaeConfig, features: ArrayView2<f64>, targets: &Targets) -> Result<SaeModel> {
    let mut model = SaeModel::init(config)?;
    check_width(features, config.input_dim)?;
    let n = features.nrows();
    if n != targets.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{n} targets"),
            actual: format!("{}", targets.len()),
        });
    }
    if n == 0 {
        return Err(Error::Empty("no training rows".into()));
    }
    match (config.output_mode, targets) {
        (OutputMode::Regression, Targets::Values(v)) if v.iter().all(|x| x.is_finite()) => {}
        (OutputMode::Binary | OutputMode::Ternary, Targets::Labels(l))
            if l.iter().all(|&x| config.output_mode.class_index(x).is_some()) => {}
        _ => {
            return Err(Error::InvalidParameter(format!(
                "targets are not valid for {:?} output",
                config.output_mode
            )))
        }
    }

    let stds: Vec<f64> = features.columns().into_iter().map(|c| population_std(&c.to_vec())).collect();
    let mut params = model.parameters();
    let mut state = OptimizerState::new(params.len());
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 0..config.epochs {
        let mut rng = stream_rng(config.seed, epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let noisy = add_noise_with(features, config.noise_rate, &stds, &mut rng)?;

        let mut sums = [0.0f64; 3];
        for (batch, idx) in order.chunks(config.batch_size).enumerate() {
            let input = select_rows(noisy.view(), idx);
            let clean = select_rows(features, idx);
            let t = targets.subset(idx);
            let (loss, grads) = model.loss_and_gradients(input.view(), clean.view(), &t)?;
            let flat = grads.flatten();
            if !loss.total.is_finite() || flat.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { epoch, batch });
            }
            state.apply(config.optimizer, config.learning_rate, &mut params, &flat);
            model.set_parameters(&params)?;
            if !model.all_finite() {
                return Err(Error::NonFinite { epoch, batch });
            }
            let w = idx.len() as f64;
            sums[0] += loss.total * w;
            sums[1] += loss.reconstruction * w;
            sums[2] += loss.task * w;
        }
        model.log.epochs.push(EpochLoss {
            total: sums[0] / n as f64,
            reconstruction: sums[1] / n as f64,
            task: sums[2] / n as f64,
        });
    }
    Ok(model)
}

impl SaeModel {
    /// Text serialization: header, config as JSON, training log, then one block per
    /// tensor with values in shortest round-trip decimal form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FORMAT_MAGIC} v{FORMAT_VERSION}");
        let _ = writeln!(out, "config {}", serde_json::to_string(&self.config).expect("config serializes"));
        let _ = writeln!(out, "log {}", serde_json::to_string(&self.log).expect("log serializes"));
        let stacks = [("encoder", &self.encoder), ("decoder", &self.decoder), ("head", &self.head)];
        for (name, stack) in stacks {
            for (i, layer) in stack.layers.iter().enumerate() {
                let (r, c) = layer.weights.dim();
                let _ = writeln!(out, "tensor {name}.{i}.weights {r} {c}");
                for row in layer.weights.rows() {
                    let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                    let _ = writeln!(out, "{}", line.join(" "));
                }
                let _ = writeln!(out, "tensor {name}.{i}.bias 1 {}", layer.bias.len());
                let line: Vec<String> = layer.bias.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let fmt_err = |m: &str| Error::Format(m.to_string());
        let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
        let header = lines.next().ok_or_else(|| fmt_err("empty model file"))?;
        let version = header
            .strip_prefix(&format!("{FORMAT_MAGIC} v"))
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| fmt_err("missing model header"))?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let config_line = lines.next().and_then(|l| l.strip_prefix("config ")).ok_or_else(|| fmt_err("missing config"))?;
        let config: SaeConfig = serde_json::from_str(config_line).map_err(|e| Error::Format(e.to_string()))?;
        let log_line = lines.next().and_then(|l| l.strip_prefix("log ")).ok_or_else(|| fmt_err("missing log"))?;
        let log: TrainingLog = serde_json::from_str(log_line).map_err(|e| Error::Format(e.to_string()))?;

        let mut model = SaeModel::init(&config)?;
        model.log = log;
        let mut values = Vec::with_capacity(model.parameter_count());
        loop {
            let line = lines.next().ok_or_else(|| fmt_err("truncated model file"))?;
            if line == "end" {
                break;
            }
            let mut parts = line.split_whitespace();
            if parts.next() != Some("tensor") {
                return Err(Error::Format(format!("expected tensor header, found `{line}`")));
            }
            let _name = parts.next();
            let rows: usize = parts.next().and_then(|v| v.parse().ok()).ok_or_else(|| fmt_err("bad tensor rows"))?;
            for _ in 0..rows {
                let row = lines.next().ok_or_else(|| fmt_err("truncated tensor"))?;
                for v in row.split_whitespace() {
                    values.push(v.parse::<f64>().map_err(|_| Error::Format(format!("bad value `{v}`")))?);
                }
            }
        }
        model.set_parameters(&values)?;
        Ok(model)
    }

    /// Writes the model after `header`, which should be empty or `#` comment lines.
    pub fn save(&self, path: &Path, header: &str) -> Result<()> {
        crate::ingest::write_file(path, format!("{header}{}", self.to_text()).as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
