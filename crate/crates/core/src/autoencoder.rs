//! Fully connected autoencoder used to compress pose embeddings to an 8-wide
//! bottleneck before clustering.
//!
//! The encoder has four dense layers (`input -> 64 -> 32 -> 16 -> 8`) and the
//! decoder two (`8 -> 32 -> input`). Hidden layers use ReLU; the bottleneck
//! and the reconstruction are linear.
//!
//! Training minimizes
//!
//! ```text
//! loss = mse(decode(encode(x)), x) + lambda * contrastive
//! ```
//!
//! Inputs are standardized per feature with the mean and standard deviation
//! of the training corpus before entering the encoder, and the reconstruction
//! error is measured in that standardized space. Raw pose features mix unit
//! coordinates with ratios that saturate at the clamp, and without scaling the
//! ratios dominate both terms.
//!
//! where the contrastive term is a temperature-scaled cross entropy over
//! cosine similarities of bottleneck codes. Each row's positive is the code of
//! a jittered copy of the row; the negatives are the clean codes of every
//! other row in the batch. Gradients are derived by hand and reduced over
//! fixed 64-row chunks, so results do not depend on the thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::PoseEmbedding;
use crate::matrix::{dot, Matrix};

pub const BOTTLENECK: usize = 8;
pub const ENCODER_LAYERS: usize = 4;
pub const DECODER_LAYERS: usize = 2;

/// Rows per gradient chunk. Chunk partial sums are added in index order.
const CHUNK_ROWS: usize = 64;
/// Smooths the norm used for cosine similarity so zero codes stay differentiable.
const NORM_EPS: f64 = 1e-8;
/// Standard deviations at or below this count as constant features.
const MIN_INPUT_SCALE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutoencoderError {
    #[error("input dimension {0} must exceed the bottleneck width {BOTTLENECK}")]
    InputTooSmall(usize),
    #[error("invalid layer stack: {0}")]
    InvalidLayers(String),
    #[error("dimension mismatch: model expects {expected}, got {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("need at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparams(String),
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("non-finite loss ({0})")]
    NonFiniteLoss(&'static str),
    #[error("training diverged in epoch {epoch} (last good epoch: {last_good:?}): {cause}")]
    Diverged { epoch: usize, last_good: Option<usize>, cause: Box<AutoencoderError> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Row-major `out_dim x in_dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Dense { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    fn forward(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let w = &self.weights[o * self.in_dim..(o + 1) * self.in_dim];
            out.push(dot(w, input) + self.bias[o]);
        }
    }
}

/// Hidden layer widths; the bottleneck is always [`BOTTLENECK`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderShape {
    pub encoder_hidden: [usize; 3],
    pub decoder_hidden: usize,
}

impl Default for AutoencoderShape {
    fn default() -> Self {
        AutoencoderShape { encoder_hidden: [64, 32, 16], decoder_hidden: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderModel {
    pub input_dim: usize,
    /// The encoder sees `(x - input_shift) / input_scale`.
    pub input_shift: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// Encoder layers followed by decoder layers.
    pub layers: Vec<Dense>,
    pub config_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducedEmbedding {
    pub image_id: String,
    pub product_id: String,
    pub vector: Vec<f64>,
    pub is_no_pose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingHyperparams {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub final_learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub contrastive_weight: f64,
    pub jitter_sigma: f64,
    pub seed: u64,
}

impl Default for TrainingHyperparams {
    fn default() -> Self {
        TrainingHyperparams {
            batch_size: 2048,
            learning_rate: 0.01,
            final_learning_rate: 0.001,
            weight_decay: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 50,
            temperature: 0.5,
            contrastive_weight: 1.0,
            jitter_sigma: 0.01,
            seed: 0,
        }
    }
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<(), AutoencoderError> {
        let bad = |m: &str| Err(AutoencoderError::InvalidHyperparams(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.final_learning_rate >= 0.0 && self.final_learning_rate <= self.learning_rate) {
            return bad("final_learning_rate must lie in [0, learning_rate]");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.weight_decay >= 0.0 && self.contrastive_weight >= 0.0 && self.jitter_sigma >= 0.0) {
            return bad("weight_decay, contrastive_weight and jitter_sigma must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        Ok(())
    }

    /// Cosine decay from `learning_rate` at step 0 towards `final_learning_rate`.
    pub fn learning_rate_at(&self, step: usize, total_steps: usize) -> f64 {
        if total_steps <= 1 {
            return self.learning_rate;
        }
        let progress = step as f64 / total_steps as f64;
        self.final_learning_rate
            + 0.5
                * (self.learning_rate - self.final_learning_rate)
                * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Parameter-shaped gradient buffers: `(weights, bias)` per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Gradients {
    fn zeros_like(model: &AutoencoderModel) -> Self {
        Gradients {
            layers: model
                .layers
                .iter()
                .map(|l| (vec![0.0; l.weights.len()], vec![0.0; l.bias.len()]))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Gradients) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.iter_mut().zip(ow).for_each(|(a, o)| *a += o);
            b.iter_mut().zip(ob).for_each(|(a, o)| *a += o);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub reconstruction: f64,
    pub contrastive: f64,
}

/// Forward pass record: pre-activations and outputs per layer.
struct Trace {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl Trace {
    fn output(&self) -> &[f64] {
        self.post.last().map_or(&self.input, |v| v)
    }
}

fn is_relu(layer: usize) -> bool {
    // Linear at the bottleneck (last encoder layer) and at the reconstruction.
    layer != ENCODER_LAYERS - 1 && layer != ENCODER_LAYERS + DECODER_LAYERS - 1
}

impl AutoencoderModel {
    fn identity_scaled(input_dim: usize, layers: Vec<Dense>) -> Self {
        AutoencoderModel {
            input_dim,
            input_shift: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
            layers,
            config_fingerprint: String::new(),
        }
    }

    /// Sets the input scaling to the per-feature mean and population standard
    /// deviation of `corpus`. Features with no spread keep a scale of 1.
    pub fn fit_input_scaling(&mut self, corpus: &Matrix) -> Result<(), AutoencoderError> {
        self.check_dim(corpus.cols())?;
        let n = corpus.rows();
        if n == 0 {
            return Err(AutoencoderError::TooFewRows(0));
        }
        for j in 0..self.input_dim {
            let mean = corpus.iter_rows().map(|r| r[j]).sum::<f64>() / n as f64;
            let var = corpus.iter_rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
            let sd = var.sqrt();
            self.input_shift[j] = mean;
            self.input_scale[j] = if sd > MIN_INPUT_SCALE { sd } else { 1.0 };
        }
        Ok(())
    }

    fn scale_input(&self, input: &[f64]) -> Vec<f64> {
        input.iter().zip(&self.input_shift).zip(&self.input_scale).map(|((x, m), s)| (x - m) / s).collect()
    }

    fn scale_matrix(&self, data: &Matrix) -> Matrix {
        let mut out = data.clone();
        for r in 0..out.rows() {
            let scaled = self.scale_input(data.row(r));
            out.row_mut(r).copy_from_slice(&scaled);
        }
        out
    }

    /// Builds the default shape with fan-in scaled uniform weights and zero
    /// biases, drawn from a generator seeded with `seed`.
    pub fn init(input_dim: usize, seed: u64) -> Result<Self, AutoencoderError> {
        Self::init_with_shape(input_dim, AutoencoderShape::default(), seed)
    }

    pub fn init_with_shape(
        input_dim: usize,
        shape: AutoencoderShape,
        seed: u64,
    ) -> Result<Self, AutoencoderError> {
        if input_dim <= BOTTLENECK {
            return Err(AutoencoderError::InputTooSmall(input_dim));
        }
        if shape.encoder_hidden.contains(&0) || shape.decoder_hidden == 0 {
            return Err(AutoencoderError::InvalidLayers("hidden widths must be positive".into()));
        }
        let [h1, h2, h3] = shape.encoder_hidden;
        let dims = [
            (input_dim, h1),
            (h1, h2),
            (h2, h3),
            (h3, BOTTLENECK),
            (BOTTLENECK, shape.decoder_hidden),
            (shape.decoder_hidden, input_dim),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .iter()
            .map(|&(i, o)| {
                let bound = 1.0 / (i as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let mut layer = Dense::zeros(i, o);
                layer.weights.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
                layer
            })
            .collect();
        Ok(AutoencoderModel::identity_scaled(input_dim, layers))
    }

    /// Assembles a model from explicit layers, checking the stack shape.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, AutoencoderError> {
        let invalid = |m: String| Err(AutoencoderError::InvalidLayers(m));
        if layers.len() != ENCODER_LAYERS + DECODER_LAYERS {
            return invalid(format!("expected {} layers, got {}", ENCODER_LAYERS + DECODER_LAYERS, layers.len()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return invalid(format!("layer {i} buffers do not match {}x{}", l.out_dim, l.in_dim));
            }
            if i > 0 && layers[i - 1].out_dim != l.in_dim {
                return invalid(format!("layer {i} input {} does not chain from {}", l.in_dim, layers[i - 1].out_dim));
            }
        }
        if layers[ENCODER_LAYERS - 1].out_dim != BOTTLENECK {
            return invalid(format!("bottleneck must be {BOTTLENECK} wide"));
        }
        let input_dim = layers[0].in_dim;
        if layers[ENCODER_LAYERS + DECODER_LAYERS - 1].out_dim != input_dim {
            return invalid("decoder output must match the input width".into());
        }
        Ok(AutoencoderModel::identity_scaled(input_dim, layers))
    }

    pub fn encoder_dims(&self) -> Vec<(usize, usize)> {
        self.layers[..ENCODER_LAYERS].iter().map(|l| (l.in_dim, l.out_dim)).collect()
    }

    pub fn decoder_dims(&self) -> Vec<(usize, usize)> {
        self.layers[ENCODER_LAYERS..].iter().map(|l| (l.in_dim, l.out_dim)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.input_shift.iter().chain(&self.input_scale).all(|v| v.is_finite())
            && self
                .layers
                .iter()
                .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    fn trace(&self, range: std::ops::Range<usize>, input: &[f64]) -> Result<Trace, AutoencoderError> {
        let mut trace = Trace { input: input.to_vec(), pre: Vec::new(), post: Vec::new() };
        for li in range {
            let mut z = Vec::new();
            self.layers[li].forward(trace.output(), &mut z);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(AutoencoderError::NonFiniteActivation { layer: li });
            }
            let a = if is_relu(li) { z.iter().map(|&v| v.max(0.0)).collect() } else { z.clone() };
            trace.pre.push(z);
            trace.post.push(a);
        }
        Ok(trace)
    }

    /// Back-propagates `grad_out` through the layers recorded in `trace`
    /// (which started at layer `first`), accumulating parameter gradients.
    fn backward(&self, first: usize, trace: &Trace, mut grad: Vec<f64>, grads: &mut Gradients) -> Vec<f64> {
        for k in (0..trace.pre.len()).rev() {
            let li = first + k;
            let layer = &self.layers[li];
            if is_relu(li) {
                for (g, &z) in grad.iter_mut().zip(&trace.pre[k]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input: &[f64] = if k == 0 { &trace.input } else { &trace.post[k - 1] };
            let (gw, gb) = &mut grads.layers[li];
            let mut grad_in = vec![0.0; layer.in_dim];
            for o in 0..layer.out_dim {
                let g = grad[o];
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                let row = o * layer.in_dim;
                for i in 0..layer.in_dim {
                    gw[row + i] += g * input[i];
                    grad_in[i] += g * layer.weights[row + i];
                }
            }
            grad = grad_in;
        }
        grad
    }

    fn check_dim(&self, found: usize) -> Result<(), AutoencoderError> {
        if found != self.input_dim {
            return Err(AutoencoderError::DimMismatch { expected: self.input_dim, found });
        }
        Ok(())
    }

    pub fn encode_vector(&self, input: &[f64]) -> Result<Vec<f64>, AutoencoderError> {
        self.check_dim(input.len())?;
        Ok(self.trace(0..ENCODER_LAYERS, &self.scale_input(input))?.output().to_vec())
    }

    pub fn decode_vector(&self, code: &[f64]) -> Result<Vec<f64>, AutoencoderError> {
        if code.len() != BOTTLENECK {
            return Err(AutoencoderError::DimMismatch { expected: BOTTLENECK, found: code.len() });
        }
        let out = self.trace(ENCODER_LAYERS..self.layers.len(), code)?;
        Ok(out.output().iter().zip(&self.input_shift).zip(&self.input_scale).map(|((y, m), s)| y * s + m).collect())
    }

    pub fn encode(&self, embedding: &PoseEmbedding) -> Result<ReducedEmbedding, AutoencoderError> {
        Ok(ReducedEmbedding {
            image_id: embedding.image_id.clone(),
            product_id: embedding.product_id.clone(),
            vector: self.encode_vector(&embedding.vector)?,
            is_no_pose: embedding.is_no_pose,
        })
    }

    pub fn encode_matrix(&self, data: &Matrix) -> Result<Matrix, AutoencoderError> {
        self.check_dim(data.cols())?;
        let rows = data
            .iter_rows()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|r| self.encode_vector(r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Matrix::from_rows(&rows).unwrap_or_else(|| Matrix::zeros(0, BOTTLENECK)))
    }

    /// Smallest |pre-activation| over every ReLU unit touched when evaluating
    /// the loss on `batch` at `step`. Finite-difference checks need this to be
    /// well above the probe step so no unit changes side.
    pub fn relu_margin(&self, batch: &Matrix, hyper: &TrainingHyperparams, step: u64) -> Result<f64, AutoencoderError> {
        self.check_dim(batch.cols())?;
        let jittered = self.scale_matrix(&jitter(batch, hyper, step));
        let batch = &self.scale_matrix(batch);
        let mut margin = f64::INFINITY;
        for r in 0..batch.rows() {
            let mut traces = vec![self.trace(0..self.layers.len(), batch.row(r))?];
            if hyper.contrastive_weight > 0.0 {
                traces.push(self.trace(0..ENCODER_LAYERS, jittered.row(r))?);
            }
            for t in &traces {
                for (li, z) in t.pre.iter().enumerate() {
                    if is_relu(li) {
                        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
                    }
                }
            }
        }
        Ok(margin)
    }

    /// Loss on one batch and its exact gradient.
    ///
    /// `batch` holds raw features; jitter is drawn on them and both copies are
    /// then standardized. `step` selects the jitter draw, so the loss is a
    /// deterministic function of the parameters for a fixed `(hyper.seed, step)`.
    pub fn loss_and_gradients(
        &self,
        batch: &Matrix,
        hyper: &TrainingHyperparams,
        step: u64,
    ) -> Result<(LossBreakdown, Gradients), AutoencoderError> {
        self.check_dim(batch.cols())?;
        let n = batch.rows();
        if n < 2 {
            return Err(AutoencoderError::TooFewRows(n));
        }
        let lambda = hyper.contrastive_weight;
        let use_contrastive = lambda > 0.0;
        let jittered =
            if use_contrastive { self.scale_matrix(&jitter(batch, hyper, step)) } else { Matrix::zeros(0, batch.cols()) };
        let batch = &self.scale_matrix(batch);
        let all_layers = 0..self.layers.len();

        // Forward passes, chunked so the reduction order is fixed.
        let starts: Vec<usize> = (0..n).step_by(CHUNK_ROWS).collect();
        type RowPasses = (Trace, Option<Trace>, f64);
        let forward: Vec<Vec<RowPasses>> = starts
            .par_iter()
            .map(|&s| {
                (s..(s + CHUNK_ROWS).min(n))
                    .map(|r| {
                        let x = batch.row(r);
                        let clean = self.trace(all_layers.clone(), x)?;
                        let sq: f64 = clean.output().iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                        let noisy = if use_contrastive {
                            Some(self.trace(0..ENCODER_LAYERS, jittered.row(r))?)
                        } else {
                            None
                        };
                        Ok((clean, noisy, sq))
                    })
                    .collect::<Result<Vec<_>, AutoencoderError>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        let rows: Vec<&RowPasses> = forward.iter().flatten().collect();

        let mse_scale = 1.0 / (n * batch.cols()) as f64;
        let reconstruction = rows.iter().map(|r| r.2).sum::<f64>() * mse_scale;
        if !reconstruction.is_finite() {
            return Err(AutoencoderError::NonFiniteLoss("reconstruction"));
        }

        let (contrastive, code_grads, noisy_grads) = if use_contrastive {
            let codes: Vec<&[f64]> = rows.iter().map(|r| &r.0.post[ENCODER_LAYERS - 1][..]).collect();
            let noisy: Vec<&[f64]> =
                rows.iter().map(|r| r.1.as_ref().expect("noisy pass").output()).collect();
            let (c, gz, gzn) = contrastive_loss(&codes, &noisy, hyper.temperature);
            if !c.is_finite() {
                return Err(AutoencoderError::NonFiniteLoss("contrastive"));
            }
            (c, gz, gzn)
        } else {
            (0.0, Vec::new(), Vec::new())
        };

        let partials: Vec<Gradients> = starts
            .par_iter()
            .map(|&s| {
                let mut g = Gradients::zeros_like(self);
                for r in s..(s + CHUNK_ROWS).min(n) {
                    let (clean, noisy, _) = rows[r];
                    let x = batch.row(r);
                    let grad_out: Vec<f64> =
                        clean.output().iter().zip(x).map(|(a, b)| 2.0 * (a - b) * mse_scale).collect();
                    // Decoder first, then inject the contrastive gradient at the code.
                    let dec = Trace {
                        input: clean.post[ENCODER_LAYERS - 1].clone(),
                        pre: clean.pre[ENCODER_LAYERS..].to_vec(),
                        post: clean.post[ENCODER_LAYERS..].to_vec(),
                    };
                    let mut grad_code = self.backward(ENCODER_LAYERS, &dec, grad_out, &mut g);
                    let enc = Trace {
                        input: clean.input.clone(),
                        pre: clean.pre[..ENCODER_LAYERS].to_vec(),
                        post: clean.post[..ENCODER_LAYERS].to_vec(),
                    };
                    if use_contrastive {
                        for (gc, c) in grad_code.iter_mut().zip(&code_grads[r]) {
                            *gc += lambda * c;
                        }
                    }
                    self.backward(0, &enc, grad_code, &mut g);
                    if let Some(noisy) = noisy {
                        let gn: Vec<f64> = noisy_grads[r].iter().map(|v| lambda * v).collect();
                        self.backward(0, noisy, gn, &mut g);
                    }
                }
                g
            })
            .collect();
        let mut grads = Gradients::zeros_like(self);
        for p in &partials {
            grads.add_assign(p);
        }

        let total = reconstruction + lambda * contrastive;
        Ok((LossBreakdown { total, reconstruction, contrastive }, grads))
    }
}

/// Deterministic Gaussian jitter of a batch for a given training step.
fn jitter(batch: &Matrix, hyper: &TrainingHyperparams, step: u64) -> Matrix {
    let mut out = batch.clone();
    if hyper.jitter_sigma == 0.0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    rng.set_stream(step.wrapping_add(1));
    let normal = Normal::new(0.0, hyper.jitter_sigma).expect("sigma is finite and non-negative");
    for v in out.as_mut_slice() {
        *v += normal.sample(&mut rng);
    }
    out
}

fn smooth_norm(v: &[f64]) -> f64 {
    (dot(v, v) + NORM_EPS * NORM_EPS).sqrt()
}

/// Gradient of `u = v / |v|` pulled back to `v`.
fn unit_pullback(v: &[f64], norm: f64, grad_u: &[f64]) -> Vec<f64> {
    let proj = dot(v, grad_u) / (norm * norm * norm);
    v.iter().zip(grad_u).map(|(vi, g)| g / norm - vi * proj).collect()
}

/// Mean temperature-scaled cross entropy; returns the loss and its gradient
/// with respect to the clean and jittered codes.
fn contrastive_loss(codes: &[&[f64]], noisy: &[&[f64]], temperature: f64) -> (f64, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let n = codes.len();
    let dim = codes[0].len();
    let norms: Vec<f64> = codes.iter().map(|c| smooth_norm(c)).collect();
    let noisy_norms: Vec<f64> = noisy.iter().map(|c| smooth_norm(c)).collect();
    let units: Vec<Vec<f64>> = codes.iter().zip(&norms).map(|(c, n)| c.iter().map(|v| v / n).collect()).collect();
    let noisy_units: Vec<Vec<f64>> =
        noisy.iter().zip(&noisy_norms).map(|(c, n)| c.iter().map(|v| v / n).collect()).collect();

    // Row i: softmax over [positive, negatives j != i]. neg_probs[i][j] is 0 on the diagonal.
    let rows: Vec<(f64, f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let pos = dot(&units[i], &noisy_units[i]) / temperature;
            let logits: Vec<f64> = (0..n)
                .map(|j| if j == i { f64::NEG_INFINITY } else { dot(&units[i], &units[j]) / temperature })
                .collect();
            let max = logits.iter().copied().fold(pos, f64::max);
            let pos_exp = (pos - max).exp();
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let denom = pos_exp + exps.iter().sum::<f64>();
            let loss = denom.ln() + max - pos;
            (loss, pos_exp / denom, exps.iter().map(|e| e / denom).collect())
        })
        .collect();

    let scale = 1.0 / (n as f64 * temperature);
    let loss = rows.iter().map(|r| r.0).sum::<f64>() / n as f64;
    let grad_codes: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut gu = vec![0.0; dim];
            let pos_coef = rows[i].1 - 1.0;
            for d in 0..dim {
                gu[d] = pos_coef * noisy_units[i][d];
            }
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = rows[i].2[j] + rows[j].2[i];
                for d in 0..dim {
                    gu[d] += w * units[j][d];
                }
            }
            gu.iter_mut().for_each(|g| *g *= scale);
            unit_pullback(codes[i], norms[i], &gu)
        })
        .collect();
    let grad_noisy: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let coef = (rows[i].1 - 1.0) * scale;
            let gu: Vec<f64> = units[i].iter().map(|u| coef * u).collect();
            unit_pullback(noisy[i], noisy_norms[i], &gu)
        })
        .collect();
    (loss, grad_codes, grad_noisy)
}

/// AdamW with decoupled weight decay applied to every parameter.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Gradients,
    v: Gradients,
}

impl AdamW {
    pub fn new(model: &AutoencoderModel, hyper: &TrainingHyperparams) -> Self {
        AdamW {
            beta1: hyper.beta1,
            beta2: hyper.beta2,
            eps: hyper.adam_eps,
            weight_decay: hyper.weight_decay,
            step: 0,
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
        }
    }

    pub fn step(&mut self, model: &mut AutoencoderModel, grads: &Gradients, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        let decay = 1.0 - lr * self.weight_decay;
        for (li, layer) in model.layers.iter_mut().enumerate() {
            let (gw, gb) = &grads.layers[li];
            let (mw, mb) = &mut self.m.layers[li];
            let (vw, vb) = &mut self.v.layers[li];
            for (params, g, m, v) in [
                (&mut layer.weights, gw, mw, vw),
                (&mut layer.bias, gb, mb, vb),
            ] {
                for i in 0..params.len() {
                    params[i] *= decay;
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
                }
            }
        }
    }
}

/// Trains with seeded shuffling and a cosine learning-rate schedule.
///
/// Returns the trained model and the row-weighted mean loss of each epoch.
pub fn train_autoencoder(
    mut model: AutoencoderModel,
    corpus: &Matrix,
    hyper: &TrainingHyperparams,
) -> Result<(AutoencoderModel, Vec<f64>), AutoencoderError> {
    hyper.validate()?;
    model.check_dim(corpus.cols())?;
    let n = corpus.rows();
    if n < 2 {
        return Err(AutoencoderError::TooFewRows(n));
    }
    model.fit_input_scaling(corpus)?;
    let batch_size = hyper.batch_size.min(n);
    let mut batches_per_epoch = n.div_ceil(batch_size);
    if n % batch_size == 1 {
        // A trailing single row joins the previous batch.
        batches_per_epoch -= 1;
    }
    let total_steps = hyper.epochs * batches_per_epoch;

    let mut order: Vec<usize> = (0..n).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut opt = AdamW::new(&model, hyper);
    let mut trace = Vec::with_capacity(hyper.epochs);
    let mut step = 0usize;
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut weighted = 0.0;
        for b in 0..batches_per_epoch {
            let start = b * batch_size;
            let end = if b + 1 == batches_per_epoch { n } else { start + batch_size };
            let batch = corpus.select_rows(&order[start..end]);
            let diverged = |cause| AutoencoderError::Diverged {
                epoch,
                last_good: epoch.checked_sub(1),
                cause: Box::new(cause),
            };
            let (loss, grads) = model.loss_and_gradients(&batch, hyper, step as u64).map_err(diverged)?;
            opt.step(&mut model, &grads, hyper.learning_rate_at(step, total_steps));
            if !model.is_finite() {
                return Err(diverged(AutoencoderError::NonFiniteLoss("weights")));
            }
            weighted += loss.total * (end - start) as f64;
            step += 1;
        }
        let epoch_loss = weighted / n as f64;
        log::debug!("autoencoder epoch {epoch}: loss {epoch_loss:.6}");
        trace.push(epoch_loss);
    }
    Ok((model, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn init_is_deterministic_with_expected_shapes() {
        let a = AutoencoderModel::init(61, 7).unwrap();
        let b = AutoencoderModel::init(61, 7).unwrap();
        assert_eq!(a, b);
        let m = AutoencoderModel::init(77, 7).unwrap();
        assert_eq!(m.encoder_dims(), vec![(77, 64), (64, 32), (32, 16), (16, 8)]);
        assert_eq!(m.decoder_dims(), vec![(8, 32), (32, 77)]);
        assert!(AutoencoderModel::init(4, 1).is_err());
        assert!(AutoencoderModel::init(8, 1).is_err());
        assert_ne!(AutoencoderModel::init(61, 8).unwrap(), a);
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let m = AutoencoderModel::init(61, 3).unwrap();
        for l in &m.layers {
            let bound = 1.0 / (l.in_dim as f64).sqrt();
            assert!(l.weights.iter().all(|w| w.abs() <= bound));
            assert!(l.bias.iter().all(|b| *b == 0.0));
        }
    }

    #[test]
    fn from_layers_validates_stack() {
        let m = AutoencoderModel::init(12, 1).unwrap();
        assert!(AutoencoderModel::from_layers(m.layers.clone()).is_ok());
        let mut short = m.layers.clone();
        short.pop();
        assert!(AutoencoderModel::from_layers(short).is_err());
        let mut broken = m.layers.clone();
        broken[2].bias.push(0.0);
        assert!(AutoencoderModel::from_layers(broken).is_err());
    }

    /// Model whose last decoder layer is all zeros, so it reconstructs zeros.
    fn zero_output_model(input_dim: usize) -> AutoencoderModel {
        let dims = [(input_dim, 3), (3, 3), (3, 3), (3, 8), (8, 2), (2, input_dim)];
        let layers = dims
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| {
                let mut l = Dense::zeros(a, b);
                if i < 5 {
                    l.weights.iter_mut().enumerate().for_each(|(k, w)| *w = 0.01 * (k % 3) as f64);
                }
                l
            })
            .collect();
        AutoencoderModel::from_layers(layers).unwrap()
    }

    #[test]
    fn zero_decoder_loss_is_mean_square_of_input() {
        let model = zero_output_model(4);
        let batch = Matrix::from_rows(&[[1.0, 2.0, -1.0, 0.5], [1.0, 2.0, -1.0, 0.5]]).unwrap();
        let hyper = TrainingHyperparams { contrastive_weight: 0.0, ..Default::default() };
        let (loss, _) = model.loss_and_gradients(&batch, &hyper, 0).unwrap();
        // (1 + 4 + 1 + 0.25) per row, 8 entries in total.
        assert!((loss.total - 12.5 / 8.0).abs() < 1e-15);
        assert_eq!(loss.contrastive, 0.0);
    }

    #[test]
    fn lambda_zero_matches_plain_reconstruction_gradients() {
        let model = AutoencoderModel::init(10, 5).unwrap();
        let batch = random_matrix(5, 10, 2);
        let plain = TrainingHyperparams { contrastive_weight: 0.0, ..Default::default() };
        let (l0, g0) = model.loss_and_gradients(&batch, &plain, 3).unwrap();
        // Same reconstruction with a different jitter draw still gives identical gradients.
        let other = TrainingHyperparams { contrastive_weight: 0.0, seed: 99, ..Default::default() };
        let (l1, g1) = model.loss_and_gradients(&batch, &other, 11).unwrap();
        assert_eq!(l0, l1);
        assert_eq!(g0, g1);
        let with = TrainingHyperparams::default();
        let (l2, _) = model.loss_and_gradients(&batch, &with, 3).unwrap();
        assert_eq!(l2.reconstruction, l0.reconstruction);
        assert!(l2.contrastive > 0.0);
    }

    fn finite_difference_check(model: &AutoencoderModel, batch: &Matrix, hyper: &TrainingHyperparams) -> f64 {
        let h = 1e-5;
        let (_, grads) = model.loss_and_gradients(batch, hyper, 0).unwrap();
        let mut worst: f64 = 0.0;
        for li in 0..model.layers.len() {
            for which in 0..2 {
                let len = if which == 0 { model.layers[li].weights.len() } else { model.layers[li].bias.len() };
                for i in 0..len {
                    let eval = |delta: f64| {
                        let mut m = model.clone();
                        let p = if which == 0 { &mut m.layers[li].weights } else { &mut m.layers[li].bias };
                        p[i] += delta;
                        m.loss_and_gradients(batch, hyper, 0).unwrap().0.total
                    };
                    let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                    let analytic = if which == 0 { grads.layers[li].0[i] } else { grads.layers[li].1[i] };
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    worst = worst.max(rel);
                }
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shape = AutoencoderShape { encoder_hidden: [7, 6, 5], decoder_hidden: 6 };
        let hyper = TrainingHyperparams { jitter_sigma: 0.05, ..Default::default() };
        let mut checked = 0;
        for seed in 0..40 {
            let mut model = AutoencoderModel::init_with_shape(10, shape, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
            for l in model.layers.iter_mut() {
                l.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.2..0.2));
            }
            let batch = random_matrix(3, 10, seed);
            if model.relu_margin(&batch, &hyper, 0).unwrap() < 1e-3 {
                continue;
            }
            let worst = finite_difference_check(&model, &batch, &hyper);
            assert!(worst < 1e-4, "seed {seed}: relative error {worst}");
            checked += 1;
            if checked == 3 {
                break;
            }
        }
        assert_eq!(checked, 3);
    }

    #[test]
    fn adamw_pure_decay_with_zero_gradient() {
        let mut model = AutoencoderModel::init(10, 1).unwrap();
        let before = model.clone();
        let hyper = TrainingHyperparams::default();
        let mut opt = AdamW::new(&model, &hyper);
        let zero = Gradients::zeros_like(&model);
        opt.step(&mut model, &zero, 0.1);
        let factor = 1.0 - 0.1 * 0.001;
        for (a, b) in model.layers.iter().zip(&before.layers) {
            for (w, w0) in a.weights.iter().zip(&b.weights) {
                assert_eq!(*w, w0 * factor);
            }
        }
        let mut frozen = before.clone();
        AdamW::new(&frozen, &hyper).step(&mut frozen, &zero, 0.0);
        assert_eq!(frozen, before);
    }

    #[test]
    fn encode_shapes_and_sentinel() {
        let model = AutoencoderModel::init(61, 2).unwrap();
        let e = PoseEmbedding { image_id: "a".into(), product_id: "p".into(), vector: vec![0.3; 61], is_no_pose: false };
        let r = model.encode(&e).unwrap();
        assert_eq!(r.vector.len(), 8);
        assert_eq!(model.encode(&e).unwrap(), r);
        assert_eq!(model.decode_vector(&r.vector).unwrap().len(), 61);
        let z1 = PoseEmbedding { image_id: "z1".into(), product_id: "p".into(), vector: vec![0.0; 61], is_no_pose: true };
        let z2 = PoseEmbedding { image_id: "z2".into(), ..z1.clone() };
        let (a, b) = (model.encode(&z1).unwrap(), model.encode(&z2).unwrap());
        assert_eq!(a.vector, b.vector);
        assert!(a.is_no_pose);
        let short = PoseEmbedding { vector: vec![0.0; 60], ..e };
        assert!(matches!(model.encode(&short), Err(AutoencoderError::DimMismatch { .. })));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let corpus = random_matrix(64, 10, 9);
        let hyper = TrainingHyperparams { epochs: 20, batch_size: 32, seed: 4, ..Default::default() };
        let model = AutoencoderModel::init(10, 4).unwrap();
        let (trained, trace) = train_autoencoder(model.clone(), &corpus, &hyper).unwrap();
        assert_eq!(trace.len(), 20);
        assert!(trace.last().unwrap() < trace.first().unwrap(), "{trace:?}");
        let (again, trace2) = train_autoencoder(model, &corpus, &hyper).unwrap();
        assert_eq!(trace, trace2);
        assert_eq!(trained, again);
    }

    #[test]
    fn training_rejects_tiny_corpus_and_bad_hyper() {
        let model = AutoencoderModel::init(10, 4).unwrap();
        let one = random_matrix(1, 10, 1);
        assert!(matches!(
            train_autoencoder(model.clone(), &one, &TrainingHyperparams::default()),
            Err(AutoencoderError::TooFewRows(1))
        ));
        let bad = TrainingHyperparams { temperature: 0.0, ..Default::default() };
        assert!(train_autoencoder(model, &random_matrix(4, 10, 1), &bad).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut model = AutoencoderModel::init(10, 4).unwrap();
        model.layers[0].weights[0] = f64::MAX;
        let corpus = random_matrix(8, 10, 1);
        let err = train_autoencoder(model, &corpus, &TrainingHyperparams { epochs: 2, ..Default::default() })
            .unwrap_err();
        assert!(matches!(err, AutoencoderError::Diverged { epoch: 0, last_good: None, .. }), "{err}");
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let h = TrainingHyperparams::default();
        assert!((h.learning_rate_at(0, 100) - 0.01).abs() < 1e-15);
        assert!((h.learning_rate_at(50, 100) - 0.0055).abs() < 1e-12);
        assert!(h.learning_rate_at(99, 100) > 0.001);
    }

    #[test]
    fn input_scaling_uses_population_moments() {
        let corpus = Matrix::from_rows(&[[1.0, 5.0, 2.0], [3.0, 5.0, 4.0], [5.0, 5.0, 9.0]]).unwrap();
        let mut model = zero_output_model(3);
        model.fit_input_scaling(&corpus).unwrap();
        assert_eq!(model.input_shift, vec![3.0, 5.0, 5.0]);
        assert!((model.input_scale[0] - (8.0f64 / 3.0).sqrt()).abs() < 1e-15);
        // Constant column keeps unit scale.
        assert_eq!(model.input_scale[1], 1.0);
        assert!((model.input_scale[2] - (26.0f64 / 3.0).sqrt()).abs() < 1e-15);

        let unscaled = AutoencoderModel { input_shift: vec![0.0; 3], input_scale: vec![1.0; 3], ..model.clone() };
        let x = [5.0, 5.0, 9.0];
        let z = [(5.0 - 3.0) / model.input_scale[0], 0.0, 4.0 / model.input_scale[2]];
        assert_eq!(model.encode_vector(&x).unwrap(), unscaled.encode_vector(&z).unwrap());
    }

    #[test]
    fn training_fits_scaling_on_its_corpus() {
        let corpus = random_matrix(16, 10, 5);
        let mut expected = AutoencoderModel::init(10, 2).unwrap();
        expected.fit_input_scaling(&corpus).unwrap();
        let hyper = TrainingHyperparams { epochs: 1, ..Default::default() };
        let (trained, _) = train_autoencoder(AutoencoderModel::init(10, 2).unwrap(), &corpus, &hyper).unwrap();
        assert_eq!(trained.input_shift, expected.input_shift);
        assert_eq!(trained.input_scale, expected.input_scale);
    }

    #[test]
    fn trailing_single_row_joins_previous_batch() {
        let corpus = random_matrix(5, 10, 3);
        let hyper = TrainingHyperparams { epochs: 1, batch_size: 2, ..Default::default() };
        let model = AutoencoderModel::init(10, 1).unwrap();
        assert!(train_autoencoder(model, &corpus, &hyper).is_ok());
    }
}
