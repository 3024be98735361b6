//! Feed-forward network `f = l ∘ c` with manual backpropagation.
//!
//! `c` is a stack of affine + ReLU layers producing the (non-normalized)
//! embedding; `l` is a single affine layer producing logits. Gradients can be
//! injected at two points: at the logits (flows through `l` and `c`) and at
//! the embedding (flows through `c` only).

use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par;

/// Layer sizes of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Hidden widths between the input and the embedding layer.
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    /// Adds a (k+1)-th abstention logit to the classifier.
    #[serde(default)]
    pub abstention: bool,
}

impl Architecture {
    pub fn output_dim(&self) -> usize {
        self.num_classes + usize::from(self.abstention)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        Ok(())
    }
}

/// Affine layer, weights stored row-major as `(out_dim, in_dim)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weights: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        let weights = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
        }
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.in_dim).zip(&self.bias))
        {
            *o = b + dot(row, input);
        }
    }

    /// `out += Wᵀ delta`
    fn apply_transpose(&self, delta: &[f64], out: &mut [f64]) {
        for (row, &d) in self.weights.chunks_exact(self.in_dim).zip(delta) {
            if d != 0.0 {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += w * d;
                }
            }
        }
    }

    /// `dW += delta ⊗ input`, `db += delta`
    fn accumulate(&mut self, delta: &[f64], input: &[f64]) {
        for ((row, b), &d) in self
            .weights
            .chunks_exact_mut(self.in_dim)
            .zip(self.bias.iter_mut())
            .zip(delta)
        {
            *b += d;
            if d != 0.0 {
                for (w, x) in row.iter_mut().zip(input) {
                    *w += d * x;
                }
            }
        }
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.in_dim == other.in_dim && self.out_dim == other.out_dim
    }
}

/// Parameters of `f = l ∘ c`. Also used as the container for gradients and
/// optimizer buffers, which share its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    /// Affine + ReLU layers; together these are the embedding map `c`.
    pub embedding_layers: Vec<Dense>,
    /// Final affine layer `l`.
    pub classifier: Dense,
}

pub type Gradients = ModelParams;

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let widths = layer_widths(arch);
        let embedding_layers = widths
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        let classifier = Dense::glorot(arch.embedding_dim, arch.output_dim(), rng);
        Ok(Self {
            arch: arch.clone(),
            embedding_layers,
            classifier,
        })
    }

    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        let widths = layer_widths(arch);
        Ok(Self {
            arch: arch.clone(),
            embedding_layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            classifier: Dense::zeros(arch.embedding_dim, arch.output_dim()),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.values_mut().for_each(|v| *v = 0.0);
        z
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.arch.embedding_dim
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn output_dim(&self) -> usize {
        self.classifier.out_dim
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.embedding_layers.iter().chain(std::iter::once(&self.classifier))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.embedding_layers
            .iter_mut()
            .chain(std::iter::once(&mut self.classifier))
    }

    /// All parameter values in a fixed order: each layer's weights then bias,
    /// embedding layers first.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.layers().flat_map(|l| l.weights.iter().chain(&l.bias))
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn num_values(&self) -> usize {
        self.layers().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.embedding_layers.len() == other.embedding_layers.len()
            && self.layers().zip(other.layers()).all(|(a, b)| a.same_shape(b))
    }

    /// Checks that the stored layers agree with `arch`, as a deserialized
    /// value need not.
    pub fn validate_shapes(&self) -> Result<()> {
        let expected = ModelParams::zeros(&self.arch)?;
        let consistent = self.same_shape(&expected)
            && self
                .layers()
                .all(|l| l.weights.len() == l.in_dim * l.out_dim && l.bias.len() == l.out_dim);
        if consistent {
            Ok(())
        } else {
            Err(Error::Input("layer shapes do not match the recorded architecture".into()))
        }
    }

    pub(crate) fn ensure_same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Config("parameter shapes differ".into()))
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// `self += other`, entrywise.
    pub fn add_assign(&mut self, other: &ModelParams) {
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += b;
        }
    }
}

fn layer_widths(arch: &Architecture) -> Vec<usize> {
    let mut widths = vec![arch.input_dim];
    widths.extend(&arch.hidden);
    widths.push(arch.embedding_dim);
    widths
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Max-shifted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Class probabilities from a network output row. For networks with an
/// abstention output the first `k` entries are renormalized, which equals
/// the softmax over the `k` class logits alone.
pub fn class_probs(probs: &[f64], num_classes: usize) -> Vec<f64> {
    if probs.len() == num_classes {
        return probs.to_vec();
    }
    let head = &probs[..num_classes];
    let mass: f64 = head.iter().sum();
    head.iter().map(|p| p / mass).collect()
}

/// Cached intermediate values of one forward pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardRecord {
    pub inputs: Matrix,
    /// Pre-activation of each embedding layer.
    pub pre_activations: Vec<Matrix>,
    /// ReLU output of each embedding layer; the last one is `c(x)`.
    pub activations: Vec<Matrix>,
    pub logits: Matrix,
    pub probs: Matrix,
}

impl ForwardRecord {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    /// Non-normalized embeddings `c(x)`, one row per sample.
    pub fn embeddings(&self) -> &Matrix {
        self.activations.last().expect("at least one embedding layer")
    }
}

struct SamplePass {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    logits: Vec<f64>,
    probs: Vec<f64>,
}

fn forward_sample(params: &ModelParams, x: &[f64]) -> SamplePass {
    let mut pre = Vec::with_capacity(params.embedding_layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(params.embedding_layers.len());
    for layer in &params.embedding_layers {
        let input = post.last().map_or(x, Vec::as_slice);
        let mut z = vec![0.0; layer.out_dim];
        layer.apply(input, &mut z);
        let a = z.iter().map(|&v| v.max(0.0)).collect();
        pre.push(z);
        post.push(a);
    }
    let mut logits = vec![0.0; params.classifier.out_dim];
    params
        .classifier
        .apply(post.last().expect("embedding layer"), &mut logits);
    let probs = softmax(&logits);
    SamplePass {
        pre,
        post,
        logits,
        probs,
    }
}

/// Runs `f` on every row of `batch`.
pub fn forward(params: &ModelParams, batch: &Matrix) -> Result<ForwardRecord> {
    if batch.cols() != params.input_dim() {
        return Err(Error::Config(format!(
            "batch has {} features, network expects {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    if !batch.is_finite() {
        return Err(Error::Input("batch contains non-finite values".into()));
    }
    let n = batch.rows();
    let passes = par::map_range(n, |i| forward_sample(params, batch.row(i)));

    let layers = params.embedding_layers.len();
    let mut pre_activations: Vec<Matrix> = params
        .embedding_layers
        .iter()
        .map(|l| Matrix::zeros(n, l.out_dim))
        .collect();
    let mut activations = pre_activations.clone();
    let mut logits = Matrix::zeros(n, params.output_dim());
    let mut probs = Matrix::zeros(n, params.output_dim());
    for (i, pass) in passes.into_iter().enumerate() {
        for l in 0..layers {
            pre_activations[l].row_mut(i).copy_from_slice(&pass.pre[l]);
            activations[l].row_mut(i).copy_from_slice(&pass.post[l]);
        }
        logits.row_mut(i).copy_from_slice(&pass.logits);
        probs.row_mut(i).copy_from_slice(&pass.probs);
    }
    Ok(ForwardRecord {
        inputs: batch.clone(),
        pre_activations,
        activations,
        logits,
        probs,
    })
}

/// Embeddings `c(x)` only; skips the classifier.
pub fn embed(params: &ModelParams, batch: &Matrix) -> Result<Matrix> {
    Ok(forward(params, batch)?.embeddings().clone())
}

/// Gradient of `Σ_i ⟨grad_logits_i, logits_i⟩ + ⟨grad_embedding_i, c(x_i)⟩`
/// with respect to every parameter.
pub fn backward(
    params: &ModelParams,
    record: &ForwardRecord,
    grad_logits: &Matrix,
    grad_embedding: Option<&Matrix>,
) -> Result<Gradients> {
    let n = record.len();
    if grad_logits.rows() != n || grad_logits.cols() != params.output_dim() {
        return Err(Error::Config(format!(
            "logit gradient is {}x{}, expected {n}x{}",
            grad_logits.rows(),
            grad_logits.cols(),
            params.output_dim()
        )));
    }
    if let Some(g) = grad_embedding {
        if g.rows() != n || g.cols() != params.embedding_dim() {
            return Err(Error::Config(format!(
                "embedding gradient is {}x{}, expected {n}x{}",
                g.rows(),
                g.cols(),
                params.embedding_dim()
            )));
        }
    }
    if record.activations.len() != params.embedding_layers.len() {
        return Err(Error::Config("forward record does not match network".into()));
    }

    let partials = par::map_chunks(n, |start, end| {
        let mut grads = params.zeros_like();
        for i in start..end {
            backward_sample(params, record, i, grad_logits.row(i), grad_embedding.map(|g| g.row(i)), &mut grads);
        }
        grads
    });
    let mut total = params.zeros_like();
    for g in &partials {
        total.add_assign(g);
    }
    Ok(total)
}

fn backward_sample(
    params: &ModelParams,
    record: &ForwardRecord,
    i: usize,
    d_logits: &[f64],
    d_embedding: Option<&[f64]>,
    grads: &mut Gradients,
) {
    let emb = record.embeddings().row(i);
    grads.classifier.accumulate(d_logits, emb);
    let mut delta = vec![0.0; params.embedding_dim()];
    params.classifier.apply_transpose(d_logits, &mut delta);
    if let Some(de) = d_embedding {
        for (d, e) in delta.iter_mut().zip(de) {
            *d += e;
        }
    }
    for l in (0..params.embedding_layers.len()).rev() {
        let pre = record.pre_activations[l].row(i);
        for (d, &z) in delta.iter_mut().zip(pre) {
            if z <= 0.0 {
                *d = 0.0;
            }
        }
        let input = if l == 0 {
            record.inputs.row(i)
        } else {
            record.activations[l - 1].row(i)
        };
        grads.embedding_layers[l].accumulate(&delta, input);
        if l > 0 {
            let layer = &params.embedding_layers[l];
            let mut next = vec![0.0; layer.in_dim];
            layer.apply_transpose(&delta, &mut next);
            delta = next;
        }
    }
}

/// Unit-norm copy of an embedding. Scales by the largest magnitude first so
/// that very small or very large vectors normalize accurately.
pub fn normalize_embedding(embedding: &[f64]) -> Result<Vec<f64>> {
    let max = embedding.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if max == 0.0 || !max.is_finite() {
        return Err(Error::DegenerateEmbedding);
    }
    let scaled: Vec<f64> = embedding.iter().map(|v| v / max).collect();
    let norm = dot(&scaled, &scaled).sqrt();
    Ok(scaled.into_iter().map(|v| v / norm).collect())
}

/// Euclidean norm of all classifier parameters, bias included.
pub fn classifier_l2_norm(params: &ModelParams) -> f64 {
    let c = &params.classifier;
    c.weights
        .iter()
        .chain(&c.bias)
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// SGD with classical momentum; weight decay is folded into the gradient
/// before the momentum buffer is updated.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ModelParams,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(0.0..1.0).contains(&momentum) || !(weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "invalid optimizer settings: lr={learning_rate}, momentum={momentum}, weight_decay={weight_decay}"
            )));
        }
        Ok(Self {
            velocity: params.zeros_like(),
            learning_rate,
            momentum,
            weight_decay,
        })
    }
}

pub fn sgd_step(params: &mut ModelParams, state: &mut OptimizerState, grads: &Gradients) -> Result<()> {
    params.ensure_same_shape(grads)?;
    params.ensure_same_shape(&state.velocity)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    let (lr, mu, wd) = (state.learning_rate, state.momentum, state.weight_decay);
    for ((p, v), g) in params
        .values_mut()
        .zip(state.velocity.values_mut())
        .zip(grads.values())
    {
        let g = g + wd * *p;
        *v = mu * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}
