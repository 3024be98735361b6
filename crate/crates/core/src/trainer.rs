//! One-stage training loop.
//!
//! Epochs `0..e_s` train the head loss alone. At epoch `e_s` the momentum
//! encoder is copied from the online network; from then on every mini-batch
//! feeds the sample queues through the momentum encoder, and once both
//! queues have seen more than `s` entries the contrastive gradient
//! `w · ∂L_CSC/∂c(x)` is injected at the embedding next to the head-loss
//! gradient at the logits.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{
    encode_and_route, momentum_init, momentum_update, queues_ready, select_negatives, select_positives,
    MomentumEncoder, SampleQueues,
};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::losses::{
    self, argmax, csc_grad_anchor, csc_loss, normalization_jacobian_vjp, sat_em_loss, sr_confidence, CscContext,
    SatState,
};
use crate::matrix::Matrix;
use crate::nn::{self, class_probs, softmax, Architecture, ForwardRecord, ModelParams, OptimizerState};
use crate::par;
use crate::theory::{self, BoundReport, BoundSettings, SplitOutputs};

/// Loss applied at the classification layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    CrossEntropy,
    /// Soft-target abstention loss with entropy regularization; adds a
    /// `k+1`-th abstention logit.
    SatEm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay: f64,
    /// Epochs between decays.
    pub interval: usize,
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    let steps = epoch / schedule.interval.max(1);
    schedule.initial * schedule.decay.powi(steps as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Run the momentum encoder, queues and contrastive loss at all.
    pub contrastive: bool,
    /// Warmup epochs before the contrastive stage.
    pub e_s: usize,
    /// Weight of the contrastive loss.
    pub w: f64,
    /// Momentum-encoder coefficient.
    pub q: f64,
    /// Queue capacity.
    pub s: usize,
    pub tau: f64,
    pub lr: LrSchedule,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub head: Head,
    pub m_sat: f64,
    pub beta_em: f64,
    /// Plain cross-entropy epochs before the abstention head loss.
    pub e_s_sat: usize,
    pub bound: BoundSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            contrastive: true,
            e_s: 20,
            w: 0.5,
            q: 0.99,
            s: 300,
            tau: losses::DEFAULT_TAU,
            lr: LrSchedule {
                initial: 0.1,
                decay: 0.5,
                interval: 25,
            },
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            head: Head::CrossEntropy,
            m_sat: 0.9,
            beta_em: 0.001,
            e_s_sat: 20,
            bound: BoundSettings::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.w >= 0.0) || !(0.0..1.0).contains(&self.q) || self.s == 0 || !(self.tau > 0.0) {
            return bad("need w >= 0, q in [0, 1), s >= 1, tau > 0");
        }
        if !(self.lr.initial > 0.0) || !(self.lr.decay > 0.0) || self.lr.interval == 0 {
            return bad("learning-rate schedule must be positive");
        }
        if self.head == Head::SatEm && !(self.m_sat > 0.0 && self.m_sat < 1.0 && self.beta_em >= 0.0) {
            return bad("need m_sat in (0, 1) and beta_em >= 0");
        }
        if !(self.bound.delta > 0.0 && self.bound.delta < 1.0) {
            return bad("bound delta must be in (0, 1)");
        }
        self.bound.margin.validate()
    }

    /// Whether the contrastive term can ever reach the gradient.
    pub fn contrastive_reachable(&self) -> bool {
        self.contrastive && self.w > 0.0 && self.e_s < self.epochs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean head loss over the epoch's mini-batches.
    pub head_loss: f64,
    /// Mean weighted contrastive loss `w·L_CSC` over mini-batches where it was active.
    pub csc_loss: f64,
    pub csc_steps: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub bound: BoundReport,
}

impl EpochRecord {
    pub fn var_intra(&self) -> f64 {
        self.bound.inputs.var_intra
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Anchors skipped for an empty positive set or a zero embedding.
    pub skipped_anchors: u64,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn bound_trace(&self) -> Vec<BoundReport> {
        self.epochs.iter().map(|e| e.bound).collect()
    }
}

/// Contrastive term of a mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CscBatch {
    /// Mean loss over the anchors used.
    pub loss: f64,
    /// Gradient of the mean loss with respect to each `c(x)`.
    pub grad: Matrix,
    pub anchors_used: usize,
    pub skipped: usize,
}

/// Per-anchor contrastive loss and gradient at the embedding, averaged over
/// the anchors that have at least one positive.
pub fn anchor_batch_csc(
    record: &ForwardRecord,
    labels: &[usize],
    queues: &SampleQueues,
    tau: f64,
    num_classes: usize,
) -> Result<CscBatch> {
    let n = record.len();
    let e = record.embeddings().cols();
    let positives: Vec<Vec<&[f64]>> = (0..num_classes).map(|y| select_positives(queues, y)).collect();
    let negatives: Vec<Vec<&[f64]>> = (0..num_classes).map(|y| select_negatives(queues, y)).collect();

    let per_anchor = par::map_range(n, |i| -> Result<Option<(f64, Vec<f64>)>> {
        let y = labels[i];
        if positives[y].is_empty() {
            return Ok(None);
        }
        let c = record.embeddings().row(i);
        let z = match nn::normalize_embedding(c) {
            Ok(z) => z,
            Err(Error::DegenerateEmbedding) => return Ok(None),
            Err(err) => return Err(err),
        };
        let norm = nn::dot(c, c).sqrt();
        let probs = class_probs(record.probs.row(i), num_classes);
        let ctx = CscContext {
            anchor_z: &z,
            sr: sr_confidence(&probs),
            positives: &positives[y],
            negatives: &negatives[y],
            tau,
        };
        let loss = csc_loss(&ctx)?;
        let grad_z = csc_grad_anchor(&ctx)?;
        Ok(Some((loss, normalization_jacobian_vjp(&z, norm, &grad_z))))
    });

    let mut grad = Matrix::zeros(n, e);
    let (mut total, mut used) = (0.0, 0usize);
    for (i, r) in per_anchor.into_iter().enumerate() {
        if let Some((loss, g)) = r? {
            total += loss;
            used += 1;
            grad.row_mut(i).copy_from_slice(&g);
        }
    }
    if used == 0 {
        return Ok(CscBatch { loss: 0.0, grad, anchors_used: 0, skipped: n });
    }
    grad.scale(1.0 / used as f64);
    Ok(CscBatch {
        loss: total / used as f64,
        grad,
        anchors_used: used,
        skipped: n - used,
    })
}

/// Head loss of a batch and its gradient at the logits (mean over the batch).
fn head_loss(
    cfg: &TrainConfig,
    epoch: usize,
    record: &ForwardRecord,
    labels: &[usize],
    indices: &[usize],
    num_classes: usize,
    sat: Option<&mut SatState>,
) -> Result<(f64, Matrix)> {
    let n = record.len();
    let mut grad = Matrix::zeros(n, record.logits.cols());
    let mut total = 0.0;
    match (cfg.head, sat) {
        (Head::CrossEntropy, _) => {
            for i in 0..n {
                let (l, g) = losses::cross_entropy(record.probs.row(i), labels[i]);
                total += l;
                grad.row_mut(i).copy_from_slice(&g);
            }
        }
        (Head::SatEm, Some(sat)) if epoch >= cfg.e_s_sat => {
            for (i, &sample) in indices.iter().enumerate() {
                let y = labels[i];
                let probs = record.probs.row(i);
                sat.update(sample, &class_probs(probs, num_classes))?;
                let t_y = sat.targets[sample][y];
                let (l, g) = sat_em_loss(probs, t_y, y, sat.beta_em);
                total += l;
                grad.row_mut(i).copy_from_slice(&g);
            }
        }
        (Head::SatEm, _) => {
            // warmup: cross-entropy on the class logits only
            for i in 0..n {
                let p = softmax(&record.logits.row(i)[..num_classes]);
                let (l, g) = losses::cross_entropy(&p, labels[i]);
                total += l;
                grad.row_mut(i)[..num_classes].copy_from_slice(&g);
            }
        }
    }
    let inv = 1.0 / n as f64;
    grad.scale(inv);
    Ok((total * inv, grad))
}

struct Evaluation {
    accuracy: f64,
}

fn accuracy(probs: &Matrix, labels: &[usize], k: usize) -> f64 {
    let correct = probs
        .iter_rows()
        .zip(labels)
        .filter(|(row, &y)| argmax(&class_probs(row, k)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

fn evaluate(
    epoch: usize,
    params: &ModelParams,
    split: &Split,
    settings: &BoundSettings,
) -> Result<(Evaluation, Evaluation, BoundReport)> {
    let k = params.num_classes();
    let tr = nn::forward(params, &split.train.features)?;
    let te = nn::forward(params, &split.test.features)?;
    let m = theory::measure_epoch(
        epoch,
        params,
        &SplitOutputs { embeddings: tr.embeddings(), probs: &tr.probs, labels: &split.train.labels },
        &SplitOutputs { embeddings: te.embeddings(), probs: &te.probs, labels: &split.test.labels },
        settings,
    );
    let finite = [m.var_intra, m.classifier_norm, m.empirical_margin_loss, m.train_l0, m.test_l0];
    if !finite.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite(format!("epoch measurements {m:?}")));
    }
    let report = theory::bound_report(&m, settings)?;
    Ok((
        Evaluation { accuracy: accuracy(&tr.probs, &split.train.labels, k) },
        Evaluation { accuracy: accuracy(&te.probs, &split.test.labels, k) },
        report,
    ))
}

/// Observation hook for tests and diagnostics; called after every step.
pub trait StepObserver {
    fn after_step(&mut self, _epoch: usize, _step: usize, _state: &TrainState) {}
}

impl StepObserver for () {}

/// Mutable training state visible to observers.
pub struct TrainState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub encoder: Option<MomentumEncoder>,
    pub queues: SampleQueues,
    pub sat: Option<SatState>,
}

pub fn architecture_for(cfg: &TrainConfig, input_dim: usize, hidden: &[usize], embedding_dim: usize, num_classes: usize) -> Architecture {
    Architecture {
        input_dim,
        hidden: hidden.to_vec(),
        embedding_dim,
        num_classes,
        abstention: cfg.head == Head::SatEm,
    }
}

/// Trains a freshly initialized network on `split.train`.
pub fn train(split: &Split, arch: &Architecture, cfg: &TrainConfig) -> Result<(ModelParams, TrainHistory)> {
    train_observed(split, arch, cfg, &mut ())
}

pub fn train_observed(
    split: &Split,
    arch: &Architecture,
    cfg: &TrainConfig,
    observer: &mut dyn StepObserver,
) -> Result<(ModelParams, TrainHistory)> {
    cfg.validate()?;
    let data: &Dataset = &split.train;
    if data.is_empty() || split.test.is_empty() {
        return Err(Error::Input("training and test splits must be non-empty".into()));
    }
    if data.dim() != arch.input_dim || data.num_classes != arch.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} features and {} classes, network expects {} and {}",
            data.dim(),
            data.num_classes,
            arch.input_dim,
            arch.num_classes
        )));
    }
    if arch.abstention != (cfg.head == Head::SatEm) {
        return Err(Error::Config("abstention output must match the head loss".into()));
    }
    let k = arch.num_classes;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(arch, &mut rng)?;
    let optimizer = OptimizerState::new(&params, cfg.lr.initial, cfg.sgd_momentum, cfg.weight_decay)?;
    let sat = match cfg.head {
        Head::SatEm => Some(SatState::new(&data.labels, k, cfg.m_sat, cfg.beta_em)?),
        Head::CrossEntropy => None,
    };
    let mut st = TrainState {
        params,
        optimizer,
        encoder: None,
        queues: SampleQueues::new(cfg.s)?,
        sat,
    };
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        st.optimizer.learning_rate = lr_at(&cfg.lr, epoch);
        if cfg.contrastive && epoch == cfg.e_s {
            st.encoder = Some(momentum_init(&st.params, cfg.q)?);
        }
        order.shuffle(&mut rng);

        let (mut head_sum, mut csc_sum, mut csc_steps, mut steps) = (0.0, 0.0, 0usize, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |what: String| Error::Divergence { epoch, step, what };
            let batch = data.features.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let record = nn::forward(&st.params, &batch)?;

            let (loss, grad_logits) = head_loss(cfg, epoch, &record, &labels, idx, k, st.sat.as_mut())?;
            if !loss.is_finite() {
                return Err(diverged(format!("head loss is {loss}")));
            }
            head_sum += loss;

            let mut grad_embedding = None;
            if let Some(enc) = st.encoder.as_mut() {
                if queues_ready(&st.queues, cfg.s) {
                    let csc = anchor_batch_csc(&record, &labels, &st.queues, cfg.tau, k)?;
                    history.skipped_anchors += csc.skipped as u64;
                    let weighted = cfg.w * csc.loss;
                    if !weighted.is_finite() {
                        return Err(diverged(format!("contrastive loss is {weighted}")));
                    }
                    csc_sum += weighted;
                    csc_steps += 1;
                    if cfg.w != 0.0 && csc.anchors_used > 0 {
                        let mut g = csc.grad;
                        g.scale(cfg.w);
                        grad_embedding = Some(g);
                    }
                }
                encode_and_route(enc, &mut st.queues, &batch, &labels)?;
                momentum_update(enc, &st.params)?;
            }

            let grads = nn::backward(&st.params, &record, &grad_logits, grad_embedding.as_ref())?;
            nn::sgd_step(&mut st.params, &mut st.optimizer, &grads).map_err(|e| match e {
                Error::NonFinite(what) => diverged(what),
                other => other,
            })?;
            if !st.params.is_finite() {
                return Err(diverged("parameters".into()));
            }
            steps += 1;
            observer.after_step(epoch, step, &st);
        }

        let (train_eval, test_eval, bound) = evaluate(epoch, &st.params, split, &cfg.bound).map_err(|e| match e {
            Error::Config(what) | Error::NonFinite(what) => Error::Divergence { epoch, step: steps, what },
            other => other,
        })?;
        history.epochs.push(EpochRecord {
            epoch,
            lr: st.optimizer.learning_rate,
            head_loss: head_sum / steps as f64,
            csc_loss: if csc_steps > 0 { csc_sum / csc_steps as f64 } else { 0.0 },
            csc_steps,
            train_accuracy: train_eval.accuracy,
            test_accuracy: test_eval.accuracy,
            bound,
        });
    }
    Ok((st.params, history))
}
