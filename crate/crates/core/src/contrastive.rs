//! Momentum encoder and the positive/negative sample queues.
//!
//! The momentum encoder is an exponential moving average of the online
//! network. Its normalized embeddings are enqueued with its own predicted
//! class: into the positive queue when the prediction is correct, into the
//! negative queue otherwise. For an anchor of class `y`, positives are queued
//! entries correctly predicted as `y` and negatives are entries wrongly
//! predicted as `y`.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::losses::argmax;
use crate::matrix::Matrix;
use crate::nn::{self, class_probs, ModelParams};

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub z: Vec<f64>,
    pub predicted_class: usize,
}

/// Two FIFO queues of equal capacity.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleQueues {
    capacity: usize,
    p_queue: VecDeque<QueueEntry>,
    n_queue: VecDeque<QueueEntry>,
    p_pushed: u64,
    n_pushed: u64,
    /// Samples the encoder could not place on the unit sphere.
    skipped: u64,
}

fn push_bounded(queue: &mut VecDeque<QueueEntry>, capacity: usize, entry: QueueEntry) {
    if queue.len() == capacity {
        queue.pop_front();
    }
    queue.push_back(entry);
}

impl SampleQueues {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("queue capacity must be at least 1".into()));
        }
        Ok(Self {
            capacity,
            p_queue: VecDeque::with_capacity(capacity),
            n_queue: VecDeque::with_capacity(capacity),
            p_pushed: 0,
            n_pushed: 0,
            skipped: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push_positive(&mut self, entry: QueueEntry) {
        push_bounded(&mut self.p_queue, self.capacity, entry);
        self.p_pushed += 1;
    }

    pub fn push_negative(&mut self, entry: QueueEntry) {
        push_bounded(&mut self.n_queue, self.capacity, entry);
        self.n_pushed += 1;
    }

    pub fn positives(&self) -> &VecDeque<QueueEntry> {
        &self.p_queue
    }

    pub fn negatives(&self) -> &VecDeque<QueueEntry> {
        &self.n_queue
    }

    pub fn p_pushed(&self) -> u64 {
        self.p_pushed
    }

    pub fn n_pushed(&self) -> u64 {
        self.n_pushed
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Queue contents as text: one line per entry,
    /// `<P|N> <predicted_class> <z_0> <z_1> ...`, oldest first, positives first.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (tag, q) in [("P", &self.p_queue), ("N", &self.n_queue)] {
            for e in q {
                let _ = write!(out, "{tag} {}", e.predicted_class);
                for v in &e.z {
                    let _ = write!(out, " {v}");
                }
                out.push('\n');
            }
        }
        out
    }
}

/// Positives for an anchor of class `y`, oldest first.
pub fn select_positives(queues: &SampleQueues, y: usize) -> Vec<&[f64]> {
    queues
        .p_queue
        .iter()
        .filter(|e| e.predicted_class == y)
        .map(|e| e.z.as_slice())
        .collect()
}

/// Negatives for an anchor of class `y`: samples misclassified into `y`.
pub fn select_negatives(queues: &SampleQueues, y: usize) -> Vec<&[f64]> {
    queues
        .n_queue
        .iter()
        .filter(|e| e.predicted_class == y)
        .map(|e| e.z.as_slice())
        .collect()
}

/// True once both queues have received more than `s` entries.
pub fn queues_ready(queues: &SampleQueues, s: usize) -> bool {
    queues.p_pushed > s as u64 && queues.n_pushed > s as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumEncoder {
    pub params: ModelParams,
    pub q: f64,
}

pub fn momentum_init(online: &ModelParams, q: f64) -> Result<MomentumEncoder> {
    if !(0.0..1.0).contains(&q) {
        return Err(Error::Config(format!("momentum coefficient must be in [0, 1), got {q}")));
    }
    Ok(MomentumEncoder {
        params: online.clone(),
        q,
    })
}

/// `θ_m ← q·θ_m + (1 − q)·θ`
pub fn momentum_update(enc: &mut MomentumEncoder, online: &ModelParams) -> Result<()> {
    enc.params.ensure_same_shape(online)?;
    let q = enc.q;
    for (m, &o) in enc.params.values_mut().zip(online.values()) {
        *m = q * *m + (1.0 - q) * o;
    }
    Ok(())
}

/// Runs the momentum encoder on `batch` and routes each sample into the
/// positive queue (prediction == label) or negative queue (otherwise).
pub fn encode_and_route(
    enc: &MomentumEncoder,
    queues: &mut SampleQueues,
    batch: &Matrix,
    labels: &[usize],
) -> Result<()> {
    if labels.len() != batch.rows() {
        return Err(Error::Config("label count differs from batch size".into()));
    }
    let record = nn::forward(&enc.params, batch)?;
    let k = enc.params.num_classes();
    for (i, &label) in labels.iter().enumerate() {
        let predicted_class = argmax(&class_probs(record.probs.row(i), k));
        let z = match nn::normalize_embedding(record.embeddings().row(i)) {
            Ok(z) => z,
            Err(Error::DegenerateEmbedding) => {
                queues.skipped += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let entry = QueueEntry { z, predicted_class };
        if predicted_class == label {
            queues.push_positive(entry);
        } else {
            queues.push_negative(entry);
        }
    }
    Ok(())
}
