//! Generalization-bound monitoring.
//!
//! The selective loss is bounded by the empirical max-hinge margin loss plus
//!
//! `4 √( (‖l‖²·Var_intra + 4ρ̃² + ρ̃²‖l‖²·ln(6m/δ)) / (ρ̃²·m·‖l‖²) )`
//!
//! with `ρ̃ = min{ρ/(4α), ρ′/(4βλ + 2α)}`. Everything here evaluates those
//! quantities for a trained network; nothing attempts to verify the bound
//! probabilistically.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{argmax, margin_gamma, max_hinge_loss, selective_loss_l0, sr_confidence, MarginParams};
use crate::matrix::Matrix;
use crate::nn::{self, class_probs, ModelParams};

/// Mean over all `k` classes of the trace of each class's population
/// covariance. Classes without samples contribute zero.
pub fn intra_class_variance(embeddings: &Matrix, labels: &[usize], k: usize) -> f64 {
    let e = embeddings.cols();
    let mut sums = vec![vec![0.0; e]; k];
    let mut counts = vec![0usize; k];
    for (row, &y) in embeddings.iter_rows().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| s.into_iter().map(|v| if c > 0 { v / c as f64 } else { 0.0 }).collect())
        .collect();
    let mut traces = vec![0.0; k];
    for (row, &y) in embeddings.iter_rows().zip(labels) {
        traces[y] += row
            .iter()
            .zip(&means[y])
            .map(|(v, m)| (v - m) * (v - m))
            .sum::<f64>();
    }
    traces
        .iter()
        .zip(&counts)
        .map(|(t, &c)| if c > 0 { t / c as f64 } else { 0.0 })
        .sum::<f64>()
        / k as f64
}

pub fn rho_tilde(mp: &MarginParams) -> f64 {
    (mp.rho / (4.0 * mp.alpha)).min(mp.rho_prime / (4.0 * mp.beta * mp.lambda + 2.0 * mp.alpha))
}

/// Mean max-hinge loss over rows of output probabilities, with the softmax
/// response shifted by `h` as the selection score.
pub fn margin_loss_from_probs(probs: &Matrix, labels: &[usize], k: usize, h: f64, mp: &MarginParams) -> f64 {
    let total: f64 = probs
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| {
            let p = class_probs(row, k);
            max_hinge_loss(sr_confidence(&p) - h, margin_gamma(&p, y), mp)
        })
        .sum();
    total / labels.len() as f64
}

/// Empirical max-hinge margin loss of the network on `data`.
pub fn empirical_margin_loss(params: &ModelParams, data: &Dataset, h: f64, mp: &MarginParams) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let record = nn::forward(params, &data.features)?;
    Ok(margin_loss_from_probs(&record.probs, &data.labels, params.num_classes(), h, mp))
}

/// Mean penalized selective loss with the softmax response as selector.
pub fn selective_loss_from_probs(probs: &Matrix, labels: &[usize], k: usize, h: f64, lambda: f64) -> f64 {
    let total: f64 = probs
        .iter_rows()
        .zip(labels)
        .map(|(row, &y)| {
            let p = class_probs(row, k);
            selective_loss_l0(argmax(&p) == y, sr_confidence(&p), h, lambda)
        })
        .sum();
    total / labels.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub var_intra: f64,
    pub classifier_norm: f64,
    pub rho_tilde: f64,
    pub sample_count: usize,
    pub delta: f64,
    pub empirical_margin_loss: f64,
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        if self.classifier_norm == 0.0 {
            return Err(Error::DegenerateClassifier);
        }
        let finite = [self.var_intra, self.classifier_norm, self.rho_tilde, self.delta, self.empirical_margin_loss]
            .iter()
            .all(|v| v.is_finite());
        if !finite
            || self.var_intra < 0.0
            || self.classifier_norm < 0.0
            || self.rho_tilde <= 0.0
            || self.sample_count < 2
            || !(self.delta > 0.0 && self.delta < 1.0)
            || self.empirical_margin_loss < 0.0
        {
            return Err(Error::Config(format!("invalid bound inputs: {self:?}")));
        }
        Ok(())
    }
}

/// The additive complexity term alone.
pub fn complexity_term(inputs: &BoundInputs) -> Result<f64> {
    inputs.validate()?;
    let l2 = inputs.classifier_norm * inputs.classifier_norm;
    let r2 = inputs.rho_tilde * inputs.rho_tilde;
    let m = inputs.sample_count as f64;
    let numerator = l2 * inputs.var_intra + 4.0 * r2 + r2 * l2 * (6.0 * m / inputs.delta).ln();
    Ok(4.0 * (numerator / (r2 * m * l2)).sqrt())
}

pub fn theorem1_bound(inputs: &BoundInputs) -> Result<f64> {
    Ok(inputs.empirical_margin_loss + complexity_term(inputs)?)
}

/// Margin parameters, confidence level and selection threshold used when
/// tracing the bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundSettings {
    pub margin: MarginParams,
    pub delta: f64,
    /// Threshold on the softmax response; the margin loss sees `g − h`.
    pub h: f64,
}

impl Default for BoundSettings {
    fn default() -> Self {
        Self {
            margin: MarginParams::default(),
            delta: 0.05,
            h: 0.0,
        }
    }
}

/// Per-epoch measurements feeding one bound report.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMeasurements {
    pub epoch: usize,
    pub var_intra: f64,
    pub classifier_norm: f64,
    pub empirical_margin_loss: f64,
    pub sample_count: usize,
    pub train_l0: f64,
    pub test_l0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundReport {
    pub epoch: usize,
    pub inputs: BoundInputs,
    pub bound_value: f64,
    pub train_l0: f64,
    pub test_l0: f64,
    /// `test_l0 − train_l0`
    pub gap: f64,
}

pub fn bound_report(m: &EpochMeasurements, settings: &BoundSettings) -> Result<BoundReport> {
    settings.margin.validate()?;
    let inputs = BoundInputs {
        var_intra: m.var_intra,
        classifier_norm: m.classifier_norm,
        rho_tilde: rho_tilde(&settings.margin),
        sample_count: m.sample_count,
        delta: settings.delta,
        empirical_margin_loss: m.empirical_margin_loss,
    };
    Ok(BoundReport {
        epoch: m.epoch,
        bound_value: theorem1_bound(&inputs)?,
        inputs,
        train_l0: m.train_l0,
        test_l0: m.test_l0,
        gap: m.test_l0 - m.train_l0,
    })
}

pub fn bound_trace(epochs: &[EpochMeasurements], settings: &BoundSettings) -> Result<Vec<BoundReport>> {
    epochs.iter().map(|m| bound_report(m, settings)).collect()
}

/// Forward pass outputs needed to measure one split.
pub struct SplitOutputs<'a> {
    pub embeddings: &'a Matrix,
    pub probs: &'a Matrix,
    pub labels: &'a [usize],
}

/// Measures the bound's ingredients for a network whose forward passes over
/// the training and test splits are given.
pub fn measure_epoch(
    epoch: usize,
    params: &ModelParams,
    train: &SplitOutputs<'_>,
    test: &SplitOutputs<'_>,
    settings: &BoundSettings,
) -> EpochMeasurements {
    let k = params.num_classes();
    let lambda = settings.margin.lambda;
    EpochMeasurements {
        epoch,
        var_intra: intra_class_variance(train.embeddings, train.labels, k),
        classifier_norm: nn::classifier_l2_norm(params),
        empirical_margin_loss: margin_loss_from_probs(train.probs, train.labels, k, settings.h, &settings.margin),
        sample_count: train.labels.len(),
        train_l0: selective_loss_from_probs(train.probs, train.labels, k, settings.h, lambda),
        test_l0: selective_loss_from_probs(test.probs, test.labels, k, settings.h, lambda),
    }
}

/// Bound report for a single network on a train/test split.
pub fn bound_for_model(
    epoch: usize,
    params: &ModelParams,
    train: &Dataset,
    test: &Dataset,
    settings: &BoundSettings,
) -> Result<BoundReport> {
    let tr = nn::forward(params, &train.features)?;
    let te = nn::forward(params, &test.features)?;
    let m = measure_epoch(
        epoch,
        params,
        &SplitOutputs { embeddings: tr.embeddings(), probs: &tr.probs, labels: &train.labels },
        &SplitOutputs { embeddings: te.embeddings(), probs: &te.probs, labels: &test.labels },
        settings,
    );
    bound_report(&m, settings)
}
