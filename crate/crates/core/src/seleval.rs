//! Selective-classification evaluation: softmax-response scoring, threshold
//! calibration for a target coverage, coverage and selective risk, and the
//! rank-sum comparison between methods.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{argmax, sr_confidence};
use crate::nn::{self, class_probs, ModelParams};
use crate::par;

/// Coverage grid used by default for risk–coverage curves.
pub const DEFAULT_COVERAGES: [f64; 13] =
    [1.0, 0.95, 0.9, 0.85, 0.8, 0.75, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub confidence: f64,
    pub predicted: usize,
    pub label: usize,
    pub correct: bool,
}

impl ScoredSample {
    pub fn new(confidence: f64, predicted: usize, label: usize) -> Self {
        Self {
            confidence,
            predicted,
            label,
            correct: predicted == label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoredPredictions {
    pub samples: Vec<ScoredSample>,
}

impl ScoredPredictions {
    pub fn confidences(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.confidence).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let correct = self.samples.iter().filter(|s| s.correct).count();
        correct as f64 / self.samples.len() as f64
    }
}

/// Scores every sample with the network's softmax response.
pub fn score_dataset(params: &ModelParams, data: &Dataset) -> Result<ScoredPredictions> {
    let record = nn::forward(params, &data.features)?;
    let k = params.num_classes();
    let samples = par::map_range(data.len(), |i| {
        let probs = class_probs(record.probs.row(i), k);
        ScoredSample::new(sr_confidence(&probs), argmax(&probs), data.labels[i])
    });
    Ok(ScoredPredictions { samples })
}

fn check_coverage(c: f64) -> Result<()> {
    if c > 0.0 && c <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("target coverage must be in (0, 1], got {c}")))
    }
}

/// Smallest selected count `m` with `m / n >= c`, evaluated in the same
/// floating-point arithmetic used to report coverage.
fn min_selected(c: f64, n: usize) -> usize {
    let nf = n as f64;
    let mut m = ((c * nf).floor() as usize).clamp(1, n);
    while m < n && (m as f64) / nf < c {
        m += 1;
    }
    while m > 1 && ((m - 1) as f64) / nf >= c {
        m -= 1;
    }
    m
}

/// Threshold `h` such that selecting `g(x) >= h` covers at least `c` of the
/// scores: the `⌈c·n⌉`-th largest score.
pub fn threshold_for_coverage(scores: &[f64], c: f64) -> Result<f64> {
    check_coverage(c)?;
    if scores.is_empty() {
        return Err(Error::Input("no scores to calibrate on".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[min_selected(c, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskCoveragePoint {
    pub target_coverage: f64,
    pub threshold: f64,
    pub realized_coverage: f64,
    /// Fraction of selected samples that are misclassified.
    pub selective_risk: f64,
    pub selected: usize,
    pub errors: usize,
}

/// Coverage and 0/1 selective risk of the rule `g(x) >= h`. The returned
/// point's `target_coverage` is the realized coverage.
pub fn coverage_and_risk(preds: &ScoredPredictions, h: f64) -> Result<RiskCoveragePoint> {
    let (selected, errors) = preds
        .samples
        .iter()
        .filter(|s| s.confidence >= h)
        .fold((0usize, 0usize), |(sel, err), s| (sel + 1, err + usize::from(!s.correct)));
    if selected == 0 {
        return Err(Error::UndefinedRisk { threshold: h });
    }
    let coverage = selected as f64 / preds.samples.len() as f64;
    Ok(RiskCoveragePoint {
        target_coverage: coverage,
        threshold: h,
        realized_coverage: coverage,
        selective_risk: errors as f64 / selected as f64,
        selected,
        errors,
    })
}

/// One calibrated point per target coverage, in the order given.
pub fn risk_coverage_curve(preds: &ScoredPredictions, targets: &[f64]) -> Result<Vec<RiskCoveragePoint>> {
    for &c in targets {
        check_coverage(c)?;
    }
    let scores = preds.confidences();
    par::map(targets, |&c| {
        let h = threshold_for_coverage(&scores, c)?;
        let mut point = coverage_and_risk(preds, h)?;
        point.target_coverage = c;
        Ok(point)
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PValueMethod {
    /// Enumeration of every assignment of the pooled ranks.
    Exact,
    /// Normal approximation with tie and continuity correction.
    Normal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSumResult {
    /// Mann–Whitney U of the first sample.
    pub u: f64,
    /// Two-sided p-value.
    pub p: f64,
    pub method: PValueMethod,
}

/// Above this many rank assignments the normal approximation is used.
pub const EXACT_LIMIT: u64 = 200_000;

/// Midranks (1-based) of the pooled values.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc.saturating_mul(n - i) / (i + 1))
}

/// Wilcoxon rank-sum (Mann–Whitney U) test. Small samples get the exact
/// permutation p-value over the observed midranks; larger ones the normal
/// approximation.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    let n = (a.len() + b.len()) as u64;
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Config("rank-sum test needs at least 2 values per side".into()));
    }
    if binomial(n, a.len() as u64) <= EXACT_LIMIT {
        rank_sum_exact(a, b)
    } else {
        rank_sum_normal(a, b)
    }
}

fn u_of_first(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Input("rank-sum test on non-finite values".into()));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let na = a.len() as f64;
    let rank_sum: f64 = ranks[..a.len()].iter().sum();
    Ok((rank_sum - na * (na + 1.0) / 2.0, ranks))
}

/// Exact two-sided p-value: the share of rank assignments whose U is at
/// least as far from `n_a n_b / 2` as the observed one.
pub fn rank_sum_exact(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    let (u, ranks) = u_of_first(a, b)?;
    let na = a.len();
    let mean = (na * b.len()) as f64 / 2.0;
    let observed = (u - mean).abs();
    let offset = (na * (na + 1)) as f64 / 2.0;

    let n = ranks.len();
    let mut idx: Vec<usize> = (0..na).collect();
    let (mut extreme, mut total) = (0u64, 0u64);
    loop {
        let s: f64 = idx.iter().map(|&i| ranks[i]).sum();
        if ((s - offset) - mean).abs() >= observed - 1e-9 {
            extreme += 1;
        }
        total += 1;
        // next combination in lexicographic order
        let mut pos = na;
        while pos > 0 && idx[pos - 1] == n - na + pos - 1 {
            pos -= 1;
        }
        if pos == 0 {
            break;
        }
        idx[pos - 1] += 1;
        for j in pos..na {
            idx[j] = idx[j - 1] + 1;
        }
    }
    Ok(RankSumResult {
        u,
        p: extreme as f64 / total as f64,
        method: PValueMethod::Exact,
    })
}

fn normal_sf(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// Normal approximation with tie-corrected variance and continuity
/// correction.
pub fn rank_sum_normal(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    let (u, ranks) = u_of_first(a, b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|&&r| r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let mean = na * nb / 2.0;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
        (2.0 * normal_sf(z)).min(1.0)
    };
    Ok(RankSumResult {
        u,
        p,
        method: PValueMethod::Normal,
    })
}
