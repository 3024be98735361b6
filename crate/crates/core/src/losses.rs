//! Scalar losses and their analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::dot;

/// Probabilities below this are clamped inside logarithms.
pub const LOG_EPS: f64 = 1e-12;

/// Default contrastive temperature.
pub const DEFAULT_TAU: f64 = 0.1;

#[inline]
fn clamped_ln(p: f64) -> f64 {
    p.max(LOG_EPS).ln()
}

/// Cross-entropy `-ln p_y` and its gradient with respect to the logits,
/// `p - onehot(y)`.
pub fn cross_entropy(probs: &[f64], y: usize) -> (f64, Vec<f64>) {
    let loss = -clamped_ln(probs[y]);
    let mut grad = probs.to_vec();
    grad[y] -= 1.0;
    (loss, grad)
}

/// Softmax response: the largest class probability.
pub fn sr_confidence(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Index of the largest probability, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One anchor's view of the sample queues.
#[derive(Debug, Clone)]
pub struct CscContext<'a> {
    pub anchor_z: &'a [f64],
    /// Softmax response of the anchor; a constant weight.
    pub sr: f64,
    pub positives: &'a [&'a [f64]],
    pub negatives: &'a [&'a [f64]],
    pub tau: f64,
}

impl CscContext<'_> {
    fn check(&self) -> Result<()> {
        if self.positives.is_empty() {
            return Err(Error::EmptyPositiveSet);
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    fn similarities(&self, set: &[&[f64]]) -> Vec<f64> {
        set.iter().map(|v| dot(self.anchor_z, v) / self.tau).collect()
    }
}

/// Log-sum-exp over `{pos} ∪ negs`.
fn lse_with(pos: f64, negs: &[f64], neg_max: f64) -> (f64, f64) {
    let m = pos.max(neg_max);
    let sum = (pos - m).exp() + negs.iter().map(|s| (s - m).exp()).sum::<f64>();
    (m + sum.ln(), m)
}

/// Confidence-weighted contrastive loss of one anchor:
///
/// `sr / |P| · Σ_p [ log Σ_{a ∈ N ∪ {p}} exp(z·z_a/τ) − z·z_p/τ ]`
pub fn csc_loss(ctx: &CscContext<'_>) -> Result<f64> {
    ctx.check()?;
    let pos = ctx.similarities(ctx.positives);
    let neg = ctx.similarities(ctx.negatives);
    let neg_max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = pos
        .iter()
        .map(|&sp| lse_with(sp, &neg, neg_max).0 - sp)
        .sum();
    Ok(ctx.sr * total / pos.len() as f64)
}

/// Gradient of [`csc_loss`] with respect to the anchor vector `z`, treating
/// `sr` and the queued vectors as constants.
///
/// With `π_p(a)` the softmax of `z·z_a/τ` over `N ∪ {p}`:
/// `sr/(τ|P|) · Σ_p [ (π_p(p) − 1) z_p + Σ_n π_p(n) z_n ]`.
pub fn csc_grad_anchor(ctx: &CscContext<'_>) -> Result<Vec<f64>> {
    ctx.check()?;
    let dim = ctx.anchor_z.len();
    let pos = ctx.similarities(ctx.positives);
    let neg = ctx.similarities(ctx.negatives);
    let neg_max = neg.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut pos_coef = vec![0.0; pos.len()];
    let mut neg_coef = vec![0.0; neg.len()];
    for (j, &sp) in pos.iter().enumerate() {
        let (lse, _) = lse_with(sp, &neg, neg_max);
        pos_coef[j] = (sp - lse).exp() - 1.0;
        for (c, &sn) in neg_coef.iter_mut().zip(&neg) {
            *c += (sn - lse).exp();
        }
    }

    let scale = ctx.sr / (ctx.tau * pos.len() as f64);
    let mut grad = vec![0.0; dim];
    for (c, v) in pos_coef.iter().zip(ctx.positives).chain(neg_coef.iter().zip(ctx.negatives)) {
        for (g, x) in grad.iter_mut().zip(v.iter()) {
            *g += c * x;
        }
    }
    for g in &mut grad {
        *g *= scale;
    }
    Ok(grad)
}

/// Chains a gradient with respect to `z = c/‖c‖` back to `c`:
/// `(I − z zᵀ) g / ‖c‖`.
pub fn normalization_jacobian_vjp(z: &[f64], norm: f64, grad_z: &[f64]) -> Vec<f64> {
    let proj = dot(z, grad_z);
    grad_z
        .iter()
        .zip(z)
        .map(|(g, zi)| (g - proj * zi) / norm)
        .collect()
}

/// `f_y − max_{j≠y} f_j`.
pub fn margin_gamma(probs: &[f64], y: usize) -> f64 {
    let other = probs
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &p)| p)
        .fold(f64::NEG_INFINITY, f64::max);
    probs[y] - other
}

/// Penalized 0/1 selective loss: 0/1 error when selected, `lambda` when
/// rejected.
pub fn selective_loss_l0(correct: bool, g: f64, h: f64, lambda: f64) -> f64 {
    if g >= h {
        if correct {
            0.0
        } else {
            1.0
        }
    } else {
        lambda
    }
}

/// Parameters of the max-hinge margin loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginParams {
    pub rho: f64,
    pub rho_prime: f64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        Self {
            rho: 1.0,
            rho_prime: 1.0,
            alpha: 1.0,
            beta: 1.0,
            lambda: 1.0,
        }
    }
}

impl MarginParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.rho, self.rho_prime, self.alpha, self.beta, self.lambda];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("margin parameters must be positive: {self:?}")))
        }
    }
}

/// Max-hinge surrogate of the selective loss, evaluated on the shifted
/// confidence `g_shifted = g − h` (negative means rejected).
pub fn max_hinge_loss(g_shifted: f64, gamma: f64, mp: &MarginParams) -> f64 {
    let select_term = 1.0 + mp.alpha / 2.0 * (g_shifted / mp.rho_prime - gamma / mp.rho);
    let reject_term = mp.lambda * (1.0 - mp.beta * g_shifted / mp.rho_prime);
    select_term.max(0.0).max(reject_term.max(0.0))
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Soft-target abstention loss with entropy regularization over `k+1`
/// outputs (the last one abstains):
///
/// `−t_y ln f_y − (1 − t_y) ln f_{k+1} + β H(f)`
///
/// Returns the loss and its gradient with respect to the `k+1` logits.
pub fn sat_em_loss(probs_ext: &[f64], t_y: f64, y: usize, beta_em: f64) -> (f64, Vec<f64>) {
    let abstain = probs_ext.len() - 1;
    let mut loss = -t_y * clamped_ln(probs_ext[y]);
    let mut grad: Vec<f64> = probs_ext.iter().map(|&p| t_y * p).collect();
    grad[y] -= t_y;

    let rest = 1.0 - t_y;
    if rest != 0.0 {
        loss -= rest * clamped_ln(probs_ext[abstain]);
        for (g, &p) in grad.iter_mut().zip(probs_ext) {
            *g += rest * p;
        }
        grad[abstain] -= rest;
    }

    if beta_em != 0.0 {
        let h = entropy(probs_ext);
        loss += beta_em * h;
        // dH/du_j = −p_j (ln p_j + H)
        for (g, &p) in grad.iter_mut().zip(probs_ext) {
            if p > 0.0 {
                *g -= beta_em * p * (p.ln() + h);
            }
        }
    }
    (loss, grad)
}

/// `t ← m·t + (1 − m)·f`, entrywise.
pub fn sat_target_update(t: &[f64], probs: &[f64], m_sat: f64) -> Result<Vec<f64>> {
    if t.len() != probs.len() {
        return Err(Error::Config(format!(
            "target has {} entries, prediction has {}",
            t.len(),
            probs.len()
        )));
    }
    Ok(t.iter()
        .zip(probs)
        .map(|(&ti, &pi)| m_sat * ti + (1.0 - m_sat) * pi)
        .collect())
}

/// Per-sample soft targets for the abstention head.
#[derive(Debug, Clone, PartialEq)]
pub struct SatState {
    /// One row of class scores per training sample.
    pub targets: Vec<Vec<f64>>,
    pub m_sat: f64,
    pub beta_em: f64,
}

impl SatState {
    /// One-hot targets from the labels.
    pub fn new(labels: &[usize], num_classes: usize, m_sat: f64, beta_em: f64) -> Result<Self> {
        if !(m_sat > 0.0 && m_sat < 1.0) || !(beta_em >= 0.0) {
            return Err(Error::Config(format!(
                "invalid SAT settings: m_sat={m_sat}, beta_em={beta_em}"
            )));
        }
        let targets = labels
            .iter()
            .map(|&y| {
                let mut t = vec![0.0; num_classes];
                t[y] = 1.0;
                t
            })
            .collect();
        Ok(Self {
            targets,
            m_sat,
            beta_em,
        })
    }

    pub fn update(&mut self, sample: usize, class_probs: &[f64]) -> Result<()> {
        self.targets[sample] = sat_target_update(&self.targets[sample], class_probs, self.m_sat)?;
        Ok(())
    }
}
