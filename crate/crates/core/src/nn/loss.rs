//! Binary classification losses on probabilities, with analytic gradients
//! with respect to the pre-sigmoid logit.
//!
//! Probabilities are clamped to `[EPSILON, 1 - EPSILON]` before the log
//! terms; batch reduction is the arithmetic mean.

use super::ModelError;
use serde::{Deserialize, Serialize};

/// Probability clamp for numerical stability of the log terms.
pub const PROB_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Focal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_gamma() -> f64 {
    2.0
}

fn default_alpha() -> f64 {
    0.25
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::Ce,
            gamma: default_gamma(),
            alpha: default_alpha(),
        }
    }
}

impl LossConfig {
    pub fn ce() -> LossConfig {
        LossConfig {
            kind: LossKind::Ce,
            ..LossConfig::default()
        }
    }

    pub fn focal(gamma: f64, alpha: f64) -> LossConfig {
        LossConfig {
            kind: LossKind::Focal,
            gamma,
            alpha,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.kind == LossKind::Focal {
            if self.gamma < 0.0 {
                return Err(ModelError::Config(format!(
                    "focal gamma must be >= 0, got {}",
                    self.gamma
                )));
            }
            if !(self.alpha > 0.0 && self.alpha < 1.0) {
                return Err(ModelError::Config(format!(
                    "focal alpha must be in (0,1), got {}",
                    self.alpha
                )));
            }
        }
        Ok(())
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON)
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Sigmoid clamped away from {0, 1}, so outputs are strictly inside (0, 1).
pub fn sigmoid_clamped(z: f64) -> f64 {
    clamp_prob(sigmoid(z))
}

/// Per-item cross entropy: `-[y ln p + (1-y) ln(1-p)]`.
pub fn bce_item(p: f64, y: u8) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Per-item focal loss: `-a(1-p)^g ln p` for y=1, `-(1-a)p^g ln(1-p)` else.
pub fn focal_item(p: f64, y: u8, gamma: f64, alpha: f64) -> f64 {
    let p = clamp_prob(p);
    if y == 1 {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

/// Batch-mean binary cross entropy.
pub fn binary_cross_entropy(probs: &[f64], labels: &[u8]) -> f64 {
    debug_assert_eq!(probs.len(), labels.len());
    let n = probs.len().max(1);
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| bce_item(p, y))
        .sum::<f64>()
        / n as f64
}

/// Batch-mean focal loss.
pub fn focal_loss(
    probs: &[f64],
    labels: &[u8],
    gamma: f64,
    alpha: f64,
) -> Result<f64, ModelError> {
    LossConfig::focal(gamma, alpha).validate()?;
    debug_assert_eq!(probs.len(), labels.len());
    let n = probs.len().max(1);
    Ok(probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| focal_item(p, y, gamma, alpha))
        .sum::<f64>()
        / n as f64)
}

/// Per-item loss under `cfg`.
pub fn item_loss(cfg: &LossConfig, p: f64, y: u8) -> f64 {
    match cfg.kind {
        LossKind::Ce => bce_item(p, y),
        LossKind::Focal => focal_item(p, y, cfg.gamma, cfg.alpha),
    }
}

/// Batch-mean loss under `cfg`.
pub fn batch_loss(cfg: &LossConfig, probs: &[f64], labels: &[u8]) -> f64 {
    let n = probs.len().max(1);
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| item_loss(cfg, p, y))
        .sum::<f64>()
        / n as f64
}

/// Analytic d(item loss)/d(logit), with `p = sigmoid(logit)` clamped.
///
/// CE reduces to the familiar `p - y`; the focal expressions follow from the
/// chain rule through `dp/dz = p(1-p)`.
pub fn grad_wrt_logit(cfg: &LossConfig, logit: f64, y: u8) -> f64 {
    let p = sigmoid_clamped(logit);
    match cfg.kind {
        LossKind::Ce => {
            if y == 1 {
                p - 1.0
            } else {
                p
            }
        }
        LossKind::Focal => {
            let (g, a) = (cfg.gamma, cfg.alpha);
            if y == 1 {
                a * (1.0 - p).powf(g) * (g * p * p.ln() - (1.0 - p))
            } else {
                (1.0 - a) * p.powf(g) * (p - g * (1.0 - p) * (1.0 - p).ln())
            }
        }
    }
}
