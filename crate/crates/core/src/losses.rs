//! Classification losses on softmax outputs and their analytic logit gradients.
//!
//! The central pair is cross-entropy `-log p_y` and the expectation loss
//! `1 - p_y`, mixed as `alpha * CE + beta * EL`. The comparison losses
//! (focal, MAE, tamed CE, generalized CE, complement entropy, MPCE) are
//! provided as values; those that depend on `p_y` alone also have gradients
//! so they can be trained.
//!
//! Log-based losses clamp `p_y` to [`MIN_PROBABILITY`] before taking the log.
//! Gradients always use the unclamped softmax.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::math::{log_softmax, softmax, LogitVector, ProbabilityVector};

/// Lower clamp on `p_y` inside logarithms.
pub const MIN_PROBABILITY: f64 = 1e-300;

/// Mixing weights of `alpha * CE + beta * EL`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct MixWeights {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Deserialize)]
struct RawWeights {
    alpha: f64,
    beta: f64,
}

impl TryFrom<RawWeights> for MixWeights {
    type Error = Error;
    fn try_from(r: RawWeights) -> Result<Self> {
        Self::new(r.alpha, r.beta)
    }
}

impl MixWeights {
    pub const CE: MixWeights = MixWeights { alpha: 1.0, beta: 0.0 };
    pub const EL: MixWeights = MixWeights { alpha: 0.0, beta: 1.0 };

    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite()) {
            return Err(Error::NonFinite("mixing weights".into()));
        }
        if alpha < 0.0 || beta < 0.0 || alpha + beta <= 0.0 {
            return Err(invalid(format!(
                "mixing weights need alpha, beta >= 0 and alpha + beta > 0, got ({alpha}, {beta})"
            )));
        }
        Ok(Self { alpha, beta })
    }
}

/// A loss value together with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

fn target(p: &ProbabilityVector, y: usize) -> Result<f64> {
    p.get(y)
}

fn check_label(classes: usize, y: usize) -> Result<()> {
    if y >= classes {
        return Err(Error::ClassOutOfRange { label: y, classes });
    }
    Ok(())
}

fn neg_log(p_y: f64) -> f64 {
    -p_y.clamp(MIN_PROBABILITY, 1.0).ln()
}

pub fn ce_loss(p: &ProbabilityVector, y: usize) -> Result<f64> {
    Ok(neg_log(target(p, y)?))
}

pub fn el_loss(p: &ProbabilityVector, y: usize) -> Result<f64> {
    Ok(1.0 - target(p, y)?)
}

pub fn mixed_loss(p: &ProbabilityVector, y: usize, w: MixWeights) -> Result<f64> {
    Ok(w.alpha * ce_loss(p, y)? + w.beta * el_loss(p, y)?)
}

/// `dCE/dq_j = p_j - [j == y]`.
pub fn ce_grad(q: &LogitVector, y: usize) -> Result<LossEval> {
    check_label(q.len(), y)?;
    let p = softmax(q);
    let p = p.as_slice();
    let grad_logits = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| if j == y { pj - 1.0 } else { pj })
        .collect();
    Ok(LossEval {
        value: -log_softmax(q)[y],
        grad_logits,
    })
}

/// `dEL/dq_y = p_y (p_y - 1)`, `dEL/dq_j = p_y p_j` for `j != y`.
pub fn el_grad(q: &LogitVector, y: usize) -> Result<LossEval> {
    check_label(q.len(), y)?;
    let p = softmax(q);
    let p = p.as_slice();
    let py = p[y];
    let grad_logits = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| if j == y { py * (py - 1.0) } else { py * pj })
        .collect();
    Ok(LossEval {
        value: 1.0 - py,
        grad_logits,
    })
}

/// Gradient of `alpha * CE + beta * EL`:
/// `beta p_y^2 + p_y (alpha - beta) - alpha` at `y`, `p_j (beta p_y + alpha)` elsewhere.
pub fn mixed_grad(q: &LogitVector, y: usize, w: MixWeights) -> Result<LossEval> {
    check_label(q.len(), y)?;
    let p = softmax(q);
    let p = p.as_slice();
    let py = p[y];
    let MixWeights { alpha, beta } = w;
    let grad_logits = p
        .iter()
        .enumerate()
        .map(|(j, &pj)| {
            if j == y {
                beta * py * py + py * (alpha - beta) - alpha
            } else {
                pj * (beta * py + alpha)
            }
        })
        .collect();
    let ce = -log_softmax(q)[y];
    Ok(LossEval {
        value: alpha * ce + beta * (1.0 - py),
        grad_logits,
    })
}

pub const FOCAL_DEFAULT_GAMMA: f64 = 2.0;
pub const FOCAL_DEFAULT_WEIGHT: f64 = 0.25;

fn check_focal(gamma: f64, weight: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(invalid(format!("focal gamma must be >= 0, got {gamma}")));
    }
    if !(weight.is_finite() && weight > 0.0) {
        return Err(invalid(format!("focal weight must be > 0, got {weight}")));
    }
    Ok(())
}

/// `weight * (1 - p_y)^gamma * (-log p_y)`.
pub fn focal_loss(p: &ProbabilityVector, y: usize, gamma: f64, weight: f64) -> Result<f64> {
    check_focal(gamma, weight)?;
    let py = target(p, y)?;
    Ok(weight * (1.0 - py).powf(gamma) * neg_log(py))
}

/// L1 distance between the one-hot target and `p`, which equals `2 (1 - p_y)`.
pub fn mae_loss(p: &ProbabilityVector, y: usize) -> Result<f64> {
    target(p, y)?;
    Ok(p.as_slice()
        .iter()
        .enumerate()
        .map(|(j, &pj)| if j == y { 1.0 - pj } else { pj })
        .sum())
}

fn check_tce(a: f64) -> Result<()> {
    if !(0.0..1.0).contains(&a) {
        return Err(invalid(format!("tamed CE exponent must lie in [0, 1), got {a}")));
    }
    Ok(())
}

/// Tamed cross-entropy `(1/(1-a)) ((1 - log p_y)^(1-a) - 1/(1-a))`, as printed.
///
/// For `a > 0` this is `-a/(1-a)^2` rather than zero at `p_y = 1`.
pub fn tce_loss(p: &ProbabilityVector, y: usize, a: f64) -> Result<f64> {
    check_tce(a)?;
    let py = target(p, y)?;
    let k = 1.0 - a;
    Ok(((1.0 + neg_log(py)).powf(k) - 1.0 / k) / k)
}

fn check_gce(q: f64) -> Result<()> {
    if !(q > 0.0 && q <= 1.0) {
        return Err(invalid(format!("generalized CE exponent must lie in (0, 1], got {q}")));
    }
    Ok(())
}

/// `(1 - p_y^q) / q`; EL at `q = 1`, CE in the limit `q -> 0`.
pub fn generalized_ce_loss(p: &ProbabilityVector, y: usize, qexp: f64) -> Result<f64> {
    check_gce(qexp)?;
    let py = target(p, y)?;
    Ok((1.0 - py.powf(qexp)) / qexp)
}

/// Entropy of the non-target classes renormalized by `1 - p_y`.
///
/// `0 log 0` terms are zero, and `p_y = 1` gives zero.
pub fn complement_entropy(p: &ProbabilityVector, y: usize) -> Result<f64> {
    let py = target(p, y)?;
    let rest = 1.0 - py;
    if rest <= 0.0 {
        return Ok(0.0);
    }
    Ok(p.as_slice()
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &pj)| {
            let r = pj / rest;
            if r > 0.0 {
                -r * r.ln()
            } else {
                0.0
            }
        })
        .sum())
}

/// Exact gap between CE and EL, `-log p_y - (1 - p_y)`.
pub fn taylor_remainder(p_y: f64) -> Result<f64> {
    if !(p_y > 0.0 && p_y <= 1.0) {
        return Err(invalid(format!("taylor remainder needs p_y in (0, 1], got {p_y}")));
    }
    Ok(-p_y.ln() - (1.0 - p_y))
}

pub mod experimental {
    //! Losses that are provided for comparison but are not expected to train well.

    use super::*;

    /// `-(max_j p_j - p_y) log p_y`. Vanishes whenever `y` is the argmax,
    /// including near-uniform outputs, which stalls training.
    pub fn mpce_loss(p: &ProbabilityVector, y: usize) -> Result<f64> {
        let py = target(p, y)?;
        let pmax = p.as_slice().iter().copied().fold(0.0, f64::max);
        Ok((pmax - py) * neg_log(py))
    }
}

/// A loss identity plus its parameters, as it appears in experiment configs.
///
/// Serialized flat: `{"name": "focal", "gamma": 2.0, "weight": 0.25}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum LossSpec {
    Ce,
    El,
    Mixed {
        alpha: f64,
        beta: f64,
    },
    Focal {
        #[serde(default = "default_gamma")]
        gamma: f64,
        #[serde(default = "default_weight")]
        weight: f64,
    },
    Mae,
    Tce {
        tce_alpha: f64,
    },
    Gce {
        q_exponent: f64,
    },
    /// Experimental; value only.
    Mpce,
    /// Complement entropy; value only.
    Cot,
}

fn default_gamma() -> f64 {
    FOCAL_DEFAULT_GAMMA
}

fn default_weight() -> f64 {
    FOCAL_DEFAULT_WEIGHT
}

impl From<MixWeights> for LossSpec {
    fn from(w: MixWeights) -> Self {
        LossSpec::Mixed {
            alpha: w.alpha,
            beta: w.beta,
        }
    }
}

impl LossSpec {
    pub fn focal() -> Self {
        LossSpec::Focal {
            gamma: FOCAL_DEFAULT_GAMMA,
            weight: FOCAL_DEFAULT_WEIGHT,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossSpec::Ce => "ce",
            LossSpec::El => "el",
            LossSpec::Mixed { .. } => "mixed",
            LossSpec::Focal { .. } => "focal",
            LossSpec::Mae => "mae",
            LossSpec::Tce { .. } => "tce",
            LossSpec::Gce { .. } => "gce",
            LossSpec::Mpce => "mpce",
            LossSpec::Cot => "cot",
        }
    }

    pub fn is_experimental(&self) -> bool {
        matches!(self, LossSpec::Mpce)
    }

    /// Whether [`LossSpec::eval`] provides a gradient.
    pub fn has_gradient(&self) -> bool {
        !matches!(self, LossSpec::Mpce | LossSpec::Cot)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LossSpec::Mixed { alpha, beta } => MixWeights::new(alpha, beta).map(|_| ()),
            LossSpec::Focal { gamma, weight } => check_focal(gamma, weight),
            LossSpec::Tce { tce_alpha } => check_tce(tce_alpha),
            LossSpec::Gce { q_exponent } => check_gce(q_exponent),
            _ => Ok(()),
        }
    }

    /// `(alpha, beta)` when the loss is a CE/EL mixture.
    pub fn mix_weights(&self) -> Option<MixWeights> {
        match *self {
            LossSpec::Ce => Some(MixWeights::CE),
            LossSpec::El => Some(MixWeights::EL),
            LossSpec::Mixed { alpha, beta } => Some(MixWeights { alpha, beta }),
            _ => None,
        }
    }

    pub fn value(&self, p: &ProbabilityVector, y: usize) -> Result<f64> {
        match *self {
            LossSpec::Ce => ce_loss(p, y),
            LossSpec::El => el_loss(p, y),
            LossSpec::Mixed { alpha, beta } => mixed_loss(p, y, MixWeights::new(alpha, beta)?),
            LossSpec::Focal { gamma, weight } => focal_loss(p, y, gamma, weight),
            LossSpec::Mae => mae_loss(p, y),
            LossSpec::Tce { tce_alpha } => tce_loss(p, y, tce_alpha),
            LossSpec::Gce { q_exponent } => generalized_ce_loss(p, y, q_exponent),
            LossSpec::Mpce => experimental::mpce_loss(p, y),
            LossSpec::Cot => complement_entropy(p, y),
        }
    }

    /// Loss value and logit gradient.
    pub fn eval(&self, q: &LogitVector, y: usize) -> Result<LossEval> {
        match *self {
            LossSpec::Ce => ce_grad(q, y),
            LossSpec::El => el_grad(q, y),
            LossSpec::Mixed { alpha, beta } => mixed_grad(q, y, MixWeights::new(alpha, beta)?),
            LossSpec::Mpce | LossSpec::Cot => Err(Error::Unsupported(format!(
                "loss {:?} has no analytic gradient",
                self.name()
            ))),
            _ => {
                self.validate()?;
                check_label(q.len(), y)?;
                let p = softmax(q);
                let value = self.value(&p, y)?;
                let py = p.as_slice()[y];
                // every remaining loss depends on p_y only:
                // dL/dq_j = (p_y dL/dp_y) ([j == y] - p_j)
                let g = self.scaled_derivative(py);
                let grad_logits = p
                    .as_slice()
                    .iter()
                    .enumerate()
                    .map(|(j, &pj)| g * (if j == y { 1.0 } else { 0.0 } - pj))
                    .collect();
                Ok(LossEval { value, grad_logits })
            }
        }
    }

    /// `p_y * dL/dp_y` for losses that are functions of `p_y`.
    fn scaled_derivative(&self, py: f64) -> f64 {
        match *self {
            LossSpec::Ce => -1.0,
            LossSpec::El => -py,
            LossSpec::Mixed { alpha, beta } => -alpha - beta * py,
            LossSpec::Focal { gamma, weight } => {
                let omp = 1.0 - py;
                let log_py = py.max(MIN_PROBABILITY).ln();
                let first = if omp > 0.0 && gamma > 0.0 {
                    gamma * omp.powf(gamma - 1.0) * py * log_py
                } else {
                    0.0
                };
                weight * (first - omp.powf(gamma))
            }
            LossSpec::Mae => -2.0 * py,
            LossSpec::Tce { tce_alpha } => -(1.0 + neg_log(py)).powf(-tce_alpha),
            LossSpec::Gce { q_exponent } => -py.powf(q_exponent),
            LossSpec::Mpce | LossSpec::Cot => f64::NAN,
        }
    }
}
