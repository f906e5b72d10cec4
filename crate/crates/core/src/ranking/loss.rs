//! Pairwise and listwise ranking objectives with their derivatives.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairwiseKind {
    /// `ln(1 + e^{-x})`
    Bpr,
    /// `max(0, 1 - x)`
    Hinge,
}

impl std::str::FromStr for PairwiseKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "bpr" => Ok(PairwiseKind::Bpr),
            "hinge" => Ok(PairwiseKind::Hinge),
            other => Err(format!("unknown pairwise loss `{other}`")),
        }
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if lo == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

/// Loss on the score difference `x = r̂(preferred) − r̂(dispreferred)`.
pub fn pairwise_loss(diff: f64, kind: PairwiseKind) -> f64 {
    match kind {
        PairwiseKind::Bpr => softplus(-diff),
        PairwiseKind::Hinge => (1.0 - diff).max(0.0),
    }
}

/// d/dx of [`pairwise_loss`]. The hinge kink at `x = 1` takes the right derivative (0).
pub fn pairwise_loss_derivative(diff: f64, kind: PairwiseKind) -> f64 {
    match kind {
        PairwiseKind::Bpr => {
            // -σ(-x) = -1 / (1 + e^x)
            if diff >= 0.0 {
                let e = (-diff).exp();
                -e / (1.0 + e)
            } else {
                -1.0 / (1.0 + diff.exp())
            }
        }
        PairwiseKind::Hinge => {
            if diff < 1.0 {
                -1.0
            } else {
                0.0
            }
        }
    }
}

/// `−Σ_i log( exp(s_i) / Σ_{j≥i} exp(s_j) )` for scores arranged in the ideal order.
pub fn listwise_loss(scores_in_ideal_order: &[f64]) -> Result<f64> {
    Ok(listwise_loss_and_gradient(scores_in_ideal_order)?.0)
}

/// Listwise loss and its gradient with respect to each score.
pub fn listwise_loss_and_gradient(scores: &[f64]) -> Result<(f64, Vec<f64>)> {
    if scores.is_empty() {
        return Err(Error::Empty("listwise scores"));
    }
    let n = scores.len();
    // suffix log-sum-exp: lse[i] = log Σ_{j≥i} exp(s_j)
    let mut lse = vec![f64::NEG_INFINITY; n];
    let mut acc = f64::NEG_INFINITY;
    for i in (0..n).rev() {
        acc = log_add_exp(scores[i], acc);
        lse[i] = acc;
    }
    let loss = (0..n).map(|i| lse[i] - scores[i]).sum();
    // ∂L/∂s_k = −1 + Σ_{i≤k} exp(s_k − lse_i)
    let mut grad = vec![0.0; n];
    for k in 0..n {
        let mut g = -1.0;
        for l in &lse[..=k] {
            g += (scores[k] - l).exp();
        }
        grad[k] = g;
    }
    Ok((loss, grad))
}
