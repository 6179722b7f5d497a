//! Preference losses on sequence log-probabilities, with their derivatives.

use crate::error::{Error, Result};
use crate::reward::classifier::softplus;

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{values:?}")))
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("beta must be positive, got {beta}")))
    }
}

/// A loss value with its partial derivatives w.r.t. the policy log-probabilities
/// of the chosen and rejected completions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss {
    pub loss: f64,
    pub d_chosen: f64,
    pub d_rejected: f64,
    /// The implicit reward margin inside the sigmoid.
    pub margin: f64,
}

/// `-log sigmoid(beta * ((lp_w - ref_w) - (lp_l - ref_l)))`.
pub fn dpo(lp_w: f64, lp_l: f64, ref_w: f64, ref_l: f64, beta: f64) -> Result<PairLoss> {
    check_beta(beta)?;
    check_finite(&[lp_w, lp_l, ref_w, ref_l])?;
    let margin = beta * ((lp_w - ref_w) - (lp_l - ref_l));
    let g = beta * sigmoid(-margin);
    Ok(PairLoss {
        loss: softplus(-margin),
        d_chosen: -g,
        d_rejected: g,
        margin,
    })
}

pub fn dpo_loss(lp_w: f64, lp_l: f64, ref_w: f64, ref_l: f64, beta: f64) -> Result<f64> {
    dpo(lp_w, lp_l, ref_w, ref_l, beta).map(|l| l.loss)
}

/// `-log sigmoid(beta * (lp_w - lp_l)) + nll_weight * (-lp_w / len_w)`.
pub fn cpo(lp_w: f64, lp_l: f64, beta: f64, nll_weight: f64, len_w: usize) -> Result<PairLoss> {
    check_beta(beta)?;
    check_finite(&[lp_w, lp_l, nll_weight])?;
    if nll_weight < 0.0 {
        return Err(Error::Config("nll_weight must be non-negative".into()));
    }
    if len_w == 0 {
        return Err(Error::Config("chosen completion length must be at least 1".into()));
    }
    let margin = beta * (lp_w - lp_l);
    let g = beta * sigmoid(-margin);
    let n = len_w as f64;
    Ok(PairLoss {
        loss: softplus(-margin) - nll_weight * lp_w / n,
        d_chosen: -g - nll_weight / n,
        d_rejected: g,
        margin,
    })
}

pub fn cpo_loss(lp_w: f64, lp_l: f64, beta: f64, nll_weight: f64, len_w: usize) -> Result<f64> {
    cpo(lp_w, lp_l, beta, nll_weight, len_w).map(|l| l.loss)
}
