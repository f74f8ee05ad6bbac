//! Redundancy-reduction loss on the batch cross-correlation of two views,
//! plus regression losses.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of {0} is too small, need at least 2")]
    BatchTooSmall(usize),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the off-diagonal term.
    pub lambda: f64,
    /// Added to each column's standard deviation before dividing.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0051,
            eps: 1e-5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(LossError::InvalidConfig(format!("lambda = {}", self.lambda)));
        }
        if !(self.eps >= 0.0 && self.eps.is_finite()) {
            return Err(LossError::InvalidConfig(format!("eps = {}", self.eps)));
        }
        Ok(())
    }
}

/// `C = Ẑaᵀ Ẑb / B` where `Ẑ` has zero-mean, unit-std columns over the batch.
pub fn cross_correlation(tape: &mut Tape, za: Var, zb: Var, eps: f64) -> Result<Var, LossError> {
    let (a, b) = (tape.value(za), tape.value(zb));
    if !a.is_matrix() || a.shape() != b.shape() {
        return Err(LossError::ShapeMismatch(format!(
            "views have shapes {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let batch = a.rows();
    if batch < 2 {
        return Err(LossError::BatchTooSmall(batch));
    }
    let sa = tape.column_standardize(za, eps)?;
    let sb = tape.column_standardize(zb, eps)?;
    let sat = tape.transpose(sa)?;
    let c = tape.matmul(sat, sb)?;
    Ok(tape.scale(c, 1.0 / batch as f64))
}

/// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2`
pub fn barlow_twins_loss(tape: &mut Tape, c: Var, cfg: &LossConfig) -> Result<Var, LossError> {
    let value = tape.value(c);
    if !value.is_matrix() || value.rows() != value.cols() {
        return Err(LossError::ShapeMismatch(format!(
            "cross-correlation has shape {:?}",
            value.shape()
        )));
    }
    let d = value.rows();
    let eye = tape.constant(Tensor::eye(d));
    let mut weights = Tensor::filled(&[d, d], cfg.lambda);
    for i in 0..d {
        weights.data_mut()[i * d + i] = 1.0;
    }
    let weights = tape.constant(weights);
    let diff = tape.sub(c, eye)?;
    let sq = tape.mul(diff, diff)?;
    let weighted = tape.mul(sq, weights)?;
    Ok(tape.sum(weighted))
}

/// Mean squared error over all elements of two equally shaped tensors.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, LossError> {
    let (p, t) = (tape.value(pred), tape.value(target));
    if p.shape() != t.shape() || p.numel() == 0 {
        return Err(LossError::ShapeMismatch(format!(
            "pred {:?} vs target {:?}",
            p.shape(),
            t.shape()
        )));
    }
    let n = p.numel();
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / n as f64))
}

pub fn mae_metric(pred: &[f64], target: &[f64]) -> Result<f64, LossError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(LossError::ShapeMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    let total: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(total / pred.len() as f64)
}
