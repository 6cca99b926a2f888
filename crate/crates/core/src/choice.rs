//! Marginal discrete-choice models: binary logit and ordered logit.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};

#[derive(Debug, Error)]
pub enum ChoiceError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("thresholds must be strictly increasing and finite")]
    ThresholdOrder,
    #[error("level {level} outside 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("zero-probability observation at row {row}")]
    DegenerateLikelihood { row: usize },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Standard logistic CDF, stable for large |x|.
pub fn logistic_cdf(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(logistic_cdf(x))` without underflow.
pub fn log_logistic_cdf(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Logistic density `F(x)(1 - F(x))`.
pub fn logistic_pdf(x: f64) -> f64 {
    let p = logistic_cdf(x);
    p * logistic_cdf(-x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryLogitParams {
    pub beta: Vec<f64>,
}

impl BinaryLogitParams {
    pub fn new(beta: Vec<f64>) -> Self {
        BinaryLogitParams { beta }
    }

    pub fn index(&self, x: ArrayView1<f64>) -> Result<f64, ChoiceError> {
        dot(&self.beta, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderedLogitParams {
    pub gamma: Vec<f64>,
    deltas: Vec<f64>,
}

impl OrderedLogitParams {
    pub fn new(gamma: Vec<f64>, deltas: Vec<f64>) -> Result<Self, ChoiceError> {
        check_thresholds(&deltas)?;
        Ok(OrderedLogitParams { gamma, deltas })
    }

    pub fn deltas(&self) -> &[f64] {
        &self.deltas
    }

    /// Number of ordinal levels `K`.
    pub fn levels(&self) -> usize {
        self.deltas.len() + 1
    }

    pub fn index(&self, z: ArrayView1<f64>) -> Result<f64, ChoiceError> {
        dot(&self.gamma, z)
    }

    /// `delta_j` with `delta_0 = -inf` and `delta_K = +inf`.
    pub fn threshold(&self, j: usize) -> f64 {
        if j == 0 {
            f64::NEG_INFINITY
        } else if j > self.deltas.len() {
            f64::INFINITY
        } else {
            self.deltas[j - 1]
        }
    }
}

pub(crate) fn check_thresholds(deltas: &[f64]) -> Result<(), ChoiceError> {
    if deltas.is_empty()
        || deltas.iter().any(|d| !d.is_finite())
        || deltas.windows(2).any(|w| !(w[0] < w[1]))
    {
        return Err(ChoiceError::ThresholdOrder);
    }
    Ok(())
}

fn dot(coef: &[f64], x: ArrayView1<f64>) -> Result<f64, ChoiceError> {
    if coef.len() != x.len() {
        return Err(ChoiceError::DimMismatch {
            expected: coef.len(),
            got: x.len(),
        });
    }
    Ok(coef.iter().zip(x.iter()).map(|(b, v)| b * v).sum())
}

/// `P(r = 1) = logistic_cdf(beta . x)`.
pub fn binary_logit_prob(params: &BinaryLogitParams, x: ArrayView1<f64>) -> Result<f64, ChoiceError> {
    Ok(logistic_cdf(params.index(x)?))
}

/// Probability of level `k` (1-based) for index `gamma . z`.
pub fn ordered_logit_prob(
    params: &OrderedLogitParams,
    z: ArrayView1<f64>,
    k: usize,
) -> Result<f64, ChoiceError> {
    let levels = params.levels();
    if k == 0 || k > levels {
        return Err(ChoiceError::LevelOutOfRange { level: k, levels });
    }
    let idx = params.index(z)?;
    Ok(interval_prob(params.threshold(k - 1) - idx, params.threshold(k) - idx))
}

/// `F(hi) - F(lo)` for the logistic CDF, computed on whichever tail keeps
/// precision.
pub(crate) fn interval_prob(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        logistic_cdf(-lo) - logistic_cdf(-hi)
    } else {
        logistic_cdf(hi) - logistic_cdf(lo)
    }
}

/// A marginal model with its outcome and covariate columns.
#[derive(Debug, Clone, PartialEq)]
pub enum MarginalModel {
    Binary(BinaryLogitParams),
    Ordered(OrderedLogitParams),
}

/// Log-likelihood and analytic gradient of a marginal model over a dataset.
///
/// For the ordered model the gradient is ordered `[gamma..., delta...]`.
pub fn marginal_loglik<S: AsRef<str>>(
    model: &MarginalModel,
    data: &Dataset,
    outcome: &str,
    covariates: &[S],
) -> Result<(f64, Array1<f64>), ChoiceError> {
    let x = data.matrix(covariates)?;
    match model {
        MarginalModel::Binary(p) => binary_loglik(p, x.view(), &data.binary(outcome)?),
        MarginalModel::Ordered(p) => ordered_loglik(p, x.view(), &data.ordinal_levels(outcome)?),
    }
}

pub fn binary_loglik(
    params: &BinaryLogitParams,
    x: ArrayView2<f64>,
    r: &[u8],
) -> Result<(f64, Array1<f64>), ChoiceError> {
    if x.ncols() != params.beta.len() {
        return Err(ChoiceError::DimMismatch {
            expected: params.beta.len(),
            got: x.ncols(),
        });
    }
    let mut ll = 0.0;
    let mut grad = Array1::zeros(params.beta.len());
    for (i, (row, &ri)) in x.rows().into_iter().zip(r).enumerate() {
        let idx = params.index(row)?;
        let (lp, resid) = if ri == 1 {
            (log_logistic_cdf(idx), logistic_cdf(-idx))
        } else {
            (log_logistic_cdf(-idx), -logistic_cdf(idx))
        };
        if !lp.is_finite() {
            return Err(ChoiceError::DegenerateLikelihood { row: i + 1 });
        }
        ll += lp;
        grad.scaled_add(resid, &row);
    }
    Ok((ll, grad))
}

pub fn ordered_loglik(
    params: &OrderedLogitParams,
    z: ArrayView2<f64>,
    levels: &[usize],
) -> Result<(f64, Array1<f64>), ChoiceError> {
    let m = params.gamma.len();
    if z.ncols() != m {
        return Err(ChoiceError::DimMismatch {
            expected: m,
            got: z.ncols(),
        });
    }
    let k_max = params.levels();
    let mut ll = 0.0;
    let mut grad = Array1::zeros(m + k_max - 1);
    for (i, (row, &k)) in z.rows().into_iter().zip(levels).enumerate() {
        if k == 0 || k > k_max {
            return Err(ChoiceError::LevelOutOfRange { level: k, levels: k_max });
        }
        let idx = params.index(row)?;
        let lo = params.threshold(k - 1) - idx;
        let hi = params.threshold(k) - idx;
        let p = interval_prob(lo, hi);
        if !(p > 0.0) {
            return Err(ChoiceError::DegenerateLikelihood { row: i + 1 });
        }
        ll += p.ln();
        let f_hi = if k < k_max { logistic_pdf(hi) } else { 0.0 };
        let f_lo = if k > 1 { logistic_pdf(lo) } else { 0.0 };
        if k < k_max {
            grad[m + k - 1] += f_hi / p;
        }
        if k > 1 {
            grad[m + k - 2] -= f_lo / p;
        }
        let g = -(f_hi - f_lo) / p;
        for (j, &zj) in row.iter().enumerate() {
            grad[j] += g * zj;
        }
    }
    Ok((ll, grad))
}
