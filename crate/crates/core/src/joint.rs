//! Copula joint model of a binary outcome (stress) and an ordinal outcome
//! (wait category): cell probabilities, maximum likelihood and family
//! comparison.

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::{
    binary_loglik, check_thresholds, interval_prob, logistic_cdf, logistic_pdf, ordered_loglik,
    BinaryLogitParams, ChoiceError, OrderedLogitParams,
};
use crate::copula::{Copula, CopulaError, FamilyKind};
use crate::dataset::{ColumnKind, Dataset, DatasetError};
use crate::optim::{fd_hessian, max_norm, minimize, spd_inverse, BfgsOptions};

pub const JOINT_FORMAT: &str = "jointfit/1";
pub const DEFAULT_LEVELS: usize = 3;
/// Cells below this (but above `-NEGATIVE_CELL_TOL`) are treated as zero.
pub const PROB_FLOOR: f64 = 1e-300;
pub const NEGATIVE_CELL_TOL: f64 = 1e-12;

const CHUNK: usize = 2048;
const HESSIAN_STEP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum JointError {
    #[error("negative cell probability {prob} (copula validity breach)")]
    NegativeCell { prob: f64 },
    #[error("zero-probability observation at row {row}")]
    DegenerateLikelihood { row: usize },
    #[error("wait outcome has {got} levels, model expects {expected}")]
    LevelMismatch { expected: usize, got: usize },
    #[error("column `{column}` must be {expected}")]
    ColumnKind { column: String, expected: &'static str },
    #[error("parameter vector does not match the model: {0}")]
    Params(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("family comparison needs at least 2 families, got {0}")]
    TooFewFamilies(usize),
    #[error(transparent)]
    Copula(#[from] CopulaError),
    #[error(transparent)]
    Choice(#[from] ChoiceError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, JointError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointSpec {
    pub stress_outcome: String,
    pub wait_outcome: String,
    pub stress_columns: Vec<String>,
    pub wait_columns: Vec<String>,
    pub family: FamilyKind,
    pub levels: usize,
}

impl JointSpec {
    pub fn new(
        stress_outcome: impl Into<String>,
        wait_outcome: impl Into<String>,
        stress_columns: Vec<String>,
        wait_columns: Vec<String>,
        family: FamilyKind,
    ) -> Self {
        JointSpec {
            stress_outcome: stress_outcome.into(),
            wait_outcome: wait_outcome.into(),
            stress_columns,
            wait_columns,
            family,
            levels: DEFAULT_LEVELS,
        }
    }

    pub fn with_family(&self, family: FamilyKind) -> Self {
        JointSpec {
            family,
            ..self.clone()
        }
    }

    pub fn n_params(&self) -> usize {
        self.stress_columns.len()
            + self.wait_columns.len()
            + (self.levels - 1)
            + usize::from(self.family.has_parameter())
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .stress_columns
            .iter()
            .map(|c| format!("stress:{c}"))
            .collect();
        names.extend(self.wait_columns.iter().map(|c| format!("wait:{c}")));
        names.extend((1..self.levels).map(|j| format!("threshold:{j}")));
        if self.family.has_parameter() {
            names.push("theta".to_string());
        }
        names
    }
}

/// Parameters on the reported scale. `theta` is ignored for the product
/// copula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointParams {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub deltas: Vec<f64>,
    pub theta: f64,
}

impl JointParams {
    pub fn validate(&self, spec: &JointSpec) -> Result<Copula> {
        if self.beta.len() != spec.stress_columns.len() {
            return Err(JointError::Params(format!(
                "{} stress coefficients for {} columns",
                self.beta.len(),
                spec.stress_columns.len()
            )));
        }
        if self.gamma.len() != spec.wait_columns.len() {
            return Err(JointError::Params(format!(
                "{} wait coefficients for {} columns",
                self.gamma.len(),
                spec.wait_columns.len()
            )));
        }
        if self.deltas.len() + 1 != spec.levels {
            return Err(JointError::LevelMismatch {
                expected: spec.levels,
                got: self.deltas.len() + 1,
            });
        }
        check_thresholds(&self.deltas)?;
        Ok(Copula::new(spec.family, self.theta)?)
    }

    /// Reported-scale vector `[beta, gamma, deltas, theta?]`.
    pub fn to_vec(&self, family: FamilyKind) -> Vec<f64> {
        let mut v = self.beta.clone();
        v.extend(&self.gamma);
        v.extend(&self.deltas);
        if family.has_parameter() {
            v.push(self.theta);
        }
        v
    }

    pub fn from_slice(spec: &JointSpec, v: &[f64]) -> Result<Self> {
        if v.len() != spec.n_params() {
            return Err(JointError::Params(format!(
                "expected {} values, got {}",
                spec.n_params(),
                v.len()
            )));
        }
        let (p, m, d) = (spec.stress_columns.len(), spec.wait_columns.len(), spec.levels - 1);
        Ok(JointParams {
            beta: v[..p].to_vec(),
            gamma: v[p..p + m].to_vec(),
            deltas: v[p + m..p + m + d].to_vec(),
            theta: if spec.family.has_parameter() { v[p + m + d] } else { 0.0 },
        })
    }
}

/// Design matrices and outcomes extracted from a dataset.
#[derive(Debug, Clone)]
pub struct JointData {
    pub x: Array2<f64>,
    pub z: Array2<f64>,
    pub r: Vec<u8>,
    pub k: Vec<usize>,
}

impl JointData {
    pub fn from_dataset(spec: &JointSpec, data: &Dataset) -> Result<Self> {
        let schema = data.schema();
        let stress = schema.column(&spec.stress_outcome)?;
        if stress.kind != ColumnKind::Binary {
            return Err(JointError::ColumnKind {
                column: spec.stress_outcome.clone(),
                expected: "binary",
            });
        }
        match &schema.column(&spec.wait_outcome)?.kind {
            ColumnKind::Ordinal { categories } => {
                if categories.len() != spec.levels {
                    return Err(JointError::LevelMismatch {
                        expected: spec.levels,
                        got: categories.len(),
                    });
                }
            }
            _ => {
                return Err(JointError::ColumnKind {
                    column: spec.wait_outcome.clone(),
                    expected: "ordinal",
                })
            }
        }
        Ok(JointData {
            x: data.matrix(&spec.stress_columns)?,
            z: data.matrix(&spec.wait_columns)?,
            r: data.binary(&spec.stress_outcome)?,
            k: data.ordinal_levels(&spec.wait_outcome)?,
        })
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    fn check(&self, spec: &JointSpec) -> Result<()> {
        if self.x.ncols() != spec.stress_columns.len() || self.z.ncols() != spec.wait_columns.len() {
            return Err(JointError::Params("design matrix width mismatch".into()));
        }
        if let Some(&k) = self.k.iter().find(|&&k| k == 0 || k > spec.levels) {
            return Err(ChoiceError::LevelOutOfRange {
                level: k,
                levels: spec.levels,
            }
            .into());
        }
        Ok(())
    }
}

/// Cell probability and its derivatives with respect to the stress index
/// `a = beta.x`, the wait index `b = gamma.z`, the lower and upper
/// thresholds of the cell and theta.
#[derive(Debug, Clone, Copy)]
struct Cell {
    p: f64,
    d_a: f64,
    d_b: f64,
    d_lo: f64,
    d_hi: f64,
    d_theta: f64,
}

fn cell(cop: &Copula, a: f64, b: f64, lo: f64, hi: f64, r: u8) -> Cell {
    let u = logistic_cdf(-a);
    let du_da = -logistic_pdf(a);
    let (v_lo, f_lo) = if lo == f64::NEG_INFINITY {
        (0.0, 0.0)
    } else {
        (logistic_cdf(lo - b), logistic_pdf(lo - b))
    };
    let (v_hi, f_hi) = if hi == f64::INFINITY {
        (1.0, 0.0)
    } else {
        (logistic_cdf(hi - b), logistic_pdf(hi - b))
    };
    let c_hi = cop.eval_unchecked(u, v_hi);
    let c_lo = cop.eval_unchecked(u, v_lo);
    // r = 0 cell and its partials
    let p0 = c_hi.value - c_lo.value;
    let d_a = (c_hi.du - c_lo.du) * du_da;
    let d_hi = c_hi.dv * f_hi;
    let d_lo = -c_lo.dv * f_lo;
    let d_b = -(d_hi + d_lo);
    let d_theta = c_hi.dtheta - c_lo.dtheta;
    if r == 0 {
        Cell {
            p: p0,
            d_a,
            d_b,
            d_lo,
            d_hi,
            d_theta,
        }
    } else {
        let m = interval_prob(lo - b, hi - b);
        Cell {
            p: m - p0,
            d_a: -d_a,
            d_b: -(f_hi - f_lo) - d_b,
            d_lo: -f_lo - d_lo,
            d_hi: f_hi - d_hi,
            d_theta: -d_theta,
        }
    }
}

fn threshold(deltas: &[f64], j: usize) -> f64 {
    if j == 0 {
        f64::NEG_INFINITY
    } else if j > deltas.len() {
        f64::INFINITY
    } else {
        deltas[j - 1]
    }
}

fn dot(a: &[f64], b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

fn check_cell(r: u8, k: usize, levels: usize) -> Result<()> {
    if r > 1 {
        return Err(JointError::Params(format!("stress outcome {r} is not 0/1")));
    }
    if k == 0 || k > levels {
        return Err(ChoiceError::LevelOutOfRange { level: k, levels }.into());
    }
    Ok(())
}

/// `P(stress = r, wait = k)` for one observation; `k` is 1-based.
pub fn joint_cell_prob(
    spec: &JointSpec,
    params: &JointParams,
    x: ArrayView1<f64>,
    z: ArrayView1<f64>,
    r: u8,
    k: usize,
) -> Result<f64> {
    Ok(joint_cell_prob_grad(spec, params, x, z, r, k)?.0)
}

/// Cell probability with its gradient on the reported parameter scale.
pub fn joint_cell_prob_grad(
    spec: &JointSpec,
    params: &JointParams,
    x: ArrayView1<f64>,
    z: ArrayView1<f64>,
    r: u8,
    k: usize,
) -> Result<(f64, Array1<f64>)> {
    let cop = params.validate(spec)?;
    if x.len() != params.beta.len() || z.len() != params.gamma.len() {
        return Err(JointError::Params("covariate vector length mismatch".into()));
    }
    check_cell(r, k, spec.levels)?;
    let c = cell(
        &cop,
        dot(&params.beta, x),
        dot(&params.gamma, z),
        threshold(&params.deltas, k - 1),
        threshold(&params.deltas, k),
        r,
    );
    if c.p < -NEGATIVE_CELL_TOL || c.p.is_nan() {
        return Err(JointError::NegativeCell { prob: c.p });
    }
    let mut g = Array1::zeros(spec.n_params());
    accumulate(&mut g, &c, 1.0, x, z, k, spec);
    Ok((c.p.max(0.0), g))
}

fn accumulate(
    g: &mut Array1<f64>,
    c: &Cell,
    w: f64,
    x: ArrayView1<f64>,
    z: ArrayView1<f64>,
    k: usize,
    spec: &JointSpec,
) {
    let p = x.len();
    let m = z.len();
    for (j, &xj) in x.iter().enumerate() {
        g[j] += w * c.d_a * xj;
    }
    for (j, &zj) in z.iter().enumerate() {
        g[p + j] += w * c.d_b * zj;
    }
    if k > 1 {
        g[p + m + k - 2] += w * c.d_lo;
    }
    if k < spec.levels {
        g[p + m + k - 1] += w * c.d_hi;
    }
    if spec.family.has_parameter() {
        g[p + m + spec.levels - 1] += w * c.d_theta;
    }
}

#[derive(Debug, Clone)]
struct LoglikEval {
    value: f64,
    grad: Array1<f64>,
    floored: usize,
}

/// Log-likelihood over all rows, evaluated in fixed chunks and reduced in
/// chunk order so the result does not depend on the thread count.
fn evaluate(spec: &JointSpec, params: &JointParams, data: &JointData, floor: bool) -> Result<LoglikEval> {
    let cop = params.validate(spec)?;
    data.check(spec)?;
    let n = data.n();
    let np = spec.n_params();
    let chunks: Vec<Result<LoglikEval>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut out = LoglikEval {
                value: 0.0,
                grad: Array1::zeros(np),
                floored: 0,
            };
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let x = data.x.row(i);
                let z = data.z.row(i);
                let (r, k) = (data.r[i], data.k[i]);
                check_cell(r, k, spec.levels)?;
                let cl = cell(
                    &cop,
                    dot(&params.beta, x),
                    dot(&params.gamma, z),
                    threshold(&params.deltas, k - 1),
                    threshold(&params.deltas, k),
                    r,
                );
                if cl.p < -NEGATIVE_CELL_TOL {
                    return Err(JointError::NegativeCell { prob: cl.p });
                }
                if cl.p.is_nan() || (cl.p < PROB_FLOOR && !floor) {
                    return Err(JointError::DegenerateLikelihood { row: i + 1 });
                }
                let p = if cl.p < PROB_FLOOR {
                    out.floored += 1;
                    PROB_FLOOR
                } else {
                    cl.p
                };
                out.value += p.ln();
                accumulate(&mut out.grad, &cl, 1.0 / p, x, z, k, spec);
            }
            Ok(out)
        })
        .collect();
    let mut total = LoglikEval {
        value: 0.0,
        grad: Array1::zeros(np),
        floored: 0,
    };
    for c in chunks {
        let c = c?;
        total.value += c.value;
        total.grad += &c.grad;
        total.floored += c.floored;
    }
    Ok(total)
}

/// Joint log-likelihood of a dataset.
pub fn joint_loglik(spec: &JointSpec, params: &JointParams, data: &Dataset) -> Result<f64> {
    let jd = JointData::from_dataset(spec, data)?;
    Ok(evaluate(spec, params, &jd, false)?.value)
}

/// Log-likelihood and its gradient on the reported scale.
pub fn joint_loglik_grad(
    spec: &JointSpec,
    params: &JointParams,
    data: &JointData,
) -> Result<(f64, Array1<f64>)> {
    let e = evaluate(spec, params, data, false)?;
    Ok((e.value, e.grad))
}

pub fn bic(loglik: f64, p: usize, n: usize) -> f64 {
    -2.0 * loglik + p as f64 * (n as f64).ln()
}

// Unconstrained scale: beta, gamma, first threshold, log threshold gaps,
// then theta (identity for Frank, atanh for FGM and Gaussian).

fn theta_to_free(family: FamilyKind, theta: f64) -> f64 {
    match family {
        FamilyKind::Fgm | FamilyKind::Gaussian => theta.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh(),
        _ => theta,
    }
}

fn to_free(spec: &JointSpec, params: &JointParams) -> Array1<f64> {
    let mut v = params.beta.clone();
    v.extend(&params.gamma);
    v.push(params.deltas[0]);
    v.extend(params.deltas.windows(2).map(|w| (w[1] - w[0]).ln()));
    if spec.family.has_parameter() {
        v.push(theta_to_free(spec.family, params.theta));
    }
    Array1::from(v)
}

fn from_free(spec: &JointSpec, w: &Array1<f64>) -> JointParams {
    let (p, m, d) = (spec.stress_columns.len(), spec.wait_columns.len(), spec.levels - 1);
    let mut deltas = Vec::with_capacity(d);
    deltas.push(w[p + m]);
    for j in 1..d {
        deltas.push(deltas[j - 1] + w[p + m + j].exp());
    }
    let theta = if spec.family.has_parameter() {
        let t = w[p + m + d];
        match spec.family {
            FamilyKind::Fgm | FamilyKind::Gaussian => t.tanh(),
            _ => t,
        }
    } else {
        0.0
    };
    JointParams {
        beta: w.slice(ndarray::s![..p]).to_vec(),
        gamma: w.slice(ndarray::s![p..p + m]).to_vec(),
        deltas,
        theta,
    }
}

/// Chain rule from the reported-scale gradient to the unconstrained one.
fn grad_to_free(spec: &JointSpec, w: &Array1<f64>, g: &Array1<f64>) -> Array1<f64> {
    let (p, m, d) = (spec.stress_columns.len(), spec.wait_columns.len(), spec.levels - 1);
    let mut out = g.clone();
    // suffix sums of threshold gradients
    let mut tail = 0.0;
    for j in (0..d).rev() {
        tail += g[p + m + j];
        out[p + m + j] = if j == 0 { tail } else { tail * w[p + m + j].exp() };
    }
    if spec.family.has_parameter() {
        if let FamilyKind::Fgm | FamilyKind::Gaussian = spec.family {
            let t = w[p + m + d].tanh();
            out[p + m + d] = g[p + m + d] * (1.0 - t * t);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub grad_tol: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 500,
            grad_tol: 1e-6,
        }
    }
}

impl FitOptions {
    fn bfgs(&self) -> BfgsOptions {
        BfgsOptions {
            max_iterations: self.max_iterations,
            grad_tol: self.grad_tol,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointFit {
    pub family: FamilyKind,
    pub parameter_names: Vec<String>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub deltas: Vec<f64>,
    pub theta: Option<f64>,
    pub loglik: f64,
    pub bic: f64,
    /// `None` when the observed information is not positive definite.
    pub std_errors: Option<Vec<f64>>,
    pub t_stats: Option<Vec<f64>>,
    pub n: usize,
    pub p: usize,
    pub converged: bool,
    pub iterations: usize,
    /// Gradient max-norm on the unconstrained scale at the returned point.
    pub grad_max_norm: f64,
}

impl JointFit {
    pub fn params(&self) -> JointParams {
        JointParams {
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
            deltas: self.deltas.clone(),
            theta: self.theta.unwrap_or(0.0),
        }
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.params().to_vec(self.family)
    }

    pub fn hessian_pd(&self) -> bool {
        self.std_errors.is_some()
    }
}

fn check_fit_data(spec: &JointSpec, data: &JointData) -> Result<()> {
    data.check(spec)?;
    let n = data.n();
    if n <= spec.n_params() {
        return Err(JointError::InsufficientData(format!(
            "{n} observations for {} parameters",
            spec.n_params()
        )));
    }
    if !(data.r.contains(&0) && data.r.contains(&1)) {
        return Err(JointError::InsufficientData("stress outcome takes a single value".into()));
    }
    let first = data.k[0];
    if data.k.iter().all(|&k| k == first) {
        return Err(JointError::InsufficientData("only one wait category present".into()));
    }
    Ok(())
}

/// Kendall tau-b between the binary and ordinal outcomes, from their 2xK
/// contingency table.
fn outcome_tau(data: &JointData, levels: usize) -> f64 {
    let mut table = vec![[0f64; 2]; levels];
    for (&r, &k) in data.r.iter().zip(&data.k) {
        table[k - 1][r as usize] += 1.0;
    }
    let (mut conc, mut disc) = (0.0, 0.0);
    for k in 0..levels {
        for l in 0..levels {
            if k < l {
                conc += table[k][0] * table[l][1];
            } else if k > l {
                disc += table[k][0] * table[l][1];
            }
        }
    }
    let n = data.n() as f64;
    let pairs = n * (n - 1.0) / 2.0;
    let ties = |c: f64| c * (c - 1.0) / 2.0;
    let n1: f64 = table.iter().map(|t| t[1]).sum();
    let tr = ties(n1) + ties(n - n1);
    let tk: f64 = table.iter().map(|t| ties(t[0] + t[1])).sum();
    let denom = ((pairs - tr) * (pairs - tk)).sqrt();
    if denom > 0.0 {
        (conc - disc) / denom
    } else {
        0.0
    }
}

/// Separate marginal maximum likelihood fits, used as the starting point of
/// every joint fit. Theta is left at 0.
pub fn marginal_warm_start(spec: &JointSpec, data: &JointData, opts: &FitOptions) -> Result<JointParams> {
    data.check(spec)?;
    let bfgs = opts.bfgs();
    let beta0 = Array1::zeros(spec.stress_columns.len());
    let binary = minimize(
        |w| match binary_loglik(&BinaryLogitParams::new(w.to_vec()), data.x.view(), &data.r) {
            Ok((l, g)) => (-l, -g),
            Err(_) => (f64::INFINITY, Array1::zeros(w.len())),
        },
        beta0,
        &bfgs,
    );

    // ordered logit on (gamma, first threshold, log gaps)
    let m = spec.wait_columns.len();
    let d = spec.levels - 1;
    let n = data.n() as f64;
    let mut counts = vec![0f64; spec.levels];
    for &k in &data.k {
        counts[k - 1] += 1.0;
    }
    let mut deltas = Vec::with_capacity(d);
    let mut cum = 0.0;
    for j in 0..d {
        cum += counts[j];
        let q = ((cum + 0.5) / (n + 1.0)).clamp(1e-6, 1.0 - 1e-6);
        let t = (q / (1.0 - q)).ln();
        let t = match deltas.last() {
            Some(&prev) if t <= prev + 1e-3 => prev + 1e-3,
            _ => t,
        };
        deltas.push(t);
    }
    let mut w0 = vec![0.0; m];
    w0.push(deltas[0]);
    w0.extend(deltas.windows(2).map(|w| (w[1] - w[0]).ln()));
    let unpack = |w: &Array1<f64>| {
        let mut ds = vec![w[m]];
        for j in 1..d {
            ds.push(ds[j - 1] + w[m + j].exp());
        }
        (w.slice(ndarray::s![..m]).to_vec(), ds)
    };
    let ordered = minimize(
        |w| {
            let (gamma, ds) = unpack(w);
            let res = OrderedLogitParams::new(gamma, ds)
                .and_then(|p| ordered_loglik(&p, data.z.view(), &data.k));
            match res {
                Ok((l, g)) => {
                    let mut gw = g.clone();
                    let mut tail = 0.0;
                    for j in (0..d).rev() {
                        tail += g[m + j];
                        gw[m + j] = if j == 0 { tail } else { tail * w[m + j].exp() };
                    }
                    (-l, -gw)
                }
                Err(_) => (f64::INFINITY, Array1::zeros(w.len())),
            }
        },
        Array1::from(w0),
        &bfgs,
    );
    let (gamma, deltas) = unpack(&ordered.x);
    Ok(JointParams {
        beta: binary.x.to_vec(),
        gamma,
        deltas,
        theta: 0.0,
    })
}

fn default_theta(spec: &JointSpec, data: &JointData) -> f64 {
    match spec.family {
        FamilyKind::Frank => {
            let tau = outcome_tau(data, spec.levels);
            if tau > 0.0 {
                0.1
            } else if tau < 0.0 {
                -0.1
            } else {
                0.0
            }
        }
        _ => 0.0,
    }
}

/// Maximum likelihood fit of the joint model. Without `init` the fit starts
/// from the separate marginal fits.
pub fn fit_joint_mle(
    spec: &JointSpec,
    data: &Dataset,
    init: Option<&JointParams>,
    opts: &FitOptions,
) -> Result<JointFit> {
    let jd = JointData::from_dataset(spec, data)?;
    fit_joint_data(spec, &jd, init, opts)
}

pub fn fit_joint_data(
    spec: &JointSpec,
    data: &JointData,
    init: Option<&JointParams>,
    opts: &FitOptions,
) -> Result<JointFit> {
    check_fit_data(spec, data)?;
    let start = match init {
        Some(p) => {
            p.validate(spec)?;
            p.clone()
        }
        None => {
            let mut p = marginal_warm_start(spec, data, opts)?;
            p.theta = default_theta(spec, data);
            p
        }
    };
    fit_from(spec, data, start, opts)
}

fn fit_from(spec: &JointSpec, data: &JointData, start: JointParams, opts: &FitOptions) -> Result<JointFit> {
    start.validate(spec)?;
    let res = minimize(
        |w| {
            let params = from_free(spec, w);
            match evaluate(spec, &params, data, true) {
                Ok(e) if e.value.is_finite() => (-e.value, -grad_to_free(spec, w, &e.grad)),
                _ => (f64::INFINITY, Array1::zeros(w.len())),
            }
        },
        to_free(spec, &start),
        &opts.bfgs(),
    );
    let params = from_free(spec, &res.x);
    // no floor at the reported point: a zero cell is an error here
    let at_opt = evaluate(spec, &params, data, false)?;

    let n = data.n();
    let p = spec.n_params();
    let est = Array1::from(params.to_vec(spec.family));
    let hess = fd_hessian(
        |v| {
            JointParams::from_slice(spec, v.as_slice().expect("contiguous"))
                .and_then(|pp| evaluate(spec, &pp, data, false))
                .map(|e| e.grad)
                .unwrap_or_else(|_| Array1::from_elem(p, f64::NAN))
        },
        &est,
        HESSIAN_STEP,
    );
    let std_errors = spd_inverse(&(-hess)).and_then(|cov| {
        let se: Vec<f64> = cov.diag().iter().map(|v| v.sqrt()).collect();
        se.iter().all(|s| s.is_finite() && *s > 0.0).then_some(se)
    });
    let t_stats = std_errors
        .as_ref()
        .map(|se| est.iter().zip(se).map(|(e, s)| e / s).collect());
    let grad_free = grad_to_free(spec, &res.x, &at_opt.grad);

    Ok(JointFit {
        family: spec.family,
        parameter_names: spec.parameter_names(),
        beta: params.beta,
        gamma: params.gamma,
        deltas: params.deltas,
        theta: spec.family.has_parameter().then_some(params.theta),
        loglik: at_opt.value,
        bic: bic(at_opt.value, p, n),
        std_errors,
        t_stats,
        n,
        p,
        converged: max_norm(&grad_free) < opts.grad_tol,
        iterations: res.iterations,
        grad_max_norm: max_norm(&grad_free),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyOutcome {
    pub family: FamilyKind,
    pub fit: Option<JointFit>,
    pub error: Option<String>,
}

/// Fits ranked by ascending BIC; failed families follow in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyComparison {
    pub ranked: Vec<FamilyOutcome>,
}

impl FamilyComparison {
    pub fn ranking(&self) -> Vec<FamilyKind> {
        self.ranked.iter().map(|r| r.family).collect()
    }

    pub fn best(&self) -> Option<&JointFit> {
        self.ranked.first().and_then(|r| r.fit.as_ref())
    }

    pub fn fit(&self, family: FamilyKind) -> Option<&JointFit> {
        self.ranked
            .iter()
            .find(|r| r.family == family)
            .and_then(|r| r.fit.as_ref())
    }

    pub fn failures(&self) -> Vec<(FamilyKind, &str)> {
        self.ranked
            .iter()
            .filter_map(|r| r.error.as_deref().map(|e| (r.family, e)))
            .collect()
    }
}

/// Fits every family from one shared marginal warm start and ranks them by
/// BIC. Per-family failures are recorded rather than aborting.
pub fn compare_families(
    spec: &JointSpec,
    data: &Dataset,
    families: &[FamilyKind],
    opts: &FitOptions,
) -> Result<FamilyComparison> {
    if families.len() < 2 {
        return Err(JointError::TooFewFamilies(families.len()));
    }
    let jd = JointData::from_dataset(spec, data)?;
    check_fit_data(spec, &jd)?;
    let warm = marginal_warm_start(spec, &jd, opts)?;
    let outcomes: Vec<FamilyOutcome> = families
        .par_iter()
        .map(|&family| {
            let s = spec.with_family(family);
            let mut start = warm.clone();
            start.theta = default_theta(&s, &jd);
            match fit_from(&s, &jd, start, opts) {
                Ok(fit) => FamilyOutcome {
                    family,
                    fit: Some(fit),
                    error: None,
                },
                Err(e) => FamilyOutcome {
                    family,
                    fit: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..outcomes.len()).collect();
    let key = |i: usize| outcomes[i].fit.as_ref().map_or(f64::INFINITY, |f| f.bic);
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    let mut slots: Vec<Option<FamilyOutcome>> = outcomes.into_iter().map(Some).collect();
    Ok(FamilyComparison {
        ranked: order.into_iter().map(|i| slots[i].take().expect("each index once")).collect(),
    })
}

/// Versioned JSON report of one or more fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointReport {
    pub format: String,
    pub spec: JointSpec,
    pub ranking: Vec<FamilyKind>,
    pub fits: Vec<FamilyOutcome>,
}

impl JointReport {
    pub fn from_comparison(spec: &JointSpec, cmp: &FamilyComparison) -> Self {
        JointReport {
            format: JOINT_FORMAT.to_string(),
            spec: spec.clone(),
            ranking: cmp.ranking(),
            fits: cmp.ranked.clone(),
        }
    }

    pub fn single(spec: &JointSpec, fit: &JointFit) -> Self {
        JointReport {
            format: JOINT_FORMAT.to_string(),
            spec: spec.clone(),
            ranking: vec![fit.family],
            fits: vec![FamilyOutcome {
                family: fit.family,
                fit: Some(fit.clone()),
                error: None,
            }],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::{binary_logit_prob, ordered_logit_prob};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(family: FamilyKind, p: usize, m: usize) -> JointSpec {
        JointSpec::new(
            "stress",
            "wait",
            (0..p).map(|i| format!("x{i}")).collect(),
            (0..m).map(|i| format!("z{i}")).collect(),
            family,
        )
    }

    fn random_theta(rng: &mut ChaCha8Rng, family: FamilyKind) -> f64 {
        match family {
            FamilyKind::Frank => rng.random_range(-15.0..15.0),
            FamilyKind::Fgm => rng.random_range(-1.0..=1.0),
            FamilyKind::Gaussian => rng.random_range(-0.98..0.98),
            FamilyKind::Product => 0.0,
        }
    }

    fn random_params(rng: &mut ChaCha8Rng, s: &JointSpec) -> JointParams {
        let mut deltas = vec![rng.random_range(-2.0..1.0)];
        for _ in 1..s.levels - 1 {
            let last = *deltas.last().unwrap();
            deltas.push(last + rng.random_range(0.1..2.0));
        }
        JointParams {
            beta: (0..s.stress_columns.len()).map(|_| rng.random_range(-1.5..1.5)).collect(),
            gamma: (0..s.wait_columns.len()).map(|_| rng.random_range(-1.5..1.5)).collect(),
            deltas,
            theta: random_theta(rng, s.family),
        }
    }

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Array1<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    /// Draws (r, k) directly from the cell probabilities.
    fn sample_data(rng: &mut ChaCha8Rng, s: &JointSpec, truth: &JointParams, n: usize) -> JointData {
        let p = s.stress_columns.len();
        let m = s.wait_columns.len();
        let x = Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0));
        let z = Array2::from_shape_fn((n, m), |_| rng.random_range(-1.0..1.0));
        let mut r = Vec::with_capacity(n);
        let mut k = Vec::with_capacity(n);
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = (1u8, s.levels);
            'outer: for rr in 0..2u8 {
                for kk in 1..=s.levels {
                    acc += joint_cell_prob(s, truth, x.row(i), z.row(i), rr, kk).unwrap();
                    if u < acc {
                        chosen = (rr, kk);
                        break 'outer;
                    }
                }
            }
            r.push(chosen.0);
            k.push(chosen.1);
        }
        JointData { x, z, r, k }
    }

    #[test]
    fn product_factorizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = spec(FamilyKind::Product, 2, 3);
        for _ in 0..200 {
            let params = random_params(&mut rng, &s);
            let x = random_vec(&mut rng, 2);
            let z = random_vec(&mut rng, 3);
            let pr1 = binary_logit_prob(&BinaryLogitParams::new(params.beta.clone()), x.view()).unwrap();
            let op = OrderedLogitParams::new(params.gamma.clone(), params.deltas.clone()).unwrap();
            for r in 0..2u8 {
                for k in 1..=3 {
                    let pk = ordered_logit_prob(&op, z.view(), k).unwrap();
                    let pr = if r == 1 { pr1 } else { 1.0 - pr1 };
                    let c = joint_cell_prob(&s, &params, x.view(), z.view(), r, k).unwrap();
                    assert!((c - pr * pk).abs() < 1e-14, "{c} vs {}", pr * pk);
                }
            }
        }
    }

    #[test]
    fn cells_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for family in FamilyKind::ALL {
            for levels in [2, 3, 5] {
                let mut s = spec(family, 2, 2);
                s.levels = levels;
                for _ in 0..200 {
                    let params = random_params(&mut rng, &s);
                    let x = random_vec(&mut rng, 2);
                    let z = random_vec(&mut rng, 2);
                    let mut total = 0.0;
                    for r in 0..2u8 {
                        for k in 1..=levels {
                            let c = joint_cell_prob(&s, &params, x.view(), z.view(), r, k).unwrap();
                            assert!(c >= -1e-12);
                            total += c;
                        }
                    }
                    assert!((total - 1.0).abs() < 1e-12, "{family} total {total}");
                }
            }
        }
    }

    fn frank_density(t: f64, s: f64, v: f64) -> f64 {
        let d = 1.0 - (-t).exp();
        let den = d - (1.0 - (-t * s).exp()) * (1.0 - (-t * v).exp());
        t * d * (-t * (s + v)).exp() / (den * den)
    }

    fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
        // Newton iteration on P_n
        (1..=n)
            .map(|i| {
                let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
                let mut dp = 0.0;
                for _ in 0..100 {
                    let (mut p0, mut p1) = (1.0, x);
                    for j in 2..=n {
                        let p2 = ((2 * j - 1) as f64 * x * p1 - (j - 1) as f64 * p0) / j as f64;
                        p0 = p1;
                        p1 = p2;
                    }
                    dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
                    let dx = p1 / dp;
                    x -= dx;
                    if dx.abs() < 1e-16 {
                        break;
                    }
                }
                (x, 2.0 / ((1.0 - x * x) * dp * dp))
            })
            .collect()
    }

    fn integrate_rect(f: impl Fn(f64, f64) -> f64, u0: f64, u1: f64, v0: f64, v1: f64) -> f64 {
        let gl = gauss_legendre(40);
        let panels = 4;
        let mut total = 0.0;
        for pu in 0..panels {
            let a = u0 + (u1 - u0) * pu as f64 / panels as f64;
            let b = u0 + (u1 - u0) * (pu + 1) as f64 / panels as f64;
            for pv in 0..panels {
                let c = v0 + (v1 - v0) * pv as f64 / panels as f64;
                let d = v0 + (v1 - v0) * (pv + 1) as f64 / panels as f64;
                for &(xi, wi) in &gl {
                    let s = 0.5 * (b - a) * xi + 0.5 * (a + b);
                    for &(yj, wj) in &gl {
                        let t = 0.5 * (d - c) * yj + 0.5 * (c + d);
                        total += wi * wj * f(s, t) * 0.25 * (b - a) * (d - c);
                    }
                }
            }
        }
        total
    }

    #[test]
    fn frank_cells_match_density_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = spec(FamilyKind::Frank, 2, 2);
        for _ in 0..10 {
            let mut params = random_params(&mut rng, &s);
            params.theta = -0.738;
            let x = random_vec(&mut rng, 2);
            let z = random_vec(&mut rng, 2);
            let a: f64 = params.beta.iter().zip(&x).map(|(b, v)| b * v).sum();
            let b: f64 = params.gamma.iter().zip(&z).map(|(g, v)| g * v).sum();
            let u = logistic_cdf(-a);
            let vs: Vec<f64> = std::iter::once(0.0)
                .chain(params.deltas.iter().map(|d| logistic_cdf(d - b)))
                .chain(std::iter::once(1.0))
                .collect();
            for r in 0..2u8 {
                for k in 1..=3 {
                    let (u0, u1) = if r == 0 { (0.0, u) } else { (u, 1.0) };
                    let oracle =
                        integrate_rect(|p, q| frank_density(-0.738, p, q), u0, u1, vs[k - 1], vs[k]);
                    let c = joint_cell_prob(&s, &params, x.view(), z.view(), r, k).unwrap();
                    assert!((c - oracle).abs() < 1e-10, "r={r} k={k}: {c} vs {oracle}");
                }
            }
        }
    }

    #[test]
    fn single_observation_loglik() {
        let s = spec(FamilyKind::Product, 1, 1);
        let params = JointParams {
            beta: vec![0.0],
            gamma: vec![0.0],
            deltas: vec![0.0, 1.0],
            theta: 0.0,
        };
        let data = JointData {
            x: array![[0.7]],
            z: array![[-0.3]],
            r: vec![1],
            k: vec![1],
        };
        let (ll, _) = joint_loglik_grad(&s, &params, &data).unwrap();
        assert!((ll - (0.25f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn product_loglik_is_sum_of_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = spec(FamilyKind::Product, 2, 2);
        let truth = random_params(&mut rng, &s);
        let data = sample_data(&mut rng, &s, &truth, 300);
        let params = random_params(&mut rng, &s);
        let (ll, _) = joint_loglik_grad(&s, &params, &data).unwrap();
        let (lb, _) = binary_loglik(&BinaryLogitParams::new(params.beta.clone()), data.x.view(), &data.r).unwrap();
        let op = OrderedLogitParams::new(params.gamma.clone(), params.deltas.clone()).unwrap();
        let (lo, _) = ordered_loglik(&op, data.z.view(), &data.k).unwrap();
        assert!((ll - lb - lo).abs() < 1e-9 * ll.abs());
    }

    #[test]
    fn loglik_matches_direct_copula_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for family in FamilyKind::ALL {
            let s = spec(family, 2, 1);
            let truth = random_params(&mut rng, &s);
            let data = sample_data(&mut rng, &s, &truth, 400);
            let cop = Copula::new(family, truth.theta).unwrap();
            let mut direct = 0.0;
            for i in 0..data.n() {
                let a = truth.beta[0] * data.x[[i, 0]] + truth.beta[1] * data.x[[i, 1]];
                let b = truth.gamma[0] * data.z[[i, 0]];
                let u = 1.0 / (1.0 + a.exp());
                let v = |j: usize| match j {
                    0 => 0.0,
                    3 => 1.0,
                    _ => 1.0 / (1.0 + (b - truth.deltas[j - 1]).exp()),
                };
                let k = data.k[i];
                let c0 = cop.cdf(u, v(k)).unwrap() - cop.cdf(u, v(k - 1)).unwrap();
                let p = if data.r[i] == 0 { c0 } else { v(k) - v(k - 1) - c0 };
                direct += p.ln();
            }
            let (ll, _) = joint_loglik_grad(&s, &truth, &data).unwrap();
            assert!((ll - direct).abs() < 1e-9 * direct.abs(), "{family}: {ll} vs {direct}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for family in FamilyKind::ALL {
            for _ in 0..5 {
                let s = spec(family, 2, 2);
                let truth = random_params(&mut rng, &s);
                let data = sample_data(&mut rng, &s, &truth, 50);
                let mut params = random_params(&mut rng, &s);
                if family == FamilyKind::Fgm {
                    params.theta = params.theta.clamp(-0.99, 0.99);
                }
                let (_, g) = joint_loglik_grad(&s, &params, &data).unwrap();
                let v = params.to_vec(family);
                let h = 1e-5;
                for j in 0..v.len() {
                    let mut vp = v.clone();
                    let mut vm = v.clone();
                    vp[j] += h;
                    vm[j] -= h;
                    let lp = joint_loglik_grad(&s, &JointParams::from_slice(&s, &vp).unwrap(), &data).unwrap().0;
                    let lm = joint_loglik_grad(&s, &JointParams::from_slice(&s, &vm).unwrap(), &data).unwrap().0;
                    let fd = (lp - lm) / (2.0 * h);
                    let rel = (g[j] - fd).abs() / g[j].abs().max(1.0);
                    assert!(rel < 1e-6, "{family} component {j}: {} vs {fd}", g[j]);
                }
            }
        }
    }

    #[test]
    fn free_scale_round_trip_and_chain_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for family in FamilyKind::ALL {
            let mut s = spec(family, 1, 2);
            s.levels = 4;
            let truth = random_params(&mut rng, &s);
            let data = sample_data(&mut rng, &s, &truth, 60);
            let mut params = random_params(&mut rng, &s);
            if family != FamilyKind::Frank {
                params.theta = params.theta.clamp(-0.9, 0.9);
            }
            let w = to_free(&s, &params);
            let back = from_free(&s, &w);
            for (a, b) in back.to_vec(family).iter().zip(params.to_vec(family)) {
                assert!((a - b).abs() < 1e-12);
            }
            let (_, g) = joint_loglik_grad(&s, &params, &data).unwrap();
            let gw = grad_to_free(&s, &w, &g);
            for j in 0..w.len() {
                let h = 1e-6;
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[j] += h;
                wm[j] -= h;
                let lp = joint_loglik_grad(&s, &from_free(&s, &wp), &data).unwrap().0;
                let lm = joint_loglik_grad(&s, &from_free(&s, &wm), &data).unwrap().0;
                let fd = (lp - lm) / (2.0 * h);
                assert!((gw[j] - fd).abs() < 1e-5 * gw[j].abs().max(1.0), "{family} {j}");
            }
        }
    }

    #[test]
    fn bic_values() {
        assert!((bic(-1278.896, 26, 1046) - 2738.563).abs() < 0.01);
        assert_eq!(bic(0.0, 0, 1), 0.0);
        assert_eq!(bic(0.0, 0, 500), 0.0);
        // ln(3) stands in for the unit log
        let n = 3;
        assert!((bic(-2.5, 1, n) - (5.0 + (3f64).ln())).abs() < 1e-15);
    }

    #[test]
    fn parameter_count() {
        assert_eq!(spec(FamilyKind::Frank, 4, 3).n_params(), 4 + 3 + 2 + 1);
        assert_eq!(spec(FamilyKind::Product, 4, 3).n_params(), 4 + 3 + 2);
        assert_eq!(spec(FamilyKind::Gaussian, 1, 1).parameter_names().len(), 5);
    }

    #[test]
    fn product_fit_matches_marginals() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = spec(FamilyKind::Product, 2, 2);
        let truth = random_params(&mut rng, &s);
        let data = sample_data(&mut rng, &s, &truth, 3000);
        let warm = marginal_warm_start(&s, &data, &FitOptions::default()).unwrap();
        // cold start away from the marginal optimum
        let cold = JointParams {
            beta: vec![0.0; 2],
            gamma: vec![0.0; 2],
            deltas: vec![-0.5, 0.5],
            theta: 0.0,
        };
        let fit = fit_joint_data(&s, &data, Some(&cold), &FitOptions::default()).unwrap();
        assert!(fit.converged);
        for (a, b) in fit.estimates().iter().zip(warm.to_vec(FamilyKind::Product)) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert_eq!(fit.bic, bic(fit.loglik, fit.p, fit.n));
    }

    #[test]
    fn frank_fit_recovers_truth_and_starts_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = spec(FamilyKind::Frank, 2, 2);
        let truth = JointParams {
            beta: vec![0.8, -0.5],
            gamma: vec![1.0, 0.4],
            deltas: vec![-0.7, 0.9],
            theta: -3.0,
        };
        let data = sample_data(&mut rng, &s, &truth, 5000);
        let opts = FitOptions::default();
        let fit = fit_joint_data(&s, &data, None, &opts).unwrap();
        assert!(fit.converged, "grad {}", fit.grad_max_norm);
        let se = fit.std_errors.clone().unwrap();
        for ((e, t), s) in fit.estimates().iter().zip(truth.to_vec(FamilyKind::Frank)).zip(&se) {
            assert!((e - t).abs() < 4.0 * s, "{e} vs {t} (se {s})");
        }
        for (t, (e, s)) in fit.t_stats.as_ref().unwrap().iter().zip(fit.estimates().iter().zip(&se)) {
            assert_eq!(*t, e / s);
        }
        let cold = JointParams {
            beta: vec![0.0; 2],
            gamma: vec![0.0; 2],
            deltas: vec![-1.0, 1.0],
            theta: 0.0,
        };
        let fit2 = fit_joint_data(&s, &data, Some(&cold), &opts).unwrap();
        for (a, b) in fit.estimates().iter().zip(fit2.estimates()) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(fit.deltas.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn comparison_ranks_all_families() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let s = spec(FamilyKind::Frank, 1, 1);
        let truth = JointParams {
            beta: vec![0.5],
            gamma: vec![-0.8],
            deltas: vec![-0.5, 0.8],
            theta: 5.0,
        };
        let jd = sample_data(&mut rng, &s, &truth, 2000);
        let ds = to_dataset(&s, &jd);
        let fams = [FamilyKind::Product, FamilyKind::Gaussian, FamilyKind::Frank, FamilyKind::Fgm];
        let cmp = compare_families(&s, &ds, &fams, &FitOptions::default()).unwrap();
        let mut got = cmp.ranking();
        got.sort_by_key(|f| f.name());
        let mut want = fams.to_vec();
        want.sort_by_key(|f| f.name());
        assert_eq!(got, want);
        let pos = |f| cmp.ranking().iter().position(|&g| g == f).unwrap();
        assert!(pos(FamilyKind::Frank) < pos(FamilyKind::Product));
        assert!(matches!(
            compare_families(&s, &ds, &[FamilyKind::Frank], &FitOptions::default()),
            Err(JointError::TooFewFamilies(1))
        ));
        let report = JointReport::from_comparison(&s, &cmp);
        let json = serde_json::to_string(&report).unwrap();
        let back: JointReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.format, JOINT_FORMAT);
        assert_eq!(back.ranking, cmp.ranking());
    }

    fn to_dataset(s: &JointSpec, jd: &JointData) -> Dataset {
        use crate::dataset::{ColumnSpec, Role, VariableSchema};
        let mut cols = vec![
            ColumnSpec::new(&s.stress_outcome, ColumnKind::Binary, Role::Policy),
            ColumnSpec::new(
                &s.wait_outcome,
                ColumnKind::Ordinal {
                    categories: (1..=s.levels).map(|k| k as f64).collect(),
                },
                Role::Outcome,
            ),
        ];
        let mut values: Vec<Vec<f64>> = vec![
            jd.r.iter().map(|&r| r as f64).collect(),
            jd.k.iter().map(|&k| k as f64).collect(),
        ];
        for (j, c) in s.stress_columns.iter().enumerate() {
            cols.push(ColumnSpec::new(c, ColumnKind::Continuous, Role::Covariate));
            values.push(jd.x.column(j).to_vec());
        }
        for (j, c) in s.wait_columns.iter().enumerate() {
            cols.push(ColumnSpec::new(c, ColumnKind::Continuous, Role::Covariate));
            values.push(jd.z.column(j).to_vec());
        }
        Dataset::from_columns(VariableSchema::new(cols).unwrap(), &values).unwrap()
    }

    #[test]
    fn degenerate_and_invalid_inputs() {
        let s = spec(FamilyKind::Frank, 1, 1);
        let params = JointParams {
            beta: vec![0.0],
            gamma: vec![0.0],
            deltas: vec![1.0, 0.0],
            theta: 1.0,
        };
        let x = array![0.0];
        assert!(matches!(
            joint_cell_prob(&s, &params, x.view(), x.view(), 0, 1),
            Err(JointError::Choice(ChoiceError::ThresholdOrder))
        ));
        let fgm = spec(FamilyKind::Fgm, 1, 1);
        let bad = JointParams {
            deltas: vec![0.0, 1.0],
            theta: 1.5,
            ..params.clone()
        };
        assert!(matches!(
            joint_cell_prob(&fgm, &bad, x.view(), x.view(), 0, 1),
            Err(JointError::Copula(_))
        ));
        // a cell that underflows to zero
        let extreme = JointParams {
            beta: vec![800.0],
            gamma: vec![0.0],
            deltas: vec![0.0, 1.0],
            theta: 0.0,
        };
        let data = JointData {
            x: array![[1.0]],
            z: array![[0.0]],
            r: vec![0],
            k: vec![1],
        };
        let ps = spec(FamilyKind::Product, 1, 1);
        assert!(matches!(
            joint_loglik_grad(&ps, &extreme, &data),
            Err(JointError::DegenerateLikelihood { row: 1 })
        ));
    }
}
