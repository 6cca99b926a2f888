//! Partially linear double/debiased machine learning with cross-fitted
//! forest nuisances.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{kfold_split, ColumnKind, Dataset, DatasetError, FoldAssignment};
use crate::forest::{fit_forest_with, ForestConfig, ForestError};
use crate::normal::norm_quantile;

pub const DML_FORMAT: &str = "dml/1";
/// Below this `sum(d_tilde^2)` the effect is not identified.
pub const MIN_TREATMENT_SS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DmlError {
    #[error("policy takes a single value; effect is not identified")]
    NoPolicyVariation,
    #[error("sum of squared policy residuals {sum_sq} is too small")]
    DegenerateTreatmentResidual { sum_sq: f64 },
    #[error("{n} rows is too few for {k} folds")]
    TooFewRows { n: usize, k: usize },
    #[error("inference needs at least 10 rows, got {n}")]
    TooFewForInference { n: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("policy column `{0}` must be binary")]
    PolicyNotBinary(String),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, DmlError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlConfig {
    pub k_folds: usize,
    pub outcome_learner: ForestConfig,
    pub policy_learner: ForestConfig,
    pub confidence_level: f64,
    pub seed: u64,
}

impl Default for DmlConfig {
    fn default() -> Self {
        DmlConfig {
            k_folds: 5,
            outcome_learner: ForestConfig::wait_model(0),
            policy_learner: ForestConfig::density_model(0),
            confidence_level: 0.95,
            seed: 0,
        }
    }
}

impl DmlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_folds < 2 {
            return Err(DmlError::InvalidConfig("k_folds must be >= 2".into()));
        }
        if !(self.confidence_level > 0.0 && self.confidence_level < 1.0) {
            return Err(DmlError::InvalidConfig("confidence_level must lie in (0, 1)".into()));
        }
        self.outcome_learner.validate()?;
        self.policy_learner.validate()?;
        Ok(())
    }
}

/// Cross-fitted residuals `y - E[y|w]` and `d - E[d|w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub y_tilde: Vec<f64>,
    pub d_tilde: Vec<f64>,
    pub fold_of: Vec<usize>,
}

impl Residuals {
    pub fn new(y_tilde: Vec<f64>, d_tilde: Vec<f64>, fold_of: Vec<usize>) -> Result<Self> {
        if y_tilde.len() != d_tilde.len() || y_tilde.len() != fold_of.len() {
            return Err(DmlError::LengthMismatch(format!(
                "{} outcome residuals, {} policy residuals, {} fold labels",
                y_tilde.len(),
                d_tilde.len(),
                fold_of.len()
            )));
        }
        Ok(Residuals {
            y_tilde,
            d_tilde,
            fold_of,
        })
    }

    /// Residuals with every row in fold 0.
    pub fn unfolded(y_tilde: Vec<f64>, d_tilde: Vec<f64>) -> Result<Self> {
        let n = y_tilde.len();
        Residuals::new(y_tilde, d_tilde, vec![0; n])
    }

    pub fn n(&self) -> usize {
        self.y_tilde.len()
    }
}

/// A learner for one nuisance regression: trained on `train` rows of
/// `(w, target)`, predicting at `test` rows.
pub trait NuisanceLearner: Sync {
    fn fit_predict(
        &self,
        w: ArrayView2<f64>,
        target: &[f64],
        train: &[usize],
        test: &[usize],
        seed: u64,
    ) -> Result<Vec<f64>>;
}

/// Regression forest; the config's seed is replaced by the per-fold seed.
#[derive(Debug, Clone)]
pub struct ForestLearner(pub ForestConfig);

impl NuisanceLearner for ForestLearner {
    fn fit_predict(
        &self,
        w: ArrayView2<f64>,
        target: &[f64],
        train: &[usize],
        test: &[usize],
        seed: u64,
    ) -> Result<Vec<f64>> {
        let xt = w.select(Axis(0), train);
        let yt: Vec<f64> = train.iter().map(|&i| target[i]).collect();
        let model = fit_forest_with(xt.view(), &yt, &self.0.with_seed(seed), false)?;
        Ok(model.predict(w.select(Axis(0), test).view())?.to_vec())
    }
}

/// Predicts 0 everywhere, leaving the raw variables as residuals.
#[derive(Debug, Clone, Copy)]
pub struct ZeroLearner;

impl NuisanceLearner for ZeroLearner {
    fn fit_predict(&self, _: ArrayView2<f64>, _: &[f64], _: &[usize], test: &[usize], _: u64) -> Result<Vec<f64>> {
        Ok(vec![0.0; test.len()])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossFit {
    pub residuals: Residuals,
    /// Out-of-fold outcome predictions.
    pub y_hat: Vec<f64>,
    /// Out-of-fold policy predictions.
    pub d_hat: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Per-fold learner seeds: `(outcome, policy)` for each fold.
pub fn fold_seeds(seed: u64, k: usize) -> Vec<(u64, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..k).map(|_| (rng.random(), rng.random())).collect()
}

/// Cross-fitting with arbitrary learners over a given fold assignment.
pub fn cross_fit_with(
    w: ArrayView2<f64>,
    y: &[f64],
    d: &[f64],
    folds: &FoldAssignment,
    outcome: &dyn NuisanceLearner,
    policy: &dyn NuisanceLearner,
    seed: u64,
) -> Result<CrossFit> {
    let n = y.len();
    if d.len() != n || w.nrows() != n || folds.labels().len() != n {
        return Err(DmlError::LengthMismatch("outcome, policy, covariates and folds".into()));
    }
    let k = folds.k();
    if n < 2 * k {
        return Err(DmlError::TooFewRows { n, k });
    }
    if d.iter().all(|&v| v == d[0]) {
        return Err(DmlError::NoPolicyVariation);
    }
    let seeds = fold_seeds(seed, k);
    let per_fold: Vec<Result<(Vec<usize>, Vec<f64>, Vec<f64>, Option<String>)>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train = folds.complement(f);
            let test = folds.members(f);
            let warning = {
                let first = d[train[0]];
                train
                    .iter()
                    .all(|&i| d[i] == first)
                    .then(|| format!("fold {f}: policy is constant in the training folds"))
            };
            let yh = outcome.fit_predict(w, y, &train, &test, seeds[f].0)?;
            let dh = policy.fit_predict(w, d, &train, &test, seeds[f].1)?;
            Ok((test, yh, dh, warning))
        })
        .collect();
    let mut y_hat = vec![0.0; n];
    let mut d_hat = vec![0.0; n];
    let mut warnings = Vec::new();
    for r in per_fold {
        let (test, yh, dh, warning) = r?;
        for (j, &i) in test.iter().enumerate() {
            y_hat[i] = yh[j];
            d_hat[i] = dh[j];
        }
        warnings.extend(warning);
    }
    let residuals = Residuals::new(
        y.iter().zip(&y_hat).map(|(a, b)| a - b).collect(),
        d.iter().zip(&d_hat).map(|(a, b)| a - b).collect(),
        folds.labels().to_vec(),
    )?;
    Ok(CrossFit {
        residuals,
        y_hat,
        d_hat,
        warnings,
    })
}

/// Outcome, policy and covariate columns of a dataset, by schema role.
pub struct DmlColumns {
    pub outcome: String,
    pub policy: String,
    pub covariates: Vec<String>,
    pub y: Vec<f64>,
    pub d: Vec<f64>,
    pub w: Array2<f64>,
}

impl DmlColumns {
    pub fn from_dataset(data: &Dataset) -> Result<Self> {
        let schema = data.schema();
        let policy = schema.policy();
        if policy.kind != ColumnKind::Binary {
            return Err(DmlError::PolicyNotBinary(policy.name.clone()));
        }
        let covariates: Vec<String> = schema.covariates().into_iter().map(String::from).collect();
        if covariates.is_empty() {
            return Err(DmlError::InvalidConfig("no covariate columns".into()));
        }
        Ok(DmlColumns {
            outcome: schema.outcome().name.clone(),
            policy: policy.name.clone(),
            y: data.column(&schema.outcome().name)?.to_vec(),
            d: data.column(&policy.name)?.to_vec(),
            w: data.matrix(&covariates)?,
            covariates,
        })
    }
}

/// Forest cross-fitting of a dataset's outcome and policy on its covariates.
pub fn cross_fit_nuisances(data: &Dataset, config: &DmlConfig) -> Result<CrossFit> {
    config.validate()?;
    let cols = DmlColumns::from_dataset(data)?;
    cross_fit_columns(&cols, config)
}

fn cross_fit_columns(cols: &DmlColumns, config: &DmlConfig) -> Result<CrossFit> {
    let n = cols.y.len();
    if n < 2 * config.k_folds {
        return Err(DmlError::TooFewRows { n, k: config.k_folds });
    }
    let folds = kfold_split(n, config.k_folds, config.seed)?;
    cross_fit_with(
        cols.w.view(),
        &cols.y,
        &cols.d,
        &folds,
        &ForestLearner(config.outcome_learner.clone()),
        &ForestLearner(config.policy_learner.clone()),
        config.seed,
    )
}

/// Root of the sample moment `mean(d~ (y~ - d~ a)) = 0`.
pub fn estimate_alpha(res: &Residuals) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (y, d) in res.y_tilde.iter().zip(&res.d_tilde) {
        num += d * y;
        den += d * d;
    }
    if !(den >= MIN_TREATMENT_SS) {
        return Err(DmlError::DegenerateTreatmentResidual { sum_sq: den });
    }
    Ok(num / den)
}

/// Sample moment `mean(d~ (y~ - d~ alpha))`.
pub fn moment_cost(res: &Residuals, alpha: f64) -> f64 {
    let n = res.n();
    if n == 0 {
        return 0.0;
    }
    let s: f64 = res
        .y_tilde
        .iter()
        .zip(&res.d_tilde)
        .map(|(y, d)| d * (y - d * alpha))
        .sum();
    s / n as f64
}

/// Residual sum of squares of the final-stage regression.
pub fn residual_ss(res: &Residuals, alpha: f64) -> f64 {
    res.y_tilde
        .iter()
        .zip(&res.d_tilde)
        .map(|(y, d)| (y - d * alpha).powi(2))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Heteroskedasticity-robust sandwich standard error and normal interval.
pub fn alpha_inference(res: &Residuals, alpha: f64, level: f64) -> Result<Inference> {
    let n = res.n();
    if n < 10 {
        return Err(DmlError::TooFewForInference { n });
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(DmlError::InvalidConfig("confidence level must lie in (0, 1)".into()));
    }
    let nf = n as f64;
    let mut jd = 0.0;
    let mut meat = 0.0;
    for (y, d) in res.y_tilde.iter().zip(&res.d_tilde) {
        let zeta = y - d * alpha;
        jd += d * d;
        meat += d * d * zeta * zeta;
    }
    if !(jd >= MIN_TREATMENT_SS) {
        return Err(DmlError::DegenerateTreatmentResidual { sum_sq: jd });
    }
    let (jd, meat) = (jd / nf, meat / nf);
    let v = meat / (jd * jd);
    let std_error = (v / nf).sqrt();
    let z = norm_quantile(0.5 * (1.0 + level));
    Ok(Inference {
        std_error,
        ci_low: alpha - z * std_error,
        ci_high: alpha + z * std_error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlEstimate {
    pub alpha: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confidence_level: f64,
    /// Moment value at the estimate.
    pub cost: f64,
    pub residual_ss: f64,
    pub n: usize,
    pub k_folds: usize,
    /// Within-fold estimates; `None` where a fold's policy residuals vanish.
    pub per_fold_alphas: Vec<Option<f64>>,
    pub warnings: Vec<String>,
}

/// Final stage on given residuals: estimate, inference, moment and
/// per-fold diagnostics.
pub fn estimate_from_residuals(res: &Residuals, k_folds: usize, level: f64) -> Result<DmlEstimate> {
    let alpha = estimate_alpha(res)?;
    let inf = alpha_inference(res, alpha, level)?;
    let per_fold_alphas = (0..k_folds)
        .map(|f| {
            let (mut num, mut den) = (0.0, 0.0);
            for i in (0..res.n()).filter(|&i| res.fold_of[i] == f) {
                num += res.d_tilde[i] * res.y_tilde[i];
                den += res.d_tilde[i] * res.d_tilde[i];
            }
            (den >= MIN_TREATMENT_SS).then(|| num / den)
        })
        .collect();
    Ok(DmlEstimate {
        alpha,
        std_error: inf.std_error,
        ci_low: inf.ci_low,
        ci_high: inf.ci_high,
        confidence_level: level,
        cost: moment_cost(res, alpha),
        residual_ss: residual_ss(res, alpha),
        n: res.n(),
        k_folds,
        per_fold_alphas,
        warnings: Vec::new(),
    })
}

/// Cross-fit, then estimate and report.
pub fn run_dml(data: &Dataset, config: &DmlConfig) -> Result<DmlEstimate> {
    Ok(run_dml_detailed(data, config)?.0)
}

pub fn run_dml_detailed(data: &Dataset, config: &DmlConfig) -> Result<(DmlEstimate, CrossFit)> {
    config.validate()?;
    let cols = DmlColumns::from_dataset(data)?;
    let cf = cross_fit_columns(&cols, config)?;
    let mut est = estimate_from_residuals(&cf.residuals, config.k_folds, config.confidence_level)?;
    est.warnings = cf.warnings.clone();
    Ok((est, cf))
}

/// Unadjusted difference in means (OLS of outcome on policy with an
/// intercept) with its heteroskedasticity-robust standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NaiveEstimate {
    pub alpha: f64,
    pub std_error: f64,
}

pub fn naive_alpha(y: &[f64], d: &[f64]) -> Result<NaiveEstimate> {
    if y.len() != d.len() {
        return Err(DmlError::LengthMismatch("outcome and policy".into()));
    }
    let (mut s1, mut s0, mut n1, mut n0) = (0.0, 0.0, 0usize, 0usize);
    for (&yi, &di) in y.iter().zip(d) {
        if di == 1.0 {
            s1 += yi;
            n1 += 1;
        } else {
            s0 += yi;
            n0 += 1;
        }
    }
    if n1 == 0 || n0 == 0 {
        return Err(DmlError::NoPolicyVariation);
    }
    let (m1, m0) = (s1 / n1 as f64, s0 / n0 as f64);
    let (mut v1, mut v0) = (0.0, 0.0);
    for (&yi, &di) in y.iter().zip(d) {
        if di == 1.0 {
            v1 += (yi - m1).powi(2);
        } else {
            v0 += (yi - m0).powi(2);
        }
    }
    let var1 = if n1 > 1 { v1 / (n1 - 1) as f64 } else { 0.0 };
    let var0 = if n0 > 1 { v0 / (n0 - 1) as f64 } else { 0.0 };
    Ok(NaiveEstimate {
        alpha: m1 - m0,
        std_error: (var1 / n1 as f64 + var0 / n0 as f64).sqrt(),
    })
}

/// Comparison against a known effect, for synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthCheck {
    pub alpha_true: f64,
    pub infeasible_alpha: Option<f64>,
    pub bias: f64,
    pub naive_bias: f64,
    /// Truth lies inside the reported confidence interval.
    pub covered_by_ci: bool,
    /// `|alpha - alpha_true| < 3 * std_error`
    pub within_three_se: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlReport {
    pub format: String,
    pub outcome: String,
    pub policy: String,
    pub covariates: Vec<String>,
    pub config: DmlConfig,
    pub estimate: DmlEstimate,
    pub naive: NaiveEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthCheck>,
}

impl DmlReport {
    pub fn new(data: &Dataset, config: &DmlConfig, estimate: DmlEstimate) -> Result<Self> {
        let cols = DmlColumns::from_dataset(data)?;
        let naive = naive_alpha(&cols.y, &cols.d)?;
        Ok(DmlReport {
            format: DML_FORMAT.to_string(),
            outcome: cols.outcome,
            policy: cols.policy,
            covariates: cols.covariates,
            config: config.clone(),
            estimate,
            naive,
            truth: None,
        })
    }

    pub fn with_truth(mut self, alpha_true: f64, infeasible_alpha: Option<f64>) -> Self {
        self.truth = Some(TruthCheck {
            alpha_true,
            infeasible_alpha,
            bias: self.estimate.alpha - alpha_true,
            naive_bias: self.naive.alpha - alpha_true,
            covered_by_ci: self.estimate.ci_low <= alpha_true && alpha_true <= self.estimate.ci_high,
            within_three_se: (self.estimate.alpha - alpha_true).abs() < 3.0 * self.estimate.std_error,
        });
        self
    }
}
