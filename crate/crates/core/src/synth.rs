//! Synthetic data with known ground truth: a copula joint-choice process and
//! a partially linear confounded process.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::choice::logistic_cdf;
use crate::copula::FamilyKind;
use crate::dataset::{ColumnKind, ColumnSpec, Dataset, DatasetError, Role, VariableSchema};
use crate::dml::{estimate_alpha, DmlError, Residuals};
use crate::joint::{joint_cell_prob, JointError, JointParams, JointSpec};

pub const DGP_FORMAT: &str = "dgp/1";

pub const STRESS_COLUMN: &str = "stress_high";
pub const WAIT_COLUMN: &str = "wait_cat";
pub const POLICY_COLUMN: &str = "density_low";
pub const DML_OUTCOME_COLUMN: &str = "wait_time";

/// Lower and upper clamp on the propensity `P(D = 1 | W)`.
pub const OVERLAP: (f64, f64) = (0.05, 0.95);

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
    #[error(transparent)]
    Joint(#[from] JointError),
    #[error(transparent)]
    Dml(#[from] DmlError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Copula joint-choice generator. `beta` has one entry per stress covariate
/// `x1..`; `gamma[0]` multiplies the binary policy column and the rest the
/// wait covariates `z1..`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaDgpSpec {
    pub family: FamilyKind,
    pub theta: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub deltas: Vec<f64>,
    pub n: usize,
    pub seed: u64,
}

impl CopulaDgpSpec {
    pub fn stress_columns(&self) -> Vec<String> {
        (1..=self.beta.len()).map(|j| format!("x{j}")).collect()
    }

    pub fn wait_columns(&self) -> Vec<String> {
        let mut cols = vec![POLICY_COLUMN.to_string()];
        cols.extend((1..self.gamma.len()).map(|j| format!("z{j}")));
        cols
    }

    pub fn levels(&self) -> usize {
        self.deltas.len() + 1
    }

    /// The joint model that matches the generated columns.
    pub fn joint_spec(&self) -> JointSpec {
        let mut s = JointSpec::new(
            STRESS_COLUMN,
            WAIT_COLUMN,
            self.stress_columns(),
            self.wait_columns(),
            self.family,
        );
        s.levels = self.levels();
        s
    }

    pub fn params(&self) -> JointParams {
        JointParams {
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
            deltas: self.deltas.clone(),
            theta: if self.family.has_parameter() { self.theta } else { 0.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.is_empty() {
            return Err(SynthError::InvalidSpec("at least one stress covariate".into()));
        }
        if self.gamma.is_empty() {
            return Err(SynthError::InvalidSpec("gamma needs the policy coefficient".into()));
        }
        if self.deltas.is_empty() {
            return Err(SynthError::InvalidSpec("at least two wait categories".into()));
        }
        self.params().validate(&self.joint_spec())?;
        Ok(())
    }

    pub fn schema(&self) -> VariableSchema {
        let mut cols = vec![
            ColumnSpec::new(STRESS_COLUMN, ColumnKind::Binary, Role::Covariate),
            ColumnSpec::new(
                WAIT_COLUMN,
                ColumnKind::Ordinal {
                    categories: (1..=self.levels()).map(|k| k as f64).collect(),
                },
                Role::Outcome,
            ),
            ColumnSpec::new(POLICY_COLUMN, ColumnKind::Binary, Role::Policy),
        ];
        for c in self.stress_columns() {
            cols.push(ColumnSpec::new(c, ColumnKind::Continuous, Role::Covariate));
        }
        for c in &self.wait_columns()[1..] {
            cols.push(ColumnSpec::new(c, ColumnKind::Continuous, Role::Covariate));
        }
        VariableSchema::new(cols).expect("generated schema is valid")
    }
}

/// Draws covariates uniformly (the policy as a fair coin) and `(r, k)` from
/// the exact cell probabilities of the joint model.
pub fn generate_copula_data(spec: &CopulaDgpSpec) -> Result<Dataset> {
    spec.validate()?;
    let js = spec.joint_spec();
    let params = spec.params();
    let (p, m, levels) = (spec.beta.len(), spec.gamma.len(), spec.levels());
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = 3 + p + (m - 1);
    let mut values = Array2::<f64>::zeros((spec.n, width));
    let mut x = Array1::<f64>::zeros(p);
    let mut z = Array1::<f64>::zeros(m);
    for i in 0..spec.n {
        for j in 0..p {
            x[j] = rng.random_range(-1.0..1.0);
        }
        z[0] = f64::from(u8::from(rng.random_bool(0.5)));
        for j in 1..m {
            z[j] = rng.random_range(-1.0..1.0);
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut cell = (1u8, levels);
        'draw: for r in 0..2u8 {
            for k in 1..=levels {
                acc += joint_cell_prob(&js, &params, x.view(), z.view(), r, k)?;
                if u < acc {
                    cell = (r, k);
                    break 'draw;
                }
            }
        }
        values[[i, 0]] = f64::from(cell.0);
        values[[i, 1]] = cell.1 as f64;
        values[[i, 2]] = z[0];
        for j in 0..p {
            values[[i, 3 + j]] = x[j];
        }
        for j in 1..m {
            values[[i, 2 + p + j]] = z[j];
        }
    }
    Ok(Dataset::new(spec.schema(), values)?)
}

/// Shape of a nuisance function of the confounders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NuisanceForm {
    Linear,
    SineQuadratic,
    Step,
}

impl NuisanceForm {
    /// Outcome-side base function; uses the first two coordinates.
    pub fn outcome(self, w: &[f64]) -> f64 {
        let (a, b) = (w[0], w.get(1).copied().unwrap_or(0.0));
        match self {
            NuisanceForm::Linear => a + 0.5 * b,
            NuisanceForm::SineQuadratic => (2.0 * a).sin() + 2.0 * (b * b - 1.0 / 3.0),
            NuisanceForm::Step => step(a) + 0.5 * step(b),
        }
    }

    /// Policy-side base function (pre-logistic index).
    pub fn policy(self, w: &[f64]) -> f64 {
        let (a, b) = (w[0], w.get(1).copied().unwrap_or(0.0));
        match self {
            NuisanceForm::Linear => a - 0.5 * b,
            NuisanceForm::SineQuadratic => (2.0 * a).sin() + (b * b - 1.0 / 3.0),
            NuisanceForm::Step => step(a) - 0.5 * step(b),
        }
    }
}

fn step(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Partially linear generator: `Y = alpha D + g(W) + noise`, `D ~ Bernoulli(f(W))`
/// with `g = s * g0(W)` and `f = clamp(logistic(s * f0(W)))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlDgpSpec {
    pub alpha_true: f64,
    pub g_form: NuisanceForm,
    pub f_form: NuisanceForm,
    pub confounding_strength: f64,
    pub noise_sd: f64,
    pub w_dim: usize,
    pub n: usize,
    pub seed: u64,
}

impl DmlDgpSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sd >= 0.0 && self.noise_sd.is_finite()) {
            return Err(SynthError::InvalidSpec("noise_sd must be finite and >= 0".into()));
        }
        if self.w_dim == 0 {
            return Err(SynthError::InvalidSpec("w_dim must be >= 1".into()));
        }
        if !self.alpha_true.is_finite() || !self.confounding_strength.is_finite() {
            return Err(SynthError::InvalidSpec("alpha_true and confounding_strength must be finite".into()));
        }
        Ok(())
    }

    pub fn g(&self, w: &[f64]) -> f64 {
        self.confounding_strength * self.g_form.outcome(w)
    }

    pub fn f(&self, w: &[f64]) -> f64 {
        logistic_cdf(self.confounding_strength * self.f_form.policy(w)).clamp(OVERLAP.0, OVERLAP.1)
    }

    pub fn covariate_columns(&self) -> Vec<String> {
        (1..=self.w_dim).map(|j| format!("w{j}")).collect()
    }

    pub fn schema(&self) -> VariableSchema {
        let mut cols = vec![
            ColumnSpec::new(DML_OUTCOME_COLUMN, ColumnKind::Continuous, Role::Outcome),
            ColumnSpec::new(POLICY_COLUMN, ColumnKind::Binary, Role::Policy),
        ];
        for c in self.covariate_columns() {
            cols.push(ColumnSpec::new(c, ColumnKind::Continuous, Role::Covariate));
        }
        VariableSchema::new(cols).expect("generated schema is valid")
    }
}

/// True nuisance values for each generated row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DmlTruth {
    pub alpha_true: f64,
    pub g_true: Vec<f64>,
    pub f_true: Vec<f64>,
}

impl DmlTruth {
    /// `E[Y | W] = alpha f(W) + g(W)`.
    pub fn outcome_mean(&self) -> Vec<f64> {
        self.g_true
            .iter()
            .zip(&self.f_true)
            .map(|(g, f)| self.alpha_true * f + g)
            .collect()
    }
}

pub fn generate_dml_data(spec: &DmlDgpSpec) -> Result<(Dataset, DmlTruth)> {
    spec.validate()?;
    let d = spec.w_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
    let mut values = Array2::<f64>::zeros((spec.n, 2 + d));
    let mut g_true = Vec::with_capacity(spec.n);
    let mut f_true = Vec::with_capacity(spec.n);
    let mut w = vec![0.0; d];
    for i in 0..spec.n {
        for v in w.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let g = spec.g(&w);
        let f = spec.f(&w);
        let di = f64::from(u8::from(rng.random_bool(f)));
        let e = if spec.noise_sd > 0.0 { rng.sample(noise) } else { 0.0 };
        values[[i, 0]] = spec.alpha_true * di + g + e;
        values[[i, 1]] = di;
        for j in 0..d {
            values[[i, 2 + j]] = w[j];
        }
        g_true.push(g);
        f_true.push(f);
    }
    let data = Dataset::new(spec.schema(), values)?;
    Ok((
        data,
        DmlTruth {
            alpha_true: spec.alpha_true,
            g_true,
            f_true,
        },
    ))
}

/// Estimate with the true nuisances substituted for the learned ones.
pub fn infeasible_alpha(y: &[f64], d: &[f64], truth: &DmlTruth) -> Result<f64> {
    if y.len() != truth.g_true.len() || d.len() != truth.f_true.len() {
        return Err(SynthError::InvalidSpec("truth does not match the data length".into()));
    }
    let l0 = truth.outcome_mean();
    let res = Residuals::unfolded(
        y.iter().zip(&l0).map(|(a, b)| a - b).collect(),
        d.iter().zip(&truth.f_true).map(|(a, b)| a - b).collect(),
    )?;
    Ok(estimate_alpha(&res)?)
}

/// Kendall's tau-b with tie correction. Quadratic in `n`.
pub fn kendall_tau(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let (mut s, mut tx, mut ty, mut pairs) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let a = (x[i] - x[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            let b = (y[i] - y[j]).partial_cmp(&0.0).map_or(0, |o| o as i64);
            s += a * b;
            pairs += 1;
            tx += i64::from(a == 0);
            ty += i64::from(b == 0);
        }
    }
    let denom = (((pairs - tx) as f64) * ((pairs - ty) as f64)).sqrt();
    if denom > 0.0 {
        s as f64 / denom
    } else {
        0.0
    }
}

/// Planted policy effect of the confounded presets.
pub const PLANTED_ALPHA: f64 = -1.115;

/// A generator spec of either kind, as stored in `dgp/1` files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DgpSpec {
    Copula(CopulaDgpSpec),
    Dml(DmlDgpSpec),
}

impl DgpSpec {
    pub fn n(&self) -> usize {
        match self {
            DgpSpec::Copula(s) => s.n,
            DgpSpec::Dml(s) => s.n,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            DgpSpec::Copula(s) => s.seed,
            DgpSpec::Dml(s) => s.seed,
        }
    }

    pub fn with_n_seed(&self, n: Option<usize>, seed: Option<u64>) -> Self {
        let mut out = self.clone();
        match &mut out {
            DgpSpec::Copula(s) => {
                s.n = n.unwrap_or(s.n);
                s.seed = seed.unwrap_or(s.seed);
            }
            DgpSpec::Dml(s) => {
                s.n = n.unwrap_or(s.n);
                s.seed = seed.unwrap_or(s.seed);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpDocument {
    pub format: String,
    #[serde(flatten)]
    pub spec: DgpSpec,
}

impl DgpDocument {
    pub fn new(spec: DgpSpec) -> Self {
        DgpDocument {
            format: DGP_FORMAT.to_string(),
            spec,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let doc: DgpDocument =
            serde_json::from_str(text).map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        if doc.format != DGP_FORMAT {
            return Err(SynthError::InvalidSpec(format!("unsupported format `{}`", doc.format)));
        }
        Ok(doc)
    }
}

pub const PRESETS: [&str; 8] = [
    "dml-strong-confounding",
    "dml-no-confounding",
    "dml-linear",
    "dml-step",
    "copula-frank",
    "copula-fgm",
    "copula-gaussian",
    "copula-product",
];

pub fn strong_confounding(n: usize, seed: u64) -> DmlDgpSpec {
    DmlDgpSpec {
        alpha_true: PLANTED_ALPHA,
        g_form: NuisanceForm::SineQuadratic,
        f_form: NuisanceForm::SineQuadratic,
        confounding_strength: 1.5,
        noise_sd: 1.0,
        w_dim: 4,
        n,
        seed,
    }
}

pub fn copula_preset(family: FamilyKind, n: usize, seed: u64) -> CopulaDgpSpec {
    let theta = match family {
        FamilyKind::Frank => -3.0,
        FamilyKind::Fgm => -0.8,
        FamilyKind::Gaussian => -0.4,
        FamilyKind::Product => 0.0,
    };
    CopulaDgpSpec {
        family,
        theta,
        beta: vec![0.8, -0.6],
        gamma: vec![-0.5, 0.9],
        deltas: vec![-0.6, 0.7],
        n,
        seed,
    }
}

pub fn preset(name: &str, n: usize, seed: u64) -> Result<DgpSpec> {
    let dml = |g_form, strength| {
        DgpSpec::Dml(DmlDgpSpec {
            g_form,
            f_form: g_form,
            confounding_strength: strength,
            ..strong_confounding(n, seed)
        })
    };
    Ok(match name {
        "dml-strong-confounding" => DgpSpec::Dml(strong_confounding(n, seed)),
        "dml-no-confounding" => dml(NuisanceForm::SineQuadratic, 0.0),
        "dml-linear" => dml(NuisanceForm::Linear, 1.0),
        "dml-step" => dml(NuisanceForm::Step, 1.0),
        "copula-frank" => DgpSpec::Copula(copula_preset(FamilyKind::Frank, n, seed)),
        "copula-fgm" => DgpSpec::Copula(copula_preset(FamilyKind::Fgm, n, seed)),
        "copula-gaussian" => DgpSpec::Copula(copula_preset(FamilyKind::Gaussian, n, seed)),
        "copula-product" => DgpSpec::Copula(copula_preset(FamilyKind::Product, n, seed)),
        other => return Err(SynthError::UnknownPreset(other.to_string())),
    })
}

/// Empirical cell counts of a generated copula dataset, indexed `[r][k-1]`.
pub fn cell_counts(data: &Dataset, levels: usize) -> Result<Vec<Vec<usize>>> {
    let r = data.binary(STRESS_COLUMN)?;
    let k = data.ordinal_levels(WAIT_COLUMN)?;
    let mut counts = vec![vec![0; levels]; 2];
    for (ri, ki) in r.into_iter().zip(k) {
        counts[ri as usize][ki - 1] += 1;
    }
    Ok(counts)
}
