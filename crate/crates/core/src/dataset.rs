//! Observation tables: schema, CSV ingestion and preprocessing.

use std::collections::HashMap;
use std::fmt::Debug;
use std::hash::Hash;
use std::io;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column '{column}'")]
    MissingColumn { column: String },
    #[error("non-numeric cell '{value}' at row {row}, column '{col}'")]
    NonNumeric { row: usize, col: String, value: String },
    #[error("binary column '{col}' has value {value} at row {row} (expected 0 or 1)")]
    BinaryDomain { row: usize, col: String, value: f64 },
    #[error("ordinal column '{col}' has value {value} at row {row}, not in its category list")]
    OrdinalDomain { row: usize, col: String, value: f64 },
    #[error("row {row} has {found} cells, expected {expected}")]
    RaggedRow { row: usize, found: usize, expected: usize },
    #[error("no data rows")]
    EmptyData,
    #[error("schema error: {0}")]
    Schema(String),
    #[error("{classes} classes requested but only {distinct} distinct values")]
    TooManyClasses { classes: usize, distinct: usize },
    #[error("invalid class count {0} (need at least 2)")]
    BadClassCount(usize),
    #[error("negative duration {value} at index {index}")]
    NegativeDuration { index: usize, value: f64 },
    #[error("bad fold count: k={k} for n={n} (need 2 <= k <= n)")]
    BadFoldCount { n: usize, k: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Binary,
    Continuous,
    /// Ordered category codes, lowest first.
    Ordinal { categories: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Outcome,
    Policy,
    Covariate,
    Identifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
    pub role: Role,
}

impl ColumnSpec {
    pub fn new(name: impl Into<String>, kind: ColumnKind, role: Role) -> Self {
        ColumnSpec {
            name: name.into(),
            kind,
            role,
        }
    }
}

/// Ordered column list with kinds and roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct VariableSchema {
    columns: Vec<ColumnSpec>,
}

#[derive(Serialize, Deserialize)]
struct RawSchema {
    columns: Vec<ColumnSpec>,
}

impl TryFrom<RawSchema> for VariableSchema {
    type Error = DatasetError;
    fn try_from(raw: RawSchema) -> Result<Self> {
        VariableSchema::new(raw.columns)
    }
}

impl From<VariableSchema> for RawSchema {
    fn from(s: VariableSchema) -> Self {
        RawSchema { columns: s.columns }
    }
}

impl VariableSchema {
    pub fn new(columns: Vec<ColumnSpec>) -> Result<Self> {
        let count = |role| columns.iter().filter(|c| c.role == role).count();
        if count(Role::Outcome) != 1 {
            return Err(DatasetError::Schema(format!(
                "exactly one outcome column required, found {}",
                count(Role::Outcome)
            )));
        }
        if count(Role::Policy) != 1 {
            return Err(DatasetError::Schema(format!(
                "exactly one policy column required, found {}",
                count(Role::Policy)
            )));
        }
        let mut seen = HashMap::new();
        for (i, c) in columns.iter().enumerate() {
            if seen.insert(c.name.as_str(), i).is_some() {
                return Err(DatasetError::Schema(format!("duplicate column '{}'", c.name)));
            }
            if let ColumnKind::Ordinal { categories } = &c.kind {
                if categories.len() < 2 {
                    return Err(DatasetError::Schema(format!(
                        "ordinal column '{}' needs at least 2 categories",
                        c.name
                    )));
                }
                if categories.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(DatasetError::Schema(format!(
                        "ordinal column '{}' categories must be strictly increasing",
                        c.name
                    )));
                }
            }
        }
        Ok(VariableSchema { columns })
    }

    pub fn columns(&self) -> &[ColumnSpec] {
        &self.columns
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c.name == name)
            .ok_or_else(|| DatasetError::MissingColumn {
                column: name.to_string(),
            })
    }

    pub fn column(&self, name: &str) -> Result<&ColumnSpec> {
        Ok(&self.columns[self.index_of(name)?])
    }

    fn with_role(&self, role: Role) -> impl Iterator<Item = &ColumnSpec> {
        self.columns.iter().filter(move |c| c.role == role)
    }

    pub fn outcome(&self) -> &ColumnSpec {
        self.with_role(Role::Outcome).next().expect("validated")
    }

    pub fn policy(&self) -> &ColumnSpec {
        self.with_role(Role::Policy).next().expect("validated")
    }

    pub fn covariates(&self) -> Vec<&str> {
        self.with_role(Role::Covariate).map(|c| c.name.as_str()).collect()
    }

    fn check_value(&self, col: usize, row: usize, value: f64) -> Result<()> {
        let spec = &self.columns[col];
        if !value.is_finite() {
            return Err(DatasetError::NonNumeric {
                row,
                col: spec.name.clone(),
                value: value.to_string(),
            });
        }
        match &spec.kind {
            ColumnKind::Binary if value != 0.0 && value != 1.0 => Err(DatasetError::BinaryDomain {
                row,
                col: spec.name.clone(),
                value,
            }),
            ColumnKind::Ordinal { categories } if !categories.contains(&value) => {
                Err(DatasetError::OrdinalDomain {
                    row,
                    col: spec.name.clone(),
                    value,
                })
            }
            _ => Ok(()),
        }
    }
}

/// A validated observation table (`n` rows by schema columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: VariableSchema,
    values: Array2<f64>,
}

impl Dataset {
    /// Builds a dataset from column-major data, validating every cell.
    /// Row numbers in errors are 1-based.
    pub fn new(schema: VariableSchema, values: Array2<f64>) -> Result<Self> {
        if values.ncols() != schema.columns.len() {
            return Err(DatasetError::LengthMismatch(values.ncols(), schema.columns.len()));
        }
        for (i, row) in values.axis_iter(Axis(0)).enumerate() {
            for (j, &v) in row.iter().enumerate() {
                schema.check_value(j, i + 1, v)?;
            }
        }
        Ok(Dataset { schema, values })
    }

    pub fn from_columns(schema: VariableSchema, columns: &[Vec<f64>]) -> Result<Self> {
        let n = columns.first().map_or(0, Vec::len);
        if let Some(c) = columns.iter().find(|c| c.len() != n) {
            return Err(DatasetError::LengthMismatch(c.len(), n));
        }
        let values = Array2::from_shape_fn((n, columns.len()), |(i, j)| columns[j][i]);
        Dataset::new(schema, values)
    }

    pub fn schema(&self) -> &VariableSchema {
        &self.schema
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn column(&self, name: &str) -> Result<ArrayView1<'_, f64>> {
        Ok(self.values.column(self.schema.index_of(name)?))
    }

    /// Selected columns as an `n x names.len()` matrix.
    pub fn matrix<S: AsRef<str>>(&self, names: &[S]) -> Result<Array2<f64>> {
        let idx: Vec<usize> = names
            .iter()
            .map(|s| self.schema.index_of(s.as_ref()))
            .collect::<Result<_>>()?;
        Ok(self.values.select(Axis(1), &idx))
    }

    /// 1-based level index of each row for an ordinal column.
    pub fn ordinal_levels(&self, name: &str) -> Result<Vec<usize>> {
        let spec = self.schema.column(name)?;
        let ColumnKind::Ordinal { categories } = &spec.kind else {
            return Err(DatasetError::Schema(format!("column '{name}' is not ordinal")));
        };
        Ok(self
            .column(name)?
            .iter()
            .map(|v| categories.iter().position(|c| c == v).expect("validated") + 1)
            .collect())
    }

    /// Binary column as 0/1 bytes.
    pub fn binary(&self, name: &str) -> Result<Vec<u8>> {
        let spec = self.schema.column(name)?;
        if spec.kind != ColumnKind::Binary {
            return Err(DatasetError::Schema(format!("column '{name}' is not binary")));
        }
        Ok(self.column(name)?.iter().map(|&v| v as u8).collect())
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            values: self.values.select(Axis(0), rows),
        }
    }

    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv_to(file)
    }

    /// Writes a header plus one line per row. Binary and ordinal cells are
    /// written as integers when integral; continuous cells use the shortest
    /// representation that parses back to the same bits.
    pub fn write_csv_to<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.schema.columns.iter().map(|c| c.name.as_str()))?;
        for row in self.values.axis_iter(Axis(0)) {
            w.write_record(row.iter().map(|v| format_cell(*v)))?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn format_cell(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

/// Reads a comma-delimited file with a header row. Columns not named in the
/// schema are ignored; every schema column must be present.
pub fn load_csv<P: AsRef<Path>>(path: P, schema: &VariableSchema) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    load_csv_from(file, schema)
}

pub fn load_csv_from<R: io::Read>(reader: R, schema: &VariableSchema) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let positions: Vec<usize> = schema
        .columns
        .iter()
        .map(|c| {
            headers
                .iter()
                .position(|h| h == c.name)
                .ok_or_else(|| DatasetError::MissingColumn {
                    column: c.name.clone(),
                })
        })
        .collect::<Result<_>>()?;

    let mut flat = Vec::new();
    let mut n = 0;
    for (i, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| match e.kind() {
            csv::ErrorKind::UnequalLengths {
                expected_len, len, ..
            } => DatasetError::RaggedRow {
                row: i + 1,
                found: *len as usize,
                expected: *expected_len as usize,
            },
            _ => DatasetError::Csv(e),
        })?;
        let row = i + 1;
        for (j, &pos) in positions.iter().enumerate() {
            let cell = record.get(pos).unwrap_or("").trim();
            let value: f64 = cell.parse().map_err(|_| DatasetError::NonNumeric {
                row,
                col: schema.columns[j].name.clone(),
                value: cell.to_string(),
            })?;
            schema.check_value(j, row, value)?;
            flat.push(value);
        }
        n += 1;
    }
    if n == 0 {
        return Err(DatasetError::EmptyData);
    }
    let values = Array2::from_shape_vec((n, positions.len()), flat).expect("row-major shape");
    Ok(Dataset {
        schema: schema.clone(),
        values,
    })
}

/// Untyped numeric table: header names plus column vectors. Used by
/// preprocessing, which works on arbitrary numeric CSV files.
#[derive(Debug, Clone, PartialEq)]
pub struct NumericTable {
    pub headers: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl NumericTable {
    pub fn read<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut columns = vec![Vec::new(); headers.len()];
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            for (j, cell) in record.iter().enumerate() {
                let cell = cell.trim();
                let v: f64 = cell.parse().map_err(|_| DatasetError::NonNumeric {
                    row: i + 1,
                    col: headers[j].clone(),
                    value: cell.to_string(),
                })?;
                columns[j].push(v);
            }
        }
        Ok(NumericTable { headers, columns })
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.headers
            .iter()
            .position(|h| h == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| DatasetError::MissingColumn {
                column: name.to_string(),
            })
    }

    /// Appends a column, replacing any existing column of the same name.
    pub fn set_column(&mut self, name: &str, values: Vec<f64>) {
        match self.headers.iter().position(|h| h == name) {
            Some(i) => self.columns[i] = values,
            None => {
                self.headers.push(name.to_string());
                self.columns.push(values);
            }
        }
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn write<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.headers)?;
        for i in 0..self.n_rows() {
            w.write_record(self.columns.iter().map(|c| format_cell(c[i])))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// A group whose values are all equal; its members normalize to 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DegenerateGroup {
    pub group: String,
    pub size: usize,
}

/// Min-max scaling within each group.
pub fn min_max_normalize<G>(values: &[f64], group_ids: &[G]) -> Result<(Vec<f64>, Vec<DegenerateGroup>)>
where
    G: Eq + Hash + Debug,
{
    if values.len() != group_ids.len() {
        return Err(DatasetError::LengthMismatch(values.len(), group_ids.len()));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(DatasetError::NonFinite(i));
    }
    // (min, max, size, first-seen order)
    let mut ranges: HashMap<&G, (f64, f64, usize, usize)> = HashMap::new();
    for (&v, g) in values.iter().zip(group_ids) {
        let next = ranges.len();
        let e = ranges.entry(g).or_insert((v, v, 0, next));
        e.0 = e.0.min(v);
        e.1 = e.1.max(v);
        e.2 += 1;
    }
    let out = values
        .iter()
        .zip(group_ids)
        .map(|(&v, g)| {
            let (lo, hi, _, _) = ranges[g];
            if hi > lo {
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.0
            }
        })
        .collect();
    let mut degenerate: Vec<(usize, DegenerateGroup)> = ranges
        .iter()
        .filter(|(_, r)| r.1 == r.0)
        .map(|(g, r)| {
            (
                r.3,
                DegenerateGroup {
                    group: format!("{g:?}"),
                    size: r.2,
                },
            )
        })
        .collect();
    degenerate.sort_by_key(|(order, _)| *order);
    Ok((out, degenerate.into_iter().map(|(_, d)| d).collect()))
}

/// Relative tolerance under which two partition costs count as tied.
pub const JENKS_TIE_TOL: f64 = 1e-12;

/// Exact optimal 1-D partition into `classes` contiguous groups minimizing the
/// total within-class sum of squared deviations (Fisher's dynamic program).
///
/// Returns the `classes - 1` upper class bounds: a value `x` belongs to class
/// `#{b : x > b}`. Breaks are only placed between distinct values; among
/// optimal partitions the one with lexicographically smallest break
/// positions is returned.
pub fn jenks_breaks(values: &[f64], classes: usize) -> Result<Vec<f64>> {
    if classes < 2 {
        return Err(DatasetError::BadClassCount(classes));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(DatasetError::NonFinite(i));
    }
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let distinct = 1 + xs.windows(2).filter(|w| w[0] < w[1]).count();
    if xs.is_empty() || classes > distinct {
        return Err(DatasetError::TooManyClasses {
            classes,
            distinct: if xs.is_empty() { 0 } else { distinct },
        });
    }
    let n = xs.len();
    let cost = SegmentCost::new(&xs);
    // a class may start at i only if i == 0 or xs[i-1] < xs[i]
    let admissible: Vec<bool> = (0..=n).map(|i| i == 0 || i == n || xs[i - 1] < xs[i]).collect();

    // best[j][i]: min cost of splitting xs[i..n] into j classes (j >= 1).
    let inf = f64::INFINITY;
    let mut best = vec![vec![inf; n + 1]; classes + 1];
    for i in 0..n {
        if admissible[i] {
            best[1][i] = cost.sse(i, n);
        }
    }
    for j in 2..=classes {
        for i in 0..n {
            if !admissible[i] {
                continue;
            }
            let mut m = inf;
            for e in (i + 1)..n {
                if admissible[e] && best[j - 1][e].is_finite() {
                    let c = cost.sse(i, e) + best[j - 1][e];
                    if c < m {
                        m = c;
                    }
                }
            }
            best[j][i] = m;
        }
    }

    // Forward reconstruction picking the leftmost near-optimal break.
    let scale = cost.sse(0, n).max(f64::MIN_POSITIVE);
    let mut breaks = Vec::with_capacity(classes - 1);
    let mut start = 0;
    for j in (2..=classes).rev() {
        let target = best[j][start];
        let mut chosen = None;
        for e in (start + 1)..n {
            if admissible[e] && best[j - 1][e].is_finite() {
                let c = cost.sse(start, e) + best[j - 1][e];
                if c <= target + JENKS_TIE_TOL * scale {
                    chosen = Some(e);
                    break;
                }
            }
        }
        let e = chosen.expect("optimum attained by some break");
        breaks.push(xs[e - 1]);
        start = e;
    }
    Ok(breaks)
}

/// Within-class sum of squares over sorted data, using centred prefix sums.
pub(crate) struct SegmentCost {
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl SegmentCost {
    pub(crate) fn new(sorted: &[f64]) -> Self {
        let mean = sorted.iter().sum::<f64>() / sorted.len().max(1) as f64;
        let mut s1 = vec![0.0; sorted.len() + 1];
        let mut s2 = vec![0.0; sorted.len() + 1];
        for (i, &x) in sorted.iter().enumerate() {
            let c = x - mean;
            s1[i + 1] = s1[i] + c;
            s2[i + 1] = s2[i] + c * c;
        }
        SegmentCost { s1, s2 }
    }

    /// SSE of the half-open segment `[a, b)`.
    pub(crate) fn sse(&self, a: usize, b: usize) -> f64 {
        let m = (b - a) as f64;
        let s = self.s1[b] - self.s1[a];
        (self.s2[b] - self.s2[a] - s * s / m).max(0.0)
    }
}

/// Class index (0-based) of `x` given upper class bounds.
pub fn classify(x: f64, breaks: &[f64]) -> usize {
    breaks.iter().filter(|&&b| x > b).count()
}

/// Wait-time lower cutoff: below this many seconds is "low".
pub const WAIT_LOW_MAX: f64 = 5.0;
/// Wait-time upper cutoff: above this many seconds is "high".
pub const WAIT_HIGH_MIN: f64 = 20.0;

/// Wait-time categories: 1 if t < 5, 2 if 5 <= t <= 20, 3 if t > 20.
pub fn discretize_wait(seconds: &[f64]) -> Result<Vec<u8>> {
    seconds
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            if t.is_nan() || t < 0.0 {
                Err(DatasetError::NegativeDuration { index: i, value: t })
            } else if t < WAIT_LOW_MAX {
                Ok(1)
            } else if t <= WAIT_HIGH_MIN {
                Ok(2)
            } else {
                Ok(3)
            }
        })
        .collect()
}

/// Fold label per observation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    k: usize,
    labels: Vec<usize>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Row indices in fold `f`, ascending.
    pub fn members(&self, f: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] == f).collect()
    }

    /// Row indices outside fold `f`, ascending.
    pub fn complement(&self, f: usize) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i] != f).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for &l in &self.labels {
            s[l] += 1;
        }
        s
    }

    /// Two-column CSV: `row_index,fold`.
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["row_index", "fold"])?;
        for (i, f) in self.labels.iter().enumerate() {
            w.write_record([i.to_string(), f.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Seeded random partition of `0..n` into `k` folds whose sizes differ by at
/// most one.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 || k > n {
        return Err(DatasetError::BadFoldCount { n, k });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut labels = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        labels[i] = pos % k;
    }
    Ok(FoldAssignment { k, labels })
}

/// Column of f64 as an owned array, for callers outside the module.
pub fn to_array(v: &[f64]) -> Array1<f64> {
    Array1::from(v.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn schema3() -> VariableSchema {
        VariableSchema::new(vec![
            ColumnSpec::new("wait_s", ColumnKind::Continuous, Role::Outcome),
            ColumnSpec::new("density_low", ColumnKind::Binary, Role::Policy),
            ColumnSpec::new("female", ColumnKind::Binary, Role::Covariate),
        ])
        .unwrap()
    }

    #[test]
    fn loads_three_rows() {
        let text = "wait_s,density_low,female\n3.5,1,0\n12,0,1\n25.25,1,1\n";
        let d = load_csv_from(text.as_bytes(), &schema3()).unwrap();
        assert_eq!(d.n(), 3);
        assert_eq!(d.column("wait_s").unwrap().to_vec(), vec![3.5, 12.0, 25.25]);
    }

    #[test]
    fn header_only_is_empty() {
        let text = "wait_s,density_low,female\n";
        assert!(matches!(
            load_csv_from(text.as_bytes(), &schema3()),
            Err(DatasetError::EmptyData)
        ));
    }

    #[test]
    fn binary_domain_names_row_and_column() {
        let text = "wait_s,density_low,female\n1,0,0\n2,1,1\n3,0,0\n4,1,1\n5,0,2\n";
        match load_csv_from(text.as_bytes(), &schema3()) {
            Err(DatasetError::BinaryDomain { row, col, .. }) => {
                assert_eq!(row, 5);
                assert_eq!(col, "female");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_and_non_numeric() {
        let text = "wait_s,density_low\n1,0\n";
        assert!(matches!(
            load_csv_from(text.as_bytes(), &schema3()),
            Err(DatasetError::MissingColumn { column }) if column == "female"
        ));
        let text = "wait_s,density_low,female\n1,0,0\nabc,1,1\n";
        assert!(matches!(
            load_csv_from(text.as_bytes(), &schema3()),
            Err(DatasetError::NonNumeric { row: 2, .. })
        ));
        let text = "wait_s,density_low,female\n1,0,0\n,1,1\n";
        assert!(matches!(
            load_csv_from(text.as_bytes(), &schema3()),
            Err(DatasetError::NonNumeric { row: 2, .. })
        ));
    }

    #[test]
    fn schema_invariants() {
        let two_outcomes = VariableSchema::new(vec![
            ColumnSpec::new("a", ColumnKind::Continuous, Role::Outcome),
            ColumnSpec::new("b", ColumnKind::Continuous, Role::Outcome),
            ColumnSpec::new("d", ColumnKind::Binary, Role::Policy),
        ]);
        assert!(two_outcomes.is_err());
        let bad_ordinal = VariableSchema::new(vec![
            ColumnSpec::new("a", ColumnKind::Ordinal { categories: vec![1.0] }, Role::Outcome),
            ColumnSpec::new("d", ColumnKind::Binary, Role::Policy),
        ]);
        assert!(bad_ordinal.is_err());
    }

    #[test]
    fn schema_json_round_trip() {
        let s = VariableSchema::new(vec![
            ColumnSpec::new(
                "wait_cat",
                ColumnKind::Ordinal {
                    categories: vec![1.0, 2.0, 3.0],
                },
                Role::Outcome,
            ),
            ColumnSpec::new("density_low", ColumnKind::Binary, Role::Policy),
        ])
        .unwrap();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<VariableSchema>(&text).unwrap(), s);
        // invalid schemas are rejected at deserialization
        let bad = r#"{"columns":[{"name":"a","kind":"continuous","role":"covariate"}]}"#;
        assert!(serde_json::from_str::<VariableSchema>(bad).is_err());
    }

    #[test]
    fn normalize_examples() {
        let (out, warn) = min_max_normalize(&[2.0, 5.0, 8.0], &[0, 0, 0]).unwrap();
        assert_eq!(out, vec![0.0, 0.5, 1.0]);
        assert!(warn.is_empty());

        let (out, warn) = min_max_normalize(&[4.0, 4.0], &["s1", "s1"]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        assert_eq!(warn.len(), 1);
        assert_eq!(warn[0].size, 2);

        let (out, _) = min_max_normalize(&[1.0, 3.0, 10.0, 20.0], &['A', 'A', 'B', 'B']).unwrap();
        assert_eq!(out, vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn jenks_two_clusters() {
        let b = jenks_breaks(&[1.0, 2.0, 3.0, 100.0, 101.0, 102.0], 2).unwrap();
        assert_eq!(b, vec![3.0]);
        let b = jenks_breaks(&[101.0, 3.0, 1.0, 100.0, 2.0, 102.0], 2).unwrap();
        assert_eq!(b, vec![3.0]);
    }

    #[test]
    fn jenks_too_many_classes() {
        assert!(matches!(
            jenks_breaks(&[5.0, 5.0, 5.0, 5.0], 2),
            Err(DatasetError::TooManyClasses { classes: 2, distinct: 1 })
        ));
        assert!(jenks_breaks(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn jenks_never_splits_equal_values() {
        let b = jenks_breaks(&[1.0, 1.0, 1.0, 2.0, 2.0, 9.0], 3).unwrap();
        assert_eq!(b, vec![1.0, 2.0]);
    }

    /// Exhaustive oracle: every placement of `c-1` breaks among admissible
    /// gaps, scoring SSE with an independent two-pass mean computation.
    fn jenks_brute(values: &[f64], c: usize) -> (f64, Vec<f64>) {
        let mut xs = values.to_vec();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len();
        let gaps: Vec<usize> = (1..n).filter(|&i| xs[i - 1] < xs[i]).collect();
        let sse = |seg: &[f64]| {
            let m = seg.iter().sum::<f64>() / seg.len() as f64;
            seg.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
        };
        let mut best: Option<(f64, Vec<usize>)> = None;
        let mut idx: Vec<usize> = (0..c - 1).collect();
        loop {
            let cuts: Vec<usize> = idx.iter().map(|&i| gaps[i]).collect();
            let mut bounds = vec![0];
            bounds.extend(&cuts);
            bounds.push(n);
            let total: f64 = bounds.windows(2).map(|w| sse(&xs[w[0]..w[1]])).sum();
            match &best {
                None => best = Some((total, cuts)),
                Some((b, _)) => {
                    // enumeration is lexicographic, so only strictly better replaces
                    let scale = sse(&xs).max(f64::MIN_POSITIVE);
                    if total < *b - JENKS_TIE_TOL * scale {
                        best = Some((total, cuts));
                    }
                }
            }
            // next combination
            let m = gaps.len();
            let mut i = c - 1;
            loop {
                if i == 0 {
                    let (cost, cuts) = best.unwrap();
                    return (cost, cuts.iter().map(|&e| xs[e - 1]).collect());
                }
                i -= 1;
                if idx[i] < m - (c - 1 - i) {
                    idx[i] += 1;
                    for j in i + 1..c - 1 {
                        idx[j] = idx[j - 1] + 1;
                    }
                    break;
                }
            }
        }
    }

    fn total_sse(values: &[f64], breaks: &[f64]) -> f64 {
        let mut groups = vec![Vec::new(); breaks.len() + 1];
        for &v in values {
            groups[classify(v, breaks)].push(v);
        }
        groups
            .iter()
            .map(|g| {
                let m = g.iter().sum::<f64>() / g.len() as f64;
                g.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
            })
            .sum()
    }

    #[test]
    fn jenks_matches_brute_force_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let n = rng.random_range(2..=12);
            let c = rng.random_range(2..=4.min(n));
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-50.0..50.0)).collect();
            let got = jenks_breaks(&xs, c).unwrap();
            let (cost, expected) = jenks_brute(&xs, c);
            assert_eq!(got, expected, "xs={xs:?} c={c}");
            assert!((total_sse(&xs, &got) - cost).abs() < 1e-9 * (1.0 + cost));
        }
    }

    #[test]
    fn jenks_ties_go_left() {
        // {0},{1,2} and {0,1},{2} tie exactly; the leftmost break wins.
        assert_eq!(jenks_breaks(&[0.0, 1.0, 2.0], 2).unwrap(), vec![0.0]);
        let xs: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let (_, expected) = jenks_brute(&xs, 2);
        assert_eq!(jenks_breaks(&xs, 2).unwrap(), expected);
    }

    #[test]
    fn wait_categories() {
        assert_eq!(discretize_wait(&[1.0, 10.0, 30.0]).unwrap(), vec![1, 2, 3]);
        assert_eq!(discretize_wait(&[5.0, 20.0]).unwrap(), vec![2, 2]);
        assert_eq!(discretize_wait(&[0.0]).unwrap(), vec![1]);
        assert!(matches!(
            discretize_wait(&[3.0, -1.0]),
            Err(DatasetError::NegativeDuration { index: 1, .. })
        ));
    }

    #[test]
    fn kfold_examples() {
        let f = kfold_split(10, 5, 3).unwrap();
        assert_eq!(f.sizes(), vec![2; 5]);
        let f = kfold_split(11, 5, 3).unwrap();
        let mut s = f.sizes();
        s.sort();
        assert_eq!(s, vec![2, 2, 2, 2, 3]);
        assert_eq!(kfold_split(11, 5, 3).unwrap(), f);
        assert_ne!(kfold_split(11, 5, 4).unwrap(), f);
        assert!(matches!(kfold_split(4, 5, 0), Err(DatasetError::BadFoldCount { .. })));
        assert!(matches!(kfold_split(4, 1, 0), Err(DatasetError::BadFoldCount { .. })));
    }

    #[test]
    fn fold_csv_export() {
        let f = kfold_split(3, 2, 1).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("row_index,fold\n0,"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cols = vec![
            (0..50).map(|_| rng.random::<f64>() * 40.0).collect::<Vec<_>>(),
            (0..50).map(|_| rng.random_range(0..2) as f64).collect(),
            (0..50).map(|_| rng.random_range(0..2) as f64).collect(),
        ];
        let d = Dataset::from_columns(schema3(), &cols).unwrap();
        let mut buf = Vec::new();
        d.write_csv_to(&mut buf).unwrap();
        let back = load_csv_from(buf.as_slice(), &schema3()).unwrap();
        assert_eq!(back, d);
    }

    proptest! {
        #[test]
        fn normalize_affine_invariant(
            xs in proptest::collection::vec(-1e3f64..1e3, 1..40),
            a in 0.01f64..100.0,
            b in -100f64..100.0,
        ) {
            let groups: Vec<usize> = (0..xs.len()).map(|i| i % 3).collect();
            let (base, _) = min_max_normalize(&xs, &groups).unwrap();
            let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
            let (moved, _) = min_max_normalize(&ys, &groups).unwrap();
            for (p, q) in base.iter().zip(&moved) {
                prop_assert!((p - q).abs() < 1e-9);
                prop_assert!((0.0..=1.0).contains(q));
            }
        }

        #[test]
        fn kfold_partitions_indices(n in 2usize..200, k in 2usize..12, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let f = kfold_split(n, k, seed).unwrap();
            prop_assert_eq!(f.labels().len(), n);
            let sizes = f.sizes();
            let (lo, hi) = (sizes.iter().min().unwrap(), sizes.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
            let mut all: Vec<usize> = (0..k).flat_map(|j| f.members(j)).collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }

        #[test]
        fn wait_codes_monotone(t1 in 0f64..100.0, t2 in 0f64..100.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let c = discretize_wait(&[lo, hi]).unwrap();
            prop_assert!(c[0] <= c[1]);
        }
    }
}
