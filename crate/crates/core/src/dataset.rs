//! Combined primary-study plus external-control data.
//!
//! Every subject carries a source indicator `r` (1 = primary study,
//! 0 = external control), a treatment indicator `t`, an outcome `y` and a
//! covariate vector. The design matrix always starts with a constant-1
//! intercept column that callers never supply themselves.

use std::io::Read;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::DataError;

/// One subject. `x[0]` is the intercept and is always exactly 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationRow {
    pub r: bool,
    pub t: bool,
    pub y: f64,
    pub x: Vec<f64>,
}

impl ObservationRow {
    /// Builds a row from raw covariates, prepending the intercept.
    pub fn new(r: bool, t: bool, y: f64, covariates: &[f64]) -> Self {
        let mut x = Vec::with_capacity(covariates.len() + 1);
        x.push(1.0);
        x.extend_from_slice(covariates);
        ObservationRow { r, t, y, x }
    }

    pub fn covariates(&self) -> &[f64] {
        &self.x[1..]
    }
}

/// Validated, immutable combined dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedDataset {
    design: Array2<f64>,
    source: Vec<bool>,
    treatment: Vec<bool>,
    outcome: Array1<f64>,
    n_primary: usize,
    n_treated: usize,
}

impl CombinedDataset {
    /// Builds a dataset from a covariate matrix (without intercept) and
    /// per-row indicators.
    pub fn from_covariates(
        covariates: ArrayView2<'_, f64>,
        source: Vec<bool>,
        treatment: Vec<bool>,
        outcome: Array1<f64>,
    ) -> Result<Self, DataError> {
        let (rows, d) = covariates.dim();
        let mut design = Array2::<f64>::ones((rows, d + 1));
        design.slice_mut(ndarray::s![.., 1..]).assign(&covariates);
        Self::from_design(design, source, treatment, outcome)
    }

    /// Builds a dataset from a design matrix whose first column is the
    /// intercept.
    pub fn from_design(
        design: Array2<f64>,
        source: Vec<bool>,
        treatment: Vec<bool>,
        outcome: Array1<f64>,
    ) -> Result<Self, DataError> {
        let data = Self::assemble(design, source, treatment, outcome)?;
        data.validate()?;
        Ok(data)
    }

    pub fn from_rows(rows: &[ObservationRow]) -> Result<Self, DataError> {
        let first = rows.first().ok_or(DataError::EmptyDataset)?;
        let p = first.x.len();
        if p == 0 {
            return Err(DataError::Invalid("rows carry no intercept".into()));
        }
        let mut design = Array2::<f64>::zeros((rows.len(), p));
        for (i, row) in rows.iter().enumerate() {
            if row.x.len() != p {
                return Err(DataError::Invalid(format!(
                    "row {} has {} design entries, expected {}",
                    i + 1,
                    row.x.len(),
                    p
                )));
            }
            design.row_mut(i).assign(&ArrayView1::from(&row.x[..]));
        }
        Self::from_design(
            design,
            rows.iter().map(|r| r.r).collect(),
            rows.iter().map(|r| r.t).collect(),
            rows.iter().map(|r| r.y).collect(),
        )
    }

    fn assemble(
        design: Array2<f64>,
        source: Vec<bool>,
        treatment: Vec<bool>,
        outcome: Array1<f64>,
    ) -> Result<Self, DataError> {
        let rows = design.nrows();
        if rows == 0 {
            return Err(DataError::EmptyDataset);
        }
        if design.ncols() == 0 {
            return Err(DataError::Invalid("design has no intercept column".into()));
        }
        if source.len() != rows || treatment.len() != rows || outcome.len() != rows {
            return Err(DataError::Invalid(format!(
                "length mismatch: design {rows}, source {}, treatment {}, outcome {}",
                source.len(),
                treatment.len(),
                outcome.len()
            )));
        }
        let n_primary = source.iter().filter(|&&r| r).count();
        let n_treated = source
            .iter()
            .zip(&treatment)
            .filter(|(&r, &t)| r && t)
            .count();
        Ok(CombinedDataset {
            design,
            source,
            treatment,
            outcome,
            n_primary,
            n_treated,
        })
    }

    fn validate(&self) -> Result<(), DataError> {
        for (i, row) in self.design.outer_iter().enumerate() {
            if row[0] != 1.0 {
                return Err(DataError::Invalid(format!(
                    "row {}: intercept entry is {} rather than 1",
                    i + 1,
                    row[0]
                )));
            }
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(DataError::NonFiniteValue {
                    column: format!("x{j}"),
                    row: i + 1,
                    value: row[j].to_string(),
                });
            }
            if !self.outcome[i].is_finite() {
                return Err(DataError::NonFiniteValue {
                    column: "y".into(),
                    row: i + 1,
                    value: self.outcome[i].to_string(),
                });
            }
            if !self.source[i] && self.treatment[i] {
                return Err(DataError::ExternalTreated { row: i + 1 });
            }
        }
        if self.n_primary == 0 {
            return Err(DataError::Invalid("no primary-study rows".into()));
        }
        if self.n_treated == 0 {
            return Err(DataError::Invalid("no treated primary-study rows".into()));
        }
        if self.n_primary == self.n_treated {
            return Err(DataError::Invalid("no control primary-study rows".into()));
        }
        Ok(())
    }

    /// Row subset without re-validating the count invariants. Used for
    /// cross-validation folds, which may legitimately be unbalanced.
    pub(crate) fn subset_unchecked(&self, rows: &[usize]) -> Self {
        Self::assemble(
            self.design.select(Axis(0), rows),
            rows.iter().map(|&i| self.source[i]).collect(),
            rows.iter().map(|&i| self.treatment[i]).collect(),
            rows.iter().map(|&i| self.outcome[i]).collect(),
        )
        .expect("subset of a valid dataset")
    }

    /// Validated row subset.
    pub fn subset(&self, rows: &[usize]) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= self.len()) {
            return Err(DataError::Invalid(format!("row index {bad} out of range")));
        }
        let data = self.subset_unchecked(rows);
        data.validate()?;
        Ok(data)
    }

    /// Same rows with a replacement design matrix (used by standardization).
    fn with_design(&self, design: Array2<f64>) -> Self {
        CombinedDataset {
            design,
            ..self.clone()
        }
    }

    /// N × (d+1) design matrix, column 0 is the intercept.
    pub fn design(&self) -> ArrayView2<'_, f64> {
        self.design.view()
    }

    pub fn source(&self) -> &[bool] {
        &self.source
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn outcome(&self) -> ArrayView1<'_, f64> {
        self.outcome.view()
    }

    pub fn row(&self, i: usize) -> ObservationRow {
        ObservationRow {
            r: self.source[i],
            t: self.treatment[i],
            y: self.outcome[i],
            x: self.design.row(i).to_vec(),
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = ObservationRow> + '_ {
        (0..self.len()).map(|i| self.row(i))
    }

    /// Covariate dimension, excluding the intercept.
    pub fn d(&self) -> usize {
        self.design.ncols() - 1
    }

    /// Total row count N.
    pub fn len(&self) -> usize {
        self.design.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Primary-study row count n.
    pub fn n_primary(&self) -> usize {
        self.n_primary
    }

    pub fn n_external(&self) -> usize {
        self.len() - self.n_primary
    }

    /// Number of treated primary-study subjects, Σ r·t.
    pub fn n_treated(&self) -> usize {
        self.n_treated
    }

    pub fn n_primary_control(&self) -> usize {
        self.n_primary - self.n_treated
    }

    /// π̂ = n/N.
    pub fn pi_hat(&self) -> f64 {
        self.n_primary as f64 / self.len() as f64
    }

    /// p̂ = Σ r·t / n.
    pub fn p_hat(&self) -> f64 {
        self.n_treated as f64 / self.n_primary as f64
    }

    /// Per-row r·t as 0/1 weights.
    pub fn treated_primary(&self) -> Array1<f64> {
        self.indicator(|r, t| r && t)
    }

    /// Per-row r·(1−t).
    pub fn primary_control(&self) -> Array1<f64> {
        self.indicator(|r, t| r && !t)
    }

    /// Per-row 1 − r·t: primary controls together with external controls.
    pub fn all_controls(&self) -> Array1<f64> {
        self.indicator(|r, t| !(r && t))
    }

    fn indicator(&self, f: impl Fn(bool, bool) -> bool) -> Array1<f64> {
        self.source
            .iter()
            .zip(&self.treatment)
            .map(|(&r, &t)| if f(r, t) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Linear predictor xᵢᵀc for every row.
    pub fn linear_predictor(&self, coefficients: &[f64]) -> Array1<f64> {
        self.design.dot(&ArrayView1::from(coefficients))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    #[default]
    Fail,
    DropRow,
}

/// Which CSV columns carry which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub outcome_column: String,
    pub treatment_column: String,
    pub source_column: String,
    pub covariate_columns: Vec<String>,
    #[serde(default)]
    pub missing_policy: MissingPolicy,
}

impl ColumnSchema {
    pub fn new(
        outcome: impl Into<String>,
        treatment: impl Into<String>,
        source: impl Into<String>,
        covariates: impl IntoIterator<Item = impl Into<String>>,
    ) -> Self {
        ColumnSchema {
            outcome_column: outcome.into(),
            treatment_column: treatment.into(),
            source_column: source.into(),
            covariate_columns: covariates.into_iter().map(Into::into).collect(),
            missing_policy: MissingPolicy::Fail,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.covariate_columns.is_empty() {
            return Err(DataError::InvalidSchema("no covariate columns".into()));
        }
        let mut names: Vec<&str> = vec![
            &self.outcome_column,
            &self.treatment_column,
            &self.source_column,
        ];
        names.extend(self.covariate_columns.iter().map(String::as_str));
        let mut sorted = names.clone();
        sorted.sort_unstable();
        if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
            return Err(DataError::InvalidSchema(format!(
                "column `{}` used more than once",
                w[0]
            )));
        }
        Ok(())
    }
}

fn is_missing(field: &str) -> bool {
    field.is_empty() || field.eq_ignore_ascii_case("na")
}

enum Cell {
    Value(f64),
    Missing,
}

fn parse_indicator(column: &str, row: usize, field: &str) -> Result<Option<bool>, DataError> {
    match field {
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        f if is_missing(f) => Ok(None),
        other => Err(DataError::NonBinaryIndicator {
            column: column.to_string(),
            row,
            value: other.to_string(),
        }),
    }
}

fn parse_number(column: &str, row: usize, field: &str) -> Result<Cell, DataError> {
    if is_missing(field) {
        return Ok(Cell::Missing);
    }
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Cell::Value(v)),
        _ => Err(DataError::NonFiniteValue {
            column: column.to_string(),
            row,
            value: field.to_string(),
        }),
    }
}

/// Column names from the header line of a CSV file.
pub fn csv_header(path: impl AsRef<Path>) -> Result<Vec<String>, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    Ok(rdr.headers()?.iter().map(str::to_string).collect())
}

/// Reads a combined dataset from a CSV file. Row numbers in errors count
/// data rows from 1, header excluded.
pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<CombinedDataset, DataError> {
    let file = std::fs::File::open(path)?;
    load_csv_reader(file, schema)
}

pub fn load_csv_reader<R: Read>(
    reader: R,
    schema: &ColumnSchema,
) -> Result<CombinedDataset, DataError> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let locate = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let y_col = locate(&schema.outcome_column)?;
    let t_col = locate(&schema.treatment_column)?;
    let r_col = locate(&schema.source_column)?;
    let x_cols = schema
        .covariate_columns
        .iter()
        .map(|c| locate(c))
        .collect::<Result<Vec<_>, _>>()?;

    let d = x_cols.len();
    let mut values = Vec::new();
    let mut source = Vec::new();
    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut covariates = vec![0.0; d];

    for (k, record) in rdr.records().enumerate() {
        let record = record?;
        let row = k + 1;
        let field = |col: usize| record.get(col).unwrap_or("");
        let mut missing = false;

        let r = parse_indicator(&schema.source_column, row, field(r_col))?;
        let t = parse_indicator(&schema.treatment_column, row, field(t_col))?;
        let y = parse_number(&schema.outcome_column, row, field(y_col))?;
        missing |= r.is_none() || t.is_none() || matches!(y, Cell::Missing);
        for (slot, (&col, name)) in covariates
            .iter_mut()
            .zip(x_cols.iter().zip(&schema.covariate_columns))
        {
            match parse_number(name, row, field(col))? {
                Cell::Value(v) => *slot = v,
                Cell::Missing => missing = true,
            }
        }
        if missing {
            match schema.missing_policy {
                MissingPolicy::DropRow => continue,
                MissingPolicy::Fail => {
                    let column = if r.is_none() {
                        &schema.source_column
                    } else if t.is_none() {
                        &schema.treatment_column
                    } else if matches!(y, Cell::Missing) {
                        &schema.outcome_column
                    } else {
                        let j = x_cols
                            .iter()
                            .position(|&c| is_missing(field(c)))
                            .unwrap_or(0);
                        &schema.covariate_columns[j]
                    };
                    return Err(DataError::NonFiniteValue {
                        column: column.clone(),
                        row,
                        value: String::new(),
                    });
                }
            }
        }
        let (r, t) = (r.unwrap_or(false), t.unwrap_or(false));
        if !r && t {
            return Err(DataError::ExternalTreated { row });
        }
        let Cell::Value(y) = y else { unreachable!() };
        source.push(r);
        treatment.push(t);
        outcome.push(y);
        values.push(1.0);
        values.extend_from_slice(&covariates);
    }
    if source.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let design = Array2::from_shape_vec((source.len(), d + 1), values)
        .map_err(|e| DataError::Invalid(e.to_string()))?;
    CombinedDataset::from_design(design, source, treatment, Array1::from(outcome))
}

/// Column centering and scaling applied before solving.
///
/// Index 0 (intercept) always has mean 0 and scale 1. Scales use the
/// population convention (divide by N).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingInfo {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub constant_columns: Vec<usize>,
}

impl ScalingInfo {
    pub fn identity(p: usize) -> Self {
        ScalingInfo {
            means: vec![0.0; p],
            scales: vec![1.0; p],
            constant_columns: Vec::new(),
        }
    }

    /// Inverts [`standardize`] on a dataset's design.
    pub fn unstandardize(&self, data: &CombinedDataset) -> CombinedDataset {
        let mut design = data.design.clone();
        for (j, mut col) in design.axis_iter_mut(Axis(1)).enumerate().skip(1) {
            let (m, s) = (self.means[j], self.scales[j]);
            col.mapv_inplace(|v| v * s + m);
        }
        data.with_design(design)
    }

    /// Maps coefficients fitted on the standardized design back to the
    /// original covariate scale, preserving every linear predictor.
    pub fn to_original(&self, coefficients: &[f64]) -> Vec<f64> {
        let mut out = coefficients.to_vec();
        let mut shift = 0.0;
        for j in 1..out.len() {
            out[j] = coefficients[j] / self.scales[j];
            shift += out[j] * self.means[j];
        }
        out[0] = coefficients[0] - shift;
        out
    }

    pub fn to_standardized(&self, coefficients: &[f64]) -> Vec<f64> {
        let mut out = coefficients.to_vec();
        let mut shift = 0.0;
        for j in 1..out.len() {
            out[j] = coefficients[j] * self.scales[j];
            shift += coefficients[j] * self.means[j];
        }
        out[0] = coefficients[0] + shift;
        out
    }
}

/// Centers and scales every non-intercept column to mean 0, variance 1.
/// Constant columns are left untouched and listed in the returned info.
pub fn standardize(data: &CombinedDataset) -> (CombinedDataset, ScalingInfo) {
    let p = data.d() + 1;
    let rows = data.len() as f64;
    let mut info = ScalingInfo::identity(p);
    let mut design = data.design.clone();
    for (j, mut col) in design.axis_iter_mut(Axis(1)).enumerate().skip(1) {
        let mean = col.sum() / rows;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / rows;
        let scale = var.sqrt();
        if !(scale > 1e-12 * mean.abs().max(1.0)) {
            info.constant_columns.push(j);
            continue;
        }
        info.means[j] = mean;
        info.scales[j] = scale;
        col.mapv_inplace(|v| (v - mean) / scale);
    }
    (data.with_design(design), info)
}
