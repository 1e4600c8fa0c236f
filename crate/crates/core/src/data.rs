//! Tabular data ingestion, validation and covariate standardization.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use faer::{Mat, MatRef};
use serde::{Deserialize, Serialize};

use crate::error::{GkrlsError, Result};
use crate::linalg::{positive_rank, sym_eigen, EIGEN_REL_TOL};

/// A categorical column: sorted level labels plus one level code per row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    pub levels: Vec<String>,
    pub codes: Vec<usize>,
}

impl Factor {
    /// Levels are the distinct labels in lexicographic order.
    pub fn from_labels<S: AsRef<str>>(name: &str, labels: &[S]) -> Self {
        let levels: Vec<String> = labels
            .iter()
            .map(|s| s.as_ref().to_string())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Self::with_levels(name, labels, &levels).expect("levels cover labels")
    }

    /// Code labels against a fixed level set; unseen labels are an error.
    pub fn with_levels<S: AsRef<str>>(name: &str, labels: &[S], levels: &[String]) -> Result<Self> {
        let index: HashMap<&str, usize> =
            levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let codes = labels
            .iter()
            .map(|l| {
                index.get(l.as_ref()).copied().ok_or_else(|| {
                    GkrlsError::Data(format!(
                        "level '{}' of '{}' was not seen in training data",
                        l.as_ref(),
                        name
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: name.to_string(),
            levels: levels.to_vec(),
            codes,
        })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn label(&self, row: usize) -> &str {
        &self.levels[self.codes[row]]
    }

    pub fn labels(&self) -> Vec<String> {
        self.codes.iter().map(|&c| self.levels[c].clone()).collect()
    }

    fn subset(&self, rows: &[usize]) -> Self {
        Self {
            name: self.name.clone(),
            levels: self.levels.clone(),
            codes: rows.iter().map(|&r| self.codes[r]).collect(),
        }
    }
}

/// How a categorical covariate was turned into indicator columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalExpansion {
    pub source: String,
    pub reference: String,
    pub levels: Vec<String>,
    /// Indicator column names, one per non-reference level.
    pub columns: Vec<String>,
}

pub fn indicator_name(factor: &str, level: &str) -> String {
    format!("{factor}[{level}]")
}

/// Validated in-memory data set.
#[derive(Debug, Clone)]
pub struct Dataset {
    names: Vec<String>,
    covariates: Mat<f64>,
    outcome_name: String,
    outcome: Vec<f64>,
    factors: Vec<Factor>,
    expansions: Vec<CategoricalExpansion>,
    cluster: Option<Factor>,
    folds: Option<Vec<usize>>,
    weights: Vec<f64>,
}

impl Dataset {
    pub fn builder(outcome_name: &str, outcome: Vec<f64>) -> DatasetBuilder {
        DatasetBuilder {
            outcome_name: outcome_name.to_string(),
            outcome,
            columns: Vec::new(),
            cluster: None,
            weights: None,
            folds: None,
        }
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    /// Number of numeric covariate columns (indicators included).
    pub fn p(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn covariates(&self) -> MatRef<'_, f64> {
        self.covariates.as_ref()
    }

    pub fn outcome_name(&self) -> &str {
        &self.outcome_name
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn has_unit_weights(&self) -> bool {
        self.weights.iter().all(|&w| w == 1.0)
    }

    pub fn cluster(&self) -> Option<&Factor> {
        self.cluster.as_ref()
    }

    pub fn folds(&self) -> Option<&[usize]> {
        self.folds.as_deref()
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn expansions(&self) -> &[CategoricalExpansion] {
        &self.expansions
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.column_index(name).map(|j| self.covariates.col_as_slice(j))
    }

    pub fn factor(&self, name: &str) -> Option<&Factor> {
        self.factors
            .iter()
            .find(|f| f.name == name)
            .or_else(|| self.cluster.as_ref().filter(|f| f.name == name))
    }

    pub fn expansion(&self, name: &str) -> Option<&CategoricalExpansion> {
        self.expansions.iter().find(|e| e.source == name)
    }

    /// Covariate columns by name as an N×k matrix.
    pub fn select(&self, names: &[String]) -> Result<Mat<f64>> {
        let idx = names
            .iter()
            .map(|n| {
                self.column_index(n)
                    .ok_or_else(|| GkrlsError::Spec(format!("unknown column '{n}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Mat::from_fn(self.n(), idx.len(), |i, j| self.covariates[(i, idx[j])]))
    }

    /// Rows `rows` (in that order) as a new data set with the same layout.
    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            names: self.names.clone(),
            covariates: Mat::from_fn(rows.len(), self.p(), |i, j| self.covariates[(rows[i], j)]),
            outcome_name: self.outcome_name.clone(),
            outcome: rows.iter().map(|&r| self.outcome[r]).collect(),
            factors: self.factors.iter().map(|f| f.subset(rows)).collect(),
            expansions: self.expansions.clone(),
            cluster: self.cluster.as_ref().map(|c| c.subset(rows)),
            folds: self.folds.as_ref().map(|f| rows.iter().map(|&r| f[r]).collect()),
            weights: rows.iter().map(|&r| self.weights[r]).collect(),
        }
    }

    /// Same covariates with a different outcome.
    pub fn with_outcome(&self, name: &str, values: Vec<f64>) -> Result<Dataset> {
        if values.len() != self.n() {
            return Err(GkrlsError::Dimension(format!(
                "outcome has {} values for {} rows",
                values.len(),
                self.n()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GkrlsError::Data(format!("non-finite outcome at row {}", i + 1)));
        }
        let mut d = self.clone();
        d.outcome_name = name.to_string();
        d.outcome = values;
        Ok(d)
    }

    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Dataset> {
        validate_weights(&weights, self.n())?;
        let mut d = self.clone();
        d.weights = weights;
        Ok(d)
    }

    pub fn with_cluster(&self, cluster: Option<Factor>) -> Result<Dataset> {
        if let Some(c) = &cluster {
            if c.codes.len() != self.n() {
                return Err(GkrlsError::Dimension("cluster labels length".into()));
            }
        }
        let mut d = self.clone();
        d.cluster = cluster;
        Ok(d)
    }

    /// Replace the values of one numeric covariate (counterfactual copies).
    pub fn with_column(&self, name: &str, values: &[f64]) -> Result<Dataset> {
        let j = self
            .column_index(name)
            .ok_or_else(|| GkrlsError::Spec(format!("unknown column '{name}'")))?;
        if values.len() != self.n() {
            return Err(GkrlsError::Dimension(format!("column '{name}' length")));
        }
        let mut d = self.clone();
        for (i, &v) in values.iter().enumerate() {
            d.covariates[(i, j)] = v;
        }
        Ok(d)
    }

    /// Set one numeric covariate to a constant for every row.
    pub fn with_column_constant(&self, name: &str, value: f64) -> Result<Dataset> {
        self.with_column(name, &vec![value; self.n()])
    }

    /// Build a data set from raw columns, validating everything.
    fn from_parts(
        outcome_name: String,
        outcome: Vec<f64>,
        columns: Vec<RawColumn>,
        cluster: Option<Factor>,
        weights: Option<Vec<f64>>,
        folds: Option<Vec<usize>>,
    ) -> Result<Dataset> {
        let n = outcome.len();
        if n < 2 {
            return Err(GkrlsError::Data(format!("need at least 2 rows, got {n}")));
        }
        if let Some(i) = outcome.iter().position(|v| !v.is_finite()) {
            return Err(GkrlsError::Data(format!("non-finite outcome at row {}", i + 1)));
        }
        let mut names = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        let mut factors = Vec::new();
        let mut expansions = Vec::new();
        for col in columns {
            match col {
                RawColumn::Numeric(name, v) => {
                    if v.len() != n {
                        return Err(GkrlsError::Dimension(format!("column '{name}' length")));
                    }
                    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                        return Err(GkrlsError::Data(format!(
                            "non-finite value in column '{name}' at row {}",
                            i + 1
                        )));
                    }
                    names.push(name);
                    values.push(v);
                }
                RawColumn::Categorical(f) => {
                    if f.codes.len() != n {
                        return Err(GkrlsError::Dimension(format!("column '{}' length", f.name)));
                    }
                    let mut cols = Vec::new();
                    for (l, level) in f.levels.iter().enumerate().skip(1) {
                        let cname = indicator_name(&f.name, level);
                        names.push(cname.clone());
                        values.push(f.codes.iter().map(|&c| (c == l) as u8 as f64).collect());
                        cols.push(cname);
                    }
                    expansions.push(CategoricalExpansion {
                        source: f.name.clone(),
                        reference: f.levels.first().cloned().unwrap_or_default(),
                        levels: f.levels.clone(),
                        columns: cols,
                    });
                    factors.push(f);
                }
            }
        }
        let mut seen = BTreeSet::new();
        for name in names.iter().chain(factors.iter().map(|f| &f.name)) {
            if !seen.insert(name.clone()) {
                return Err(GkrlsError::Data(format!("duplicate column name '{name}'")));
            }
        }
        if let Some(c) = &cluster {
            if c.codes.len() != n {
                return Err(GkrlsError::Dimension("cluster labels length".into()));
            }
        }
        let weights = match weights {
            Some(w) => {
                validate_weights(&w, n)?;
                w
            }
            None => vec![1.0; n],
        };
        if let Some(f) = &folds {
            if f.len() != n {
                return Err(GkrlsError::Dimension("fold labels length".into()));
            }
        }
        let covariates = Mat::from_fn(n, names.len(), |i, j| values[j][i]);
        Ok(Dataset {
            names,
            covariates,
            outcome_name,
            outcome,
            factors,
            expansions,
            cluster,
            folds,
            weights,
        })
    }
}

fn validate_weights(w: &[f64], n: usize) -> Result<()> {
    if w.len() != n {
        return Err(GkrlsError::Dimension(format!("{} weights for {} rows", w.len(), n)));
    }
    if let Some(i) = w.iter().position(|&v| !(v.is_finite() && v > 0.0)) {
        return Err(GkrlsError::Data(format!("weight at row {} is not positive", i + 1)));
    }
    Ok(())
}

enum RawColumn {
    Numeric(String, Vec<f64>),
    Categorical(Factor),
}

/// Incremental in-memory construction of a [`Dataset`].
pub struct DatasetBuilder {
    outcome_name: String,
    outcome: Vec<f64>,
    columns: Vec<RawColumn>,
    cluster: Option<Factor>,
    weights: Option<Vec<f64>>,
    folds: Option<Vec<usize>>,
}

impl DatasetBuilder {
    pub fn numeric(mut self, name: &str, values: Vec<f64>) -> Self {
        self.columns.push(RawColumn::Numeric(name.to_string(), values));
        self
    }

    /// Categorical covariate; expanded to indicators, first sorted level as reference.
    pub fn categorical<S: AsRef<str>>(mut self, name: &str, labels: &[S]) -> Self {
        self.columns
            .push(RawColumn::Categorical(Factor::from_labels(name, labels)));
        self
    }

    pub fn cluster<S: AsRef<str>>(mut self, name: &str, labels: &[S]) -> Self {
        self.cluster = Some(Factor::from_labels(name, labels));
        self
    }

    pub fn weights(mut self, w: Vec<f64>) -> Self {
        self.weights = Some(w);
        self
    }

    pub fn folds(mut self, f: Vec<usize>) -> Self {
        self.folds = Some(f);
        self
    }

    pub fn build(self) -> Result<Dataset> {
        Dataset::from_parts(
            self.outcome_name,
            self.outcome,
            self.columns,
            self.cluster,
            self.weights,
            self.folds,
        )
    }
}

/// Which CSV columns play which role.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnRoles {
    pub outcome: String,
    /// Covariate columns; empty means every column not used in another role.
    pub covariates: Vec<String>,
    pub cluster: Option<String>,
    pub weights: Option<String>,
    pub folds: Option<String>,
    /// Columns forced to be categorical even when their values parse as numbers.
    pub categorical: Vec<String>,
    /// Scoring data: a missing outcome column is filled with zeros and a
    /// constant outcome is accepted.
    pub scoring: bool,
}

impl ColumnRoles {
    pub fn outcome(name: &str) -> Self {
        Self {
            outcome: name.to_string(),
            ..Default::default()
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| GkrlsError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn is_missing(s: &str) -> bool {
    matches!(s, "" | "NA" | "N/A" | "NaN" | "nan" | "null" | "NULL" | ".")
}

/// Read a CSV file (header row required) into a validated [`Dataset`].
pub fn load_csv(path: &Path, roles: &ColumnRoles) -> Result<Dataset> {
    if path.as_os_str().is_empty() {
        return Err(GkrlsError::InvalidArgument("empty data path".into()));
    }
    let file = std::fs::File::open(path).map_err(|source| GkrlsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_csv(file, roles)
}

/// [`load_csv`] on any reader.
pub fn read_csv<R: std::io::Read>(reader: R, roles: &ColumnRoles) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_string()).collect();
    let mut cells: Vec<Vec<String>> = vec![Vec::new(); header.len()];
    for rec in rdr.records() {
        let rec = rec?;
        for (j, v) in rec.iter().enumerate() {
            cells[j].push(v.to_string());
        }
    }
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| GkrlsError::Data(format!("column '{name}' not found in header")))
    };
    if roles.outcome.is_empty() {
        return Err(GkrlsError::InvalidArgument("no outcome column given".into()));
    }
    let y_idx = match find(&roles.outcome) {
        Ok(j) => Some(j),
        Err(_) if roles.scoring => None,
        Err(e) => return Err(e),
    };
    let mut reserved = vec![roles.outcome.clone()];
    reserved.extend(roles.cluster.iter().cloned());
    reserved.extend(roles.weights.iter().cloned());
    reserved.extend(roles.folds.iter().cloned());
    let covariates: Vec<String> = if roles.covariates.is_empty() {
        header.iter().filter(|h| !reserved.contains(h)).cloned().collect()
    } else {
        roles.covariates.clone()
    };
    let mut used: Vec<usize> = y_idx.into_iter().collect();
    let cov_idx = covariates.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    used.extend(&cov_idx);
    let cl_idx = roles.cluster.as_deref().map(find).transpose()?;
    let w_idx = roles.weights.as_deref().map(find).transpose()?;
    let f_idx = roles.folds.as_deref().map(find).transpose()?;
    used.extend(cl_idx.iter().chain(&w_idx).chain(&f_idx));

    let n = cells.first().map_or(0, |c| c.len());
    let missing: Vec<usize> = (0..n)
        .filter(|&i| used.iter().any(|&j| is_missing(&cells[j][i])))
        .map(|i| i + 1)
        .collect();
    if !missing.is_empty() {
        return Err(GkrlsError::MissingValues { rows: missing });
    }

    let parse_numeric = |j: usize| -> Result<Vec<f64>> {
        cells[j]
            .iter()
            .enumerate()
            .map(|(i, s)| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| GkrlsError::NonNumeric {
                        column: header[j].clone(),
                        row: i + 1,
                        value: s.clone(),
                    })
            })
            .collect()
    };

    let outcome = match y_idx {
        Some(j) => parse_numeric(j)?,
        None => vec![0.0; n],
    };
    if !roles.scoring && n >= 2 && outcome.iter().all(|&v| v == outcome[0]) {
        return Err(GkrlsError::Data(format!(
            "outcome '{}' is constant",
            roles.outcome
        )));
    }
    let mut builder = Dataset::builder(&roles.outcome, outcome);
    for (name, &j) in covariates.iter().zip(&cov_idx) {
        let forced = roles.categorical.contains(name);
        let parsed = cells[j].iter().filter(|s| s.parse::<f64>().is_ok()).count();
        if forced || parsed == 0 {
            builder = builder.categorical(name, &cells[j]);
        } else {
            builder = builder.numeric(name, parse_numeric(j)?);
        }
    }
    if let Some(j) = cl_idx {
        builder = builder.cluster(&header[j], &cells[j]);
    }
    if let Some(j) = w_idx {
        builder = builder.weights(parse_numeric(j)?);
    }
    if let Some(j) = f_idx {
        let f = parse_numeric(j)?;
        if let Some(i) = f.iter().position(|v| v.fract() != 0.0 || *v < 0.0) {
            return Err(GkrlsError::Data(format!(
                "fold label at row {} is not a nonnegative integer",
                i + 1
            )));
        }
        builder = builder.folds(f.iter().map(|&v| v as usize).collect());
    }
    builder.build()
}

/// Standardization applied to kernel inputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StandardizeKind {
    None,
    Scale,
    #[default]
    Mahalanobis,
}

impl std::str::FromStr for StandardizeKind {
    type Err = GkrlsError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "scale" => Ok(Self::Scale),
            "mahalanobis" => Ok(Self::Mahalanobis),
            _ => Err(GkrlsError::InvalidArgument(format!("unknown standardization '{s}'"))),
        }
    }
}

/// Affine map `x ↦ (x − center)·transform` fitted on training covariates.
#[derive(Debug, Clone)]
pub struct StandardizationTransform {
    pub kind: StandardizeKind,
    pub center: Vec<f64>,
    /// P×r matrix.
    pub transform: Mat<f64>,
    /// r×P matrix mapping standardized rows back to centered inputs.
    pub inverse: Mat<f64>,
    pub rank: usize,
    /// Input columns removed because they have no variance (scale only).
    pub dropped: Vec<usize>,
    pub warnings: Vec<String>,
}

impl StandardizationTransform {
    pub fn input_dim(&self) -> usize {
        self.center.len()
    }

    /// Map standardized rows back to the input scale.
    pub fn restore(&self, z: MatRef<'_, f64>) -> Mat<f64> {
        let mut x = z * &self.inverse;
        for j in 0..x.ncols() {
            for i in 0..x.nrows() {
                x[(i, j)] += self.center[j];
            }
        }
        x
    }
}

fn column_means(x: MatRef<'_, f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    (0..x.ncols()).map(|j| x.col(j).iter().sum::<f64>() / n).collect()
}

/// Fit a standardizer on training covariates (sample covariance with divisor N−1).
pub fn fit_standardizer(x: MatRef<'_, f64>, kind: StandardizeKind) -> Result<StandardizationTransform> {
    let (n, p) = (x.nrows(), x.ncols());
    if n < 2 {
        return Err(GkrlsError::Data("standardizer needs at least 2 rows".into()));
    }
    if p == 0 {
        return Err(GkrlsError::Data("standardizer needs at least one column".into()));
    }
    let center = column_means(x);
    let centered = Mat::from_fn(n, p, |i, j| x[(i, j)] - center[j]);
    let mut warnings = Vec::new();
    let mut dropped = Vec::new();
    let (transform, inverse) = match kind {
        StandardizeKind::None => (Mat::identity(p, p), Mat::identity(p, p)),
        StandardizeKind::Scale => {
            let mut keep = Vec::new();
            let mut sds = Vec::new();
            for j in 0..p {
                let ss: f64 = centered.col(j).iter().map(|v| v * v).sum();
                let sd = (ss / (n as f64 - 1.0)).sqrt();
                if sd > 1e-12 * (1.0 + center[j].abs()) {
                    keep.push(j);
                    sds.push(sd);
                } else {
                    dropped.push(j);
                    warnings.push(format!("column {j} has zero variance; dropped from kernel inputs"));
                }
            }
            if keep.is_empty() {
                return Err(GkrlsError::Data("rank-zero kernel inputs: every column is constant".into()));
            }
            let r = keep.len();
            let mut t = Mat::zeros(p, r);
            let mut inv = Mat::zeros(r, p);
            for (k, (&j, &sd)) in keep.iter().zip(&sds).enumerate() {
                t[(j, k)] = 1.0 / sd;
                inv[(k, j)] = sd;
            }
            (t, inv)
        }
        StandardizeKind::Mahalanobis => {
            // Whiten the unit-variance columns so that column units do not
            // enter the conditioning of the eigenproblem.
            let sds: Vec<f64> = (0..p)
                .map(|j| {
                    let sd = (centered.col(j).iter().map(|v| v * v).sum::<f64>() / (n as f64 - 1.0)).sqrt();
                    if sd > 1e-12 * (1.0 + center[j].abs()) {
                        sd
                    } else {
                        1.0
                    }
                })
                .collect();
            let unit = Mat::from_fn(n, p, |i, j| centered[(i, j)] / sds[j]);
            let mut cov = unit.transpose() * &unit;
            let scale = 1.0 / (n as f64 - 1.0);
            for j in 0..p {
                for i in 0..p {
                    cov[(i, j)] *= scale;
                }
            }
            crate::linalg::symmetrize(&mut cov);
            let eig = sym_eigen(cov.as_ref())?;
            let r = positive_rank(&eig.values, EIGEN_REL_TOL);
            if r == 0 {
                return Err(GkrlsError::Data("rank-zero kernel inputs: every column is constant".into()));
            }
            if r < p {
                warnings.push(format!("covariance rank {r} < {p}; whitening on the non-null eigenspace"));
            }
            let t = Mat::from_fn(p, r, |i, k| eig.vectors[(i, k)] / (eig.values[k].sqrt() * sds[i]));
            let inv = Mat::from_fn(r, p, |k, i| eig.vectors[(i, k)] * eig.values[k].sqrt() * sds[i]);
            (t, inv)
        }
    };
    let rank = transform.ncols();
    Ok(StandardizationTransform {
        kind,
        center,
        transform,
        inverse,
        rank,
        dropped,
        warnings,
    })
}

/// Apply a fitted standardizer (never refits).
pub fn apply_standardizer(t: &StandardizationTransform, x: MatRef<'_, f64>) -> Result<Mat<f64>> {
    if x.ncols() != t.input_dim() {
        return Err(GkrlsError::Dimension(format!(
            "standardizer expects {} columns, got {}",
            t.input_dim(),
            x.ncols()
        )));
    }
    let centered = Mat::from_fn(x.nrows(), x.ncols(), |i, j| x[(i, j)] - t.center[j]);
    Ok(&centered * &t.transform)
}
