//! Dataset representation, CSV ingestion and validation, subset projection,
//! and policy evaluation and sampling primitives.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::num;

/// Lower clipping bound for fitted propensities.
pub const PROPENSITY_CLIP: f64 = 1e-6;

/// A sorted, duplicate-free set of covariate indices (0-based, possibly empty).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Subset {
    indices: Vec<usize>,
}

impl Subset {
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Subset { indices }
    }

    pub fn empty() -> Self {
        Subset { indices: Vec::new() }
    }

    pub fn full(d: usize) -> Self {
        Subset {
            indices: (0..d).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        for &i in &self.indices {
            if i >= d {
                return Err(Error::IndexOutOfRange { index: i, d });
            }
        }
        Ok(())
    }

    pub fn complement(&self, d: usize) -> Subset {
        Subset {
            indices: (0..d).filter(|i| !self.indices.contains(i)).collect(),
        }
    }

    /// Projects a full covariate vector onto this subset.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| x[i]).collect()
    }

    /// All 2^d candidate subsets, refused for d > 12.
    pub fn all_subsets(d: usize) -> Result<Vec<Subset>> {
        if d > 12 {
            return Err(Error::TooManyCandidates(d));
        }
        Ok((0u32..1 << d)
            .map(|mask| Subset::new((0..d).filter(|i| mask >> i & 1 == 1).collect()))
            .collect())
    }
}

impl std::fmt::Display for Subset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{{")?;
        for (i, idx) in self.indices.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{idx}")?;
        }
        write!(f, "}}")
    }
}

/// One observation: environment (interned index), covariates, treatment,
/// outcome and the behavior propensity of the observed treatment.
#[derive(Debug, Clone)]
pub struct Observation {
    pub env: usize,
    pub x: Vec<f64>,
    pub t: usize,
    pub y: f64,
    pub p_obs: Option<f64>,
}

/// Immutable multi-environment dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    rows: Vec<Observation>,
    d: usize,
    k: usize,
    env_labels: Vec<String>,
    propensity_fitted: bool,
}

impl Dataset {
    pub fn new(
        rows: Vec<Observation>,
        d: usize,
        k: usize,
        env_labels: Vec<String>,
        propensity_fitted: bool,
    ) -> Result<Self> {
        let mut seen = vec![false; env_labels.len()];
        let has_p = rows.first().map(|r| r.p_obs.is_some()).unwrap_or(false);
        for (i, row) in rows.iter().enumerate() {
            if row.x.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: row.x.len(),
                });
            }
            if row.x.iter().any(|v| !v.is_finite()) || !row.y.is_finite() {
                return Err(Error::NonFiniteValue { row: i + 1 });
            }
            if row.t >= k {
                return Err(Error::TreatmentOutOfRange { row: i + 1 });
            }
            if let Some(p) = row.p_obs {
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::PropensityOutOfRange { row: i + 1 });
                }
            }
            if row.p_obs.is_some() != has_p {
                return Err(Error::MissingPropensity);
            }
            if row.env >= env_labels.len() {
                return Err(Error::UnknownEnvironment(format!("#{}", row.env)));
            }
            seen[row.env] = true;
        }
        for (e, ok) in seen.iter().enumerate() {
            if !ok {
                return Err(Error::EmptyEnvironment(env_labels[e].clone()));
            }
        }
        Ok(Dataset {
            rows,
            d,
            k,
            env_labels,
            propensity_fitted,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn env_labels(&self) -> &[String] {
        &self.env_labels
    }

    pub fn env_count(&self) -> usize {
        self.env_labels.len()
    }

    pub fn has_propensity(&self) -> bool {
        self.rows.first().map(|r| r.p_obs.is_some()).unwrap_or(false)
    }

    pub fn propensity_fitted(&self) -> bool {
        self.propensity_fitted
    }

    pub fn rows_of_env(&self, env: usize) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].env == env).collect()
    }

    /// Covariate matrix restricted to the subset (n × |S|; row order kept).
    pub fn project_subset(&self, s: &Subset) -> Result<DMatrix<f64>> {
        s.validate(self.d)?;
        Ok(DMatrix::from_fn(self.rows.len(), s.len(), |i, j| {
            self.rows[i].x[s.indices()[j]]
        }))
    }

    pub fn covariate_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows.len(), self.d, |i, j| self.rows[i].x[j])
    }

    /// New dataset holding the selected rows (same environment table; every
    /// environment must remain populated).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Dataset> {
        let rows: Vec<Observation> = indices.iter().map(|&i| self.rows[i].clone()).collect();
        Dataset::new(
            rows,
            self.d,
            self.k,
            self.env_labels.clone(),
            self.propensity_fitted,
        )
    }
}

/// Fitted conditional-average-treatment-effect function on a covariate
/// subset; τ̂(·, t₀) ≡ 0 by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CateModel {
    pub subset: Subset,
    pub form: CateForm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum CateForm {
    /// τ̂(x, 1) = intercept + coef·x.
    Linear { intercept: f64, coef: Vec<f64> },
    /// τ̂(x, 1) = kNN mean of stored training pseudo-outcomes.
    Knn {
        train_xs: Vec<Vec<f64>>,
        train_o: Vec<f64>,
        k: usize,
    },
}

impl CateModel {
    /// Evaluates τ̂ at subset covariates `x_s` for treatment `t`.
    pub fn eval(&self, x_s: &[f64], t: usize) -> f64 {
        if t == 0 {
            return 0.0;
        }
        match &self.form {
            CateForm::Linear { intercept, coef } => {
                debug_assert_eq!(coef.len(), x_s.len());
                intercept + coef.iter().zip(x_s).map(|(c, x)| c * x).sum::<f64>()
            }
            CateForm::Knn {
                train_xs,
                train_o,
                k,
            } => {
                let q = x_s.len();
                let m = train_xs.len();
                let train = DMatrix::from_fn(m, q, |i, j| train_xs[i][j]);
                num::knn_regress(&train, train_o, x_s, (*k).min(m)).unwrap_or(0.0)
            }
        }
    }

    /// Evaluates τ̂(·, 1) on full covariate rows, projecting internally.
    pub fn eval_rows(&self, x_full: &DMatrix<f64>) -> Vec<f64> {
        let m = x_full.nrows();
        match &self.form {
            CateForm::Linear { .. } => (0..m)
                .map(|i| {
                    let row: Vec<f64> = (0..x_full.ncols()).map(|j| x_full[(i, j)]).collect();
                    self.eval(&self.subset.project(&row), 1)
                })
                .collect(),
            CateForm::Knn {
                train_xs,
                train_o,
                k,
            } => {
                let q = self.subset.len();
                let tm = train_xs.len();
                let train = DMatrix::from_fn(tm, q, |i, j| train_xs[i][j]);
                let queries = DMatrix::from_fn(m, q, |i, j| x_full[(i, self.subset.indices()[j])]);
                num::knn_regress_batch(&train, train_o, &queries, (*k).min(tm))
                    .unwrap_or_else(|_| vec![0.0; m])
            }
        }
    }
}

/// A mapping from covariates to a probability distribution over treatments.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum PolicySpec {
    Uniform { k: usize },
    Constant { t: usize, k: usize },
    /// Binary policy: π(1|x) = σ(coef · (1, x^S)).
    Logistic { subset: Subset, coef: Vec<f64> },
    /// Greedy policy over a fitted CATE model (binary).
    CateGreedy { model: CateModel },
}

impl PolicySpec {
    /// Fixed random binary policy that ignores covariates.
    pub fn bernoulli(q: f64) -> PolicySpec {
        assert!(q > 0.0 && q < 1.0);
        PolicySpec::Logistic {
            subset: Subset::empty(),
            coef: vec![(q / (1.0 - q)).ln()],
        }
    }

    pub fn k(&self) -> usize {
        match self {
            PolicySpec::Uniform { k } | PolicySpec::Constant { k, .. } => *k,
            PolicySpec::Logistic { .. } | PolicySpec::CateGreedy { .. } => 2,
        }
    }

    /// Subset of covariates the policy reads.
    pub fn subset(&self) -> Subset {
        match self {
            PolicySpec::Uniform { .. } | PolicySpec::Constant { .. } => Subset::empty(),
            PolicySpec::Logistic { subset, .. } => subset.clone(),
            PolicySpec::CateGreedy { model } => model.subset.clone(),
        }
    }

    /// π(t | x); the probabilities over all treatments sum to one.
    pub fn probability(&self, x: &[f64], t: usize) -> Result<f64> {
        let probs = self.probabilities(x)?;
        if t >= probs.len() {
            return Err(Error::TreatmentOutOfRange { row: 0 });
        }
        Ok(probs[t])
    }

    pub fn probabilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            PolicySpec::Uniform { k } => Ok(vec![1.0 / *k as f64; *k]),
            PolicySpec::Constant { t, k } => {
                let mut p = vec![0.0; *k];
                p[*t] = 1.0;
                Ok(p)
            }
            PolicySpec::Logistic { subset, coef } => {
                subset
                    .validate(x.len())
                    .map_err(|_| Error::DimensionMismatch {
                        expected: subset.indices().last().map(|&i| i + 1).unwrap_or(0),
                        got: x.len(),
                    })?;
                if coef.len() != subset.len() + 1 {
                    return Err(Error::DimensionMismatch {
                        expected: subset.len() + 1,
                        got: coef.len(),
                    });
                }
                let mut z = coef[0];
                for (c, &i) in coef[1..].iter().zip(subset.indices()) {
                    z += c * x[i];
                }
                let p1 = if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                };
                Ok(vec![1.0 - p1, p1])
            }
            PolicySpec::CateGreedy { model } => {
                model
                    .subset
                    .validate(x.len())
                    .map_err(|_| Error::DimensionMismatch {
                        expected: model.subset.indices().last().map(|&i| i + 1).unwrap_or(0),
                        got: x.len(),
                    })?;
                let tau = model.eval(&model.subset.project(x), 1);
                // Baseline value is 0; exact ties share the mass equally.
                if tau > 1e-12 {
                    Ok(vec![0.0, 1.0])
                } else if tau < -1e-12 {
                    Ok(vec![1.0, 0.0])
                } else {
                    Ok(vec![0.5, 0.5])
                }
            }
        }
    }

    /// Samples a treatment; reproducible given the rng state.
    pub fn sample<R: Rng>(&self, x: &[f64], rng: &mut R) -> Result<usize> {
        let probs = self.probabilities(x)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (t, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(t);
            }
        }
        Ok(probs.len() - 1)
    }
}

/// Which e-invariance test produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMethod {
    Wald,
    Dr,
}

/// Result of one e-invariance test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestReport {
    pub subset: Subset,
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub reject: bool,
    pub alpha: f64,
    pub method: TestMethod,
    pub diagnostics: BTreeMap<String, String>,
}

// ---------------------------------------------------------------------------
// CSV ingestion and export
// ---------------------------------------------------------------------------

/// Whether behavior propensities are read from the file or fitted by a
/// pooled logistic model of T on (1, X) at ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorMode {
    Given,
    FitLogistic,
}

/// Column mapping for CSV ingestion. By default it is derived from the
/// header `env,x1,…,xd,t,y[,p_obs]`.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub env: String,
    pub x: Vec<String>,
    pub t: String,
    pub y: String,
    pub p_obs: Option<String>,
}

impl CsvSchema {
    pub fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let names: Vec<String> = header.iter().map(|s| s.trim().to_string()).collect();
        let find = |name: &str| -> Result<String> {
            if names.iter().any(|n| n == name) {
                Ok(name.to_string())
            } else {
                Err(Error::MissingColumn(name.to_string()))
            }
        };
        let env = find("env")?;
        let t = find("t")?;
        let y = find("y")?;
        let mut x = Vec::new();
        loop {
            let cand = format!("x{}", x.len() + 1);
            if names.iter().any(|n| *n == cand) {
                x.push(cand);
            } else {
                break;
            }
        }
        if x.is_empty() {
            return Err(Error::MissingColumn("x1".to_string()));
        }
        let p_obs = names.iter().find(|n| *n == "p_obs").cloned();
        Ok(CsvSchema { env, x, t, y, p_obs })
    }
}

fn column_index(header: &csv::StringRecord, name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

/// Reads and validates a dataset from CSV. Rows are kept in file order and
/// environment labels are interned by first appearance.
pub fn ingest_csv(
    path: impl AsRef<Path>,
    schema: Option<&CsvSchema>,
    behavior_mode: BehaviorMode,
) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let header = reader.headers()?.clone();
    let schema = match schema {
        Some(s) => s.clone(),
        None => CsvSchema::from_header(&header)?,
    };
    if behavior_mode == BehaviorMode::Given && schema.p_obs.is_none() {
        return Err(Error::MissingColumn("p_obs".to_string()));
    }
    let env_col = column_index(&header, &schema.env)?;
    let t_col = column_index(&header, &schema.t)?;
    let y_col = column_index(&header, &schema.y)?;
    let x_cols: Vec<usize> = schema
        .x
        .iter()
        .map(|n| column_index(&header, n))
        .collect::<Result<_>>()?;
    let p_col = match (&schema.p_obs, behavior_mode) {
        (Some(name), BehaviorMode::Given) => Some(column_index(&header, name)?),
        _ => None,
    };

    let d = x_cols.len();
    let mut env_labels: Vec<String> = Vec::new();
    let mut rows: Vec<Observation> = Vec::new();
    let parse_f64 = |s: &str, row: usize| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::NonFiniteValue { row })
    };
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 1;
        let label = record.get(env_col).unwrap_or("").trim().to_string();
        let env = match env_labels.iter().position(|l| *l == label) {
            Some(idx) => idx,
            None => {
                env_labels.push(label);
                env_labels.len() - 1
            }
        };
        let x: Vec<f64> = x_cols
            .iter()
            .map(|&c| parse_f64(record.get(c).unwrap_or(""), row_no))
            .collect::<Result<_>>()?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { row: row_no });
        }
        let t_raw = parse_f64(record.get(t_col).unwrap_or(""), row_no)?;
        if t_raw < 0.0 || t_raw.fract() != 0.0 {
            return Err(Error::TreatmentOutOfRange { row: row_no });
        }
        let y = parse_f64(record.get(y_col).unwrap_or(""), row_no)?;
        if !y.is_finite() {
            return Err(Error::NonFiniteValue { row: row_no });
        }
        let p_obs = match p_col {
            Some(c) => {
                let p = parse_f64(record.get(c).unwrap_or(""), row_no)?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::PropensityOutOfRange { row: row_no });
                }
                Some(p)
            }
            None => None,
        };
        rows.push(Observation {
            env,
            x,
            t: t_raw as usize,
            y,
            p_obs,
        });
    }
    let k = rows.iter().map(|r| r.t + 1).max().unwrap_or(2).max(2);
    let mut propensity_fitted = false;
    if behavior_mode == BehaviorMode::FitLogistic {
        fit_behavior_propensities(&mut rows, d, k)?;
        propensity_fitted = true;
    }
    Dataset::new(rows, d, k, env_labels, propensity_fitted)
}

/// Pooled logistic model of T on (1, X); fills p_obs with the fitted
/// probability of the observed treatment, clipped away from {0, 1}.
fn fit_behavior_propensities(rows: &mut [Observation], d: usize, k: usize) -> Result<()> {
    if k != 2 {
        return Err(Error::MultiLevelTreatmentUnsupported);
    }
    let n = rows.len();
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { rows[i].x[j - 1] });
    let t: Vec<f64> = rows.iter().map(|r| r.t as f64).collect();
    let coef = num::logistic_fit(&design, &t, 100, 1e-8)?;
    let eta = design * coef;
    for (row, &z) in rows.iter_mut().zip(eta.iter()) {
        let p1 = 1.0 / (1.0 + (-z).exp());
        let p1 = p1.clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP);
        row.p_obs = Some(if row.t == 1 { p1 } else { 1.0 - p1 });
    }
    Ok(())
}

/// Writes a dataset back to CSV with 17-significant-digit reals, so that
/// ingest ∘ export round-trips bit-exactly.
pub fn export_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path.as_ref())?;
    let mut header: Vec<String> = vec!["env".to_string()];
    for j in 1..=ds.d() {
        header.push(format!("x{j}"));
    }
    header.push("t".to_string());
    header.push("y".to_string());
    if ds.has_propensity() {
        header.push("p_obs".to_string());
    }
    writer.write_record(&header)?;
    let fmt = |v: f64| format!("{v:.16e}");
    for row in ds.rows() {
        let mut record: Vec<String> = vec![ds.env_labels()[row.env].clone()];
        record.extend(row.x.iter().map(|&v| fmt(v)));
        record.push(row.t.to_string());
        record.push(fmt(row.y));
        if let Some(p) = row.p_obs {
            record.push(fmt(p));
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a covariate-only CSV with header `x1,…,xd` into an n × d matrix.
pub fn import_covariates_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let header = reader.headers()?.clone();
    let mut x_cols = Vec::new();
    loop {
        let cand = format!("x{}", x_cols.len() + 1);
        match header.iter().position(|h| h.trim() == cand) {
            Some(i) => x_cols.push(i),
            None => break,
        }
    }
    if x_cols.is_empty() {
        return Err(Error::MissingColumn("x1".to_string()));
    }
    let mut values: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for record in reader.records() {
        let record = record?;
        for &c in &x_cols {
            let v: f64 = record
                .get(c)
                .ok_or_else(|| Error::MissingColumn(format!("x{}", c + 1)))?
                .trim()
                .parse()
                .map_err(|_| Error::NonFiniteValue { row: n })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue { row: n });
            }
            values.push(v);
        }
        n += 1;
    }
    Ok(DMatrix::from_row_slice(n, x_cols.len(), &values))
}

/// Writes a test report as JSON.
pub fn export_report(report: &TestReport, path: impl AsRef<Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(path, json)?;
    Ok(())
}
