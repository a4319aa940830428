//! CSV datasets, fitted-parameter JSON and small report writers.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::{FitReport, FitWarnings};
use crate::error::{CgmmError, Result};
use crate::imputation::ImputationResult;
use crate::linalg::{Cholesky, Matrix};
use crate::model::{CgmmParams, Dataset, DesignSpec};
use crate::scalar::Real;

pub const PARAMS_VERSION: &str = "cgmm-params-v1";

fn is_missing_token(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    X(usize),
    Y(usize),
    Ignored,
}

fn role_of(name: &str) -> Role {
    let name = name.trim();
    let parse = |rest: &str| rest.parse::<usize>().ok().filter(|&k| k >= 1);
    if let Some(k) = name.strip_prefix('x').and_then(parse) {
        Role::X(k - 1)
    } else if let Some(k) = name.strip_prefix('y').and_then(parse) {
        Role::Y(k - 1)
    } else {
        Role::Ignored
    }
}

fn csv_error(location: impl Into<String>, message: impl Into<String>) -> CgmmError {
    CgmmError::Csv {
        location: location.into(),
        message: message.into(),
    }
}

/// Column index for each of `k` roles, requiring exactly `1..=k` to be present.
fn role_columns(roles: &[Role], pick: fn(Role) -> Option<usize>, prefix: char) -> Result<Vec<usize>> {
    let found: Vec<(usize, usize)> = roles
        .iter()
        .enumerate()
        .filter_map(|(c, r)| pick(*r).map(|k| (k, c)))
        .collect();
    let k = found.len();
    let mut cols = vec![usize::MAX; k];
    for (idx, c) in found {
        if idx >= k || cols[idx] != usize::MAX {
            return Err(csv_error(
                "header",
                format!("{prefix} columns must be numbered {prefix}1..{prefix}{k} without gaps or repeats"),
            ));
        }
        cols[idx] = c;
    }
    Ok(cols)
}

/// Reads a dataset from CSV text. Columns named `x1..xq` are covariates and
/// `y1..yp` responses; other columns are ignored. Missing responses are
/// empty cells, `NA` or `NaN`; a missing covariate is an error.
pub fn read_csv<T: Real, R: Read>(reader: R) -> Result<Dataset<T>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| csv_error("header", e.to_string()))?
        .clone();
    let roles: Vec<Role> = header.iter().map(role_of).collect();
    let xc = role_columns(&roles, |r| if let Role::X(k) = r { Some(k) } else { None }, 'x')?;
    let yc = role_columns(&roles, |r| if let Role::Y(k) = r { Some(k) } else { None }, 'y')?;
    for (name, r) in header.iter().zip(&roles) {
        if *r == Role::Ignored {
            log::warn!("ignoring column '{name}'");
        }
    }
    if xc.is_empty() || yc.is_empty() {
        return Err(csv_error("header", "need at least one x column and one y column"));
    }
    let (q, p) = (xc.len(), yc.len());
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut mask = Vec::new();
    for (r, rec) in rdr.records().enumerate() {
        let line = r + 2;
        let rec = rec.map_err(|e| csv_error(format!("line {line}"), e.to_string()))?;
        let cell = |c: usize| rec.get(c).unwrap_or("");
        for &c in &xc {
            let s = cell(c);
            if is_missing_token(s) {
                return Err(csv_error(
                    format!("line {line}, column {}", &header[c]),
                    "missing covariate value",
                ));
            }
            let v: f64 = s.trim().parse().map_err(|_| {
                csv_error(format!("line {line}, column {}", &header[c]), format!("not a number: '{s}'"))
            })?;
            if !v.is_finite() {
                return Err(csv_error(format!("line {line}, column {}", &header[c]), "non-finite covariate"));
            }
            xs.push(T::lit(v));
        }
        for &c in &yc {
            let s = cell(c);
            if is_missing_token(s) {
                ys.push(T::zero());
                mask.push(false);
            } else {
                let v: f64 = s.trim().parse().map_err(|_| {
                    csv_error(format!("line {line}, column {}", &header[c]), format!("not a number: '{s}'"))
                })?;
                ys.push(T::lit(v));
                mask.push(true);
            }
        }
    }
    let n = mask.len() / p;
    if n == 0 {
        return Err(CgmmError::InvalidData("no data rows".into()));
    }
    let data = Dataset::new(Matrix::from_vec(n, q, xs), Matrix::from_vec(n, p, ys), mask)?;
    log::info!("read {n} rows, {q} covariates, {p} responses, missing rate {:.4}", data.missing_rate());
    Ok(data)
}

pub fn load_csv<T: Real>(path: &Path) -> Result<Dataset<T>> {
    let f = File::open(path)?;
    read_csv(f)
}

fn fmt_num<T: Real>(v: T) -> String {
    format!("{}", v.as_f64())
}

/// Writes covariates and responses with `x1..xq, y1..yp` headers; entries
/// not in `observed` are written as empty cells.
pub fn write_csv<T: Real, W: Write>(writer: W, x: &Matrix<T>, y: &Matrix<T>, observed: Option<&[bool]>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let (q, p) = (x.cols(), y.cols());
    let header: Vec<String> = (1..=q).map(|j| format!("x{j}")).chain((1..=p).map(|j| format!("y{j}"))).collect();
    w.write_record(&header).map_err(|e| csv_error("output", e.to_string()))?;
    for i in 0..x.rows() {
        let mut rec: Vec<String> = x.row(i).iter().map(|&v| fmt_num(v)).collect();
        for j in 0..p {
            let obs = observed.is_none_or(|m| m[i * p + j]);
            rec.push(if obs { fmt_num(y[(i, j)]) } else { String::new() });
        }
        w.write_record(&rec).map_err(|e| csv_error("output", e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Saves a dataset, writing missing responses as empty cells.
pub fn save_csv<T: Real>(path: &Path, data: &Dataset<T>) -> Result<()> {
    write_csv(BufWriter::new(File::create(path)?), data.x(), data.y(), Some(data.mask()))
}

/// Saves the completed dataset of an imputation.
pub fn save_completed_csv<T: Real>(path: &Path, data: &Dataset<T>, result: &ImputationResult<T>) -> Result<()> {
    write_csv(BufWriter::new(File::create(path)?), data.x(), &result.y_imputed, None)
}

/// Long-format fractional imputation: one line per (row, component) with
/// the fractional weight and the component's completed response vector.
pub fn write_fractional_csv<T: Real, W: Write>(writer: W, result: &ImputationResult<T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let p = result.y_imputed.cols();
    let header: Vec<String> = ["row", "g", "weight"]
        .iter()
        .map(|s| s.to_string())
        .chain((1..=p).map(|j| format!("y{j}")))
        .collect();
    w.write_record(&header).map_err(|e| csv_error("output", e.to_string()))?;
    for rec in &result.fractional {
        for (g, (wt, vals)) in rec.weights.iter().zip(&rec.values).enumerate() {
            let mut line = vec![(rec.row + 1).to_string(), (g + 1).to_string(), fmt_num(*wt)];
            line.extend(vals.iter().map(|&v| fmt_num(v)));
            w.write_record(&line).map_err(|e| csv_error("output", e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Versioned JSON document for fitted parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsDocument {
    pub version: String,
    #[serde(rename = "G")]
    pub n_components: usize,
    pub design: DesignSpec,
    pub alpha: Matrix<f64>,
    #[serde(rename = "B")]
    pub coef: Vec<Matrix<f64>>,
    #[serde(rename = "Sigma")]
    pub cov: Vec<Matrix<f64>>,
    pub loglik: Option<f64>,
    pub loglik_trace: Vec<f64>,
    pub bic: Option<f64>,
    pub converged: Option<bool>,
    pub n_iter: Option<usize>,
    pub n_obs: Option<usize>,
    pub warnings: Option<FitWarnings>,
}

impl ParamsDocument {
    pub fn from_params<T: Real>(params: &CgmmParams<T>, design: &DesignSpec) -> Self {
        let p: CgmmParams<f64> = params.cast();
        Self {
            version: PARAMS_VERSION.to_string(),
            n_components: p.n_components(),
            design: design.clone(),
            alpha: p.alpha,
            coef: p.coef,
            cov: p.cov,
            loglik: None,
            loglik_trace: Vec::new(),
            bic: None,
            converged: None,
            n_iter: None,
            n_obs: None,
            warnings: None,
        }
    }

    pub fn from_report<T: Real>(report: &FitReport<T>) -> Self {
        Self {
            loglik: Some(report.loglik().as_f64()),
            loglik_trace: report.loglik_trace.iter().map(|v| v.as_f64()).collect(),
            bic: Some(report.bic.as_f64()),
            converged: Some(report.converged),
            n_iter: Some(report.n_iter),
            n_obs: Some(report.n_obs),
            warnings: Some(report.warnings.clone()),
            ..Self::from_params(&report.params, &report.design)
        }
    }

    pub fn params<T: Real>(&self) -> CgmmParams<T> {
        CgmmParams {
            alpha: self.alpha.clone(),
            coef: self.coef.clone(),
            cov: self.cov.clone(),
        }
        .cast()
    }

    /// Checks the version tag and that the parameters fit the stored design.
    pub fn validate(&self, p: Option<usize>) -> Result<()> {
        if self.version != PARAMS_VERSION {
            return Err(CgmmError::InvalidData(format!(
                "unsupported params version '{}' (expected {PARAMS_VERSION})",
                self.version
            )));
        }
        if self.n_components != self.alpha.rows() {
            return Err(CgmmError::InvalidData("G does not match the gate matrix".into()));
        }
        let p = p.unwrap_or_else(|| self.cov.first().map_or(0, |c| c.rows()));
        self.params::<f64>().validate(&self.design, p)?;
        for (k, s) in self.cov.iter().enumerate() {
            let tol = 1e-10 * s.max_abs().max(1.0);
            let symmetric = (0..p).all(|i| (0..i).all(|j| (s[(i, j)] - s[(j, i)]).abs() <= tol));
            if !symmetric || Cholesky::new(s).is_none() {
                return Err(CgmmError::InvalidData(format!(
                    "Sigma of component {} is not symmetric positive definite",
                    k + 1
                )));
            }
        }
        if !self.alpha.is_finite() || self.coef.iter().any(|b| !b.is_finite()) {
            return Err(CgmmError::InvalidData("non-finite parameter".into()));
        }
        Ok(())
    }
}

pub fn save_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamsDocument> {
    let doc: ParamsDocument = serde_json::from_reader(File::open(path)?)?;
    doc.validate(None)?;
    Ok(doc)
}
