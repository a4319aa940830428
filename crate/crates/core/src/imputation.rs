//! Fractional imputation from a fitted model, estimators built on the
//! imputed data, and delete-a-group jackknife intervals.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{refine, EmContext};
use crate::error::{CgmmError, Result};
use crate::linalg::{solve_general, Matrix};
use crate::model::{conditional_from_factor, factor_floored, CgmmParams, Dataset, DesignSpec, GaussianBlock};
use crate::rng::rng_from;
use crate::scalar::Real;

/// Fractional record for one row with at least one missing response:
/// component weights and the completed response vector under each component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FractionalRecord<T> {
    pub row: usize,
    pub weights: Vec<T>,
    /// One length-`p` vector per component: observed entries as given,
    /// missing entries replaced by that component's conditional mean.
    pub values: Vec<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct ImputationResult<T> {
    pub y_imputed: Matrix<T>,
    pub fractional: Vec<FractionalRecord<T>>,
    pub params_used: CgmmParams<T>,
    pub design: DesignSpec,
}

impl<T: Real> ImputationResult<T> {
    /// `(row, weight, completed y)` triples: weight 1 for fully observed rows,
    /// one triple per component for rows with missing entries.
    pub fn weighted_rows(&self) -> Vec<(usize, T, &[T])> {
        let n = self.y_imputed.rows();
        let mut out = Vec::with_capacity(n);
        let mut next = self.fractional.iter().peekable();
        for i in 0..n {
            match next.peek() {
                Some(rec) if rec.row == i => {
                    for (w, v) in rec.weights.iter().zip(&rec.values) {
                        out.push((i, *w, v.as_slice()));
                    }
                    next.next();
                }
                _ => out.push((i, T::one(), self.y_imputed.row(i))),
            }
        }
        out
    }
}

/// Imputes every missing response by the weighted sum of component
/// conditional means, with weights from the fitted posterior of each row.
pub fn impute<T: Real>(data: &Dataset<T>, spec: &DesignSpec, params: &CgmmParams<T>) -> Result<ImputationResult<T>> {
    params.validate(spec, data.p())?;
    let ctx = EmContext::new(data, spec)?;
    let resp = ctx.e_step(params)?.resp;
    let g = params.n_components();
    let p = data.p();
    let y = data.y();
    let mut y_imputed = y.clone();
    let mut records: Vec<FractionalRecord<T>> = Vec::new();

    for pat in &ctx.patterns {
        if pat.mis.is_empty() {
            continue;
        }
        let factors = pat
            .obs
            .is_empty()
            .then(Vec::new)
            .map(Ok)
            .unwrap_or_else(|| {
                params
                    .cov
                    .iter()
                    .map(|c| factor_floored(&c.select(&pat.obs, &pat.obs), ctx.cov_floor))
                    .collect::<Result<Vec<_>>>()
            })?;
        for &i in &pat.rows {
            let z = ctx.design.mean.row(i);
            let y_obs: Vec<T> = pat.obs.iter().map(|&j| y[(i, j)]).collect();
            let mut values = Vec::with_capacity(g);
            for k in 0..g {
                let mean = params.coef[k].vecmat(z);
                let mut v = vec![T::zero(); p];
                for (&j, &o) in pat.obs.iter().zip(&y_obs) {
                    v[j] = o;
                }
                if pat.obs.is_empty() {
                    v.copy_from_slice(&mean);
                } else {
                    let block = GaussianBlock {
                        mean,
                        cov: params.cov[k].clone(),
                        obs_idx: pat.obs.clone(),
                        mis_idx: pat.mis.clone(),
                    };
                    let (m, _) = conditional_from_factor(&block, &y_obs, &factors[k]);
                    for (&j, &mv) in pat.mis.iter().zip(&m) {
                        v[j] = mv;
                    }
                }
                values.push(v);
            }
            let weights = resp.pi.row(i).to_vec();
            for &j in &pat.mis {
                let mut s = T::zero();
                for k in 0..g {
                    s += weights[k] * values[k][j];
                }
                y_imputed[(i, j)] = s;
            }
            records.push(FractionalRecord { row: i, weights, values });
        }
    }
    records.sort_by_key(|r| r.row);
    Ok(ImputationResult {
        y_imputed,
        fractional: records,
        params_used: params.clone(),
        design: spec.clone(),
    })
}

/// Column means of the imputed responses.
pub fn estimate_mean<T: Real>(result: &ImputationResult<T>) -> Vec<T> {
    let y = &result.y_imputed;
    let n = T::from_usize_lossy(y.rows());
    (0..y.cols())
        .map(|j| y.column(j).into_iter().sum::<T>() / n)
        .collect()
}

/// `prob`-quantile of response column `col` under the fractional weights:
/// the smallest value whose weighted CDF reaches `prob`.
pub fn fractional_quantile<T: Real>(result: &ImputationResult<T>, col: usize, prob: f64) -> Result<T> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(CgmmError::InvalidConfig(format!("quantile level {prob} outside [0, 1]")));
    }
    if col >= result.y_imputed.cols() {
        return Err(CgmmError::DimensionMismatch(format!("no response column {col}")));
    }
    let mut pts: Vec<(T, T)> = result
        .weighted_rows()
        .into_iter()
        .filter(|(_, w, _)| *w > T::zero())
        .map(|(_, w, v)| (v[col], w))
        .collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let total: T = pts.iter().map(|p| p.1).sum();
    let target = T::lit(prob) * total;
    let mut acc = T::zero();
    for &(v, w) in &pts {
        acc += w;
        // Relative slack so that accumulated rounding does not skip a value.
        if acc >= target - T::lit(1e-12) * total {
            return Ok(v);
        }
    }
    pts.last().map(|p| p.0).ok_or(CgmmError::InvalidData("no rows".into()))
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-10 }
    }
}

/// Solves `n⁻¹ Σ_i Σ_g w_ig U(ξ; x_i, y_ig) = 0` by damped Newton with a
/// forward-difference Jacobian. `u(ξ, x, y)` returns a vector of `ξ`'s length.
pub fn solve_estimating_equation<T, F>(
    data: &Dataset<T>,
    result: &ImputationResult<T>,
    u: F,
    xi0: &[T],
    opts: &SolverOptions,
) -> Result<Vec<T>>
where
    T: Real,
    F: Fn(&[T], &[T], &[T]) -> Vec<T>,
{
    let rows = result.weighted_rows();
    let n = T::from_usize_lossy(data.n());
    let k = xi0.len();
    let eval = |xi: &[T]| -> Result<Vec<T>> {
        let mut acc = vec![T::zero(); k];
        for &(i, w, y) in &rows {
            let v = u(xi, data.x().row(i), y);
            if v.len() != k {
                return Err(CgmmError::DimensionMismatch(format!(
                    "estimating function returned {} values for {k} parameters",
                    v.len()
                )));
            }
            for (a, b) in acc.iter_mut().zip(v) {
                *a += w * b;
            }
        }
        for a in &mut acc {
            *a /= n;
        }
        Ok(acc)
    };
    let norm = |v: &[T]| v.iter().fold(T::zero(), |m, x| m.max(x.abs()));
    let tol = T::lit(opts.tol);
    let mut xi = xi0.to_vec();
    let mut f = eval(&xi)?;
    for _ in 0..opts.max_iter {
        if !(norm(&f) > tol) {
            if f.iter().all(|v| v.is_finite()) {
                return Ok(xi);
            }
            break;
        }
        let mut jac = Matrix::zeros(k, k);
        for c in 0..k {
            let h = T::lit(1e-6) * (T::one() + xi[c].abs());
            let mut xh = xi.clone();
            xh[c] += h;
            let fh = eval(&xh)?;
            for r in 0..k {
                jac[(r, c)] = (fh[r] - f[r]) / h;
            }
        }
        let neg: Vec<T> = f.iter().map(|v| -*v).collect();
        let Some(step) = solve_general(&jac, &neg) else {
            break;
        };
        let mut t = T::one();
        let f0 = norm(&f);
        let mut moved = false;
        for _ in 0..30 {
            let cand: Vec<T> = xi.iter().zip(&step).map(|(a, s)| *a + t * *s).collect();
            let fc = eval(&cand)?;
            if norm(&fc) < f0 {
                xi = cand;
                f = fc;
                moved = true;
                break;
            }
            t = t * T::lit(0.5);
        }
        if !moved {
            break;
        }
    }
    if norm(&f) <= tol {
        return Ok(xi);
    }
    Err(CgmmError::NoRoot {
        iterations: opts.max_iter,
        residual: norm(&f).as_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JackknifeReport<T> {
    pub point: Vec<T>,
    pub variance: Vec<T>,
    pub ci_lower: Vec<T>,
    pub ci_upper: Vec<T>,
    pub n_groups: usize,
}

/// Default number of jackknife groups.
pub fn default_groups(n: usize) -> usize {
    n.min(100)
}

/// Splits `0..n` into `n_groups` contiguous blocks of a seeded permutation.
pub fn jackknife_groups(n: usize, n_groups: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(seed));
    let base = n / n_groups;
    let extra = n % n_groups;
    let mut out = Vec::with_capacity(n_groups);
    let mut start = 0;
    for k in 0..n_groups {
        let len = base + usize::from(k < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Delete-a-group jackknife of `pipeline`, which maps a dataset to an
/// estimate vector. Replicates run in parallel; the reduction is in group order.
pub fn jackknife<T, F>(data: &Dataset<T>, pipeline: F, n_groups: usize, seed: u64) -> Result<JackknifeReport<T>>
where
    T: Real,
    F: Fn(&Dataset<T>) -> Result<Vec<T>> + Sync,
{
    let n = data.n();
    if n_groups < 2 || n_groups > n {
        return Err(CgmmError::InvalidConfig(format!(
            "jackknife needs 2 <= groups <= n (groups={n_groups}, n={n})"
        )));
    }
    let point = pipeline(data)?;
    let groups = jackknife_groups(n, n_groups, seed);
    let reps: Vec<Result<Vec<T>>> = groups
        .par_iter()
        .enumerate()
        .map(|(k, grp)| {
            let mut drop = vec![false; n];
            for &i in grp {
                drop[i] = true;
            }
            let keep: Vec<usize> = (0..n).filter(|&i| !drop[i]).collect();
            pipeline(&data.subset(&keep)).map_err(|e| CgmmError::JackknifeReplicate {
                group: k,
                source: Box::new(e),
            })
        })
        .collect();
    let reps: Vec<Vec<T>> = reps.into_iter().collect::<Result<_>>()?;
    Ok(jackknife_from_replicates(point, &reps))
}

/// Variance `((K−1)/K) Σ_k (θ_k − θ̄)²` and normal 95% intervals around `point`.
pub fn jackknife_from_replicates<T: Real>(point: Vec<T>, reps: &[Vec<T>]) -> JackknifeReport<T> {
    let k = reps.len();
    let kf = T::from_usize_lossy(k);
    let dim = point.len();
    let mut variance = vec![T::zero(); dim];
    for (j, v) in variance.iter_mut().enumerate() {
        let mean = reps.iter().map(|r| r[j]).sum::<T>() / kf;
        let ss: T = reps.iter().map(|r| (r[j] - mean) * (r[j] - mean)).sum();
        *v = (kf - T::one()) / kf * ss;
    }
    let z = T::lit(1.96);
    let ci_lower = point.iter().zip(&variance).map(|(p, v)| *p - z * v.sqrt()).collect();
    let ci_upper = point.iter().zip(&variance).map(|(p, v)| *p + z * v.sqrt()).collect();
    JackknifeReport {
        point,
        variance,
        ci_lower,
        ci_upper,
        n_groups: k,
    }
}

/// Settings for the model-based jackknife: each replicate warm-starts EM
/// from the full-sample estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JackknifeConfig {
    pub n_groups: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for JackknifeConfig {
    fn default() -> Self {
        Self {
            n_groups: None,
            max_iter: 50,
            tol: 1e-8,
            seed: 0,
        }
    }
}

/// Jackknife of `estimator` applied to the imputation from a warm-started refit.
pub fn jackknife_cgmm<T, E>(
    data: &Dataset<T>,
    spec: &DesignSpec,
    params: &CgmmParams<T>,
    estimator: E,
    cfg: &JackknifeConfig,
) -> Result<JackknifeReport<T>>
where
    T: Real,
    E: Fn(&ImputationResult<T>) -> Result<Vec<T>> + Sync,
{
    let groups = cfg.n_groups.unwrap_or_else(|| default_groups(data.n()));
    let full = data.n();
    let pipeline = |d: &Dataset<T>| -> Result<Vec<T>> {
        let params = if d.n() == full {
            params.clone()
        } else {
            refine(d, spec, params, cfg.max_iter, cfg.tol)?.params
        };
        estimator(&impute(d, spec, &params)?)
    };
    jackknife(data, pipeline, groups, cfg.seed)
}

/// Quartiles and mean of response column `col`: the estimate vector used by
/// the workflow report.
pub fn quartiles_and_mean<T: Real>(result: &ImputationResult<T>, col: usize) -> Result<Vec<T>> {
    Ok(vec![
        fractional_quantile(result, col, 0.25)?,
        fractional_quantile(result, col, 0.5)?,
        fractional_quantile(result, col, 0.75)?,
        estimate_mean(result)[col],
    ])
}
