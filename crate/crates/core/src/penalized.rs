//! Lasso-penalized EM for a scalar response with many covariates.
//!
//! Covariates are standardized over respondents before fitting; reported
//! coefficients are on the original scale. Intercepts are never penalized.
//! Expert slopes are updated by cyclic coordinate descent,
//! `β_j = S(Σ_i π_ig (y_i − ỹ_ig,j) x_ij, λ) / Σ_i π_ig x_ij²`, and each gate
//! row by coordinate descent on a weighted quadratic approximation of the
//! logit log-likelihood.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{canonical_order, EmContext, FitConfig, FitWarnings, COLLAPSE_REL};
use crate::error::{CgmmError, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{log_softmax_in_place, CgmmParams, Dataset, DesignSpec, Responsibilities};
use crate::rng::derived_rng;
use crate::scalar::Real;

const OMEGA_FLOOR: f64 = 1e-5;
const SIGMA2_FLOOR_REL: f64 = 1e-10;
const GATE_HALVINGS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PenaltyConfig {
    /// Strictly positive, sorted descending.
    pub lambda_grid: Vec<f64>,
    pub cv_folds: usize,
    /// Maximum coordinate-descent cycles per M-step.
    pub inner_cd_iter: usize,
    /// Coordinate descent stops when the largest coefficient change is below this.
    pub cd_tol: f64,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            lambda_grid: log_grid(100.0, 0.1, 50),
            cv_folds: 10,
            inner_cd_iter: 200,
            cd_tol: 1e-9,
        }
    }
}

impl PenaltyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() {
            return Err(CgmmError::InvalidConfig("empty lambda grid".into()));
        }
        if self.lambda_grid.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
            return Err(CgmmError::InvalidConfig("lambda grid must be strictly positive".into()));
        }
        if self.lambda_grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(CgmmError::InvalidConfig("lambda grid must be sorted descending".into()));
        }
        if self.cv_folds < 2 {
            return Err(CgmmError::InvalidConfig("cv_folds must be at least 2".into()));
        }
        if self.inner_cd_iter == 0 || !(self.cd_tol > 0.0) {
            return Err(CgmmError::InvalidConfig("inner_cd_iter and cd_tol must be positive".into()));
        }
        Ok(())
    }
}

/// `k` log-spaced values from `hi` down to `lo`.
pub fn log_grid(hi: f64, lo: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![hi];
    }
    let (a, b) = (hi.ln(), lo.ln());
    (0..k)
        .map(|i| (a + (b - a) * i as f64 / (k - 1) as f64).exp())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct PenalizedParams<T> {
    /// `G × (q+1)`, first row zero.
    pub alpha: Matrix<T>,
    /// Per component `(β_0, β_1, …, β_q)`.
    pub beta: Vec<Vec<T>>,
    pub sigma2: Vec<T>,
}

impl<T: Real> PenalizedParams<T> {
    pub fn n_components(&self) -> usize {
        self.beta.len()
    }

    /// The same model as a general parameter set with a full design.
    pub fn to_cgmm(&self) -> CgmmParams<T> {
        CgmmParams {
            alpha: self.alpha.clone(),
            coef: self.beta.iter().map(|b| Matrix::column_vector(b)).collect(),
            cov: self.sigma2.iter().map(|&s| Matrix::from_diag(&[s])).collect(),
        }
    }

    pub fn from_cgmm(params: &CgmmParams<T>) -> Result<Self> {
        if params.p() != 1 {
            return Err(CgmmError::DimensionMismatch("penalized parameters need a scalar response".into()));
        }
        Ok(Self {
            alpha: params.alpha.clone(),
            beta: params.coef.iter().map(|c| c.column(0)).collect(),
            sigma2: params.cov.iter().map(|c| c[(0, 0)]).collect(),
        })
    }

    /// Gate-weighted prediction `Σ_g π_g(x) (1, x') β_g`.
    pub fn predict_mean(&self, x: &[T]) -> T {
        let mut eta: Vec<T> = (0..self.alpha.rows())
            .map(|g| self.alpha[(g, 0)] + dot(&self.alpha.row(g)[1..], x))
            .collect();
        log_softmax_in_place(&mut eta);
        eta.iter()
            .zip(&self.beta)
            .map(|(lp, b)| lp.exp() * (b[0] + dot(&b[1..], x)))
            .sum()
    }

    /// `λ Σ_g Σ_{j≥1} (|α_gj| + |β_gj|)`.
    pub fn penalty(&self, lambda: T) -> T {
        let mut s = T::zero();
        for g in 0..self.n_components() {
            s += self.alpha.row(g)[1..].iter().map(|v| v.abs()).sum::<T>();
            s += self.beta[g][1..].iter().map(|v| v.abs()).sum::<T>();
        }
        lambda * s
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite()
            && self.beta.iter().flatten().all(|v| v.is_finite())
            && self.sigma2.iter().all(|v| v.is_finite())
    }
}

/// `S(z, γ) = sign(z) max(|z| − γ, 0)`.
pub fn soft_threshold<T: Real>(z: T, gamma: T) -> T {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        T::zero()
    }
}

/// `½ Σ_i w_i (y_i − b_0 − Σ_j x_ij b_j)² + λ Σ_{j≥1} |b_j|` with `x` given by columns.
pub fn weighted_lasso_objective<T: Real>(cols: &[Vec<T>], y: &[T], w: &[T], coef: &[T], lambda: T) -> T {
    let mut s = T::zero();
    for i in 0..y.len() {
        let mut f = coef[0];
        for (j, c) in cols.iter().enumerate() {
            f += c[i] * coef[j + 1];
        }
        let r = y[i] - f;
        s += w[i] * r * r;
    }
    T::lit(0.5) * s + lambda * coef[1..].iter().map(|v| v.abs()).sum::<T>()
}

/// Cyclic coordinate descent for the weighted lasso with an unpenalized
/// intercept, starting from `coef = (b_0, b_1, …, b_q)`. Covariates are
/// passed as columns. Stops after `max_cycles` cycles or when the largest
/// coefficient change in a cycle is below `tol`.
pub fn cd_update_beta<T: Real>(
    cols: &[Vec<T>],
    y: &[T],
    w: &[T],
    coef: &[T],
    lambda: T,
    max_cycles: usize,
    tol: T,
) -> Vec<T> {
    let n = y.len();
    let m = cols.len() + 1;
    // Weighted Gram matrix of [1, x] and cross products with y.
    let mut gram = vec![T::zero(); m * m];
    let mut xy = vec![T::zero(); m];
    let mut v = vec![T::one(); m];
    for i in 0..n {
        let wi = w[i];
        if wi == T::zero() {
            continue;
        }
        for (vj, c) in v[1..].iter_mut().zip(cols) {
            *vj = c[i];
        }
        for a in 0..m {
            let wa = wi * v[a];
            xy[a] += wa * y[i];
            let row = &mut gram[a * m..(a + 1) * m];
            for bb in a..m {
                row[bb] += wa * v[bb];
            }
        }
    }
    for a in 0..m {
        for bb in 0..a {
            gram[a * m + bb] = gram[bb * m + a];
        }
    }
    let mut b = coef.to_vec();
    // gb = G b, kept current as coordinates move.
    let mut gb: Vec<T> = (0..m)
        .map(|a| (0..m).map(|k| gram[a * m + k] * b[k]).sum())
        .collect();
    let shift = |j: usize, new: T, b: &mut Vec<T>, gb: &mut Vec<T>| -> T {
        let d = new - b[j];
        if d != T::zero() {
            for (a, g) in gb.iter_mut().enumerate() {
                *g += gram[a * m + j] * d;
            }
            b[j] = new;
        }
        d.abs()
    };
    for _ in 0..max_cycles {
        let mut delta = T::zero();
        for j in 1..m {
            let sxx = gram[j * m + j];
            let new = if sxx > T::zero() {
                let z = xy[j] - gb[j] + sxx * b[j];
                soft_threshold(z, lambda) / sxx
            } else {
                T::zero()
            };
            delta = delta.max(shift(j, new, &mut b, &mut gb));
        }
        let sw = gram[0];
        if sw > T::zero() {
            let new = b[0] + (xy[0] - gb[0]) / sw;
            delta = delta.max(shift(0, new, &mut b, &mut gb));
        }
        if delta < tol {
            break;
        }
    }
    b
}

/// `Σ_i Σ_g π_ig log π_g(x_i; α) − λ Σ_{g, j≥1} |α_gj|` for a gate design with a leading one column.
fn gate_penalized_objective<T: Real>(z: &Matrix<T>, pi: &Matrix<T>, alpha: &Matrix<T>, lambda: T) -> T {
    let g = alpha.rows();
    let mut q = T::zero();
    let mut eta = vec![T::zero(); g];
    for i in 0..z.rows() {
        for (a, e) in eta.iter_mut().enumerate() {
            *e = dot(alpha.row(a), z.row(i));
        }
        log_softmax_in_place(&mut eta);
        for a in 0..g {
            let w = pi[(i, a)];
            if w > T::zero() {
                q += w * eta[a];
            }
        }
    }
    let pen: T = (0..g)
        .map(|a| alpha.row(a)[1..].iter().map(|v| v.abs()).sum::<T>())
        .sum();
    q - lambda * pen
}

#[derive(Clone, Debug)]
pub struct GateUpdate<T> {
    pub alpha: Matrix<T>,
    /// Components whose update was skipped because every weight was at the floor.
    pub skipped: Vec<usize>,
}

/// One pass over gate rows `g = 2..G`: quadratic approximation of the
/// logit log-likelihood in row `g` (working response `h`, weights `ω`),
/// solved by coordinate descent, with step halving toward the previous
/// row if the penalized gate objective would decrease.
///
/// `z` is the gate design with a leading column of ones; `cols` are the
/// remaining columns of `z`.
pub fn gate_partial_quadratic<T: Real>(
    z: &Matrix<T>,
    cols: &[Vec<T>],
    pi: &Matrix<T>,
    alpha: &Matrix<T>,
    lambda: T,
    max_cycles: usize,
    tol: T,
) -> GateUpdate<T> {
    let n = z.rows();
    let g = alpha.rows();
    let mut alpha = alpha.clone();
    let mut skipped = Vec::new();
    let floor = T::lit(OMEGA_FLOOR);
    let mut eta = vec![T::zero(); g];
    for k in 1..g {
        let mut h = vec![T::zero(); n];
        let mut w = vec![T::zero(); n];
        let mut above = false;
        for i in 0..n {
            for (a, e) in eta.iter_mut().enumerate() {
                *e = dot(alpha.row(a), z.row(i));
            }
            let lin = eta[k];
            log_softmax_in_place(&mut eta);
            let p = eta[k].exp();
            let raw = p * (T::one() - p);
            above |= raw >= floor;
            let om = raw.max(floor);
            w[i] = om;
            h[i] = lin + (pi[(i, k)] - p) / om;
        }
        if !above {
            skipped.push(k);
            continue;
        }
        let old = alpha.row(k).to_vec();
        let new = cd_update_beta(cols, &h, &w, &old, lambda, max_cycles, tol);
        let before = gate_penalized_objective(z, pi, &alpha, lambda);
        let mut t = T::one();
        for _ in 0..=GATE_HALVINGS {
            let mut cand = alpha.clone();
            for (c, (o, nw)) in cand.row_mut(k).iter_mut().zip(old.iter().zip(&new)) {
                *c = *o + t * (*nw - *o);
            }
            if gate_penalized_objective(z, pi, &cand, lambda) >= before {
                alpha = cand;
                break;
            }
            t = t * T::lit(0.5);
        }
    }
    GateUpdate { alpha, skipped }
}

/// Result of one penalized EM fit.
#[derive(Clone, Debug)]
pub struct PenalizedFit<T> {
    pub lambda: f64,
    /// Original covariate scale.
    pub params: PenalizedParams<T>,
    /// Standardized covariate scale, used for warm starts.
    pub params_std: PenalizedParams<T>,
    pub loglik: T,
    /// Observed log-likelihood minus the penalty, per iteration.
    pub objective_trace: Vec<T>,
    pub converged: bool,
    pub n_iter: usize,
    pub warnings: FitWarnings,
}

/// Covariate centering and scaling computed over respondents.
#[derive(Clone, Debug)]
pub struct Standardizer<T> {
    pub mean: Vec<T>,
    pub sd: Vec<T>,
}

impl<T: Real> Standardizer<T> {
    pub fn from_respondents(data: &Dataset<T>) -> Self {
        let q = data.q();
        let rows: Vec<usize> = (0..data.n()).filter(|&i| !data.row_has_missing(i)).collect();
        let rows = if rows.len() >= 2 { rows } else { (0..data.n()).collect() };
        let m = T::from_usize_lossy(rows.len());
        let mut mean = vec![T::zero(); q];
        let mut sd = vec![T::zero(); q];
        for j in 0..q {
            let mu = rows.iter().map(|&i| data.x()[(i, j)]).sum::<T>() / m;
            let v = rows.iter().map(|&i| (data.x()[(i, j)] - mu).powi(2)).sum::<T>() / m;
            mean[j] = mu;
            sd[j] = if v > T::zero() { v.sqrt() } else { T::one() };
        }
        Self { mean, sd }
    }

    pub fn apply(&self, data: &Dataset<T>) -> Result<Dataset<T>> {
        let mut x = data.x().clone();
        for i in 0..x.rows() {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.sd[j];
            }
        }
        Dataset::new(x, data.y().clone(), data.mask().to_vec())
    }

    /// Converts a row `(c_0, c_1, …)` on the standardized scale to the original scale.
    fn unscale_row(&self, c: &[T]) -> Vec<T> {
        let mut out = c.to_vec();
        for j in 0..self.mean.len() {
            out[j + 1] = c[j + 1] / self.sd[j];
            out[0] -= c[j + 1] * self.mean[j] / self.sd[j];
        }
        out
    }

    fn scale_row(&self, c: &[T]) -> Vec<T> {
        let mut out = c.to_vec();
        for j in 0..self.mean.len() {
            out[j + 1] = c[j + 1] * self.sd[j];
            out[0] += c[j + 1] * self.mean[j];
        }
        out
    }

    pub fn to_original(&self, p: &PenalizedParams<T>) -> PenalizedParams<T> {
        let mut alpha = p.alpha.clone();
        for g in 0..alpha.rows() {
            let r = self.unscale_row(p.alpha.row(g));
            alpha.row_mut(g).copy_from_slice(&r);
        }
        PenalizedParams {
            alpha,
            beta: p.beta.iter().map(|b| self.unscale_row(b)).collect(),
            sigma2: p.sigma2.clone(),
        }
    }

    pub fn to_standardized(&self, p: &PenalizedParams<T>) -> PenalizedParams<T> {
        let mut alpha = p.alpha.clone();
        for g in 0..alpha.rows() {
            let r = self.scale_row(p.alpha.row(g));
            alpha.row_mut(g).copy_from_slice(&r);
        }
        PenalizedParams {
            alpha,
            beta: p.beta.iter().map(|b| self.scale_row(b)).collect(),
            sigma2: p.sigma2.clone(),
        }
    }
}

/// Standardized data and the pieces of it reused by every M-step.
struct Prepared<'a, T> {
    ctx: EmContext<'a, T>,
    /// All standardized covariate columns.
    cols: Vec<Vec<T>>,
    /// Standardized covariate columns restricted to respondents.
    resp_cols: Vec<Vec<T>>,
    respondents: Vec<usize>,
    y_resp: Vec<T>,
    sigma2_floor: T,
}

impl<'a, T: Real> Prepared<'a, T> {
    fn new(std_data: &'a Dataset<T>) -> Result<Self> {
        let q = std_data.q();
        let ctx = EmContext::new(std_data, &DesignSpec::full(q))?;
        let respondents: Vec<usize> = (0..std_data.n()).filter(|&i| std_data.is_observed(i, 0)).collect();
        if respondents.is_empty() {
            return Err(CgmmError::InvalidData("no observed responses".into()));
        }
        let cols: Vec<Vec<T>> = (0..q).map(|j| std_data.x().column(j)).collect();
        let resp_cols = cols
            .iter()
            .map(|c| respondents.iter().map(|&i| c[i]).collect())
            .collect();
        let y_resp: Vec<T> = respondents.iter().map(|&i| std_data.y()[(i, 0)]).collect();
        let m = T::from_usize_lossy(y_resp.len());
        let ybar = y_resp.iter().copied().sum::<T>() / m;
        let var = y_resp.iter().map(|v| (*v - ybar).powi(2)).sum::<T>() / m;
        let sigma2_floor = T::lit(SIGMA2_FLOOR_REL) * if var > T::zero() { var } else { T::one() };
        Ok(Self {
            ctx,
            cols,
            resp_cols,
            respondents,
            y_resp,
            sigma2_floor,
        })
    }

    fn m_step(
        &self,
        resp: &Responsibilities<T>,
        cur: &PenalizedParams<T>,
        lambda: T,
        pen: &PenaltyConfig,
    ) -> Result<(PenalizedParams<T>, FitWarnings)> {
        let n = self.ctx.n();
        let g = cur.n_components();
        let tol = T::lit(pen.cd_tol);
        let mut warnings = FitWarnings::default();
        let alpha = if g > 1 {
            let up = gate_partial_quadratic(
                &self.ctx.design.gate,
                &self.cols,
                &resp.pi,
                &cur.alpha,
                lambda,
                pen.inner_cd_iter,
                tol,
            );
            warnings.gate_not_converged |= !up.skipped.is_empty();
            up.alpha
        } else {
            Matrix::zeros(1, cur.alpha.cols())
        };
        let collapse = T::lit(COLLAPSE_REL) * T::from_usize_lossy(n);
        let mut beta = Vec::with_capacity(g);
        let mut sigma2 = Vec::with_capacity(g);
        for k in 0..g {
            let w: Vec<T> = self.respondents.iter().map(|&i| resp.pi[(i, k)]).collect();
            let mass: T = w.iter().copied().sum();
            if !(mass >= collapse) || mass <= T::zero() {
                return Err(CgmmError::ComponentCollapse {
                    component: k,
                    mass: mass.as_f64(),
                });
            }
            let b = cd_update_beta(&self.resp_cols, &self.y_resp, &w, &cur.beta[k], lambda, pen.inner_cd_iter, tol);
            let mut ss = T::zero();
            for (r, (&yv, &wi)) in self.y_resp.iter().zip(&w).enumerate() {
                let mut f = b[0];
                for (j, c) in self.resp_cols.iter().enumerate() {
                    f += c[r] * b[j + 1];
                }
                ss += wi * (yv - f).powi(2);
            }
            let mut s2 = ss / mass;
            if !(s2 >= self.sigma2_floor) {
                s2 = self.sigma2_floor;
                warnings.cov_floored = true;
            }
            beta.push(b);
            sigma2.push(s2);
        }
        Ok((PenalizedParams { alpha, beta, sigma2 }, warnings))
    }

    fn initial(&self, g: usize, cfg: &FitConfig, start: usize, lambda: T, pen: &PenaltyConfig) -> Result<PenalizedParams<T>> {
        let mut rng = derived_rng(cfg.seed, &[0x5e1a, g as u64, start as u64]);
        let resp = self.ctx.initial_responsibilities(g, cfg.init, &mut rng);
        let q = self.ctx.data.q();
        let ybar = self.y_resp.iter().copied().sum::<T>() / T::from_usize_lossy(self.y_resp.len());
        let mut b0 = vec![T::zero(); q + 1];
        b0[0] = ybar;
        let zero = PenalizedParams {
            alpha: Matrix::zeros(g, q + 1),
            beta: vec![b0; g],
            sigma2: vec![T::one(); g],
        };
        Ok(self.m_step(&resp, &zero, lambda, pen)?.0)
    }

    fn run(
        &self,
        mut params: PenalizedParams<T>,
        lambda: T,
        cfg: &FitConfig,
        pen: &PenaltyConfig,
    ) -> Result<(PenalizedParams<T>, Vec<T>, T, bool, usize, FitWarnings)> {
        let tol = T::lit(cfg.tol);
        let mut warnings = FitWarnings::default();
        let mut e = self.ctx.e_step(&params.to_cgmm())?;
        let mut trace = vec![e.loglik - params.penalty(lambda)];
        let mut converged = false;
        let mut n_iter = 0;
        while n_iter < cfg.max_iter {
            let (next, w) = self.m_step(&e.resp, &params, lambda, pen)?;
            warnings.cov_floored |= w.cov_floored;
            warnings.gate_not_converged |= w.gate_not_converged;
            n_iter += 1;
            let e_next = self.ctx.e_step(&next.to_cgmm())?;
            let obj = e_next.loglik - next.penalty(lambda);
            let prev = *trace.last().unwrap();
            trace.push(obj);
            params = next;
            e = e_next;
            if (obj - prev).abs() / (obj.abs() + T::one()) < tol {
                converged = true;
                break;
            }
        }
        Ok((params, trace, e.loglik, converged, n_iter, warnings))
    }
}

/// Penalized EM at one `λ`. With `warm` (standardized-scale parameters) the
/// fit starts there; otherwise `cfg.n_starts` initializations are tried and
/// the highest penalized objective is kept.
pub fn fit_penalized_em<T: Real>(
    data: &Dataset<T>,
    cfg: &FitConfig,
    pen: &PenaltyConfig,
    lambda: f64,
    warm: Option<&PenalizedParams<T>>,
) -> Result<PenalizedFit<T>> {
    cfg.validate()?;
    if data.p() != 1 {
        return Err(CgmmError::InvalidConfig("penalized fitting needs a scalar response".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(CgmmError::InvalidConfig(format!("invalid lambda {lambda}")));
    }
    let scaler = Standardizer::from_respondents(data);
    let std_data = scaler.apply(data)?;
    fit_standardized(&std_data, &scaler, cfg, pen, lambda, warm)
}

fn fit_standardized<T: Real>(
    std_data: &Dataset<T>,
    scaler: &Standardizer<T>,
    cfg: &FitConfig,
    pen: &PenaltyConfig,
    lambda: f64,
    warm: Option<&PenalizedParams<T>>,
) -> Result<PenalizedFit<T>> {
    let prep = Prepared::new(std_data)?;
    let lam = T::lit(lambda);
    let g = cfg.n_components;
    let mut best: Option<(PenalizedParams<T>, Vec<T>, T, bool, usize, FitWarnings)> = None;
    let mut failures = 0;
    let starts: Vec<Option<PenalizedParams<T>>> = match warm {
        Some(p) => vec![Some(p.clone())],
        None => (0..cfg.n_starts).map(|_| None).collect(),
    };
    for (s, init) in starts.into_iter().enumerate() {
        let run = match init {
            Some(p) => Ok(p),
            None => prep.initial(g, cfg, s, lam, pen),
        }
        .and_then(|p0| prep.run(p0, lam, cfg, pen));
        match run {
            Ok(r) => {
                let better = best.as_ref().is_none_or(|b| r.1.last() > b.1.last());
                if better {
                    best = Some(r);
                }
            }
            Err(e) => {
                log::debug!("penalized start {s} failed: {e}");
                failures += 1;
            }
        }
    }
    let (params_std, trace, loglik, converged, n_iter, mut warnings) = best.ok_or(CgmmError::AllStartsDegenerate)?;
    warnings.collapsed_starts = failures;
    let mut general = scaler.to_original(&params_std).to_cgmm();
    canonical_order(&mut general, &DesignSpec::full(std_data.q()));
    let params = PenalizedParams::from_cgmm(&general)?;
    let params_std = scaler.to_standardized(&params);
    Ok(PenalizedFit {
        lambda,
        params,
        params_std,
        loglik,
        objective_trace: trace,
        converged,
        n_iter,
        warnings,
    })
}

/// Fits every `λ` of the grid in descending order, each warm-started from the previous one.
pub fn fit_lambda_path<T: Real>(data: &Dataset<T>, cfg: &FitConfig, pen: &PenaltyConfig) -> Result<Vec<PenalizedFit<T>>> {
    pen.validate()?;
    cfg.validate()?;
    if data.p() != 1 {
        return Err(CgmmError::InvalidConfig("penalized fitting needs a scalar response".into()));
    }
    let scaler = Standardizer::from_respondents(data);
    let std_data = scaler.apply(data)?;
    let mut out: Vec<PenalizedFit<T>> = Vec::with_capacity(pen.lambda_grid.len());
    for &lambda in &pen.lambda_grid {
        let warm = out.last().map(|f| f.params_std.clone());
        out.push(fit_standardized(&std_data, &scaler, cfg, pen, lambda, warm.as_ref())?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvResult {
    pub best_lambda: f64,
    /// `(λ, mean held-out squared error)` in grid order.
    pub curve: Vec<(f64, f64)>,
    pub folds_used: usize,
}

/// Assigns respondents to `k` folds after a seeded shuffle.
pub fn respondent_folds<T: Real>(data: &Dataset<T>, k: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut resp: Vec<usize> = (0..data.n()).filter(|&i| !data.row_has_missing(i)).collect();
    resp.shuffle(&mut derived_rng(seed, &[0xcf]));
    let mut folds = vec![Vec::new(); k];
    for (pos, i) in resp.into_iter().enumerate() {
        folds[pos % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    folds
}

/// k-fold cross-validation of `λ` over respondents. Nonrespondents stay in
/// every training set. The score is the mean squared error of the
/// gate-weighted prediction on held-out respondents; ties go to the larger `λ`.
pub fn cv_select_lambda<T: Real>(data: &Dataset<T>, cfg: &FitConfig, pen: &PenaltyConfig) -> Result<CvResult> {
    pen.validate()?;
    let n_resp = (0..data.n()).filter(|&i| !data.row_has_missing(i)).count();
    let mut k = pen.cv_folds;
    if n_resp < k {
        if n_resp < 2 {
            return Err(CgmmError::InvalidData(format!("{n_resp} respondents are too few for cross-validation")));
        }
        log::warn!("only {n_resp} respondents; reducing folds from {k} to {n_resp}");
        k = n_resp;
    }
    let folds = respondent_folds(data, k, cfg.seed);
    let per_fold: Vec<Result<Vec<f64>>> = folds
        .par_iter()
        .map(|held| {
            let mut drop = vec![false; data.n()];
            for &i in held {
                drop[i] = true;
            }
            let train: Vec<usize> = (0..data.n()).filter(|&i| !drop[i]).collect();
            let path = fit_lambda_path(&data.subset(&train), cfg, pen)?;
            Ok(path
                .iter()
                .map(|fit| {
                    held.iter()
                        .map(|&i| {
                            let e = fit.params.predict_mean(data.x().row(i)) - data.y()[(i, 0)];
                            (e * e).as_f64()
                        })
                        .sum::<f64>()
                })
                .collect())
        })
        .collect();
    let mut sse = vec![0.0; pen.lambda_grid.len()];
    for f in per_fold {
        for (a, b) in sse.iter_mut().zip(f?) {
            *a += b;
        }
    }
    let curve: Vec<(f64, f64)> = pen
        .lambda_grid
        .iter()
        .zip(&sse)
        .map(|(&l, &s)| (l, s / n_resp as f64))
        .collect();
    let mut best = 0;
    for (i, c) in curve.iter().enumerate() {
        if c.1 < curve[best].1 {
            best = i;
        }
    }
    Ok(CvResult {
        best_lambda: curve[best].0,
        curve,
        folds_used: k,
    })
}

/// Cross-validates `λ`, then refits the full path on all rows and returns
/// the fit at the selected `λ` together with the CV result.
pub fn fit_penalized_cv<T: Real>(data: &Dataset<T>, cfg: &FitConfig, pen: &PenaltyConfig) -> Result<(PenalizedFit<T>, CvResult)> {
    let cv = cv_select_lambda(data, cfg, pen)?;
    let upto: Vec<f64> = pen
        .lambda_grid
        .iter()
        .copied()
        .take_while(|&l| l >= cv.best_lambda)
        .collect();
    let path_cfg = PenaltyConfig {
        lambda_grid: upto,
        ..pen.clone()
    };
    let fit = fit_lambda_path(data, cfg, &path_cfg)?
        .pop()
        .expect("grid contains the selected lambda");
    Ok((fit, cv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::fit_em;
    use crate::rng::rng_from;
    use rand_distr::{Distribution, StandardNormal};

    fn lasso_data(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
        let mut rng = rng_from(seed);
        let mut cols = vec![vec![0.0; n]; 2];
        let mut y = vec![0.0; n];
        let mut w = vec![0.0; n];
        for i in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            cols[0][i] = a;
            cols[1][i] = 0.6 * a + b;
            y[i] = 0.5 + 1.5 * a - 0.7 * cols[1][i] + e;
            w[i] = 0.2 + (i % 5) as f64 * 0.2;
        }
        (cols, y, w)
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-0.4, 1.0), 0.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(1.0, 1.0), 0.0);
    }

    #[test]
    fn unpenalized_cd_is_weighted_least_squares() {
        let (cols, y, w) = lasso_data(100, 1);
        let b = cd_update_beta(&cols, &y, &w, &[0.0; 3], 0.0, 10_000, 1e-14);
        let mut xtx = Matrix::zeros(3, 3);
        let mut xty = vec![0.0; 3];
        for i in 0..100 {
            let z = [1.0, cols[0][i], cols[1][i]];
            for a in 0..3 {
                for c in 0..3 {
                    xtx[(a, c)] += w[i] * z[a] * z[c];
                }
                xty[a] += w[i] * z[a] * y[i];
            }
        }
        let ols = crate::linalg::solve_general(&xtx, &xty).unwrap();
        for a in 0..3 {
            assert!((b[a] - ols[a]).abs() < 1e-6);
        }
    }

    #[test]
    fn large_lambda_zeroes_slopes() {
        let (mut cols, mut y, _) = lasso_data(80, 2);
        let w = vec![1.0; 80];
        for c in cols.iter_mut().chain(std::iter::once(&mut y)) {
            let m = c.iter().sum::<f64>() / 80.0;
            let s = (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 80.0).sqrt();
            c.iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        let lmax = cols
            .iter()
            .map(|c| c.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().abs())
            .fold(0.0, f64::max);
        let b = cd_update_beta(&cols, &y, &w, &[0.0; 3], lmax, 100, 1e-12);
        assert_eq!(&b[1..], &[0.0, 0.0]);
        let b = cd_update_beta(&cols, &y, &w, &[0.0; 3], 0.9 * lmax, 100, 1e-12);
        assert!(b[1..].iter().any(|v| *v != 0.0));
    }

    #[test]
    fn cd_matches_projected_gradient_oracle() {
        let (cols, y, w) = lasso_data(60, 3);
        let lambda = 4.0;
        let b = cd_update_beta(&cols, &y, &w, &[0.0; 3], lambda, 10_000, 1e-13);
        // Proximal gradient on the same objective.
        let mut v = [0.0f64; 3];
        let step = 1e-3;
        for _ in 0..200_000 {
            let mut g = [0.0; 3];
            for i in 0..60 {
                let r = y[i] - v[0] - v[1] * cols[0][i] - v[2] * cols[1][i];
                g[0] -= w[i] * r;
                g[1] -= w[i] * r * cols[0][i];
                g[2] -= w[i] * r * cols[1][i];
            }
            v[0] -= step * g[0];
            for j in 1..3 {
                v[j] = soft_threshold(v[j] - step * g[j], step * lambda);
            }
        }
        for a in 0..3 {
            assert!((b[a] - v[a]).abs() < 1e-5, "{b:?} vs {v:?}");
        }
    }

    #[test]
    fn cd_cycles_do_not_increase_objective() {
        let (cols, y, w) = lasso_data(50, 4);
        let mut b = vec![0.0; 3];
        let mut prev = weighted_lasso_objective(&cols, &y, &w, &b, 2.0);
        for _ in 0..20 {
            b = cd_update_beta(&cols, &y, &w, &b, 2.0, 1, 0.0);
            let now = weighted_lasso_objective(&cols, &y, &w, &b, 2.0);
            assert!(now <= prev + 1e-10);
            prev = now;
        }
    }

    #[test]
    fn zero_weight_coordinate_is_zero() {
        let cols = vec![vec![0.0; 4], vec![1.0, 2.0, 3.0, 4.0]];
        let y = vec![1.0, 2.0, 2.5, 4.5];
        let b = cd_update_beta(&cols, &y, &[1.0; 4], &[0.0, 5.0, 0.0], 0.0, 100, 1e-12);
        assert_eq!(b[1], 0.0);
    }

    fn logistic_design(n: usize, seed: u64) -> (Matrix<f64>, Vec<Vec<f64>>, Matrix<f64>) {
        let mut rng = rng_from(seed);
        let mut z = Matrix::zeros(n, 2);
        let mut pi = Matrix::zeros(n, 2);
        for i in 0..n {
            let x: f64 = StandardNormal.sample(&mut rng);
            z[(i, 0)] = 1.0;
            z[(i, 1)] = x;
            let p = 1.0 / (1.0 + (-(0.3 + 1.2 * x)).exp());
            let u: f64 = rand::Rng::random(&mut rng);
            let soft = if u < p { 0.8 } else { 0.2 };
            pi[(i, 1)] = soft;
            pi[(i, 0)] = 1.0 - soft;
        }
        let cols = vec![z.column(1)];
        (z, cols, pi)
    }

    #[test]
    fn gate_iterations_reach_irls_solution() {
        let (z, cols, pi) = logistic_design(300, 5);
        let mut alpha = Matrix::zeros(2, 2);
        for _ in 0..100 {
            alpha = gate_partial_quadratic(&z, &cols, &pi, &alpha, 0.0, 1000, 1e-14).alpha;
        }
        // Plain IRLS oracle.
        let mut a = [0.0f64; 2];
        for _ in 0..100 {
            let mut h = [[0.0; 2]; 2];
            let mut g = [0.0; 2];
            for i in 0..300 {
                let x = [1.0, z[(i, 1)]];
                let p = 1.0 / (1.0 + (-(a[0] + a[1] * x[1])).exp());
                for r in 0..2 {
                    g[r] += (pi[(i, 1)] - p) * x[r];
                    for c in 0..2 {
                        h[r][c] += p * (1.0 - p) * x[r] * x[c];
                    }
                }
            }
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            a[0] += (h[1][1] * g[0] - h[0][1] * g[1]) / det;
            a[1] += (h[0][0] * g[1] - h[1][0] * g[0]) / det;
        }
        assert!((alpha[(1, 0)] - a[0]).abs() < 1e-8);
        assert!((alpha[(1, 1)] - a[1]).abs() < 1e-8);
    }

    #[test]
    fn gate_fixed_point_and_full_shrinkage() {
        let (z, cols, _) = logistic_design(200, 6);
        let alpha = Matrix::from_rows(&[[0.0, 0.0], [0.4, -0.9]]);
        let mut pi = Matrix::zeros(200, 2);
        for i in 0..200 {
            let p = 1.0 / (1.0 + (-(0.4 - 0.9 * z[(i, 1)])).exp());
            pi[(i, 1)] = p;
            pi[(i, 0)] = 1.0 - p;
        }
        let up = gate_partial_quadratic(&z, &cols, &pi, &alpha, 0.0, 100, 1e-14).alpha;
        assert!((up[(1, 0)] - 0.4).abs() < 1e-10 && (up[(1, 1)] + 0.9).abs() < 1e-10);

        let mut a = alpha.clone();
        for _ in 0..50 {
            a = gate_partial_quadratic(&z, &cols, &pi, &a, 1e6, 100, 1e-14).alpha;
        }
        assert_eq!(a[(1, 1)], 0.0);
        let mean_p = (0..200).map(|i| pi[(i, 1)]).sum::<f64>() / 200.0;
        assert!((a[(1, 0)] - (mean_p / (1.0 - mean_p)).ln()).abs() < 1e-6);
    }

    fn two_regime_data(n: usize, seed: u64, missing: bool) -> Dataset<f64> {
        let mut rng = rng_from(seed);
        let mut x = Matrix::zeros(n, 2);
        let mut y = Matrix::zeros(n, 1);
        let mut mask = vec![true; n];
        for i in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let u: f64 = StandardNormal.sample(&mut rng);
            x[(i, 0)] = a;
            x[(i, 1)] = b;
            y[(i, 0)] = if a + 0.7 * u > 0.0 { 3.0 + 2.0 * b + 0.3 * e } else { -3.0 - b + 0.3 * e };
            if missing && i % 4 == 0 {
                mask[i] = false;
            }
        }
        Dataset::new(x, y, mask).unwrap()
    }

    #[test]
    fn zero_lambda_matches_unpenalized_em() {
        let data = two_regime_data(300, 7, false);
        let cfg = FitConfig {
            n_components: 2,
            tol: 1e-14,
            max_iter: 5000,
            ..FitConfig::default()
        };
        let pen = PenaltyConfig {
            cd_tol: 1e-13,
            inner_cd_iter: 10_000,
            ..PenaltyConfig::default()
        };
        let plain = fit_em(&data, &DesignSpec::full(2), &cfg).unwrap();
        let lasso = fit_penalized_em(&data, &cfg, &pen, 0.0, None).unwrap();
        let general = lasso.params.to_cgmm();
        assert!(!plain.warnings.gate_capped);
        for g in 0..2 {
            for a in 0..3 {
                assert!((general.coef[g][(a, 0)] - plain.params.coef[g][(a, 0)]).abs() < 1e-5);
                assert!((general.alpha[(g, a)] - plain.params.alpha[(g, a)]).abs() < 1e-5);
            }
            assert!((general.cov[g][(0, 0)] - plain.params.cov[g][(0, 0)]).abs() < 1e-5);
        }
    }

    #[test]
    fn path_is_finite_with_missing_and_q_above_n() {
        let mut rng = rng_from(8);
        let (n, q) = (50, 60);
        let mut x = Matrix::<f64>::zeros(n, q);
        let mut y = Matrix::zeros(n, 1);
        for i in 0..n {
            for j in 0..q {
                x[(i, j)] = StandardNormal.sample(&mut rng);
            }
            let e: f64 = StandardNormal.sample(&mut rng);
            y[(i, 0)] = x[(i, 0)] - x[(i, 1)] + e;
        }
        let mask = (0..n).map(|i| i % 5 != 0).collect();
        let data = Dataset::new(x, y, mask).unwrap();
        let cfg = FitConfig {
            n_components: 2,
            n_starts: 2,
            max_iter: 100,
            ..FitConfig::default()
        };
        let pen = PenaltyConfig {
            lambda_grid: log_grid(100.0, 1.0, 5),
            ..PenaltyConfig::default()
        };
        let path = fit_lambda_path(&data, &cfg, &pen).unwrap();
        assert_eq!(path.len(), 5);
        assert!(path.iter().all(|f| f.params.is_finite() && f.loglik.is_finite()));
    }

    #[test]
    fn single_lambda_cv_returns_it() {
        let data = two_regime_data(60, 9, true);
        let cfg = FitConfig {
            n_components: 1,
            n_starts: 1,
            ..FitConfig::default()
        };
        let pen = PenaltyConfig {
            lambda_grid: vec![3.0],
            cv_folds: 5,
            ..PenaltyConfig::default()
        };
        let cv = cv_select_lambda(&data, &cfg, &pen).unwrap();
        assert_eq!(cv.best_lambda, 3.0);
        assert!(cv.curve[0].1.is_finite());
    }

    #[test]
    fn standardizer_round_trip() {
        let data = two_regime_data(40, 10, true);
        let s = Standardizer::from_respondents(&data);
        let p = PenalizedParams {
            alpha: Matrix::from_rows(&[[0.0, 0.0, 0.0], [0.5, 1.0, -2.0]]),
            beta: vec![vec![1.0, 2.0, 3.0], vec![-1.0, 0.0, 0.5]],
            sigma2: vec![1.0, 2.0],
        };
        let back = s.to_original(&s.to_standardized(&p));
        for (a, b) in back.beta.iter().flatten().zip(p.beta.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Same predictions on either scale.
        let sd = s.apply(&data).unwrap();
        let ps = s.to_standardized(&p);
        for i in 0..5 {
            let a = p.predict_mean(data.x().row(i));
            let b = ps.predict_mean(sd.x().row(i));
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn config_checks() {
        assert!(PenaltyConfig::default().validate().is_ok());
        let g = PenaltyConfig::default().lambda_grid;
        assert_eq!(g.len(), 50);
        assert!((g[0] - 100.0).abs() < 1e-12 && (g[49] - 0.1).abs() < 1e-12);
        let bad = PenaltyConfig {
            lambda_grid: vec![1.0, 2.0],
            ..PenaltyConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
