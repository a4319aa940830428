//! EM fitting of the conditional Gaussian mixture under complete and
//! missing responses, the observed-data log-likelihood, BIC, and selection
//! of the number of components.
//!
//! One EM iteration is:
//!
//! 1. E-step: `π_ig ∝ π_g(x_i; α) f(y_i,obs | x_i, z_i = g)` in log space.
//!    Rows with every response missing get the gate probabilities.
//! 2. Gate M-step: weighted multinomial-logit score equation, solved by
//!    Newton-Raphson with step halving.
//! 3. Expert M-step: responsibility-weighted least squares and residual
//!    covariance, with the usual conditional-expectation correction for
//!    partially observed response vectors.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CgmmError, Result};
use crate::kmeans::kmeans_labels;
use crate::linalg::{dot, solve_spd_ridged, Matrix};
use crate::model::{
    apply_cov_floor, factor_floored, ln_2pi, log_softmax_in_place,
    CgmmParams, Dataset, Design, DesignSpec, Pattern, Responsibilities,
};
use crate::rng::{derived_rng, Rng};
use crate::scalar::{log_sum_exp, Real};

/// Relative factor for the covariance floor: `floor = COV_FLOOR_REL × max var(y_obs)`.
pub const COV_FLOOR_REL: f64 = 1e-8;
/// A component whose responsibility mass falls below `COLLAPSE_REL × n` is collapsed.
pub const COLLAPSE_REL: f64 = 1e-6;
const EXPERT_RIDGE: f64 = 1e-8;
const NEWTON_DECREMENT_REL: f64 = 1e-11;
const MAX_ATTEMPTS_PER_START: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMethod {
    /// k-means on covariates and column-mean-completed responses.
    Kmeans,
    /// Dirichlet(1) responsibilities.
    RandomResponsibility,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub n_components: usize,
    pub max_iter: usize,
    /// Relative change of the observed log-likelihood that stops EM.
    pub tol: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub init: InitMethod,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            n_components: 1,
            max_iter: 500,
            tol: 1e-8,
            n_starts: 5,
            seed: 0,
            init: InitMethod::Kmeans,
        }
    }
}

impl FitConfig {
    pub fn with_components(&self, g: usize) -> Self {
        Self {
            n_components: g,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_components == 0 {
            return Err(CgmmError::InvalidConfig("G must be at least 1".into()));
        }
        if self.max_iter == 0 {
            return Err(CgmmError::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.tol > 0.0) {
            return Err(CgmmError::InvalidConfig("tol must be positive".into()));
        }
        if self.n_starts == 0 {
            return Err(CgmmError::InvalidConfig("n_starts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Newton settings for the gate M-step.
#[derive(Clone, Debug)]
pub struct GateOptions {
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Bound on `|α_gj|`; hitting it means (quasi-)separation.
    pub cap: f64,
    /// Stop when the gradient max-norm is below `grad_tol × n`.
    pub grad_tol: f64,
}

impl Default for GateOptions {
    fn default() -> Self {
        Self {
            max_iter: 50,
            max_halvings: 20,
            cap: 30.0,
            grad_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitWarnings {
    pub gate_capped: bool,
    pub gate_not_converged: bool,
    pub expert_ridge: bool,
    pub cov_floored: bool,
    pub collapsed_starts: usize,
}

impl FitWarnings {
    fn merge(&mut self, other: &FitWarnings) {
        self.gate_capped |= other.gate_capped;
        self.gate_not_converged |= other.gate_not_converged;
        self.expert_ridge |= other.expert_ridge;
        self.cov_floored |= other.cov_floored;
        self.collapsed_starts += other.collapsed_starts;
    }

    pub fn any(&self) -> bool {
        self.gate_capped
            || self.gate_not_converged
            || self.expert_ridge
            || self.cov_floored
            || self.collapsed_starts > 0
    }
}

#[derive(Clone, Debug)]
pub struct FitReport<T> {
    pub params: CgmmParams<T>,
    pub design: DesignSpec,
    /// Observed log-likelihood after each completed iteration.
    pub loglik_trace: Vec<T>,
    pub converged: bool,
    pub bic: T,
    pub n_iter: usize,
    pub n_obs: usize,
    pub p: usize,
    pub best_start: usize,
    pub warnings: FitWarnings,
}

impl<T: Real> FitReport<T> {
    pub fn loglik(&self) -> T {
        *self.loglik_trace.last().expect("non-empty trace")
    }

    pub fn n_components(&self) -> usize {
        self.params.n_components()
    }

    pub fn free_parameters(&self) -> usize {
        free_parameters(self.n_components(), &self.design, self.p)
    }
}

/// Result of an E-step.
#[derive(Clone, Debug)]
pub struct EStep<T> {
    pub resp: Responsibilities<T>,
    pub loglik: T,
}

/// Gate M-step output.
#[derive(Clone, Debug)]
pub struct GateFit<T> {
    pub alpha: Matrix<T>,
    pub capped: bool,
    pub converged: bool,
    pub iterations: usize,
}

/// Expert M-step output.
#[derive(Clone, Debug)]
pub struct ExpertFit<T> {
    pub coef: Vec<Matrix<T>>,
    pub cov: Vec<Matrix<T>>,
    pub ridged: bool,
    pub floored: bool,
}

/// Data, design matrices and response patterns shared across EM iterations.
#[derive(Clone, Debug)]
pub struct EmContext<'a, T> {
    pub data: &'a Dataset<T>,
    pub design: Design<T>,
    pub patterns: Vec<Pattern>,
    pub cov_floor: T,
}

impl<'a, T: Real> EmContext<'a, T> {
    pub fn new(data: &'a Dataset<T>, spec: &DesignSpec) -> Result<Self> {
        let design = Design::new(data, spec)?;
        let v = data.max_observed_variance();
        let cov_floor = T::lit(COV_FLOOR_REL) * if v > T::zero() { v } else { T::one() };
        Ok(Self {
            data,
            design,
            patterns: data.patterns(),
            cov_floor,
        })
    }

    pub fn n(&self) -> usize {
        self.data.n()
    }

    pub fn p(&self) -> usize {
        self.data.p()
    }

    /// Per-row log gate probabilities (`n × G`).
    pub fn log_gate(&self, alpha: &Matrix<T>) -> Matrix<T> {
        let n = self.n();
        let g = alpha.rows();
        let mut out = Matrix::zeros(n, g);
        for i in 0..n {
            let z = self.design.gate.row(i);
            let row = out.row_mut(i);
            for (k, v) in row.iter_mut().enumerate() {
                *v = dot(alpha.row(k), z);
            }
            log_softmax_in_place(row);
        }
        out
    }

    /// Adds `log f(y_i,obs | x_i, z_i = g)` to column `g` of `logw`.
    fn add_expert_logpdf(&self, params: &CgmmParams<T>, logw: &mut Matrix<T>) -> Result<()> {
        let half = T::lit(0.5);
        let y = self.data.y();
        let zm = &self.design.mean;
        let mut resid: Vec<T> = Vec::with_capacity(self.p());
        for pat in &self.patterns {
            if pat.obs.is_empty() {
                continue;
            }
            let r = pat.obs.len();
            for (g, (coef, cov)) in params.coef.iter().zip(&params.cov).enumerate() {
                let sub = cov.select(&pat.obs, &pat.obs);
                let ch = factor_floored(&sub, self.cov_floor)?;
                let konst = -half * (T::from_usize_lossy(r) * ln_2pi::<T>() + ch.log_det());
                for &i in &pat.rows {
                    let z = zm.row(i);
                    resid.clear();
                    for &j in &pat.obs {
                        let mut m = T::zero();
                        for (a, &za) in z.iter().enumerate() {
                            m += za * coef[(a, j)];
                        }
                        resid.push(y[(i, j)] - m);
                    }
                    ch.forward_in_place(&mut resid);
                    let lp = konst - half * dot(&resid, &resid);
                    if !lp.is_finite() {
                        return Err(CgmmError::DegenerateComponent { component: g, row: i });
                    }
                    logw[(i, g)] += lp;
                }
            }
        }
        Ok(())
    }

    pub fn e_step(&self, params: &CgmmParams<T>) -> Result<EStep<T>> {
        let mut logw = self.log_gate(&params.alpha);
        self.add_expert_logpdf(params, &mut logw)?;
        let mut loglik = T::zero();
        for i in 0..self.n() {
            let row = logw.row_mut(i);
            let lse = log_sum_exp(row);
            if !lse.is_finite() {
                return Err(CgmmError::DegenerateComponent { component: 0, row: i });
            }
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
            if !self.data.row_fully_missing(i) {
                loglik += lse;
            }
        }
        Ok(EStep {
            resp: Responsibilities { pi: logw },
            loglik,
        })
    }

    pub fn observed_loglik(&self, params: &CgmmParams<T>) -> Result<T> {
        Ok(self.e_step(params)?.loglik)
    }

    /// Responsibility-weighted Gaussian regression for every component.
    pub fn m_step_experts(&self, resp: &Responsibilities<T>, current: &CgmmParams<T>) -> Result<ExpertFit<T>> {
        let n = self.n();
        let p = self.p();
        let km = self.design.mean.cols();
        let ng = resp.n_components();
        let y = self.data.y();
        let zm = &self.design.mean;
        let collapse = T::lit(COLLAPSE_REL) * T::from_usize_lossy(n);
        let mut out = ExpertFit {
            coef: Vec::with_capacity(ng),
            cov: Vec::with_capacity(ng),
            ridged: false,
            floored: false,
        };

        for g in 0..ng {
            // Completed responses, plus one conditional covariance per pattern.
            let mut filled = Matrix::zeros(n, p);
            let mut corrections: Vec<(&[usize], Matrix<T>, T)> = Vec::new();
            let mut active: Vec<usize> = Vec::with_capacity(n);
            let coef_g = &current.coef[g];
            let cov_g = &current.cov[g];
            let mut mean = vec![T::zero(); p];
            let mut resid = Vec::with_capacity(p);
            for pat in &self.patterns {
                if pat.obs.is_empty() {
                    continue;
                }
                if pat.mis.is_empty() {
                    for &i in &pat.rows {
                        filled.row_mut(i).copy_from_slice(y.row(i));
                        active.push(i);
                    }
                    continue;
                }
                let s_oo = factor_floored(&cov_g.select(&pat.obs, &pat.obs), self.cov_floor)?;
                let s_mo = cov_g.select(&pat.mis, &pat.obs);
                // K' = Σ_oo^{-1} Σ_om, so the conditional mean is μ_m + K (y_o − μ_o).
                let kt = s_oo.solve_mat(&s_mo.transpose());
                let mut c_mis = cov_g.select(&pat.mis, &pat.mis);
                let corr = s_mo.matmul(&kt);
                for a in 0..pat.mis.len() {
                    for b in 0..pat.mis.len() {
                        c_mis[(a, b)] -= corr[(a, b)];
                    }
                }
                c_mis.symmetrize();
                let mut wsum = T::zero();
                for &i in &pat.rows {
                    let z = zm.row(i);
                    for (j, m) in mean.iter_mut().enumerate() {
                        *m = z.iter().enumerate().fold(T::zero(), |acc, (a, &za)| acc + za * coef_g[(a, j)]);
                    }
                    resid.clear();
                    resid.extend(pat.obs.iter().map(|&j| y[(i, j)] - mean[j]));
                    let row = filled.row_mut(i);
                    for &j in &pat.obs {
                        row[j] = y[(i, j)];
                    }
                    for (a, &j) in pat.mis.iter().enumerate() {
                        let mut v = mean[j];
                        for (o, r) in resid.iter().enumerate() {
                            v += kt[(o, a)] * *r;
                        }
                        row[j] = v;
                    }
                    wsum += resp.pi[(i, g)];
                    active.push(i);
                }
                corrections.push((&pat.mis, c_mis, wsum));
            }

            let mass: T = active.iter().map(|&i| resp.pi[(i, g)]).sum();
            if !(mass >= collapse) || mass <= T::zero() {
                return Err(CgmmError::ComponentCollapse {
                    component: g,
                    mass: mass.as_f64(),
                });
            }

            let mut xtx = Matrix::zeros(km, km);
            let mut xty = Matrix::zeros(km, p);
            for &i in &active {
                let w = resp.pi[(i, g)];
                if w == T::zero() {
                    continue;
                }
                let z = zm.row(i);
                let yr = filled.row(i);
                for a in 0..km {
                    let wa = w * z[a];
                    for b in a..km {
                        xtx[(a, b)] += wa * z[b];
                    }
                    for (j, &yv) in yr.iter().enumerate() {
                        xty[(a, j)] += wa * yv;
                    }
                }
            }
            for a in 0..km {
                for b in 0..a {
                    xtx[(a, b)] = xtx[(b, a)];
                }
            }
            let mut coef = Matrix::zeros(km, p);
            for j in 0..p {
                let rhs = xty.column(j);
                let (sol, ridged) = solve_spd_ridged(&xtx, &rhs, T::lit(EXPERT_RIDGE))
                    .ok_or(CgmmError::DegenerateCovariance)?;
                out.ridged |= ridged;
                for (a, v) in sol.into_iter().enumerate() {
                    coef[(a, j)] = v;
                }
            }

            let mut cov = Matrix::zeros(p, p);
            let mut resid = vec![T::zero(); p];
            for &i in &active {
                let w = resp.pi[(i, g)];
                if w == T::zero() {
                    continue;
                }
                let mean = coef.vecmat(zm.row(i));
                for ((r, &yv), &m) in resid.iter_mut().zip(filled.row(i)).zip(&mean) {
                    *r = yv - m;
                }
                for a in 0..p {
                    let wa = w * resid[a];
                    for b in a..p {
                        cov[(a, b)] += wa * resid[b];
                    }
                }
            }
            for (mis, c, w) in &corrections {
                let w = *w;
                for (a, &ja) in mis.iter().enumerate() {
                    for (b, &jb) in mis.iter().enumerate() {
                        if ja <= jb {
                            cov[(ja, jb)] += w * c[(a, b)];
                        }
                    }
                }
            }
            for a in 0..p {
                for b in 0..a {
                    cov[(a, b)] = cov[(b, a)];
                }
            }
            cov.scale(T::one() / mass);
            out.floored |= apply_cov_floor(&mut cov, self.cov_floor);
            out.coef.push(coef);
            out.cov.push(cov);
        }
        Ok(out)
    }

    /// One full M-step. Returns the new parameters and any warnings raised.
    pub fn m_step(
        &self,
        resp: &Responsibilities<T>,
        current: &CgmmParams<T>,
        gate_opts: &GateOptions,
    ) -> Result<(CgmmParams<T>, FitWarnings)> {
        let gate = m_step_gate(&self.design.gate, resp, &current.alpha, gate_opts);
        let experts = self.m_step_experts(resp, current)?;
        let warnings = FitWarnings {
            gate_capped: gate.capped,
            gate_not_converged: !gate.converged,
            expert_ridge: experts.ridged,
            cov_floored: experts.floored,
            collapsed_starts: 0,
        };
        Ok((
            CgmmParams {
                alpha: gate.alpha,
                coef: experts.coef,
                cov: experts.cov,
            },
            warnings,
        ))
    }

    /// Parameters whose expert part is fitted to `resp` from scratch: used
    /// right after initialization, when no previous covariance exists.
    fn params_from_responsibilities(&self, resp: &Responsibilities<T>, gate_opts: &GateOptions) -> Result<(CgmmParams<T>, FitWarnings)> {
        let g = resp.n_components();
        let p = self.p();
        let km = self.design.mean.cols();
        // Marginal moments of the observed responses seed the conditional
        // expectations of the first expert update.
        let means = self.data.observed_column_means();
        let var = self.data.max_observed_variance().max(T::lit(1e-6));
        let mut coef0 = Matrix::zeros(km, p);
        if self.design.spec.mean_intercept {
            coef0.row_mut(0).copy_from_slice(&means);
        }
        let mut cov0 = Matrix::identity(p);
        cov0.scale(var);
        let start = CgmmParams {
            alpha: Matrix::zeros(g, self.design.gate.cols()),
            coef: vec![coef0; g],
            cov: vec![cov0; g],
        };
        self.m_step(resp, &start, gate_opts)
    }

    pub fn initial_responsibilities(&self, g: usize, init: InitMethod, rng: &mut Rng) -> Responsibilities<T> {
        let n = self.n();
        let mut pi = Matrix::zeros(n, g);
        match init {
            InitMethod::Kmeans => {
                let feats = self.kmeans_features();
                let dim = feats.len() / n;
                let labels = kmeans_labels(&feats, dim, g, 100, rng);
                for (i, &l) in labels.iter().enumerate() {
                    // One-hot labels blended with seeded noise so the first
                    // gate update is not perfectly separated.
                    let noise: Vec<f64> = (0..g).map(|_| rng.random::<f64>()).collect();
                    let s: f64 = noise.iter().sum();
                    for k in 0..g {
                        let hot = if k == l { 1.0 } else { 0.0 };
                        pi[(i, k)] = T::lit(0.9 * hot + 0.1 * noise[k] / s);
                    }
                }
            }
            InitMethod::RandomResponsibility => {
                for i in 0..n {
                    let e: Vec<f64> = (0..g)
                        .map(|_| -(1.0 - rng.random::<f64>()).ln())
                        .collect();
                    let s: f64 = e.iter().sum();
                    for k in 0..g {
                        pi[(i, k)] = T::lit(e[k] / s);
                    }
                }
            }
        }
        Responsibilities { pi }
    }

    /// Standardized covariates concatenated with column-mean-completed responses.
    fn kmeans_features(&self) -> Vec<f64> {
        let n = self.n();
        let x = self.data.x();
        let y = self.data.y();
        let means = self.data.observed_column_means();
        let mut cols: Vec<Vec<f64>> = Vec::new();
        for j in 0..x.cols() {
            cols.push((0..n).map(|i| x[(i, j)].as_f64()).collect());
        }
        for j in 0..y.cols() {
            cols.push(
                (0..n)
                    .map(|i| {
                        if self.data.is_observed(i, j) {
                            y[(i, j)].as_f64()
                        } else {
                            means[j].as_f64()
                        }
                    })
                    .collect(),
            );
        }
        for c in &mut cols {
            let m = c.iter().sum::<f64>() / n as f64;
            let sd = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt();
            let sd = if sd > 0.0 { sd } else { 1.0 };
            for v in c.iter_mut() {
                *v = (*v - m) / sd;
            }
        }
        let dim = cols.len();
        let mut out = vec![0.0; n * dim];
        for (j, c) in cols.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                out[i * dim + j] = *v;
            }
        }
        out
    }

    /// Runs EM from `params` until the relative log-likelihood change drops
    /// below `tol` or `max_iter` M-steps have been taken.
    pub fn run(&self, mut params: CgmmParams<T>, max_iter: usize, tol: f64, gate_opts: &GateOptions) -> Result<EmRun<T>> {
        let tol = T::lit(tol);
        let mut warnings = FitWarnings::default();
        let mut trace = Vec::new();
        let mut converged = false;
        let mut n_iter = 0;
        let mut e = self.e_step(&params)?;
        trace.push(e.loglik);
        while n_iter < max_iter {
            let (next, w) = self.m_step(&e.resp, &params, gate_opts)?;
            warnings.merge(&w);
            n_iter += 1;
            let e_next = self.e_step(&next)?;
            let prev = *trace.last().unwrap();
            trace.push(e_next.loglik);
            params = next;
            e = e_next;
            if ((e.loglik - prev).abs() / (e.loglik.abs() + T::one())) < tol {
                converged = true;
                break;
            }
        }
        Ok(EmRun {
            params,
            trace,
            converged,
            n_iter,
            warnings,
        })
    }
}

/// Output of a single EM run.
#[derive(Clone, Debug)]
pub struct EmRun<T> {
    pub params: CgmmParams<T>,
    pub trace: Vec<T>,
    pub converged: bool,
    pub n_iter: usize,
    pub warnings: FitWarnings,
}

/// Weighted multinomial-logit fit of the gate: solves
/// `Σ_i (π_ig − π_g(x_i; α)) (1, x_i')' = 0` for `g = 2..G` with `α_1 = 0`.
pub fn m_step_gate<T: Real>(
    gate_design: &Matrix<T>,
    resp: &Responsibilities<T>,
    alpha_init: &Matrix<T>,
    opts: &GateOptions,
) -> GateFit<T> {
    let n = gate_design.rows();
    let k = gate_design.cols();
    let g = resp.n_components();
    let mut alpha = alpha_init.clone();
    if g <= 1 {
        return GateFit {
            alpha: Matrix::zeros(g.max(1), k),
            capped: false,
            converged: true,
            iterations: 0,
        };
    }
    alpha.row_mut(0).iter_mut().for_each(|v| *v = T::zero());
    let dim = (g - 1) * k;
    let cap = T::lit(opts.cap);
    let tol = T::lit(opts.grad_tol) * T::from_usize_lossy(n);
    let pi = &resp.pi;

    let mut capped = false;
    let mut converged = false;
    let mut iterations = 0;
    let mut probs = Matrix::zeros(n, g);
    let mut q = gate_objective(gate_design, pi, &alpha, &mut probs);
    let mut cand_probs = Matrix::zeros(n, g);

    for _ in 0..opts.max_iter {
        let mut grad = vec![T::zero(); dim];
        for i in 0..n {
            let z = gate_design.row(i);
            for a in 1..g {
                let r = pi[(i, a)] - probs[(i, a)];
                let base = (a - 1) * k;
                for (c, &zc) in z.iter().enumerate() {
                    grad[base + c] += r * zc;
                }
            }
        }
        let gmax = grad.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if gmax <= tol {
            converged = true;
            break;
        }
        // Negative Hessian: per component pair, a weighted sum of the
        // upper triangle of z z'.
        let tri = k * (k + 1) / 2;
        let gm = g - 1;
        let mut acc = vec![T::zero(); gm * (gm + 1) / 2 * tri];
        let mut zz = vec![T::zero(); tri];
        for i in 0..n {
            let z = gate_design.row(i);
            let mut m = 0;
            for c in 0..k {
                for d in c..k {
                    zz[m] = z[c] * z[d];
                    m += 1;
                }
            }
            let pr = probs.row(i);
            let mut slot = 0;
            for a in 1..g {
                for b in a..g {
                    let w = if a == b {
                        pr[a] * (T::one() - pr[a])
                    } else {
                        -pr[a] * pr[b]
                    };
                    for (s, &v) in acc[slot..slot + tri].iter_mut().zip(&zz) {
                        *s += w * v;
                    }
                    slot += tri;
                }
            }
        }
        let mut hess = Matrix::zeros(dim, dim);
        let mut slot = 0;
        for a in 0..gm {
            for b in a..gm {
                let mut m = 0;
                for c in 0..k {
                    for d in c..k {
                        let v = acc[slot + m];
                        hess[(a * k + c, b * k + d)] = v;
                        hess[(a * k + d, b * k + c)] = v;
                        hess[(b * k + c, a * k + d)] = v;
                        hess[(b * k + d, a * k + c)] = v;
                        m += 1;
                    }
                }
                slot += tri;
            }
        }
        let Some((step, _)) = solve_spd_ridged(&hess, &grad, T::lit(1e-10)) else {
            break;
        };
        // Tiny predicted gain: the objective cannot resolve a line search,
        // so take the full step and stop.
        let decrement = dot(&grad, &step);
        if decrement <= T::lit(NEWTON_DECREMENT_REL) * (q.abs() + T::one()) {
            for a in 1..g {
                for c in 0..k {
                    let lim = cap.max(alpha[(a, c)].abs());
                    let v = alpha[(a, c)] + step[(a - 1) * k + c];
                    capped |= v.abs() > lim;
                    alpha[(a, c)] = v.max(-lim).min(lim);
                }
            }
            converged = true;
            break;
        }
        iterations += 1;
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let mut cand = alpha.clone();
            let mut hit_cap = false;
            for a in 1..g {
                for c in 0..k {
                    let cur = alpha[(a, c)];
                    let lim = cap.max(cur.abs());
                    let mut v = cur + t * step[(a - 1) * k + c];
                    if v.abs() > lim {
                        v = lim * v.signum();
                        hit_cap = true;
                    }
                    cand[(a, c)] = v;
                }
            }
            let q_new = gate_objective(gate_design, pi, &cand, &mut cand_probs);
            if q_new >= q {
                alpha = cand;
                std::mem::swap(&mut probs, &mut cand_probs);
                let gain = q_new - q;
                q = q_new;
                capped |= hit_cap;
                accepted = true;
                if hit_cap && gain <= T::epsilon() * (q.abs() + T::one()) {
                    accepted = false;
                }
                break;
            }
            t = t * T::lit(0.5);
        }
        if !accepted {
            break;
        }
    }
    GateFit {
        alpha,
        capped,
        converged,
        iterations,
    }
}

/// `Σ_i Σ_g π_ig log π_g(x_i; α)`; fills `probs` with the gate probabilities.
fn gate_objective<T: Real>(z: &Matrix<T>, pi: &Matrix<T>, alpha: &Matrix<T>, probs: &mut Matrix<T>) -> T {
    let g = alpha.rows();
    let mut q = T::zero();
    for i in 0..z.rows() {
        let zi = z.row(i);
        let row = probs.row_mut(i);
        for (a, v) in row.iter_mut().enumerate() {
            *v = dot(alpha.row(a), zi);
        }
        log_softmax_in_place(row);
        for a in 0..g {
            let w = pi[(i, a)];
            if w > T::zero() {
                q += w * row[a];
            }
            row[a] = row[a].exp();
        }
    }
    q
}

/// Number of free parameters: gate rows `2..G`, expert coefficients, and
/// the symmetric residual covariances.
pub fn free_parameters(g: usize, spec: &DesignSpec, p: usize) -> usize {
    (g - 1) * spec.gate_dim() + g * (spec.mean_dim() * p + p * (p + 1) / 2)
}

/// `−2 log L + d log n`.
pub fn bic_value<T: Real>(loglik: T, d: usize, n: usize) -> T {
    T::lit(-2.0) * loglik + T::from_usize_lossy(d) * T::from_usize_lossy(n).ln()
}

/// BIC of a fitted report for a sample of `n` rows.
pub fn bic<T: Real>(report: &FitReport<T>, n: usize) -> T {
    bic_value(report.loglik(), report.free_parameters(), n)
}

/// Puts components in canonical order: descending first slope coefficient of
/// the first response (the intercept when the mean has no slopes), ties by
/// the intercept. The gate is rebased so the new first row is zero.
pub fn canonical_order<T: Real>(params: &mut CgmmParams<T>, spec: &DesignSpec) {
    let g = params.n_components();
    let lead = if spec.mean_intercept && spec.mean_dim() > 1 { 1 } else { 0 };
    let key = |b: &Matrix<T>| {
        let primary = b[(lead, 0)].as_f64();
        let secondary = if spec.mean_intercept { b[(0, 0)].as_f64() } else { 0.0 };
        (primary, secondary)
    };
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (key(&params.coef[a]), key(&params.coef[b]));
        kb.0.partial_cmp(&ka.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(kb.1.partial_cmp(&ka.1).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.cmp(&b))
    });
    params.permute(&order);
}

pub fn e_step<T: Real>(data: &Dataset<T>, spec: &DesignSpec, params: &CgmmParams<T>) -> Result<Responsibilities<T>> {
    params.validate(spec, data.p())?;
    Ok(EmContext::new(data, spec)?.e_step(params)?.resp)
}

pub fn observed_loglik<T: Real>(data: &Dataset<T>, spec: &DesignSpec, params: &CgmmParams<T>) -> Result<T> {
    params.validate(spec, data.p())?;
    EmContext::new(data, spec)?.observed_loglik(params)
}

pub fn m_step_experts<T: Real>(
    data: &Dataset<T>,
    spec: &DesignSpec,
    resp: &Responsibilities<T>,
    current: &CgmmParams<T>,
) -> Result<ExpertFit<T>> {
    EmContext::new(data, spec)?.m_step_experts(resp, current)
}

/// Fits a `cfg.n_components`-component model by EM from `cfg.n_starts`
/// initializations and keeps the highest-likelihood run.
pub fn fit_em<T: Real>(data: &Dataset<T>, spec: &DesignSpec, cfg: &FitConfig) -> Result<FitReport<T>> {
    fit_em_with(data, spec, cfg, &GateOptions::default())
}

pub fn fit_em_with<T: Real>(
    data: &Dataset<T>,
    spec: &DesignSpec,
    cfg: &FitConfig,
    gate_opts: &GateOptions,
) -> Result<FitReport<T>> {
    cfg.validate()?;
    let ctx = EmContext::new(data, spec)?;
    let g = cfg.n_components;
    let mut best: Option<(usize, EmRun<T>)> = None;
    let mut collapsed = 0usize;
    let mut extra = FitWarnings::default();

    for start in 0..cfg.n_starts {
        for attempt in 0..MAX_ATTEMPTS_PER_START {
            let mut rng = derived_rng(cfg.seed, &[g as u64, start as u64, attempt as u64]);
            let resp = ctx.initial_responsibilities(g, cfg.init, &mut rng);
            let run = ctx
                .params_from_responsibilities(&resp, gate_opts)
                .and_then(|(p0, w)| {
                    extra.merge(&w);
                    ctx.run(p0, cfg.max_iter, cfg.tol, gate_opts)
                });
            match run {
                Ok(run) => {
                    let better = match &best {
                        None => true,
                        Some((_, b)) => run.trace.last() > b.trace.last(),
                    };
                    if better {
                        best = Some((start, run));
                    }
                    break;
                }
                Err(e) => {
                    log::debug!("start {start} attempt {attempt} failed: {e}");
                    collapsed += 1;
                }
            }
        }
    }

    let (best_start, run) = best.ok_or(CgmmError::AllStartsDegenerate)?;
    let mut warnings = run.warnings.clone();
    warnings.gate_capped |= extra.gate_capped;
    warnings.collapsed_starts = collapsed;
    Ok(finish_report(&ctx, run, best_start, warnings))
}

fn finish_report<T: Real>(ctx: &EmContext<'_, T>, run: EmRun<T>, best_start: usize, warnings: FitWarnings) -> FitReport<T> {
    let mut params = run.params;
    canonical_order(&mut params, &ctx.design.spec);
    let p = ctx.p();
    let n = ctx.n();
    let loglik = *run.trace.last().expect("trace");
    let d = free_parameters(params.n_components(), &ctx.design.spec, p);
    FitReport {
        params,
        design: ctx.design.spec.clone(),
        loglik_trace: run.trace,
        converged: run.converged,
        bic: bic_value(loglik, d, n),
        n_iter: run.n_iter,
        n_obs: n,
        p,
        best_start,
        warnings,
    }
}

/// EM warm-started from `params` (no restarts).
pub fn refine<T: Real>(
    data: &Dataset<T>,
    spec: &DesignSpec,
    params: &CgmmParams<T>,
    max_iter: usize,
    tol: f64,
) -> Result<FitReport<T>> {
    params.validate(spec, data.p())?;
    let ctx = EmContext::new(data, spec)?;
    let run = ctx.run(params.clone(), max_iter, tol, &GateOptions::default())?;
    let warnings = run.warnings.clone();
    Ok(finish_report(&ctx, run, 0, warnings))
}

/// One fitted candidate in a selection over `G`.
#[derive(Clone, Debug)]
pub struct CandidateFit<T> {
    pub g: usize,
    pub result: std::result::Result<FitReport<T>, String>,
}

#[derive(Clone, Debug)]
pub struct Selection<T> {
    pub best_g: usize,
    pub fits: Vec<CandidateFit<T>>,
}

impl<T: Real> Selection<T> {
    pub fn best(&self) -> &FitReport<T> {
        self.fits
            .iter()
            .find(|f| f.g == self.best_g)
            .and_then(|f| f.result.as_ref().ok())
            .expect("best candidate is present")
    }

    pub fn into_best(self) -> FitReport<T> {
        let g = self.best_g;
        self.fits
            .into_iter()
            .find(|f| f.g == g)
            .and_then(|f| f.result.ok())
            .expect("best candidate is present")
    }
}

/// Fits every `G` in `g_range` and returns the BIC minimizer (ties to the smaller `G`).
pub fn select_g<T: Real>(data: &Dataset<T>, spec: &DesignSpec, cfg: &FitConfig, g_range: &[usize]) -> Result<Selection<T>> {
    if g_range.is_empty() {
        return Err(CgmmError::InvalidConfig("empty G range".into()));
    }
    let mut fits = Vec::with_capacity(g_range.len());
    for &g in g_range {
        let result = fit_em(data, spec, &cfg.with_components(g)).map_err(|e| e.to_string());
        fits.push(CandidateFit { g, result });
    }
    let best_g = fits
        .iter()
        .filter_map(|f| f.result.as_ref().ok().map(|r| (f.g, r.bic)))
        .min_by(|a, b| {
            a.1.partial_cmp(&b.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        })
        .map(|(g, _)| g)
        .ok_or(CgmmError::AllStartsDegenerate)?;
    Ok(Selection { best_g, fits })
}

/// Draws uniform responsibilities for tests and diagnostics.
pub fn random_responsibilities<T: Real>(n: usize, g: usize, rng: &mut Rng) -> Responsibilities<T> {
    let mut pi = Matrix::zeros(n, g);
    for i in 0..n {
        let e: Vec<f64> = (0..g).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let s: f64 = e.iter().sum();
        for k in 0..g {
            pi[(i, k)] = T::lit(e[k] / s);
        }
    }
    Responsibilities { pi }
}
