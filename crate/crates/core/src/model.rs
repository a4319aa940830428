//! Domain types and the closed-form Gaussian / multinomial-logit algebra
//! used by fitting and imputation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CgmmError, Result};
use crate::linalg::{dot, symmetric_eigen, Cholesky, Matrix};
use crate::scalar::Real;

/// Covariates `x` (always observed), study variables `y`, and the response mask.
///
/// Unobserved `y` cells are stored as NaN and never read by the model code.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    x: Matrix<T>,
    y: Matrix<T>,
    observed: Vec<bool>,
}

impl<T: Real> Dataset<T> {
    /// `observed` is row-major `n × p`; `true` means the cell was observed.
    pub fn new(x: Matrix<T>, mut y: Matrix<T>, observed: Vec<bool>) -> Result<Self> {
        let (n, q, p) = (x.rows(), x.cols(), y.cols());
        if n == 0 || q == 0 || p == 0 {
            return Err(CgmmError::InvalidData(format!(
                "need n, q, p >= 1 (got n={n}, q={q}, p={p})"
            )));
        }
        if y.rows() != n {
            return Err(CgmmError::DimensionMismatch(format!(
                "x has {n} rows but y has {}",
                y.rows()
            )));
        }
        if observed.len() != n * p {
            return Err(CgmmError::DimensionMismatch(format!(
                "mask has {} cells, expected {}",
                observed.len(),
                n * p
            )));
        }
        for i in 0..n {
            if x.row(i).iter().any(|v| !v.is_finite()) {
                return Err(CgmmError::NonFiniteCovariate { row: i });
            }
            for j in 0..p {
                if observed[i * p + j] {
                    if !y[(i, j)].is_finite() {
                        return Err(CgmmError::InvalidData(format!(
                            "observed y at row {i}, column {j} is not finite"
                        )));
                    }
                } else {
                    y[(i, j)] = T::nan();
                }
            }
        }
        Ok(Self { x, y, observed })
    }

    /// Dataset with every response observed.
    pub fn complete(x: Matrix<T>, y: Matrix<T>) -> Result<Self> {
        let cells = y.rows() * y.cols();
        Self::new(x, y, vec![true; cells])
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn q(&self) -> usize {
        self.x.cols()
    }

    pub fn p(&self) -> usize {
        self.y.cols()
    }

    pub fn x(&self) -> &Matrix<T> {
        &self.x
    }

    pub fn y(&self) -> &Matrix<T> {
        &self.y
    }

    pub fn mask(&self) -> &[bool] {
        &self.observed
    }

    #[inline]
    pub fn is_observed(&self, i: usize, j: usize) -> bool {
        self.observed[i * self.p() + j]
    }

    pub fn row_mask(&self, i: usize) -> &[bool] {
        let p = self.p();
        &self.observed[i * p..(i + 1) * p]
    }

    pub fn observed_indices(&self, i: usize) -> Vec<usize> {
        (0..self.p()).filter(|&j| self.is_observed(i, j)).collect()
    }

    pub fn row_has_missing(&self, i: usize) -> bool {
        self.row_mask(i).iter().any(|o| !o)
    }

    pub fn row_fully_missing(&self, i: usize) -> bool {
        self.row_mask(i).iter().all(|o| !o)
    }

    pub fn n_missing(&self) -> usize {
        self.observed.iter().filter(|o| !**o).count()
    }

    pub fn missing_rate(&self) -> f64 {
        self.n_missing() as f64 / self.observed.len() as f64
    }

    /// Rows grouped by their response pattern, in first-appearance order of
    /// the pattern key.
    pub fn patterns(&self) -> Vec<Pattern> {
        let p = self.p();
        let mut groups: BTreeMap<Vec<bool>, Vec<usize>> = BTreeMap::new();
        for i in 0..self.n() {
            groups.entry(self.row_mask(i).to_vec()).or_default().push(i);
        }
        groups
            .into_iter()
            .map(|(mask, rows)| Pattern {
                obs: (0..p).filter(|&j| mask[j]).collect(),
                mis: (0..p).filter(|&j| !mask[j]).collect(),
                rows,
            })
            .collect()
    }

    /// New dataset made of the given rows (in that order).
    pub fn subset(&self, rows: &[usize]) -> Self {
        let p = self.p();
        let mut observed = Vec::with_capacity(rows.len() * p);
        for &i in rows {
            observed.extend_from_slice(self.row_mask(i));
        }
        Self {
            x: self.x.select_rows(rows),
            y: self.y.select_rows(rows),
            observed,
        }
    }

    /// Largest diagonal entry of the empirical covariance of observed `y`,
    /// computed column-wise over available cases.
    pub fn max_observed_variance(&self) -> T {
        let mut best = T::zero();
        for j in 0..self.p() {
            let vals: Vec<T> = (0..self.n())
                .filter(|&i| self.is_observed(i, j))
                .map(|i| self.y[(i, j)])
                .collect();
            if vals.len() < 2 {
                continue;
            }
            let m = T::from_usize_lossy(vals.len());
            let mean = vals.iter().copied().sum::<T>() / m;
            let var = vals.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            best = best.max(var);
        }
        best
    }

    /// Column means of `y` over observed cells (0 for an empty column).
    pub fn observed_column_means(&self) -> Vec<T> {
        (0..self.p())
            .map(|j| {
                let mut s = T::zero();
                let mut c = 0usize;
                for i in 0..self.n() {
                    if self.is_observed(i, j) {
                        s += self.y[(i, j)];
                        c += 1;
                    }
                }
                if c == 0 {
                    T::zero()
                } else {
                    s / T::from_usize_lossy(c)
                }
            })
            .collect()
    }
}

/// Rows sharing one response pattern.
#[derive(Clone, Debug)]
pub struct Pattern {
    pub obs: Vec<usize>,
    pub mis: Vec<usize>,
    pub rows: Vec<usize>,
}

/// Which covariate columns enter the gate and the expert means.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignSpec {
    pub gate_covariates: Vec<usize>,
    pub mean_covariates: Vec<usize>,
    pub gate_intercept: bool,
    pub mean_intercept: bool,
}

impl DesignSpec {
    /// All `q` covariates in both the gate and the means, with intercepts.
    pub fn full(q: usize) -> Self {
        Self {
            gate_covariates: (0..q).collect(),
            mean_covariates: (0..q).collect(),
            gate_intercept: true,
            mean_intercept: true,
        }
    }

    /// Intercept-only gate and means: the joint Gaussian mixture when the
    /// response vector holds every variable.
    pub fn intercept_only() -> Self {
        Self {
            gate_covariates: Vec::new(),
            mean_covariates: Vec::new(),
            gate_intercept: true,
            mean_intercept: true,
        }
    }

    pub fn gate_dim(&self) -> usize {
        self.gate_covariates.len() + usize::from(self.gate_intercept)
    }

    pub fn mean_dim(&self) -> usize {
        self.mean_covariates.len() + usize::from(self.mean_intercept)
    }

    pub fn validate(&self, q: usize) -> Result<()> {
        for (name, idx, icpt) in [
            ("gate", &self.gate_covariates, self.gate_intercept),
            ("mean", &self.mean_covariates, self.mean_intercept),
        ] {
            if let Some(&bad) = idx.iter().find(|&&c| c >= q) {
                return Err(CgmmError::InvalidConfig(format!(
                    "{name} covariate index {bad} out of range (q={q})"
                )));
            }
            if idx.is_empty() && !icpt {
                return Err(CgmmError::InvalidConfig(format!(
                    "{name} design is empty: no covariates and no intercept"
                )));
            }
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != idx.len() {
                return Err(CgmmError::InvalidConfig(format!(
                    "{name} covariate indices contain duplicates"
                )));
            }
        }
        Ok(())
    }

    /// Augmented gate covariate vector for one covariate row.
    pub fn gate_row<T: Real>(&self, x: &[T]) -> Vec<T> {
        augmented(x, &self.gate_covariates, self.gate_intercept)
    }

    /// Augmented mean covariate vector for one covariate row.
    pub fn mean_row<T: Real>(&self, x: &[T]) -> Vec<T> {
        augmented(x, &self.mean_covariates, self.mean_intercept)
    }
}

fn augmented<T: Real>(x: &[T], cols: &[usize], intercept: bool) -> Vec<T> {
    let mut v = Vec::with_capacity(cols.len() + usize::from(intercept));
    if intercept {
        v.push(T::one());
    }
    v.extend(cols.iter().map(|&c| x[c]));
    v
}

/// Gate and mean design matrices built once per dataset.
#[derive(Clone, Debug)]
pub struct Design<T> {
    pub spec: DesignSpec,
    pub gate: Matrix<T>,
    pub mean: Matrix<T>,
}

impl<T: Real> Design<T> {
    pub fn new(data: &Dataset<T>, spec: &DesignSpec) -> Result<Self> {
        spec.validate(data.q())?;
        let n = data.n();
        let mut gate = Matrix::zeros(n, spec.gate_dim());
        let mut mean = Matrix::zeros(n, spec.mean_dim());
        for i in 0..n {
            gate.row_mut(i).copy_from_slice(&spec.gate_row(data.x().row(i)));
            mean.row_mut(i).copy_from_slice(&spec.mean_row(data.x().row(i)));
        }
        Ok(Self {
            spec: spec.clone(),
            gate,
            mean,
        })
    }
}

/// Gate coefficients (row 1 fixed at zero), expert regression coefficients,
/// and expert residual covariances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Real + Serialize",
    deserialize = "T: Real + Deserialize<'de>"
))]
pub struct CgmmParams<T> {
    /// `G × gate_dim`; the first row is identically zero.
    pub alpha: Matrix<T>,
    /// One `mean_dim × p` matrix per component.
    pub coef: Vec<Matrix<T>>,
    /// One `p × p` covariance per component.
    pub cov: Vec<Matrix<T>>,
}

impl<T: Real> CgmmParams<T> {
    pub fn n_components(&self) -> usize {
        self.coef.len()
    }

    pub fn p(&self) -> usize {
        self.cov.first().map_or(0, Matrix::rows)
    }

    pub fn validate(&self, design: &DesignSpec, p: usize) -> Result<()> {
        let g = self.n_components();
        if g == 0 || self.cov.len() != g || self.alpha.rows() != g {
            return Err(CgmmError::DimensionMismatch(
                "component counts disagree across alpha, coef and cov".into(),
            ));
        }
        if self.alpha.cols() != design.gate_dim() {
            return Err(CgmmError::DimensionMismatch(format!(
                "alpha has {} columns, design expects {}",
                self.alpha.cols(),
                design.gate_dim()
            )));
        }
        if self.alpha.row(0).iter().any(|v| *v != T::zero()) {
            return Err(CgmmError::InvalidConfig(
                "first gate row must be zero".into(),
            ));
        }
        for (b, s) in self.coef.iter().zip(&self.cov) {
            if b.rows() != design.mean_dim() || b.cols() != p {
                return Err(CgmmError::DimensionMismatch(format!(
                    "coefficient matrix is {}x{}, expected {}x{p}",
                    b.rows(),
                    b.cols(),
                    design.mean_dim()
                )));
            }
            if s.rows() != p || s.cols() != p {
                return Err(CgmmError::DimensionMismatch(
                    "covariance has wrong shape".into(),
                ));
            }
        }
        Ok(())
    }

    /// Subtracts the first gate row from every row, restoring the
    /// identifiability constraint without changing the gate probabilities.
    pub fn rebase_gate(&mut self) {
        let base = self.alpha.row(0).to_vec();
        for g in 0..self.alpha.rows() {
            for (a, &b) in self.alpha.row_mut(g).iter_mut().zip(&base) {
                *a -= b;
            }
        }
    }

    /// Reorders components and rebases the gate.
    pub fn permute(&mut self, order: &[usize]) {
        let alpha = self.alpha.select_rows(order);
        let coef = order.iter().map(|&g| self.coef[g].clone()).collect();
        let cov = order.iter().map(|&g| self.cov[g].clone()).collect();
        self.alpha = alpha;
        self.coef = coef;
        self.cov = cov;
        self.rebase_gate();
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.is_finite()
            && self.coef.iter().all(Matrix::is_finite)
            && self.cov.iter().all(Matrix::is_finite)
    }

    pub fn cast<U: Real>(&self) -> CgmmParams<U> {
        CgmmParams {
            alpha: self.alpha.cast(),
            coef: self.coef.iter().map(Matrix::cast).collect(),
            cov: self.cov.iter().map(Matrix::cast).collect(),
        }
    }
}

/// Posterior component-membership weights, `n × G`.
#[derive(Clone, Debug)]
pub struct Responsibilities<T> {
    pub pi: Matrix<T>,
}

impl<T: Real> Responsibilities<T> {
    pub fn n_components(&self) -> usize {
        self.pi.cols()
    }

    /// Column sums: effective component sizes.
    pub fn mass(&self) -> Vec<T> {
        (0..self.pi.cols())
            .map(|g| (0..self.pi.rows()).map(|i| self.pi[(i, g)]).sum())
            .collect()
    }
}

/// A Gaussian with a partition of its coordinates into observed and missing.
#[derive(Clone, Debug)]
pub struct GaussianBlock<T> {
    pub mean: Vec<T>,
    pub cov: Matrix<T>,
    pub obs_idx: Vec<usize>,
    pub mis_idx: Vec<usize>,
}

impl<T: Real> GaussianBlock<T> {
    pub fn new(mean: Vec<T>, cov: Matrix<T>, obs_idx: Vec<usize>, mis_idx: Vec<usize>) -> Result<Self> {
        let p = mean.len();
        if cov.rows() != p || cov.cols() != p {
            return Err(CgmmError::DimensionMismatch(
                "covariance does not match mean".into(),
            ));
        }
        let mut seen = vec![false; p];
        for &j in obs_idx.iter().chain(&mis_idx) {
            if j >= p || seen[j] {
                return Err(CgmmError::InvalidData(
                    "observed/missing indices are not a partition".into(),
                ));
            }
            seen[j] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(CgmmError::InvalidData(
                "observed/missing indices do not cover every coordinate".into(),
            ));
        }
        Ok(Self {
            mean,
            cov,
            obs_idx,
            mis_idx,
        })
    }
}

/// Multinomial-logit gate probabilities `π_g(x; α)`, computed with max subtraction.
pub fn gate_probs<T: Real>(x_row: &[T], alpha: &Matrix<T>) -> Result<Vec<T>> {
    let mut lp = log_gate_probs(x_row, alpha)?;
    for v in &mut lp {
        *v = v.exp();
    }
    Ok(lp)
}

/// Log gate probabilities.
pub fn log_gate_probs<T: Real>(x_row: &[T], alpha: &Matrix<T>) -> Result<Vec<T>> {
    if x_row.len() != alpha.cols() {
        return Err(CgmmError::DimensionMismatch(format!(
            "gate row has {} entries, alpha has {} columns",
            x_row.len(),
            alpha.cols()
        )));
    }
    if x_row.iter().any(|v| !v.is_finite()) {
        return Err(CgmmError::InvalidData("non-finite covariate".into()));
    }
    let mut eta: Vec<T> = (0..alpha.rows()).map(|g| dot(alpha.row(g), x_row)).collect();
    log_softmax_in_place(&mut eta);
    Ok(eta)
}

/// In-place log-softmax.
pub fn log_softmax_in_place<T: Real>(eta: &mut [T]) {
    let lse = crate::scalar::log_sum_exp(eta);
    for v in eta.iter_mut() {
        *v -= lse;
    }
}

/// Cholesky factor of `cov`; when factorization fails, `floor` is added to
/// the diagonal and grown until it succeeds.
pub fn factor_floored<T: Real>(cov: &Matrix<T>, floor: T) -> Result<Cholesky<T>> {
    if let Some(ch) = Cholesky::new(cov) {
        return Ok(ch);
    }
    if !cov.is_finite() {
        return Err(CgmmError::DegenerateCovariance);
    }
    let mut f = if floor > T::zero() { floor } else { T::min_positive_value().sqrt() };
    for _ in 0..40 {
        let mut m = cov.clone();
        m.add_diag(f);
        if let Some(ch) = Cholesky::new(&m) {
            return Ok(ch);
        }
        f = f * T::lit(10.0);
    }
    Err(CgmmError::DegenerateCovariance)
}

/// Raises every eigenvalue of `cov` below `floor` to `floor`. For a weighted
/// scatter matrix this is the Gaussian maximum-likelihood covariance under
/// the constraint. Returns true when the matrix was modified.
pub fn apply_cov_floor<T: Real>(cov: &mut Matrix<T>, floor: T) -> bool {
    cov.symmetrize();
    let mut shifted = cov.clone();
    shifted.add_diag(-floor);
    if Cholesky::new(&shifted).is_some() || !cov.is_finite() {
        return false;
    }
    let (vals, vecs) = symmetric_eigen(cov);
    if vals.iter().all(|&v| v >= floor) {
        return false;
    }
    let p = cov.rows();
    let clipped: Vec<T> = vals.iter().map(|&v| v.max(floor)).collect();
    for i in 0..p {
        for j in 0..=i {
            let mut s = T::zero();
            for k in 0..p {
                s += vecs[(i, k)] * clipped[k] * vecs[(j, k)];
            }
            cov[(i, j)] = s;
            cov[(j, i)] = s;
        }
    }
    true
}

/// `ln(2π)`.
pub fn ln_2pi<T: Real>() -> T {
    T::lit((2.0 * std::f64::consts::PI).ln())
}

/// Multivariate normal log-density. An empty vector has log-density 0.
pub fn gaussian_logpdf<T: Real>(y: &[T], mean: &[T], cov: &Matrix<T>) -> Result<T> {
    if y.len() != mean.len() || cov.rows() != y.len() || cov.cols() != y.len() {
        return Err(CgmmError::DimensionMismatch(
            "gaussian_logpdf arguments disagree".into(),
        ));
    }
    if y.is_empty() {
        return Ok(T::zero());
    }
    let ch = Cholesky::new(cov).ok_or(CgmmError::DegenerateCovariance)?;
    Ok(gaussian_logpdf_factored(y, mean, &ch))
}

/// Log-density given a precomputed factor of the covariance.
pub fn gaussian_logpdf_factored<T: Real>(y: &[T], mean: &[T], ch: &Cholesky<T>) -> T {
    let r = y.len();
    if r == 0 {
        return T::zero();
    }
    let resid: Vec<T> = y.iter().zip(mean).map(|(&a, &b)| a - b).collect();
    let half = T::lit(0.5);
    -half * (T::from_usize_lossy(r) * ln_2pi::<T>() + ch.log_det() + ch.quad_form(&resid))
}

/// Mean and covariance of the missing coordinates given the observed ones.
pub fn conditional_gaussian<T: Real>(block: &GaussianBlock<T>, y_obs: &[T]) -> Result<(Vec<T>, Matrix<T>)> {
    if y_obs.len() != block.obs_idx.len() {
        return Err(CgmmError::DimensionMismatch(
            "observed values do not match the observed index set".into(),
        ));
    }
    let mis = &block.mis_idx;
    let obs = &block.obs_idx;
    let mu_m: Vec<T> = mis.iter().map(|&j| block.mean[j]).collect();
    let s_mm = block.cov.select(mis, mis);
    if obs.is_empty() {
        return Ok((mu_m, s_mm));
    }
    let s_oo = block.cov.select(obs, obs);
    let ch = Cholesky::new(&s_oo).ok_or(CgmmError::DegenerateObservedBlock)?;
    Ok(conditional_from_factor(block, y_obs, &ch))
}

/// Conditional moments using a precomputed factor of `Σ_oo`.
pub fn conditional_from_factor<T: Real>(
    block: &GaussianBlock<T>,
    y_obs: &[T],
    s_oo: &Cholesky<T>,
) -> (Vec<T>, Matrix<T>) {
    let mis = &block.mis_idx;
    let obs = &block.obs_idx;
    let resid: Vec<T> = obs
        .iter()
        .zip(y_obs)
        .map(|(&j, &v)| v - block.mean[j])
        .collect();
    let w = s_oo.solve_vec(&resid);
    let s_mo = block.cov.select(mis, obs);
    let mut mean: Vec<T> = mis.iter().map(|&j| block.mean[j]).collect();
    for (a, m) in mean.iter_mut().enumerate() {
        *m += dot(s_mo.row(a), &w);
    }
    let mut cov = block.cov.select(mis, mis);
    // Σ_mm - Σ_mo Σ_oo^{-1} Σ_om
    let k = s_oo.solve_mat(&s_mo.transpose());
    let corr = s_mo.matmul(&k);
    for a in 0..mis.len() {
        for b in 0..mis.len() {
            cov[(a, b)] -= corr[(a, b)];
        }
    }
    cov.symmetrize();
    (mean, cov)
}

/// Expert mean `(1, x') B_g` for an augmented mean-covariate row.
pub fn component_mean<T: Real>(mean_row: &[T], coef: &Matrix<T>) -> Result<Vec<T>> {
    if mean_row.len() != coef.rows() {
        return Err(CgmmError::DimensionMismatch(format!(
            "mean row has {} entries, coefficients have {} rows",
            mean_row.len(),
            coef.rows()
        )));
    }
    Ok(coef.vecmat(mean_row))
}
