//! Simulation models, the joint Gaussian mixture baseline, imputation
//! metrics, the Monte Carlo driver and a conditional KL diagnostic.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::em::{fit_em, select_g, FitConfig, FitReport, Selection};
use crate::error::{CgmmError, Result};
use crate::imputation::{estimate_mean, impute, jackknife_cgmm, JackknifeConfig};
use crate::linalg::{Cholesky, Matrix};
use crate::model::{gaussian_logpdf, log_gate_probs, CgmmParams, Dataset, DesignSpec};
use crate::penalized::{fit_penalized_cv, PenaltyConfig};
use crate::rng::{derived_rng, Rng};
use crate::scalar::{log_sum_exp, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SimModel {
    M1,
    M2,
    M3,
    M4,
    M5,
    M6,
    /// Synthetic survey/administrative income data with a ratio-type model.
    M7,
}

impl FromStr for SimModel {
    type Err = CgmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M1" | "1" => Ok(Self::M1),
            "M2" | "2" => Ok(Self::M2),
            "M3" | "3" => Ok(Self::M3),
            "M4" | "4" => Ok(Self::M4),
            "M5" | "5" => Ok(Self::M5),
            "M6" | "6" => Ok(Self::M6),
            "M7" | "7" | "M7SYNTHETIC" => Ok(Self::M7),
            _ => Err(CgmmError::InvalidConfig(format!("unknown model '{s}' (expected M1..M7)"))),
        }
    }
}

impl std::fmt::Display for SimModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

const HIGH_DIM_Q: usize = 15;

impl SimModel {
    pub fn q(&self) -> usize {
        match self {
            Self::M5 | Self::M6 => HIGH_DIM_Q,
            Self::M7 => 3,
            _ => 2,
        }
    }

    /// Design used when fitting the conditional model to this model's data.
    pub fn design(&self) -> DesignSpec {
        match self {
            Self::M7 => DesignSpec {
                gate_covariates: vec![0, 1, 2],
                mean_covariates: vec![2],
                gate_intercept: true,
                mean_intercept: false,
            },
            _ => DesignSpec::full(self.q()),
        }
    }

    pub fn default_methods(&self) -> Vec<Method> {
        match self {
            Self::M5 | Self::M6 => vec![Method::Full, Method::Gmm, Method::PenalizedCgmm],
            _ => vec![Method::Full, Method::Gmm, Method::Cgmm],
        }
    }

    fn id(&self) -> u64 {
        *self as u64 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimModelSpec {
    pub model: SimModel,
    pub n: usize,
    #[serde(rename = "N")]
    pub population: usize,
    pub seed: u64,
}

impl SimModelSpec {
    pub fn new(model: SimModel, seed: u64) -> Self {
        Self {
            model,
            n: 1000,
            population: 20_000,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n > self.population {
            return Err(CgmmError::InvalidConfig(format!(
                "need 1 <= n <= N (n={}, N={})",
                self.n, self.population
            )));
        }
        Ok(())
    }
}

fn std_normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn categorical(rng: &mut Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

fn mvn_draw(rng: &mut Rng, mean: &[f64], chol: &Cholesky<f64>) -> Vec<f64> {
    let z: Vec<f64> = (0..mean.len()).map(|_| std_normal(rng)).collect();
    let l = chol.lower();
    (0..mean.len())
        .map(|i| mean[i] + (0..=i).map(|k| l[(i, k)] * z[k]).sum::<f64>())
        .collect()
}

fn toeplitz(d: usize, rho: f64) -> Matrix<f64> {
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            m[(i, j)] = rho.powi((i as i32 - j as i32).abs());
        }
    }
    m
}

fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Noise {
    Normal,
    /// Gamma(1, 1), i.e. standard exponential.
    Gamma,
}

impl Noise {
    fn draw(&self, rng: &mut Rng) -> f64 {
        match self {
            Noise::Normal => std_normal(rng),
            Noise::Gamma => Exp1.sample(rng),
        }
    }

    fn log_pdf(&self, e: f64) -> f64 {
        match self {
            Noise::Normal => -0.5 * (e * e + (2.0 * std::f64::consts::PI).ln()),
            Noise::Gamma => {
                if e > 0.0 {
                    -e
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

const M1_WEIGHTS: [f64; 3] = [0.4, 0.3, 0.3];
const M1_MEANS: [[f64; 3]; 3] = [[0.0, -2.0, 1.0], [2.0, 0.0, 3.0], [-2.0, 2.0, -3.0]];
const X_WEIGHTS: [f64; 4] = [0.2, 0.3, 0.2, 0.3];
const M2_MEANS: [[f64; 2]; 4] = [[-1.0, 0.5], [1.0, 1.0], [0.5, -1.0], [0.0, 0.0]];
const M2_U: [f64; 3] = [1.0, 1.0, 0.5];
const M2_BETA: [[f64; 3]; 2] = [[1.0, 2.0, -2.0], [-1.0, 0.5, -0.5]];
const HIGH_DIM_MEANS: [f64; 4] = [1.0, 2.0, -1.0, -2.0];
const THRESHOLD_LEVEL: f64 = 0.6;

fn high_dim_coefs() -> (Vec<f64>, [Vec<f64>; 2]) {
    let q = HIGH_DIM_Q;
    let mut alpha = vec![1.0, 1.0, 0.0, 1.0, 0.0, 1.0];
    alpha.resize(q + 1, 0.0);
    let mut b1 = vec![-1.0, 0.0, 2.5, 0.0, 3.0];
    let mut b2 = vec![1.0, 0.0, -2.5, 0.0, -1.0];
    b1.resize(q + 1, 0.0);
    b2.resize(q + 1, 0.0);
    (alpha, [b1, b2])
}

/// Affine maps from generated to reported variables (`v ↦ (v − m) / s`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub x_mean: Vec<f64>,
    pub x_sd: Vec<f64>,
    pub y_mean: f64,
    pub y_sd: f64,
}

/// The data-generating law of one simulated population, enough to draw
/// fresh rows and to evaluate the true conditional density of `y` given `x`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub model: SimModel,
    /// Threshold on the latent index for the switching models.
    pub threshold: Option<f64>,
    pub standardization: Option<Standardization>,
}

struct RawRows {
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
}

impl SimTruth {
    fn draw_raw(&self, m: usize, rng: &mut Rng) -> (RawRows, Option<f64>) {
        match self.model {
            SimModel::M1 => {
                let chol = Cholesky::new(&toeplitz(3, -0.2)).expect("spd");
                let mut x = Vec::with_capacity(m);
                let mut y = Vec::with_capacity(m);
                for _ in 0..m {
                    let g = categorical(rng, &M1_WEIGHTS);
                    let v = mvn_draw(rng, &M1_MEANS[g], &chol);
                    x.push(vec![v[0], v[1]]);
                    y.push(v[2]);
                }
                (RawRows { x, y }, None)
            }
            SimModel::M2 | SimModel::M3 | SimModel::M4 => {
                let lognormal = self.model != SimModel::M2;
                let noise = if self.model == SimModel::M4 { Noise::Gamma } else { Noise::Normal };
                let cov = if lognormal {
                    Matrix::from_diag(&[0.5, 0.5])
                } else {
                    Matrix::from_rows(&[[1.0, 0.1], [0.1, 1.0]])
                };
                let chol = Cholesky::new(&cov).expect("spd");
                let mut x = Vec::with_capacity(m);
                let mut u = Vec::with_capacity(m);
                let mut e = Vec::with_capacity(m);
                for _ in 0..m {
                    let g = categorical(rng, &X_WEIGHTS);
                    let mut v = mvn_draw(rng, &M2_MEANS[g], &chol);
                    if lognormal {
                        v.iter_mut().for_each(|w| *w = w.exp());
                    }
                    u.push(M2_U[0] + M2_U[1] * v[0] + M2_U[2] * v[1] + std_normal(rng));
                    e.push(noise.draw(rng));
                    x.push(v);
                }
                let c = self.threshold.unwrap_or_else(|| quantile_of(&u, THRESHOLD_LEVEL));
                let y = (0..m)
                    .map(|i| {
                        let b = &M2_BETA[usize::from(u[i] >= c)];
                        b[0] + b[1] * x[i][0] + b[2] * x[i][1] + e[i]
                    })
                    .collect();
                (RawRows { x, y }, Some(c))
            }
            SimModel::M5 | SimModel::M6 => {
                let q = HIGH_DIM_Q;
                let noise = if self.model == SimModel::M6 { Noise::Gamma } else { Noise::Normal };
                let chol = Cholesky::new(&toeplitz(q, 0.5)).expect("spd");
                let (alpha, betas) = high_dim_coefs();
                let mut x = Vec::with_capacity(m);
                let mut u = Vec::with_capacity(m);
                let mut e = Vec::with_capacity(m);
                for _ in 0..m {
                    let g = categorical(rng, &X_WEIGHTS);
                    let v = mvn_draw(rng, &vec![HIGH_DIM_MEANS[g]; q], &chol);
                    u.push(linear(&alpha, &v) + std_normal(rng));
                    e.push(noise.draw(rng));
                    x.push(v);
                }
                let c = self.threshold.unwrap_or_else(|| quantile_of(&u, THRESHOLD_LEVEL));
                let y = (0..m)
                    .map(|i| linear(&betas[usize::from(u[i] >= c)], &x[i]) + e[i])
                    .collect();
                (RawRows { x, y }, Some(c))
            }
            SimModel::M7 => (draw_income(m, rng), None),
        }
    }

    /// Draws `m` rows `(x, y)` on the reported scale.
    pub fn sample(&self, m: usize, rng: &mut Rng) -> (Matrix<f64>, Vec<f64>) {
        let (raw, _) = self.draw_raw(m, rng);
        self.finish(raw)
    }

    fn finish(&self, raw: RawRows) -> (Matrix<f64>, Vec<f64>) {
        let q = self.model.q();
        let mut x = Matrix::zeros(raw.x.len(), q);
        let mut y = raw.y;
        for (i, r) in raw.x.iter().enumerate() {
            x.row_mut(i).copy_from_slice(r);
        }
        if let Some(s) = &self.standardization {
            for i in 0..x.rows() {
                for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                    *v = (*v - s.x_mean[j]) / s.x_sd[j];
                }
            }
            y.iter_mut().for_each(|v| *v = (*v - s.y_mean) / s.y_sd);
        }
        (x, y)
    }

    /// True `log f(y | x)` on the reported scale, when available in closed form.
    pub fn log_density(&self, x: &[f64], y: f64) -> Option<f64> {
        match self.model {
            SimModel::M1 => Some(m1_conditional(x, y)),
            SimModel::M2 | SimModel::M3 | SimModel::M4 => {
                let c = self.threshold?;
                let noise = if self.model == SimModel::M4 { Noise::Gamma } else { Noise::Normal };
                let p1 = norm_cdf(c - (M2_U[0] + M2_U[1] * x[0] + M2_U[2] * x[1]));
                let lin = |b: &[f64; 3]| b[0] + b[1] * x[0] + b[2] * x[1];
                Some(switching_log_density(p1, noise, y - lin(&M2_BETA[0]), y - lin(&M2_BETA[1])))
            }
            SimModel::M5 | SimModel::M6 => {
                let c = self.threshold?;
                let s = self.standardization.as_ref()?;
                let noise = if self.model == SimModel::M6 { Noise::Gamma } else { Noise::Normal };
                let raw: Vec<f64> = x
                    .iter()
                    .enumerate()
                    .map(|(j, v)| s.x_mean[j] + s.x_sd[j] * v)
                    .collect();
                let y_raw = s.y_mean + s.y_sd * y;
                let (alpha, betas) = high_dim_coefs();
                let p1 = norm_cdf(c - linear(&alpha, &raw));
                let ld = switching_log_density(
                    p1,
                    noise,
                    y_raw - linear(&betas[0], &raw),
                    y_raw - linear(&betas[1], &raw),
                );
                Some(ld + s.y_sd.ln())
            }
            SimModel::M7 => None,
        }
    }
}

fn linear(coef: &[f64], x: &[f64]) -> f64 {
    coef[0] + coef[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
}

fn switching_log_density(p1: f64, noise: Noise, e1: f64, e2: f64) -> f64 {
    let a = if p1 > 0.0 { p1.ln() + noise.log_pdf(e1) } else { f64::NEG_INFINITY };
    let b = if p1 < 1.0 { (1.0 - p1).ln() + noise.log_pdf(e2) } else { f64::NEG_INFINITY };
    log_sum_exp(&[a, b])
}

fn m1_conditional(x: &[f64], y: f64) -> f64 {
    let cov = toeplitz(3, -0.2);
    let sxx = cov.select(&[0, 1], &[0, 1]);
    let ch = Cholesky::new(&sxx).expect("spd");
    let syx = [cov[(2, 0)], cov[(2, 1)]];
    let k = ch.solve_vec(&syx);
    let cvar = cov[(2, 2)] - k[0] * syx[0] - k[1] * syx[1];
    let mut terms = Vec::with_capacity(3);
    let mut marg = Vec::with_capacity(3);
    for (w, mu) in M1_WEIGHTS.iter().zip(&M1_MEANS) {
        let lx = gaussian_logpdf(x, &mu[..2], &sxx).expect("dims");
        let m = mu[2] + k[0] * (x[0] - mu[0]) + k[1] * (x[1] - mu[1]);
        let ly = -0.5 * ((y - m).powi(2) / cvar + (2.0 * std::f64::consts::PI * cvar).ln());
        marg.push(w.ln() + lx);
        terms.push(w.ln() + lx + ly);
    }
    log_sum_exp(&terms) - log_sum_exp(&marg)
}

/// Income-like data: covariates (age in decades, education level, survey
/// income) and an administrative income that equals the survey value for
/// part of the population and is a noisy multiple of it otherwise.
fn draw_income(m: usize, rng: &mut Rng) -> RawRows {
    const RATIO: [f64; 4] = [1.0, 1.03, 1.44, 0.96];
    const SD: [f64; 4] = [0.0, 0.6, 7.7, 2.5];
    const GATE: [[f64; 4]; 4] = [
        [0.0, 0.0, 0.0, 0.0],
        [0.9, -0.1, -0.08, 1.0],
        [-1.3, 0.4, -0.1, 1.5],
        [0.5, -0.2, -0.05, 0.8],
    ];
    let mut x = Vec::with_capacity(m);
    let mut y = Vec::with_capacity(m);
    for _ in 0..m {
        let age = 2.5 + 4.0 * rng.random::<f64>();
        let edu = (categorical(rng, &[0.2, 0.3, 0.35, 0.15]) + 1) as f64;
        let survey = (24f64.ln() + 0.1 * (edu - 2.5) + 0.6 * std_normal(rng)).exp();
        let s = (survey / 24.0).ln();
        let eta: Vec<f64> = GATE.iter().map(|a| a[0] + a[1] * age + a[2] * edu + a[3] * s).collect();
        let lse = log_sum_exp(&eta);
        let probs: Vec<f64> = eta.iter().map(|e| (e - lse).exp()).collect();
        let g = categorical(rng, &probs);
        y.push(RATIO[g] * survey + SD[g] * std_normal(rng));
        x.push(vec![age, edu, survey]);
    }
    RawRows { x, y }
}

/// Type-1 sample quantile: the `ceil(level·m)`-th smallest value.
fn quantile_of(v: &[f64], level: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let k = ((level * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[k - 1]
}

/// One simulated incomplete sample with everything needed to score it.
#[derive(Clone, Debug)]
pub struct SimDraw {
    pub model: SimModel,
    /// Sample with nonresponse applied.
    pub sample: Dataset<f64>,
    /// Complete sample responses.
    pub y_full: Vec<f64>,
    /// Finite-population mean of `y`.
    pub pop_mean: f64,
    pub truth: SimTruth,
}

impl SimDraw {
    pub fn full_sample(&self) -> Result<Dataset<f64>> {
        Dataset::complete(self.sample.x().clone(), Matrix::column_vector(&self.y_full))
    }

    pub fn y_full_matrix(&self) -> Matrix<f64> {
        Matrix::column_vector(&self.y_full)
    }
}

/// Response probability of one sampled row.
fn response_probability(model: SimModel, x: &[f64]) -> f64 {
    let eta = match model {
        SimModel::M7 => 1.9 - 0.1 * (x[0] - 4.5),
        _ => -0.5 + 0.5 * x[0],
    };
    1.0 / (1.0 + (-eta).exp())
}

/// Generates replicate `rep`: a finite population, a simple random sample
/// from it, and Bernoulli response indicators.
pub fn generate(spec: &SimModelSpec, rep: u64) -> Result<SimDraw> {
    spec.validate()?;
    let model = spec.model;
    let mut rng = derived_rng(spec.seed, &[model.id(), rep, 1]);
    let mut truth = SimTruth {
        model,
        threshold: None,
        standardization: None,
    };
    let (raw, c) = truth.draw_raw(spec.population, &mut rng);
    truth.threshold = c;
    if matches!(model, SimModel::M5 | SimModel::M6) {
        truth.standardization = Some(standardization_of(&raw));
    }
    let (x_pop, y_pop) = truth.finish(raw);
    let pop_mean = y_pop.iter().sum::<f64>() / y_pop.len() as f64;

    let mut idx = sample_indices(&mut rng, spec.population, spec.n).into_vec();
    idx.sort_unstable();
    let x = x_pop.select_rows(&idx);
    let y_full: Vec<f64> = idx.iter().map(|&i| y_pop[i]).collect();
    let mask: Vec<bool> = (0..spec.n)
        .map(|i| rng.random::<f64>() < response_probability(model, x.row(i)))
        .collect();
    let sample = Dataset::new(x, Matrix::column_vector(&y_full), mask)?;
    Ok(SimDraw {
        model,
        sample,
        y_full,
        pop_mean,
        truth,
    })
}

fn standardization_of(raw: &RawRows) -> Standardization {
    let m = raw.y.len() as f64;
    let mean_sd = |v: &mut dyn Iterator<Item = f64>| {
        let vals: Vec<f64> = v.collect();
        let mu = vals.iter().sum::<f64>() / m;
        let sd = (vals.iter().map(|a| (a - mu).powi(2)).sum::<f64>() / m).sqrt();
        (mu, if sd > 0.0 { sd } else { 1.0 })
    };
    let q = raw.x[0].len();
    let (x_mean, x_sd): (Vec<f64>, Vec<f64>) = (0..q).map(|j| mean_sd(&mut raw.x.iter().map(|r| r[j]))).unzip();
    let (y_mean, y_sd) = mean_sd(&mut raw.y.iter().copied());
    Standardization { x_mean, x_sd, y_mean, y_sd }
}

/// Joint Gaussian mixture over `(x, y)`, fitted by the same EM on the
/// stacked vector with an intercept-only design.
#[derive(Clone, Debug)]
pub struct GmmFit<T> {
    pub report: FitReport<T>,
    pub q: usize,
    pub p: usize,
}

/// Stacks `[x | y]` as the response of an intercept-only model; `x` is always observed.
pub fn joint_dataset<T: Real>(data: &Dataset<T>) -> Result<Dataset<T>> {
    let (n, q, p) = (data.n(), data.q(), data.p());
    let mut y = Matrix::zeros(n, q + p);
    let mut mask = Vec::with_capacity(n * (q + p));
    for i in 0..n {
        let row = y.row_mut(i);
        row[..q].copy_from_slice(data.x().row(i));
        for j in 0..p {
            row[q + j] = if data.is_observed(i, j) { data.y()[(i, j)] } else { T::zero() };
        }
        mask.extend(std::iter::repeat_n(true, q));
        mask.extend_from_slice(data.row_mask(i));
    }
    Dataset::new(data.x().clone(), y, mask)
}

pub fn fit_gmm_baseline<T: Real>(data: &Dataset<T>, cfg: &FitConfig) -> Result<GmmFit<T>> {
    let joint = joint_dataset(data)?;
    Ok(GmmFit {
        report: fit_em(&joint, &DesignSpec::intercept_only(), cfg)?,
        q: data.q(),
        p: data.p(),
    })
}

/// BIC selection of the joint mixture over `g_range`.
pub fn select_gmm<T: Real>(data: &Dataset<T>, cfg: &FitConfig, g_range: &[usize]) -> Result<(GmmFit<T>, Selection<T>)> {
    let joint = joint_dataset(data)?;
    let sel = select_g(&joint, &DesignSpec::intercept_only(), cfg, g_range)?;
    let fit = GmmFit {
        report: sel.best().clone(),
        q: data.q(),
        p: data.p(),
    };
    Ok((fit, sel))
}

impl<T: Real> GmmFit<T> {
    /// Conditional-mean imputation of the missing `y` entries given `x` and
    /// the observed part of `y`. Returns the completed `n × p` response matrix.
    pub fn impute(&self, data: &Dataset<T>) -> Result<Matrix<T>> {
        let joint = joint_dataset(data)?;
        let r = impute(&joint, &DesignSpec::intercept_only(), &self.report.params)?;
        let cols: Vec<usize> = (self.q..self.q + self.p).collect();
        let rows: Vec<usize> = (0..data.n()).collect();
        Ok(r.y_imputed.select(&rows, &cols))
    }

    pub fn n_components(&self) -> usize {
        self.report.n_components()
    }
}

/// RMSPE and MAE over the cells that are not observed.
pub fn compute_metrics<T: Real>(truth: &Matrix<T>, imputed: &Matrix<T>, observed: &[bool]) -> Result<(f64, f64)> {
    if truth.rows() != imputed.rows() || truth.cols() != imputed.cols() || observed.len() != truth.as_slice().len() {
        return Err(CgmmError::DimensionMismatch("metric inputs differ in shape".into()));
    }
    let mut m = 0usize;
    let (mut se, mut ae) = (0.0, 0.0);
    for ((t, v), &o) in truth.as_slice().iter().zip(imputed.as_slice()).zip(observed) {
        if !o {
            let e = (*v - *t).as_f64();
            se += e * e;
            ae += e.abs();
            m += 1;
        }
    }
    if m == 0 {
        return Err(CgmmError::MetricsUndefined);
    }
    Ok(((se / m as f64).sqrt(), ae / m as f64))
}

/// Bias, variance (divisor `R`) and MSE of estimation errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub bias: f64,
    pub var: f64,
    pub mse: f64,
}

pub fn error_summary(errors: &[f64]) -> ErrorSummary {
    let r = errors.len() as f64;
    let bias = errors.iter().sum::<f64>() / r;
    let var = errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / r;
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / r;
    ErrorSummary { bias, var, mse }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Complete-sample mean, before nonresponse.
    Full,
    Gmm,
    Cgmm,
    PenalizedCgmm,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Full => "Full",
            Method::Gmm => "GMM",
            Method::Cgmm => "CGMM",
            Method::PenalizedCgmm => "CGMM-lasso",
        }
    }

    fn id(&self) -> u64 {
        *self as u64 + 11
    }
}

impl FromStr for Method {
    type Err = CgmmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(Method::Full),
            "gmm" => Ok(Method::Gmm),
            "cgmm" => Ok(Method::Cgmm),
            "cgmm-lasso" | "penalized" | "penalized-cgmm" => Ok(Method::PenalizedCgmm),
            _ => Err(CgmmError::InvalidConfig(format!("unknown method '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub model: SimModel,
    pub reps: usize,
    pub seed: u64,
    pub n: usize,
    #[serde(rename = "N")]
    pub population: usize,
    pub g_max: usize,
    pub methods: Vec<Method>,
    pub fit: FitConfig,
    pub penalty: PenaltyConfig,
    /// Also compute jackknife intervals for the conditional-model estimator.
    pub coverage: bool,
    pub jackknife: JackknifeConfig,
    /// Abort when more than this fraction of replicates fails for a method.
    pub max_failure_rate: f64,
}

impl MonteCarloConfig {
    pub fn new(model: SimModel, reps: usize, seed: u64) -> Self {
        Self {
            model,
            reps,
            seed,
            n: 1000,
            population: 20_000,
            g_max: 6,
            methods: model.default_methods(),
            fit: FitConfig::default(),
            penalty: PenaltyConfig::default(),
            coverage: false,
            jackknife: JackknifeConfig::default(),
            max_failure_rate: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(CgmmError::InvalidConfig("reps must be at least 2".into()));
        }
        if self.g_max == 0 {
            return Err(CgmmError::InvalidConfig("g_max must be at least 1".into()));
        }
        if self.methods.is_empty() {
            return Err(CgmmError::InvalidConfig("no methods".into()));
        }
        if self.methods.contains(&Method::PenalizedCgmm) && self.model == SimModel::M7 {
            return Err(CgmmError::InvalidConfig("the lasso method needs a full design".into()));
        }
        self.fit.validate()?;
        self.penalty.validate()?;
        SimModelSpec {
            model: self.model,
            n: self.n,
            population: self.population,
            seed: self.seed,
        }
        .validate()
    }

    fn g_range(&self) -> Vec<usize> {
        (1..=self.g_max).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub estimate: f64,
    pub rmspe: Option<f64>,
    pub mae: Option<f64>,
    pub g: Option<usize>,
    pub lambda: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub rep: usize,
    pub pop_mean: f64,
    pub missing_rate: f64,
    /// Per method: the outcome or the failure message.
    pub outcomes: BTreeMap<Method, std::result::Result<MethodOutcome, String>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: Method,
    pub n_ok: usize,
    pub failures: usize,
    pub rmspe: Option<f64>,
    pub mae: Option<f64>,
    pub bias: f64,
    pub var: f64,
    pub mse: f64,
    pub coverage_hits: usize,
    pub coverage_total: usize,
    pub mean_g: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub config: MonteCarloConfig,
    pub mean_missing_rate: f64,
    pub summaries: Vec<MetricReport>,
    pub replicates: Vec<ReplicateRecord>,
}

impl MonteCarloReport {
    pub fn summary(&self, method: Method) -> Option<&MetricReport> {
        self.summaries.iter().find(|s| s.method == method)
    }

    /// Fraction of replicates in which `a` has strictly smaller RMSPE than `b`,
    /// among replicates where both succeeded.
    pub fn win_rate(&self, a: Method, b: Method) -> Option<f64> {
        let mut wins = 0usize;
        let mut total = 0usize;
        for r in &self.replicates {
            if let (Some(Ok(oa)), Some(Ok(ob))) = (r.outcomes.get(&a), r.outcomes.get(&b)) {
                if let (Some(ra), Some(rb)) = (oa.rmspe, ob.rmspe) {
                    total += 1;
                    wins += usize::from(ra < rb);
                }
            }
        }
        (total > 0).then(|| wins as f64 / total as f64)
    }

    /// Method × metric table: RMSPE and MAE to 4 decimals, bias/var/MSE ×100 to 3.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let c = &self.config;
        let _ = writeln!(
            s,
            "model {}  reps {}  n {}  N {}  seed {}  missing rate {:.4}",
            c.model, c.reps, c.n, c.population, c.seed, self.mean_missing_rate
        );
        let _ = writeln!(
            s,
            "{:<11} {:>8} {:>8} {:>10} {:>10} {:>10} {:>6} {:>6}",
            "method", "RMSPE", "MAE", "bias*100", "var*100", "MSE*100", "G", "fail"
        );
        let opt4 = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        for m in &self.summaries {
            let _ = writeln!(
                s,
                "{:<11} {:>8} {:>8} {:>10.3} {:>10.3} {:>10.3} {:>6} {:>6}",
                m.method.label(),
                opt4(m.rmspe),
                opt4(m.mae),
                100.0 * m.bias,
                100.0 * m.var,
                100.0 * m.mse,
                m.mean_g.map_or("-".to_string(), |g| format!("{g:.2}")),
                m.failures
            );
        }
        let _ = writeln!(s, "{:<11} {:>8} {:>8}", "PMM", "n/a", "n/a");
        for m in &self.summaries {
            if m.coverage_total > 0 {
                let _ = writeln!(
                    s,
                    "coverage {} {:.1}% ({}/{})",
                    m.method.label(),
                    100.0 * m.coverage_hits as f64 / m.coverage_total as f64,
                    m.coverage_hits,
                    m.coverage_total
                );
            }
        }
        s
    }
}

fn run_method(cfg: &MonteCarloConfig, draw: &SimDraw, method: Method, rep: usize) -> Result<MethodOutcome> {
    let data = &draw.sample;
    let fit_cfg = FitConfig {
        seed: crate::rng::derive_seed(cfg.seed, &[cfg.model.id(), rep as u64, method.id()]),
        ..cfg.fit.clone()
    };
    let truth = draw.y_full_matrix();
    match method {
        Method::Full => Ok(MethodOutcome {
            estimate: draw.y_full.iter().sum::<f64>() / draw.y_full.len() as f64,
            rmspe: None,
            mae: None,
            g: None,
            lambda: None,
            ci: None,
        }),
        Method::Gmm => {
            let (fit, _) = select_gmm(data, &fit_cfg, &cfg.g_range())?;
            let y = fit.impute(data)?;
            let (rmspe, mae) = compute_metrics(&truth, &y, data.mask())?;
            Ok(MethodOutcome {
                estimate: y.column(0).iter().sum::<f64>() / y.rows() as f64,
                rmspe: Some(rmspe),
                mae: Some(mae),
                g: Some(fit.n_components()),
                lambda: None,
                ci: None,
            })
        }
        Method::Cgmm => {
            let spec = cfg.model.design();
            let best = select_g(data, &spec, &fit_cfg, &cfg.g_range())?.into_best();
            let r = impute(data, &spec, &best.params)?;
            let (rmspe, mae) = compute_metrics(&truth, &r.y_imputed, data.mask())?;
            let ci = if cfg.coverage {
                let jk_cfg = JackknifeConfig {
                    seed: fit_cfg.seed,
                    ..cfg.jackknife.clone()
                };
                let jk = jackknife_cgmm(data, &spec, &best.params, |r| Ok(estimate_mean(r)), &jk_cfg)?;
                Some((jk.ci_lower[0], jk.ci_upper[0]))
            } else {
                None
            };
            Ok(MethodOutcome {
                estimate: estimate_mean(&r)[0],
                rmspe: Some(rmspe),
                mae: Some(mae),
                g: Some(best.n_components()),
                lambda: None,
                ci,
            })
        }
        Method::PenalizedCgmm => {
            let spec = cfg.model.design();
            let g = select_g(data, &spec, &fit_cfg, &cfg.g_range())?.best_g;
            let (fit, cv) = fit_penalized_cv(data, &fit_cfg.with_components(g), &cfg.penalty)?;
            let r = impute(data, &spec, &fit.params.to_cgmm())?;
            let (rmspe, mae) = compute_metrics(&truth, &r.y_imputed, data.mask())?;
            Ok(MethodOutcome {
                estimate: estimate_mean(&r)[0],
                rmspe: Some(rmspe),
                mae: Some(mae),
                g: Some(g),
                lambda: Some(cv.best_lambda),
                ci: None,
            })
        }
    }
}

/// Runs one replicate: generate, fit and score each method.
pub fn run_replicate(cfg: &MonteCarloConfig, rep: usize) -> Result<ReplicateRecord> {
    let spec = SimModelSpec {
        model: cfg.model,
        n: cfg.n,
        population: cfg.population,
        seed: cfg.seed,
    };
    let draw = generate(&spec, rep as u64)?;
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    let mut outcomes = BTreeMap::new();
    for m in methods {
        let out = run_method(cfg, &draw, m, rep).map_err(|e| e.to_string());
        if let Err(e) = &out {
            log::warn!("replicate {rep} method {} failed: {e}", m.label());
        }
        outcomes.insert(m, out);
    }
    Ok(ReplicateRecord {
        rep,
        pop_mean: draw.pop_mean,
        missing_rate: draw.sample.missing_rate(),
        outcomes,
    })
}

/// Monte Carlo study over `cfg.reps` replicates, in parallel with
/// results reduced in replicate order.
pub fn monte_carlo(cfg: &MonteCarloConfig) -> Result<MonteCarloReport> {
    cfg.validate()?;
    let replicates: Vec<ReplicateRecord> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_replicate(cfg, rep))
        .collect::<Result<_>>()?;
    summarize(cfg, replicates)
}

/// Aggregates replicate records into per-method summaries.
pub fn summarize(cfg: &MonteCarloConfig, replicates: Vec<ReplicateRecord>) -> Result<MonteCarloReport> {
    let mut methods = cfg.methods.clone();
    methods.sort();
    methods.dedup();
    let mut summaries = Vec::with_capacity(methods.len());
    for m in methods {
        let ok: Vec<(&ReplicateRecord, &MethodOutcome)> = replicates
            .iter()
            .filter_map(|r| match r.outcomes.get(&m) {
                Some(Ok(o)) => Some((r, o)),
                _ => None,
            })
            .collect();
        let failures = replicates.len() - ok.len();
        if failures as f64 > cfg.max_failure_rate * replicates.len() as f64 || ok.is_empty() {
            return Err(CgmmError::TooManyFailures {
                failed: failures,
                total: replicates.len(),
            });
        }
        let errors: Vec<f64> = ok.iter().map(|(r, o)| o.estimate - r.pop_mean).collect();
        let es = error_summary(&errors);
        let avg = |f: &dyn Fn(&MethodOutcome) -> Option<f64>| {
            let v: Vec<f64> = ok.iter().filter_map(|(_, o)| f(o)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        let mut hits = 0;
        let mut total = 0;
        for (r, o) in &ok {
            if let Some((lo, hi)) = o.ci {
                total += 1;
                hits += usize::from(lo <= r.pop_mean && r.pop_mean <= hi);
            }
        }
        summaries.push(MetricReport {
            method: m,
            n_ok: ok.len(),
            failures,
            rmspe: avg(&|o| o.rmspe),
            mae: avg(&|o| o.mae),
            bias: es.bias,
            var: es.var,
            mse: es.mse,
            coverage_hits: hits,
            coverage_total: total,
            mean_g: avg(&|o| o.g.map(|g| g as f64)),
        });
    }
    let mean_missing_rate = replicates.iter().map(|r| r.missing_rate).sum::<f64>() / replicates.len() as f64;
    Ok(MonteCarloReport {
        config: cfg.clone(),
        mean_missing_rate,
        summaries,
        replicates,
    })
}

/// A conditional density of `y` given `x`.
pub trait ConditionalDensity {
    fn log_density(&self, x: &[f64], y: &[f64]) -> f64;
}

impl ConditionalDensity for SimTruth {
    fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        SimTruth::log_density(self, x, y[0]).unwrap_or(f64::NAN)
    }
}

/// Fitted conditional mixture `Σ_g π_g(x) N(y; B_g'z, Σ_g)`.
pub struct CgmmDensity<'a> {
    pub params: &'a CgmmParams<f64>,
    pub spec: &'a DesignSpec,
}

impl ConditionalDensity for CgmmDensity<'_> {
    fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        let Ok(lg) = log_gate_probs(&self.spec.gate_row(x), &self.params.alpha) else {
            return f64::NAN;
        };
        let z = self.spec.mean_row(x);
        let terms: Vec<f64> = (0..self.params.n_components())
            .map(|g| {
                let mean = self.params.coef[g].vecmat(&z);
                lg[g] + gaussian_logpdf(y, &mean, &self.params.cov[g]).unwrap_or(f64::NEG_INFINITY)
            })
            .collect();
        log_sum_exp(&terms)
    }
}

/// Conditional density of `y` given `x` implied by a joint mixture over `(x, y)`.
pub struct GmmDensity<'a> {
    pub params: &'a CgmmParams<f64>,
    pub q: usize,
}

impl ConditionalDensity for GmmDensity<'_> {
    fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        let q = self.q;
        let d = self.params.p();
        let xi: Vec<usize> = (0..q).collect();
        let all: Vec<f64> = x.iter().chain(y).copied().collect();
        let lg = log_gate_probs(&[1.0], &self.params.alpha).unwrap_or_default();
        let mut joint = Vec::new();
        let mut marg = Vec::new();
        for g in 0..self.params.n_components() {
            let mu = self.params.coef[g].row(0);
            let cov = &self.params.cov[g];
            joint.push(lg[g] + gaussian_logpdf(&all, mu, cov).unwrap_or(f64::NEG_INFINITY));
            marg.push(lg[g] + gaussian_logpdf(x, &mu[..q], &cov.select(&xi, &xi)).unwrap_or(f64::NEG_INFINITY));
        }
        debug_assert_eq!(all.len(), d);
        log_sum_exp(&joint) - log_sum_exp(&marg)
    }
}

/// Floor applied to non-finite log-density differences.
pub const KL_LOG_FLOOR: f64 = -745.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub kl: f64,
    pub se: f64,
    /// Draws where the fitted log-density was not finite and was floored.
    pub clipped: usize,
}

/// Monte Carlo `E[log f*(y|x) − log f(y|x)]` over `draws` taken from `f*`.
pub fn kl_estimate(draws: &[(Vec<f64>, Vec<f64>)], truth: &dyn ConditionalDensity, fitted: &dyn ConditionalDensity) -> KlEstimate {
    let mut clipped = 0;
    let d: Vec<f64> = draws
        .iter()
        .map(|(x, y)| {
            let a = truth.log_density(x, y);
            let mut b = fitted.log_density(x, y);
            if !b.is_finite() {
                b = KL_LOG_FLOOR;
                clipped += 1;
            }
            a - b
        })
        .collect();
    let m = d.len() as f64;
    let mean = d.iter().sum::<f64>() / m;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    KlEstimate {
        kl: mean,
        se: (var / m).sqrt(),
        clipped,
    }
}

/// KL estimates of two fitted densities against the truth on shared draws.
pub fn kl_diagnostic(
    truth: &SimTruth,
    a: &dyn ConditionalDensity,
    b: &dyn ConditionalDensity,
    m_draws: usize,
    seed: u64,
) -> (KlEstimate, KlEstimate) {
    let mut rng = derived_rng(seed, &[0x6b1]);
    let (x, y) = truth.sample(m_draws, &mut rng);
    let draws: Vec<(Vec<f64>, Vec<f64>)> = (0..m_draws).map(|i| (x.row(i).to_vec(), vec![y[i]])).collect();
    (kl_estimate(&draws, truth, a), kl_estimate(&draws, truth, b))
}
