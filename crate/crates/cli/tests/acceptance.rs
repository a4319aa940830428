//! Acceptance checks. Each criterion prints one PASS/FAIL line; detail lines
//! are indented. The Monte Carlo criteria run at a reduced replicate count
//! unless `CGMM_ACCEPTANCE_SCALE=desk`; `CGMM_ACCEPTANCE_ONLY=1,6` restricts
//! the run to the listed criteria.

use std::fs;
use std::process::Command;
use std::time::Instant;

use cgmm_core::em::{canonical_order, e_step, free_parameters};
use cgmm_core::io::save_csv;
use cgmm_core::linalg::Matrix;
use cgmm_core::model::{conditional_gaussian, gate_probs, CgmmParams, GaussianBlock};
use cgmm_core::penalized::{fit_penalized_em, soft_threshold};
use cgmm_core::rng::{rng_from, Rng};
use cgmm_core::sim::{
    error_summary, generate, kl_diagnostic, monte_carlo, select_gmm, CgmmDensity, GmmDensity, Method, MonteCarloConfig,
    MonteCarloReport, SimModel, SimModelSpec,
};
use cgmm_core::{fit_em, impute, select_g, Dataset, DesignSpec, FitConfig, PenaltyConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

const SEED: u64 = 20_240_601;
const TABLE_TOL: f64 = 0.06;

struct Scale {
    name: &'static str,
    table_reps: usize,
    full_reps: usize,
    coverage_reps: usize,
    high_dim_reps: usize,
}

impl Scale {
    fn from_env() -> Self {
        match std::env::var("CGMM_ACCEPTANCE_SCALE").as_deref() {
            Ok("desk") => Scale {
                name: "desk",
                table_reps: 200,
                full_reps: 200,
                coverage_reps: 200,
                high_dim_reps: 100,
            },
            _ => Scale {
                name: "reduced",
                table_reps: 20,
                full_reps: 200,
                coverage_reps: 60,
                high_dim_reps: 5,
            },
        }
    }
}

#[derive(Default)]
struct Outcome {
    ok: bool,
    lines: Vec<String>,
}

impl Outcome {
    fn pass() -> Self {
        Self {
            ok: true,
            lines: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, line: String) {
        self.ok &= ok;
        self.lines.push(format!("{} {line}", if ok { "ok  " } else { "FAIL" }));
    }

    fn note(&mut self, line: String) {
        self.lines.push(format!("     {line}"));
    }
}

fn run_mc(model: SimModel, reps: usize, methods: &[Method], coverage: bool) -> MonteCarloReport {
    let mut cfg = MonteCarloConfig::new(model, reps, SEED);
    cfg.methods = methods.to_vec();
    cfg.coverage = coverage;
    let t = Instant::now();
    let report = monte_carlo(&cfg).unwrap_or_else(|e| panic!("{model} Monte Carlo failed: {e}"));
    eprintln!("  [{model} x{reps} {:?} in {:.0}s]", methods, t.elapsed().as_secs_f64());
    report
}

fn rmspe_mae(r: &MonteCarloReport, m: Method) -> (f64, f64) {
    let s = r.summary(m).unwrap();
    (s.rmspe.unwrap_or(f64::NAN), s.mae.unwrap_or(f64::NAN))
}

// Table 1 values: (model, method, RMSPE, MAE).
const TABLE1: [(SimModel, Method, f64, f64); 8] = [
    (SimModel::M1, Method::Gmm, 1.1951, 0.9073),
    (SimModel::M1, Method::Cgmm, 1.2056, 0.9128),
    (SimModel::M2, Method::Gmm, 1.5650, 1.2294),
    (SimModel::M2, Method::Cgmm, 1.4697, 1.1305),
    (SimModel::M3, Method::Gmm, 1.5244, 1.1839),
    (SimModel::M3, Method::Cgmm, 1.4131, 1.0623),
    (SimModel::M4, Method::Gmm, 1.5228, 1.1442),
    (SimModel::M4, Method::Cgmm, 1.4188, 1.0024),
];

fn criterion_1(tables: &[(SimModel, MonteCarloReport)]) -> Outcome {
    let mut out = Outcome::pass();
    for (model, method, rmspe, mae) in TABLE1 {
        let report = &tables.iter().find(|(m, _)| *m == model).unwrap().1;
        let (r, a) = rmspe_mae(report, method);
        out.check(
            (r - rmspe).abs() <= TABLE_TOL,
            format!("{model} {:<5} RMSPE {r:.4} vs {rmspe:.4} (diff {:+.4})", method.label(), r - rmspe),
        );
        out.check(
            (a - mae).abs() <= TABLE_TOL,
            format!("{model} {:<5} MAE   {a:.4} vs {mae:.4} (diff {:+.4})", method.label(), a - mae),
        );
    }
    out
}

fn criterion_2(tables: &[(SimModel, MonteCarloReport)]) -> Outcome {
    let mut out = Outcome::pass();
    for (model, report) in tables.iter().filter(|(m, _)| matches!(m, SimModel::M3 | SimModel::M4)) {
        let (c, _) = rmspe_mae(report, Method::Cgmm);
        let (g, _) = rmspe_mae(report, Method::Gmm);
        out.check(g - c >= 0.05, format!("{model} GMM {g:.4} - CGMM {c:.4} = {:.4} >= 0.05", g - c));
    }
    out
}

fn criterion_3(tables: &[(SimModel, MonteCarloReport)], full_m1: &MonteCarloReport) -> Outcome {
    let mut out = Outcome::pass();
    let m4 = &tables.iter().find(|(m, _)| *m == SimModel::M4).unwrap().1;
    let cb = 100.0 * m4.summary(Method::Cgmm).unwrap().bias;
    let gb = 100.0 * m4.summary(Method::Gmm).unwrap().bias;
    out.check(cb.abs() <= 0.6, format!("M4 CGMM |bias|x100 {:.3} <= 0.6 (0.178)", cb.abs()));
    out.check(gb >= 1.8, format!("M4 GMM bias x100 {gb:.3} >= 1.8 (2.948)"));
    let full = full_m1.summary(Method::Full).unwrap();
    let mse = 100.0 * full.mse;
    out.check(
        (mse - 0.637).abs() <= 0.15,
        format!("M1 Full MSE x100 {mse:.3} = 0.637 +- 0.15 ({} reps)", full.n_ok),
    );
    out
}

fn criterion_4(cov: &MonteCarloReport) -> Outcome {
    let mut out = Outcome::pass();
    let s = cov.summary(Method::Cgmm).unwrap();
    let rate = 100.0 * s.coverage_hits as f64 / s.coverage_total.max(1) as f64;
    out.check(
        (91.5..=98.5).contains(&rate),
        format!("M1 jackknife coverage {rate:.1}% ({}/{}) in [91.5, 98.5]", s.coverage_hits, s.coverage_total),
    );
    out
}

fn criterion_5(high: &[(SimModel, MonteCarloReport)]) -> Outcome {
    let mut out = Outcome::pass();
    for (model, report) in high {
        let bound = if *model == SimModel::M5 { 0.55 } else { 0.80 };
        let (r, _) = rmspe_mae(report, Method::PenalizedCgmm);
        let (g, _) = rmspe_mae(report, Method::Gmm);
        out.check(r <= bound, format!("{model} CGMM-lasso RMSPE {r:.4} <= {bound} (GMM {g:.4})"));
        let win = report.win_rate(Method::PenalizedCgmm, Method::Gmm).unwrap_or(0.0);
        out.check(win >= 0.95, format!("{model} CGMM-lasso below GMM in {:.1}% of replicates", 100.0 * win));
    }
    out
}

// ---------------------------------------------------------------- properties

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random regression mixture with cellwise missingness.
fn random_dataset(rng: &mut Rng, n: usize, q: usize, p: usize, miss: f64) -> Dataset {
    let g = 2;
    let coefs: Vec<Vec<f64>> = (0..g)
        .map(|_| (0..p * (q + 1)).map(|_| 2.0 * normal(rng)).collect())
        .collect();
    let mut x = Matrix::zeros(n, q);
    let mut y = Matrix::zeros(n, p);
    let mut mask = Vec::with_capacity(n * p);
    for i in 0..n {
        for j in 0..q {
            x[(i, j)] = normal(rng);
        }
        let k = usize::from(x[(i, 0)] + 0.5 * normal(rng) > 0.0);
        for j in 0..p {
            let b = &coefs[k][j * (q + 1)..(j + 1) * (q + 1)];
            let mut v = b[0] + 0.7 * normal(rng);
            for a in 0..q {
                v += b[a + 1] * x[(i, a)];
            }
            y[(i, j)] = v;
            mask.push(rng.random::<f64>() >= miss);
        }
    }
    Dataset::new(x, y, mask).unwrap()
}

fn random_params(rng: &mut Rng, g: usize, spec: &DesignSpec, p: usize) -> CgmmParams<f64> {
    let mut alpha = Matrix::zeros(g, spec.gate_dim());
    for k in 1..g {
        for a in 0..spec.gate_dim() {
            alpha[(k, a)] = normal(rng);
        }
    }
    let coef = (0..g)
        .map(|_| Matrix::from_vec(spec.mean_dim(), p, (0..spec.mean_dim() * p).map(|_| normal(rng)).collect()))
        .collect();
    let cov = (0..g).map(|_| random_spd(rng, p)).collect();
    CgmmParams { alpha, coef, cov }
}

fn random_spd(rng: &mut Rng, p: usize) -> Matrix<f64> {
    let a = Matrix::from_vec(p, p, (0..p * p).map(|_| normal(rng)).collect());
    let mut s = a.matmul(&a.transpose());
    s.add_diag(0.5);
    s
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| f64::from(u8::from(i == j))));
            row
        })
        .collect();
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, piv);
        let d = m[c][c];
        for v in &mut m[c] {
            *v /= d;
        }
        for r in 0..n {
            if r != c {
                let f = m[r][c];
                let pivot_row = m[c].clone();
                for (v, pv) in m[r].iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

fn prop_em_monotone(out: &mut Outcome) {
    let mut rng = rng_from(SEED);
    let mut worst = 0.0f64;
    let mut iters = 0;
    for case in 0..50 {
        let q = 1 + case % 2;
        let p = 1 + case % 3;
        let data = random_dataset(&mut rng, 150, q, p, 0.3);
        let cfg = FitConfig {
            n_components: 2 + case % 2,
            n_starts: 1,
            max_iter: 200,
            tol: 1e-12,
            seed: case as u64,
            ..FitConfig::default()
        };
        let report = fit_em(&data, &DesignSpec::full(q), &cfg).unwrap();
        iters += report.loglik_trace.len();
        for w in report.loglik_trace.windows(2) {
            worst = worst.max(w[0] - w[1]);
        }
    }
    out.check(
        worst <= 1e-8,
        format!("EM monotone on 50 datasets ({iters} steps, largest decrease {worst:.2e})"),
    );
}

fn prop_g1_is_regression(out: &mut Outcome) {
    let mut rng = rng_from(SEED + 1);
    let mut worst = 0.0f64;
    for _ in 0..5 {
        let (n, q, p) = (200, 3, 2);
        let data = random_dataset(&mut rng, n, q, p, 0.0);
        let report = fit_em(&data, &DesignSpec::full(q), &FitConfig::default()).unwrap();
        let z: Vec<Vec<f64>> = (0..n)
            .map(|i| std::iter::once(1.0).chain(data.x().row(i).iter().copied()).collect())
            .collect();
        let ztz: Vec<Vec<f64>> = (0..=q)
            .map(|a| (0..=q).map(|b| z.iter().map(|r| r[a] * r[b]).sum()).collect())
            .collect();
        let inv = invert(&ztz);
        let coef: Vec<Vec<f64>> = (0..p)
            .map(|j| {
                let zty: Vec<f64> = (0..=q).map(|a| (0..n).map(|i| z[i][a] * data.y()[(i, j)]).sum()).collect();
                (0..=q).map(|a| (0..=q).map(|c| inv[a][c] * zty[c]).sum()).collect()
            })
            .collect();
        let resid: Vec<Vec<f64>> = (0..p)
            .map(|j| {
                (0..n)
                    .map(|i| data.y()[(i, j)] - (0..=q).map(|a| z[i][a] * coef[j][a]).sum::<f64>())
                    .collect()
            })
            .collect();
        for j in 0..p {
            for a in 0..=q {
                worst = worst.max((coef[j][a] - report.params.coef[0][(a, j)]).abs());
            }
            for k in 0..p {
                let s = resid[j].iter().zip(&resid[k]).map(|(u, v)| u * v).sum::<f64>() / n as f64;
                worst = worst.max((s - report.params.cov[0][(j, k)]).abs());
            }
        }
    }
    out.check(worst <= 1e-6, format!("G=1 fit vs closed-form regression, max diff {worst:.2e}"));
}

fn prop_lambda_zero(out: &mut Outcome) {
    let mut rng = rng_from(SEED + 2);
    let n = 400;
    let mut x = Matrix::zeros(n, 2);
    let mut y = Matrix::zeros(n, 1);
    let mut mask = Vec::new();
    for i in 0..n {
        x[(i, 0)] = normal(&mut rng);
        x[(i, 1)] = normal(&mut rng);
        let hi = rng.random::<f64>() < 1.0 / (1.0 + (-1.5 * x[(i, 0)]).exp());
        y[(i, 0)] = if hi {
            3.0 + x[(i, 0)] - x[(i, 1)] + 0.5 * normal(&mut rng)
        } else {
            -2.0 - x[(i, 0)] + 0.5 * x[(i, 1)] + 0.8 * normal(&mut rng)
        };
        mask.push(rng.random::<f64>() < 0.8);
    }
    let data = Dataset::new(x, y, mask).unwrap();
    let spec = DesignSpec::full(2);
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
    let mut plain = fit_em(&data, &spec, &cfg).unwrap().params;
    let mut lasso = fit_penalized_em(&data, &cfg, &pen, 0.0, None).unwrap().params.to_cgmm();
    canonical_order(&mut plain, &spec);
    canonical_order(&mut lasso, &spec);
    let mut worst = 0.0f64;
    for g in 0..2 {
        for a in 0..3 {
            worst = worst.max((plain.coef[g][(a, 0)] - lasso.coef[g][(a, 0)]).abs());
            worst = worst.max((plain.alpha[(g, a)] - lasso.alpha[(g, a)]).abs());
        }
        worst = worst.max((plain.cov[g][(0, 0)] - lasso.cov[g][(0, 0)]).abs());
    }
    out.check(worst <= 1e-5, format!("penalized fit at lambda=0 vs unpenalized, max diff {worst:.2e}"));
}

fn prop_responsibilities_and_gate(out: &mut Outcome) {
    let mut rng = rng_from(SEED + 3);
    let mut worst_sum = 0.0f64;
    let mut in_range = true;
    let mut worst_shift = 0.0f64;
    for case in 0..20 {
        let (q, p, g) = (1 + case % 3, 1 + case % 2, 2 + case % 4);
        let data = random_dataset(&mut rng, 60, q, p, 0.4);
        let spec = DesignSpec::full(q);
        let params = random_params(&mut rng, g, &spec, p);
        let resp = e_step(&data, &spec, &params).unwrap();
        for i in 0..data.n() {
            let row = resp.pi.row(i);
            in_range &= row.iter().all(|v| (0.0..=1.0).contains(v));
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        let shift: Vec<f64> = (0..spec.gate_dim()).map(|_| 10.0 * normal(&mut rng)).collect();
        let mut shifted = params.alpha.clone();
        for k in 0..g {
            for (v, s) in shifted.row_mut(k).iter_mut().zip(&shift) {
                *v += s;
            }
        }
        for i in 0..data.n() {
            let z = spec.gate_row(data.x().row(i));
            let a = gate_probs(&z, &params.alpha).unwrap();
            let b = gate_probs(&z, &shifted).unwrap();
            for (u, v) in a.iter().zip(&b) {
                worst_shift = worst_shift.max((u - v).abs());
            }
        }
    }
    out.check(
        worst_sum <= 1e-12 && in_range,
        format!("responsibilities in [0,1], rows sum to 1 (max error {worst_sum:.1e})"),
    );
    out.check(worst_shift <= 1e-12, format!("softmax shift invariance (max diff {worst_shift:.1e})"));
}

fn prop_conditional_gaussian(out: &mut Outcome) {
    let mut rng = rng_from(SEED + 4);
    let mut ok = true;
    let mut worst = 0.0f64;
    for case in 0..100 {
        let p = 2 + case % 5;
        let cov = random_spd(&mut rng, p);
        let mean: Vec<f64> = (0..p).map(|_| normal(&mut rng)).collect();
        let mut obs = Vec::new();
        let mut mis = Vec::new();
        for j in 0..p {
            if rng.random::<bool>() {
                obs.push(j)
            } else {
                mis.push(j)
            }
        }
        if obs.is_empty() {
            obs.push(mis.pop().unwrap());
        }
        if mis.is_empty() {
            mis.push(obs.pop().unwrap());
        }
        let y_obs: Vec<f64> = obs.iter().map(|_| 2.0 * normal(&mut rng)).collect();
        let block = GaussianBlock::new(mean.clone(), cov.clone(), obs.clone(), mis.clone()).unwrap();
        let (m, c) = conditional_gaussian(&block, &y_obs).unwrap();
        // precision-matrix route: cov(mis|obs) = (Λ_mm)⁻¹, mean = μ_m − (Λ_mm)⁻¹ Λ_mo (y_o − μ_o)
        let prec = invert(&cov.to_rows());
        let lmm: Vec<Vec<f64>> = mis.iter().map(|&a| mis.iter().map(|&b| prec[a][b]).collect()).collect();
        let lmm_inv = invert(&lmm);
        let d: Vec<f64> = obs.iter().zip(&y_obs).map(|(&o, v)| v - mean[o]).collect();
        let lmo_d: Vec<f64> = mis.iter().map(|&a| obs.iter().zip(&d).map(|(&o, v)| prec[a][o] * v).sum()).collect();
        for (r, &a) in mis.iter().enumerate() {
            let want = mean[a] - (0..mis.len()).map(|s| lmm_inv[r][s] * lmo_d[s]).sum::<f64>();
            ok &= close(m[r], want, 1e-10);
            worst = worst.max((m[r] - want).abs());
            for s in 0..mis.len() {
                ok &= close(c[(r, s)], lmm_inv[r][s], 1e-10);
                worst = worst.max((c[(r, s)] - lmm_inv[r][s]).abs());
            }
        }
    }
    out.check(ok, format!("conditional Gaussian vs precision-matrix brute force, 100 cases (max diff {worst:.1e})"));
}

fn prop_soft_threshold(out: &mut Outcome) {
    let mut runner = TestRunner::new(PropConfig {
        cases: 1000,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let res = runner.run(&(-1e3f64..1e3, 0.0f64..1e3), |(z, gamma)| {
        let s = soft_threshold(z, gamma);
        let want = z.signum() * (z.abs() - gamma).max(0.0);
        prop_assert!(close(s, want, 1e-12), "S({z}, {gamma}) = {s}, expected {want}");
        // it minimizes ½(b − z)² + γ|b|
        let obj = |b: f64| 0.5 * (b - z).powi(2) + gamma * b.abs();
        for b in [s - 1e-3, s + 1e-3, 0.0, z] {
            prop_assert!(obj(s) <= obj(b) + 1e-9 * (1.0 + obj(b)));
        }
        Ok(())
    });
    out.check(res.is_ok(), format!("soft-threshold identity on 1000 pairs {}", res.err().map_or(String::new(), |e| e.to_string())));
}

fn prop_imputation(out: &mut Outcome) {
    let mut rng = rng_from(SEED + 5);
    let mut idempotent = true;
    let mut worst_w = 0.0f64;
    for case in 0..10 {
        let (q, p, g) = (1 + case % 2, 1 + case % 3, 2 + case % 3);
        let spec = DesignSpec::full(q);
        let params = random_params(&mut rng, g, &spec, p);
        let complete = random_dataset(&mut rng, 80, q, p, 0.0);
        let r = impute(&complete, &spec, &params).unwrap();
        idempotent &= r.fractional.is_empty() && r.y_imputed == *complete.y();

        let partial = random_dataset(&mut rng, 80, q, p, 0.4);
        let r = impute(&partial, &spec, &params).unwrap();
        for rec in &r.fractional {
            worst_w = worst_w.max((rec.weights.iter().sum::<f64>() - 1.0).abs());
        }
        let filled = Dataset::complete(partial.x().clone(), r.y_imputed.clone()).unwrap();
        let again = impute(&filled, &spec, &params).unwrap();
        idempotent &= again.fractional.is_empty() && again.y_imputed == r.y_imputed;
    }
    out.check(idempotent, "imputation leaves complete data unchanged and is idempotent".into());
    out.check(worst_w <= 1e-12, format!("fractional weights sum to 1 (max error {worst_w:.1e})"));

    let mut worst = 0.0f64;
    for _ in 0..200 {
        let len = 2 + rng.random_range(0..300);
        let shift = 5.0 * normal(&mut rng);
        let errors: Vec<f64> = (0..len).map(|_| shift + normal(&mut rng)).collect();
        let s = error_summary(&errors);
        worst = worst.max((s.mse - (s.bias * s.bias + s.var)).abs() / s.mse);
    }
    out.check(worst <= 1e-12, format!("mse = bias^2 + var (max relative error {worst:.1e})"));
}

fn prop_bic_count(out: &mut Outcome) {
    let mut runner = TestRunner::new(PropConfig {
        cases: 20,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let res = runner.run(&(1usize..=8, 1usize..=5, 1usize..=6), |(g, p, q)| {
        for spec in [DesignSpec::full(q), DesignSpec::intercept_only()] {
            let params = CgmmParams {
                alpha: Matrix::<f64>::zeros(g, spec.gate_dim()),
                coef: vec![Matrix::zeros(spec.mean_dim(), p); g],
                cov: vec![Matrix::zeros(p, p); g],
            };
            let mut count = 0;
            for k in 1..g {
                count += params.alpha.row(k).len();
            }
            for k in 0..g {
                count += params.coef[k].as_slice().len();
                count += (0..p).flat_map(|i| (i..p).map(move |j| (i, j))).count();
            }
            prop_assert_eq!(free_parameters(g, &spec, p), count);
        }
        let d = p + q;
        prop_assert_eq!(free_parameters(g, &DesignSpec::intercept_only(), d), (g - 1) + g * (d + d * (d + 1) / 2));
        Ok(())
    });
    out.check(res.is_ok(), format!("BIC parameter count on 20 (G, p, q) triples {}", res.err().map_or(String::new(), |e| e.to_string())));
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let mut out = Outcome::pass();
    prop_em_monotone(&mut out);
    prop_g1_is_regression(&mut out);
    prop_lambda_zero(&mut out);
    prop_responsibilities_and_gate(&mut out);
    prop_conditional_gaussian(&mut out);
    prop_soft_threshold(&mut out);
    prop_imputation(&mut out);
    prop_bic_count(&mut out);
    let secs = t.elapsed().as_secs_f64();
    out.check(secs < 120.0, format!("suite time {secs:.1}s < 120s"));
    out
}

fn criterion_7() -> Outcome {
    let mut out = Outcome::pass();
    for model in [SimModel::M3, SimModel::M4] {
        let draw = generate(&SimModelSpec::new(model, SEED), 0).unwrap();
        let q = draw.sample.q();
        let spec = DesignSpec::full(q);
        let cgmm = select_g(&draw.sample, &spec, &FitConfig::default(), &(1..=6).collect::<Vec<_>>()).unwrap();
        let (gmm, _) = select_gmm(&draw.sample, &FitConfig::default(), &(1..=6).collect::<Vec<_>>()).unwrap();
        let a = CgmmDensity {
            params: &cgmm.best().params,
            spec: &spec,
        };
        let b = GmmDensity {
            params: &gmm.report.params,
            q,
        };
        let (ka, kb) = kl_diagnostic(&draw.truth, &a, &b, 20_000, SEED);
        out.note(format!(
            "{model} KL CGMM (G={}) {:.4} +- {:.4}, GMM (G={}) {:.4} +- {:.4}, CGMM <= GMM: {}",
            cgmm.best_g,
            ka.kl,
            ka.se,
            gmm.report.n_components(),
            kb.kl,
            kb.se,
            ka.kl <= kb.kl
        ));
    }
    out
}

fn criterion_8() -> Outcome {
    let mut out = Outcome::pass();
    let dir = tempfile::tempdir().unwrap();
    let draw = generate(&SimModelSpec::new(SimModel::M7, SEED), 0).unwrap();
    let data = dir.path().join("income.csv");
    save_csv(&data, &draw.sample).unwrap();
    let fit_dir = dir.path().join("fit");
    let jk_dir = dir.path().join("jk");
    let bin = env!("CARGO_BIN_EXE_cgmm");
    let fit = Command::new(bin)
        .args(["fit", "--g-max", "6", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&fit_dir)
        .output()
        .unwrap();
    out.check(
        fit.status.success(),
        format!("fit over G in 1..6: {}", String::from_utf8_lossy(&fit.stdout).lines().next().unwrap_or("").trim()),
    );
    if !fit.status.success() {
        out.note(String::from_utf8_lossy(&fit.stderr).trim().to_string());
        return out;
    }
    let jk = Command::new(bin)
        .args(["jackknife", "--data"])
        .arg(&data)
        .arg("--params")
        .arg(fit_dir.join("params.json"))
        .arg("--out")
        .arg(&jk_dir)
        .output()
        .unwrap();
    out.check(jk.status.success(), "jackknife runs".into());
    let csv = fs::read_to_string(jk_dir.join("jackknife.csv")).unwrap_or_default();
    let rows: Vec<(String, Vec<f64>)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            let name = f.next().unwrap_or("").to_string();
            (name, f.map(|v| v.parse().unwrap_or(f64::NAN)).collect())
        })
        .collect();
    let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
    out.check(names == ["Q1", "median", "Q3", "mean"], format!("report rows {names:?}"));
    let finite = rows.iter().all(|(_, v)| v.len() == 5 && v.iter().all(|x| x.is_finite()));
    let ordered = rows.iter().all(|(_, v)| v.len() == 5 && v[3] <= v[0] && v[0] <= v[4]);
    out.check(finite && ordered, "estimates, variances and 95% intervals finite, intervals contain the estimate".into());
    for line in String::from_utf8_lossy(&jk.stdout).lines() {
        out.note(line.to_string());
    }
    out
}

fn main() {
    // libtest flags such as --nocapture or a name filter are accepted and ignored
    let scale = Scale::from_env();
    let only: Option<Vec<usize>> = std::env::var("CGMM_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));
    println!(
        "acceptance ({} scale: tables {} reps, Full {} reps, coverage {} reps, high-dimensional {} reps; seed {SEED})",
        scale.name, scale.table_reps, scale.full_reps, scale.coverage_reps, scale.high_dim_reps
    );
    let start = Instant::now();
    let mut results: Vec<(usize, &str, bool, Outcome)> = Vec::new();

    let tables: Vec<(SimModel, MonteCarloReport)> = if wanted(1) || wanted(2) || wanted(3) {
        [SimModel::M1, SimModel::M2, SimModel::M3, SimModel::M4]
            .into_iter()
            .map(|m| (m, run_mc(m, scale.table_reps, &[Method::Full, Method::Gmm, Method::Cgmm], false)))
            .collect()
    } else {
        Vec::new()
    };
    for (_, r) in &tables {
        for line in r.to_table().lines() {
            println!("  | {line}");
        }
    }
    if wanted(1) {
        results.push((1, "Table 1 RMSPE/MAE within 0.06 (M1-M4)", true, criterion_1(&tables)));
    }
    if wanted(2) {
        results.push((2, "CGMM beats GMM RMSPE by >= 0.05 (M3, M4)", true, criterion_2(&tables)));
    }
    if wanted(3) {
        let full = run_mc(SimModel::M1, scale.full_reps, &[Method::Full], false);
        results.push((3, "Table 2 bias and Full MSE", true, criterion_3(&tables, &full)));
    }
    if wanted(4) {
        let cov = run_mc(SimModel::M1, scale.coverage_reps, &[Method::Cgmm], true);
        results.push((4, "Table 3 jackknife coverage (M1)", true, criterion_4(&cov)));
    }
    if wanted(5) {
        let high: Vec<(SimModel, MonteCarloReport)> = [SimModel::M5, SimModel::M6]
            .into_iter()
            .map(|m| (m, run_mc(m, scale.high_dim_reps, &[Method::Gmm, Method::PenalizedCgmm], false)))
            .collect();
        for (_, r) in &high {
            for line in r.to_table().lines() {
                println!("  | {line}");
            }
        }
        results.push((5, "Table 4 penalized CGMM (M5, M6)", true, criterion_5(&high)));
    }
    if wanted(6) {
        results.push((6, "property suite", true, criterion_6()));
    }
    if wanted(7) {
        results.push((7, "KL diagnostic (reported, non-gating)", false, criterion_7()));
    }
    if wanted(8) {
        results.push((8, "income workflow smoke test", true, criterion_8()));
    }

    let mut failed = 0;
    for (k, name, gating, out) in &results {
        let tag = match (gating, out.ok) {
            (false, _) => "INFO",
            (true, true) => "PASS",
            (true, false) => "FAIL",
        };
        println!("{tag} criterion {k}: {name}");
        for line in &out.lines {
            println!("    {line}");
        }
        if *gating && !out.ok {
            failed += 1;
        }
    }
    println!(
        "acceptance: {} gating criteria, {failed} failed ({:.0}s)",
        results.iter().filter(|r| r.2).count(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
