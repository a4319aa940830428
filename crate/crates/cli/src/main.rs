mod config;

use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cgmm_core::em::Selection;
use cgmm_core::imputation::quartiles_and_mean;
use cgmm_core::io::{load_csv, load_params, save_completed_csv, save_json, write_fractional_csv, ParamsDocument};
use cgmm_core::penalized::{cv_select_lambda, fit_lambda_path, fit_penalized_em};
use cgmm_core::sim::{monte_carlo, Method, SimModel};
use cgmm_core::{fit_em, impute, jackknife_cgmm, select_g, CgmmError, Dataset, DesignSpec, FitReport};

use config::{CommandKind, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "cgmm", version, about = "Imputation of item nonresponse with conditional Gaussian mixtures")]
struct Cli {
    /// Run configuration JSON (as written by --print-config).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the resolved run configuration as JSON and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Fit a conditional mixture; G fixed with --g or chosen by BIC.
    Fit(FitArgs),
    /// Impute missing responses from fitted parameters.
    Impute(ImputeArgs),
    /// BIC table over G = 1..g-max.
    SelectG(FitArgs),
    /// Lasso-penalized fit with λ chosen by cross-validation (scalar y).
    Cv(CvArgs),
    /// Jackknife intervals for the quartiles and mean of y1.
    Jackknife(JackknifeArgs),
    /// Monte Carlo study on a simulation model.
    Simulate(SimulateArgs),
}

#[derive(Args, Debug, Default)]
struct DataArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct FitArgs {
    #[command(flatten)]
    io: DataArgs,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    g_max: Option<usize>,
    #[arg(long)]
    starts: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Args, Debug)]
struct ImputeArgs {
    #[command(flatten)]
    io: DataArgs,
    /// Parameters JSON from `fit`; the model is fitted first when absent.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    g_max: Option<usize>,
}

#[derive(Args, Debug)]
struct CvArgs {
    #[command(flatten)]
    fit: FitArgs,
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated λ values, largest first.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    folds: Option<usize>,
}

#[derive(Args, Debug)]
struct JackknifeArgs {
    #[command(flatten)]
    io: DataArgs,
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    g: Option<usize>,
    #[arg(long)]
    g_max: Option<usize>,
    #[arg(long)]
    groups: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    model: Option<SimModel>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    g_max: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long = "population")]
    population: Option<usize>,
    /// Comma-separated methods: full, gmm, cgmm, cgmm-lasso.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Also compute jackknife coverage for the CGMM estimator.
    #[arg(long)]
    coverage: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: 1,
            kind: "usage",
            message: message.into(),
        }
    }
}

impl From<CgmmError> for Failure {
    fn from(e: CgmmError) -> Self {
        let (code, kind) = match &e {
            CgmmError::InvalidConfig(_) => (1, "usage"),
            e if e.is_data_error() => (2, "data"),
            _ => (3, "numerical"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        CgmmError::from(e).into()
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn apply_fit_args(cfg: &mut RunConfig, a: FitArgs) {
    set(&mut cfg.data, a.io.data.map(Some));
    set(&mut cfg.out, a.io.out.map(Some));
    set(&mut cfg.g, a.g.map(Some));
    set(&mut cfg.g_max, a.g_max);
    set(&mut cfg.fit.n_starts, a.starts);
    set(&mut cfg.fit.max_iter, a.max_iter);
    set(&mut cfg.fit.tol, a.tol);
}

fn resolve(cli: Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            serde_json::from_str::<RunConfig>(&text)
                .map_err(|e| Failure::usage(format!("bad config {}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    let kind = match &cli.command {
        Some(Cmd::Fit(_)) => Some(CommandKind::Fit),
        Some(Cmd::Impute(_)) => Some(CommandKind::Impute),
        Some(Cmd::SelectG(_)) => Some(CommandKind::SelectG),
        Some(Cmd::Cv(_)) => Some(CommandKind::Cv),
        Some(Cmd::Jackknife(_)) => Some(CommandKind::Jackknife),
        Some(Cmd::Simulate(_)) => Some(CommandKind::Simulate),
        None => None,
    };
    match (kind, cli.config.is_some()) {
        (None, false) => return Err(Failure::usage("a command is required (fit, impute, select-g, cv, jackknife, simulate)")),
        (Some(k), true) if k != cfg.command => {
            return Err(Failure::usage(format!(
                "command '{}' conflicts with '{}' in the config file",
                k.name(),
                cfg.command.name()
            )))
        }
        (Some(k), _) => cfg.command = k,
        (None, true) => {}
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    set(&mut cfg.threads, cli.threads.map(Some));
    match cli.command {
        Some(Cmd::Fit(a)) | Some(Cmd::SelectG(a)) => apply_fit_args(&mut cfg, a),
        Some(Cmd::Impute(a)) => {
            set(&mut cfg.data, a.io.data.map(Some));
            set(&mut cfg.out, a.io.out.map(Some));
            set(&mut cfg.params, a.params.map(Some));
            set(&mut cfg.g, a.g.map(Some));
            set(&mut cfg.g_max, a.g_max);
        }
        Some(Cmd::Cv(a)) => {
            apply_fit_args(&mut cfg, a.fit);
            set(&mut cfg.lambda, a.lambda.map(Some));
            set(&mut cfg.penalty.lambda_grid, a.lambda_grid);
            set(&mut cfg.penalty.cv_folds, a.folds);
        }
        Some(Cmd::Jackknife(a)) => {
            set(&mut cfg.data, a.io.data.map(Some));
            set(&mut cfg.out, a.io.out.map(Some));
            set(&mut cfg.params, a.params.map(Some));
            set(&mut cfg.g, a.g.map(Some));
            set(&mut cfg.g_max, a.g_max);
            set(&mut cfg.jackknife.n_groups, a.groups.map(Some));
        }
        Some(Cmd::Simulate(a)) => {
            let sim = &mut cfg.simulation;
            if let Some(m) = a.model {
                sim.model = m;
                sim.methods = m.default_methods();
            }
            set(&mut sim.reps, a.reps);
            set(&mut sim.g_max, a.g_max);
            set(&mut sim.n, a.n);
            set(&mut sim.population, a.population);
            set(&mut sim.methods, a.methods);
            sim.coverage |= a.coverage;
            set(&mut cfg.out, a.out.map(Some));
        }
        None => {}
    }
    Ok(cfg)
}

fn design_for(cfg: &RunConfig, data: &Dataset) -> DesignSpec {
    cfg.design.clone().unwrap_or_else(|| DesignSpec::full(data.q()))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset, Failure> {
    let path = cfg.data.as_ref().ok_or_else(|| Failure::usage("--data is required"))?;
    load_csv(path).map_err(|e| match e {
        CgmmError::Io(e) => CgmmError::InvalidData(format!("cannot read {}: {e}", path.display())).into(),
        e => e.into(),
    })
}

/// Output path inside `--out`, creating the directory.
fn out_file(cfg: &RunConfig, name: &str) -> Result<Option<PathBuf>, Failure> {
    match &cfg.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Ok(Some(dir.join(name)))
        }
        None => Ok(None),
    }
}

fn write_text(cfg: &RunConfig, name: &str, text: &str) -> Result<(), Failure> {
    if let Some(path) = out_file(cfg, name)? {
        fs::write(path, text)?;
    }
    Ok(())
}

fn select(cfg: &RunConfig, data: &Dataset, design: &DesignSpec) -> Result<Selection<f64>, Failure> {
    Ok(select_g(data, design, &cfg.fit, &cfg.g_range())?)
}

fn fitted(cfg: &RunConfig, data: &Dataset, design: &DesignSpec) -> Result<FitReport, Failure> {
    match cfg.g {
        Some(g) => Ok(fit_em(data, design, &cfg.fit.with_components(g))?),
        None => Ok(select(cfg, data, design)?.into_best()),
    }
}

/// Parameters from `--params` or from a fresh fit.
fn params_doc(cfg: &RunConfig, data: &Dataset) -> Result<ParamsDocument, Failure> {
    match &cfg.params {
        Some(path) => {
            let doc = load_params(path)?;
            doc.validate(Some(data.p()))?;
            doc.design.validate(data.q())?;
            Ok(doc)
        }
        None => Ok(ParamsDocument::from_report(&fitted(cfg, data, &design_for(cfg, data))?)),
    }
}

fn summarize_fit(r: &FitReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "G {}  loglik {:.6}  BIC {:.6}  converged {}  iterations {}  n {}",
        r.n_components(),
        r.loglik(),
        r.bic,
        r.converged,
        r.n_iter,
        r.n_obs
    );
    for g in 0..r.n_components() {
        let _ = writeln!(s, "component {}", g + 1);
        let _ = writeln!(s, "  gate  {:?}", r.params.alpha.row(g));
        for (a, row) in r.params.coef[g].to_rows().iter().enumerate() {
            let _ = writeln!(s, "  B[{a}]  {row:?}");
        }
        for (a, row) in r.params.cov[g].to_rows().iter().enumerate() {
            let _ = writeln!(s, "  Sigma[{a}]  {row:?}");
        }
    }
    if r.warnings.any() {
        let _ = writeln!(s, "warnings {:?}", r.warnings);
    }
    s
}

fn cmd_fit(cfg: &RunConfig) -> Result<String, Failure> {
    let data = load_data(cfg)?;
    let report = fitted(cfg, &data, &design_for(cfg, &data))?;
    if let Some(path) = out_file(cfg, "params.json")? {
        save_json(&path, &ParamsDocument::from_report(&report))?;
    }
    let text = summarize_fit(&report);
    write_text(cfg, "summary.txt", &text)?;
    Ok(text)
}

fn cmd_impute(cfg: &RunConfig) -> Result<String, Failure> {
    let data = load_data(cfg)?;
    let doc = params_doc(cfg, &data)?;
    let result = impute(&data, &doc.design, &doc.params())?;
    if let Some(path) = out_file(cfg, "completed.csv")? {
        save_completed_csv(&path, &data, &result)?;
    }
    if let Some(path) = out_file(cfg, "fractional.csv")? {
        write_fractional_csv(BufWriter::new(fs::File::create(path)?), &result)?;
    }
    let means: Vec<String> = cgmm_core::imputation::estimate_mean(&result)
        .iter()
        .map(|m| format!("{m:.6}"))
        .collect();
    Ok(format!(
        "imputed {} cells in {} rows (G {})\nimputed means {}\n",
        data.n_missing(),
        result.fractional.len(),
        doc.n_components,
        means.join(" ")
    ))
}

fn cmd_select_g(cfg: &RunConfig) -> Result<String, Failure> {
    let data = load_data(cfg)?;
    let sel = select(cfg, &data, &design_for(cfg, &data))?;
    let mut table = String::from("g,loglik,bic,free_parameters,converged,error\n");
    for f in &sel.fits {
        match &f.result {
            Ok(r) => {
                let _ = writeln!(table, "{},{},{},{},{},", f.g, r.loglik(), r.bic, r.free_parameters(), r.converged);
            }
            Err(e) => {
                let _ = writeln!(table, "{},,,,,{}", f.g, e.replace(',', ";"));
            }
        }
    }
    write_text(cfg, "bic.csv", &table)?;
    let best = sel.best();
    if let Some(path) = out_file(cfg, "params.json")? {
        save_json(&path, &ParamsDocument::from_report(best))?;
    }
    Ok(format!("{table}selected G {}\n", sel.best_g))
}

fn cmd_cv(cfg: &RunConfig) -> Result<String, Failure> {
    let data = load_data(cfg)?;
    if data.p() != 1 {
        return Err(Failure::usage("cv needs a single response column"));
    }
    let design = DesignSpec::full(data.q());
    let g = match cfg.g {
        Some(g) => g,
        None => select(cfg, &data, &design)?.best_g,
    };
    let fit_cfg = cfg.fit.with_components(g);
    let mut s = String::new();
    let fit = match cfg.lambda {
        Some(l) => fit_penalized_em(&data, &fit_cfg, &cfg.penalty, l, None)?,
        None => {
            let cv = cv_select_lambda(&data, &fit_cfg, &cfg.penalty)?;
            let mut curve = String::from("lambda,cv_error\n");
            for (l, e) in &cv.curve {
                let _ = writeln!(curve, "{l},{e}");
            }
            write_text(cfg, "cv_curve.csv", &curve)?;
            let path = fit_lambda_path(&data, &fit_cfg, &cfg.penalty)?;
            let mut table = String::from("lambda,loglik,nonzero_beta,nonzero_alpha,converged\n");
            for f in &path {
                let nz_b: usize = f.params.beta.iter().map(|b| b[1..].iter().filter(|v| **v != 0.0).count()).sum();
                let nz_a: usize = (1..g)
                    .map(|k| f.params.alpha.row(k)[1..].iter().filter(|v| **v != 0.0).count())
                    .sum();
                let _ = writeln!(table, "{},{},{},{},{}", f.lambda, f.loglik, nz_b, nz_a, f.converged);
            }
            write_text(cfg, "lambda_path.csv", &table)?;
            let _ = writeln!(s, "cv folds {}", cv.folds_used);
            let best = cv.best_lambda;
            path.into_iter()
                .find(|f| f.lambda == best)
                .ok_or_else(|| Failure::from(CgmmError::InvalidConfig("chosen λ missing from the path".into())))?
        }
    };
    let params = fit.params.to_cgmm();
    if let Some(p) = out_file(cfg, "params.json")? {
        let mut doc = ParamsDocument::from_params(&params, &design);
        doc.loglik = Some(fit.loglik);
        doc.converged = Some(fit.converged);
        doc.n_iter = Some(fit.n_iter);
        doc.n_obs = Some(data.n());
        save_json(&p, &doc)?;
    }
    let _ = writeln!(s, "G {g}  lambda {}  loglik {:.6}  converged {}", fit.lambda, fit.loglik, fit.converged);
    for (k, b) in fit.params.beta.iter().enumerate() {
        let _ = writeln!(s, "component {}  sigma2 {:.6}  beta {:?}", k + 1, fit.params.sigma2[k], b);
    }
    write_text(cfg, "summary.txt", &s)?;
    Ok(s)
}

fn cmd_jackknife(cfg: &RunConfig) -> Result<String, Failure> {
    let data = load_data(cfg)?;
    let doc = params_doc(cfg, &data)?;
    let report = jackknife_cgmm(&data, &doc.design, &doc.params(), |r| quartiles_and_mean(r, 0), &cfg.jackknife)?;
    let names = ["Q1", "median", "Q3", "mean"];
    let mut csv = String::from("quantity,estimate,variance,se,ci_lower,ci_upper\n");
    let mut table = format!("jackknife with {} groups, G {}\n", report.n_groups, doc.n_components);
    let _ = writeln!(table, "{:<8} {:>14} {:>14} {:>14} {:>14}", "", "estimate", "se", "95% lower", "95% upper");
    for (k, name) in names.iter().enumerate() {
        let se = report.variance[k].sqrt();
        let _ = writeln!(
            csv,
            "{name},{},{},{se},{},{}",
            report.point[k], report.variance[k], report.ci_lower[k], report.ci_upper[k]
        );
        let _ = writeln!(
            table,
            "{name:<8} {:>14.4} {:>14.4} {:>14.4} {:>14.4}",
            report.point[k], se, report.ci_lower[k], report.ci_upper[k]
        );
    }
    write_text(cfg, "jackknife.csv", &csv)?;
    Ok(table)
}

fn cmd_simulate(cfg: &RunConfig) -> Result<String, Failure> {
    let report = monte_carlo(&cfg.simulation)?;
    let text = report.to_table();
    write_text(cfg, "report.txt", &text)?;
    if let Some(path) = out_file(cfg, "replicates.json")? {
        save_json(&path, &report)?;
    }
    Ok(text)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let print = cli.print_config;
    let cfg = resolve(cli)?;
    if print {
        let text = serde_json::to_string_pretty(&cfg).map_err(CgmmError::from)?;
        emit(&format!("{text}\n"));
        return Ok(());
    }
    cfg.validate()?;
    if let Some(t) = cfg.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::usage(format!("thread pool: {e}")))?;
    }
    let out = match cfg.command {
        CommandKind::Fit => cmd_fit(&cfg)?,
        CommandKind::Impute => cmd_impute(&cfg)?,
        CommandKind::SelectG => cmd_select_g(&cfg)?,
        CommandKind::Cv => cmd_cv(&cfg)?,
        CommandKind::Jackknife => cmd_jackknife(&cfg)?,
        CommandKind::Simulate => cmd_simulate(&cfg)?,
    };
    emit(&out);
    Ok(())
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error[{}]: {}", f.kind, one_line(&f.message));
            ExitCode::from(f.code)
        }
    }
}
