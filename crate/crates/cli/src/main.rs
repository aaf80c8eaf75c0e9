mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use robust_glmm::diagnostics::{
    b3_first_violation, check_b1, check_b3, check_b4, check_b5, group_covariance,
    AssumptionReport, Evidence,
};
use robust_glmm::experiments::{
    fit_convergence_rate, replication_dataset, run_consistency_experiment, tail_decay_from_curve,
    write_curves_csv, write_plot_data_csv, ExperimentCurve,
};
use robust_glmm::lmm::fit_lmm;
use robust_glmm::logistic::fit_logistic;
use robust_glmm::model::{CovStructure, EstimatorSpec, Family, GroupedDataset, ParameterPoint};
use robust_glmm::optimizer::FitResult;
use robust_glmm::Error;

use config::{Check, ConfigError, EvalPoint, RunConfig};

#[derive(Parser)]
#[command(name = "robust-glmm", version, about = "MLE and MDPDE for linear and logistic mixed models")]
struct Cli {
    /// Worker threads; defaults to the available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one dataset and write it as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the configured estimators to a dataset.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a consistency experiment and write curves plus a rate summary.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check regularity conditions on a dataset.
    Diagnose {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum CliError {
    Config(ConfigError),
    Core(Error),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Config(e)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(Error::Io(e.to_string()))
    }
}

type CliResult<T> = Result<T, CliError>;

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| Error::Io(format!("{}: {e}", parent.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Core(Error::Io(format!("{}: {e}", path.display()))))
}

fn out_path(flag: Option<PathBuf>, configured: &Option<PathBuf>, key: &str) -> CliResult<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| ConfigError::Missing(format!("{key} (or --out)")).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io(e.to_string()))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn load_data(cfg: &RunConfig, path: &Path) -> CliResult<GroupedDataset> {
    let data = GroupedDataset::from_csv_path(path)?;
    let dims = [("m", cfg.model.m, data.m()), ("p", cfg.model.p, data.p()), ("q", cfg.model.q, data.q())];
    for (key, want, got) in dims {
        if let Some(w) = want {
            if w != got {
                return Err(Error::DimensionMismatch(format!(
                    "config has model.{key} = {w}, data has {got}"
                ))
                .into());
            }
        }
    }
    Ok(data)
}

fn cmd_simulate(cfg: &RunConfig, out: Option<PathBuf>) -> CliResult<()> {
    let (sim, n) = cfg.require_simulate()?;
    let path = out_path(out, &cfg.output.file, "output.file")?;
    let data = replication_dataset(&sim, n, cfg.simulation.replication)?;
    let mut w = create(&path)?;
    data.write_csv(&mut w)?;
    w.flush()?;
    println!(
        "simulated n = {}, m = {}, p = {}, q = {}, seed = {} -> {}",
        data.n(),
        data.m(),
        data.p(),
        data.q(),
        sim.seed,
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FitReport {
    estimator: String,
    alpha: Option<f64>,
    beta: Vec<f64>,
    /// `None` for the Bernoulli family.
    sigma0_sq: Option<f64>,
    /// Natural-scale `G` coordinates: variances, or lower-triangular entries.
    g: Vec<f64>,
    loss: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
    termination: String,
}

fn fit_one(cfg: &RunConfig, data: &GroupedDataset, est: EstimatorSpec) -> CliResult<FitResult> {
    let s = cfg.structure();
    Ok(match cfg.family()? {
        Family::GaussianIdentity => fit_lmm(data, s, est, None, &cfg.fit_options())?,
        Family::BernoulliLogit => {
            fit_logistic(data, s, est, None, &cfg.logistic_settings(), &cfg.fit_options())?
        }
    })
}

fn fit_report(
    cfg: &RunConfig,
    data: &GroupedDataset,
    est: EstimatorSpec,
    fit: &FitResult,
) -> CliResult<FitReport> {
    let s = cfg.structure();
    let g = fit.point.g_matrix(s, data.q())?;
    Ok(FitReport {
        estimator: est.label(),
        alpha: est.alpha(),
        beta: fit.point.beta.iter().copied().collect(),
        sigma0_sq: (cfg.family()? == Family::GaussianIdentity).then_some(fit.point.sigma0_sq),
        g: s.natural_values(&g),
        loss: fit.loss,
        grad_norm: fit.grad_norm,
        iterations: fit.iterations,
        converged: fit.converged,
        termination: format!("{:?}", fit.termination),
    })
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("[{}]", parts.join(", "))
}

fn cmd_fit(cfg: &RunConfig, data_path: &Path, out: Option<PathBuf>) -> CliResult<()> {
    cfg.family()?;
    let estimators = cfg.estimator_list()?;
    let data = load_data(cfg, data_path)?;
    let mut reports = Vec::new();
    for est in estimators {
        let fit = fit_one(cfg, &data, est)?;
        let r = fit_report(cfg, &data, est, &fit)?;
        println!("{}", r.estimator);
        println!("  beta       = {}", fmt_vec(&r.beta));
        if let Some(s) = r.sigma0_sq {
            println!("  sigma0_sq  = {s:.6}");
        }
        println!("  G          = {}", fmt_vec(&r.g));
        println!("  loss       = {:.8}", r.loss);
        println!("  iterations = {}", r.iterations);
        println!("  converged  = {} ({})", r.converged, r.termination);
        reports.push(r);
    }
    if let Some(path) = out.or_else(|| cfg.output.file.clone()) {
        write_json(&path, &reports)?;
    }
    Ok(())
}

fn na_or(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

fn write_summary<W: Write>(curves: &[ExperimentCurve], mut w: W) -> CliResult<()> {
    let eps = curves.first().map_or(&[][..], |c| &c.epsilons[..]);
    let mut header = String::from("estimator,alpha,rate_slope,rate_intercept,rate_r2");
    for k in 1..=eps.len() {
        header.push_str(&format!(",tail_slope_eps{k},tail_r2_eps{k}"));
    }
    writeln!(w, "{header}")?;
    for c in curves {
        let rate = fit_convergence_rate(c).ok();
        let mut row = format!(
            "{},{},{},{},{}",
            match c.estimator {
                EstimatorSpec::Mle => "MLE",
                EstimatorSpec::Mdpde { .. } => "MDPDE",
            },
            na_or(c.estimator.alpha()),
            na_or(rate.as_ref().map(|r| r.slope)),
            na_or(rate.as_ref().map(|r| r.intercept)),
            na_or(rate.as_ref().map(|r| r.r_squared)),
        );
        for &e in eps {
            let tail = tail_decay_from_curve(c, e).ok();
            row.push_str(&format!(
                ",{},{}",
                na_or(tail.as_ref().map(|t| t.fit.slope)),
                na_or(tail.as_ref().map(|t| t.fit.r_squared))
            ));
        }
        writeln!(w, "{row}")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_experiment(cfg: &RunConfig, out: Option<PathBuf>) -> CliResult<()> {
    let sim = cfg.require_experiment()?;
    let estimators = cfg.estimator_list()?;
    let dir = out_path(out, &cfg.output.dir, "output.dir")?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let curves = run_consistency_experiment(&sim, &estimators)?;
    write_curves_csv(&curves, create(&dir.join("curves.csv"))?, cfg.experiment.timing)?;
    write_plot_data_csv(&curves, create(&dir.join("plot_data.csv"))?)?;
    write_summary(&curves, create(&dir.join("summary.csv"))?)?;
    for c in &curves {
        match fit_convergence_rate(c) {
            Ok(r) => println!(
                "{:<20} log-log slope {:.4} (R2 {:.4})",
                c.estimator.label(),
                r.slope,
                r.r_squared
            ),
            Err(e) => println!("{:<20} no rate fit: {e}", c.estimator.label()),
        }
    }
    println!("wrote curves.csv, plot_data.csv, summary.csv to {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct DiagnoseOutput {
    point: ParameterPoint,
    reports: Vec<AssumptionReport>,
    b3_first_violation: Option<f64>,
}

fn truth_point(cfg: &RunConfig, q: usize) -> CliResult<ParameterPoint> {
    let sim = &cfg.simulation;
    let missing = |k: &str| CliError::from(ConfigError::Missing(k.into()));
    let beta = sim.beta0.clone().ok_or_else(|| missing("simulation.beta0"))?;
    let s0 = sim.sigma0_sq.ok_or_else(|| missing("simulation.sigma0_sq"))?;
    let su = sim.sigma_u_sq.ok_or_else(|| missing("simulation.sigma_u_sq"))?;
    let g = nalgebra::DMatrix::identity(q, q) * su;
    Ok(ParameterPoint::new(beta, s0, cfg.structure().extract_params(&g)?))
}

fn evidence_value(r: &AssumptionReport) -> f64 {
    match r.evidence {
        Evidence::MinEigenvalue { value, .. } => value,
        _ => 0.0,
    }
}

/// Runs a per-group covariance check on every distinct `V_i`. The verdict
/// holds iff it holds for all of them; the first failing (else the weakest)
/// report is returned.
fn per_group<F>(
    data: &GroupedDataset,
    point: &ParameterPoint,
    s: CovStructure,
    check: F,
) -> CliResult<AssumptionReport>
where
    F: Fn(&nalgebra::DMatrix<f64>) -> robust_glmm::Result<AssumptionReport>,
{
    let mut seen: Vec<nalgebra::DMatrix<f64>> = Vec::new();
    let mut worst: Option<(usize, AssumptionReport)> = None;
    for (i, g) in data.groups().iter().enumerate() {
        let v = group_covariance(g, point, s)?;
        if seen.iter().any(|u| *u == v) {
            continue;
        }
        let r = check(&v)?;
        seen.push(v);
        if !r.holds {
            worst = Some((i, r));
            break;
        }
        if worst.as_ref().is_none_or(|(_, w)| evidence_value(&r) < evidence_value(w)) {
            worst = Some((i, r));
        }
    }
    let (i, mut r) = worst.expect("dataset has at least one group");
    r.detail = format!("group {} of {} distinct covariances; {}", i + 1, seen.len(), r.detail);
    Ok(r)
}

fn verdict_line(r: &AssumptionReport) -> String {
    let evidence = match &r.evidence {
        Evidence::MinEigenvalue { value, se: Some(se) } => format!("min eigenvalue {value:e} (se {se:e})"),
        Evidence::MinEigenvalue { value, se: None } => format!("min eigenvalue {value:e}"),
        Evidence::Rank { rank, required } => format!("rank {rank} of {required}"),
        Evidence::ViolationCount { violations, checked } => {
            format!("{violations} violations in {checked} groups")
        }
    };
    format!(
        "{}: {} | {} | draws {} | {}",
        r.name,
        if r.holds { "holds" } else { "fails" },
        evidence,
        r.draws,
        r.detail
    )
}

fn cmd_diagnose(cfg: &RunConfig, data_path: &Path, out: Option<PathBuf>) -> CliResult<()> {
    let diag = cfg.require_diagnostics()?;
    if cfg.family()? != Family::GaussianIdentity {
        return Err(Error::InvalidInput(
            "regularity diagnostics are available for the gaussian family only".into(),
        )
        .into());
    }
    let data = load_data(cfg, data_path)?;
    let s = cfg.structure();
    let point = match diag.at {
        EvalPoint::Truth => truth_point(cfg, data.q())?,
        EvalPoint::Fit => fit_lmm(&data, s, EstimatorSpec::Mle, None, &cfg.fit_options())?.point,
    };
    let mut reports = Vec::new();
    let mut first_violation = None;
    for check in &diag.checks {
        let r = match check {
            Check::B1 => check_b1(&data, &point, s)?,
            Check::B3 => {
                if !diag.alpha_grid.is_empty() {
                    first_violation = b3_first_violation(&data, &point, s, &diag.alpha_grid)?;
                }
                check_b3(&data, &point, s, diag.alpha, diag.n_probe, diag.seed)?
            }
            Check::B4 => per_group(&data, &point, s, check_b4)?,
            Check::B5 => per_group(&data, &point, s, |v| {
                check_b5(v, diag.alpha, diag.mc_draws, diag.seed)
            })?,
        };
        println!("{}", verdict_line(&r));
        if *check == Check::B3 && !diag.alpha_grid.is_empty() {
            match first_violation {
                Some(a) => println!("B3 sweep: first violating alpha = {a}"),
                None => println!("B3 sweep: no violation on the alpha grid"),
            }
        }
        reports.push(r);
    }
    if let Some(path) = out.or_else(|| cfg.output.file.clone()) {
        write_json(
            &path,
            &DiagnoseOutput {
                point,
                reports,
                b3_first_violation: first_violation,
            },
        )?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::InvalidInput("--threads must be at least 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { config, out } => cmd_simulate(&RunConfig::load(&config)?, out),
        Command::Fit { config, data, out } => cmd_fit(&RunConfig::load(&config)?, &data, out),
        Command::Experiment { config, out } => cmd_experiment(&RunConfig::load(&config)?, out),
        Command::Diagnose { config, data, out } => {
            cmd_diagnose(&RunConfig::load(&config)?, &data, out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (class, msg) = match &e {
                CliError::Config(c) => (c.class(), c.to_string()),
                CliError::Core(c) => (c.class(), c.to_string()),
            };
            eprintln!("error[{class}]: {msg}");
            ExitCode::FAILURE
        }
    }
}
