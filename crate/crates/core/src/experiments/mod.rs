//! Simulation studies: consistency curves, convergence rates and tail decay.
//!
//! Every replication draws its data from streams keyed by
//! `(seed, n, replication, role)`, all estimators are fitted to the same
//! dataset, and replications are reduced in index order. Results are
//! therefore identical for any thread count.

pub mod simulate;

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lmm::fit_lmm;
use crate::logistic::{fit_logistic, LogisticSettings};
use crate::model::{CovStructure, EstimatorSpec, Family, GroupedDataset, ModelSpec};
use crate::optimizer::{FitOptions, FitResult};

pub use simulate::{
    contaminate, replication_dataset, simulate, simulate_lmm, simulate_logistic, stream,
    Contamination, ContaminationTarget, StreamRole,
};

/// Largest tolerated share of failed fits in one (estimator, n) cell.
pub const MAX_FAILURE_SHARE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub model: ModelSpec,
    pub beta0: Vec<f64>,
    /// Residual variance; unused for the Bernoulli family.
    pub sigma0_sq: f64,
    /// Random effects are `N(0, sigma_u_sq · I_q)`.
    pub sigma_u_sq: f64,
    pub n_grid: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub contamination: Option<Contamination>,
    /// Thresholds for the tail frequencies `P(‖β̂ - β₀‖ ≥ ε)`.
    pub epsilons: Vec<f64>,
    pub fit: FitOptions,
    pub logistic: LogisticSettings,
}

impl SimConfig {
    /// Linear design: `β₀ = (1,2,4,3,3)`, `σ² = 0.25`, `σ_u² = 0.56`, `m = 6`, `q = 2`.
    pub fn lmm_study() -> Self {
        Self {
            model: ModelSpec {
                family: Family::GaussianIdentity,
                cov_structure: CovStructure::DiagonalG,
                m: 6,
                p: 5,
                q: 2,
            },
            beta0: vec![1.0, 2.0, 4.0, 3.0, 3.0],
            sigma0_sq: 0.25,
            sigma_u_sq: 0.56,
            n_grid: vec![25, 50, 100, 200, 400],
            replications: 150,
            seed: 20_240_601,
            contamination: None,
            epsilons: vec![0.25, 0.5, 1.0],
            fit: FitOptions::default(),
            logistic: LogisticSettings::default(),
        }
    }

    /// Random-intercept logistic design: `β₀ = (1,2)`, `σ_u² = 0.56`, `m = 6`.
    pub fn logistic_study() -> Self {
        Self {
            model: ModelSpec {
                family: Family::BernoulliLogit,
                cov_structure: CovStructure::DiagonalG,
                m: 6,
                p: 2,
                q: 1,
            },
            beta0: vec![1.0, 2.0],
            sigma0_sq: 1.0,
            sigma_u_sq: 0.56,
            n_grid: vec![25, 50, 100, 200],
            ..Self::lmm_study()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ModelSpec { m, p, q, .. } = self.model;
        if m == 0 || p == 0 || q > p {
            return Err(Error::InvalidInput(format!(
                "need m >= 1, p >= 1 and q <= p, got m = {m}, p = {p}, q = {q}"
            )));
        }
        if self.beta0.len() != p {
            return Err(Error::DimensionMismatch(format!(
                "beta0 has length {}, model has p = {p}",
                self.beta0.len()
            )));
        }
        if !(self.sigma0_sq >= 0.0 && self.sigma_u_sq >= 0.0) {
            return Err(Error::InvalidInput("variances must be non-negative".into()));
        }
        if self.replications == 0 {
            return Err(Error::InvalidInput("replications must be at least 1".into()));
        }
        if self.n_grid.is_empty() || self.n_grid[0] == 0 {
            return Err(Error::InvalidInput("n_grid must hold positive group counts".into()));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("n_grid must be strictly increasing".into()));
        }
        if self.epsilons.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::InvalidInput("epsilons must be non-negative".into()));
        }
        if let Some(c) = &self.contamination {
            c.validate()?;
        }
        Ok(())
    }
}

/// Fit `estimator` to `data` with the model and options of `config`.
pub fn fit_with_config(
    config: &SimConfig,
    data: &GroupedDataset,
    estimator: EstimatorSpec,
) -> Result<FitResult> {
    match config.model.family {
        Family::GaussianIdentity => {
            fit_lmm(data, config.model.cov_structure, estimator, None, &config.fit)
        }
        Family::BernoulliLogit => fit_logistic(
            data,
            config.model.cov_structure,
            estimator,
            None,
            &config.logistic,
            &config.fit,
        ),
    }
}

/// Aggregates over the replications of one (estimator, n) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveCell {
    pub n: usize,
    pub replications: usize,
    pub failures: usize,
    pub mean_bias: f64,
    pub se_bias: f64,
    /// One entry per configured ε.
    pub tail: Vec<f64>,
    /// Summed fitting time over the cell's replications.
    pub wall_ms: f64,
    /// `‖β̂ - β₀‖` of the successful fits, in replication order.
    pub biases: Vec<f64>,
}

impl CurveCell {
    pub fn tail_frequency(&self, epsilon: f64) -> f64 {
        tail_frequency(&self.biases, epsilon)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCurve {
    pub estimator: EstimatorSpec,
    pub epsilons: Vec<f64>,
    pub cells: Vec<CurveCell>,
}

fn tail_frequency(biases: &[f64], epsilon: f64) -> f64 {
    if biases.is_empty() {
        return f64::NAN;
    }
    biases.iter().filter(|b| **b >= epsilon).count() as f64 / biases.len() as f64
}

struct Outcome {
    bias: Option<f64>,
    ms: f64,
}

fn l2_bias(fit: &FitResult, beta0: &[f64]) -> f64 {
    fit.point
        .beta
        .iter()
        .zip(beta0)
        .map(|(b, t)| (b - t) * (b - t))
        .sum::<f64>()
        .sqrt()
}

fn run_replication(
    config: &SimConfig,
    estimators: &[EstimatorSpec],
    n: usize,
    replication: usize,
) -> Result<Vec<Outcome>> {
    let data = replication_dataset(config, n, replication)?;
    Ok(estimators
        .iter()
        .map(|est| {
            let start = Instant::now();
            let bias = match fit_with_config(config, &data, *est) {
                Ok(fit) if fit.converged => Some(l2_bias(&fit, &config.beta0)),
                _ => None,
            };
            Outcome {
                bias,
                ms: start.elapsed().as_secs_f64() * 1e3,
            }
        })
        .collect())
}

fn summarize(
    config: &SimConfig,
    estimator: &EstimatorSpec,
    n: usize,
    outcomes: impl Iterator<Item = (Option<f64>, f64)>,
) -> Result<CurveCell> {
    let mut biases = Vec::with_capacity(config.replications);
    let mut wall_ms = 0.0;
    for (bias, ms) in outcomes {
        wall_ms += ms;
        if let Some(b) = bias {
            biases.push(b);
        }
    }
    let failures = config.replications - biases.len();
    if failures as f64 > MAX_FAILURE_SHARE * config.replications as f64 || biases.is_empty() {
        return Err(Error::ExperimentDegenerate {
            estimator: estimator.label(),
            n,
            failures,
            attempted: config.replications,
        });
    }
    let k = biases.len() as f64;
    let mean = biases.iter().sum::<f64>() / k;
    let se = if biases.len() > 1 {
        let var = biases.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    } else {
        0.0
    };
    Ok(CurveCell {
        n,
        replications: config.replications,
        failures,
        mean_bias: mean,
        se_bias: se,
        tail: config.epsilons.iter().map(|e| tail_frequency(&biases, *e)).collect(),
        wall_ms,
        biases,
    })
}

/// Simulate, fit and record `‖β̂ - β₀‖` for every (estimator, n, replication).
///
/// Replications run on the current rayon pool. Failed or non-converged fits
/// are excluded and counted; a cell with more than 10% failures aborts the
/// run with [`Error::ExperimentDegenerate`].
pub fn run_consistency_experiment(
    config: &SimConfig,
    estimators: &[EstimatorSpec],
) -> Result<Vec<ExperimentCurve>> {
    config.validate()?;
    if estimators.is_empty() {
        return Err(Error::InvalidInput("no estimators requested".into()));
    }
    for est in estimators {
        est.validate()?;
    }
    let mut cells: Vec<Vec<CurveCell>> = vec![Vec::new(); estimators.len()];
    for &n in &config.n_grid {
        let per_rep: Vec<Vec<Outcome>> = (0..config.replications)
            .into_par_iter()
            .map(|r| run_replication(config, estimators, n, r))
            .collect::<Result<_>>()?;
        for (e, est) in estimators.iter().enumerate() {
            let outcomes = per_rep.iter().map(|rep| (rep[e].bias, rep[e].ms));
            cells[e].push(summarize(config, est, n, outcomes)?);
        }
    }
    Ok(estimators
        .iter()
        .zip(cells)
        .map(|(est, cells)| ExperimentCurve {
            estimator: *est,
            epsilons: config.epsilons.clone(),
            cells,
        })
        .collect())
}

/// Least-squares line through `(x, y)` with its coefficient of determination.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Taken as 1 when `y` is constant (the line is then exact).
    pub r_squared: f64,
    pub points: usize,
}

pub fn fit_line(x: &[f64], y: &[f64]) -> LineFit {
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my) * (b - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse: f64 = x
        .iter()
        .zip(y)
        .map(|(a, b)| {
            let r = b - intercept - slope * a;
            r * r
        })
        .sum();
    let scale: f64 = y.iter().map(|b| b * b).sum();
    let r_squared = if syy > 1e-24 * scale { 1.0 - sse / syy } else { 1.0 };
    LineFit {
        slope,
        intercept,
        r_squared,
        points: x.len(),
    }
}

const MIN_GRID: usize = 3;

/// Regress `log(mean bias)` on `log n` over cells with positive bias.
pub fn fit_convergence_rate(curve: &ExperimentCurve) -> Result<LineFit> {
    let (x, y): (Vec<f64>, Vec<f64>) = curve
        .cells
        .iter()
        .filter(|c| c.mean_bias > 0.0 && c.mean_bias.is_finite())
        .map(|c| ((c.n as f64).ln(), c.mean_bias.ln()))
        .unzip();
    if x.len() < MIN_GRID {
        return Err(Error::InsufficientGrid {
            usable: x.len(),
            required: MIN_GRID,
        });
    }
    Ok(fit_line(&x, &y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailDecay {
    pub estimator: EstimatorSpec,
    pub epsilon: f64,
    pub n: Vec<usize>,
    pub frequency: Vec<f64>,
    /// `log P̂(ε)` against `n` over cells with `P̂ > 0`.
    pub fit: LineFit,
}

/// Tail frequencies of an existing curve at `epsilon`, with the log-linear fit.
pub fn tail_decay_from_curve(curve: &ExperimentCurve, epsilon: f64) -> Result<TailDecay> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let n: Vec<usize> = curve.cells.iter().map(|c| c.n).collect();
    let frequency: Vec<f64> = curve.cells.iter().map(|c| c.tail_frequency(epsilon)).collect();
    let (x, y): (Vec<f64>, Vec<f64>) = n
        .iter()
        .zip(&frequency)
        .filter(|(_, f)| **f > 0.0)
        .map(|(n, f)| (*n as f64, f.ln()))
        .unzip();
    if x.len() < MIN_GRID {
        return Err(Error::InsufficientGrid {
            usable: x.len(),
            required: MIN_GRID,
        });
    }
    Ok(TailDecay {
        estimator: curve.estimator,
        epsilon,
        n,
        frequency,
        fit: fit_line(&x, &y),
    })
}

/// Run `estimator` alone over the grid and fit the decay of `P̂(ε)` in `n`.
pub fn tail_decay_experiment(
    config: &SimConfig,
    estimator: EstimatorSpec,
    epsilon: f64,
) -> Result<TailDecay> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidInput(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let mut cfg = config.clone();
    cfg.epsilons = vec![epsilon];
    let curves = run_consistency_experiment(&cfg, &[estimator])?;
    tail_decay_from_curve(&curves[0], epsilon)
}

/// Median of `√(n/m)·‖β̂ - β₀‖` per cell.
pub fn scaled_deviation_medians(curve: &ExperimentCurve, m: usize) -> Vec<(usize, f64)> {
    curve
        .cells
        .iter()
        .map(|c| {
            let scale = (c.n as f64 / m as f64).sqrt();
            let mut v: Vec<f64> = c.biases.iter().map(|b| scale * b).collect();
            v.sort_by(f64::total_cmp);
            let k = v.len();
            let med = if k == 0 {
                f64::NAN
            } else if k % 2 == 1 {
                v[k / 2]
            } else {
                0.5 * (v[k / 2 - 1] + v[k / 2])
            };
            (c.n, med)
        })
        .collect()
}

fn estimator_columns(est: &EstimatorSpec) -> (&'static str, String) {
    match est {
        EstimatorSpec::Mle => ("MLE", "NA".to_string()),
        EstimatorSpec::Mdpde { alpha } => ("MDPDE", alpha.to_string()),
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// One row per (estimator, n):
/// `estimator,alpha,n,mean_bias,se_bias,tail_p_eps1..,failures,wall_ms`.
///
/// `wall_ms` is written as `NA` unless `timing` is set, keeping the file
/// byte-identical across runs and thread counts.
pub fn write_curves_csv<W: Write>(curves: &[ExperimentCurve], writer: W, timing: bool) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let n_eps = curves.first().map_or(0, |c| c.epsilons.len());
    let mut header: Vec<String> = ["estimator", "alpha", "n", "mean_bias", "se_bias"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=n_eps).map(|k| format!("tail_p_eps{k}")));
    header.push("failures".into());
    header.push("wall_ms".into());
    w.write_record(&header).map_err(csv_io)?;
    for curve in curves {
        let (name, alpha) = estimator_columns(&curve.estimator);
        for c in &curve.cells {
            let mut row = vec![
                name.to_string(),
                alpha.clone(),
                c.n.to_string(),
                c.mean_bias.to_string(),
                c.se_bias.to_string(),
            ];
            row.extend(c.tail.iter().map(|t| t.to_string()));
            row.push(c.failures.to_string());
            row.push(if timing {
                format!("{:.3}", c.wall_ms)
            } else {
                "NA".to_string()
            });
            w.write_record(&row).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Long format for plotting: `estimator,alpha,n,metric,value`, with the
/// threshold of each tail frequency spelled out in the metric name.
pub fn write_plot_data_csv<W: Write>(curves: &[ExperimentCurve], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["estimator", "alpha", "n", "metric", "value"])
        .map_err(csv_io)?;
    for curve in curves {
        let (name, alpha) = estimator_columns(&curve.estimator);
        for c in &curve.cells {
            let mut metrics = vec![
                ("mean_bias".to_string(), c.mean_bias),
                ("se_bias".to_string(), c.se_bias),
            ];
            for (e, t) in curve.epsilons.iter().zip(&c.tail) {
                metrics.push((format!("tail_p(eps={e})"), *t));
            }
            for (metric, value) in metrics {
                w.write_record([name, &alpha, &c.n.to_string(), &metric, &value.to_string()])
                    .map_err(csv_io)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
