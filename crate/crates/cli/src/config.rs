//! Run configuration: a TOML file with the sections `model`, `estimators`,
//! `simulation`, `optimizer`, `quadrature`, `experiment`, `diagnostics` and
//! `output`. Unknown keys are rejected. Which keys are required depends on
//! the subcommand; see the `require_*` methods.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use robust_glmm::experiments::{Contamination, SimConfig};
use robust_glmm::logistic::{Enumeration, LogisticSettings};
use robust_glmm::model::{CovStructure, EstimatorSpec, Family, ModelSpec};
use robust_glmm::optimizer::FitOptions;

#[derive(Debug)]
pub enum ConfigError {
    Io(String),
    Parse(String),
    Missing(String),
    Invalid(String),
}

impl ConfigError {
    pub fn class(&self) -> &'static str {
        match self {
            ConfigError::Io(_) => "IoError",
            ConfigError::Parse(_) => "ConfigParse",
            ConfigError::Missing(_) => "ConfigMissingKey",
            ConfigError::Invalid(_) => "ConfigInvalid",
        }
    }
}

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigError::Io(m) | ConfigError::Parse(m) | ConfigError::Invalid(m) => f.write_str(m),
            ConfigError::Missing(k) => write!(f, "missing required key `{k}`"),
        }
    }
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum FamilyName {
    Gaussian,
    Logistic,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum CovName {
    #[default]
    Diagonal,
    Full,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub family: Option<FamilyName>,
    #[serde(default)]
    pub covariance: CovName,
    pub m: Option<usize>,
    pub p: Option<usize>,
    pub q: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    #[serde(default)]
    pub mle: bool,
    #[serde(default)]
    pub alphas: Vec<f64>,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SimulationSection {
    pub beta0: Option<Vec<f64>>,
    pub sigma0_sq: Option<f64>,
    pub sigma_u_sq: Option<f64>,
    pub seed: Option<u64>,
    /// Group count for `simulate`.
    pub n: Option<usize>,
    #[serde(default)]
    pub replication: usize,
    pub contamination: Option<Contamination>,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub gtol: Option<f64>,
    pub max_iter: Option<usize>,
    pub n_starts: Option<usize>,
    pub start_perturbation: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct QuadratureSection {
    pub gh_order: Option<usize>,
    /// Switches the MDPDE outcome sum to Monte-Carlo with this many draws.
    pub mc_samples: Option<usize>,
    #[serde(default)]
    pub mc_seed: u64,
    pub beta_bound: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub n_grid: Option<Vec<usize>>,
    pub replications: Option<usize>,
    pub epsilons: Option<Vec<f64>>,
    /// Write measured wall-clock times instead of `NA`.
    #[serde(default)]
    pub timing: bool,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalPoint {
    #[default]
    Fit,
    Truth,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
pub enum Check {
    B1,
    B3,
    B4,
    B5,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub checks: Vec<Check>,
    #[serde(default)]
    pub at: EvalPoint,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Grid scanned for the first α at which B3 fails.
    #[serde(default)]
    pub alpha_grid: Vec<f64>,
    #[serde(default = "default_draws")]
    pub mc_draws: usize,
    #[serde(default)]
    pub n_probe: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    0.5
}

fn default_draws() -> usize {
    2000
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    pub file: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub estimators: EstimatorSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub quadrature: QuadratureSection,
    #[serde(default)]
    pub experiment: ExperimentSection,
    pub diagnostics: Option<DiagnosticsSection>,
    #[serde(default)]
    pub output: OutputSection,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

fn need<T: Clone>(v: &Option<T>, key: &str) -> Result<T, ConfigError> {
    v.clone().ok_or_else(|| ConfigError::Missing(key.to_string()))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| {
            let msg = e.message().trim().to_string();
            match e.span() {
                Some(span) => ConfigError::Parse(format!("line {}: {msg}", line_of(text, span.start))),
                None => ConfigError::Parse(msg),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn family(&self) -> Result<Family, ConfigError> {
        Ok(match need(&self.model.family, "model.family")? {
            FamilyName::Gaussian => Family::GaussianIdentity,
            FamilyName::Logistic => Family::BernoulliLogit,
        })
    }

    pub fn structure(&self) -> CovStructure {
        match self.model.covariance {
            CovName::Diagonal => CovStructure::DiagonalG,
            CovName::Full => CovStructure::FullG,
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec, ConfigError> {
        Ok(ModelSpec {
            family: self.family()?,
            cov_structure: self.structure(),
            m: need(&self.model.m, "model.m")?,
            p: need(&self.model.p, "model.p")?,
            q: need(&self.model.q, "model.q")?,
        })
    }

    /// MLE first (when enabled), then MDPDE in the listed α order.
    pub fn estimator_list(&self) -> Result<Vec<EstimatorSpec>, ConfigError> {
        let mut out = Vec::new();
        if self.estimators.mle {
            out.push(EstimatorSpec::Mle);
        }
        for &a in &self.estimators.alphas {
            out.push(EstimatorSpec::mdpde(a).map_err(|e| ConfigError::Invalid(e.to_string()))?);
        }
        if out.is_empty() {
            return Err(ConfigError::Missing("estimators.mle or estimators.alphas".into()));
        }
        Ok(out)
    }

    pub fn fit_options(&self) -> FitOptions {
        let mut o = FitOptions::default();
        if let Some(g) = self.optimizer.gtol {
            o.minimize.gtol = g;
        }
        if let Some(m) = self.optimizer.max_iter {
            o.minimize.max_iter = m;
        }
        if let Some(n) = self.optimizer.n_starts {
            o.n_starts = n;
        }
        if let Some(d) = self.optimizer.start_perturbation {
            o.start_perturbation = d;
        }
        o
    }

    pub fn logistic_settings(&self) -> LogisticSettings {
        let mut s = LogisticSettings::default();
        if let Some(k) = self.quadrature.gh_order {
            s.gh_order = k;
        }
        if let Some(samples) = self.quadrature.mc_samples {
            s.enumeration = Enumeration::MonteCarlo {
                samples,
                seed: self.quadrature.mc_seed,
            };
        }
        if let Some(b) = self.quadrature.beta_bound {
            s.beta_bound = b;
        }
        s
    }

    /// Simulation settings shared by `simulate` and `experiment`. The grid
    /// fields are filled from `[experiment]` when present.
    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        let model = self.model_spec()?;
        let sim = &self.simulation;
        let sigma0_sq = match model.family {
            Family::GaussianIdentity => need(&sim.sigma0_sq, "simulation.sigma0_sq")?,
            Family::BernoulliLogit => sim.sigma0_sq.unwrap_or(1.0),
        };
        let defaults = SimConfig::lmm_study();
        let cfg = SimConfig {
            model,
            beta0: need(&sim.beta0, "simulation.beta0")?,
            sigma0_sq,
            sigma_u_sq: need(&sim.sigma_u_sq, "simulation.sigma_u_sq")?,
            n_grid: self.experiment.n_grid.clone().unwrap_or_else(|| sim.n.into_iter().collect()),
            replications: self.experiment.replications.unwrap_or(1),
            seed: need(&sim.seed, "simulation.seed")?,
            contamination: sim.contamination,
            epsilons: self.experiment.epsilons.clone().unwrap_or(defaults.epsilons),
            fit: self.fit_options(),
            logistic: self.logistic_settings(),
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }

    pub fn require_simulate(&self) -> Result<(SimConfig, usize), ConfigError> {
        let n = need(&self.simulation.n, "simulation.n")?;
        let mut cfg = self.sim_config()?;
        cfg.n_grid = vec![n];
        Ok((cfg, n))
    }

    pub fn require_experiment(&self) -> Result<SimConfig, ConfigError> {
        need(&self.experiment.n_grid, "experiment.n_grid")?;
        need(&self.experiment.replications, "experiment.replications")?;
        self.sim_config()
    }

    pub fn require_diagnostics(&self) -> Result<&DiagnosticsSection, ConfigError> {
        self.diagnostics
            .as_ref()
            .ok_or_else(|| ConfigError::Missing("diagnostics.checks".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_reports_line() {
        let err = RunConfig::parse("[model]\nfamily = \"gaussian\"\nbogus = 1\n").unwrap_err();
        assert_eq!(err.class(), "ConfigParse");
        assert!(err.to_string().starts_with("line 3:"), "{err}");
    }

    #[test]
    fn unknown_section_rejected() {
        assert!(RunConfig::parse("[plots]\nx = 1\n").is_err());
    }

    #[test]
    fn estimator_order() {
        let c = RunConfig::parse("[estimators]\nmle = true\nalphas = [0.5, 0.1]\n").unwrap();
        assert_eq!(
            c.estimator_list().unwrap(),
            vec![
                EstimatorSpec::Mle,
                EstimatorSpec::Mdpde { alpha: 0.5 },
                EstimatorSpec::Mdpde { alpha: 0.1 }
            ]
        );
        let bad = RunConfig::parse("[estimators]\nalphas = [-1.0]\n").unwrap();
        assert_eq!(bad.estimator_list().unwrap_err().class(), "ConfigInvalid");
    }

    #[test]
    fn missing_key_named() {
        let c = RunConfig::parse("[model]\nfamily = \"gaussian\"\nm = 6\np = 5\nq = 2\n").unwrap();
        let e = c.require_simulate().unwrap_err();
        assert_eq!(e.to_string(), "missing required key `simulation.n`");
    }

    #[test]
    fn gh_order_and_mc() {
        let c = RunConfig::parse("[quadrature]\ngh_order = 30\nmc_samples = 500\nmc_seed = 3\n").unwrap();
        let s = c.logistic_settings();
        assert_eq!(s.gh_order, 30);
        assert_eq!(s.enumeration, Enumeration::MonteCarlo { samples: 500, seed: 3 });
    }
}
