//! Shared data model: datasets, parameter points, model and estimator specs.

pub mod covariance;
pub mod dataset;
pub mod mvn;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use covariance::{assemble_g, assemble_v, CovStructure};
pub use dataset::{Group, GroupedDataset};
pub use mvn::{mahalanobis_sq, mvn_logpdf, CholeskyFactor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    GaussianIdentity,
    BernoulliLogit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub cov_structure: CovStructure,
    pub m: usize,
    pub p: usize,
    pub q: usize,
}

impl ModelSpec {
    pub fn n_g_params(&self) -> usize {
        self.cov_structure.n_params(self.q)
    }

    pub fn parameterization(&self) -> Parameterization {
        Parameterization {
            family: self.family,
            structure: self.cov_structure,
            p: self.p,
            q: self.q,
        }
    }
}

/// Loss selector. `Mle` is the `alpha -> 0` limit of `Mdpde`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EstimatorSpec {
    Mle,
    Mdpde { alpha: f64 },
}

impl EstimatorSpec {
    pub fn mdpde(alpha: f64) -> Result<Self> {
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(Error::InvalidInput(format!(
                "MDPDE tuning exponent must be positive, got {alpha}"
            )));
        }
        Ok(EstimatorSpec::Mdpde { alpha })
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            EstimatorSpec::Mle => None,
            EstimatorSpec::Mdpde { alpha } => Some(*alpha),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EstimatorSpec::Mle => Ok(()),
            EstimatorSpec::Mdpde { alpha } => Self::mdpde(*alpha).map(|_| ()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            EstimatorSpec::Mle => "MLE".to_string(),
            EstimatorSpec::Mdpde { alpha } => format!("MDPDE(alpha={alpha})"),
        }
    }
}

/// Fixed effects plus variance components.
///
/// `sigma0_sq` is the residual variance and is ignored for the Bernoulli
/// family, whose dispersion is fixed at one. The meaning of `g_params`
/// depends on the covariance structure, see [`covariance`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    pub beta: DVector<f64>,
    pub sigma0_sq: f64,
    pub g_params: DVector<f64>,
}

impl ParameterPoint {
    pub fn new(beta: Vec<f64>, sigma0_sq: f64, g_params: Vec<f64>) -> Self {
        Self {
            beta: DVector::from_vec(beta),
            sigma0_sq,
            g_params: DVector::from_vec(g_params),
        }
    }

    pub fn g_matrix(&self, structure: CovStructure, q: usize) -> Result<DMatrix<f64>> {
        assemble_g(self.g_params.as_slice(), structure, q)
    }
}

/// Mapping between a [`ParameterPoint`] and the unconstrained vector the
/// optimizer works on: `[β, log σ0² (gaussian only), G coordinates]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Parameterization {
    pub family: Family,
    pub structure: CovStructure,
    pub p: usize,
    pub q: usize,
}

impl Parameterization {
    pub fn has_sigma0(&self) -> bool {
        self.family == Family::GaussianIdentity
    }

    pub fn n_variance(&self) -> usize {
        usize::from(self.has_sigma0()) + self.structure.n_params(self.q)
    }

    pub fn dim(&self) -> usize {
        self.p + self.n_variance()
    }

    pub fn pack(&self, point: &ParameterPoint) -> Result<DVector<f64>> {
        if point.beta.len() != self.p || point.g_params.len() != self.structure.n_params(self.q) {
            return Err(Error::DimensionMismatch(format!(
                "point has {} fixed effects and {} covariance parameters, expected {} and {}",
                point.beta.len(),
                point.g_params.len(),
                self.p,
                self.structure.n_params(self.q)
            )));
        }
        let mut theta = Vec::with_capacity(self.dim());
        theta.extend(point.beta.iter());
        if self.has_sigma0() {
            if !(point.sigma0_sq > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "residual variance must be positive, got {}",
                    point.sigma0_sq
                )));
            }
            theta.push(point.sigma0_sq.ln());
        }
        theta.extend(self.structure.to_unconstrained(point.g_params.as_slice()));
        Ok(DVector::from_vec(theta))
    }

    pub fn unpack(&self, theta: &DVector<f64>) -> ParameterPoint {
        let beta = theta.rows(0, self.p).into_owned();
        let mut at = self.p;
        let sigma0_sq = if self.has_sigma0() {
            at += 1;
            theta[self.p].exp()
        } else {
            1.0
        };
        let g = self
            .structure
            .from_unconstrained(&theta.as_slice()[at..]);
        ParameterPoint {
            beta,
            sigma0_sq,
            g_params: DVector::from_vec(g),
        }
    }
}
