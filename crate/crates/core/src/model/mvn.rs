//! Cholesky-based multivariate normal primitives.
//!
//! Every covariance solve in the crate goes through [`CholeskyFactor`]. A
//! failed factorization is retried once with a diagonal jitter of
//! `1e-10 * trace(V) / m`; a second failure is reported as
//! [`Error::DegenerateCovariance`].

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const JITTER_SCALE: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    chol: Cholesky<f64, Dyn>,
    jittered: bool,
}

impl CholeskyFactor {
    pub fn new(v: &DMatrix<f64>) -> Result<Self> {
        if !v.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square, got {}x{}",
                v.nrows(),
                v.ncols()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::DegenerateCovariance(
                "non-finite covariance entry".into(),
            ));
        }
        if let Some(chol) = Cholesky::new(v.clone()) {
            return Ok(Self {
                chol,
                jittered: false,
            });
        }
        let m = v.nrows().max(1) as f64;
        let jitter = JITTER_SCALE * v.trace().abs() / m;
        let mut bumped = v.clone();
        for i in 0..v.nrows() {
            bumped[(i, i)] += jitter;
        }
        Cholesky::new(bumped)
            .map(|chol| Self {
                chol,
                jittered: true,
            })
            .ok_or_else(|| {
                Error::DegenerateCovariance(format!(
                    "Cholesky failed on {}x{} matrix after jitter {jitter:e}",
                    v.nrows(),
                    v.ncols()
                ))
            })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Whether the factorization needed the diagonal jitter retry.
    pub fn jittered(&self) -> bool {
        self.jittered
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L⁻¹ B` for the lower Cholesky factor `L`.
    pub fn whiten(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal")
    }

    /// `tr(V⁻¹) = ‖L⁻¹‖²_F`.
    pub fn inverse_trace(&self) -> f64 {
        let m = self.dim();
        self.whiten(&DMatrix::identity(m, m)).norm_squared()
    }

    /// `bᵀ V⁻¹ b` through one triangular solve; never negative.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("Cholesky factor has a positive diagonal");
        z.norm_squared()
    }
}

fn check_lengths(y: &DVector<f64>, mean: &DVector<f64>, v: &DMatrix<f64>) -> Result<()> {
    if y.len() != mean.len() || v.nrows() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "y has length {}, mean {}, covariance {}x{}",
            y.len(),
            mean.len(),
            v.nrows(),
            v.ncols()
        )));
    }
    Ok(())
}

/// Log-density of `N(mean, V)` at `y`.
pub fn mvn_logpdf(y: &DVector<f64>, mean: &DVector<f64>, v: &DMatrix<f64>) -> Result<f64> {
    check_lengths(y, mean, v)?;
    let factor = CholeskyFactor::new(v)?;
    Ok(logpdf_with_factor(&(y - mean), &factor))
}

pub(crate) fn logpdf_with_factor(resid: &DVector<f64>, factor: &CholeskyFactor) -> f64 {
    let m = resid.len() as f64;
    -0.5 * (m * LN_2PI + factor.log_det() + factor.quad_form(resid))
}

/// `(y - mean)ᵀ V⁻¹ (y - mean)`.
pub fn mahalanobis_sq(y: &DVector<f64>, mean: &DVector<f64>, v: &DMatrix<f64>) -> Result<f64> {
    check_lengths(y, mean, v)?;
    let factor = CholeskyFactor::new(v)?;
    Ok(factor.quad_form(&(y - mean)))
}

pub(crate) fn ln_2pi() -> f64 {
    LN_2PI
}
