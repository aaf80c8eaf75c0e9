//! Random-effect covariance `G(η)` and marginal covariance `V = σ0² I + Z G Zᵀ`.
//!
//! `DiagonalG` keeps natural-scale variances in `g_params`; the optimizer
//! sees their logarithms. `FullG` stores the lower-triangular Cholesky factor
//! of `G` in column-major order with the diagonal on the log scale, so the
//! parameters are already unconstrained.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::mvn::CholeskyFactor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum CovStructure {
    #[default]
    DiagonalG,
    FullG,
}

/// Column-major lower-triangular index pairs `(row, col)` of a `q x q` matrix.
pub fn lower_tri_indices(q: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(q * (q + 1) / 2);
    for col in 0..q {
        for row in col..q {
            out.push((row, col));
        }
    }
    out
}

impl CovStructure {
    pub fn n_params(self, q: usize) -> usize {
        match self {
            CovStructure::DiagonalG => q,
            CovStructure::FullG => q * (q + 1) / 2,
        }
    }

    fn check_len(self, g_params: &[f64], q: usize) -> Result<()> {
        if g_params.len() != self.n_params(q) {
            return Err(Error::DimensionMismatch(format!(
                "{self:?} with q = {q} needs {} parameters, got {}",
                self.n_params(q),
                g_params.len()
            )));
        }
        Ok(())
    }

    /// Map `g_params` to optimizer coordinates.
    pub fn to_unconstrained(self, g_params: &[f64]) -> Vec<f64> {
        match self {
            CovStructure::DiagonalG => g_params.iter().map(|g| g.ln()).collect(),
            CovStructure::FullG => g_params.to_vec(),
        }
    }

    pub fn from_unconstrained(self, theta: &[f64]) -> Vec<f64> {
        match self {
            CovStructure::DiagonalG => theta.iter().map(|t| t.exp()).collect(),
            CovStructure::FullG => theta.to_vec(),
        }
    }

    /// Inverse of [`assemble_g`]: recover `g_params` from a PD matrix.
    pub fn extract_params(self, g: &DMatrix<f64>) -> Result<Vec<f64>> {
        let q = g.nrows();
        match self {
            CovStructure::DiagonalG => Ok((0..q).map(|i| g[(i, i)]).collect()),
            CovStructure::FullG => {
                let l = CholeskyFactor::new(g)?.l();
                Ok(lower_tri_indices(q)
                    .into_iter()
                    .map(|(r, c)| if r == c { l[(r, c)].ln() } else { l[(r, c)] })
                    .collect())
            }
        }
    }

    fn cholesky_factor(g_params: &[f64], q: usize) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(q, q);
        for (&(r, c), &v) in lower_tri_indices(q).iter().zip(g_params) {
            l[(r, c)] = if r == c { v.exp() } else { v };
        }
        l
    }

    /// `∂G/∂θ_k` for each optimizer coordinate `θ_k` of the covariance block.
    pub fn unconstrained_directions(self, g_params: &[f64], q: usize) -> Vec<DMatrix<f64>> {
        match self {
            CovStructure::DiagonalG => (0..q)
                .map(|k| {
                    let mut d = DMatrix::zeros(q, q);
                    d[(k, k)] = g_params[k];
                    d
                })
                .collect(),
            CovStructure::FullG => {
                let l = Self::cholesky_factor(g_params, q);
                lower_tri_indices(q)
                    .into_iter()
                    .map(|(r, c)| {
                        let mut dl = DMatrix::zeros(q, q);
                        dl[(r, c)] = if r == c { l[(r, c)] } else { 1.0 };
                        &dl * l.transpose() + &l * dl.transpose()
                    })
                    .collect()
            }
        }
    }

    /// `∂G/∂η_k` in natural variance coordinates: the diagonal variances for
    /// `DiagonalG`, the column-major lower-triangular entries of `G` for `FullG`.
    pub fn natural_directions(self, q: usize) -> Vec<DMatrix<f64>> {
        let unit = |r: usize, c: usize| {
            let mut d = DMatrix::zeros(q, q);
            d[(r, c)] = 1.0;
            d[(c, r)] = 1.0;
            d
        };
        match self {
            CovStructure::DiagonalG => (0..q).map(|k| unit(k, k)).collect(),
            CovStructure::FullG => lower_tri_indices(q)
                .into_iter()
                .map(|(r, c)| unit(r, c))
                .collect(),
        }
    }

    /// Natural coordinates of `G` matching [`natural_directions`](Self::natural_directions).
    pub fn natural_values(self, g: &DMatrix<f64>) -> Vec<f64> {
        let q = g.nrows();
        match self {
            CovStructure::DiagonalG => (0..q).map(|k| g[(k, k)]).collect(),
            CovStructure::FullG => lower_tri_indices(q)
                .into_iter()
                .map(|(r, c)| g[(r, c)])
                .collect(),
        }
    }
}

/// Build `G` from its parameters; the result is verified positive definite.
pub fn assemble_g(g_params: &[f64], structure: CovStructure, q: usize) -> Result<DMatrix<f64>> {
    structure.check_len(g_params, q)?;
    let g = match structure {
        CovStructure::DiagonalG => {
            if let Some(bad) = g_params.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
                return Err(Error::DegenerateCovariance(format!(
                    "diagonal variance {bad} is not positive"
                )));
            }
            DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(g_params))
        }
        CovStructure::FullG => {
            let l = CovStructure::cholesky_factor(g_params, q);
            &l * l.transpose()
        }
    };
    if q > 0 {
        CholeskyFactor::new(&g)?;
    }
    Ok(g)
}

/// `σ0² I_m + Z G Zᵀ`. `G` only needs to be positive semi-definite here.
pub fn assemble_v(z: &DMatrix<f64>, sigma0_sq: f64, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.ncols() != g.nrows() || !g.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "Z is {}x{} but G is {}x{}",
            z.nrows(),
            z.ncols(),
            g.nrows(),
            g.ncols()
        )));
    }
    let m = z.nrows();
    let mut v = z * g * z.transpose();
    for i in 0..m {
        v[(i, i)] += sigma0_sq;
    }
    // exact symmetry for the downstream Cholesky
    for i in 0..m {
        for j in 0..i {
            let s = 0.5 * (v[(i, j)] + v[(j, i)]);
            v[(i, j)] = s;
            v[(j, i)] = s;
        }
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_examples() {
        let g = assemble_g(&[0.56], CovStructure::DiagonalG, 1).unwrap();
        assert_eq!(g, DMatrix::from_element(1, 1, 0.56));
        let g = assemble_g(&[1.0, 1.0], CovStructure::DiagonalG, 2).unwrap();
        assert_eq!(g, DMatrix::identity(2, 2));
    }

    #[test]
    fn nonpositive_diagonal_rejected() {
        assert!(matches!(
            assemble_g(&[0.5, 0.0], CovStructure::DiagonalG, 2),
            Err(Error::DegenerateCovariance(_))
        ));
        assert!(matches!(
            assemble_g(&[0.5], CovStructure::DiagonalG, 2),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn full_log_cholesky_round_trip() {
        let g = DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 0.5]);
        let params = CovStructure::FullG.extract_params(&g).unwrap();
        assert_eq!(params.len(), 3);
        let back = assemble_g(&params, CovStructure::FullG, 2).unwrap();
        // direct product of the extracted factor, independent of assemble_g
        let l = DMatrix::from_row_slice(2, 2, &[params[0].exp(), 0.0, params[1], params[2].exp()]);
        let direct = &l * l.transpose();
        for (a, b) in back.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in direct.iter().zip(g.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn v_without_random_effect() {
        let z = DMatrix::from_element(4, 1, 1.0);
        let v = assemble_v(&z, 0.25, &DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(v, DMatrix::identity(4, 4) * 0.25);
    }

    #[test]
    fn v_random_intercept_rank_one() {
        let z = DMatrix::from_element(3, 1, 1.0);
        let v = assemble_v(&z, 0.25, &DMatrix::from_element(1, 1, 0.56)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let expect = 0.56 + if i == j { 0.25 } else { 0.0 };
                assert!((v[(i, j)] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn v_matches_entrywise_sum() {
        // m = 6, q = 2 random intercept + slope
        let x1 = [0.3, -1.1, 0.8, 2.0, -0.4, 0.05];
        let mut z = DMatrix::zeros(6, 2);
        for i in 0..6 {
            z[(i, 0)] = 1.0;
            z[(i, 1)] = x1[i];
        }
        let g = DMatrix::identity(2, 2) * 0.56;
        let v = assemble_v(&z, 0.25, &g).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let mut expect = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        expect += z[(i, a)] * g[(a, b)] * z[(j, b)];
                    }
                }
                if i == j {
                    expect += 0.25;
                }
                assert!((v[(i, j)] - expect).abs() < 1e-14);
            }
        }
        // min eigenvalue >= sigma0^2
        let eig = v.symmetric_eigenvalues();
        assert!(eig.min() >= 0.25 - 1e-12);
    }

    #[test]
    fn unconstrained_directions_match_finite_differences() {
        let params = [0.4, -0.7, -0.2];
        let dirs = CovStructure::FullG.unconstrained_directions(&params, 2);
        for (k, dir) in dirs.iter().enumerate() {
            let h = 1e-6;
            let mut up = params;
            let mut dn = params;
            up[k] += h;
            dn[k] -= h;
            let gu = assemble_g(&up, CovStructure::FullG, 2).unwrap();
            let gd = assemble_g(&dn, CovStructure::FullG, 2).unwrap();
            let fd = (gu - gd) / (2.0 * h);
            assert!((fd - dir).abs().max() < 1e-8);
        }
    }
}
