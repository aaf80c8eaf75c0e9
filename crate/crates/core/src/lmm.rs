//! Linear mixed model: MLE and MDPDE losses with analytic scores.
//!
//! Per group `i`, `y_i ~ N(X_i β, V_i)` with `V_i = σ0² I + Z_i G Z_iᵀ`.
//! Writing `r = y - Xβ`, `d = V⁻¹ r` and `U_k = ∂V/∂θ_k`, both losses have
//! scores of the form
//!
//! ```text
//! ∂ρ/∂β   = -b · Xᵀ d
//! ∂ρ/∂θ_k = ½ tr((a V⁻¹ - b d dᵀ) U_k)
//! ```
//!
//! with `(a, b) = (1, 1)` for the negative log-likelihood and
//! `b = α L2 |V|^{-α/2} e^{-α rᵀV⁻¹r / 2}`, `a = b - α L1 |V|^{-α/2}` for
//! the density power divergence loss. All scores are gradients of the loss
//! (the estimating equations are these gradients set to zero).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::covariance::{assemble_g, assemble_v, CovStructure};
use crate::model::mvn::{ln_2pi, CholeskyFactor};
use crate::model::{EstimatorSpec, Family, Group, GroupedDataset, ParameterPoint, Parameterization};
use crate::optimizer::{minimize_multistart, start_points, FitOptions, FitResult, Objective};

/// Coordinates in which variance-component scores are expressed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarianceCoords {
    /// `log σ0²` and the optimizer coordinates of `G`.
    Unconstrained,
    /// `σ0²` and the natural entries of `G`.
    Natural,
}

/// Log of the MDPDE constants `L1 = (1+α)^{-m/2} (2π)^{-mα/2}` and
/// `L2 = (1 + 1/α) (2π)^{-mα/2}`.
pub fn mdpde_log_constants(alpha: f64, m: usize) -> (f64, f64) {
    let m = m as f64;
    let common = -0.5 * m * alpha * ln_2pi();
    (
        -0.5 * m * (1.0 + alpha).ln() + common,
        (1.0 + 1.0 / alpha).ln() + common,
    )
}

#[derive(Clone, Debug)]
struct GroupState {
    factor: CholeskyFactor,
    d: DVector<f64>,
    log_det: f64,
    quad: f64,
}

impl GroupState {
    fn new(group: &Group, beta: &DVector<f64>, v: &DMatrix<f64>) -> Result<Self> {
        let factor = CholeskyFactor::new(v)?;
        let resid = &group.y - &group.x * beta;
        let d = factor.solve_vec(&resid);
        let log_det = factor.log_det();
        let quad = resid.dot(&d).max(0.0);
        Ok(Self {
            factor,
            d,
            log_det,
            quad,
        })
    }
}

/// Per-group Cholesky factors and residual solves at one parameter point.
///
/// A workspace is immutable; a new point needs a new workspace.
#[derive(Clone, Debug)]
pub struct LmmWorkspace {
    groups: Vec<GroupState>,
    g: DMatrix<f64>,
    m: usize,
    alpha: Option<f64>,
    log_l1: f64,
    log_l2: f64,
}

impl LmmWorkspace {
    pub fn new(
        data: &GroupedDataset,
        point: &ParameterPoint,
        structure: CovStructure,
        alpha: Option<f64>,
    ) -> Result<Self> {
        if point.beta.len() != data.p() {
            return Err(Error::DimensionMismatch(format!(
                "beta has length {}, design has p = {}",
                point.beta.len(),
                data.p()
            )));
        }
        if !(point.sigma0_sq.is_finite() && point.sigma0_sq > 0.0) {
            return Err(Error::DegenerateCovariance(format!(
                "residual variance {} is not positive",
                point.sigma0_sq
            )));
        }
        if let Some(a) = alpha {
            EstimatorSpec::mdpde(a)?;
        }
        let g = assemble_g(point.g_params.as_slice(), structure, data.q())?;
        let groups = data
            .groups()
            .iter()
            .map(|grp| {
                let v = assemble_v(&grp.z, point.sigma0_sq, &g)?;
                GroupState::new(grp, &point.beta, &v)
            })
            .collect::<Result<Vec<_>>>()?;
        let (log_l1, log_l2) = alpha
            .map(|a| mdpde_log_constants(a, data.m()))
            .unwrap_or((f64::NAN, f64::NAN));
        Ok(Self {
            groups,
            g,
            m: data.m(),
            alpha,
            log_l1,
            log_l2,
        })
    }

    pub fn l1(&self) -> Option<f64> {
        self.alpha.map(|_| self.log_l1.exp())
    }

    pub fn l2(&self) -> Option<f64> {
        self.alpha.map(|_| self.log_l2.exp())
    }

    fn n(&self) -> f64 {
        self.groups.len() as f64
    }

    pub fn mle_loss(&self) -> f64 {
        let c = self.m as f64 * ln_2pi();
        self.groups
            .iter()
            .map(|s| 0.5 * (c + s.log_det + s.quad))
            .sum::<f64>()
            / self.n()
    }

    fn alpha_or_err(&self) -> Result<f64> {
        self.alpha
            .ok_or_else(|| Error::InvalidInput("workspace was built without alpha".into()))
    }

    /// `L1 |V|^{-α/2} - L2 |V|^{-α/2} exp(-α rᵀV⁻¹r / 2)`, averaged.
    pub fn mdpde_loss(&self) -> Result<f64> {
        let alpha = self.alpha_or_err()?;
        Ok(self
            .groups
            .iter()
            .map(|s| {
                let t1 = (self.log_l1 - 0.5 * alpha * s.log_det).exp();
                let t2 = (self.log_l2 - 0.5 * alpha * (s.log_det + s.quad)).exp();
                t1 - t2
            })
            .sum::<f64>()
            / self.n())
    }

    /// [`mdpde_loss`](Self::mdpde_loss) plus the constant `L2`, evaluated
    /// with `expm1` so that small `α` keeps full precision.
    pub fn mdpde_loss_centered(&self) -> Result<f64> {
        let alpha = self.alpha_or_err()?;
        let l2 = self.log_l2.exp();
        Ok(self
            .groups
            .iter()
            .map(|s| {
                let t1 = (self.log_l1 - 0.5 * alpha * s.log_det).exp();
                t1 - l2 * (-0.5 * alpha * (s.log_det + s.quad)).exp_m1()
            })
            .sum::<f64>()
            / self.n())
    }

    fn weights(&self, s: &GroupState, estimator: &EstimatorSpec) -> (f64, f64) {
        match estimator {
            EstimatorSpec::Mle => (1.0, 1.0),
            EstimatorSpec::Mdpde { alpha } => {
                let t1 = (self.log_l1 - 0.5 * alpha * s.log_det).exp();
                let t2 = (self.log_l2 - 0.5 * alpha * (s.log_det + s.quad)).exp();
                (alpha * (t2 - t1), alpha * t2)
            }
        }
    }

    /// Gradient of the selected loss: `[∂/∂β, ∂/∂(variance coordinates)]`.
    pub fn gradient(
        &self,
        data: &GroupedDataset,
        point: &ParameterPoint,
        structure: CovStructure,
        estimator: &EstimatorSpec,
        coords: VarianceCoords,
    ) -> DVector<f64> {
        let per_group = self.group_gradients(data, point, structure, estimator, coords);
        let mut total = DVector::zeros(per_group.first().map_or(0, |g| g.len()));
        for g in &per_group {
            total += g;
        }
        total / self.n()
    }

    /// Per-group contributions `∇ρ_i`, whose mean is [`gradient`](Self::gradient).
    pub fn group_gradients(
        &self,
        data: &GroupedDataset,
        point: &ParameterPoint,
        structure: CovStructure,
        estimator: &EstimatorSpec,
        coords: VarianceCoords,
    ) -> Vec<DVector<f64>> {
        let (p, q) = (data.p(), data.q());
        let g_dirs = match coords {
            VarianceCoords::Unconstrained => {
                structure.unconstrained_directions(point.g_params.as_slice(), q)
            }
            VarianceCoords::Natural => structure.natural_directions(q),
        };
        let sigma_scale = match coords {
            VarianceCoords::Unconstrained => point.sigma0_sq,
            VarianceCoords::Natural => 1.0,
        };
        data.groups()
            .iter()
            .zip(&self.groups)
            .map(|(grp, s)| {
                let (a, b) = self.weights(s, estimator);
                let mut grad = DVector::zeros(p + 1 + g_dirs.len());
                let xd = grp.x.transpose() * &s.d;
                for k in 0..p {
                    grad[k] = -b * xd[k];
                }
                grad[p] = 0.5 * sigma_scale * (a * s.factor.inverse_trace() - b * s.d.norm_squared());
                if !g_dirs.is_empty() {
                    // Zᵀ (a V⁻¹ - b d dᵀ) Z
                    let lz = s.factor.whiten(&grp.z);
                    let zd = grp.z.transpose() * &s.d;
                    let w = lz.transpose() * &lz * a - &zd * zd.transpose() * b;
                    for (k, dir) in g_dirs.iter().enumerate() {
                        grad[p + 1 + k] = 0.5 * w.component_mul(dir).sum();
                    }
                }
                grad
            })
            .collect()
    }

    pub fn g_matrix(&self) -> &DMatrix<f64> {
        &self.g
    }

    /// Per-group `(log|V_i|, r_iᵀV_i⁻¹r_i)`.
    pub fn group_terms(&self) -> Vec<(f64, f64)> {
        self.groups.iter().map(|s| (s.log_det, s.quad)).collect()
    }

    /// Cholesky factor of `V_i`.
    pub fn factor(&self, i: usize) -> &CholeskyFactor {
        &self.groups[i].factor
    }

    /// `V_i⁻¹ (y_i - X_i β)`.
    pub fn solved_residual(&self, i: usize) -> &DVector<f64> {
        &self.groups[i].d
    }
}

pub fn lmm_mle_loss(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
) -> Result<f64> {
    Ok(LmmWorkspace::new(data, point, structure, None)?.mle_loss())
}

fn split_score(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
    estimator: EstimatorSpec,
) -> Result<DVector<f64>> {
    let ws = LmmWorkspace::new(data, point, structure, estimator.alpha())?;
    Ok(ws.gradient(data, point, structure, &estimator, VarianceCoords::Unconstrained))
}

/// `∂ρ/∂β = -(1/n) Σ X_iᵀ V_i⁻¹ (y_i - X_i β)`.
pub fn lmm_mle_score_beta(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
) -> Result<DVector<f64>> {
    let g = split_score(data, point, structure, EstimatorSpec::Mle)?;
    Ok(g.rows(0, data.p()).into_owned())
}

/// Gradient in `(log σ0², G coordinates)`; index 0 is the residual variance.
pub fn lmm_mle_score_eta(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
) -> Result<DVector<f64>> {
    let g = split_score(data, point, structure, EstimatorSpec::Mle)?;
    Ok(g.rows(data.p(), g.len() - data.p()).into_owned())
}

pub fn lmm_mdpde_loss(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
    alpha: f64,
) -> Result<f64> {
    LmmWorkspace::new(data, point, structure, Some(alpha))?.mdpde_loss()
}

pub fn lmm_mdpde_score_beta(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
    alpha: f64,
) -> Result<DVector<f64>> {
    let g = split_score(data, point, structure, EstimatorSpec::mdpde(alpha)?)?;
    Ok(g.rows(0, data.p()).into_owned())
}

pub fn lmm_mdpde_score_eta(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
    alpha: f64,
) -> Result<DVector<f64>> {
    let g = split_score(data, point, structure, EstimatorSpec::mdpde(alpha)?)?;
    Ok(g.rows(data.p(), g.len() - data.p()).into_owned())
}

/// Selected loss as a function of the unconstrained parameter vector.
///
/// The MDPDE objective is shifted by the constant `L2` so that small `α`
/// keeps full precision, and divided by `α L2 (1+α)^{-m/2} |V₀|^{-α/2}`
/// evaluated at a reference point (see [`normalized_at`](Self::normalized_at)).
/// The scaled objective behaves like the negative log-likelihood near the
/// optimum, which keeps the gradient tolerance meaningful for every `α`.
pub struct LmmObjective<'a> {
    data: &'a GroupedDataset,
    structure: CovStructure,
    estimator: EstimatorSpec,
    param: Parameterization,
    scale: f64,
}

impl<'a> LmmObjective<'a> {
    pub fn new(
        data: &'a GroupedDataset,
        structure: CovStructure,
        estimator: EstimatorSpec,
    ) -> Result<Self> {
        estimator.validate()?;
        Ok(Self {
            data,
            structure,
            estimator,
            param: Parameterization {
                family: Family::GaussianIdentity,
                structure,
                p: data.p(),
                q: data.q(),
            },
            scale: 1.0,
        })
    }

    /// Fix the MDPDE scaling constant from the mean `log|V_i|` at `point`.
    pub fn normalized_at(mut self, point: &ParameterPoint) -> Result<Self> {
        if let EstimatorSpec::Mdpde { alpha } = self.estimator {
            let ws = LmmWorkspace::new(self.data, point, self.structure, Some(alpha))?;
            let terms = ws.group_terms();
            let mean_ld = terms.iter().map(|t| t.0).sum::<f64>() / terms.len() as f64;
            let m = self.data.m() as f64;
            let log_c = alpha.ln() + ws.log_l2 - 0.5 * m * (1.0 + alpha).ln() - 0.5 * alpha * mean_ld;
            self.scale = (-log_c).exp();
        }
        Ok(self)
    }

    pub fn parameterization(&self) -> Parameterization {
        self.param
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Loss only, as minimized.
    pub fn loss(&self, theta: &DVector<f64>) -> Result<f64> {
        let point = self.param.unpack(theta);
        let ws = LmmWorkspace::new(self.data, &point, self.structure, self.estimator.alpha())?;
        match self.estimator {
            EstimatorSpec::Mle => Ok(ws.mle_loss()),
            EstimatorSpec::Mdpde { .. } => Ok(self.scale * ws.mdpde_loss_centered()?),
        }
    }
}

impl Objective for LmmObjective<'_> {
    fn dim(&self) -> usize {
        self.param.dim()
    }

    fn eval(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let point = self.param.unpack(theta);
        let ws = LmmWorkspace::new(self.data, &point, self.structure, self.estimator.alpha())?;
        let loss = match self.estimator {
            EstimatorSpec::Mle => ws.mle_loss(),
            EstimatorSpec::Mdpde { .. } => self.scale * ws.mdpde_loss_centered()?,
        };
        let grad = ws.gradient(
            self.data,
            &point,
            self.structure,
            &self.estimator,
            VarianceCoords::Unconstrained,
        );
        Ok((loss, grad * self.scale))
    }
}

/// Ordinary least squares on the stacked data: `(β, residual variance)`.
pub fn ols(data: &GroupedDataset) -> Result<(DVector<f64>, f64)> {
    data.check_full_rank()?;
    let x = data.stacked_x();
    let y = data.stacked_y();
    let qr = x.clone().qr();
    let qty = qr.q().transpose() * &y;
    let beta = qr
        .r()
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficientDesign {
            rank: data.design_rank(),
            required: data.p(),
        })?;
    let resid = &y - &x * &beta;
    let dof = (data.n_obs().saturating_sub(data.p())).max(1) as f64;
    Ok((beta, resid.norm_squared() / dof))
}

/// OLS fixed effects, OLS residual variance and `G = 0.1 I`.
pub fn default_init(data: &GroupedDataset, structure: CovStructure) -> Result<ParameterPoint> {
    let (beta, s2) = ols(data)?;
    let scale = data.stacked_y().iter().map(|v| v * v).sum::<f64>() / data.n_obs() as f64;
    let sigma0_sq = s2.max(1e-12 * scale.max(1.0));
    let g0 = DMatrix::<f64>::identity(data.q(), data.q()) * 0.1;
    let g_params = if data.q() == 0 {
        Vec::new()
    } else {
        structure.extract_params(&g0)?
    };
    Ok(ParameterPoint {
        beta,
        sigma0_sq,
        g_params: DVector::from_vec(g_params),
    })
}

/// Fit the linear mixed model with the selected loss.
pub fn fit_lmm(
    data: &GroupedDataset,
    structure: CovStructure,
    estimator: EstimatorSpec,
    init: Option<&ParameterPoint>,
    opts: &FitOptions,
) -> Result<FitResult> {
    data.check_full_rank()?;
    let init = match init {
        Some(p) => p.clone(),
        None => default_init(data, structure)?,
    };
    let objective = LmmObjective::new(data, structure, estimator)?.normalized_at(&init)?;
    let param = objective.parameterization();
    let theta0 = param.pack(&init)?;
    let starts = start_points(&theta0, data.p(), opts);
    let min = minimize_multistart(&objective, &starts, &opts.minimize)?;
    let point = param.unpack(&min.x);
    // report the loss on its documented scale
    let mut result = FitResult::new(point, &min);
    if let EstimatorSpec::Mdpde { alpha } = estimator {
        result.loss = lmm_mdpde_loss(data, &result.point, structure, alpha)?;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::finite_diff_gradient;
    use std::f64::consts::PI;

    fn small_dataset() -> GroupedDataset {
        // deterministic pseudo-random values
        let mut state = 0x2545_f491_4f6c_dd1du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        let groups = (0..7)
            .map(|_| {
                let m = 4;
                let mut x = DMatrix::zeros(m, 3);
                for j in 0..m {
                    x[(j, 0)] = 1.0;
                    x[(j, 1)] = 1.5 * next();
                    x[(j, 2)] = next();
                }
                let z = x.columns(0, 2).into_owned();
                let y = DVector::from_fn(m, |j, _| {
                    1.0 + 2.0 * x[(j, 1)] - x[(j, 2)] + 0.7 * next()
                });
                Group { y, x, z }
            })
            .collect();
        GroupedDataset::new(groups).unwrap()
    }

    fn naive_mle(data: &GroupedDataset, pt: &ParameterPoint) -> f64 {
        let g = DMatrix::from_diagonal(&pt.g_params);
        let mut total = 0.0;
        for grp in data.groups() {
            let v = DMatrix::identity(data.m(), data.m()) * pt.sigma0_sq + &grp.z * &g * grp.z.transpose();
            let r = &grp.y - &grp.x * &pt.beta;
            let inv = v.clone().try_inverse().unwrap();
            total += 0.5 * data.m() as f64 * (2.0 * PI).ln()
                + 0.5 * v.determinant().ln()
                + 0.5 * (r.transpose() * inv * &r)[0];
        }
        total / data.n() as f64
    }

    #[test]
    fn zero_residual_single_observation() {
        let groups = (0..3)
            .map(|k| Group {
                y: DVector::from_element(1, 2.0 * k as f64),
                x: DMatrix::from_element(1, 1, k as f64),
                z: DMatrix::zeros(1, 0),
            })
            .collect();
        let data = GroupedDataset::new(groups).unwrap();
        let pt = ParameterPoint::new(vec![2.0], 1.0, vec![]);
        let loss = lmm_mle_loss(&data, &pt, CovStructure::DiagonalG).unwrap();
        assert!((loss - 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn mle_loss_matches_dense_formula() {
        let data = small_dataset();
        let pt = ParameterPoint::new(vec![0.8, 1.7, -0.9], 0.4, vec![0.3, 0.8]);
        let loss = lmm_mle_loss(&data, &pt, CovStructure::DiagonalG).unwrap();
        assert!((loss - naive_mle(&data, &pt)).abs() < 1e-10);
    }

    #[test]
    fn mle_score_beta_vanishes_at_gls() {
        let data = small_dataset();
        let g = DMatrix::from_diagonal(&DVector::from_vec(vec![0.3, 0.8]));
        let mut a = DMatrix::zeros(3, 3);
        let mut b = DVector::zeros(3);
        for grp in data.groups() {
            let v = DMatrix::identity(4, 4) * 0.4 + &grp.z * &g * grp.z.transpose();
            let inv = v.try_inverse().unwrap();
            a += grp.x.transpose() * &inv * &grp.x;
            b += grp.x.transpose() * &inv * &grp.y;
        }
        let gls = a.try_inverse().unwrap() * b;
        let pt = ParameterPoint {
            beta: gls,
            sigma0_sq: 0.4,
            g_params: DVector::from_vec(vec![0.3, 0.8]),
        };
        let s = lmm_mle_score_beta(&data, &pt, CovStructure::DiagonalG).unwrap();
        assert!(s.amax() < 1e-10, "{s}");
    }

    #[test]
    fn residual_only_score_matches_closed_form() {
        let data = {
            let d = small_dataset();
            let groups = d
                .groups()
                .iter()
                .map(|g| Group {
                    y: g.y.clone(),
                    x: g.x.clone(),
                    z: DMatrix::zeros(4, 0),
                })
                .collect();
            GroupedDataset::new(groups).unwrap()
        };
        let s2 = 0.6;
        let pt = ParameterPoint::new(vec![1.0, 2.0, -1.0], s2, vec![]);
        let score = lmm_mle_score_eta(&data, &pt, CovStructure::DiagonalG).unwrap();
        assert_eq!(score.len(), 1);
        let mut expect = 0.0;
        for g in data.groups() {
            let r = &g.y - &g.x * &pt.beta;
            expect += 0.5 * (4.0 / s2 - r.norm_squared() / (s2 * s2));
        }
        expect /= data.n() as f64;
        // chain rule to log σ0²
        assert!((score[0] - s2 * expect).abs() < 1e-12);
    }

    fn fd_check(estimator: EstimatorSpec, structure: CovStructure, g_params: Vec<f64>) {
        let data = small_dataset();
        let obj = LmmObjective::new(&data, structure, estimator).unwrap();
        let pt = ParameterPoint::new(vec![0.8, 1.7, -0.9], 0.4, g_params);
        let theta = obj.parameterization().pack(&pt).unwrap();
        let (_, analytic) = obj.eval(&theta).unwrap();
        let numeric = finite_diff_gradient(|t| obj.loss(t), &theta, 1e-5).unwrap();
        let rel = (&analytic - &numeric).norm() / numeric.norm();
        assert!(rel < 1e-6, "{estimator:?} {structure:?}: rel {rel}");
    }

    #[test]
    fn analytic_scores_match_finite_differences() {
        fd_check(EstimatorSpec::Mle, CovStructure::DiagonalG, vec![0.3, 0.8]);
        fd_check(EstimatorSpec::Mle, CovStructure::FullG, vec![-0.4, 0.3, 0.1]);
        for alpha in [0.1, 0.5, 1.0] {
            fd_check(EstimatorSpec::Mdpde { alpha }, CovStructure::DiagonalG, vec![0.3, 0.8]);
            fd_check(EstimatorSpec::Mdpde { alpha }, CovStructure::FullG, vec![-0.4, 0.3, 0.1]);
        }
    }

    #[test]
    fn centered_loss_differs_by_l2() {
        let data = small_dataset();
        let pt = ParameterPoint::new(vec![0.8, 1.7, -0.9], 0.4, vec![0.3, 0.8]);
        let ws = LmmWorkspace::new(&data, &pt, CovStructure::DiagonalG, Some(0.5)).unwrap();
        let diff = ws.mdpde_loss_centered().unwrap() - ws.mdpde_loss().unwrap();
        assert!((diff - ws.l2().unwrap()).abs() < 1e-13);
    }

    #[test]
    fn mdpde_scalar_hand_value() {
        // r = 0, m = 1, V = 1, α = 1: (2π)^{-1/2} (2^{-1/2} - 2)
        let data = GroupedDataset::new(vec![Group {
            y: DVector::from_element(1, 3.0),
            x: DMatrix::from_element(1, 1, 1.0),
            z: DMatrix::zeros(1, 0),
        }])
        .unwrap();
        let pt = ParameterPoint::new(vec![3.0], 1.0, vec![]);
        let loss = lmm_mdpde_loss(&data, &pt, CovStructure::DiagonalG, 1.0).unwrap();
        let expect = (2.0 * PI).powf(-0.5) * (2f64.powf(-0.5) - 2.0);
        assert!((loss - expect).abs() < 1e-15);
    }

    #[test]
    fn l1_term_is_integral_of_density_power() {
        // ∫ φ(y)^{1+α} dy over a fine grid equals L1 |V|^{-α/2} for V = 1
        for alpha in [0.1, 0.5, 1.0, 2.0] {
            let (log_l1, _) = mdpde_log_constants(alpha, 1);
            let h = 1e-3;
            let mut total = 0.0;
            let mut y = -20.0f64;
            while y <= 20.0 {
                let phi = (-0.5 * y * y).exp() / (2.0 * PI).sqrt();
                total += phi.powf(1.0 + alpha) * h;
                y += h;
            }
            assert!((total - log_l1.exp()).abs() < 1e-6, "alpha {alpha}");
        }
    }

    #[test]
    fn mdpde_score_beta_zero_at_zero_residual() {
        let data = small_dataset();
        let groups = data
            .groups()
            .iter()
            .map(|g| Group {
                y: &g.x * DVector::from_vec(vec![1.0, 2.0, -1.0]),
                ..g.clone()
            })
            .collect();
        let exact = GroupedDataset::new(groups).unwrap();
        let pt = ParameterPoint::new(vec![1.0, 2.0, -1.0], 0.4, vec![0.3, 0.8]);
        let s = lmm_mdpde_score_beta(&exact, &pt, CovStructure::DiagonalG, 0.5).unwrap();
        assert!(s.amax() < 1e-14);
        let s = lmm_mle_score_beta(&exact, &pt, CovStructure::DiagonalG).unwrap();
        assert!(s.amax() < 1e-14);
    }

    #[test]
    fn small_alpha_score_direction_matches_mle() {
        let data = small_dataset();
        let pt = ParameterPoint::new(vec![0.8, 1.7, -0.9], 0.4, vec![0.3, 0.8]);
        let a = lmm_mdpde_score_beta(&data, &pt, CovStructure::DiagonalG, 1e-6).unwrap();
        let b = lmm_mle_score_beta(&data, &pt, CovStructure::DiagonalG).unwrap();
        let diff = (a.normalize() - b.normalize()).norm();
        assert!(diff < 1e-3, "{diff}");
    }

    #[test]
    fn mdpde_loss_bounded_below() {
        let data = small_dataset();
        let pt = ParameterPoint::new(vec![0.8, 1.7, -0.9], 0.4, vec![0.3, 0.8]);
        let ws = LmmWorkspace::new(&data, &pt, CovStructure::DiagonalG, Some(0.5)).unwrap();
        let l2 = ws.l2().unwrap();
        let bound = ws
            .group_terms()
            .iter()
            .map(|(ld, _)| -l2 * (-0.25 * ld).exp())
            .sum::<f64>()
            / data.n() as f64;
        assert!(ws.mdpde_loss().unwrap() >= bound);
    }

    #[test]
    fn fit_reaches_first_order_conditions() {
        let data = small_dataset();
        for est in [EstimatorSpec::Mle, EstimatorSpec::Mdpde { alpha: 0.5 }] {
            let fit = fit_lmm(&data, CovStructure::DiagonalG, est, None, &FitOptions::default())
                .unwrap();
            assert!(fit.converged, "{est:?}: {:?}", fit.termination);
            assert!(fit.grad_norm <= 1e-6);
            // loss at the fit is no larger than at nearby points
            let base = match est {
                EstimatorSpec::Mle => lmm_mle_loss(&data, &fit.point, CovStructure::DiagonalG),
                EstimatorSpec::Mdpde { alpha } => {
                    lmm_mdpde_loss(&data, &fit.point, CovStructure::DiagonalG, alpha)
                }
            }
            .unwrap();
            assert!((base - fit.loss).abs() < 1e-12);
            let mut shifted = fit.point.clone();
            shifted.beta[1] += 0.05;
            let other = match est {
                EstimatorSpec::Mle => lmm_mle_loss(&data, &shifted, CovStructure::DiagonalG),
                EstimatorSpec::Mdpde { alpha } => {
                    lmm_mdpde_loss(&data, &shifted, CovStructure::DiagonalG, alpha)
                }
            }
            .unwrap();
            assert!(other >= base);
        }
    }

    #[test]
    fn rank_deficient_design_rejected() {
        let data = small_dataset();
        let groups = data
            .groups()
            .iter()
            .map(|g| {
                let mut x = g.x.clone();
                let c = x.column(1).into_owned();
                x.set_column(2, &(c * 2.0));
                Group { x, ..g.clone() }
            })
            .collect();
        let bad = GroupedDataset::new(groups).unwrap();
        let err = fit_lmm(&bad, CovStructure::DiagonalG, EstimatorSpec::Mle, None, &FitOptions::default())
            .unwrap_err();
        assert!(matches!(err, Error::RankDeficientDesign { rank: 2, required: 3 }));
    }
}
