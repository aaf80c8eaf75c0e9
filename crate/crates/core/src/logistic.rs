//! Logistic mixed model: marginal likelihood and MDPDE objective.
//!
//! Each group shares one random effect `u ~ N(0, G)`, so the marginal density
//! of a group is a single `q`-dimensional integral. It is evaluated in the
//! whitened coordinate `v = L⁻¹u` (`G = L Lᵀ`) with adaptive Gauss-Hermite
//! quadrature centred at the mode of the integrand. Only `q <= 2` is
//! supported.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::covariance::CovStructure;
use crate::model::mvn::CholeskyFactor;
use crate::model::{EstimatorSpec, Family, Group, GroupedDataset, ParameterPoint, Parameterization};
use crate::optimizer::{
    finite_diff_gradient, minimize_multistart, start_points, DivergenceGuard, FitOptions,
    FitResult, Objective,
};

pub const MAX_ENUMERATION_M: usize = 12;
const MAX_Q: usize = 2;
const MODE_MAX_ITER: usize = 50;
const FD_STEP: f64 = 1e-6;

/// Gauss-Hermite rule for the weight `e^{-t²}`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }
}

/// Hermite functions `φ_j(t) = p_j(t) e^{-t²/2}`, with `p_j` orthonormal
/// under `e^{-t²}`. Returns `(φ_k(t), φ_{k-1}(t), Σ_{j<k} φ_j(t)²)`.
fn hermite_functions(k: usize, t: f64) -> (f64, f64, f64) {
    let mut prev = 0.0;
    let mut cur = std::f64::consts::PI.powf(-0.25) * (-0.5 * t * t).exp();
    let mut sum_sq = 0.0;
    for j in 0..k {
        sum_sq += cur * cur;
        let next = (2.0 / (j + 1) as f64).sqrt() * t * cur - (j as f64 / (j + 1) as f64).sqrt() * prev;
        prev = cur;
        cur = next;
    }
    (cur, prev, sum_sq)
}

/// Golub-Welsch starting values, polished by Newton on `p_k` and weighted
/// by the Christoffel function `w = e^{-t²} / Σ_{j<k} φ_j(t)²`.
///
/// Eigenvector-based weights are only accurate in absolute terms; adaptive
/// quadrature multiplies them by `e^{t²}`, so the outer weights need full
/// relative accuracy.
pub fn gh_rule(k: usize) -> Result<QuadratureRule> {
    if !(1..=100).contains(&k) {
        return Err(Error::InvalidInput(format!(
            "quadrature order must be in 1..=100, got {k}"
        )));
    }
    let mut jac = DMatrix::zeros(k, k);
    for i in 1..k {
        let b = (i as f64 / 2.0).sqrt();
        jac[(i, i - 1)] = b;
        jac[(i - 1, i)] = b;
    }
    let eig = SymmetricEigen::new(jac);
    let mut pairs: Vec<(f64, f64)> = eig
        .eigenvalues
        .iter()
        .map(|&t0| {
            let mut t = t0;
            for _ in 0..3 {
                let (pk, pk1, _) = hermite_functions(k, t);
                if pk1 == 0.0 {
                    break;
                }
                // p_k' = √(2k) p_{k-1}; the e^{-t²/2} factor cancels
                t -= pk / ((2.0 * k as f64).sqrt() * pk1);
            }
            let (_, _, sum_sq) = hermite_functions(k, t);
            (t, (-t * t).exp() / sum_sq)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(QuadratureRule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1).collect(),
    })
}

/// `log Bernoulli(y | logistic(s)) = y s - log(1 + e^s)`.
pub fn log_bernoulli_logit(y: f64, s: f64) -> f64 {
    y * s - softplus(s)
}

fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

pub fn logistic_conditional_logdensity(
    y: f64,
    x: &DVector<f64>,
    z: &DVector<f64>,
    beta: &DVector<f64>,
    u: &DVector<f64>,
) -> f64 {
    log_bernoulli_logit(y, x.dot(beta) + z.dot(u))
}

/// How the `Σ_y f(y)^{1+α}` term of the MDPDE loss is computed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Enumeration {
    /// Sum over all `2^m` outcome vectors; requires `m <= 12`.
    Exact,
    /// `E_f[f(Y)^α]` estimated from `samples` draws of `Y` with a fixed seed.
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticSettings {
    pub gh_order: usize,
    pub enumeration: Enumeration,
    /// A fit stops as diverged once any `|β_k|` exceeds this bound.
    pub beta_bound: f64,
}

impl Default for LogisticSettings {
    fn default() -> Self {
        Self {
            gh_order: 20,
            enumeration: Enumeration::Exact,
            beta_bound: 10.0,
        }
    }
}

/// Tensor-product nodes in `q <= 2` dimensions.
struct Grid {
    q: usize,
    t: Vec<[f64; 2]>,
    log_w: Vec<f64>,
    t_sq: Vec<f64>,
}

impl Grid {
    fn new(rule: &QuadratureRule, q: usize) -> Self {
        let k = rule.order();
        let mut grid = Grid {
            q,
            t: Vec::new(),
            log_w: Vec::new(),
            t_sq: Vec::new(),
        };
        let mut push = |t: [f64; 2], w: f64| {
            grid.t_sq.push(t[0] * t[0] + t[1] * t[1]);
            grid.t.push(t);
            grid.log_w.push(w.ln());
        };
        match q {
            0 => push([0.0, 0.0], 1.0),
            1 => {
                for i in 0..k {
                    push([rule.nodes[i], 0.0], rule.weights[i]);
                }
            }
            _ => {
                for i in 0..k {
                    for j in 0..k {
                        push([rule.nodes[i], rule.nodes[j]], rule.weights[i] * rule.weights[j]);
                    }
                }
            }
        }
        grid
    }

    fn len(&self) -> usize {
        self.t.len()
    }
}

/// A group reduced to its fixed linear predictor `Xβ` and the loadings
/// `A = Z L` of the whitened random effect.
struct Reduced<'a> {
    y: &'a DVector<f64>,
    eta: Vec<f64>,
    a: Vec<[f64; 2]>,
    q: usize,
}

impl<'a> Reduced<'a> {
    fn new(group: &'a Group, beta: &DVector<f64>, l: &DMatrix<f64>) -> Self {
        let q = l.nrows();
        let eta = (&group.x * beta).iter().copied().collect();
        let zl = &group.z * l;
        let a = (0..group.y.len())
            .map(|j| {
                let mut r = [0.0; 2];
                for k in 0..q {
                    r[k] = zl[(j, k)];
                }
                r
            })
            .collect();
        Self {
            y: &group.y,
            eta,
            a,
            q,
        }
    }

    fn predictor(&self, j: usize, v: &[f64; 2]) -> f64 {
        self.eta[j] + self.a[j][0] * v[0] + self.a[j][1] * v[1]
    }

    /// `Σ_j log f(y_j | v) - ½|v|²`.
    fn log_integrand(&self, v: &[f64; 2]) -> f64 {
        let ll: f64 = (0..self.eta.len())
            .map(|j| log_bernoulli_logit(self.y[j], self.predictor(j, v)))
            .sum();
        ll - 0.5 * (v[0] * v[0] + v[1] * v[1])
    }

    /// Gradient and negative Hessian (lower triangle `[h00, h10, h11]`).
    fn derivatives(&self, v: &[f64; 2]) -> ([f64; 2], [f64; 3]) {
        let mut g = [-v[0], -v[1]];
        let mut h = [1.0, 0.0, if self.q == 2 { 1.0 } else { 0.0 }];
        for j in 0..self.eta.len() {
            let mu = sigmoid(self.predictor(j, v));
            let r = self.y[j] - mu;
            let w = mu * (1.0 - mu);
            let a = self.a[j];
            g[0] += r * a[0];
            g[1] += r * a[1];
            h[0] += w * a[0] * a[0];
            h[1] += w * a[1] * a[0];
            h[2] += w * a[1] * a[1];
        }
        if self.q == 1 {
            g[1] = 0.0;
        }
        (g, h)
    }
}

/// Lower Cholesky factor `[c00, c10, c11]` of a 1x1 or 2x2 SPD matrix.
fn chol2(h: [f64; 3], q: usize) -> [f64; 3] {
    let c00 = h[0].sqrt();
    if q == 1 {
        return [c00, 0.0, 1.0];
    }
    let c10 = h[1] / c00;
    let c11 = (h[2] - c10 * c10).max(f64::MIN_POSITIVE).sqrt();
    [c00, c10, c11]
}

fn chol2_solve(c: [f64; 3], b: [f64; 2], q: usize) -> [f64; 2] {
    if q == 1 {
        return [b[0] / (c[0] * c[0]), 0.0];
    }
    let z0 = b[0] / c[0];
    let z1 = (b[1] - c[1] * z0) / c[2];
    let x1 = z1 / c[2];
    let x0 = (z0 - c[1] * x1) / c[0];
    [x0, x1]
}

/// `C⁻ᵀ t` for lower `C`.
fn chol2_back(c: [f64; 3], t: [f64; 2], q: usize) -> [f64; 2] {
    if q == 1 {
        return [t[0] / c[0], 0.0];
    }
    let x1 = t[1] / c[2];
    let x0 = (t[0] - c[1] * x1) / c[0];
    [x0, x1]
}

/// Newton search for the mode of the (log-concave) integrand.
fn find_mode(g: &Reduced) -> Result<([f64; 2], [f64; 3])> {
    let q = g.q;
    let mut v = [0.0; 2];
    let mut f = g.log_integrand(&v);
    for _ in 0..MODE_MAX_ITER {
        let (grad, h) = g.derivatives(&v);
        let c = chol2(h, q);
        let step = chol2_solve(c, grad, q);
        let size = step[0].abs().max(step[1].abs());
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = [v[0] + t * step[0], v[1] + t * step[1]];
            let ft = g.log_integrand(&trial);
            if ft >= f - 1e-12 * f.abs().max(1.0) {
                v = trial;
                f = ft;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted || !f.is_finite() {
            break;
        }
        if size * t <= 1e-12 * (1.0 + v[0].abs().max(v[1].abs())) {
            let (_, h) = g.derivatives(&v);
            return Ok((v, chol2(h, q)));
        }
    }
    Err(Error::InnerModeDivergence {
        iterations: MODE_MAX_ITER,
    })
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn group_marginal(g: &Reduced, grid: &Grid) -> Result<f64> {
    if g.q == 0 {
        return Ok(g.log_integrand(&[0.0, 0.0]));
    }
    let q = g.q;
    let (mode, c) = find_mode(g)?;
    let log_det_c = c[0].ln() + if q == 2 { c[2].ln() } else { 0.0 };
    let sqrt2 = std::f64::consts::SQRT_2;
    let terms: Vec<f64> = (0..grid.len())
        .map(|k| {
            let shift = chol2_back(c, grid.t[k], q);
            let v = [mode[0] + sqrt2 * shift[0], mode[1] + sqrt2 * shift[1]];
            grid.log_w[k] + g.log_integrand(&v) + grid.t_sq[k]
        })
        .collect();
    // the -½|v|² term above is completed by the N(0, I) constant here
    let lse = log_sum_exp(&terms);
    let value = 0.5 * q as f64 * 2f64.ln() - log_det_c + lse
        - 0.5 * q as f64 * (2.0 * std::f64::consts::PI).ln();
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective(format!(
            "marginal log-density is {value}"
        )));
    }
    Ok(value)
}

fn check_group(group: &Group) -> Result<()> {
    if let Some(bad) = group.y.iter().find(|y| **y != 0.0 && **y != 1.0) {
        return Err(Error::InvalidInput(format!(
            "logistic responses must be 0 or 1, found {bad}"
        )));
    }
    if group.z.ncols() > MAX_Q {
        return Err(Error::UnsupportedDimension(format!(
            "quadrature supports q <= {MAX_Q}, got q = {}",
            group.z.ncols()
        )));
    }
    Ok(())
}

fn g_factor(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if g.nrows() > MAX_Q {
        return Err(Error::UnsupportedDimension(format!(
            "quadrature supports q <= {MAX_Q}, got q = {}",
            g.nrows()
        )));
    }
    if g.nrows() == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    Ok(CholeskyFactor::new(g)?.l())
}

/// `log ∫ Π_j f(y_j | u) φ(u; 0, G) du` for one group.
pub fn logistic_marginal_logdensity(
    group: &Group,
    beta: &DVector<f64>,
    g: &DMatrix<f64>,
    rule: &QuadratureRule,
) -> Result<f64> {
    check_group(group)?;
    let l = g_factor(g)?;
    group_marginal(&Reduced::new(group, beta, &l), &Grid::new(rule, g.nrows()))
}

/// Per-outcome marginal probabilities from the non-adaptive rule, shared
/// across all outcome vectors of a group so that they sum to one.
struct OutcomeTable {
    /// `p[j][k]`: success probability of observation `j` at node `k`.
    p: Vec<Vec<f64>>,
    w: Vec<f64>,
}

impl OutcomeTable {
    fn new(g: &Reduced, grid: &Grid) -> Self {
        let norm = std::f64::consts::PI.powf(0.5 * grid.q as f64);
        let sqrt2 = std::f64::consts::SQRT_2;
        let w = grid.log_w.iter().map(|lw| lw.exp() / norm).collect();
        let p = (0..g.eta.len())
            .map(|j| {
                grid.t
                    .iter()
                    .map(|t| sigmoid(g.predictor(j, &[sqrt2 * t[0], sqrt2 * t[1]])))
                    .collect()
            })
            .collect();
        Self { p, w }
    }

    /// `f(y)` for every `y ∈ {0,1}^m`, bit `j` of the index being `y_j`.
    fn all_outcomes(&self) -> Vec<f64> {
        let k = self.w.len();
        let m = self.p.len();
        let mut buf = vec![0.0; k << m];
        buf[..k].copy_from_slice(&self.w);
        for (j, pj) in self.p.iter().enumerate() {
            let half = (1 << j) * k;
            let (lo, hi) = buf.split_at_mut(half);
            for (row_lo, row_hi) in lo.chunks_exact_mut(k).zip(hi.chunks_exact_mut(k)) {
                for c in 0..k {
                    row_hi[c] = row_lo[c] * pj[c];
                    row_lo[c] *= 1.0 - pj[c];
                }
            }
        }
        buf.chunks_exact(k).map(|row| row.iter().sum()).collect()
    }

    fn prob(&self, y: &[f64]) -> f64 {
        (0..self.w.len())
            .map(|k| {
                self.w[k]
                    * y.iter()
                        .zip(&self.p)
                        .map(|(yj, pj)| if *yj == 1.0 { pj[k] } else { 1.0 - pj[k] })
                        .product::<f64>()
            })
            .sum()
    }
}

/// `Σ_y f(y)^{1+α}` for one group, with a Monte-Carlo standard error when
/// it is estimated by sampling.
fn power_mass(g: &Reduced, grid: &Grid, alpha: f64, mode: Enumeration, group_index: usize) -> Result<(f64, f64)> {
    let m = g.eta.len();
    let table = OutcomeTable::new(g, grid);
    match mode {
        Enumeration::Exact => {
            if m > MAX_ENUMERATION_M {
                return Err(Error::EnumerationTooLarge {
                    m,
                    max: MAX_ENUMERATION_M,
                });
            }
            let total = table
                .all_outcomes()
                .iter()
                .filter(|f| **f > 0.0)
                .map(|f| ((1.0 + alpha) * f.ln()).exp())
                .sum();
            Ok((total, 0.0))
        }
        Enumeration::MonteCarlo { samples, seed } => {
            if samples < 2 {
                return Err(Error::InsufficientDraws);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (group_index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut y = vec![0.0; m];
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..samples {
                let v = [rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)];
                let v = if g.q < 2 { [v[0] * (g.q as f64), 0.0] } else { v };
                for (j, yj) in y.iter_mut().enumerate() {
                    let u: f64 = rng.random();
                    *yj = if u < sigmoid(g.predictor(j, &v)) { 1.0 } else { 0.0 };
                }
                let val = table.prob(&y).powf(alpha);
                s1 += val;
                s2 += val * val;
            }
            let n = samples as f64;
            let mean = s1 / n;
            let var = ((s2 / n - mean * mean) * n / (n - 1.0)).max(0.0);
            Ok((mean, (var / n).sqrt()))
        }
    }
}

fn reduced_groups<'a>(
    data: &'a GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
) -> Result<Vec<Reduced<'a>>> {
    if point.beta.len() != data.p() {
        return Err(Error::DimensionMismatch(format!(
            "beta has length {}, design has p = {}",
            point.beta.len(),
            data.p()
        )));
    }
    let g = point.g_matrix(structure, data.q())?;
    let l = g_factor(&g)?;
    data.groups()
        .iter()
        .map(|grp| {
            check_group(grp)?;
            Ok(Reduced::new(grp, &point.beta, &l))
        })
        .collect()
}

/// `-(1/n) Σ_i log f(y_i; β, G)`.
pub fn logistic_mle_loss(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
    rule: &QuadratureRule,
) -> Result<f64> {
    let groups = reduced_groups(data, point, structure)?;
    let grid = Grid::new(rule, data.q());
    let mut total = 0.0;
    for g in &groups {
        total -= group_marginal(g, &grid)?;
    }
    Ok(total / data.n() as f64)
}

/// Value of the MDPDE loss and its Monte-Carlo standard error (zero for
/// exact enumeration).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdpdeValue {
    pub value: f64,
    pub mc_se: f64,
}

fn mdpde_terms(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
    alpha: f64,
    rule: &QuadratureRule,
    enumeration: Enumeration,
    centered: bool,
) -> Result<MdpdeValue> {
    EstimatorSpec::mdpde(alpha)?;
    let groups = reduced_groups(data, point, structure)?;
    let grid = Grid::new(rule, data.q());
    let c = 1.0 + 1.0 / alpha;
    let (mut total, mut var) = (0.0, 0.0);
    for (i, g) in groups.iter().enumerate() {
        let (mass, se) = power_mass(g, &grid, alpha, enumeration, i)?;
        let log_f = group_marginal(g, &grid)?;
        let obs = if centered {
            c * (alpha * log_f).exp_m1()
        } else {
            c * (alpha * log_f).exp()
        };
        total += mass - obs;
        var += se * se;
    }
    let n = data.n() as f64;
    Ok(MdpdeValue {
        value: total / n,
        mc_se: var.sqrt() / n,
    })
}

/// `(1/n) Σ_i [Σ_y f(y)^{1+α} - (1 + 1/α) f(y_i)^α]` with exact enumeration.
pub fn logistic_mdpde_loss(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
    alpha: f64,
    rule: &QuadratureRule,
) -> Result<f64> {
    Ok(mdpde_terms(data, point, structure, alpha, rule, Enumeration::Exact, false)?.value)
}

/// As [`logistic_mdpde_loss`] with a selectable enumeration strategy.
pub fn logistic_mdpde_loss_with(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
    alpha: f64,
    rule: &QuadratureRule,
    enumeration: Enumeration,
) -> Result<MdpdeValue> {
    mdpde_terms(data, point, structure, alpha, rule, enumeration, false)
}

/// Selected logistic loss in unconstrained coordinates, with
/// central-difference gradients.
pub struct LogisticObjective<'a> {
    data: &'a GroupedDataset,
    structure: CovStructure,
    estimator: EstimatorSpec,
    rule: QuadratureRule,
    enumeration: Enumeration,
    param: Parameterization,
}

impl<'a> LogisticObjective<'a> {
    pub fn new(
        data: &'a GroupedDataset,
        structure: CovStructure,
        estimator: EstimatorSpec,
        settings: &LogisticSettings,
    ) -> Result<Self> {
        estimator.validate()?;
        if data.q() > MAX_Q {
            return Err(Error::UnsupportedDimension(format!(
                "quadrature supports q <= {MAX_Q}, got q = {}",
                data.q()
            )));
        }
        if estimator.alpha().is_some()
            && settings.enumeration == Enumeration::Exact
            && data.m() > MAX_ENUMERATION_M
        {
            return Err(Error::EnumerationTooLarge {
                m: data.m(),
                max: MAX_ENUMERATION_M,
            });
        }
        Ok(Self {
            data,
            structure,
            estimator,
            rule: gh_rule(settings.gh_order)?,
            enumeration: settings.enumeration,
            param: Parameterization {
                family: Family::BernoulliLogit,
                structure,
                p: data.p(),
                q: data.q(),
            },
        })
    }

    pub fn parameterization(&self) -> Parameterization {
        self.param
    }

    /// Loss as minimized; the MDPDE loss is shifted by `1 + 1/α`.
    pub fn loss(&self, theta: &DVector<f64>) -> Result<f64> {
        let point = self.param.unpack(theta);
        match self.estimator {
            EstimatorSpec::Mle => logistic_mle_loss(self.data, &point, self.structure, &self.rule),
            EstimatorSpec::Mdpde { alpha } => Ok(mdpde_terms(
                self.data,
                &point,
                self.structure,
                alpha,
                &self.rule,
                self.enumeration,
                true,
            )?
            .value),
        }
    }
}

impl Objective for LogisticObjective<'_> {
    fn dim(&self) -> usize {
        self.param.dim()
    }

    fn eval(&self, theta: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        let f = self.loss(theta)?;
        let g = finite_diff_gradient(|t| self.loss(t), theta, FD_STEP)?;
        Ok((f, g))
    }
}

/// Plain logistic regression by iteratively reweighted least squares.
///
/// Stops early (returning the last iterate) when the coefficients leave
/// `[-bound, bound]`, as happens for separable data.
pub fn logistic_regression(data: &GroupedDataset, bound: f64) -> Result<DVector<f64>> {
    data.check_full_rank()?;
    let x = data.stacked_x();
    let y = data.stacked_y();
    let p = data.p();
    let mut beta = DVector::zeros(p);
    for _ in 0..50 {
        let s = &x * &beta;
        let mut xtwx = DMatrix::zeros(p, p);
        let mut score = DVector::zeros(p);
        for i in 0..x.nrows() {
            let mu = sigmoid(s[i]);
            let w = (mu * (1.0 - mu)).max(1e-12);
            let xi = x.row(i).transpose();
            xtwx += &xi * xi.transpose() * w;
            score += &xi * (y[i] - mu);
        }
        let step = xtwx
            .cholesky()
            .map(|c| c.solve(&score))
            .ok_or(Error::RankDeficientDesign {
                rank: data.design_rank(),
                required: p,
            })?;
        let next = &beta + &step;
        if next.amax() > bound {
            break;
        }
        beta = next;
        if step.amax() < 1e-10 * (1.0 + beta.amax()) {
            break;
        }
    }
    Ok(beta)
}

/// Logistic-regression fixed effects and `G = 0.1 I`.
pub fn default_init(data: &GroupedDataset, structure: CovStructure, settings: &LogisticSettings) -> Result<ParameterPoint> {
    let beta = logistic_regression(data, settings.beta_bound)?;
    let g_params = if data.q() == 0 {
        Vec::new()
    } else {
        structure.extract_params(&(DMatrix::<f64>::identity(data.q(), data.q()) * 0.1))?
    };
    Ok(ParameterPoint {
        beta,
        sigma0_sq: 1.0,
        g_params: DVector::from_vec(g_params),
    })
}

pub fn fit_logistic(
    data: &GroupedDataset,
    structure: CovStructure,
    estimator: EstimatorSpec,
    init: Option<&ParameterPoint>,
    settings: &LogisticSettings,
    opts: &FitOptions,
) -> Result<FitResult> {
    data.check_full_rank()?;
    let objective = LogisticObjective::new(data, structure, estimator, settings)?;
    let param = objective.parameterization();
    let init = match init {
        Some(p) => p.clone(),
        None => default_init(data, structure, settings)?,
    };
    let theta0 = param.pack(&init)?;
    let mut min_opts = opts.minimize;
    if min_opts.divergence.is_none() {
        min_opts.divergence = Some(DivergenceGuard {
            coords: data.p(),
            bound: settings.beta_bound,
        });
    }
    let starts = start_points(&theta0, data.p(), opts);
    let min = minimize_multistart(&objective, &starts, &min_opts)?;
    let mut result = FitResult::new(param.unpack(&min.x), &min);
    if let EstimatorSpec::Mdpde { alpha } = estimator {
        result.loss = mdpde_terms(
            data,
            &result.point,
            structure,
            alpha,
            &objective.rule,
            settings.enumeration,
            false,
        )?
        .value;
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn single_node_rule() {
        let r = gh_rule(1).unwrap();
        assert_eq!(r.nodes.len(), 1);
        assert!(r.nodes[0].abs() < 1e-15);
        assert!((r.weights[0] - PI.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn five_nodes_integrate_fourth_moment() {
        let r = gh_rule(5).unwrap();
        let m4: f64 = r.nodes.iter().zip(&r.weights).map(|(t, w)| w * t.powi(4)).sum();
        assert!((m4 - 0.75 * PI.sqrt()).abs() < 1e-13);
        let m8: f64 = r.nodes.iter().zip(&r.weights).map(|(t, w)| w * t.powi(8)).sum();
        // ∫ t⁸ e^{-t²} = (105/16) √π
        assert!((m8 - 105.0 / 16.0 * PI.sqrt()).abs() < 1e-11);
    }

    #[test]
    fn weight_sum_and_symmetry() {
        let r = gh_rule(20).unwrap();
        let s: f64 = r.weights.iter().sum();
        assert!((s - PI.sqrt()).abs() < 1e-12);
        for i in 0..10 {
            assert!((r.nodes[i] + r.nodes[19 - i]).abs() < 1e-10);
        }
        assert!(gh_rule(0).is_err());
        assert!(gh_rule(101).is_err());
    }

    #[test]
    fn outer_weights_relatively_accurate() {
        // Σ w e^{t²} e^{-a t²} ≈ √(π/a): the e^{t²} factor exposes any
        // absolute-only error in the tail weights
        for k in [60, 80, 100] {
            let r = gh_rule(k).unwrap();
            for a in [0.3, 0.5, 1.0, 1.5] {
                let s: f64 = r
                    .nodes
                    .iter()
                    .zip(&r.weights)
                    .map(|(t, w)| (w.ln() + (1.0 - a) * t * t).exp())
                    .sum();
                let want = (PI / a).sqrt();
                assert!((s / want - 1.0).abs() < 1e-9, "k = {k}, a = {a}: {s} vs {want}");
            }
        }
    }

    #[test]
    fn conditional_logdensity_values() {
        assert!((log_bernoulli_logit(1.0, 0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!((log_bernoulli_logit(1.0, 1.0) - (-0.313_261_687_518_222_8)).abs() < 1e-12);
        assert!(log_bernoulli_logit(1.0, 30.0).abs() < 1e-12);
        assert!((log_bernoulli_logit(0.0, 30.0) + 30.0).abs() < 1e-12);
        assert!(log_bernoulli_logit(0.0, 800.0).is_finite());
        let x = DVector::from_vec(vec![1.0, 0.5]);
        let z = DVector::from_vec(vec![1.0]);
        let b = DVector::from_vec(vec![0.5, 0.6]);
        let u = DVector::from_vec(vec![0.2]);
        let v = logistic_conditional_logdensity(0.0, &x, &z, &b, &u);
        assert!((v - log_bernoulli_logit(0.0, 1.0)).abs() < 1e-15);
    }

    fn one_obs_group(y: f64, x1: f64) -> Group {
        Group {
            y: DVector::from_element(1, y),
            x: DMatrix::from_row_slice(1, 2, &[1.0, x1]),
            z: DMatrix::from_element(1, 1, 1.0),
        }
    }

    fn trapezoid_marginal(group: &Group, beta: &DVector<f64>, s2: f64) -> f64 {
        let sd = s2.sqrt();
        let (lo, hi, k) = (-10.0 * sd, 10.0 * sd, 10_000);
        let h = (hi - lo) / (k - 1) as f64;
        let mut total = 0.0;
        for i in 0..k {
            let u = lo + i as f64 * h;
            let mut ll = 0.0;
            for j in 0..group.y.len() {
                let s = (group.x.row(j) * beta)[0] + group.z[(j, 0)] * u;
                ll += log_bernoulli_logit(group.y[j], s);
            }
            let dens = (-0.5 * u * u / s2).exp() / (2.0 * PI * s2).sqrt();
            let w = if i == 0 || i == k - 1 { 0.5 } else { 1.0 };
            total += w * ll.exp() * dens;
        }
        (total * h).ln()
    }

    #[test]
    fn single_observation_matches_trapezoid() {
        let rule = gh_rule(20).unwrap();
        let beta = DVector::from_vec(vec![0.4, -1.1]);
        for (y, x1, s2) in [(1.0, 0.3, 0.56), (0.0, -1.2, 2.0), (1.0, 2.0, 0.05)] {
            let g = one_obs_group(y, x1);
            let gm = DMatrix::from_element(1, 1, s2);
            let a = logistic_marginal_logdensity(&g, &beta, &gm, &rule).unwrap();
            let b = trapezoid_marginal(&g, &beta, s2);
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    fn six_obs_group(bits: usize, q: usize) -> Group {
        let m = 6;
        let x = DMatrix::from_fn(m, 2, |j, k| if k == 0 { 1.0 } else { (j as f64 - 2.5) * 0.4 });
        let z = DMatrix::from_fn(m, q, |j, k| if k == 0 { 1.0 } else { (j as f64) * 0.3 - 0.8 });
        let y = DVector::from_fn(m, |j, _| ((bits >> j) & 1) as f64);
        Group { y, x, z }
    }

    #[test]
    fn marginal_normalizes_over_outcomes() {
        let rule = gh_rule(20).unwrap();
        let beta = DVector::from_vec(vec![0.7, 1.3]);
        for (q, g) in [
            (1, DMatrix::from_element(1, 1, 0.56)),
            (2, DMatrix::from_row_slice(2, 2, &[0.8, 0.2, 0.2, 0.5])),
        ] {
            let total: f64 = (0..64)
                .map(|bits| {
                    logistic_marginal_logdensity(&six_obs_group(bits, q), &beta, &g, &rule)
                        .unwrap()
                        .exp()
                })
                .sum();
            assert!((total - 1.0).abs() < 1e-8, "q = {q}: {total}");
        }
    }

    #[test]
    fn degenerate_random_effect_reduces_to_logistic_regression() {
        let rule = gh_rule(20).unwrap();
        let beta = DVector::from_vec(vec![0.7, 1.3]);
        let g = DMatrix::from_element(1, 1, 1e-12);
        let grp = six_obs_group(0b101101, 1);
        let a = logistic_marginal_logdensity(&grp, &beta, &g, &rule).unwrap();
        let b: f64 = (0..6)
            .map(|j| log_bernoulli_logit(grp.y[j], (grp.x.row(j) * &beta)[0]))
            .sum();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn mdpde_single_observation_closed_form() {
        let rule = gh_rule(20).unwrap();
        let beta = DVector::from_vec(vec![0.4, -1.1]);
        let s2 = 0.56;
        let alpha = 0.5;
        for y in [0.0, 1.0] {
            let g = one_obs_group(y, 0.3);
            let data = GroupedDataset::new(vec![g.clone()]).unwrap();
            let pi1 = trapezoid_marginal(&one_obs_group(1.0, 0.3), &beta, s2).exp();
            let pobs = if y == 1.0 { pi1 } else { 1.0 - pi1 };
            let expect = pi1.powf(1.0 + alpha) + (1.0 - pi1).powf(1.0 + alpha)
                - (1.0 + 1.0 / alpha) * pobs.powf(alpha);
            let pt = ParameterPoint {
                beta: beta.clone(),
                sigma0_sq: 1.0,
                g_params: DVector::from_element(1, s2),
            };
            let got = logistic_mdpde_loss(&data, &pt, CovStructure::DiagonalG, alpha, &rule).unwrap();
            assert!((got - expect).abs() < 1e-8, "{got} vs {expect}");
        }
    }

    #[test]
    fn outcome_table_is_normalized_and_ordered() {
        let beta = DVector::from_vec(vec![0.7, 1.3]);
        let grp = six_obs_group(0, 1);
        let l = DMatrix::from_element(1, 1, 0.75);
        let red = Reduced::new(&grp, &beta, &l);
        let grid = Grid::new(&gh_rule(20).unwrap(), 1);
        let table = OutcomeTable::new(&red, &grid);
        let all = table.all_outcomes();
        assert!((all.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        for bits in [0usize, 1, 5, 38, 63] {
            let y: Vec<f64> = (0..6).map(|j| ((bits >> j) & 1) as f64).collect();
            assert!((all[bits] - table.prob(&y)).abs() < 1e-13 * all[bits]);
        }
    }

    #[test]
    fn enumeration_limit_enforced() {
        let m = 13;
        let grp = Group {
            y: DVector::zeros(m),
            x: DMatrix::from_fn(m, 1, |_, _| 1.0),
            z: DMatrix::from_element(m, 1, 1.0),
        };
        let data = GroupedDataset::new(vec![grp]).unwrap();
        let pt = ParameterPoint::new(vec![0.0], 1.0, vec![0.5]);
        let rule = gh_rule(10).unwrap();
        assert!(matches!(
            logistic_mdpde_loss(&data, &pt, CovStructure::DiagonalG, 0.5, &rule),
            Err(Error::EnumerationTooLarge { m: 13, max: 12 })
        ));
        let mc = logistic_mdpde_loss_with(
            &data,
            &pt,
            CovStructure::DiagonalG,
            0.5,
            &rule,
            Enumeration::MonteCarlo { samples: 2000, seed: 3 },
        )
        .unwrap();
        assert!(mc.value.is_finite() && mc.mc_se > 0.0);
    }

    #[test]
    fn monte_carlo_mass_agrees_with_enumeration() {
        let groups: Vec<Group> = (0..3).map(|b| six_obs_group(b * 17, 1)).collect();
        let data = GroupedDataset::new(groups).unwrap();
        let pt = ParameterPoint::new(vec![0.2, 0.9], 1.0, vec![0.56]);
        let rule = gh_rule(20).unwrap();
        let exact = logistic_mdpde_loss(&data, &pt, CovStructure::DiagonalG, 0.5, &rule).unwrap();
        let mc = logistic_mdpde_loss_with(
            &data,
            &pt,
            CovStructure::DiagonalG,
            0.5,
            &rule,
            Enumeration::MonteCarlo { samples: 20_000, seed: 11 },
        )
        .unwrap();
        assert!((mc.value - exact).abs() < 4.0 * mc.mc_se + 1e-12, "{} vs {exact} (se {})", mc.value, mc.mc_se);
    }

    #[test]
    fn non_binary_response_rejected() {
        let mut g = one_obs_group(1.0, 0.0);
        g.y[0] = 0.5;
        let gm = DMatrix::from_element(1, 1, 1.0);
        let rule = gh_rule(5).unwrap();
        assert!(matches!(
            logistic_marginal_logdensity(&g, &DVector::zeros(2), &gm, &rule),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn all_successes_do_not_converge() {
        let groups: Vec<Group> = (0..20)
            .map(|i| {
                let mut g = six_obs_group(63, 1);
                g.x[(0, 1)] += i as f64 * 0.01;
                g
            })
            .collect();
        let data = GroupedDataset::new(groups).unwrap();
        let fit = fit_logistic(
            &data,
            CovStructure::DiagonalG,
            EstimatorSpec::Mle,
            None,
            &LogisticSettings::default(),
            &FitOptions::default(),
        )
        .unwrap();
        assert!(!fit.converged, "{:?} {:?}", fit.termination, fit.point);
    }
}
