//! Numerical checks of the linear-model regularity conditions and the
//! information matrices of both estimators.
//!
//! Variance coordinates here are natural: `σ0²` followed by the natural
//! entries of `G` (see [`CovStructure::natural_directions`]).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{stream, StreamRole};
use crate::lmm::{LmmWorkspace, VarianceCoords};
use crate::model::covariance::{assemble_v, CovStructure};
use crate::model::mvn::CholeskyFactor;
use crate::model::{EstimatorSpec, Group, GroupedDataset, ParameterPoint};

/// Relative eigenvalue tolerance for positive semi-definiteness.
pub const PSD_TOL: f64 = 1e-8;
/// Largest group size for the `m² x m²` Kronecker checks.
pub const MAX_KRONECKER_M: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Evidence {
    MinEigenvalue { value: f64, se: Option<f64> },
    Rank { rank: usize, required: usize },
    ViolationCount { violations: usize, checked: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub name: String,
    pub holds: bool,
    pub evidence: Evidence,
    /// Monte-Carlo draws behind the verdict; 0 for exact checks.
    pub draws: usize,
    pub detail: String,
}

struct SymSpectrum {
    min: f64,
    max: f64,
    min_vec: DVector<f64>,
}

fn spectrum(m: &DMatrix<f64>) -> SymSpectrum {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let (mut imin, mut imax) = (0, 0);
    for i in 0..eig.eigenvalues.len() {
        if eig.eigenvalues[i] < eig.eigenvalues[imin] {
            imin = i;
        }
        if eig.eigenvalues[i] > eig.eigenvalues[imax] {
            imax = i;
        }
    }
    SymSpectrum {
        min: eig.eigenvalues[imin],
        max: eig.eigenvalues[imax],
        min_vec: eig.eigenvectors.column(imin).into_owned(),
    }
}

/// `λ_min >= -1e-8 · max(λ_max, 0)`.
pub fn is_psd(m: &DMatrix<f64>) -> bool {
    if m.is_empty() {
        return true;
    }
    let s = spectrum(m);
    s.min >= -PSD_TOL * s.max.max(0.0)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    spectrum(m).min
}

/// `U_k = ∂V/∂η_k` for one group: `I` for `σ0²`, then `Z dG_k Zᵀ`.
fn variance_directions(z: &DMatrix<f64>, structure: CovStructure) -> Vec<DMatrix<f64>> {
    let m = z.nrows();
    let mut dirs = vec![DMatrix::identity(m, m)];
    dirs.extend(
        structure
            .natural_directions(z.ncols())
            .into_iter()
            .map(|dg| z * dg * z.transpose()),
    );
    dirs
}

/// Expected negative log-likelihood Hessian per group, averaged: the
/// `β` block `XᵀV⁻¹X` and the variance block `½ tr(V⁻¹U_j V⁻¹U_k)`.
pub fn mle_information_lmm(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
) -> Result<DMatrix<f64>> {
    let ws = LmmWorkspace::new(data, point, structure, None)?;
    let p = data.p();
    let nv = 1 + structure.n_params(data.q());
    let mut info = DMatrix::zeros(p + nv, p + nv);
    for (i, grp) in data.groups().iter().enumerate() {
        let f = ws.factor(i);
        let lx = f.whiten(&grp.x);
        let xb = lx.transpose() * &lx;
        let mut block = info.view_mut((0, 0), (p, p));
        block += &xb;
        let a: Vec<DMatrix<f64>> = variance_directions(&grp.z, structure)
            .iter()
            .map(|u| f.solve_mat(u))
            .collect();
        for j in 0..nv {
            for k in 0..=j {
                let t = 0.5 * a[j].component_mul(&a[k].transpose()).sum();
                info[(p + j, p + k)] += t;
                if j != k {
                    info[(p + k, p + j)] += t;
                }
            }
        }
    }
    Ok(info / data.n() as f64)
}

/// Monte-Carlo estimate of `E[∇ρ ∇ρᵀ]` with its uncertainty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpdeInformation {
    pub matrix: DMatrix<f64>,
    /// Entrywise Monte-Carlo standard errors.
    pub se: DMatrix<f64>,
    pub min_eigenvalue: f64,
    /// Delta-method standard error of the smallest eigenvalue.
    pub min_eigenvalue_se: f64,
    /// `(1/n) Σ_i α² L2² |V_i|^{-α} (1+2α)^{-(1+m/2)} X_iᵀV_i⁻¹X_i`.
    pub beta_closed_form: DMatrix<f64>,
    pub draws: usize,
}

fn normal_vec(rng: &mut ChaCha8Rng, m: usize) -> DVector<f64> {
    DVector::from_fn(m, |_, _| StandardNormal.sample(rng))
}

/// `E[∇ρ ∇ρᵀ]` for the MDPDE loss at `point`, with responses redrawn from
/// the model `mc_draws` times (design held fixed) and gradients in natural
/// coordinates, averaged over groups.
pub fn mdpde_information_lmm(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
    alpha: f64,
    mc_draws: usize,
    seed: u64,
) -> Result<MdpdeInformation> {
    let est = EstimatorSpec::mdpde(alpha)?;
    if mc_draws < 2 {
        return Err(Error::InsufficientDraws);
    }
    let base = LmmWorkspace::new(data, point, structure, Some(alpha))?;
    let (p, m, n) = (data.p(), data.m(), data.n());
    let l2 = base.l2().expect("alpha set");
    let closed_scale = alpha * alpha * l2 * l2 * (1.0 + 2.0 * alpha).powf(-(1.0 + 0.5 * m as f64));
    let mut beta_closed_form = DMatrix::zeros(p, p);
    for (i, grp) in data.groups().iter().enumerate() {
        let f = base.factor(i);
        let lx = f.whiten(&grp.x);
        beta_closed_form += lx.transpose() * &lx * (closed_scale * (-alpha * f.log_det()).exp());
    }
    beta_closed_form /= n as f64;

    let chol: Vec<DMatrix<f64>> = (0..n).map(|i| base.factor(i).l()).collect();
    let mut rng = stream(seed, n, 0, StreamRole::Diagnostics);
    let mut sim = data.clone();
    let mut samples = Vec::with_capacity(mc_draws);
    for _ in 0..mc_draws {
        for (i, grp) in sim.groups_mut().iter_mut().enumerate() {
            grp.y = &grp.x * &point.beta + &chol[i] * normal_vec(&mut rng, m);
        }
        let ws = LmmWorkspace::new(&sim, point, structure, Some(alpha))?;
        let grads = ws.group_gradients(&sim, point, structure, &est, VarianceCoords::Natural);
        let d = grads[0].len();
        let mut outer = DMatrix::zeros(d, d);
        for g in &grads {
            outer.ger(1.0, g, g, 1.0);
        }
        samples.push(outer / n as f64);
    }
    let s = mc_draws as f64;
    let d = samples[0].nrows();
    let mean = samples.iter().fold(DMatrix::zeros(d, d), |acc, a| acc + a) / s;
    let var = samples
        .iter()
        .fold(DMatrix::zeros(d, d), |acc, a| {
            let dev = a - &mean;
            acc + dev.component_mul(&dev)
        })
        / (s - 1.0);
    let se = var.map(|v| (v / s).sqrt());
    let spec = spectrum(&mean);
    let lam: Vec<f64> = samples
        .iter()
        .map(|a| (spec.min_vec.transpose() * a * &spec.min_vec)[0])
        .collect();
    let lam_mean = lam.iter().sum::<f64>() / s;
    let lam_var = lam.iter().map(|l| (l - lam_mean).powi(2)).sum::<f64>() / (s - 1.0);
    Ok(MdpdeInformation {
        matrix: mean,
        se,
        min_eigenvalue: spec.min,
        min_eigenvalue_se: (lam_var / s).sqrt(),
        beta_closed_form,
        draws: mc_draws,
    })
}

/// Every `V_i` admits a Cholesky factor and the stacked `X` has full column rank.
pub fn check_b1(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
) -> Result<AssumptionReport> {
    let g = point.g_matrix(structure, data.q())?;
    let mut failed = Vec::new();
    for (i, grp) in data.groups().iter().enumerate() {
        let v = assemble_v(&grp.z, point.sigma0_sq, &g)?;
        match CholeskyFactor::new(&v) {
            Ok(f) if !f.jittered() => {}
            _ => failed.push(i + 1),
        }
    }
    let rank = data.design_rank();
    let full = rank == data.p();
    let detail = if failed.is_empty() {
        format!("all {} covariance matrices positive definite", data.n())
    } else {
        format!("covariance not positive definite in groups {failed:?}")
    };
    Ok(AssumptionReport {
        name: "B1".into(),
        holds: full && failed.is_empty(),
        evidence: Evidence::Rank {
            rank,
            required: data.p(),
        },
        draws: 0,
        detail,
    })
}

/// `X_iᵀV_i⁻¹X_i - α X_iᵀd_i d_iᵀX_i` positive semi-definite in every group.
///
/// The matrix test is exact; `n_probe` random directions per group are
/// evaluated as an independent cross-check and reported in `detail`.
pub fn check_b3(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
    alpha: f64,
    n_probe: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("alpha must be >= 0, got {alpha}")));
    }
    let ws = LmmWorkspace::new(data, point, structure, None)?;
    let mut rng = stream(seed, data.n(), 0, StreamRole::Diagnostics);
    let (mut violations, mut probe_violations) = (0, 0);
    for (i, grp) in data.groups().iter().enumerate() {
        let f = ws.factor(i);
        let lx = f.whiten(&grp.x);
        let xd = grp.x.transpose() * ws.solved_residual(i);
        let mat = lx.transpose() * &lx - &xd * xd.transpose() * alpha;
        if !is_psd(&mat) {
            violations += 1;
        }
        let scale = spectrum(&mat).max.abs().max(f64::MIN_POSITIVE);
        for _ in 0..n_probe {
            let v = normal_vec(&mut rng, data.p()).normalize();
            if (v.transpose() * &mat * &v)[0] < -PSD_TOL * scale {
                probe_violations += 1;
            }
        }
    }
    Ok(AssumptionReport {
        name: "B3".into(),
        holds: violations == 0,
        evidence: Evidence::ViolationCount {
            violations,
            checked: data.n(),
        },
        draws: 0,
        detail: format!(
            "alpha = {alpha}; {probe_violations} of {} random directions negative",
            n_probe * data.n()
        ),
    })
}

/// Smallest `α` in `alphas` (scanned in order) at which condition B3 fails.
pub fn b3_first_violation(
    data: &GroupedDataset,
    point: &ParameterPoint,
    structure: CovStructure,
    alphas: &[f64],
) -> Result<Option<f64>> {
    for &a in alphas {
        if !check_b3(data, point, structure, a, 0, 0)?.holds {
            return Ok(Some(a));
        }
    }
    Ok(None)
}

fn check_kron_m(m: usize) -> Result<()> {
    if m > MAX_KRONECKER_M {
        return Err(Error::UnsupportedDimension(format!(
            "Kronecker checks need m <= {MAX_KRONECKER_M}, got m = {m}"
        )));
    }
    Ok(())
}

fn vec_col(a: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(a.as_slice())
}

/// Duplication matrix `D` with `vec(S) = D vech(S)` for symmetric `S`.
pub fn duplication_matrix(m: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m * m, m * (m + 1) / 2);
    let mut col = 0;
    for c in 0..m {
        for r in c..m {
            d[(r + c * m, col)] = 1.0;
            d[(c + r * m, col)] = 1.0;
            col += 1;
        }
    }
    d
}

/// `(V⁻¹ ⊗ V⁻¹) vec(V) vec(V⁻¹)ᵀ`, tested for PSD on its symmetric part.
pub fn check_b4(v: &DMatrix<f64>) -> Result<AssumptionReport> {
    let m = v.nrows();
    check_kron_m(m)?;
    let vinv = CholeskyFactor::new(v)?.solve_mat(&DMatrix::identity(m, m));
    let kron = vinv.kronecker(&vinv);
    let mat = kron * vec_col(v) * vec_col(&vinv).transpose();
    let spec = spectrum(&mat);
    Ok(AssumptionReport {
        name: "B4".into(),
        holds: spec.min >= -PSD_TOL * spec.max.max(0.0),
        evidence: Evidence::MinEigenvalue {
            value: spec.min,
            se: None,
        },
        draws: 0,
        detail: format!("symmetrized {}x{} matrix, largest eigenvalue {:e}", m * m, m * m, spec.max),
    })
}

/// Monte-Carlo `E[e^{-α rᵀV⁻¹r} (ddᵀ) ⊗ (ddᵀ)]` with `r ~ N(0, V)`, `d = V⁻¹r`.
///
/// `vec(ddᵀ)` always lies in the space of vectorized symmetric matrices, so
/// for `m >= 2` the full matrix is singular. Positive definiteness is
/// judged on that subspace (`Dᵀ M D` with the duplication matrix `D`) at
/// three standard errors; the full-space smallest eigenvalue is reported in
/// `detail`.
pub fn check_b5(
    v: &DMatrix<f64>,
    alpha: f64,
    mc_draws: usize,
    seed: u64,
) -> Result<AssumptionReport> {
    let m = v.nrows();
    check_kron_m(m)?;
    if mc_draws < 2 {
        return Err(Error::InsufficientDraws);
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("alpha must be >= 0, got {alpha}")));
    }
    let f = CholeskyFactor::new(v)?;
    let l = f.l();
    let dup = duplication_matrix(m);
    let mut rng = stream(seed, m, 0, StreamRole::Diagnostics);
    let k = dup.ncols();
    let mut samples = Vec::with_capacity(mc_draws);
    let mut full = DMatrix::zeros(m * m, m * m);
    for _ in 0..mc_draws {
        let r = &l * normal_vec(&mut rng, m);
        let d = f.solve_vec(&r);
        let w = (-alpha * r.dot(&d)).exp();
        let vd = vec_col(&(&d * d.transpose()));
        full.ger(w, &vd, &vd, 1.0);
        let h = dup.transpose() * &vd;
        samples.push((w, h));
    }
    let s = mc_draws as f64;
    full /= s;
    let mut mean = DMatrix::zeros(k, k);
    for (w, h) in &samples {
        mean.ger(*w / s, h, h, 1.0);
    }
    let spec = spectrum(&mean);
    let lam: Vec<f64> = samples
        .iter()
        .map(|(w, h)| w * h.dot(&spec.min_vec).powi(2))
        .collect();
    let lam_mean = lam.iter().sum::<f64>() / s;
    let se = (lam.iter().map(|x| (x - lam_mean).powi(2)).sum::<f64>() / (s - 1.0) / s).sqrt();
    Ok(AssumptionReport {
        name: "B5".into(),
        holds: spec.min - 3.0 * se > 0.0,
        evidence: Evidence::MinEigenvalue {
            value: spec.min,
            se: Some(se),
        },
        draws: mc_draws,
        detail: format!(
            "restricted to symmetric matrices ({k} dims); full {}x{} minimum eigenvalue {:e}",
            m * m,
            m * m,
            min_eigenvalue(&full)
        ),
    })
}

/// Marginal covariance of one group at `point`.
pub fn group_covariance(
    group: &Group,
    point: &ParameterPoint,
    structure: CovStructure,
) -> Result<DMatrix<f64>> {
    let g = point.g_matrix(structure, group.z.ncols())?;
    assemble_v(&group.z, point.sigma0_sq, &g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lmm::lmm_mle_loss;
    use crate::optimizer::finite_diff_gradient;

    fn dataset(q: usize) -> GroupedDataset {
        let groups = (0..6)
            .map(|i| {
                let m = 4;
                let x = DMatrix::from_fn(m, 2, |j, k| {
                    if k == 0 {
                        1.0
                    } else {
                        ((i * 7 + j * 3) % 5) as f64 * 0.5 - 1.0
                    }
                });
                let z = x.columns(0, q).into_owned();
                let y = DVector::from_fn(m, |j, _| 1.0 + x[(j, 1)] + ((i + j) % 3) as f64 * 0.3);
                Group { y, x, z }
            })
            .collect();
        GroupedDataset::new(groups).unwrap()
    }

    #[test]
    fn homoscedastic_beta_block() {
        let data = dataset(0);
        let pt = ParameterPoint::new(vec![1.0, 1.0], 0.5, vec![]);
        let info = mle_information_lmm(&data, &pt, CovStructure::DiagonalG).unwrap();
        let x = data.stacked_x();
        let expect = x.transpose() * &x / (0.5 * data.n() as f64);
        assert!((info.view((0, 0), (2, 2)) - expect).amax() < 1e-12);
        // ½ m / σ⁴ for the residual variance
        assert!((info[(2, 2)] - 0.5 * 4.0 / 0.25).abs() < 1e-12);
    }

    #[test]
    fn beta_block_is_loss_hessian() {
        let data = dataset(2);
        let pt = ParameterPoint::new(vec![0.8, 1.2], 0.4, vec![0.3, 0.2]);
        let info = mle_information_lmm(&data, &pt, CovStructure::DiagonalG).unwrap();
        let grad = |b: &DVector<f64>| {
            let mut q = pt.clone();
            q.beta = b.clone();
            crate::lmm::lmm_mle_score_beta(&data, &q, CovStructure::DiagonalG)
        };
        let mut hess = DMatrix::zeros(2, 2);
        for k in 0..2 {
            let col = finite_diff_gradient(|b| Ok(grad(b)?[k]), &pt.beta, 1e-5).unwrap();
            hess.set_row(k, &col.transpose());
        }
        let block = info.view((0, 0), (2, 2)).into_owned();
        let rel = (&hess - &block).norm() / block.norm();
        assert!(rel < 1e-4, "{hess} vs {block}");
        assert!(min_eigenvalue(&info) > 0.0);
        // loss is finite at the same point
        assert!(lmm_mle_loss(&data, &pt, CovStructure::DiagonalG).unwrap().is_finite());
    }

    #[test]
    fn b1_cases() {
        let data = dataset(1);
        let pt = ParameterPoint::new(vec![1.0, 1.0], 1.0, vec![0.5]);
        assert!(check_b1(&data, &pt, CovStructure::DiagonalG).unwrap().holds);
        let groups = data
            .groups()
            .iter()
            .map(|g| {
                let mut x = g.x.clone();
                let c = x.column(0).into_owned();
                x.set_column(1, &c);
                Group { x, ..g.clone() }
            })
            .collect();
        let dup = GroupedDataset::new(groups).unwrap();
        let rep = check_b1(&dup, &pt, CovStructure::DiagonalG).unwrap();
        assert!(!rep.holds);
        assert_eq!(rep.evidence, Evidence::Rank { rank: 1, required: 2 });
    }

    #[test]
    fn b3_cases() {
        let data = dataset(1);
        let pt = ParameterPoint::new(vec![1.0, 1.0], 1.0, vec![0.5]);
        assert!(check_b3(&data, &pt, CovStructure::DiagonalG, 0.0, 5, 1).unwrap().holds);
        let groups = data
            .groups()
            .iter()
            .map(|g| Group {
                y: &g.x * DVector::from_vec(vec![1.0, 1.0]),
                ..g.clone()
            })
            .collect();
        let exact = GroupedDataset::new(groups).unwrap();
        assert!(check_b3(&exact, &pt, CovStructure::DiagonalG, 5.0, 5, 1).unwrap().holds);
        let groups = data
            .groups()
            .iter()
            .map(|g| Group {
                y: g.y.add_scalar(40.0),
                ..g.clone()
            })
            .collect();
        let far = GroupedDataset::new(groups).unwrap();
        let rep = check_b3(&far, &pt, CovStructure::DiagonalG, 1.0, 5, 1).unwrap();
        assert!(!rep.holds);
        assert!(matches!(rep.evidence, Evidence::ViolationCount { violations, .. } if violations > 0));
        let first = b3_first_violation(&far, &pt, CovStructure::DiagonalG, &[0.0, 1e-6, 1e-3, 1.0]).unwrap();
        assert!(first.is_some());
    }

    #[test]
    fn b4_cases() {
        let rep = check_b4(&DMatrix::identity(3, 3)).unwrap();
        assert!(rep.holds);
        let rep = check_b4(&DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0]))).unwrap();
        assert!(rep.holds);
        let rep = check_b4(&DMatrix::from_element(1, 1, 2.0)).unwrap();
        assert!(matches!(rep.evidence, Evidence::MinEigenvalue { value, .. } if (value - 0.25).abs() < 1e-14));
        assert!(check_b4(&DMatrix::identity(7, 7)).is_err());
    }

    #[test]
    fn b5_scalar_matches_quadrature() {
        // E[e^{-α z²} z⁴] / V² with z standard normal
        let (alpha, v) = (0.5, 2.0);
        let h = 1e-3;
        let mut integral = 0.0;
        let mut z = -12.0f64;
        while z <= 12.0 {
            integral += (-alpha * z * z).exp() * z.powi(4) * (-0.5 * z * z).exp() * h;
            z += h;
        }
        let expect = integral / (2.0 * std::f64::consts::PI).sqrt() / (v * v);
        let rep = check_b5(&DMatrix::from_element(1, 1, v), alpha, 40_000, 5).unwrap();
        match rep.evidence {
            Evidence::MinEigenvalue { value, se: Some(se) } => {
                assert!((value - expect).abs() < 4.0 * se, "{value} vs {expect} ± {se}");
            }
            other => panic!("{other:?}"),
        }
        assert!(rep.holds);
    }

    #[test]
    fn b5_identity_and_errors() {
        let rep = check_b5(&DMatrix::identity(3, 3), 0.5, 4000, 9).unwrap();
        assert!(rep.holds, "{rep:?}");
        assert!(matches!(
            check_b5(&DMatrix::identity(2, 2), 0.5, 0, 1),
            Err(Error::InsufficientDraws)
        ));
        assert!(check_b5(&DMatrix::identity(7, 7), 0.5, 10, 1).is_err());
    }

    #[test]
    fn duplication_matrix_maps_vech() {
        let s = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 5.0, 3.0, 5.0, 6.0]);
        let vech = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(duplication_matrix(3) * vech, vec_col(&s));
    }
}
