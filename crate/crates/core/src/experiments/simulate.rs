//! Counter-based random streams, data simulation and contamination.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Family, Group, GroupedDataset};

use super::SimConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamRole {
    Design = 1,
    RandomEffect = 2,
    Noise = 3,
    Contamination = 4,
    Diagnostics = 5,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, n, replication, role)`.
///
/// The ChaCha key comes from `seed`; the stream id is a hash of the other
/// coordinates, so any stream can be produced without touching the others.
pub fn stream(seed: u64, n: usize, replication: usize, role: StreamRole) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let id = splitmix64(splitmix64(splitmix64(n as u64) ^ replication as u64) ^ role as u64);
    rng.set_stream(id);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Intercept plus standard-normal covariates; `Z` is the first `q` columns.
fn design(config: &SimConfig, n: usize, replication: usize) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    let (m, p, q) = (config.model.m, config.model.p, config.model.q);
    let mut rng = stream(config.seed, n, replication, StreamRole::Design);
    (0..n)
        .map(|_| {
            let mut x = DMatrix::zeros(m, p);
            for j in 0..m {
                x[(j, 0)] = 1.0;
                for k in 1..p {
                    x[(j, k)] = normal(&mut rng);
                }
            }
            let z = x.columns(0, q).into_owned();
            (x, z)
        })
        .collect()
}

fn random_effects(config: &SimConfig, n: usize, replication: usize) -> Vec<DVector<f64>> {
    let q = config.model.q;
    let sd = config.sigma_u_sq.sqrt();
    let mut rng = stream(config.seed, n, replication, StreamRole::RandomEffect);
    (0..n)
        .map(|_| DVector::from_fn(q, |_, _| sd * normal(&mut rng)))
        .collect()
}

/// `y = Xβ₀ + Zu + ε` with `u ~ N(0, σ_u² I)` and `ε ~ N(0, σ² I)`.
pub fn simulate_lmm(config: &SimConfig, n: usize, replication: usize) -> Result<GroupedDataset> {
    config.validate()?;
    if config.model.family != Family::GaussianIdentity {
        return Err(Error::InvalidInput("simulate_lmm needs the gaussian family".into()));
    }
    let beta = DVector::from_column_slice(&config.beta0);
    let sd = config.sigma0_sq.sqrt();
    let mut noise = stream(config.seed, n, replication, StreamRole::Noise);
    let groups = design(config, n, replication)
        .into_iter()
        .zip(random_effects(config, n, replication))
        .map(|((x, z), u)| {
            let mut y = &x * &beta + &z * &u;
            for v in y.iter_mut() {
                *v += sd * normal(&mut noise);
            }
            Group { y, x, z }
        })
        .collect();
    GroupedDataset::new(groups)
}

/// `y_ij ~ Bernoulli(logistic(x_ijᵀβ₀ + z_ijᵀu_i))`.
pub fn simulate_logistic(config: &SimConfig, n: usize, replication: usize) -> Result<GroupedDataset> {
    config.validate()?;
    if config.model.family != Family::BernoulliLogit {
        return Err(Error::InvalidInput(
            "simulate_logistic needs the bernoulli-logit family".into(),
        ));
    }
    let beta = DVector::from_column_slice(&config.beta0);
    let mut noise = stream(config.seed, n, replication, StreamRole::Noise);
    let groups = design(config, n, replication)
        .into_iter()
        .zip(random_effects(config, n, replication))
        .map(|((x, z), u)| {
            let s = &x * &beta + &z * &u;
            let y = s.map(|s| {
                let p = 1.0 / (1.0 + (-s).exp());
                let draw: f64 = noise.random();
                if draw < p {
                    1.0
                } else {
                    0.0
                }
            });
            Group { y, x, z }
        })
        .collect();
    GroupedDataset::new(groups)
}

/// Dispatch on the configured family.
pub fn simulate(config: &SimConfig, n: usize, replication: usize) -> Result<GroupedDataset> {
    match config.model.family {
        Family::GaussianIdentity => simulate_lmm(config, n, replication),
        Family::BernoulliLogit => simulate_logistic(config, n, replication),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContaminationTarget {
    Response,
    Leverage,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contamination {
    pub fraction: f64,
    pub shift: f64,
    pub target: ContaminationTarget,
}

impl Contamination {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(Error::InvalidInput(format!(
                "contamination fraction must be in [0, 1), got {}",
                self.fraction
            )));
        }
        if !self.shift.is_finite() {
            return Err(Error::InvalidInput("contamination shift must be finite".into()));
        }
        Ok(())
    }

    pub fn n_contaminated(&self, n: usize) -> usize {
        // guard against 0.1 * 100 = 10.000000000000002
        let raw = self.fraction * n as f64;
        let k = (raw - 1e-9 * raw.max(1.0)).ceil().max(0.0) as usize;
        k.min(n)
    }
}

/// Corrupt `⌈fraction·n⌉` groups chosen by `rng`.
///
/// `Response` adds `shift` to every response of a chosen group (binary
/// responses are flipped instead); `Leverage` multiplies the non-intercept
/// columns of `X` by `1 + shift`. Random-effect design columns that mirror
/// `X` are left untouched.
pub fn contaminate(
    data: &GroupedDataset,
    contamination: &Contamination,
    rng: &mut ChaCha8Rng,
) -> Result<GroupedDataset> {
    contamination.validate()?;
    let k = contamination.n_contaminated(data.n());
    let mut out = data.clone();
    if k == 0 {
        return Ok(out);
    }
    let mut idx: Vec<usize> = (0..data.n()).collect();
    idx.shuffle(rng);
    let binary = data
        .groups()
        .iter()
        .all(|g| g.y.iter().all(|y| *y == 0.0 || *y == 1.0));
    let groups = out.groups_mut();
    for &i in &idx[..k] {
        let g = &mut groups[i];
        match contamination.target {
            ContaminationTarget::Response if binary => g.y.apply(|y| *y = 1.0 - *y),
            ContaminationTarget::Response => g.y.add_scalar_mut(contamination.shift),
            ContaminationTarget::Leverage => {
                for j in 0..g.x.nrows() {
                    for c in 1..g.x.ncols() {
                        g.x[(j, c)] *= 1.0 + contamination.shift;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Simulated data for one replication, contaminated when configured.
pub fn replication_dataset(config: &SimConfig, n: usize, replication: usize) -> Result<GroupedDataset> {
    let data = simulate(config, n, replication)?;
    match &config.contamination {
        Some(c) => {
            let mut rng = stream(config.seed, n, replication, StreamRole::Contamination);
            contaminate(&data, c, &mut rng)
        }
        None => Ok(data),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_distinct_and_reproducible() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, 10, 0, StreamRole::Noise), |r, _| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, 10, 0, StreamRole::Noise), |r, _| Some(r.random())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, 10, 1, StreamRole::Noise), |r, _| Some(r.random())).collect();
        let d: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, 10, 0, StreamRole::Design), |r, _| Some(r.random())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn ceil_count() {
        let c = Contamination {
            fraction: 0.1,
            shift: 10.0,
            target: ContaminationTarget::Response,
        };
        assert_eq!(c.n_contaminated(100), 10);
        assert_eq!(c.n_contaminated(25), 3);
        assert_eq!(c.n_contaminated(1), 1);
    }
}
