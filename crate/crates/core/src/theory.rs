//! Numerical check of the OOD generalization bound on linear-Gaussian
//! additive-noise models, where `x = A v + sigma_mu * mu` and `y = h . v + eps`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derived_rng;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianInstance {
    pub a: DMatrix<f64>,
    pub h: DVector<f64>,
    pub sigma_mu: f64,
    pub sigma_eps: f64,
}

impl LinearGaussianInstance {
    pub fn new(a: DMatrix<f64>, h: DVector<f64>, sigma_mu: f64, sigma_eps: f64) -> Result<Self> {
        let inst = Self {
            a,
            h,
            sigma_mu,
            sigma_eps,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn dim_v(&self) -> usize {
        self.h.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.h.len();
        if d == 0 || self.a.shape() != (d, d) {
            return Err(Error::shape("A must be square with the width of h"));
        }
        if self.a.determinant().abs() <= 1e-8 {
            return Err(Error::validation("A is numerically singular"));
        }
        if self.h.iter().all(|&v| v == 0.0) {
            return Err(Error::validation("h must be nonzero"));
        }
        if !(self.sigma_mu >= 0.0 && self.sigma_eps >= 0.0) {
            return Err(Error::validation("noise scales must be nonnegative"));
        }
        Ok(())
    }

    fn inverse(&self) -> Result<DMatrix<f64>> {
        self.a
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::numeric("theory", "A is not invertible"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientPrior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl ClientPrior {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(Error::shape("prior covariance does not match the mean"));
        }
        if cov.clone().cholesky().is_none() {
            return Err(Error::numeric("prior", "covariance is not positive definite"));
        }
        Ok(Self { mean, cov })
    }

    pub fn isotropic(mean: DVector<f64>, var: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, DMatrix::identity(d, d) * var)
    }

    fn precision(&self) -> Result<DMatrix<f64>> {
        self.cov
            .clone()
            .cholesky()
            .map(|c| c.inverse())
            .ok_or_else(|| Error::numeric("prior", "covariance is not positive definite"))
    }

    /// `log p(v)`.
    pub fn log_density(&self, v: &DVector<f64>) -> Result<f64> {
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::numeric("prior", "covariance is not positive definite"))?;
        let d = v - &self.mean;
        let quad = d.dot(&chol.solve(&d));
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        Ok(-0.5 * (quad + log_det + self.mean.len() as f64 * (2.0 * std::f64::consts::PI).ln()))
    }

    /// `grad_v log p(v) = -cov^{-1} (v - mean)`.
    pub fn score(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(-(self.precision()? * (v - &self.mean)))
    }
}

/// `x -> E[y | x]` as an affine map `offset + gain . x`.
struct PosteriorMap {
    offset: f64,
    gain: DVector<f64>,
}

impl PosteriorMap {
    fn new(inst: &LinearGaussianInstance, prior: &ClientPrior) -> Result<Self> {
        let d = inst.dim_v();
        if prior.mean.len() != d {
            return Err(Error::shape("prior dimension does not match the instance"));
        }
        if inst.sigma_mu == 0.0 {
            let inv = inst.inverse()?;
            return Ok(Self {
                offset: 0.0,
                gain: inv.transpose() * &inst.h,
            });
        }
        // m(x) = mu + P A^T S^{-1} (x - A mu),  S = A P A^T + sigma^2 I
        let s = &inst.a * &prior.cov * inst.a.transpose() + DMatrix::identity(d, d) * inst.sigma_mu.powi(2);
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::numeric("posterior", "marginal covariance is singular"))?;
        let k_t_h = chol.solve(&(&inst.a * &prior.cov * &inst.h));
        let offset = inst.h.dot(&prior.mean) - k_t_h.dot(&(&inst.a * &prior.mean));
        Ok(Self { offset, gain: k_t_h })
    }

    fn eval(&self, x: &DVector<f64>) -> f64 {
        self.offset + self.gain.dot(x)
    }
}

/// `E[y | x] = h . E[v | x]` under prior `p(v) = N(mean, cov)`.
pub fn posterior_mean_y(inst: &LinearGaussianInstance, prior: &ClientPrior, x: &DVector<f64>) -> Result<f64> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("x must be finite"));
    }
    if x.len() != inst.dim_v() {
        return Err(Error::shape("x has the wrong dimension"));
    }
    if inst.sigma_mu == 0.0 {
        let v = inst
            .a
            .clone()
            .lu()
            .solve(x)
            .ok_or_else(|| Error::numeric("posterior", "A is not invertible"))?;
        return Ok(inst.h.dot(&v));
    }
    Ok(PosteriorMap::new(inst, prior)?.eval(x))
}

fn check_weights(priors: &[ClientPrior], weights: &[f64]) -> Result<()> {
    if priors.is_empty() || priors.len() != weights.len() {
        return Err(Error::validation("one weight per client prior is required"));
    }
    if (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::validation("client weights must sum to 1"));
    }
    Ok(())
}

/// Mean over `x_samples` of `|sum_k w_k E_k[y|x] - E~[y|x]|` and its
/// Monte-Carlo standard error.
pub fn lhs_gap(
    inst: &LinearGaussianInstance,
    priors: &[ClientPrior],
    weights: &[f64],
    ood: &ClientPrior,
    x_samples: &[DVector<f64>],
) -> Result<(f64, f64)> {
    check_weights(priors, weights)?;
    if x_samples.is_empty() {
        return Err(Error::validation("lhs_gap needs samples"));
    }
    let maps: Vec<PosteriorMap> = priors.iter().map(|p| PosteriorMap::new(inst, p)).collect::<Result<_>>()?;
    let target = PosteriorMap::new(inst, ood)?;
    let gaps: Vec<f64> = x_samples
        .iter()
        .map(|x| {
            // weights sum to one, so the mixture gap is a weighted sum of differences
            let t = target.eval(x);
            let g: f64 = maps.iter().zip(weights).map(|(m, w)| w * (m.eval(x) - t)).sum();
            g.abs()
        })
        .collect();
    Ok(mean_and_se(&gaps))
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `sigma_mu^2 * mean_x |grad_x sum_k w_k log(p_k / p~)(A^{-1} x)| * |A^{-1}|_2 * |h|_2`.
///
/// The gradient is with respect to `x`, i.e. `A^{-T}` applied to the score
/// difference in `v`.
pub fn rhs_bound(
    inst: &LinearGaussianInstance,
    priors: &[ClientPrior],
    weights: &[f64],
    ood: &ClientPrior,
    x_samples: &[DVector<f64>],
) -> Result<f64> {
    check_weights(priors, weights)?;
    if x_samples.is_empty() {
        return Err(Error::validation("rhs_bound needs samples"));
    }
    if inst.sigma_mu == 0.0 {
        return Ok(0.0);
    }
    let inv = inst.inverse()?;
    let inv_t = inv.transpose();
    let spectral = inv.singular_values().max();
    let precisions: Vec<DMatrix<f64>> = priors.iter().map(ClientPrior::precision).collect::<Result<_>>()?;
    let ood_precision = ood.precision()?;
    let mut total = 0.0;
    for x in x_samples {
        let v = &inv * x;
        let ood_term = &ood_precision * (&v - &ood.mean);
        let mut g = DVector::zeros(v.len());
        for ((p, prec), w) in priors.iter().zip(&precisions).zip(weights) {
            // per-client difference, so identical priors give exactly zero
            g += (&ood_term - prec * (&v - &p.mean)) * *w;
        }
        total += (&inv_t * g).norm();
    }
    Ok(inst.sigma_mu.powi(2) * total / x_samples.len() as f64 * spectral * inst.h.norm())
}

/// Draws `x = A v + sigma_mu * mu` with `v ~ prior` from fixed standard
/// normals, so the same `(v, mu)` draws can be reused across noise levels.
pub fn sample_x(inst: &LinearGaussianInstance, prior: &ClientPrior, draws: &[(DVector<f64>, DVector<f64>)]) -> Result<Vec<DVector<f64>>> {
    let l = prior
        .cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::numeric("prior", "covariance is not positive definite"))?
        .l();
    Ok(draws
        .iter()
        .map(|(u, mu)| {
            let v = &prior.mean + &l * u;
            &inst.a * v + mu * inst.sigma_mu
        })
        .collect())
}

/// A linear map, label direction, OOD prior and per-client unit shift
/// directions. Client `k`'s prior is the OOD prior shifted by `gap * dir_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceFamily {
    pub a: DMatrix<f64>,
    pub h: DVector<f64>,
    pub sigma_eps: f64,
    pub ood_prior: ClientPrior,
    pub directions: Vec<DVector<f64>>,
    pub weights: Vec<f64>,
}

impl InstanceFamily {
    /// One client, scalar `v`, unit prior variance, `A = a`, `h = 1`.
    pub fn scalar(a: f64) -> Result<Self> {
        Ok(Self {
            a: DMatrix::from_element(1, 1, a),
            h: DVector::from_element(1, 1.0),
            sigma_eps: 0.1,
            ood_prior: ClientPrior::isotropic(DVector::zeros(1), 1.0)?,
            directions: vec![DVector::from_element(1, 1.0)],
            weights: vec![1.0],
        })
    }

    /// `A = Q D` with `Q` orthogonal and `D` diagonal in `[0.5, 2]`, a random
    /// unit-norm `h`, a standard-normal OOD prior and random unit shift
    /// directions with equal client weights.
    pub fn random(dim_v: usize, num_clients: usize, seed: u64) -> Result<Self> {
        if dim_v == 0 || num_clients == 0 {
            return Err(Error::validation("dim_v and num_clients must be positive"));
        }
        let mut rng = derived_rng(seed, "instance-family", &[]);
        let mut gauss = |d: usize| -> DVector<f64> {
            loop {
                let v = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                if v.norm() > 1e-3 {
                    return v.normalize();
                }
            }
        };
        let g = DMatrix::from_columns(&(0..dim_v).map(|_| gauss(dim_v)).collect::<Vec<_>>());
        let q = g.qr().q();
        let h = gauss(dim_v);
        let directions = (0..num_clients).map(|_| gauss(dim_v)).collect();
        let mut rng = derived_rng(seed, "instance-scales", &[]);
        let d = DMatrix::from_diagonal(&DVector::from_fn(dim_v, |_, _| rng.random_range(0.5..2.0)));
        Ok(Self {
            a: q * d,
            h,
            sigma_eps: 0.1,
            ood_prior: ClientPrior::isotropic(DVector::zeros(dim_v), 1.0)?,
            directions,
            weights: vec![1.0 / num_clients as f64; num_clients],
        })
    }

    pub fn client_priors(&self, gap: f64) -> Vec<ClientPrior> {
        self.directions
            .iter()
            .map(|d| ClientPrior {
                mean: &self.ood_prior.mean + d * gap,
                cov: self.ood_prior.cov.clone(),
            })
            .collect()
    }

    pub fn instance(&self, sigma_mu: f64) -> Result<LinearGaussianInstance> {
        LinearGaussianInstance::new(self.a.clone(), self.h.clone(), sigma_mu, self.sigma_eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundRow {
    pub sigma_mu: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub mc_std_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub prior_gap: f64,
    pub rows: Vec<BoundRow>,
    /// Per row: `Some(lhs <= rhs + 3 se)` inside the small regime, `None`
    /// outside it.
    pub check_a: Vec<Option<bool>>,
    /// Log-log slope of lhs against sigma over `[0.01, 0.1]`, when at least
    /// two positive grid points fall there.
    pub slope: Option<f64>,
    pub check_b: Option<bool>,
}

pub const SMALL_SIGMA: f64 = 0.1;
pub const SMALL_GAP: f64 = 0.2;
pub const SLOPE_RANGE: (f64, f64) = (1.7, 2.3);

impl BoundReport {
    pub fn all_small_regime_checks_pass(&self) -> bool {
        self.check_a.iter().all(|c| c.unwrap_or(true))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sigma_mu,lhs,rhs,mc_std_error,check_a,check_b\n");
        let b = self.check_b.map_or("na".to_string(), |v| v.to_string());
        for (r, a) in self.rows.iter().zip(&self.check_a) {
            let a = a.map_or("na".to_string(), |v| v.to_string());
            let _ = writeln!(out, "{},{},{},{},{a},{b}", r.sigma_mu, r.lhs, r.rhs, r.mc_std_error);
        }
        out
    }
}

/// Least-squares slope of `log lhs` on `log sigma` over rows with sigma in
/// `[0.01, 0.1]` and positive lhs.
pub fn loglog_slope(rows: &[BoundRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.sigma_mu >= 0.01 - 1e-12 && r.sigma_mu <= 0.1 + 1e-12 && r.lhs > 0.0)
        .map(|r| (r.sigma_mu.ln(), r.lhs.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

/// Evaluates both sides at every grid noise level, sampling `num_x` points
/// from the OOD marginal with the same underlying draws at every level.
pub fn verify_bound(family: &InstanceFamily, sigma_grid: &[f64], prior_gap: f64, num_x: usize, seed: u64) -> Result<BoundReport> {
    if sigma_grid.is_empty() {
        return Err(Error::validation("sigma grid is empty"));
    }
    if num_x == 0 {
        return Err(Error::validation("num_x must be positive"));
    }
    let d = family.h.len();
    let mut rng = derived_rng(seed, "bound-samples", &[]);
    let draws: Vec<(DVector<f64>, DVector<f64>)> = (0..num_x)
        .map(|_| {
            let u = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
            let mu = DVector::from_fn(d, |_, _| rng.sample(StandardNormal));
            (u, mu)
        })
        .collect();
    let priors = family.client_priors(prior_gap);
    let mut rows = Vec::with_capacity(sigma_grid.len());
    for &sigma in sigma_grid {
        let inst = family.instance(sigma)?;
        let xs = sample_x(&inst, &family.ood_prior, &draws)?;
        let (lhs, se) = lhs_gap(&inst, &priors, &family.weights, &family.ood_prior, &xs)?;
        let rhs = rhs_bound(&inst, &priors, &family.weights, &family.ood_prior, &xs)?;
        rows.push(BoundRow {
            sigma_mu: sigma,
            lhs,
            rhs,
            mc_std_error: se,
        });
    }
    let small_gap = prior_gap.abs() <= SMALL_GAP + 1e-12;
    let check_a = rows
        .iter()
        .map(|r| (small_gap && r.sigma_mu <= SMALL_SIGMA + 1e-12).then(|| r.lhs <= r.rhs + 3.0 * r.mc_std_error))
        .collect();
    let slope = loglog_slope(&rows);
    Ok(BoundReport {
        prior_gap,
        rows,
        check_a,
        slope,
        check_b: slope.map(|s| (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&s)),
    })
}

#[cfg(test)]
mod tests;
