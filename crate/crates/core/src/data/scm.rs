//! Structural causal model generator.
//!
//! Sampling pathway per example:
//!
//! ```text
//! y ~ Uniform{0..K}          c ~ N(mean_y, I)
//! z ~ N(style_mean + shift, I)
//! s = c + weak_link * tanh(B z)
//! x_s = G s + noise          x_z = Q z + noise
//! x = f(x_s, x_z)            f(u) = L2 * act(L1 * u), act(t) = t + tanh(t) / 2
//! ```
//!
//! `L1` and `L2` are scaled orthogonal matrices and `act` is strictly
//! increasing, so `f` is a bijection with an explicit inverse. The rows of
//! `Q` sum to one, so shifting `z` by a constant shifts every coordinate of
//! `x_z` by the same constant.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DistributionTag, LabeledDataset, OOD_LABEL};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, rng_from_seed, Rng};
use crate::tensor::Matrix;

/// Standard deviation of every class component of `p(c | y)`.
pub const COMPONENT_STD: f64 = 1.0;

/// Minimum distance, in component standard deviations, between any
/// semantic-shift component mean and any training component mean.
const OOD_MIN_SEPARATION: f64 = 4.5;

fn default_class_separation() -> f64 {
    3.0
}

fn default_weak_link() -> f64 {
    0.02
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmSpec {
    pub dim_c: usize,
    pub dim_z: usize,
    pub dim_x: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
    pub style_prior_mean: Vec<f64>,
    pub mixing_seed: u64,
    /// Distance from the origin of each class mean of `p(c | y)`.
    #[serde(default = "default_class_separation")]
    pub class_separation: f64,
    /// Strength of the `z -> s` contribution.
    #[serde(default = "default_weak_link")]
    pub weak_link: f64,
}

impl ScmSpec {
    pub fn new(dim_c: usize, dim_z: usize, dim_x: usize, num_classes: usize) -> Self {
        Self {
            dim_c,
            dim_z,
            dim_x,
            num_classes,
            noise_sigma: 0.1,
            style_prior_mean: vec![0.0; dim_z],
            mixing_seed: 0,
            class_separation: default_class_separation(),
            weak_link: default_weak_link(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_c == 0 || self.dim_z == 0 || self.dim_x == 0 || self.num_classes == 0 {
            return Err(Error::validation("scm dimensions and class count must be positive"));
        }
        if self.dim_x % 2 != 0 {
            return Err(Error::validation(format!("dim_x = {} must be even", self.dim_x)));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::validation("noise_sigma must be finite and non-negative"));
        }
        if self.style_prior_mean.len() != self.dim_z {
            return Err(Error::validation(format!(
                "style_prior_mean has length {}, expected dim_z = {}",
                self.style_prior_mean.len(),
                self.dim_z
            )));
        }
        if self.style_prior_mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("style_prior_mean must be finite"));
        }
        if !self.class_separation.is_finite() || self.class_separation <= 0.0 {
            return Err(Error::validation("class_separation must be finite and positive"));
        }
        if !self.weak_link.is_finite() {
            return Err(Error::validation("weak_link must be finite"));
        }
        Ok(())
    }

    /// Stable fingerprint used in dataset provenance.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        format!("{:016x}", crate::rng::derive_seed(0, &json, &[]))
    }
}

fn act(t: f64) -> f64 {
    t + 0.5 * t.tanh()
}

fn act_inv(a: f64) -> f64 {
    let mut t = a / 1.25;
    for _ in 0..60 {
        let th = t.tanh();
        let step = (t + 0.5 * th - a) / (1.0 + 0.5 * (1.0 - th * th));
        t -= step;
        if step.abs() <= 1e-15 * (1.0 + t.abs()) {
            break;
        }
    }
    t
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Orthogonal matrix times a diagonal with entries in `[0.8, 1.25]`,
/// returned together with its exact inverse.
fn scaled_orthogonal(n: usize, rng: &mut Rng) -> (DMatrix<f64>, DMatrix<f64>) {
    let q = gaussian_matrix(n, n, rng).qr().q();
    let scales: Vec<f64> = (0..n).map(|_| rng.random_range(0.8..1.25)).collect();
    let d = DMatrix::from_diagonal(&DVector::from_vec(scales.clone()));
    let d_inv = DMatrix::from_diagonal(&DVector::from_vec(scales.iter().map(|s| 1.0 / s).collect()));
    (&q * &d, &d_inv * q.transpose())
}

/// The bijective mixing map `f`.
#[derive(Clone, Debug)]
pub struct InvertibleMixing {
    first: DMatrix<f64>,
    first_inv: DMatrix<f64>,
    second: DMatrix<f64>,
    second_inv: DMatrix<f64>,
}

impl InvertibleMixing {
    fn new(dim: usize, rng: &mut Rng) -> Self {
        let (first, first_inv) = scaled_orthogonal(dim, rng);
        let (second, second_inv) = scaled_orthogonal(dim, rng);
        Self {
            first,
            first_inv,
            second,
            second_inv,
        }
    }

    pub fn dim(&self) -> usize {
        self.first.nrows()
    }

    pub fn forward(&self, u: &[f64]) -> Vec<f64> {
        let h = (&self.first * DVector::from_column_slice(u)).map(act);
        (&self.second * h).as_slice().to_vec()
    }

    pub fn inverse(&self, x: &[f64]) -> Vec<f64> {
        let a = (&self.second_inv * DVector::from_column_slice(x)).map(act_inv);
        (&self.first_inv * a).as_slice().to_vec()
    }

    /// Determinants of the two linear layers.
    pub fn layer_determinants(&self) -> (f64, f64) {
        (self.first.determinant(), self.second.determinant())
    }
}

/// Every fixed function of the generator, built deterministically from
/// `mixing_seed`.
#[derive(Clone, Debug)]
pub struct ScmMechanism {
    spec: ScmSpec,
    class_means: Vec<Vec<f64>>,
    ood_means: Vec<Vec<f64>>,
    weak_map: DMatrix<f64>,
    semantic_map: DMatrix<f64>,
    style_map: DMatrix<f64>,
    mixing: InvertibleMixing,
}

fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

impl ScmMechanism {
    pub fn new(spec: &ScmSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = derived_rng(spec.mixing_seed, "scm-mechanism", &[]);
        let half = spec.dim_x / 2;

        let class_means = if spec.num_classes <= spec.dim_c {
            let q = gaussian_matrix(spec.dim_c, spec.dim_c, &mut rng).qr().q();
            (0..spec.num_classes)
                .map(|j| q.column(j).iter().map(|v| v * spec.class_separation).collect())
                .collect()
        } else {
            (0..spec.num_classes)
                .map(|_| {
                    unit_vector(spec.dim_c, &mut rng)
                        .into_iter()
                        .map(|v| v * spec.class_separation)
                        .collect()
                })
                .collect::<Vec<Vec<f64>>>()
        };

        let min_sep = OOD_MIN_SEPARATION * COMPONENT_STD;
        let mut ood_means = Vec::with_capacity(spec.num_classes);
        let mut radius = spec.class_separation + min_sep + 0.5;
        while ood_means.len() < spec.num_classes {
            let mut placed = false;
            for _ in 0..2000 {
                let candidate: Vec<f64> = unit_vector(spec.dim_c, &mut rng)
                    .into_iter()
                    .map(|v| v * radius)
                    .collect();
                if class_means.iter().all(|m| distance(m, &candidate) > min_sep) {
                    ood_means.push(candidate);
                    placed = true;
                    break;
                }
            }
            if !placed {
                radius += 1.0;
            }
        }

        let mut weak_map = gaussian_matrix(spec.dim_c, spec.dim_z, &mut rng);
        for mut row in weak_map.row_iter_mut() {
            let norm = row.norm().max(1e-12);
            row /= norm;
        }
        let semantic_map = gaussian_matrix(half, spec.dim_c, &mut rng) / (spec.dim_c as f64).sqrt();
        let mut style_map = DMatrix::from_fn(half, spec.dim_z, |_, _| rng.random_range(0.1..1.0));
        for mut row in style_map.row_iter_mut() {
            let total = row.sum();
            row /= total;
        }
        let mixing = InvertibleMixing::new(spec.dim_x, &mut rng);

        Ok(Self {
            spec: spec.clone(),
            class_means,
            ood_means,
            weak_map,
            semantic_map,
            style_map,
            mixing,
        })
    }

    pub fn spec(&self) -> &ScmSpec {
        &self.spec
    }

    pub fn class_means(&self) -> &[Vec<f64>] {
        &self.class_means
    }

    pub fn ood_means(&self) -> &[Vec<f64>] {
        &self.ood_means
    }

    pub fn mixing(&self) -> &InvertibleMixing {
        &self.mixing
    }

    /// `s = c + weak_link * tanh(B z)`.
    pub fn semantic(&self, c: &[f64], z: &[f64]) -> Vec<f64> {
        let bz = &self.weak_map * DVector::from_column_slice(z);
        c.iter()
            .zip(bz.iter())
            .map(|(ci, b)| ci + self.spec.weak_link * b.tanh())
            .collect()
    }

    pub fn invariant_features(&self, s: &[f64]) -> Vec<f64> {
        (&self.semantic_map * DVector::from_column_slice(s)).as_slice().to_vec()
    }

    pub fn variant_features(&self, z: &[f64]) -> Vec<f64> {
        (&self.style_map * DVector::from_column_slice(z)).as_slice().to_vec()
    }

    fn sample_rows(
        &self,
        n: usize,
        env_shift: &[f64],
        component_means: &[Vec<f64>],
        rng: &mut Rng,
    ) -> (Vec<f32>, Vec<usize>, Matrix) {
        let spec = &self.spec;
        let mut features = Vec::with_capacity(n * spec.dim_x);
        let mut components = Vec::with_capacity(n);
        let mut pre_mix = Matrix::zeros(n, spec.dim_x);
        for i in 0..n {
            let y = rng.random_range(0..component_means.len());
            let c: Vec<f64> = component_means[y]
                .iter()
                .map(|m| m + COMPONENT_STD * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let z: Vec<f64> = spec
                .style_prior_mean
                .iter()
                .zip(env_shift)
                .map(|(m, d)| m + d + rng.sample::<f64, _>(StandardNormal))
                .collect();
            let s = self.semantic(&c, &z);
            let mut u = self.invariant_features(&s);
            u.extend(self.variant_features(&z));
            pre_mix.row_mut(i).copy_from_slice(&u);
            for v in &mut u {
                *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
            }
            features.extend(self.mixing.forward(&u).into_iter().map(|v| v as f32));
            components.push(y);
        }
        (features, components, pre_mix)
    }
}

/// A generated dataset together with the noise-free pre-mixing features
/// `(g_s(s), g_z(z))` of every row.
#[derive(Clone, Debug)]
pub struct ScmSample {
    pub dataset: LabeledDataset,
    pub pre_mix: Matrix,
}

pub fn generate_scm_dataset(spec: &ScmSpec, n: usize, env_shift: &[f64], seed: u64) -> Result<ScmSample> {
    if n == 0 {
        return Err(Error::validation("n must be at least 1"));
    }
    if env_shift.len() != spec.dim_z || env_shift.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation(format!(
            "env_shift must be {} finite values",
            spec.dim_z
        )));
    }
    let mechanism = ScmMechanism::new(spec)?;
    let mut rng = rng_from_seed(seed);
    let (features, components, pre_mix) =
        mechanism.sample_rows(n, env_shift, &mechanism.class_means, &mut rng);
    let tag = if env_shift.iter().all(|&v| v == 0.0) {
        DistributionTag::Id
    } else {
        DistributionTag::CovariateShift
    };
    let provenance = format!(
        "scm(spec={}, n={n}, seed={seed}, env_shift={env_shift:?})",
        spec.fingerprint()
    );
    let labels = components.into_iter().map(|y| y as i64).collect();
    Ok(ScmSample {
        dataset: LabeledDataset::new(spec.dim_x, features, labels, tag, provenance)?,
        pre_mix,
    })
}

/// Examples from class components never seen in training, labelled
/// [`OOD_LABEL`].
pub fn make_semantic_ood(spec: &ScmSpec, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::validation("n must be at least 1"));
    }
    let mechanism = ScmMechanism::new(spec)?;
    let mut rng = rng_from_seed(seed);
    let zero = vec![0.0; spec.dim_z];
    let (features, _, _) = mechanism.sample_rows(n, &zero, &mechanism.ood_means, &mut rng);
    let provenance = format!("scm-semantic-ood(spec={}, n={n}, seed={seed})", spec.fingerprint());
    LabeledDataset::new(
        spec.dim_x,
        features,
        vec![OOD_LABEL; n],
        DistributionTag::SemanticShift,
        provenance,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ScmSpec {
        let mut s = ScmSpec::new(4, 3, 10, 2);
        s.mixing_seed = 11;
        s
    }

    #[test]
    fn activation_inverse() {
        for &a in &[-40.0, -3.0, -0.1, 0.0, 0.2, 1.7, 25.0] {
            assert!((act(act_inv(a)) - a).abs() < 1e-12);
        }
    }

    #[test]
    fn mixing_round_trip_and_nonsingular_layers() {
        let m = ScmMechanism::new(&spec()).unwrap();
        let u = vec![0.3, -1.0, 2.0, 0.5, 0.0, -2.5, 1.1, 0.9, -0.4, 3.0];
        let back = m.mixing().inverse(&m.mixing().forward(&u));
        for (a, b) in u.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
        let (d1, d2) = m.mixing().layer_determinants();
        assert!(d1.abs() > 1e-3 && d2.abs() > 1e-3);
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut s = spec();
        s.dim_x = 9;
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
        let mut s = spec();
        s.noise_sigma = f64::NAN;
        assert!(s.validate().is_err());
        let mut s = spec();
        s.style_prior_mean = vec![0.0];
        assert!(s.validate().is_err());
        assert!(generate_scm_dataset(&spec(), 4, &[f64::INFINITY, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn tag_follows_env_shift() {
        let id = generate_scm_dataset(&spec(), 3, &[0.0; 3], 1).unwrap();
        assert_eq!(id.dataset.tag, DistributionTag::Id);
        let shifted = generate_scm_dataset(&spec(), 3, &[0.0, 1.0, 0.0], 1).unwrap();
        assert_eq!(shifted.dataset.tag, DistributionTag::CovariateShift);
    }

    #[test]
    fn style_rows_sum_to_one() {
        let m = ScmMechanism::new(&spec()).unwrap();
        let shifted = m.variant_features(&[1.0, 1.0, 1.0]);
        for v in shifted {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }
}
