use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::Rng as _;
use rand_distr::StandardNormal;

use super::*;
use crate::rng::rng_from_seed;

fn random_spd(d: usize, rng: &mut crate::rng::Rng) -> DMatrix<f64> {
    let b = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    &b * b.transpose() * 0.3 + DMatrix::identity(d, d) * 0.5
}

fn random_vec(d: usize, scale: f64, rng: &mut crate::rng::Rng) -> DVector<f64> {
    DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn random_instance(rng: &mut crate::rng::Rng, sigma: f64) -> LinearGaussianInstance {
    loop {
        let a = DMatrix::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        if a.determinant().abs() > 0.3 {
            return LinearGaussianInstance::new(a, random_vec(2, 1.0, rng), sigma, 0.1).unwrap();
        }
    }
}

/// `h . E[v | x]` by 2-D Simpson quadrature of the unnormalized posterior
/// `p(v) N(x; A v, sigma^2 I)`.
fn quadrature_posterior_mean(inst: &LinearGaussianInstance, prior: &ClientPrior, x: &DVector<f64>) -> f64 {
    let s2 = inst.sigma_mu.powi(2);
    let log_post = |v: &DVector<f64>| {
        let r = x - &inst.a * v;
        prior.log_density(v).unwrap() - 0.5 * r.norm_squared() / s2
    };
    let prec = prior.precision().unwrap() + inst.a.transpose() * &inst.a / s2;
    let cov = prec.clone().try_inverse().unwrap();
    let center = cov.clone() * (prior.precision().unwrap() * &prior.mean + inst.a.transpose() * x / s2);
    // only the grid placement uses the conjugate moments; the integral does not
    let half = 9.0 * cov.diagonal().iter().cloned().fold(0.0, f64::max).sqrt();
    let n = 600;
    let step = 2.0 * half / n as f64;
    let simpson = |i: usize| -> f64 {
        if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        }
    };
    let mut logs = Vec::with_capacity((n + 1) * (n + 1));
    for i in 0..=n {
        for j in 0..=n {
            let v = DVector::from_vec(vec![
                center[0] - half + i as f64 * step,
                center[1] - half + j as f64 * step,
            ]);
            logs.push((log_post(&v), simpson(i) * simpson(j), inst.h.dot(&v)));
        }
    }
    let m = logs.iter().map(|l| l.0).fold(f64::NEG_INFINITY, f64::max);
    let (mut z, mut num) = (0.0, 0.0);
    for (l, w, hy) in logs {
        let p = w * (l - m).exp();
        z += p;
        num += p * hy;
    }
    num / z
}

#[test]
fn zero_noise_inverts_exactly() {
    let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 4.0]);
    let h = DVector::from_vec(vec![1.0, -3.0]);
    let inst = LinearGaussianInstance::new(a, h, 0.0, 0.0).unwrap();
    let prior = ClientPrior::isotropic(DVector::from_vec(vec![5.0, -2.0]), 3.0).unwrap();
    // A^{-1} x = (1, 0.5) for x = (2.5, 2)
    let x = DVector::from_vec(vec![2.5, 2.0]);
    assert_eq!(posterior_mean_y(&inst, &prior, &x).unwrap(), 1.0 - 1.5);
}

#[test]
fn closed_form_matches_quadrature() {
    let mut rng = rng_from_seed(11);
    for _ in 0..10 {
        let sigma = rng.random_range(0.3..1.5);
        let inst = random_instance(&mut rng, sigma);
        let prior = ClientPrior::new(random_vec(2, 1.0, &mut rng), random_spd(2, &mut rng)).unwrap();
        let x = random_vec(2, 1.5, &mut rng);
        let closed = posterior_mean_y(&inst, &prior, &x).unwrap();
        let quad = quadrature_posterior_mean(&inst, &prior, &x);
        assert!((closed - quad).abs() < 1e-5, "{closed} vs {quad}");
    }
}

#[test]
fn uninformative_likelihood_returns_prior_mean() {
    let inst = LinearGaussianInstance::new(DMatrix::identity(2, 2), DVector::from_vec(vec![1.0, 2.0]), 1e4, 0.0).unwrap();
    let prior = ClientPrior::isotropic(DVector::from_vec(vec![0.3, -0.1]), 1.0).unwrap();
    let y = posterior_mean_y(&inst, &prior, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
    assert!((y - 0.1).abs() < 1e-3, "{y}");
}

#[test]
fn rejects_bad_inputs() {
    let singular = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
    assert!(LinearGaussianInstance::new(singular, DVector::from_vec(vec![1.0, 0.0]), 0.1, 0.1).is_err());
    assert!(LinearGaussianInstance::new(DMatrix::identity(2, 2), DVector::zeros(2), 0.1, 0.1).is_err());
    assert!(ClientPrior::new(DVector::zeros(2), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0])).is_err());
    let inst = LinearGaussianInstance::new(DMatrix::identity(1, 1), DVector::from_element(1, 1.0), 0.1, 0.1).unwrap();
    let prior = ClientPrior::isotropic(DVector::zeros(1), 1.0).unwrap();
    assert!(posterior_mean_y(&inst, &prior, &DVector::from_element(1, f64::NAN)).is_err());
    let xs = vec![DVector::from_element(1, 0.0)];
    assert!(lhs_gap(&inst, &[prior.clone()], &[0.5], &prior, &xs).is_err());
}

fn two_client_setup(sigma: f64) -> (LinearGaussianInstance, Vec<ClientPrior>, Vec<f64>, ClientPrior, Vec<DVector<f64>>) {
    let mut rng = rng_from_seed(5);
    let inst = random_instance(&mut rng, sigma);
    let ood = ClientPrior::new(random_vec(2, 0.5, &mut rng), random_spd(2, &mut rng)).unwrap();
    let priors = vec![
        ClientPrior::new(random_vec(2, 0.5, &mut rng), random_spd(2, &mut rng)).unwrap(),
        ClientPrior::new(random_vec(2, 0.5, &mut rng), random_spd(2, &mut rng)).unwrap(),
    ];
    let xs = (0..200).map(|_| random_vec(2, 1.0, &mut rng)).collect();
    (inst, priors, vec![0.3, 0.7], ood, xs)
}

#[test]
fn identical_priors_collapse_both_sides() {
    let (inst, _, w, ood, xs) = two_client_setup(0.4);
    let priors = vec![ood.clone(), ood.clone()];
    let (lhs, _) = lhs_gap(&inst, &priors, &w, &ood, &xs).unwrap();
    assert!(lhs < 1e-12, "{lhs}");
    assert_eq!(rhs_bound(&inst, &priors, &w, &ood, &xs).unwrap(), 0.0);
}

#[test]
fn zero_noise_collapses_both_sides() {
    let (inst, priors, w, ood, xs) = two_client_setup(0.0);
    let (lhs, _) = lhs_gap(&inst, &priors, &w, &ood, &xs).unwrap();
    assert!(lhs <= 1e-10, "{lhs}");
    assert_eq!(rhs_bound(&inst, &priors, &w, &ood, &xs).unwrap(), 0.0);
}

#[test]
fn scalar_gap_matches_hand_computation() {
    // v ~ N(m, p), x = a v + sigma mu:  E[v|x] = m + p a (x - a m) / (a^2 p + sigma^2)
    let (a, p, sigma, delta) = (1.7, 0.8, 0.3, 0.25);
    let inst = LinearGaussianInstance::new(DMatrix::from_element(1, 1, a), DVector::from_element(1, 2.0), sigma, 0.0).unwrap();
    let ood = ClientPrior::isotropic(DVector::from_element(1, 0.0), p).unwrap();
    let client = ClientPrior::isotropic(DVector::from_element(1, delta), p).unwrap();
    let xs: Vec<DVector<f64>> = [-1.0, 0.2, 3.0].iter().map(|&v| DVector::from_element(1, v)).collect();
    let (lhs, se) = lhs_gap(&inst, &[client], &[1.0], &ood, &xs).unwrap();
    let expected = 2.0 * delta * sigma * sigma / (a * a * p + sigma * sigma);
    assert!((lhs - expected).abs() < 1e-6, "{lhs} vs {expected}");
    assert!(se < 1e-12);
}

#[test]
fn score_matches_finite_differences() {
    let mut rng = rng_from_seed(21);
    for _ in 0..20 {
        let d = 3;
        let prior = ClientPrior::new(random_vec(d, 1.0, &mut rng), random_spd(d, &mut rng)).unwrap();
        let v = random_vec(d, 1.5, &mut rng);
        let score = prior.score(&v).unwrap();
        let h = 1e-5;
        for i in 0..d {
            let mut up = v.clone();
            let mut dn = v.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (prior.log_density(&up).unwrap() - prior.log_density(&dn).unwrap()) / (2.0 * h);
            assert!((fd - score[i]).abs() < 1e-5, "{fd} vs {}", score[i]);
        }
    }
}

#[test]
fn log_density_matches_scalar_formula() {
    let prior = ClientPrior::isotropic(DVector::from_element(1, 0.5), 4.0).unwrap();
    let v = DVector::from_element(1, 1.5);
    let expected = -0.5 * (1.0 / 4.0 + (2.0 * std::f64::consts::PI * 4.0).ln());
    assert!((prior.log_density(&v).unwrap() - expected).abs() < 1e-12);
}

#[test]
fn zero_grid_and_zero_gap() {
    let family = InstanceFamily::scalar(1.0).unwrap();
    let r = verify_bound(&family, &[0.0], 0.2, 1000, 3).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert!(r.rows[0].lhs.abs() <= 1e-10);
    assert_eq!(r.rows[0].rhs, 0.0);
    let r = verify_bound(&family, &[0.01, 0.05, 0.1, 0.5], 0.0, 1000, 3).unwrap();
    for row in &r.rows {
        assert!(row.lhs <= 1e-10);
        assert_eq!(row.rhs, 0.0);
    }
    assert!(verify_bound(&family, &[], 0.1, 10, 0).is_err());
}

#[test]
fn scalar_slope_is_quadratic() {
    let family = InstanceFamily::scalar(1.0).unwrap();
    let r = verify_bound(&family, &[0.01, 0.02, 0.05, 0.1], 0.2, 100_000, 8).unwrap();
    let slope = r.slope.unwrap();
    assert!((1.7..=2.3).contains(&slope), "{slope}");
    assert_eq!(r.check_b, Some(true));
    assert!(r.all_small_regime_checks_pass(), "{r:?}");
}

#[test]
fn lhs_is_monotone_in_gap() {
    let family = InstanceFamily {
        a: DMatrix::from_row_slice(2, 2, &[1.2, 0.3, -0.4, 0.9]),
        h: DVector::from_vec(vec![1.0, 0.5]),
        sigma_eps: 0.1,
        ood_prior: ClientPrior::isotropic(DVector::zeros(2), 1.0).unwrap(),
        directions: vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, -1.0])],
        weights: vec![0.5, 0.5],
    };
    let mut prev: Option<BoundRow> = None;
    for gap in [0.0, 0.1, 0.2, 0.4] {
        let row = verify_bound(&family, &[0.3], gap, 20_000, 4).unwrap().rows[0];
        if let Some(p) = prev {
            assert!(row.lhs + 3.0 * row.mc_std_error >= p.lhs, "{gap}: {row:?} < {p:?}");
        }
        prev = Some(row);
    }
}

#[test]
fn report_csv_layout() {
    let family = InstanceFamily::scalar(2.0).unwrap();
    let r = verify_bound(&family, &[0.05, 0.5], 0.1, 100, 0).unwrap();
    let csv = r.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sigma_mu,lhs,rhs,mc_std_error,check_a,check_b");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].ends_with(",true,na"), "{}", lines[1]);
    assert!(lines[2].ends_with(",na,na"), "{}", lines[2]);
    let json = serde_json::to_string(&r).unwrap();
    let back: BoundReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn small_regime_bound_holds(seed in 0u64..1000, gap in 0.0f64..0.2, sigma in 0.005f64..0.1) {
        let mut rng = rng_from_seed(seed);
        let inst = random_instance(&mut rng, 1.0);
        let family = InstanceFamily {
            a: inst.a,
            h: inst.h,
            sigma_eps: 0.1,
            ood_prior: ClientPrior::new(random_vec(2, 0.5, &mut rng), random_spd(2, &mut rng)).unwrap(),
            directions: vec![random_vec(2, 1.0, &mut rng).normalize(), random_vec(2, 1.0, &mut rng).normalize()],
            weights: vec![0.4, 0.6],
        };
        let r = verify_bound(&family, &[sigma], gap, 2000, seed).unwrap();
        let row = r.rows[0];
        prop_assert!(row.lhs.is_finite() && row.rhs.is_finite() && row.lhs >= 0.0 && row.rhs >= 0.0);
        prop_assert!(r.all_small_regime_checks_pass(), "{:?}", row);
    }
}
