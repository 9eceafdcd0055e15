//! Amplitude-spectrum mixing on flat feature vectors.

use rand::Rng as _;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::tensor::Matrix;

/// Random choices of one augmentation call: a partner row and a mixing
/// coefficient for every row.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierPlan {
    pub partners: Vec<usize>,
    pub lambdas: Vec<f64>,
}

impl FourierPlan {
    pub fn sample(rows: usize, mix_ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mix_ratio) {
            return Err(Error::validation(format!("mix_ratio {mix_ratio} outside [0, 1]")));
        }
        if rows < 2 {
            return Err(Error::validation("fourier augmentation needs at least two rows"));
        }
        let mut rng = derived_rng(seed, "fourier-plan", &[]);
        let mut partners = Vec::with_capacity(rows);
        let mut lambdas = Vec::with_capacity(rows);
        for i in 0..rows {
            // uniform over the other rows
            let mut p = rng.random_range(0..rows - 1);
            if p >= i {
                p += 1;
            }
            partners.push(p);
            lambdas.push(mix_ratio * rng.random::<f64>());
        }
        Ok(Self { partners, lambdas })
    }

    /// Mixes each row's amplitude spectrum with its partner's, keeping the
    /// row's own phase, and returns the real part of the inverse transform.
    pub fn apply(&self, batch: &Matrix) -> Result<Matrix> {
        let (rows, cols) = batch.shape();
        if self.partners.len() != rows {
            return Err(Error::shape("fourier plan does not match the batch"));
        }
        let spectra = spectra(batch);
        let mut planner = FftPlanner::<f64>::new();
        let ifft = planner.plan_fft_inverse(cols);
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let lambda = self.lambdas[i];
            let partner = &spectra[self.partners[i]];
            let mut buf: Vec<Complex64> = spectra[i]
                .iter()
                .zip(partner)
                .map(|(own, other)| {
                    let amp = (1.0 - lambda) * own.norm() + lambda * other.norm();
                    Complex64::from_polar(amp, own.arg())
                })
                .collect();
            ifft.process(&mut buf);
            for (o, v) in out.row_mut(i).iter_mut().zip(&buf) {
                *o = v.re / cols as f64;
            }
        }
        Ok(out)
    }
}

/// Forward DFT of every row.
pub fn spectra(batch: &Matrix) -> Vec<Vec<Complex64>> {
    let cols = batch.cols();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(cols);
    (0..batch.rows())
        .map(|i| {
            let mut buf: Vec<Complex64> = batch.row(i).iter().map(|&v| Complex64::new(v, 0.0)).collect();
            fft.process(&mut buf);
            buf
        })
        .collect()
}

pub fn fourier_augment(batch: &Matrix, mix_ratio: f64, seed: u64) -> Result<Matrix> {
    FourierPlan::sample(batch.rows(), mix_ratio, seed)?.apply(batch)
}
