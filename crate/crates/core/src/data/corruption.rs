//! Analytic covariate-shift transforms standing in for image corruptions.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DistributionTag, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corruption {
    GaussianNoise,
    Brightness,
    Contrast,
    Blur,
}

impl Corruption {
    pub const ALL: [Corruption; 4] = [
        Corruption::GaussianNoise,
        Corruption::Brightness,
        Corruption::Contrast,
        Corruption::Blur,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Corruption::GaussianNoise => "gaussian_noise",
            Corruption::Brightness => "brightness",
            Corruption::Contrast => "contrast",
            Corruption::Blur => "blur",
        }
    }
}

impl fmt::Display for Corruption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Corruption::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown corruption `{s}`")))
    }
}

/// Transforms every row of an ID dataset; labels are carried over untouched.
///
/// Severity `k` in `1..=5` maps to: noise std `0.04 k`, additive offset
/// `0.1 k`, contraction `1 - 0.1 k` toward the row mean, and a centred
/// moving average of width `2 k + 1` (truncated at the ends).
pub fn apply_corruption(
    ds: &LabeledDataset,
    kind: Corruption,
    severity: u8,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(1..=5).contains(&severity) {
        return Err(Error::validation(format!("severity {severity} outside 1..=5")));
    }
    if ds.tag != DistributionTag::Id {
        return Err(Error::validation("corruptions apply to ID datasets only"));
    }
    let k = f64::from(severity);
    let mut x = ds.feature_matrix();
    match kind {
        Corruption::GaussianNoise => {
            let noise = Normal::new(0.0, 0.04 * k).expect("positive std");
            let mut rng = rng_from_seed(seed);
            for v in x.data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        Corruption::Brightness => {
            for v in x.data_mut() {
                *v += 0.1 * k;
            }
        }
        Corruption::Contrast => {
            let factor = 1.0 - 0.1 * k;
            for r in 0..x.rows() {
                let row = x.row_mut(r);
                let mean = row.iter().sum::<f64>() / row.len() as f64;
                for v in row {
                    *v = mean + factor * (*v - mean);
                }
            }
        }
        Corruption::Blur => {
            let half = severity as usize;
            for r in 0..x.rows() {
                let row = x.row(r).to_vec();
                let d = row.len();
                let out = x.row_mut(r);
                for (j, o) in out.iter_mut().enumerate() {
                    let lo = j.saturating_sub(half);
                    let hi = (j + half).min(d - 1);
                    *o = row[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
                }
            }
        }
    }
    let note = format!("corruption(kind={kind}, severity={severity}, seed={seed})");
    Ok(ds.with_features(x, DistributionTag::CovariateShift, &note))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds() -> LabeledDataset {
        let features = vec![0.0, 1.0, 2.0, 3.0, 4.0, -1.0, -1.0, 1.0, 1.0, 0.0];
        LabeledDataset::new(5, features, vec![0, 1], DistributionTag::Id, "test").unwrap()
    }

    #[test]
    fn severity_zero_is_rejected() {
        let err = apply_corruption(&ds(), Corruption::Brightness, 0, 0).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(apply_corruption(&ds(), Corruption::Blur, 6, 0).is_err());
    }

    #[test]
    fn shifted_inputs_are_rejected() {
        let shifted = apply_corruption(&ds(), Corruption::Brightness, 1, 0).unwrap();
        assert!(apply_corruption(&shifted, Corruption::Brightness, 1, 0).is_err());
    }

    #[test]
    fn analytic_maps() {
        let b = apply_corruption(&ds(), Corruption::Brightness, 2, 0).unwrap();
        assert!((f64::from(b.row(0)[0]) - 0.2).abs() < 1e-6);
        assert_eq!(b.tag, DistributionTag::CovariateShift);
        assert!(b.provenance.contains("brightness"));

        let c = apply_corruption(&ds(), Corruption::Contrast, 5, 0).unwrap();
        // factor 0.5 toward the row mean of 2.0
        assert!((f64::from(c.row(0)[4]) - 3.0).abs() < 1e-6);

        let blur = apply_corruption(&ds(), Corruption::Blur, 1, 0).unwrap();
        assert!((f64::from(blur.row(0)[0]) - 0.5).abs() < 1e-6);
        assert!((f64::from(blur.row(0)[2]) - 2.0).abs() < 1e-6);
    }

    #[test]
    fn names_parse_back() {
        for c in Corruption::ALL {
            assert_eq!(c.name().parse::<Corruption>().unwrap(), c);
        }
        assert!("fog".parse::<Corruption>().is_err());
    }
}
