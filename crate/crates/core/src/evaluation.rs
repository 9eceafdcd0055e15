//! Accuracy on in-distribution and shifted data, maximum-softmax scoring
//! and the two detection metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{DistributionTag, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{predict, predict_deterministic, LatentNoise, ModelParams};
use crate::rng::derived_rng;
use crate::tensor::Matrix;

const CHUNK: usize = 2048;

fn default_tpr() -> f64 {
    0.95
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Average `mc_samples` random draws instead of one zero-noise pass.
    #[serde(default)]
    pub monte_carlo: bool,
    #[serde(default)]
    pub seed: u64,
    /// Pool covariate-shifted sets with the clean ID set as positives for
    /// detection.
    #[serde(default)]
    pub id_scores_include_idc: bool,
    #[serde(default = "default_tpr")]
    pub tpr_target: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            monte_carlo: false,
            seed: 0,
            id_scores_include_idc: false,
            tpr_target: default_tpr(),
        }
    }
}

/// Predictive class probabilities for every row of `x`.
pub fn predict_rows(params: &ModelParams, x: &Matrix, cfg: &EvalConfig) -> Result<Matrix> {
    let mut parts = Vec::new();
    let mut start = 0;
    let mut chunk_idx = 0u64;
    while start < x.rows() {
        let end = (start + CHUNK).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        let rows = x.select_rows(&idx);
        let p = if cfg.monte_carlo {
            let mut rng = derived_rng(cfg.seed, "eval-noise", &[chunk_idx]);
            let draws: Vec<LatentNoise> = (0..params.config.mc_samples)
                .map(|_| LatentNoise::sample(&params.config, rows.rows(), &mut rng))
                .collect();
            predict(params, &rows, &draws)?
        } else {
            predict_deterministic(params, &rows)?
        };
        parts.push(p);
        start = end;
        chunk_idx += 1;
    }
    if parts.is_empty() {
        return Ok(Matrix::zeros(0, params.config.num_classes));
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Ok(Matrix::concat_rows(&refs))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn accuracy(params: &ModelParams, ds: &LabeledDataset, cfg: &EvalConfig) -> Result<f64> {
    if ds.tag == DistributionTag::SemanticShift {
        return Err(Error::validation("accuracy is undefined on semantic-shift data"));
    }
    if ds.is_empty() {
        return Err(Error::validation("accuracy on an empty dataset"));
    }
    let p = predict_rows(params, &ds.feature_matrix(), cfg)?;
    let correct = (0..ds.len())
        .filter(|&r| argmax(p.row(r)) as i64 == ds.labels()[r])
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Maximum predictive class probability of each row.
pub fn msp_score(params: &ModelParams, x: &Matrix, cfg: &EvalConfig) -> Result<Vec<f64>> {
    let p = predict_rows(params, x, cfg)?;
    Ok((0..p.rows())
        .map(|r| p.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}

fn sorted_scores(name: &str, v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::validation(format!("{name} scores are empty")));
    }
    if v.iter().any(|s| s.is_nan()) {
        return Err(Error::validation(format!("{name} scores contain NaN")));
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Probability that a random ID score beats a random OOD score, ties
/// counting one half.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    let id = sorted_scores("ID", id_scores)?;
    sorted_scores("OOD", ood_scores)?;
    // twice the Mann-Whitney U statistic, as an exact integer
    let mut twice_u: u128 = 0;
    for &o in ood_scores {
        let below_or_eq = id.partition_point(|&v| v <= o);
        let below = id.partition_point(|&v| v < o);
        let greater = (id.len() - below_or_eq) as u128;
        let ties = (below_or_eq - below) as u128;
        twice_u += 2 * greater + ties;
    }
    let denom = 2 * id.len() as u128 * ood_scores.len() as u128;
    Ok(twice_u as f64 / denom as f64)
}

/// Fraction of OOD scores at or above the largest threshold that keeps at
/// least `tpr_target` of ID scores at or above it.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::validation("tpr_target must lie in (0, 1]"));
    }
    let id = sorted_scores("ID", id_scores)?;
    let ood = sorted_scores("OOD", ood_scores)?;
    let n = id.len();
    let mut tau = id[0];
    for k in (0..n).rev() {
        if k + 1 < n && id[k] == id[k + 1] {
            continue;
        }
        let v = id[k];
        let at_or_above = n - id.partition_point(|&s| s < v);
        if at_or_above as f64 / n as f64 >= tpr_target {
            tau = v;
            break;
        }
    }
    let accepted = ood.len() - ood.partition_point(|&s| s < tau);
    Ok(accepted as f64 / ood.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub auroc: f64,
    pub fpr95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub id_acc: f64,
    pub idc_acc: BTreeMap<String, f64>,
    pub detection: BTreeMap<String, Detection>,
    pub num_eval_examples: BTreeMap<String, usize>,
}

impl ScoreReport {
    /// Unweighted mean over the covariate-shift entries.
    pub fn mean_idc_acc(&self) -> Option<f64> {
        if self.idc_acc.is_empty() {
            None
        } else {
            Some(self.idc_acc.values().sum::<f64>() / self.idc_acc.len() as f64)
        }
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        let _ = writeln!(out, "id_acc,{}", self.id_acc);
        for (k, v) in &self.idc_acc {
            let _ = writeln!(out, "idc_acc/{k},{v}");
        }
        for (k, d) in &self.detection {
            let _ = writeln!(out, "auroc/{k},{}", d.auroc);
            let _ = writeln!(out, "fpr95/{k},{}", d.fpr95);
        }
        for (k, n) in &self.num_eval_examples {
            let _ = writeln!(out, "n/{k},{n}");
        }
        out
    }
}

/// Full evaluation over named datasets. ID sets are pooled for accuracy;
/// each covariate-shift set gets an accuracy entry and each semantic-shift
/// set a detection entry.
pub fn evaluate_suite(params: &ModelParams, datasets: &[(String, LabeledDataset)], cfg: &EvalConfig) -> Result<ScoreReport> {
    let mut id: Option<LabeledDataset> = None;
    for (_, ds) in datasets.iter().filter(|(_, d)| d.tag == DistributionTag::Id) {
        id = Some(match id {
            None => ds.clone(),
            Some(acc) => acc.concat(ds)?,
        });
    }
    let id = id.ok_or_else(|| Error::validation("evaluation needs at least one ID dataset"))?;

    let id_probs = predict_rows(params, &id.feature_matrix(), cfg)?;
    let correct = (0..id.len())
        .filter(|&r| argmax(id_probs.row(r)) as i64 == id.labels()[r])
        .count();
    let id_acc = correct as f64 / id.len().max(1) as f64;
    let mut id_scores: Vec<f64> = (0..id_probs.rows())
        .map(|r| id_probs.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();

    let mut idc_acc = BTreeMap::new();
    let mut num = BTreeMap::new();
    for (name, ds) in datasets {
        num.insert(name.clone(), ds.len());
        if ds.tag == DistributionTag::CovariateShift {
            idc_acc.insert(name.clone(), accuracy(params, ds, cfg)?);
            if cfg.id_scores_include_idc {
                id_scores.extend(msp_score(params, &ds.feature_matrix(), cfg)?);
            }
        }
    }
    let mut detection = BTreeMap::new();
    for (name, ds) in datasets.iter().filter(|(_, d)| d.tag == DistributionTag::SemanticShift) {
        let ood = msp_score(params, &ds.feature_matrix(), cfg)?;
        detection.insert(
            name.clone(),
            Detection {
                auroc: auroc(&id_scores, &ood)?,
                fpr95: fpr_at_tpr(&id_scores, &ood, cfg.tpr_target)?,
            },
        );
    }
    Ok(ScoreReport {
        id_acc,
        idc_acc,
        detection,
        num_eval_examples: num,
    })
}

#[cfg(test)]
mod tests;
