//! Training objective: the importance-weighted ELBO and the interventional
//! consistency penalty.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::network::Net;
use crate::model::{CausalMode, LatentNoise, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tensor::Matrix;

fn default_weight_clip() -> f64 {
    10.0
}
fn default_prob_floor() -> f64 {
    1e-8
}
fn default_intervention_scale() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "default_intervention_scale")]
    pub intervention_scale: f64,
    /// Upper clip on `1 / q(y | x)` in the ELBO weight.
    #[serde(default = "default_weight_clip")]
    pub weight_clip: f64,
    /// Floor applied to class probabilities before taking logs in the
    /// intervention KL.
    #[serde(default = "default_prob_floor")]
    pub prob_floor: f64,
    /// Treat the clean predictive distribution as a fixed target.
    #[serde(default)]
    pub ic_detach_clean: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            intervention_scale: default_intervention_scale(),
            weight_clip: default_weight_clip(),
            prob_floor: default_prob_floor(),
            ic_detach_clean: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.intervention_scale.is_finite() && self.intervention_scale >= 0.0) {
            return Err(Error::validation("intervention_scale must be finite and nonnegative"));
        }
        if !(self.weight_clip > 0.0) {
            return Err(Error::validation("weight_clip must be positive"));
        }
        if !(self.prob_floor > 0.0 && self.prob_floor < 1.0) {
            return Err(Error::validation("prob_floor must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// All noise consumed by one loss evaluation on a batch of `n` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LossNoise {
    /// The single draw used by the ELBO terms.
    pub elbo: LatentNoise,
    /// Draws behind `q(y | x)`; shared by the clean and intervened passes.
    pub predict: Vec<LatentNoise>,
    /// `n x width(x_z)` standard normals for the intervention.
    pub intervention: Matrix,
}

impl LossNoise {
    pub fn sample(cfg: &ModelConfig, n: usize, rng: &mut Rng) -> Self {
        use rand::Rng as _;
        let elbo = LatentNoise::sample(cfg, n, rng);
        let predict = (0..cfg.mc_samples).map(|_| LatentNoise::sample(cfg, n, rng)).collect();
        let w = cfg.xz_width();
        let intervention = Matrix::from_vec(
            n,
            w,
            (0..n * w).map(|_| rng.sample(rand_distr::StandardNormal)).collect(),
        );
        Self {
            elbo,
            predict,
            intervention,
        }
    }

    pub fn zeros(cfg: &ModelConfig, n: usize) -> Self {
        Self {
            elbo: LatentNoise::zeros(cfg, n),
            predict: vec![LatentNoise::zeros(cfg, n)],
            intervention: Matrix::zeros(n, cfg.xz_width()),
        }
    }

    pub fn rows(&self) -> usize {
        self.elbo.rows()
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            elbo: self.elbo.select_rows(indices),
            predict: self.predict.iter().map(|p| p.select_rows(indices)).collect(),
            intervention: self.intervention.select_rows(indices),
        }
    }
}

/// Batch-mean loss terms. Reconstruction and divergence terms are already
/// multiplied by the per-example ELBO weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub elbo_weighted: f64,
    pub recon_x: f64,
    pub recon_xs: f64,
    pub recon_xz: f64,
    pub kl_s: f64,
    pub kl_z: f64,
    pub kl_c: f64,
    pub ic: f64,
    pub total: f64,
}

pub type ParamGradients = BTreeMap<String, Matrix>;

/// Closed-form KL divergence between diagonal Gaussians, summed over
/// coordinates.
pub fn gaussian_kl(mean_a: &[f64], std_a: &[f64], mean_b: &[f64], std_b: &[f64]) -> Result<f64> {
    let d = mean_a.len();
    if std_a.len() != d || mean_b.len() != d || std_b.len() != d {
        return Err(Error::shape("gaussian_kl arguments differ in length"));
    }
    if std_a.iter().chain(std_b).any(|&s| !(s > 0.0)) {
        return Err(Error::validation("gaussian_kl needs strictly positive stds"));
    }
    let mut kl = 0.0;
    for i in 0..d {
        if mean_a[i] == mean_b[i] && std_a[i] == std_b[i] {
            continue;
        }
        let ratio = std_a[i] / std_b[i];
        let diff = (mean_a[i] - mean_b[i]) / std_b[i];
        kl += -ratio.ln() + 0.5 * (ratio * ratio + diff * diff) - 0.5;
    }
    Ok(kl.max(0.0))
}

fn class_indices(labels: &[i64], num_classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            if l < 0 || l as usize >= num_classes {
                Err(Error::validation(format!("label {l} outside 0..{num_classes}")))
            } else {
                Ok(l as usize)
            }
        })
        .collect()
}

fn one_hot(labels: &[usize], num_classes: usize) -> Matrix {
    let mut m = Matrix::zeros(labels.len(), num_classes);
    for (r, &l) in labels.iter().enumerate() {
        m.set(r, l, 1.0);
    }
    m
}

fn check_batch(params: &ModelParams, x: &Matrix, noise: &LossNoise) -> Result<()> {
    let cfg = &params.config;
    if x.rows() == 0 {
        return Err(Error::validation("loss needs a nonempty batch"));
    }
    if x.cols() != cfg.dim_x {
        return Err(Error::shape(format!("batch width {} != dim_x {}", x.cols(), cfg.dim_x)));
    }
    if noise.rows() != x.rows() || noise.intervention.shape() != (x.rows(), cfg.xz_width()) {
        return Err(Error::shape("loss noise does not match the batch"));
    }
    if noise.predict.is_empty() {
        return Err(Error::validation("loss noise needs at least one predictive draw"));
    }
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Terms {
    Elbo,
    Total,
}

struct Built {
    total: Var,
    breakdown: LossBreakdown,
    /// Per-example `-(ce_i + weighted_i)`, excluding the intervention term.
    per_example: Vec<f64>,
    weights: Vec<f64>,
}

/// KL(clean || intervened), batch mean, clamped below at zero.
fn intervention_term(net: &mut Net<'_>, clean: Var, xs: Var, xz: Var, noise: &LossNoise, obj: &ObjectiveConfig) -> Result<Var> {
    let clean = if obj.ic_detach_clean { net.g.detach(clean) } else { clean };
    let eps = net.input(noise.intervention.clone());
    let shift = net.g.scale(eps, obj.intervention_scale);
    let moved = net.g.add(xz, shift);
    let pert = net.predictive(xs, moved, &noise.predict)?;
    let p = net.g.clamp_min(clean, obj.prob_floor);
    let q = net.g.clamp_min(pert, obj.prob_floor);
    let lp = net.g.ln(p);
    let lq = net.g.ln(q);
    let d = net.g.sub(lp, lq);
    let t = net.g.mul(p, d);
    let kl = net.g.row_sum(t);
    let mean = net.g.mean(kl);
    Ok(net.g.clamp_min(mean, 0.0))
}

fn build(
    net: &mut Net<'_>,
    x: &Matrix,
    labels: &[i64],
    noise: &LossNoise,
    obj: &ObjectiveConfig,
    terms: Terms,
    fixed_weights: Option<&[f64]>,
) -> Result<Built> {
    let cfg = net.cfg.clone();
    let n = x.rows();
    if labels.len() != n {
        return Err(Error::shape("labels and features differ in length"));
    }
    let y = class_indices(labels, cfg.num_classes)?;
    let y_hot = net.input(one_hot(&y, cfg.num_classes));

    let xv = net.input(x.clone());
    let (xs, xz) = net.split(xv)?;

    let q = net.predictive(xs, xz, &noise.predict)?;
    let qy_all = net.g.mul(q, y_hot);
    let qy = net.g.row_sum(qy_all);
    let log_qy = net.g.ln(qy);
    let neg = net.g.neg(log_qy);
    let ce = net.g.mean(neg);

    let lat = net.infer(xs, xz, &noise.elbo)?;
    let (s, z, c) = (lat.s.latent, lat.z.latent, lat.c.latent);

    let weights: Vec<f64> = match fixed_weights {
        Some(w) => {
            if w.len() != n {
                return Err(Error::shape("fixed ELBO weights do not match the batch"));
            }
            w.to_vec()
        }
        None => {
            let logits = net.classifier_logits(c, xs)?;
            let p = net.g.softmax_rows(logits);
            let pv = net.g.value(p);
            let qv = net.g.value(qy);
            (0..n)
                .map(|r| pv.get(r, y[r]) * (1.0 / qv.get(r, 0)).min(obj.weight_clip))
                .collect()
        }
    };
    let w = net.input(Matrix::from_vec(n, 1, weights.clone()));

    let x_hat = net.dec_x(xs, xz)?;
    let lp_x = net.gauss_logpdf_fixed(xv, x_hat, cfg.decoder_std);
    let xs_hat = net.dec_xs(s)?;
    let lp_xs = net.gauss_logpdf_fixed(xs, xs_hat, cfg.decoder_std);
    let xz_hat = net.dec_xz(z)?;
    let lp_xz = net.gauss_logpdf_fixed(xz, xz_hat, cfg.decoder_std);
    let (ps_mean, ps_std) = net.prior_s(z, c)?;
    let lp_s = net.gauss_logpdf(s, ps_mean, ps_std);
    let lp_z = net.std_normal_logpdf(z);
    let lp_c = net.std_normal_logpdf(c);

    let rows = [
        ("recon_x", net.g.neg(lp_x)),
        ("recon_xs", net.g.neg(lp_xs)),
        ("recon_xz", net.g.neg(lp_xz)),
        ("kl_s", net.g.sub(lat.s.log_q, lp_s)),
        ("kl_z", net.g.sub(lat.z.log_q, lp_z)),
        ("kl_c", net.g.sub(lat.c.log_q, lp_c)),
    ];
    let mut per_example: Vec<f64> = net.g.value(log_qy).data().to_vec();
    let mut means = Vec::with_capacity(rows.len());
    for (name, term) in rows {
        let weighted = net.g.mul(term, w);
        for (acc, v) in per_example.iter_mut().zip(net.g.value(weighted).data()) {
            *acc -= v;
        }
        let m = net.g.mean(weighted);
        means.push((name, m));
    }
    let mut elbo_weighted = means[0].1;
    for &(_, m) in &means[1..] {
        elbo_weighted = net.g.add(elbo_weighted, m);
    }

    let ic = if terms == Terms::Total && cfg.causal_mode == CausalMode::Weak {
        Some(intervention_term(net, q, xs, xz, noise, obj)?)
    } else {
        None
    };
    let mut total = net.g.add(ce, elbo_weighted);
    if let Some(ic) = ic {
        total = net.g.add(total, ic);
    }

    let val = |v: Var| net.g.value(v).item();
    let named: Vec<(&str, f64)> = std::iter::once(("ce", val(ce)))
        .chain(means.iter().map(|&(n, m)| (n, val(m))))
        .chain(ic.map(|v| ("ic", val(v))))
        .collect();
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::numeric("loss", format!("term `{name}` is not finite")));
    }
    let get = |k: &str| named.iter().find(|(n, _)| *n == k).map_or(0.0, |&(_, v)| v);
    let breakdown = LossBreakdown {
        ce: get("ce"),
        elbo_weighted: val(elbo_weighted),
        recon_x: get("recon_x"),
        recon_xs: get("recon_xs"),
        recon_xz: get("recon_xz"),
        kl_s: get("kl_s"),
        kl_z: get("kl_z"),
        kl_c: get("kl_c"),
        ic: get("ic"),
        total: val(total),
    };
    Ok(Built {
        total,
        breakdown,
        per_example,
        weights,
    })
}

/// The weighted ELBO objective; `ic` is always 0.
pub fn elbo_loss(params: &ModelParams, x: &Matrix, labels: &[i64], noise: &LossNoise, obj: &ObjectiveConfig) -> Result<LossBreakdown> {
    check_batch(params, x, noise)?;
    let mut net = Net::new(params);
    Ok(build(&mut net, x, labels, noise, obj, Terms::Elbo, None)?.breakdown)
}

/// Per-example `log q(y|x) + w * (log-joint - log q)` for the ELBO draw in
/// `noise`; the batch mean is `-(ce + elbo_weighted)`.
pub fn elbo_per_example(params: &ModelParams, x: &Matrix, labels: &[i64], noise: &LossNoise, obj: &ObjectiveConfig) -> Result<Vec<f64>> {
    check_batch(params, x, noise)?;
    let mut net = Net::new(params);
    Ok(build(&mut net, x, labels, noise, obj, Terms::Elbo, None)?.per_example)
}

/// The detached per-example ELBO weights `p(y | c, x_s) * min(1 / q(y | x), clip)`.
pub fn elbo_weights(params: &ModelParams, x: &Matrix, labels: &[i64], noise: &LossNoise, obj: &ObjectiveConfig) -> Result<Vec<f64>> {
    check_batch(params, x, noise)?;
    let mut net = Net::new(params);
    Ok(build(&mut net, x, labels, noise, obj, Terms::Elbo, None)?.weights)
}

/// Batch-mean KL between the predictive distribution on `(x_s, x_z)` and on
/// `(x_s, x_z + scale * eps)`, with the same latent draws for both passes.
pub fn intervention_loss(params: &ModelParams, x: &Matrix, scale: f64, noise: &LossNoise, obj: &ObjectiveConfig) -> Result<f64> {
    if !(scale.is_finite() && scale >= 0.0) {
        return Err(Error::validation("intervention scale must be finite and nonnegative"));
    }
    check_batch(params, x, noise)?;
    let obj = ObjectiveConfig {
        intervention_scale: scale,
        ..obj.clone()
    };
    let mut net = Net::new(params);
    let xv = net.input(x.clone());
    let (xs, xz) = net.split(xv)?;
    let clean = net.predictive(xs, xz, &noise.predict)?;
    let ic = intervention_term(&mut net, clean, xs, xz, noise, &obj)?;
    Ok(net.g.value(ic).item())
}

/// ELBO plus, in the weak causal mode, the intervention penalty.
pub fn total_loss(params: &ModelParams, x: &Matrix, labels: &[i64], obj: &ObjectiveConfig, noise: &LossNoise) -> Result<LossBreakdown> {
    total_loss_with_weights(params, x, labels, obj, noise, None)
}

/// `total_loss` with optional externally fixed ELBO weights.
pub fn total_loss_with_weights(
    params: &ModelParams,
    x: &Matrix,
    labels: &[i64],
    obj: &ObjectiveConfig,
    noise: &LossNoise,
    weights: Option<&[f64]>,
) -> Result<LossBreakdown> {
    check_batch(params, x, noise)?;
    let mut net = Net::new(params);
    Ok(build(&mut net, x, labels, noise, obj, Terms::Total, weights)?.breakdown)
}

/// `total_loss` and its gradient for every parameter array. The ELBO weights
/// are constants for differentiation; pass them to hold them fixed.
pub fn loss_and_gradients(
    params: &ModelParams,
    x: &Matrix,
    labels: &[i64],
    obj: &ObjectiveConfig,
    noise: &LossNoise,
    weights: Option<&[f64]>,
) -> Result<(LossBreakdown, ParamGradients)> {
    check_batch(params, x, noise)?;
    let mut net = Net::new(params);
    let built = build(&mut net, x, labels, noise, obj, Terms::Total, weights)?;
    let grads = net.param_gradients(built.total);
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
        return Err(Error::numeric("gradient", format!("array `{name}` has a non-finite gradient")));
    }
    Ok((built.breakdown, grads))
}
