//! The generative and inference networks.
//!
//! A deterministic splitter maps `x` to invariant features `x_s` and variant
//! features `x_z`. Gaussian-mixture heads give `q(s | x_s)`, `q(z | x_z, s)`
//! and `q(c | s)`; the generative side holds `p(s | z, c)`, the three feature
//! decoders and the classifier `p(y | c, x_s)`. Every stochastic pass takes
//! its noise explicitly through [`LatentNoise`].

mod checkpoint;
pub(crate) mod network;
mod params;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Matrix;
use network::{HeadVars, Net};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use params::{component_shapes, init_params, param_layout, ComponentShape, ModelParams, ParamArray, COMPONENTS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CausalMode {
    /// `z` and `s` unlinked: `p(s | c)`.
    None,
    /// `z -> s`.
    Strong,
    /// `z -> s`, regularized by the interventional consistency loss.
    Weak,
}

impl CausalMode {
    pub const ALL: [CausalMode; 3] = [CausalMode::None, CausalMode::Strong, CausalMode::Weak];

    pub fn name(self) -> &'static str {
        match self {
            CausalMode::None => "none",
            CausalMode::Strong => "strong",
            CausalMode::Weak => "weak",
        }
    }
}

impl fmt::Display for CausalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CausalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CausalMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::validation(format!("unknown causal mode `{s}` (none, strong, weak)")))
    }
}

fn default_hidden_width() -> usize {
    32
}
fn default_hidden_layers() -> usize {
    2
}
fn default_mixture_components() -> usize {
    2
}
fn default_causal_mode() -> CausalMode {
    CausalMode::Weak
}
fn default_mc_samples() -> usize {
    4
}
fn default_decoder_std() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim_x: usize,
    pub dim_s: usize,
    pub dim_z: usize,
    pub dim_c: usize,
    pub num_classes: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    #[serde(default = "default_hidden_layers")]
    pub hidden_layers: usize,
    #[serde(default = "default_mixture_components")]
    pub mixture_components: usize,
    #[serde(default = "default_causal_mode")]
    pub causal_mode: CausalMode,
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    #[serde(default = "default_decoder_std")]
    pub decoder_std: f64,
}

impl ModelConfig {
    pub fn new(dim_x: usize, dim_s: usize, dim_z: usize, dim_c: usize, num_classes: usize) -> Self {
        Self {
            dim_x,
            dim_s,
            dim_z,
            dim_c,
            num_classes,
            hidden_width: default_hidden_width(),
            hidden_layers: default_hidden_layers(),
            mixture_components: default_mixture_components(),
            causal_mode: default_causal_mode(),
            mc_samples: default_mc_samples(),
            decoder_std: default_decoder_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim_s", self.dim_s),
            ("dim_z", self.dim_z),
            ("dim_c", self.dim_c),
            ("num_classes", self.num_classes),
            ("hidden_width", self.hidden_width),
            ("mixture_components", self.mixture_components),
            ("mc_samples", self.mc_samples),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        if self.dim_x < 2 {
            return Err(Error::validation("dim_x must be at least 2"));
        }
        if !(self.decoder_std.is_finite() && self.decoder_std > 0.0) {
            return Err(Error::validation("decoder_std must be finite and positive"));
        }
        Ok(())
    }

    /// Width of `x_s`; the first half of the splitter output.
    pub fn xs_width(&self) -> usize {
        self.dim_x - self.dim_x / 2
    }

    pub fn xz_width(&self) -> usize {
        self.dim_x / 2
    }

    pub fn latent_width(&self) -> usize {
        self.dim_s + self.dim_z + self.dim_c
    }
}

/// Reparameterization noise for a batch, one row per example.
///
/// `pick` holds one uniform per row and head (columns s, z, c) for the
/// component draw; `None` selects the heaviest component.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    pub eps_s: Matrix,
    pub eps_z: Matrix,
    pub eps_c: Matrix,
    pub pick: Option<Matrix>,
}

impl LatentNoise {
    pub fn zeros(cfg: &ModelConfig, n: usize) -> Self {
        Self {
            eps_s: Matrix::zeros(n, cfg.dim_s),
            eps_z: Matrix::zeros(n, cfg.dim_z),
            eps_c: Matrix::zeros(n, cfg.dim_c),
            pick: None,
        }
    }

    pub fn sample(cfg: &ModelConfig, n: usize, rng: &mut Rng) -> Self {
        let mut normal = |cols: usize| {
            Matrix::from_vec(n, cols, (0..n * cols).map(|_| rng.sample(StandardNormal)).collect())
        };
        let eps_s = normal(cfg.dim_s);
        let eps_z = normal(cfg.dim_z);
        let eps_c = normal(cfg.dim_c);
        let pick = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.random::<f64>()).collect());
        Self {
            eps_s,
            eps_z,
            eps_c,
            pick: Some(pick),
        }
    }

    pub fn rows(&self) -> usize {
        self.eps_s.rows()
    }

    /// Rows at `indices`.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        Self {
            eps_s: self.eps_s.select_rows(indices),
            eps_z: self.eps_z.select_rows(indices),
            eps_c: self.eps_c.select_rows(indices),
            pick: self.pick.as_ref().map(|p| p.select_rows(indices)),
        }
    }
}

/// Gaussian mixture emitted by one head, per example.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureHead {
    /// `n x K`.
    pub weights: Matrix,
    /// One `n x d` matrix per component.
    pub means: Vec<Matrix>,
    pub stds: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentSample {
    pub x_s: Matrix,
    pub x_z: Matrix,
    pub s: Matrix,
    pub z: Matrix,
    pub c: Matrix,
    pub head_s: MixtureHead,
    pub head_z: MixtureHead,
    pub head_c: MixtureHead,
    /// `log q(s, z, c | x)` for each row.
    pub log_q: Vec<f64>,
}

fn check_cols(what: &str, m: &Matrix, cols: usize) -> Result<()> {
    if m.cols() != cols {
        return Err(Error::shape(format!("{what} has width {}, expected {cols}", m.cols())));
    }
    Ok(())
}

fn column_vec(m: &Matrix) -> Vec<f64> {
    m.data().to_vec()
}

fn read_head(net: &Net<'_>, h: &HeadVars) -> MixtureHead {
    MixtureHead {
        weights: net.g.value(h.log_weights).map(f64::exp),
        means: h.means.iter().map(|&v| net.g.value(v).clone()).collect(),
        stds: h.stds.iter().map(|&v| net.g.value(v).clone()).collect(),
    }
}

pub fn split_features(params: &ModelParams, x: &Matrix) -> Result<(Matrix, Matrix)> {
    check_cols("x", x, params.config.dim_x)?;
    let mut net = Net::new(params);
    let xv = net.input(x.clone());
    let (xs, xz) = net.split(xv)?;
    Ok((net.g.value(xs).clone(), net.g.value(xz).clone()))
}

pub fn infer_latents(params: &ModelParams, x_s: &Matrix, x_z: &Matrix, noise: &LatentNoise) -> Result<LatentSample> {
    let cfg = &params.config;
    check_cols("x_s", x_s, cfg.xs_width())?;
    check_cols("x_z", x_z, cfg.xz_width())?;
    let mut net = Net::new(params);
    let xs = net.input(x_s.clone());
    let xz = net.input(x_z.clone());
    let lat = net.infer(xs, xz, noise)?;
    let log_q = lat.log_q(&mut net.g);
    Ok(LatentSample {
        x_s: x_s.clone(),
        x_z: x_z.clone(),
        s: net.g.value(lat.s.latent).clone(),
        z: net.g.value(lat.z.latent).clone(),
        c: net.g.value(lat.c.latent).clone(),
        head_s: read_head(&net, &lat.s),
        head_z: read_head(&net, &lat.z),
        head_c: read_head(&net, &lat.c),
        log_q: column_vec(net.g.value(log_q)),
    })
}

/// `p(y | c, x_s)` for each row.
pub fn classify(params: &ModelParams, c: &Matrix, x_s: &Matrix) -> Result<Matrix> {
    check_cols("c", c, params.config.dim_c)?;
    check_cols("x_s", x_s, params.config.xs_width())?;
    let mut net = Net::new(params);
    let cv = net.input(c.clone());
    let xv = net.input(x_s.clone());
    let logits = net.classifier_logits(cv, xv)?;
    let p = net.g.softmax_rows(logits);
    Ok(net.g.value(p).clone())
}

/// Decoder outputs for latents `s`, `z`. `x_hat` is generated from the
/// decoded features.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub x_s_hat: Matrix,
    pub x_z_hat: Matrix,
    pub x_hat: Matrix,
    pub std: f64,
}

fn fixed_gauss_rows(target: &Matrix, mean: &Matrix, std: f64) -> Result<Vec<f64>> {
    if target.shape() != mean.shape() {
        return Err(Error::shape(format!(
            "target shape {:?} does not match decoder output {:?}",
            target.shape(),
            mean.shape()
        )));
    }
    let norm = -(std.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
    Ok((0..target.rows())
        .map(|r| {
            target
                .row(r)
                .iter()
                .zip(mean.row(r))
                .map(|(t, m)| norm - 0.5 * ((t - m) / std).powi(2))
                .sum()
        })
        .collect())
}

impl Decoded {
    pub fn log_p_xs(&self, target: &Matrix) -> Result<Vec<f64>> {
        fixed_gauss_rows(target, &self.x_s_hat, self.std)
    }

    pub fn log_p_xz(&self, target: &Matrix) -> Result<Vec<f64>> {
        fixed_gauss_rows(target, &self.x_z_hat, self.std)
    }

    pub fn log_p_x(&self, target: &Matrix) -> Result<Vec<f64>> {
        fixed_gauss_rows(target, &self.x_hat, self.std)
    }
}

pub fn decode(params: &ModelParams, s: &Matrix, z: &Matrix) -> Result<Decoded> {
    check_cols("s", s, params.config.dim_s)?;
    check_cols("z", z, params.config.dim_z)?;
    let mut net = Net::new(params);
    let sv = net.input(s.clone());
    let zv = net.input(z.clone());
    let xs = net.dec_xs(sv)?;
    let xz = net.dec_xz(zv)?;
    let x = net.dec_x(xs, xz)?;
    Ok(Decoded {
        x_s_hat: net.g.value(xs).clone(),
        x_z_hat: net.g.value(xz).clone(),
        x_hat: net.g.value(x).clone(),
        std: params.config.decoder_std,
    })
}

/// Mean of `p(x | x_s, x_z)` for given features.
pub fn reconstruct_x(params: &ModelParams, x_s: &Matrix, x_z: &Matrix) -> Result<Matrix> {
    check_cols("x_s", x_s, params.config.xs_width())?;
    check_cols("x_z", x_z, params.config.xz_width())?;
    let mut net = Net::new(params);
    let xs = net.input(x_s.clone());
    let xz = net.input(x_z.clone());
    let x = net.dec_x(xs, xz)?;
    Ok(net.g.value(x).clone())
}

/// Mean and std of the latent prior `p(s | z, c)`, or `p(s | c)` when the
/// causal mode drops `z`.
pub fn prior_s(params: &ModelParams, z: &Matrix, c: &Matrix) -> Result<(Matrix, Matrix)> {
    check_cols("z", z, params.config.dim_z)?;
    check_cols("c", c, params.config.dim_c)?;
    let mut net = Net::new(params);
    let zv = net.input(z.clone());
    let cv = net.input(c.clone());
    let (m, s) = net.prior_s(zv, cv)?;
    Ok((net.g.value(m).clone(), net.g.value(s).clone()))
}

/// Vector-Jacobian product of [`prior_s`] with respect to its inputs:
/// gradients of `sum(d_mean * mean + d_std * std)` for `z` and `c`.
pub fn prior_s_input_gradients(
    params: &ModelParams,
    z: &Matrix,
    c: &Matrix,
    d_mean: &Matrix,
    d_std: &Matrix,
) -> Result<(Matrix, Matrix)> {
    check_cols("z", z, params.config.dim_z)?;
    check_cols("c", c, params.config.dim_c)?;
    let out_shape = (z.rows(), params.config.dim_s);
    if d_mean.shape() != out_shape || d_std.shape() != out_shape {
        return Err(Error::shape("cotangents must match the prior output shape"));
    }
    let mut net = Net::new(params);
    let zv = net.g.param(z.clone());
    let cv = net.g.param(c.clone());
    let (m, s) = net.prior_s(zv, cv)?;
    let dm = net.input(d_mean.clone());
    let ds = net.input(d_std.clone());
    let a = net.g.mul(m, dm);
    let b = net.g.mul(s, ds);
    let t = net.g.add(a, b);
    let out = net.g.sum(t);
    let grads = net.g.backward(out);
    let take = |v, like: &Matrix| grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(like.rows(), like.cols()));
    Ok((take(zv, z), take(cv, c)))
}

/// Monte-Carlo predictive `q(y | x)`: the classifier averaged over one latent
/// draw per entry of `draws`.
pub fn predict(params: &ModelParams, x: &Matrix, draws: &[LatentNoise]) -> Result<Matrix> {
    check_cols("x", x, params.config.dim_x)?;
    let mut net = Net::new(params);
    let xv = net.input(x.clone());
    let (xs, xz) = net.split(xv)?;
    let p = net.predictive(xs, xz, draws)?;
    Ok(net.g.value(p).clone())
}

/// `predict` with a single zero-noise draw.
pub fn predict_deterministic(params: &ModelParams, x: &Matrix) -> Result<Matrix> {
    predict(params, x, &[LatentNoise::zeros(&params.config, x.rows())])
}

/// `predict` with `config.mc_samples` fresh draws.
pub fn predict_sampled(params: &ModelParams, x: &Matrix, rng: &mut Rng) -> Result<Matrix> {
    let draws: Vec<LatentNoise> = (0..params.config.mc_samples)
        .map(|_| LatentNoise::sample(&params.config, x.rows(), rng))
        .collect();
    predict(params, x, &draws)
}
