//! Graph construction for every conditional of the model.

use std::collections::BTreeMap;
use super::params::{bias_name, component_shapes, layer_widths, weight_name};
use super::{CausalMode, LatentNoise, ModelConfig, ModelParams};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub(crate) const STD_FLOOR: f64 = 1e-4;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Mixture head on the tape.
pub(crate) struct HeadVars {
    pub latent: Var,
    pub log_q: Var,
    pub log_weights: Var,
    pub means: Vec<Var>,
    pub stds: Vec<Var>,
}

pub(crate) struct LatentVars {
    pub s: HeadVars,
    pub z: HeadVars,
    pub c: HeadVars,
}

impl LatentVars {
    pub fn log_q(&self, g: &mut Graph) -> Var {
        let sz = g.add(self.s.log_q, self.z.log_q);
        g.add(sz, self.c.log_q)
    }
}

pub(crate) struct Net<'p> {
    pub g: Graph,
    pub vars: BTreeMap<String, Var>,
    pub cfg: &'p ModelConfig,
    widths: BTreeMap<&'static str, Vec<usize>>,
}

impl<'p> Net<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        let mut g = Graph::new();
        let vars = params
            .iter()
            .map(|(name, a)| (name.to_string(), g.param(a.to_matrix())))
            .collect();
        let cfg = &params.config;
        let widths = component_shapes(cfg)
            .iter()
            .map(|c| (c.name, layer_widths(cfg, c)))
            .collect();
        Self { g, vars, cfg, widths }
    }

    /// Gradient of the scalar `out` for every parameter array; arrays the
    /// output does not depend on get zeros.
    pub fn param_gradients(&self, out: Var) -> BTreeMap<String, Matrix> {
        let grads = self.g.backward(out);
        self.vars
            .iter()
            .map(|(name, &v)| {
                let (r, c) = self.g.shape(v);
                let g = grads.get(v).cloned().unwrap_or_else(|| Matrix::zeros(r, c));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.g.constant(m)
    }

    fn check_width(&self, component: &str, input: Var) -> Result<()> {
        let expected = self.widths[component][0];
        let got = self.g.shape(input).1;
        if got != expected {
            return Err(Error::shape(format!("{component} expects width {expected}, got {got}")));
        }
        Ok(())
    }

    /// tanh MLP with a linear output layer.
    pub fn mlp(&mut self, component: &'static str, input: Var) -> Result<Var> {
        self.check_width(component, input)?;
        let layers = self.widths[component].len() - 1;
        let mut h = input;
        for l in 0..layers {
            let w = self.vars[&weight_name(component, l)];
            let b = self.vars[&bias_name(component, l)];
            let lin = self.g.matmul(h, w);
            h = self.g.add_row(lin, b);
            if l + 1 < layers {
                h = self.g.tanh(h);
            }
        }
        if !self.g.value(h).is_finite() {
            return Err(Error::numeric(component, "non-finite output"));
        }
        Ok(h)
    }

    pub fn split(&mut self, x: Var) -> Result<(Var, Var)> {
        let out = self.mlp("splitter", x)?;
        let xs_w = self.cfg.xs_width();
        let xs = self.g.slice_cols(out, 0, xs_w);
        let xz = self.g.slice_cols(out, xs_w, self.cfg.xz_width());
        Ok((xs, xz))
    }

    fn positive_std(&mut self, pre: Var) -> Var {
        let sp = self.g.softplus(pre);
        self.g.add_scalar(sp, STD_FLOOR)
    }

    /// Row sums of the diagonal Gaussian log-density `log N(x; mean, std)`.
    pub fn gauss_logpdf(&mut self, x: Var, mean: Var, std: Var) -> Var {
        let d = self.g.sub(x, mean);
        let u = self.g.div(d, std);
        let sq = self.g.square(u);
        let half = self.g.scale(sq, -0.5);
        let ls = self.g.ln(std);
        let t = self.g.sub(half, ls);
        let t = self.g.add_scalar(t, -HALF_LN_2PI);
        self.g.row_sum(t)
    }

    /// Same with a constant scalar std.
    pub fn gauss_logpdf_fixed(&mut self, x: Var, mean: Var, std: f64) -> Var {
        let width = self.g.shape(x).1 as f64;
        let d = self.g.sub(x, mean);
        let sq = self.g.square(d);
        let q = self.g.scale(sq, -0.5 / (std * std));
        let r = self.g.row_sum(q);
        self.g.add_scalar(r, -width * (std.ln() + HALF_LN_2PI))
    }

    pub fn std_normal_logpdf(&mut self, x: Var) -> Var {
        let width = self.g.shape(x).1 as f64;
        let sq = self.g.square(x);
        let q = self.g.scale(sq, -0.5);
        let r = self.g.row_sum(q);
        self.g.add_scalar(r, -width * HALF_LN_2PI)
    }

    fn mixture(
        &mut self,
        component: &'static str,
        input: Var,
        dim: usize,
        eps: &Matrix,
        pick: Option<Vec<f64>>,
    ) -> Result<HeadVars> {
        let k = self.cfg.mixture_components;
        let n = self.g.shape(input).0;
        if eps.shape() != (n, dim) {
            return Err(Error::shape(format!(
                "{component} noise has shape {:?}, expected ({n}, {dim})",
                eps.shape()
            )));
        }
        let out = self.mlp(component, input)?;
        let logits = self.g.slice_cols(out, 0, k);
        let log_weights = self.g.log_softmax_rows(logits);
        let mut means = Vec::with_capacity(k);
        let mut stds = Vec::with_capacity(k);
        for j in 0..k {
            means.push(self.g.slice_cols(out, k + j * dim, dim));
            let pre = self.g.slice_cols(out, k + k * dim + j * dim, dim);
            stds.push(self.positive_std(pre));
        }
        let eps = self.g.constant(eps.clone());

        let (mean, std) = if k == 1 {
            (means[0], stds[0])
        } else {
            // straight-through: forward value is the one-hot choice, the
            // backward pass sees the soft weights
            let weights = self.g.exp(log_weights);
            let hard = hard_choice(self.g.value(weights), pick.as_deref());
            let hard = self.g.constant(hard);
            let frozen = self.g.detach(weights);
            let delta = self.g.sub(weights, frozen);
            let sel = self.g.add(hard, delta);
            let mut mean = None;
            let mut std = None;
            for j in 0..k {
                let col = self.g.slice_cols(sel, j, 1);
                let m = self.g.mul_col(means[j], col);
                let s = self.g.mul_col(stds[j], col);
                mean = Some(mean.map_or(m, |acc| self.g.add(acc, m)));
                std = Some(std.map_or(s, |acc| self.g.add(acc, s)));
            }
            (mean.expect("k >= 1"), std.expect("k >= 1"))
        };
        let scaled = self.g.mul(std, eps);
        let latent = self.g.add(mean, scaled);

        let mut comps = Vec::with_capacity(k);
        for j in 0..k {
            let lp = self.gauss_logpdf(latent, means[j], stds[j]);
            let lw = self.g.slice_cols(log_weights, j, 1);
            comps.push(self.g.add(lp, lw));
        }
        let stacked = self.g.concat_cols(&comps);
        let log_q = self.g.logsumexp_rows(stacked);
        Ok(HeadVars {
            latent,
            log_q,
            log_weights,
            means,
            stds,
        })
    }

    pub fn infer(&mut self, xs: Var, xz: Var, noise: &LatentNoise) -> Result<LatentVars> {
        let n = self.g.shape(xs).0;
        if noise.rows() != n {
            return Err(Error::shape(format!("noise has {} rows for a batch of {n}", noise.rows())));
        }
        let pick = |col: usize| noise.pick.as_ref().map(|p| (0..n).map(|r| p.get(r, col)).collect::<Vec<_>>());
        let s_in = match self.cfg.causal_mode {
            CausalMode::None => xs,
            CausalMode::Strong | CausalMode::Weak => self.g.concat_cols(&[xs, xz]),
        };
        let s = self.mixture("head_s", s_in, self.cfg.dim_s, &noise.eps_s, pick(0))?;
        let z_in = self.g.concat_cols(&[xz, s.latent]);
        let z = self.mixture("head_z", z_in, self.cfg.dim_z, &noise.eps_z, pick(1))?;
        let c = self.mixture("head_c", s.latent, self.cfg.dim_c, &noise.eps_c, pick(2))?;
        Ok(LatentVars { s, z, c })
    }

    pub fn classifier_logits(&mut self, c: Var, xs: Var) -> Result<Var> {
        let input = self.g.concat_cols(&[c, xs]);
        self.mlp("classifier", input)
    }

    /// Mean of classifier softmax outputs over the latent draws.
    pub fn predictive(&mut self, xs: Var, xz: Var, draws: &[LatentNoise]) -> Result<Var> {
        if draws.is_empty() {
            return Err(Error::validation("predict needs at least one noise draw"));
        }
        let mut acc: Option<Var> = None;
        for noise in draws {
            let lat = self.infer(xs, xz, noise)?;
            let logits = self.classifier_logits(lat.c.latent, xs)?;
            let p = self.g.softmax_rows(logits);
            acc = Some(acc.map_or(p, |a| self.g.add(a, p)));
        }
        Ok(self.g.scale(acc.expect("nonempty"), 1.0 / draws.len() as f64))
    }

    /// Mean and std of `p(s | z, c)` (or `p(s | c)`).
    pub fn prior_s(&mut self, z: Var, c: Var) -> Result<(Var, Var)> {
        let input = match self.cfg.causal_mode {
            CausalMode::None => c,
            CausalMode::Strong | CausalMode::Weak => self.g.concat_cols(&[z, c]),
        };
        let out = self.mlp("prior_s", input)?;
        let d = self.cfg.dim_s;
        let mean = self.g.slice_cols(out, 0, d);
        let pre = self.g.slice_cols(out, d, d);
        Ok((mean, self.positive_std(pre)))
    }

    pub fn dec_xs(&mut self, s: Var) -> Result<Var> {
        self.mlp("dec_xs", s)
    }

    pub fn dec_xz(&mut self, z: Var) -> Result<Var> {
        self.mlp("dec_xz", z)
    }

    pub fn dec_x(&mut self, xs: Var, xz: Var) -> Result<Var> {
        let input = self.g.concat_cols(&[xs, xz]);
        self.mlp("dec_x", input)
    }
}

/// One-hot component choice per row: inverse CDF of `pick`, or argmax.
fn hard_choice(weights: &Matrix, pick: Option<&[f64]>) -> Matrix {
    let (n, k) = weights.shape();
    let mut out = Matrix::zeros(n, k);
    for r in 0..n {
        let row = weights.row(r);
        let j = match pick {
            Some(u) => {
                let mut acc = 0.0;
                let mut chosen = k - 1;
                for (j, &w) in row.iter().enumerate() {
                    acc += w;
                    if u[r] < acc {
                        chosen = j;
                        break;
                    }
                }
                chosen
            }
            None => {
                let mut best = 0;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            }
        };
        out.set(r, j, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn half_log_two_pi_constant() {
        assert!((HALF_LN_2PI - 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn hard_choice_inverse_cdf() {
        let w = Matrix::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.2, 0.5, 0.3]]);
        let h = hard_choice(&w, Some(&[0.1, 0.75]));
        assert_eq!(h.row(0), &[1.0, 0.0, 0.0]);
        assert_eq!(h.row(1), &[0.0, 0.0, 1.0]);
        let a = hard_choice(&w, None);
        assert_eq!(a.row(0), &[0.0, 1.0, 0.0]);
    }
}
