use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CausalMode, ModelConfig};
use crate::error::{Error, Result};
use crate::rng::derived_rng;
use crate::tensor::Matrix;

/// One named parameter array, stored row-major as `f32`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamArray {
    pub shape: [usize; 2],
    pub data: Vec<f32>,
}

impl ParamArray {
    pub fn zeros(shape: [usize; 2]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape[0] * shape[1]],
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.shape[0],
            self.shape[1],
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
    }
}

/// Input and output widths of one component.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ComponentShape {
    pub name: &'static str,
    pub input: usize,
    pub output: usize,
}

pub const COMPONENTS: [&str; 9] = [
    "splitter",
    "head_s",
    "head_z",
    "head_c",
    "prior_s",
    "dec_xs",
    "dec_xz",
    "dec_x",
    "classifier",
];

pub fn component_shapes(cfg: &ModelConfig) -> Vec<ComponentShape> {
    let k = cfg.mixture_components;
    let (xs, xz) = (cfg.xs_width(), cfg.xz_width());
    let none = cfg.causal_mode == CausalMode::None;
    let shape = |name, input, output| ComponentShape { name, input, output };
    vec![
        shape("splitter", cfg.dim_x, cfg.dim_x),
        shape("head_s", if none { xs } else { xs + xz }, k * (1 + 2 * cfg.dim_s)),
        shape("head_z", xz + cfg.dim_s, k * (1 + 2 * cfg.dim_z)),
        shape("head_c", cfg.dim_s, k * (1 + 2 * cfg.dim_c)),
        shape("prior_s", if none { cfg.dim_c } else { cfg.dim_z + cfg.dim_c }, 2 * cfg.dim_s),
        shape("dec_xs", cfg.dim_s, xs),
        shape("dec_xz", cfg.dim_z, xz),
        shape("dec_x", xs + xz, cfg.dim_x),
        shape("classifier", cfg.dim_c + xs, cfg.num_classes),
    ]
}

/// Layer widths `[input, hidden.., output]` of a component.
pub(crate) fn layer_widths(cfg: &ModelConfig, c: &ComponentShape) -> Vec<usize> {
    let mut w = vec![c.input];
    w.extend(std::iter::repeat_n(cfg.hidden_width, cfg.hidden_layers));
    w.push(c.output);
    w
}

pub(crate) fn weight_name(component: &str, layer: usize) -> String {
    format!("{component}.l{layer}.weight")
}

pub(crate) fn bias_name(component: &str, layer: usize) -> String {
    format!("{component}.l{layer}.bias")
}

/// Every array name and shape implied by a config, in initialization order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, [usize; 2])> {
    let mut out = Vec::new();
    for c in component_shapes(cfg) {
        let w = layer_widths(cfg, &c);
        for l in 0..w.len() - 1 {
            out.push((weight_name(c.name, l), [w[l], w[l + 1]]));
            out.push((bias_name(c.name, l), [1, w[l + 1]]));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    arrays: BTreeMap<String, ParamArray>,
}

impl ModelParams {
    /// Builds parameters from explicit arrays, checking names and shapes
    /// against the config's layout.
    pub fn from_arrays(config: ModelConfig, arrays: BTreeMap<String, ParamArray>) -> Result<Self> {
        config.validate()?;
        let layout = param_layout(&config);
        if layout.len() != arrays.len() {
            return Err(Error::shape(format!(
                "expected {} parameter arrays, found {}",
                layout.len(),
                arrays.len()
            )));
        }
        for (name, shape) in &layout {
            let a = arrays
                .get(name)
                .ok_or_else(|| Error::shape(format!("missing parameter array `{name}`")))?;
            if a.shape != *shape || a.data.len() != shape[0] * shape[1] {
                return Err(Error::shape(format!(
                    "array `{name}` has shape {:?}, expected {shape:?}",
                    a.shape
                )));
            }
        }
        Ok(Self { config, arrays })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let arrays = param_layout(&config)
            .into_iter()
            .map(|(n, s)| (n, ParamArray::zeros(s)))
            .collect();
        Ok(Self { config, arrays })
    }

    pub fn get(&self, name: &str) -> Option<&ParamArray> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamArray> {
        self.arrays.get_mut(name)
    }

    pub fn arrays(&self) -> &BTreeMap<String, ParamArray> {
        &self.arrays
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamArray)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.arrays.values().map(|a| a.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.arrays.values().all(|a| a.data.iter().all(|v| v.is_finite()))
    }
}

/// He-normal weights, zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = derived_rng(seed, "init-params", &[]);
    let mut arrays = BTreeMap::new();
    for (name, shape) in param_layout(config) {
        let mut a = ParamArray::zeros(shape);
        if name.ends_with(".weight") {
            let normal = Normal::new(0.0, (2.0 / shape[0] as f64).sqrt()).expect("positive std");
            for v in &mut a.data {
                *v = normal.sample(&mut rng) as f32;
            }
        }
        arrays.insert(name, a);
    }
    Ok(ModelParams {
        config: config.clone(),
        arrays,
    })
}
