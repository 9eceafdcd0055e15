use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::json::{to_pretty, Precision};
use crate::data::{Corruption, ScmSpec};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::federation::FederationConfig;
use crate::model::{CausalMode, ModelConfig};
use crate::rng::derive_seed;

/// The shipped smoke-test configuration.
pub const SMOKE_CONFIG: &str = include_str!("../../../../configs/smoke.config");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionEntry {
    pub kind: Corruption,
    pub severity: u8,
}

fn default_ood_size() -> usize {
    500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train_size: usize,
    pub test_size: usize,
    #[serde(default = "default_ood_size")]
    pub ood_size: usize,
    /// Dirichlet concentration of the client partition.
    pub concentration: f64,
    /// Each entry `m` adds a covariate-shift set drawn with every coordinate
    /// of the style prior mean moved by `m`.
    #[serde(default)]
    pub style_shifts: Vec<f64>,
    /// Corrupted copies of the clean test set.
    #[serde(default)]
    pub corruptions: Vec<CorruptionEntry>,
}

fn default_dim_v() -> usize {
    2
}
fn default_theory_clients() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TheorySection {
    pub sigma_grid: Vec<f64>,
    pub prior_gap: f64,
    pub num_x: usize,
    #[serde(default = "default_dim_v")]
    pub dim_v: usize,
    #[serde(default = "default_theory_clients")]
    pub num_clients: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub scm: ScmSpec,
    pub model: ModelConfig,
    pub federation: FederationConfig,
    pub data: DataSection,
    #[serde(default)]
    pub evaluation: EvalConfig,
    /// Ablation sweep over causal modes. Empty means a single run with
    /// `model.causal_mode`.
    #[serde(default)]
    pub arms: Vec<CausalMode>,
    #[serde(default)]
    pub theory: Option<TheorySection>,
}

/// Command-line overrides of individual config fields.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub rounds: Option<usize>,
    pub clients: Option<usize>,
    pub concentration: Option<f64>,
    pub intervention_scale: Option<f64>,
    pub causal_mode: Option<CausalMode>,
    pub local_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn section<T>(path: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Validation(m) | Error::Shape(m) => config_err(path, m),
        other => other,
    })
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().to_string())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn smoke() -> Self {
        Self::from_json(SMOKE_CONFIG).expect("shipped smoke config parses")
    }

    /// Full-precision JSON, suitable for reloading.
    pub fn to_json(&self) -> Result<String> {
        to_pretty(self, Precision::RoundTrip)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.out {
            self.out_dir = Some(v.clone());
        }
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = o.rounds {
            self.federation.rounds = v;
        }
        if let Some(v) = o.clients {
            self.federation.num_clients = v;
        }
        if let Some(v) = o.concentration {
            self.data.concentration = v;
        }
        if let Some(v) = o.intervention_scale {
            self.federation.objective.intervention_scale = v;
        }
        if let Some(v) = o.causal_mode {
            self.model.causal_mode = v;
            self.arms.clear();
        }
        if let Some(v) = o.local_epochs {
            self.federation.local_epochs = v;
        }
        if let Some(v) = o.batch_size {
            self.federation.batch_size = v;
        }
        if let Some(v) = o.lr {
            self.federation.learning_rate = v;
        }
    }

    /// Fills every derived seed from the master seed and validates. The
    /// result is a fixed point: resolving it again changes nothing.
    pub fn resolve(mut self) -> Result<Self> {
        self.scm.mixing_seed = derive_seed(self.seed, "scm-mixing", &[]);
        self.federation.seed = derive_seed(self.seed, "federation", &[]);
        self.evaluation.seed = derive_seed(self.seed, "evaluation", &[]);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(config_err("name", "must be a nonempty single path component"));
        }
        section("scm", self.scm.validate())?;
        section("model", self.model.validate())?;
        section("federation", self.federation.validate())?;
        if self.model.dim_x != self.scm.dim_x {
            return Err(config_err("model.dim_x", format!("{} differs from scm.dim_x = {}", self.model.dim_x, self.scm.dim_x)));
        }
        if self.model.num_classes != self.scm.num_classes {
            return Err(config_err(
                "model.num_classes",
                format!("{} differs from scm.num_classes = {}", self.model.num_classes, self.scm.num_classes),
            ));
        }
        let d = &self.data;
        if d.train_size < self.federation.num_clients {
            return Err(config_err("data.train_size", "must be at least federation.num_clients"));
        }
        if d.test_size == 0 {
            return Err(config_err("data.test_size", "must be positive"));
        }
        if d.ood_size == 0 {
            return Err(config_err("data.ood_size", "must be positive"));
        }
        if !(d.concentration.is_finite() && d.concentration > 0.0) {
            return Err(config_err("data.concentration", "must be finite and positive"));
        }
        for (i, m) in d.style_shifts.iter().enumerate() {
            if !m.is_finite() || *m == 0.0 {
                return Err(config_err(&format!("data.style_shifts[{i}]"), "must be finite and nonzero"));
            }
        }
        for (i, c) in d.corruptions.iter().enumerate() {
            if !(1..=5).contains(&c.severity) {
                return Err(config_err(&format!("data.corruptions[{i}].severity"), "must lie in 1..=5"));
            }
        }
        if !(self.evaluation.tpr_target > 0.0 && self.evaluation.tpr_target <= 1.0) {
            return Err(config_err("evaluation.tpr_target", "must lie in (0, 1]"));
        }
        let mut seen = Vec::new();
        for (i, a) in self.arms.iter().enumerate() {
            if seen.contains(a) {
                return Err(config_err(&format!("arms[{i}]"), format!("duplicate arm `{a}`")));
            }
            seen.push(*a);
        }
        if let Some(t) = &self.theory {
            if t.sigma_grid.is_empty() {
                return Err(config_err("theory.sigma_grid", "must be nonempty"));
            }
            if let Some(i) = t.sigma_grid.iter().position(|s| !(s.is_finite() && *s >= 0.0)) {
                return Err(config_err(&format!("theory.sigma_grid[{i}]"), "must be finite and nonnegative"));
            }
            if !t.prior_gap.is_finite() {
                return Err(config_err("theory.prior_gap", "must be finite"));
            }
            if t.num_x == 0 || t.dim_v == 0 || t.num_clients == 0 {
                return Err(config_err("theory", "num_x, dim_v and num_clients must be positive"));
            }
        }
        Ok(())
    }

    /// The arms this config runs, in order.
    pub fn arm_modes(&self) -> Vec<CausalMode> {
        if self.arms.is_empty() {
            vec![self.model.causal_mode]
        } else {
            self.arms.clone()
        }
    }
}
