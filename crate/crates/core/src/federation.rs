//! Simulated federated training: local SGD on each client and weighted
//! parameter averaging on the server.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fourier_augment, LabeledDataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::objective::{loss_and_gradients, LossBreakdown, LossNoise, ObjectiveConfig};
use crate::rng::{derive_seed, derived_rng};
use crate::tensor::Matrix;

fn default_learning_rate() -> f64 {
    0.001
}
fn default_fraction() -> f64 {
    1.0
}
fn default_fourier() -> f64 {
    0.5
}
fn default_max_grad_norm() -> Option<f64> {
    Some(10.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub num_clients: usize,
    #[serde(default = "default_fraction")]
    pub participation_fraction: f64,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default = "default_fourier")]
    pub fourier_mix_ratio: f64,
    /// Global L2 norm the gradient is rescaled to when it exceeds it;
    /// `None` disables clipping.
    #[serde(default = "default_max_grad_norm")]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    /// Run the clients of a round on the rayon pool.
    #[serde(default)]
    pub parallel: bool,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.local_epochs == 0 || self.batch_size == 0 || self.num_clients == 0 {
            return Err(Error::validation("local_epochs, batch_size and num_clients must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::validation("learning_rate must be finite and nonnegative"));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::validation("participation_fraction must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.fourier_mix_ratio) {
            return Err(Error::validation("fourier_mix_ratio must lie in [0, 1]"));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::validation("max_grad_norm must be finite and positive"));
            }
        }
        self.objective.validate()
    }

    pub fn participants_per_round(&self) -> usize {
        ((self.participation_fraction * self.num_clients as f64).ceil() as usize).clamp(1, self.num_clients)
    }
}

#[derive(Clone, Debug)]
pub struct ClientUpdate {
    pub params: ModelParams,
    /// Loss at the last local step.
    pub last_loss: LossBreakdown,
    pub steps: usize,
}

/// Shuffled mini-batches of `0..n` for one local epoch.
fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived_rng(seed, "shuffle", &[epoch as u64]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// The features a local step trains on: Fourier-mixed when enabled and the
/// batch has at least two rows.
fn step_features(data: &LabeledDataset, batch: &[usize], cfg: &FederationConfig, seed: u64, epoch: usize, step: usize) -> Result<Matrix> {
    let x = data.rows_matrix(batch);
    if cfg.fourier_mix_ratio > 0.0 && batch.len() >= 2 {
        fourier_augment(&x, cfg.fourier_mix_ratio, derive_seed(seed, "fourier", &[epoch as u64, step as u64]))
    } else {
        Ok(x)
    }
}

fn sgd_step(params: &mut ModelParams, grads: &BTreeMap<String, Matrix>, lr: f64, max_norm: Option<f64>) -> Result<()> {
    let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::numeric("sgd", "non-finite gradient"));
    }
    let lr = match max_norm {
        Some(c) if norm > c => lr * c / norm,
        _ => lr,
    };
    for (name, g) in grads {
        let a = params.get_mut(name).expect("gradient for a known array");
        for (v, d) in a.data.iter_mut().zip(g.data()) {
            *v = (f64::from(*v) - lr * d) as f32;
        }
    }
    Ok(())
}

/// Local training from a copy of `global`: `local_epochs` passes of
/// mini-batch SGD on the total loss.
pub fn client_update(global: &ModelParams, data: &LabeledDataset, cfg: &FederationConfig, seed: u64) -> Result<ClientUpdate> {
    if data.is_empty() {
        return Err(Error::validation("client has no data"));
    }
    let mut params = global.clone();
    let mut last_loss = LossBreakdown::default();
    let mut steps = 0;
    for epoch in 0..cfg.local_epochs {
        for (b, batch) in epoch_batches(data.len(), cfg.batch_size, seed, epoch).iter().enumerate() {
            let x = step_features(data, batch, cfg, seed, epoch, b)?;
            let labels: Vec<i64> = batch.iter().map(|&i| data.labels()[i]).collect();
            let mut rng = derived_rng(seed, "noise", &[epoch as u64, b as u64]);
            let noise = LossNoise::sample(&params.config, batch.len(), &mut rng);
            let (loss, grads) = loss_and_gradients(&params, &x, &labels, &cfg.objective, &noise, None)?;
            sgd_step(&mut params, &grads, cfg.learning_rate, cfg.max_grad_norm)?;
            last_loss = loss;
            steps += 1;
        }
    }
    Ok(ClientUpdate {
        params,
        last_loss,
        steps,
    })
}

/// Weighted elementwise mean of the client parameters, with weights
/// renormalized to sum to one.
pub fn fedavg_aggregate(clients: &[ModelParams], weights: &[f64]) -> Result<ModelParams> {
    let first = clients.first().ok_or_else(|| Error::validation("no client parameters to aggregate"))?;
    if weights.len() != clients.len() {
        return Err(Error::validation("one weight per client is required"));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::validation("aggregation weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::validation("aggregation weights are all zero"));
    }
    for (k, c) in clients.iter().enumerate().skip(1) {
        for (name, a) in first.iter() {
            match c.get(name) {
                Some(b) if b.shape == a.shape => {}
                Some(b) => {
                    return Err(Error::Aggregation {
                        name: name.to_string(),
                        detail: format!("client {k} has shape {:?}, expected {:?}", b.shape, a.shape),
                    })
                }
                None => {
                    return Err(Error::Aggregation {
                        name: name.to_string(),
                        detail: format!("missing from client {k}"),
                    })
                }
            }
        }
        if let Some(extra) = c.names().find(|n| first.get(n).is_none()) {
            return Err(Error::Aggregation {
                name: extra.to_string(),
                detail: format!("present only in client {k}"),
            });
        }
    }
    let w: Vec<f64> = weights.iter().map(|v| v / total).collect();
    let mut out = first.clone();
    let names: Vec<String> = first.names().map(String::from).collect();
    for name in names {
        let len = first.get(&name).expect("known").data.len();
        let mut acc = vec![0.0f64; len];
        for (c, &wk) in clients.iter().zip(&w) {
            for (a, &v) in acc.iter_mut().zip(&c.get(&name).expect("checked").data) {
                *a += wk * f64::from(v);
            }
        }
        let dst = out.get_mut(&name).expect("known");
        for (d, a) in dst.data.iter_mut().zip(acc) {
            *d = a as f32;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    pub client_losses: Vec<LossBreakdown>,
    /// Aggregation weights actually applied, aligned with `participants`.
    pub weights: Vec<f64>,
    pub wall_time_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct TrainingLog {
    pub records: Vec<RoundRecord>,
    pub final_params: ModelParams,
}

impl TrainingLog {
    /// One JSON object per round.
    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Called after each round's aggregation with the round index and the new
/// global parameters.
pub type EvalHook<'a> = dyn FnMut(usize, &ModelParams) -> Result<Option<serde_json::Value>> + 'a;

pub fn client_seed(master: u64, round: usize, client: usize) -> u64 {
    derive_seed(master, "client", &[round as u64, client as u64])
}

pub fn sample_participants(cfg: &FederationConfig, round: usize) -> Vec<usize> {
    let mut all: Vec<usize> = (0..cfg.num_clients).collect();
    if cfg.participants_per_round() < cfg.num_clients {
        all.shuffle(&mut derived_rng(cfg.seed, "participants", &[round as u64]));
        all.truncate(cfg.participants_per_round());
        all.sort_unstable();
    }
    all
}

/// Runs `rounds` rounds starting from `init_params(model, derive_seed(seed, "init"))`.
pub fn run_federation(
    cfg: &FederationConfig,
    model: &ModelConfig,
    partition: &PartitionSpec,
    train: &LabeledDataset,
    hook: Option<&mut EvalHook<'_>>,
) -> Result<TrainingLog> {
    let init = init_params(model, derive_seed(cfg.seed, "init", &[]))?;
    run_federation_from(cfg, init, partition, train, hook)
}

pub fn run_federation_from(
    cfg: &FederationConfig,
    init: ModelParams,
    partition: &PartitionSpec,
    train: &LabeledDataset,
    hook: Option<&mut EvalHook<'_>>,
) -> Result<TrainingLog> {
    run_federation_streaming(cfg, init, partition, train, hook, &mut |_| Ok(()))
}

/// As [`run_federation_from`], handing every round record to `sink` as soon
/// as the round completes.
pub fn run_federation_streaming(
    cfg: &FederationConfig,
    init: ModelParams,
    partition: &PartitionSpec,
    train: &LabeledDataset,
    mut hook: Option<&mut EvalHook<'_>>,
    sink: &mut dyn FnMut(&RoundRecord) -> Result<()>,
) -> Result<TrainingLog> {
    cfg.validate()?;
    if partition.num_clients() != cfg.num_clients {
        return Err(Error::validation(format!(
            "partition has {} clients, config expects {}",
            partition.num_clients(),
            cfg.num_clients
        )));
    }
    partition.validate(train.len())?;
    let shards: Vec<LabeledDataset> = partition.client_indices.iter().map(|idx| train.subset(idx)).collect();

    let mut global = init;
    let mut records = Vec::with_capacity(cfg.rounds);
    for round in 0..cfg.rounds {
        let start = Instant::now();
        let participants = sample_participants(cfg, round);
        let run = |&k: &usize| client_update(&global, &shards[k], cfg, client_seed(cfg.seed, round, k));
        let updates: Vec<ClientUpdate> = if cfg.parallel {
            participants.par_iter().map(run).collect::<Result<_>>()?
        } else {
            participants.iter().map(run).collect::<Result<_>>()?
        };
        let sizes: Vec<f64> = participants.iter().map(|&k| shards[k].len() as f64).collect();
        let total: f64 = sizes.iter().sum();
        let weights: Vec<f64> = sizes.iter().map(|s| s / total).collect();
        let client_params: Vec<ModelParams> = updates.iter().map(|u| u.params.clone()).collect();
        global = fedavg_aggregate(&client_params, &weights)?;
        let eval = match hook.as_mut() {
            Some(h) => h(round, &global)?,
            None => None,
        };
        let record = RoundRecord {
            round,
            participants,
            client_losses: updates.iter().map(|u| u.last_loss).collect(),
            weights,
            wall_time_secs: start.elapsed().as_secs_f64(),
            eval,
        };
        sink(&record)?;
        records.push(record);
    }
    Ok(TrainingLog {
        records,
        final_params: global,
    })
}

/// Sequential training on one dataset with the seeding `run_federation`
/// gives client 0 of a single-client federation.
pub fn train_centralized(init: ModelParams, data: &LabeledDataset, cfg: &FederationConfig) -> Result<ModelParams> {
    let mut params = init;
    for round in 0..cfg.rounds {
        params = client_update(&params, data, cfg, client_seed(cfg.seed, round, 0))?.params;
    }
    Ok(params)
}
