//! Label-skewed client partitions drawn from a Dirichlet prior.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derived_rng, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub client_indices: Vec<Vec<usize>>,
    pub concentration: f64,
    pub client_weights: Vec<f64>,
}

impl PartitionSpec {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn total_len(&self) -> usize {
        self.client_indices.iter().map(Vec::len).sum()
    }

    /// Checks disjoint coverage of `0..n` and data-size weights.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, idx) in self.client_indices.iter().enumerate() {
            for &i in idx {
                if i >= n || seen[i] {
                    return Err(Error::Partition {
                        client: k,
                        detail: format!("holds invalid or duplicated index {i}"),
                    });
                }
                seen[i] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::validation(format!("index {missing} is not assigned to any client")));
        }
        if self.client_weights.len() != self.client_indices.len() {
            return Err(Error::validation("one weight per client is required"));
        }
        Ok(())
    }
}

fn log_gamma_sample(shape: f64, rng: &mut Rng) -> f64 {
    // Gamma(a) = Gamma(a + 1) * U^(1/a); kept in log space so tiny shapes
    // do not underflow to zero.
    if shape < 1.0 {
        let g = Gamma::new(shape + 1.0, 1.0).expect("valid gamma shape").sample(rng);
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        g.ln() + u.ln() / shape
    } else {
        Gamma::new(shape, 1.0).expect("valid gamma shape").sample(rng).ln()
    }
}

fn log_normalize(logs: &mut [f64]) {
    let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logs.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for v in logs {
        *v -= lse;
    }
}

/// Largest-remainder split of `total` items by the given log weights.
fn apportion(total: usize, log_weights: &[f64]) -> Vec<usize> {
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_weights.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = w.iter().sum();
    let exact: Vec<f64> = w.iter().map(|v| v / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut remaining = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().cycle() {
        if remaining == 0 {
            break;
        }
        counts[k] += 1;
        remaining -= 1;
    }
    counts
}

/// Splits example indices among `num_clients` clients.
///
/// Each client draws class proportions `q_k ~ Dir(concentration / C, ...)`.
/// Every class is then divided among the clients in proportion to their
/// `q_k[j]`. Empty clients receive examples moved one at a time from the
/// currently largest client.
pub fn dirichlet_partition(
    labels: &[i64],
    num_clients: usize,
    concentration: f64,
    seed: u64,
) -> Result<PartitionSpec> {
    if num_clients == 0 {
        return Err(Error::validation("num_clients must be at least 1"));
    }
    if !(concentration.is_finite() && concentration > 0.0) {
        return Err(Error::validation("concentration must be finite and positive"));
    }
    if labels.is_empty() {
        return Err(Error::validation("cannot partition an empty label vector"));
    }
    if let Some(bad) = labels.iter().find(|&&l| l < 0) {
        return Err(Error::validation(format!("negative label {bad} cannot be partitioned")));
    }
    let num_classes = (*labels.iter().max().expect("nonempty") + 1) as usize;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    if let Some(j) = by_class.iter().position(Vec::is_empty) {
        return Err(Error::validation(format!("class {j} has no examples")));
    }

    let mut rng = derived_rng(seed, "dirichlet-partition", &[]);
    let shape = concentration / num_classes as f64;
    let proportions: Vec<Vec<f64>> = (0..num_clients)
        .map(|_| {
            let mut q: Vec<f64> = (0..num_classes).map(|_| log_gamma_sample(shape, &mut rng)).collect();
            log_normalize(&mut q);
            q
        })
        .collect();

    let mut clients: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (j, members) in by_class.iter_mut().enumerate() {
        members.shuffle(&mut rng);
        let column: Vec<f64> = proportions.iter().map(|q| q[j]).collect();
        let counts = apportion(members.len(), &column);
        let mut start = 0;
        for (k, count) in counts.into_iter().enumerate() {
            clients[k].extend_from_slice(&members[start..start + count]);
            start += count;
        }
    }

    while let Some(empty) = clients.iter().position(Vec::is_empty) {
        let donor = (0..num_clients)
            .max_by(|&a, &b| clients[a].len().cmp(&clients[b].len()).then(b.cmp(&a)))
            .expect("at least one client");
        if clients[donor].len() < 2 {
            return Err(Error::Partition {
                client: empty,
                detail: format!("is empty and no client has a surplus ({} examples total)", labels.len()),
            });
        }
        let pick = rng.random_range(0..clients[donor].len());
        let moved = clients[donor].swap_remove(pick);
        clients[empty].push(moved);
    }

    for c in &mut clients {
        c.sort_unstable();
    }
    let n = labels.len() as f64;
    let client_weights = clients.iter().map(|c| c.len() as f64 / n).collect();
    Ok(PartitionSpec {
        client_indices: clients,
        concentration,
        client_weights,
    })
}

/// Per-class counts of `labels` restricted to `indices`.
pub fn label_histogram(labels: &[i64], indices: &[usize], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for &i in indices {
        h[labels[i] as usize] += 1;
    }
    h
}

/// Total-variation distance between two count vectors, each normalized.
pub fn total_variation(a: &[usize], b: &[usize]) -> f64 {
    let sa: usize = a.iter().sum();
    let sb: usize = b.iter().sum();
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / sa as f64 - y as f64 / sb as f64).abs())
        .sum::<f64>()
}
