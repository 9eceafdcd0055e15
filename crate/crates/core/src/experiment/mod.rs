//! End-to-end experiments: configuration, seeded data generation, federated
//! training, evaluation, bound verification and artifact persistence.
//!
//! A single master `seed` fixes every random stream. Component seeds are
//! `derive_seed(seed, name, path)` with these names:
//!
//! | stream | name |
//! |---|---|
//! | mixing functions | `scm-mixing` |
//! | training set | `train` |
//! | clean test set | `test` |
//! | style-shift set `i` | `style-shift`, `[i]` |
//! | corruption set `i` | `corruption`, `[i]` |
//! | semantic-shift set | `semantic` |
//! | client partition | `partition` |
//! | federation (init, clients, sampling) | `federation` |
//! | evaluation draws | `evaluation` |
//! | bound verification | `theory` |

mod config;
pub mod json;
mod run;

pub use config::{CorruptionEntry, DataSection, ExperimentConfig, Overrides, TheorySection, SMOKE_CONFIG};
pub use run::{
    build_datasets, compare_runs, partition_stats, resolve_out_dir, run_experiment, run_theory, ArmResult,
    Comparison, ComparisonRow, ExperimentData, PartitionStats, RunSummary, ScoresFile,
};

#[cfg(test)]
mod tests;
