//! Synthetic data realizing the causal graph, shifted evaluation sets,
//! non-IID partitioning and Fourier amplitude mixing.

mod corruption;
mod fourier;
mod io;
mod partition;
mod scm;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub use corruption::{apply_corruption, Corruption};
pub use fourier::{fourier_augment, FourierPlan};
pub use io::{load_dataset, save_dataset, DatasetMeta};
pub use partition::{dirichlet_partition, label_histogram, total_variation, PartitionSpec};
pub use scm::{
    generate_scm_dataset, make_semantic_ood, InvertibleMixing, ScmMechanism, ScmSample, ScmSpec,
    COMPONENT_STD,
};

/// Which data regime a dataset belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DistributionTag {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "ID-C")]
    CovariateShift,
    #[serde(rename = "ID-S")]
    SemanticShift,
}

/// Label assigned to every semantic-shift example.
pub const OOD_LABEL: i64 = -1;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    dim: usize,
    features: Vec<f32>,
    labels: Vec<i64>,
    pub tag: DistributionTag,
    pub provenance: String,
}

impl LabeledDataset {
    pub fn new(
        dim: usize,
        features: Vec<f32>,
        labels: Vec<i64>,
        tag: DistributionTag,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("dataset feature dimension must be positive"));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::shape(format!(
                "{} feature values cannot form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        Ok(Self {
            dim,
            features,
            labels,
            tag,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn labels(&self) -> &[i64] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// All features widened to `f64`.
    pub fn feature_matrix(&self) -> Matrix {
        Matrix::from_vec(
            self.len(),
            self.dim,
            self.features.iter().map(|&v| f64::from(v)).collect(),
        )
    }

    pub fn rows_matrix(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend(self.row(i).iter().map(|&v| f64::from(v)));
        }
        Matrix::from_vec(indices.len(), self.dim, data)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            dim: self.dim,
            features,
            labels,
            tag: self.tag,
            provenance: format!("{}; subset(n={})", self.provenance, indices.len()),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &LabeledDataset) -> Result<LabeledDataset> {
        if self.dim != other.dim {
            return Err(Error::shape("concatenating datasets of different widths"));
        }
        let mut out = self.clone();
        out.features.extend_from_slice(&other.features);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }

    pub(crate) fn with_features(&self, features: Matrix, tag: DistributionTag, note: &str) -> Self {
        debug_assert_eq!(features.shape(), (self.len(), self.dim));
        LabeledDataset {
            dim: self.dim,
            features: features.data().iter().map(|&v| v as f32).collect(),
            labels: self.labels.clone(),
            tag,
            provenance: format!("{}; {note}", self.provenance),
        }
    }
}
