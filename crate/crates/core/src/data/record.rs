use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::config::{Modality, ModalitySpec};
use crate::model::genres::GenreSet;

/// One modality's `len × dim` feature matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    len: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureSequence {
    pub fn new(len: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if len.checked_mul(dim) != Some(data.len()) {
            return Err(Error::Data(format!(
                "feature sequence {len}x{dim} needs {} values, got {}",
                len.saturating_mul(dim),
                data.len()
            )));
        }
        Ok(FeatureSequence { len, dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        FeatureSequence {
            len: 0,
            dim,
            data: Vec::new(),
        }
    }

    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Data(format!("row width differs from {dim}")));
        }
        FeatureSequence::new(rows.len(), dim, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Rows at the given indices, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> FeatureSequence {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        FeatureSequence {
            len: indices.len(),
            dim: self.dim,
            data,
        }
    }

    /// The first `n` rows (all of them when shorter).
    pub fn head(&self, n: usize) -> FeatureSequence {
        let n = n.min(self.len);
        FeatureSequence {
            len: n,
            dim: self.dim,
            data: self.data[..n * self.dim].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub duration_s: Option<f64>,
    pub genres: GenreSet,
    pub features: BTreeMap<Modality, FeatureSequence>,
}

impl VideoRecord {
    pub fn feature(&self, m: Modality) -> Result<&FeatureSequence> {
        self.features
            .get(&m)
            .ok_or_else(|| Error::Data(format!("record {} has no {m} features", self.id)))
    }

    /// Checks the label set and that every spec'd modality is present with
    /// the configured width.
    pub fn validate(&self, specs: &[ModalitySpec]) -> Result<()> {
        if self.genres.is_empty() {
            return Err(Error::Data(format!("record {} has no genres", self.id)));
        }
        for spec in specs {
            let seq = self.feature(spec.name)?;
            if seq.dim() != spec.input_dim {
                return Err(Error::Data(format!(
                    "record {}: {} features have dim {}, expected {}",
                    self.id,
                    spec.name,
                    seq.dim(),
                    spec.input_dim
                )));
            }
        }
        Ok(())
    }
}
