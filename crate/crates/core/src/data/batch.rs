//! Fixed-length minibatches and unpadded single-sample inputs.

use crate::error::{Error, Result};
use crate::model::config::{Modality, ModalitySpec};
use crate::model::genres::NUM_GENRES;
use crate::data::record::VideoRecord;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModalityInput {
    pub modality: Modality,
    /// `[B, L, D]`, zero at padded positions.
    pub features: Tensor<f32>,
    /// `B*L` validity flags; false marks padding.
    pub mask: Vec<bool>,
}

impl ModalityInput {
    pub fn seq_len(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub inputs: Vec<ModalityInput>,
    /// `[B, 21]` of 0/1.
    pub labels: Tensor<f32>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn input(&self, m: Modality) -> Result<&ModalityInput> {
        self.inputs
            .iter()
            .find(|i| i.modality == m)
            .ok_or_else(|| Error::Data(format!("batch has no {m} input")))
    }
}

/// Pads or truncates every record to each spec's `train_max_len`, keeping
/// the head of long sequences.
pub fn make_batch(records: &[&VideoRecord], specs: &[ModalitySpec]) -> Result<Batch> {
    let lengths: Vec<usize> = specs.iter().map(|s| s.train_max_len).collect();
    build(records, specs, &lengths)
}

/// A batch of one at natural length. `limits[i]`, when set, caps the length
/// of modality `i` (head kept); no padding is added.
pub fn single_sample(
    record: &VideoRecord,
    specs: &[ModalitySpec],
    limits: &[Option<usize>],
) -> Result<Batch> {
    debug_assert_eq!(specs.len(), limits.len());
    let lengths = specs
        .iter()
        .zip(limits)
        .map(|(s, lim)| {
            let t = record.feature(s.name)?.len();
            Ok(lim.map_or(t, |l| t.min(l)))
        })
        .collect::<Result<Vec<_>>>()?;
    build(&[record], specs, &lengths)
}

fn build(records: &[&VideoRecord], specs: &[ModalitySpec], lengths: &[usize]) -> Result<Batch> {
    let b = records.len();
    let mut inputs = Vec::with_capacity(specs.len());
    for (spec, &len) in specs.iter().zip(lengths) {
        let d = spec.input_dim;
        let mut data = vec![0.0f32; b * len * d];
        let mut mask = vec![false; b * len];
        for (bi, rec) in records.iter().enumerate() {
            let seq = rec.feature(spec.name)?;
            if seq.dim() != d {
                return Err(Error::Data(format!(
                    "record {}: {} dim {} does not match configured {}",
                    rec.id,
                    spec.name,
                    seq.dim(),
                    d
                )));
            }
            let keep = seq.len().min(len);
            let dst = bi * len * d;
            data[dst..dst + keep * d].copy_from_slice(&seq.data()[..keep * d]);
            mask[bi * len..bi * len + keep].fill(true);
        }
        inputs.push(ModalityInput {
            modality: spec.name,
            features: Tensor::new(vec![b, len, d], data)?,
            mask,
        });
    }
    let mut labels = Vec::with_capacity(b * NUM_GENRES);
    for rec in records {
        labels.extend_from_slice(&rec.genres.one_hot());
    }
    Ok(Batch {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        inputs,
        labels: Tensor::new(vec![b, NUM_GENRES], labels)?,
    })
}
