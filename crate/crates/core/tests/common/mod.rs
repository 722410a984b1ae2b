#![allow(dead_code)]

pub mod grad;

use std::collections::BTreeMap;

use trailerfuse::data::record::{FeatureSequence, VideoRecord};
use trailerfuse::{Architecture, GenreSet, Modality, ModalitySpec, ModelConfig, SeededRng, NUM_GENRES};

/// Three narrow modalities; OCR is averaged when `avg_text` is set.
pub fn toy_specs(avg_text: bool) -> Vec<ModalitySpec> {
    vec![
        ModalitySpec {
            name: Modality::Clip,
            input_dim: 5,
            train_max_len: 6,
            temporal_average: false,
        },
        ModalitySpec {
            name: Modality::Ocr,
            input_dim: 4,
            train_max_len: 4,
            temporal_average: avg_text,
        },
        ModalitySpec {
            name: Modality::Audiotag,
            input_dim: 3,
            train_max_len: 5,
            temporal_average: false,
        },
    ]
}

/// Dimension 8, two heads, small feature widths.
pub fn toy_config(architecture: Architecture) -> ModelConfig {
    let mut cfg = ModelConfig::preset(architecture);
    cfg.model_dim = 8;
    cfg.heads = 2;
    cfg.layers = if architecture == Architecture::SingleTransformer { 2 } else { 1 };
    cfg.dropout = 0.1;
    cfg.modalities = toy_specs(architecture == Architecture::MultiTransformer);
    cfg
}

pub fn random_sequence(rng: &mut SeededRng, len: usize, dim: usize) -> FeatureSequence {
    let data = (0..len * dim).map(|_| rng.normal() as f32).collect();
    FeatureSequence::new(len, dim, data).unwrap()
}

/// Random record with lengths in `0..=max_len` (or up to `over` beyond the
/// spec length when `over > 0`) and one to three genres.
pub fn random_record(rng: &mut SeededRng, id: usize, specs: &[ModalitySpec], over: usize) -> VideoRecord {
    let mut features = BTreeMap::new();
    for s in specs {
        let len = rng.range_inclusive(0, s.train_max_len + over);
        features.insert(s.name, random_sequence(rng, len, s.input_dim));
    }
    let k = rng.range_inclusive(1, 3);
    let genres = GenreSet::from_indices((0..k).map(|_| rng.below(NUM_GENRES)));
    VideoRecord {
        id: format!("r{id:04}"),
        duration_s: Some(60.0),
        genres,
        features,
    }
}

pub fn random_records(seed: u64, n: usize, specs: &[ModalitySpec], over: usize) -> Vec<VideoRecord> {
    let mut rng = SeededRng::new(seed);
    (0..n).map(|i| random_record(&mut rng, i, specs, over)).collect()
}
