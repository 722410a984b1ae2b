//! Synthetic datasets with known structure.
//!
//! * Mean-encoded: every genre owns one signature vector per modality;
//!   each frame is the sum of the active genres' signatures plus Gaussian
//!   noise, so the temporal mean separates the labels linearly.
//! * Order-encoded: each clip sequence contains marker blocks A and B among
//!   filler frames, one block in the early part of the sequence and one in
//!   the late part; the label says which block comes first. Both classes
//!   use the same frame multiset, so the temporal mean carries no label
//!   information.

use std::collections::BTreeMap;

use crate::data::record::{FeatureSequence, VideoRecord};
use crate::model::config::{standard_modalities, Modality, ModalitySpec};
use crate::model::genres::{GenreSet, NUM_GENRES};
use crate::rng::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct MeanEncodedConfig {
    pub n: usize,
    pub seed: u64,
    pub noise_std: f64,
    /// Feature width per modality and the upper bound of sequence lengths.
    pub modalities: Vec<ModalitySpec>,
    pub min_len: usize,
    pub max_genres: usize,
}

impl MeanEncodedConfig {
    /// Native widths and lengths in `[1, train_max_len]`.
    pub fn new(n: usize, seed: u64, noise_std: f64) -> Self {
        MeanEncodedConfig {
            n,
            seed,
            noise_std,
            modalities: standard_modalities(),
            min_len: 1,
            max_genres: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MeanEncoded {
    pub records: Vec<VideoRecord>,
    /// `signatures[m][g]` is genre `g`'s vector for modality `m`.
    pub signatures: BTreeMap<Modality, Vec<Vec<f32>>>,
}

pub fn synth_mean_encoded(n: usize, seed: u64, noise_std: f64) -> MeanEncoded {
    synth_mean_encoded_with(&MeanEncodedConfig::new(n, seed, noise_std))
}

pub fn synth_mean_encoded_with(cfg: &MeanEncodedConfig) -> MeanEncoded {
    let mut sig_rng = SeededRng::derive(cfg.seed, &[0]);
    let signatures: BTreeMap<Modality, Vec<Vec<f32>>> = cfg
        .modalities
        .iter()
        .map(|s| {
            let table = (0..NUM_GENRES)
                .map(|_| (0..s.input_dim).map(|_| sig_rng.normal() as f32).collect())
                .collect();
            (s.name, table)
        })
        .collect();

    let mut records = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let mut rng = SeededRng::derive(cfg.seed, &[1, i as u64]);
        let k = rng.range_inclusive(1, cfg.max_genres.clamp(1, NUM_GENRES));
        let genres = GenreSet::from_indices(rng.sample_sorted(NUM_GENRES, k));
        let mut features = BTreeMap::new();
        for spec in &cfg.modalities {
            let table = &signatures[&spec.name];
            let mut base = vec![0.0f32; spec.input_dim];
            for g in genres.iter() {
                for (b, s) in base.iter_mut().zip(&table[g]) {
                    *b += s;
                }
            }
            let t = rng.range_inclusive(cfg.min_len.min(spec.train_max_len), spec.train_max_len);
            let mut data = Vec::with_capacity(t * spec.input_dim);
            for _ in 0..t {
                for &b in &base {
                    let noise = if cfg.noise_std > 0.0 {
                        (rng.normal() * cfg.noise_std) as f32
                    } else {
                        0.0
                    };
                    data.push(b + noise);
                }
            }
            features.insert(spec.name, FeatureSequence::new(t, spec.input_dim, data).expect("sized"));
        }
        records.push(VideoRecord {
            id: format!("mean{:06}", i),
            duration_s: Some(60.0),
            genres,
            features,
        });
    }
    MeanEncoded { records, signatures }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderEncodedConfig {
    pub n: usize,
    pub seed: u64,
    pub dim: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Frames per marker block.
    pub block_len: usize,
    /// Euclidean norm of marker frames.
    pub marker_scale: f64,
    /// Expected norm of filler frames.
    pub filler_norm: f64,
    /// Filler frames are drawn from this many fixed vectors; 0 draws fresh
    /// Gaussian noise for every frame.
    pub filler_pool: usize,
}

impl OrderEncodedConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        OrderEncodedConfig {
            n,
            seed,
            dim: Modality::Clip.feature_dim(),
            min_len: 10,
            max_len: 16,
            block_len: 2,
            marker_scale: 1.0,
            filler_norm: 1.0,
            filler_pool: 16,
        }
    }
}

/// Genre index of the "A before B" class.
pub const ORDER_CLASS_A_FIRST: usize = 0;
/// Genre index of the "B before A" class.
pub const ORDER_CLASS_B_FIRST: usize = 1;

#[derive(Clone, Debug)]
pub struct OrderEncoded {
    pub records: Vec<VideoRecord>,
    pub marker_a: Vec<f32>,
    pub marker_b: Vec<f32>,
}

pub fn synth_order_encoded(n: usize, seed: u64) -> OrderEncoded {
    synth_order_encoded_with(&OrderEncodedConfig::new(n, seed))
}

fn marker(rng: &mut SeededRng, dim: usize, scale: f64) -> Vec<f32> {
    let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| (x / norm * scale) as f32).collect()
}

pub fn synth_order_encoded_with(cfg: &OrderEncodedConfig) -> OrderEncoded {
    assert!(cfg.min_len >= 4 * cfg.block_len.max(1) && cfg.max_len >= cfg.min_len);
    let mut mrng = SeededRng::derive(cfg.seed, &[0]);
    let marker_a = marker(&mut mrng, cfg.dim, cfg.marker_scale);
    let marker_b = marker(&mut mrng, cfg.dim, cfg.marker_scale);
    let filler_sd = cfg.filler_norm / (cfg.dim as f64).sqrt();
    let pool: Vec<Vec<f32>> = (0..cfg.filler_pool)
        .map(|_| (0..cfg.dim).map(|_| (mrng.normal() * filler_sd) as f32).collect())
        .collect();
    let records = (0..cfg.n)
        .map(|i| {
            let mut rng = SeededRng::derive(cfg.seed, &[1, i as u64]);
            let a_first = rng.bernoulli(0.5);
            let t = rng.range_inclusive(cfg.min_len, cfg.max_len);
            // first block starts in [0, half - block_len], second in [half, t - block_len]
            let half = cfg.min_len / 2;
            let first_at = rng.range_inclusive(0, half - cfg.block_len);
            let second_at = rng.range_inclusive(half, t - cfg.block_len);
            let (first, second) = if a_first {
                (&marker_a, &marker_b)
            } else {
                (&marker_b, &marker_a)
            };
            let mut data = Vec::with_capacity(t * cfg.dim);
            for k in 0..t {
                if (first_at..first_at + cfg.block_len).contains(&k) {
                    data.extend_from_slice(first);
                } else if (second_at..second_at + cfg.block_len).contains(&k) {
                    data.extend_from_slice(second);
                } else if pool.is_empty() {
                    data.extend((0..cfg.dim).map(|_| (rng.normal() * filler_sd) as f32));
                } else {
                    data.extend_from_slice(&pool[rng.below(pool.len())]);
                }
            }
            let mut features = BTreeMap::new();
            features.insert(Modality::Clip, FeatureSequence::new(t, cfg.dim, data).expect("sized"));
            let class = if a_first {
                ORDER_CLASS_A_FIRST
            } else {
                ORDER_CLASS_B_FIRST
            };
            VideoRecord {
                id: format!("order{:06}", i),
                duration_s: Some(60.0),
                genres: GenreSet::from_indices([class]),
                features,
            }
        })
        .collect();
    OrderEncoded {
        records,
        marker_a,
        marker_b,
    }
}

/// Which marker block a clip sequence shows first, if both are present.
pub fn order_class(seq: &FeatureSequence, marker_a: &[f32], marker_b: &[f32]) -> Option<usize> {
    let find = |m: &[f32]| (0..seq.len()).find(|&i| seq.row(i) == m);
    match (find(marker_a), find(marker_b)) {
        (Some(a), Some(b)) if a < b => Some(ORDER_CLASS_A_FIRST),
        (Some(_), Some(_)) => Some(ORDER_CLASS_B_FIRST),
        _ => None,
    }
}
