//! Architecture contracts: shapes, batching equivalence, mask and
//! frame-order invariances, checkpoints.

mod common;

use proptest::prelude::*;
use trailerfuse::data::batch::{make_batch, single_sample};
use trailerfuse::data::record::{FeatureSequence, VideoRecord};
use trailerfuse::model::checkpoint::{blob_path, load_checkpoint, read_metadata, save_checkpoint};
use trailerfuse::nn::layers::ForwardCtx;
use trailerfuse::{Architecture, GenreClassifier, Graph, Modality, ModelConfig, SeededRng, Tensor, NUM_GENRES};

/// Preset widths and dimensions with short sequences so a hundred samples
/// stay quick.
fn short_preset(arch: Architecture) -> ModelConfig {
    let mut cfg = ModelConfig::preset(arch);
    for (m, len) in cfg.modalities.iter_mut().zip([12, 6, 8, 10, 4]) {
        m.train_max_len = len;
    }
    cfg
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn check_batching_equivalence(arch: Architecture) {
    let cfg = short_preset(arch);
    let model = GenreClassifier::<f32>::new(cfg.clone(), 17).unwrap();
    let records = common::random_records(23, 100, &cfg.modalities, 0);
    let mut worst = 0.0f32;
    for chunk in records.chunks(10) {
        let refs: Vec<&VideoRecord> = chunk.iter().collect();
        let batched = model.logits(&make_batch(&refs, &cfg.modalities).unwrap()).unwrap();
        for (i, r) in chunk.iter().enumerate() {
            let single = model
                .logits(&single_sample(r, &cfg.modalities, &model.inference_limits()).unwrap())
                .unwrap();
            let row = &batched.data()[i * NUM_GENRES..(i + 1) * NUM_GENRES];
            worst = worst.max(max_abs_diff(row, single.data()));
        }
    }
    assert!(worst < 1e-5, "{}: max logit difference {worst:e}", arch.name());
}

#[test]
fn padded_batch_matches_unbatched_single_transformer() {
    check_batching_equivalence(Architecture::SingleTransformer);
}

#[test]
fn padded_batch_matches_unbatched_multi_transformer() {
    check_batching_equivalence(Architecture::MultiTransformer);
}

#[test]
fn padded_batch_matches_unbatched_mlp() {
    check_batching_equivalence(Architecture::Mlp);
}

#[test]
fn pad_content_never_reaches_the_logits() {
    for arch in [Architecture::Mlp, Architecture::SingleTransformer, Architecture::MultiTransformer] {
        let cfg = common::toy_config(arch);
        let model = GenreClassifier::<f32>::new(cfg.clone(), 4).unwrap();
        let records = common::random_records(8, 6, &cfg.modalities, 0);
        let refs: Vec<&VideoRecord> = records.iter().collect();
        let clean = make_batch(&refs, &cfg.modalities).unwrap();
        let mut dirty = clean.clone();
        let mut rng = SeededRng::new(1);
        for input in &mut dirty.inputs {
            let d = input.dim();
            let mask = input.mask.clone();
            for (pos, valid) in mask.iter().enumerate() {
                if !valid {
                    for v in &mut input.features.data_mut()[pos * d..(pos + 1) * d] {
                        *v = (100.0 * rng.normal()) as f32;
                    }
                }
            }
        }
        assert_eq!(model.logits(&clean).unwrap(), model.logits(&dirty).unwrap(), "{}", arch.name());
    }
}

#[test]
fn every_architecture_emits_21_probabilities_for_any_length() {
    for arch in [Architecture::Mlp, Architecture::SingleTransformer, Architecture::MultiTransformer] {
        let cfg = common::toy_config(arch);
        let model = GenreClassifier::<f32>::new(cfg.clone(), 2).unwrap();
        // lengths from empty to well past the positional tables
        for r in common::random_records(3, 40, &cfg.modalities, 10) {
            let p = model.probabilities(&r).unwrap();
            assert_eq!(p.len(), NUM_GENRES);
            assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let batch = make_batch(&[&common::random_records(5, 1, &cfg.modalities, 0)[0]], &cfg.modalities).unwrap();
        assert_eq!(model.logits(&batch).unwrap().shape(), &[1, NUM_GENRES]);
    }
}

#[test]
fn transformers_read_only_the_head_of_long_sequences() {
    for arch in [Architecture::SingleTransformer, Architecture::MultiTransformer] {
        let cfg = common::toy_config(arch);
        let model = GenreClassifier::<f32>::new(cfg.clone(), 6).unwrap();
        let mut rng = SeededRng::new(12);
        let long = common::random_record(&mut rng, 0, &cfg.modalities, 20);
        let mut cut = long.clone();
        for spec in cfg.modalities.iter().filter(|s| !s.temporal_average) {
            let seq = cut.features.get_mut(&spec.name).unwrap();
            *seq = seq.head(spec.train_max_len);
        }
        assert_eq!(model.probabilities(&long).unwrap(), model.probabilities(&cut).unwrap());
    }
}

#[test]
fn predictions_use_inclusive_threshold() {
    let cfg = common::toy_config(Architecture::Mlp);
    let mut model = GenreClassifier::<f32>::new(cfg.clone(), 0).unwrap();
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for n in names {
        let shape = model.params().get(&n).unwrap().shape().to_vec();
        *model.params_mut().get_mut(&n).unwrap() = Tensor::zeros(&shape);
    }
    let r = &common::random_records(0, 1, &cfg.modalities, 0)[0];
    let pred = model.predict(r, 0.5).unwrap();
    assert!(pred.probabilities.iter().all(|&p| p == 0.5));
    assert!(pred.decisions.iter().all(|&d| d));
    assert!(model.predict(r, 1.01).unwrap().decisions.iter().all(|&d| !d));

    let head_bias = model.params_mut().get_mut("head.bias").unwrap();
    head_bias.data_mut()[3] = 10.0;
    let pred = model.predict(r, 0.5).unwrap();
    assert!((pred.probabilities[3] - 0.999_954_6).abs() < 1e-6);
}

fn permuted(seq: &FeatureSequence, rng: &mut SeededRng) -> FeatureSequence {
    let mut idx: Vec<usize> = (0..seq.len()).collect();
    rng.shuffle(&mut idx);
    seq.select_rows(&idx)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mlp_ignores_frame_order_and_duplication(seed in any::<u64>()) {
        let cfg = common::toy_config(Architecture::Mlp);
        let model = GenreClassifier::<f32>::new(cfg.clone(), seed).unwrap();
        let mut rng = SeededRng::new(seed);
        let r = common::random_record(&mut rng, 0, &cfg.modalities, 30);
        let base = model.probabilities(&r).unwrap();

        let mut shuffled = r.clone();
        for seq in shuffled.features.values_mut() {
            *seq = permuted(seq, &mut rng);
        }
        prop_assert_eq!(&base, &model.probabilities(&shuffled).unwrap());

        let mut doubled = r.clone();
        for seq in doubled.features.values_mut() {
            let idx: Vec<usize> = (0..seq.len()).flat_map(|i| [i, i]).collect();
            *seq = seq.select_rows(&idx);
        }
        prop_assert_eq!(&base, &model.probabilities(&doubled).unwrap());
    }
}

#[test]
fn transformers_are_order_sensitive() {
    for arch in [Architecture::SingleTransformer, Architecture::MultiTransformer] {
        let cfg = common::toy_config(arch);
        let model = GenreClassifier::<f32>::new(cfg.clone(), 1).unwrap();
        let mut rng = SeededRng::new(3);
        let mut r = common::random_record(&mut rng, 0, &cfg.modalities, 0);
        let clip = r.features.get_mut(&Modality::Clip).unwrap();
        *clip = common::random_sequence(&mut rng, 6, 5);
        let reversed = {
            let mut x = r.clone();
            let seq = x.features.get_mut(&Modality::Clip).unwrap();
            *seq = seq.select_rows(&(0..6).rev().collect::<Vec<_>>());
            x
        };
        assert_ne!(model.probabilities(&r).unwrap(), model.probabilities(&reversed).unwrap());
    }
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_drops_out() {
    let cfg = common::toy_config(Architecture::SingleTransformer);
    let model = GenreClassifier::<f32>::new(cfg.clone(), 1).unwrap();
    let records = common::random_records(2, 4, &cfg.modalities, 0);
    let refs: Vec<&VideoRecord> = records.iter().collect();
    let batch = make_batch(&refs, &cfg.modalities).unwrap();
    assert_eq!(model.logits(&batch).unwrap(), model.logits(&batch).unwrap());

    let train_logits = |seed: u64| {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let mut rng = SeededRng::new(seed);
        let out = model.forward(&mut g, &p, &batch, &mut ForwardCtx::train(&mut rng)).unwrap();
        g.value(out).clone()
    };
    assert_eq!(train_logits(5), train_logits(5));
    assert_ne!(train_logits(5), train_logits(6));
}

#[test]
fn parameter_counts_are_reported_deterministically() {
    for arch in [Architecture::Mlp, Architecture::SingleTransformer, Architecture::MultiTransformer] {
        let a = GenreClassifier::<f32>::new(ModelConfig::preset(arch), 0).unwrap();
        let b = GenreClassifier::<f32>::new(ModelConfig::preset(arch), 99).unwrap();
        assert_eq!(a.parameter_count(), b.parameter_count());
        assert_eq!(
            a.parameter_count(),
            a.params().iter().map(|(_, t)| t.numel()).sum::<usize>()
        );
    }
    let mlp = GenreClassifier::<f32>::new(ModelConfig::preset(Architecture::Mlp), 0).unwrap();
    assert_eq!(mlp.parameter_count(), 579_093);
}

#[test]
fn multi_head_width_tracks_enabled_modalities() {
    let full = GenreClassifier::<f32>::new(ModelConfig::preset(Architecture::MultiTransformer), 0).unwrap();
    assert_eq!(full.head_input_dim(), 5 * 128);
    let mut cfg = ModelConfig::preset(Architecture::MultiTransformer);
    for m in &mut cfg.modalities {
        m.temporal_average = false;
    }
    let raw = GenreClassifier::<f32>::new(cfg.clone(), 0).unwrap();
    assert_eq!(raw.head_input_dim(), 5 * 128);
    cfg.modalities.retain(|m| m.name != Modality::Ocr);
    let four = GenreClassifier::<f32>::new(cfg, 0).unwrap();
    assert_eq!(four.head_input_dim(), 4 * 128);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for arch in [Architecture::Mlp, Architecture::SingleTransformer, Architecture::MultiTransformer] {
        let cfg = common::toy_config(arch);
        let model = GenreClassifier::<f32>::new(cfg.clone(), 8).unwrap();
        let path = dir.path().join(format!("{}.json", arch.name()));
        let state = serde_json::json!({ "note": arch.name() });
        save_checkpoint(&path, &model, Some(&state)).unwrap();
        assert!(blob_path(&path).exists());

        let meta = read_metadata(&path).unwrap();
        assert_eq!(meta.genres.len(), NUM_GENRES);
        assert_eq!(meta.parameter_count, model.parameter_count());
        assert_eq!(meta.blob_bytes, 4 * model.parameter_count() as u64);

        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model.params(), model.params());
        assert_eq!(loaded.model.config(), model.config());
        assert_eq!(loaded.trainer, Some(state));
        let r = &common::random_records(1, 1, &cfg.modalities, 0)[0];
        assert_eq!(loaded.model.probabilities(r).unwrap(), model.probabilities(r).unwrap());
    }
}

#[test]
fn checkpoint_with_foreign_vocabulary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = GenreClassifier::<f32>::new(common::toy_config(Architecture::Mlp), 0).unwrap();
    let path = dir.path().join("m.json");
    save_checkpoint(&path, &model, None).unwrap();
    let text = std::fs::read_to_string(&path).unwrap().replace("\"Western\"", "\"Noir\"");
    std::fs::write(&path, text).unwrap();
    let err = load_checkpoint(&path).unwrap_err();
    assert!(err.to_string().to_lowercase().contains("genre") || err.to_string().contains("vocabulary"), "{err}");
}
