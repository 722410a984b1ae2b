//! Feature-set ablation and the frame-count sweep.
//!
//! Every row trains from scratch with a seed derived from the master seed
//! and the row index, so rows are independent and individually
//! reproducible.

use std::fmt::Write as _;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{Dataset, FrameSubsample};
use crate::error::{Error, Result};
use crate::metrics::top1_accuracy;
use crate::model::config::{Architecture, Modality};
use crate::rng::SeededRng;
use crate::train::config::TrainConfig;
use crate::train::eval::evaluate;
use crate::train::trainer::Trainer;

/// Train, validation and test partitions.
#[derive(Clone, Copy)]
pub struct Splits<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub test: &'a Dataset,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub label: &'static str,
    /// Enabled modalities with their temporal-averaging flag.
    pub modalities: Vec<(Modality, bool)>,
    /// Published multi-transformer mAP (percent) for this feature set.
    pub reference_map: f64,
}

/// The seven feature sets, from CLIP alone to all five modalities with
/// averaged text.
pub fn ablation_rows() -> Vec<AblationRow> {
    use Modality::*;
    let base = [(Clip, false), (Musicnet, false), (Audiotag, false)];
    let row = |label, n: usize, extra: &[(Modality, bool)], reference_map| {
        let mut modalities = base[..n].to_vec();
        modalities.extend_from_slice(extra);
        AblationRow {
            label,
            modalities,
            reference_map,
        }
    };
    vec![
        row("clip", 1, &[], 64.73),
        row("clip+musicnet", 2, &[], 65.17),
        row("clip+musicnet+audiotag", 3, &[], 65.31),
        row("+ocr", 3, &[(Ocr, false)], 63.33),
        row("+ocr*", 3, &[(Ocr, true)], 65.46),
        row("+ocr+asr", 3, &[(Ocr, false), (Asr, false)], 64.66),
        row("+ocr*+asr*", 3, &[(Ocr, true), (Asr, true)], 66.02),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: usize,
    pub label: String,
    pub modalities: Vec<(Modality, bool)>,
    pub seed: u64,
    pub steps: u64,
    pub test_map: f64,
    pub reference_map: f64,
}

pub fn row_seed(master: u64, row: usize) -> u64 {
    SeededRng::derive_seed(master, &[row as u64])
}

/// Trains and tests one configuration; the model with the best validation
/// mAP (or the final model without validation) is tested.
fn train_and_test(cfg: TrainConfig, splits: Splits<'_>) -> Result<(u64, crate::train::eval::Evaluation)> {
    let threshold = cfg.model.threshold;
    let mut trainer = Trainer::new(cfg, splits.train, splits.val)?;
    let outcome = trainer.run()?;
    let eval = evaluate(&outcome.best_model, splits.test, threshold)?;
    Ok((trainer.state().step, eval))
}

/// Runs the rows with the indices in `only` (all rows when `None`).
/// `base` must list all five modalities.
pub fn run_ablation(
    base: &TrainConfig,
    splits: Splits<'_>,
    master_seed: u64,
    only: Option<&[usize]>,
) -> Result<Vec<AblationResult>> {
    if Modality::ALL.iter().any(|&m| base.model.modality(m).is_none()) {
        return Err(Error::Config("ablation needs all five modalities in the base configuration".into()));
    }
    let rows = ablation_rows();
    let mut out = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if only.is_some_and(|o| !o.contains(&i)) {
            continue;
        }
        let mut cfg = base.clone();
        cfg.model = base.model.restricted(&row.modalities)?;
        cfg.seed = row_seed(master_seed, i);
        cfg.checkpoint_dir = None;
        let (steps, eval) = train_and_test(cfg.clone(), splits)?;
        info!("ablation row {i} ({}): test mAP {:.4}", row.label, eval.report.mean_ap);
        out.push(AblationResult {
            row: i,
            label: row.label.to_string(),
            modalities: row.modalities.clone(),
            seed: cfg.seed,
            steps,
            test_map: eval.report.mean_ap,
            reference_map: row.reference_map,
        });
    }
    Ok(out)
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("row,label,clip,musicnet,audiotag,ocr,asr,seed,steps,test_mAP,reference_mAP\n");
    for r in results {
        let flag = |m: Modality| match r.modalities.iter().find(|(x, _)| *x == m) {
            None => "",
            Some((_, true)) => "avg",
            Some((_, false)) => "seq",
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:.4},{:.2}",
            r.row,
            r.label,
            flag(Modality::Clip),
            flag(Modality::Musicnet),
            flag(Modality::Audiotag),
            flag(Modality::Ocr),
            flag(Modality::Asr),
            r.seed,
            r.steps,
            r.test_map * 100.0,
            r.reference_map
        );
    }
    out
}

pub const SWEEP_FRAMES: [usize; 6] = [8, 16, 32, 64, 128, 256];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepModel {
    Mlp,
    Transformer,
}

impl SweepModel {
    pub fn name(self) -> &'static str {
        match self {
            SweepModel::Mlp => "mlp",
            SweepModel::Transformer => "transformer",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub frames: usize,
    pub model: SweepModel,
    pub seed: u64,
    pub steps: u64,
    pub test_map: f64,
    pub test_top1: f64,
}

/// Clip-only configurations for one frame count: `mlp` averages the
/// frames; `transformer` reads them in order with a positional table of
/// `frames` entries.
pub fn sweep_config(base: &TrainConfig, model: SweepModel, frames: usize) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    cfg.model.architecture = match model {
        SweepModel::Mlp => Architecture::Mlp,
        SweepModel::Transformer => {
            if !base.model.architecture.is_transformer() {
                return Err(Error::Config("transformer sweep base must be a transformer".into()));
            }
            base.model.architecture
        }
    };
    cfg.model = cfg.model.restricted(&[(Modality::Clip, false)])?;
    if model == SweepModel::Transformer {
        cfg.model.modalities[0].train_max_len = frames;
    }
    cfg.checkpoint_dir = None;
    cfg.validate()?;
    Ok(cfg)
}

/// For each frame count, subsamples every split's clip frames and trains
/// both models on them.
pub fn run_frames_sweep(
    mlp_base: &TrainConfig,
    transformer_base: &TrainConfig,
    splits: Splits<'_>,
    frames: &[usize],
    master_seed: u64,
) -> Result<Vec<SweepResult>> {
    let mut out = Vec::new();
    for (fi, &n) in frames.iter().enumerate() {
        if n == 0 {
            return Err(Error::Config("frame counts must be positive".into()));
        }
        let sub = Some(FrameSubsample {
            modality: Modality::Clip,
            frames: n,
            seed: SeededRng::derive_seed(master_seed, &[u64::MAX, n as u64]),
        });
        let train = splits.train.with_subsample(sub);
        let val = splits.val.map(|v| v.with_subsample(sub));
        let test = splits.test.with_subsample(sub);
        let view = Splits {
            train: &train,
            val: val.as_ref(),
            test: &test,
        };
        for (mi, (model, base)) in [(SweepModel::Mlp, mlp_base), (SweepModel::Transformer, transformer_base)]
            .into_iter()
            .enumerate()
        {
            let mut cfg = sweep_config(base, model, n)?;
            cfg.seed = row_seed(master_seed, fi * 2 + mi);
            let seed = cfg.seed;
            let (steps, eval) = train_and_test(cfg, view)?;
            let test_top1 = top1_accuracy(&eval.scores, &eval.targets);
            info!(
                "frames {n} {}: test mAP {:.4}, top-1 {:.4}",
                model.name(),
                eval.report.mean_ap,
                test_top1
            );
            out.push(SweepResult {
                frames: n,
                model,
                seed,
                steps,
                test_map: eval.report.mean_ap,
                test_top1,
            });
        }
    }
    Ok(out)
}

pub fn sweep_csv(results: &[SweepResult]) -> String {
    let mut out = String::from("frames,model,seed,steps,test_mAP,test_top1\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.4},{:.4}",
            r.frames,
            r.model.name(),
            r.seed,
            r.steps,
            r.test_map * 100.0,
            r.test_top1
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_rows_in_published_order() {
        let rows = ablation_rows();
        assert_eq!(rows.len(), 7);
        assert_eq!(rows[0].modalities, vec![(Modality::Clip, false)]);
        assert_eq!(rows[0].reference_map, 64.73);
        assert_eq!(rows[6].reference_map, 66.02);
        assert_eq!(
            rows[6].modalities,
            vec![
                (Modality::Clip, false),
                (Modality::Musicnet, false),
                (Modality::Audiotag, false),
                (Modality::Ocr, true),
                (Modality::Asr, true),
            ]
        );
        assert_eq!(rows[3].modalities.last(), Some(&(Modality::Ocr, false)));
        assert_eq!(rows[4].modalities.last(), Some(&(Modality::Ocr, true)));
    }

    #[test]
    fn sweep_configs_are_clip_only() {
        let base = TrainConfig::preset(Architecture::SingleTransformer);
        let t = sweep_config(&base, SweepModel::Transformer, 32).unwrap();
        assert_eq!(t.model.modalities.len(), 1);
        assert_eq!(t.model.modalities[0].train_max_len, 32);
        assert_eq!(t.model.architecture, Architecture::SingleTransformer);
        let m = sweep_config(&TrainConfig::preset(Architecture::Mlp), SweepModel::Mlp, 32).unwrap();
        assert_eq!(m.model.architecture, Architecture::Mlp);
        assert_eq!(m.model.modalities[0].name, Modality::Clip);
    }

    #[test]
    fn row_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..7).map(|i| row_seed(1, i)).collect();
        assert_eq!(s.len(), 7);
    }
}
