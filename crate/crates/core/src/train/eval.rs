use rayon::prelude::*;

use crate::data::manifest::Dataset;
use crate::data::record::VideoRecord;
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, Scores};
use crate::model::classifier::GenreClassifier;
use crate::model::genres::{GenreSet, NUM_GENRES};
use crate::tensor::Float;

/// Per-sample probabilities alongside the metrics they produce.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub ids: Vec<String>,
    pub scores: Vec<Scores>,
    pub targets: Vec<GenreSet>,
    pub report: MetricsReport,
}

fn to_scores(p: Vec<f64>) -> Scores {
    let mut s = [0.0; NUM_GENRES];
    s.copy_from_slice(&p);
    s
}

/// Scores every record one at a time at its natural length and computes
/// metrics at `threshold`. Samples run in parallel; the model is not
/// modified.
pub fn evaluate_records<T: Float>(
    model: &GenreClassifier<T>,
    records: &[VideoRecord],
    threshold: f64,
) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty record set".into()));
    }
    let scores = records
        .par_iter()
        .map(|r| model.probabilities(r).map(to_scores))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<GenreSet> = records.iter().map(|r| r.genres).collect();
    let report = MetricsReport::compute(&scores, &targets, threshold)?;
    Ok(Evaluation {
        ids: records.iter().map(|r| r.id.clone()).collect(),
        scores,
        targets,
        report,
    })
}

/// As [`evaluate_records`], loading features from `dataset` on demand.
pub fn evaluate<T: Float>(model: &GenreClassifier<T>, dataset: &Dataset, threshold: f64) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty record set".into()));
    }
    let scores = (0..dataset.len())
        .into_par_iter()
        .map(|i| {
            let r = dataset.record(i)?;
            model.probabilities(&r).map(to_scores)
        })
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<GenreSet> = dataset.meta().iter().map(|m| m.genres).collect();
    let report = MetricsReport::compute(&scores, &targets, threshold)?;
    Ok(Evaluation {
        ids: dataset.ids().map(str::to_string).collect(),
        scores,
        targets,
        report,
    })
}
