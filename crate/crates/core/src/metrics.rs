//! Multi-label evaluation: per-genre precision and recall at a threshold,
//! per-genre average precision, and their macro averages.
//!
//! Average precision is the non-interpolated rank-sum form computed over
//! score thresholds: samples are ranked by descending score and every block
//! of tied scores is treated as one cut-off, so
//!
//! ```text
//! AP = Σ_blocks (ΔTP / P) · (TP / predicted)     evaluated after each block
//! ```
//!
//! Tied samples therefore share a rank, which makes AP independent of input
//! order, equal to the prevalence when all scores tie, and unchanged when
//! the evaluated set is duplicated.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::genres::{GenreSet, GENRES, NUM_GENRES};

pub const AP_VARIANT: &str = "non-interpolated, tied scores grouped";

pub type Scores = [f64; NUM_GENRES];

/// Confusion counts of one genre at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
}

impl Confusion {
    pub fn positives(&self) -> usize {
        self.true_pos + self.false_neg
    }

    pub fn predicted(&self) -> usize {
        self.true_pos + self.false_pos
    }

    /// TP / (TP + FP); 0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.true_pos, self.predicted())
    }

    /// TP / (TP + FN); 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.true_pos, self.positives())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-genre confusion counts with `score >= threshold` as a positive call.
pub fn confusion_at(scores: &[Scores], targets: &[GenreSet], threshold: f64) -> Vec<Confusion> {
    assert_eq!(scores.len(), targets.len(), "scores and targets differ in length");
    let mut out = vec![Confusion::default(); NUM_GENRES];
    for (s, t) in scores.iter().zip(targets) {
        for (c, conf) in out.iter_mut().enumerate() {
            match (s[c] >= threshold, t.contains(c)) {
                (true, true) => conf.true_pos += 1,
                (true, false) => conf.false_pos += 1,
                (false, true) => conf.false_neg += 1,
                (false, false) => {}
            }
        }
    }
    out
}

/// Per-genre `(precision, recall)` at `threshold`.
pub fn precision_recall_at(scores: &[Scores], targets: &[GenreSet], threshold: f64) -> Vec<(f64, f64)> {
    confusion_at(scores, targets, threshold)
        .iter()
        .map(|c| (c.precision(), c.recall()))
        .collect()
}

/// Average precision of one label; `None` when there are no positives.
pub fn average_precision(scores: &[f64], targets: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), targets.len(), "scores and targets differ in length");
    let positives = targets.iter().filter(|&&t| t).count();
    if positives == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut block_tp = 0;
        while i < order.len() && scores[order[i]].total_cmp(&s).is_eq() {
            block_tp += targets[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        if block_tp > 0 {
            tp += block_tp;
            ap += (block_tp as f64 / positives as f64) * (tp as f64 / seen as f64);
        }
    }
    Some(ap)
}

fn column(scores: &[Scores], targets: &[GenreSet], c: usize) -> (Vec<f64>, Vec<bool>) {
    (
        scores.iter().map(|s| s[c]).collect(),
        targets.iter().map(|t| t.contains(c)).collect(),
    )
}

/// Mean of per-genre AP over genres with at least one positive, and the
/// number of genres left out.
pub fn mean_average_precision(scores: &[Scores], targets: &[GenreSet]) -> (f64, usize) {
    let aps: Vec<Option<f64>> = (0..NUM_GENRES)
        .map(|c| {
            let (s, t) = column(scores, targets, c);
            average_precision(&s, &t)
        })
        .collect();
    let defined: Vec<f64> = aps.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    (mean, NUM_GENRES - defined.len())
}

/// Fraction of samples whose highest-scoring genre (first on ties) is one
/// of their labels.
pub fn top1_accuracy(scores: &[Scores], targets: &[GenreSet]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(targets)
        .filter(|(s, t)| {
            let best = (1..NUM_GENRES).fold(0, |b, c| if s[c] > s[b] { c } else { b });
            t.contains(best)
        })
        .count();
    hits as f64 / scores.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenreMetrics {
    pub genre: String,
    pub precision: f64,
    pub recall: f64,
    /// Undefined when the genre has no positives.
    pub ap: Option<f64>,
    pub support: usize,
    pub predicted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub samples: usize,
    pub genres: Vec<GenreMetrics>,
    /// Mean precision over all 21 genres.
    pub macro_precision: f64,
    /// Mean recall over genres with at least one positive.
    pub macro_recall: f64,
    /// Mean AP over genres with at least one positive.
    pub mean_ap: f64,
    /// Genres without positives, left out of recall and AP averages.
    pub excluded_genres: usize,
    pub ap_variant: String,
}

impl MetricsReport {
    pub fn compute(scores: &[Scores], targets: &[GenreSet], threshold: f64) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Data("cannot compute metrics on zero samples".into()));
        }
        if scores.len() != targets.len() {
            return Err(Error::Data(format!(
                "{} score rows for {} targets",
                scores.len(),
                targets.len()
            )));
        }
        let conf = confusion_at(scores, targets, threshold);
        let genres: Vec<GenreMetrics> = (0..NUM_GENRES)
            .map(|c| {
                let (s, t) = column(scores, targets, c);
                GenreMetrics {
                    genre: GENRES[c].to_string(),
                    precision: conf[c].precision(),
                    recall: conf[c].recall(),
                    ap: average_precision(&s, &t),
                    support: conf[c].positives(),
                    predicted: conf[c].predicted(),
                }
            })
            .collect();
        Ok(Self::from_genres(threshold, scores.len(), genres))
    }

    /// Derives the macro averages from per-genre rows.
    pub fn from_genres(threshold: f64, samples: usize, genres: Vec<GenreMetrics>) -> Self {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let precisions: Vec<f64> = genres.iter().map(|g| g.precision).collect();
        let recalls: Vec<f64> = genres.iter().filter(|g| g.support > 0).map(|g| g.recall).collect();
        let aps: Vec<f64> = genres.iter().filter_map(|g| g.ap).collect();
        MetricsReport {
            threshold,
            samples,
            macro_precision: mean(&precisions),
            macro_recall: mean(&recalls),
            mean_ap: mean(&aps),
            excluded_genres: genres.iter().filter(|g| g.support == 0).count(),
            genres,
            ap_variant: AP_VARIANT.to_string(),
        }
    }

    /// Per-genre rows plus an AVERAGE row, at full precision so that
    /// [`MetricsReport::from_csv`] restores the report exactly.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("genre,precision,recall,ap,support,predicted,threshold\n");
        for g in &self.genres {
            let ap = g.ap.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                g.genre, g.precision, g.recall, ap, g.support, g.predicted, self.threshold
            );
        }
        let _ = writeln!(
            out,
            "AVERAGE,{},{},{},{},,{}",
            self.macro_precision, self.macro_recall, self.mean_ap, self.samples, self.threshold
        );
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Data(format!("metrics CSV: {m}"));
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let mut genres = Vec::new();
        let mut average = None;
        let mut threshold = None;
        for row in reader.records() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            let field = |i: usize| row.get(i).unwrap_or("");
            let float = |i: usize| field(i).parse::<f64>().map_err(|e| bad(format!("{}: {e}", field(i))));
            let int = |i: usize| field(i).parse::<usize>().map_err(|e| bad(format!("{}: {e}", field(i))));
            threshold = Some(float(6)?);
            if field(0) == "AVERAGE" {
                average = Some((float(1)?, float(2)?, float(3)?, int(4)?));
                continue;
            }
            genres.push(GenreMetrics {
                genre: field(0).to_string(),
                precision: float(1)?,
                recall: float(2)?,
                ap: if field(3).is_empty() { None } else { Some(float(3)?) },
                support: int(4)?,
                predicted: int(5)?,
            });
        }
        let (p, r, ap, samples) = average.ok_or_else(|| bad("no AVERAGE row".into()))?;
        let names: Vec<&str> = genres.iter().map(|g| g.genre.as_str()).collect();
        if names != GENRES {
            return Err(bad("genre rows differ from the 21-genre vocabulary".into()));
        }
        let report = Self::from_genres(threshold.unwrap_or(0.5), samples, genres);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        if !close(report.macro_precision, p) || !close(report.macro_recall, r) || !close(report.mean_ap, ap) {
            return Err(bad("AVERAGE row is inconsistent with the genre rows".into()));
        }
        Ok(MetricsReport {
            macro_precision: p,
            macro_recall: r,
            mean_ap: ap,
            ..report
        })
    }

    /// Aligned table with percentages to two decimals.
    pub fn to_text(&self) -> String {
        let pct = |v: f64| format!("{:.2}", v * 100.0);
        let p_head = format!("P@{}", self.threshold);
        let r_head = format!("R@{}", self.threshold);
        let mut out = format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8}\n",
            "Genre", p_head, r_head, "AP", "Support"
        );
        for g in &self.genres {
            let ap = g.ap.map(pct).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<12} {:>8} {:>8} {:>8} {:>8}",
                g.genre,
                pct(g.precision),
                pct(g.recall),
                ap,
                g.support
            );
        }
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8} {:>8}",
            "AVERAGE",
            pct(self.macro_precision),
            pct(self.macro_recall),
            pct(self.mean_ap),
            self.samples
        );
        if self.excluded_genres > 0 {
            let _ = writeln!(
                out,
                "{} genre(s) without positives excluded from recall and AP averages",
                self.excluded_genres
            );
        }
        let _ = writeln!(out, "AP: {}", self.ap_variant);
        out
    }
}
