use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::MetricsReport;

/// Macro validation metrics recorded at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValSummary {
    pub map: f64,
    pub precision: f64,
    pub recall: f64,
}

impl From<&MetricsReport> for ValSummary {
    fn from(r: &MetricsReport) -> Self {
        ValSummary {
            map: r.mean_ap,
            precision: r.macro_precision,
            recall: r.macro_recall,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    /// 1-based optimizer step.
    pub step: u64,
    pub loss: f64,
    pub val: Option<ValSummary>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestPointer {
    pub step: u64,
    pub val_map: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub rows: Vec<HistoryRow>,
    pub best: Option<BestPointer>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn last_step(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.step)
    }

    pub fn push(&mut self, step: u64, loss: f64) {
        debug_assert!(step > self.last_step());
        self.rows.push(HistoryRow { step, loss, val: None });
    }

    /// Attaches validation metrics to the latest row and moves the best
    /// pointer when the mAP improves. Returns whether it moved.
    pub fn record_validation(&mut self, val: ValSummary) -> bool {
        let Some(row) = self.rows.last_mut() else {
            return false;
        };
        row.val = Some(val);
        let improved = self.best.is_none_or(|b| val.map > b.val_map);
        if improved {
            self.best = Some(BestPointer {
                step: row.step,
                val_map: val.map,
            });
        }
        improved
    }

    /// `step,loss,val_mAP,val_P,val_R`, validation columns empty on steps
    /// without validation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,val_mAP,val_P,val_R\n");
        for r in &self.rows {
            match r.val {
                Some(v) => {
                    let _ = writeln!(out, "{},{},{},{},{}", r.step, r.loss, v.map, v.precision, v.recall);
                }
                None => {
                    let _ = writeln!(out, "{},{},,,", r.step, r.loss);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn best_pointer_tracks_highest_map() {
        let mut h = TrainHistory::default();
        let v = |map| ValSummary {
            map,
            precision: 0.0,
            recall: 0.0,
        };
        h.push(1, 0.9);
        assert!(h.record_validation(v(0.3)));
        h.push(2, 0.8);
        assert!(h.record_validation(v(0.5)));
        h.push(3, 0.7);
        assert!(!h.record_validation(v(0.4)));
        assert_eq!(h.best, Some(BestPointer { step: 2, val_map: 0.5 }));
        let csv = h.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.lines().nth(2).unwrap().starts_with("2,0.8,0.5,"));
    }
}
