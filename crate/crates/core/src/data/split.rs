//! Duration filtering and the deterministic train/val/test split.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::manifest::SampleMeta;
use crate::error::{Error, Result};

/// Inclusive duration bounds in seconds. The defaults are the box-plot
/// inner fences of the trailer corpus.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DurationFilter {
    pub min_s: f64,
    pub max_s: f64,
}

impl Default for DurationFilter {
    fn default() -> Self {
        DurationFilter {
            min_s: 19.6,
            max_s: 214.4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterOutcome {
    /// Indices of kept samples, in input order.
    pub kept: Vec<usize>,
    pub too_short: usize,
    pub too_long: usize,
    pub missing_duration: usize,
}

impl DurationFilter {
    pub fn accepts(&self, duration_s: f64) -> bool {
        duration_s >= self.min_s && duration_s <= self.max_s
    }

    pub fn apply(&self, samples: &[SampleMeta]) -> FilterOutcome {
        let mut out = FilterOutcome::default();
        for (i, s) in samples.iter().enumerate() {
            match s.duration_s {
                None => out.missing_duration += 1,
                Some(d) if d.is_nan() => out.missing_duration += 1,
                Some(d) if d < self.min_s => out.too_short += 1,
                Some(d) if d > self.max_s => out.too_long += 1,
                Some(_) => out.kept.push(i),
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// Ids of each split, each list in ascending byte order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }

    pub fn lookup(&self) -> HashMap<&str, Split> {
        let mut m = HashMap::with_capacity(self.train.len() + self.val.len() + self.test.len());
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in self.ids(split) {
                m.insert(id.as_str(), split);
            }
        }
        m
    }
}

/// Sorts ids by byte order and cuts the first `floor(0.7 n)` for training,
/// the next `floor(0.1 n)` for validation and the remainder for testing.
pub fn split_ids<S: AsRef<str>>(ids: &[S]) -> Result<SplitAssignment> {
    let mut sorted: Vec<&str> = ids.iter().map(AsRef::as_ref).collect();
    sorted.sort_unstable();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Data(format!("duplicate sample id {:?}", w[0])));
    }
    let n = sorted.len();
    let n_train = n * 7 / 10;
    let n_val = n / 10;
    let owned = |s: &[&str]| s.iter().map(|x| x.to_string()).collect();
    Ok(SplitAssignment {
        train: owned(&sorted[..n_train]),
        val: owned(&sorted[n_train..n_train + n_val]),
        test: owned(&sorted[n_train + n_val..]),
    })
}

/// Duration filter followed by the id split.
pub fn filter_and_split(samples: &[SampleMeta], filter: &DurationFilter) -> Result<(FilterOutcome, SplitAssignment)> {
    let outcome = filter.apply(samples);
    let ids: Vec<&str> = outcome.kept.iter().map(|&i| samples[i].id.as_str()).collect();
    let split = split_ids(&ids)?;
    Ok((outcome, split))
}
