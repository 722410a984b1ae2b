//! Dataset manifests and the datasets they describe.
//!
//! A manifest is a JSON document
//! `{ "genres": [...21 names...], "samples": [{ "id", "duration_s", "genres", "path" }] }`
//! whose `path` entries point at MMF files relative to the manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::mmf::{read_mmf, write_mmf, FeatureMap};
use crate::data::record::{FeatureSequence, VideoRecord};
use crate::error::{Error, Result};
use crate::model::config::Modality;
use crate::model::genres::{genre_index, vocabulary, GenreSet};
use crate::rng::SeededRng;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default)]
    pub duration_s: Option<f64>,
    pub genres: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub genres: Vec<String>,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))?;
        if m.genres != vocabulary() {
            return Err(Error::Config(format!(
                "{}: genre vocabulary differs from the fixed 21-genre list",
                path.display()
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Label-level information about one sample, available without reading
/// its features.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMeta {
    pub id: String,
    pub duration_s: Option<f64>,
    pub genres: GenreSet,
}

#[derive(Clone, Debug)]
enum Source {
    Disk(PathBuf),
    Memory(Arc<FeatureMap>),
}

/// Counts of what was discarded while reading a manifest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ManifestWarnings {
    /// Genre labels outside the vocabulary.
    pub unknown_genre_labels: usize,
    /// Samples left with no known genre.
    pub unlabeled_samples: usize,
}

/// Keeps `frames` randomly chosen rows of one modality, in temporal order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameSubsample {
    pub modality: Modality,
    pub frames: usize,
    pub seed: u64,
}

impl FrameSubsample {
    /// Applies the subsample to one record. The draw depends on the seed,
    /// the frame count and the record id only.
    pub fn apply(&self, record: &mut VideoRecord) {
        if let Some(seq) = record.features.get_mut(&self.modality) {
            let mut rng = SeededRng::derive(self.seed, &[self.frames as u64, fnv1a(record.id.as_bytes())]);
            *seq = subsample_frames(seq, self.frames, &mut rng);
        }
    }
}

/// `n` rows drawn without replacement, temporal order kept. Sequences with
/// at most `n` rows are returned whole.
pub fn subsample_frames(seq: &FeatureSequence, n: usize, rng: &mut SeededRng) -> FeatureSequence {
    if seq.len() <= n {
        return seq.clone();
    }
    seq.select_rows(&rng.sample_sorted(seq.len(), n))
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Debug, Default)]
pub struct Dataset {
    meta: Vec<SampleMeta>,
    sources: Vec<Source>,
    warnings: ManifestWarnings,
    subsample: Option<FrameSubsample>,
}

/// Maps manifest genre names to a set, counting names outside the vocabulary.
pub fn parse_genres(names: &[String], unknown: &mut usize) -> GenreSet {
    let mut set = GenreSet::empty();
    for n in names {
        match genre_index(n) {
            Some(i) => set.insert(i),
            None => *unknown += 1,
        }
    }
    set
}

impl Dataset {
    /// Reads a manifest; features stay on disk until requested.
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let manifest = Manifest::load(manifest_path)?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let mut ds = Dataset::default();
        let mut seen = HashSet::new();
        for e in manifest.samples {
            if !seen.insert(e.id.clone()) {
                return Err(Error::Data(format!("duplicate sample id {:?} in manifest", e.id)));
            }
            let genres = parse_genres(&e.genres, &mut ds.warnings.unknown_genre_labels);
            if genres.is_empty() {
                ds.warnings.unlabeled_samples += 1;
                continue;
            }
            let rel = e.path.unwrap_or_else(|| format!("{}.mmf", e.id));
            ds.meta.push(SampleMeta {
                id: e.id,
                duration_s: e.duration_s,
                genres,
            });
            ds.sources.push(Source::Disk(root.join(rel)));
        }
        if ds.warnings != ManifestWarnings::default() {
            warn!(
                "{}: dropped {} unknown genre labels and {} samples without known genres",
                manifest_path.display(),
                ds.warnings.unknown_genre_labels,
                ds.warnings.unlabeled_samples
            );
        }
        Ok(ds)
    }

    pub fn from_records(records: Vec<VideoRecord>) -> Self {
        let mut ds = Dataset::default();
        for r in records {
            ds.meta.push(SampleMeta {
                id: r.id,
                duration_s: r.duration_s,
                genres: r.genres,
            });
            ds.sources.push(Source::Memory(Arc::new(r.features)));
        }
        ds
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self) -> &[SampleMeta] {
        &self.meta
    }

    pub fn warnings(&self) -> ManifestWarnings {
        self.warnings
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.meta.iter().map(|m| m.id.as_str())
    }

    pub fn record(&self, index: usize) -> Result<VideoRecord> {
        let meta = self
            .meta
            .get(index)
            .ok_or_else(|| Error::Data(format!("sample index {index} out of range")))?;
        let features = match &self.sources[index] {
            Source::Disk(p) => read_mmf(p)?,
            Source::Memory(f) => (**f).clone(),
        };
        let mut record = VideoRecord {
            id: meta.id.clone(),
            duration_s: meta.duration_s,
            genres: meta.genres,
            features,
        };
        if let Some(s) = &self.subsample {
            s.apply(&mut record);
        }
        Ok(record)
    }

    /// Loads the given samples, in parallel, preserving order.
    pub fn records(&self, indices: &[usize]) -> Result<Vec<VideoRecord>> {
        indices.par_iter().map(|&i| self.record(i)).collect()
    }

    pub fn all_records(&self) -> Result<Vec<VideoRecord>> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.records(&all)
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            meta: indices.iter().map(|&i| self.meta[i].clone()).collect(),
            sources: indices.iter().map(|&i| self.sources[i].clone()).collect(),
            warnings: self.warnings,
            subsample: self.subsample,
        }
    }

    /// A view of this dataset whose records are frame-subsampled on load.
    pub fn with_subsample(&self, subsample: Option<FrameSubsample>) -> Dataset {
        Dataset {
            subsample,
            ..self.clone()
        }
    }

    /// The samples whose ids are in `ids`, in dataset order.
    pub fn subset_by_ids<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Dataset {
        let wanted: HashSet<&str> = ids.into_iter().collect();
        let idx: Vec<usize> = (0..self.len()).filter(|&i| wanted.contains(self.meta[i].id.as_str())).collect();
        self.subset(&idx)
    }

    /// Writes one MMF per sample and a manifest into `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let samples = (0..self.len())
            .into_par_iter()
            .map(|i| {
                let r = self.record(i)?;
                let file = format!("{}.mmf", r.id);
                write_mmf(&r.features, &dir.join(&file))?;
                Ok(ManifestEntry {
                    id: r.id,
                    duration_s: r.duration_s,
                    genres: r.genres.names(),
                    path: Some(file),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let path = dir.join(MANIFEST_FILE);
        Manifest {
            genres: vocabulary(),
            samples,
        }
        .save(&path)?;
        Ok(path)
    }
}
