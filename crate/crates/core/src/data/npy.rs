//! Reading `.npy` arrays (format versions 1.0, 2.0 and 3.0) and importing a
//! directory of per-video arrays into MMF files.
//!
//! Source layout: `<src>/<modality>/<id>.npy`, one `(T, D)` float array per
//! video and modality, plus a manifest giving each id's duration and genres.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;

use crate::data::manifest::{parse_genres, Manifest, ManifestEntry, MANIFEST_FILE};
use crate::data::mmf::{write_mmf, FeatureMap};
use crate::data::record::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::config::Modality;
use crate::model::genres::vocabulary;

const NPY_MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Dtype {
    F32,
    F64,
}

/// A decoded rank-2 array, narrowed to f32.
#[derive(Clone, Debug, PartialEq)]
pub struct NpyMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

fn header_value<'a>(header: &'a str, key: &str) -> Option<&'a str> {
    let pat_sq = format!("'{key}'");
    let pat_dq = format!("\"{key}\"");
    let at = header.find(&pat_sq).or_else(|| header.find(&pat_dq))?;
    let rest = &header[at + key.len() + 2..];
    let colon = rest.find(':')?;
    Some(rest[colon + 1..].trim_start())
}

fn parse_shape(v: &str) -> Option<Vec<usize>> {
    let inner = v.strip_prefix('(')?;
    let close = inner.find(')')?;
    inner[..close]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.trim_end_matches('L').parse().ok())
        .collect()
}

/// Decodes an NPY image. `path` is used for diagnostics only.
pub fn decode_npy(bytes: &[u8], path: &Path) -> Result<NpyMatrix> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(fail(0, "not an NPY file (bad magic)".into()));
    }
    let major = bytes[6];
    let (header_len, header_start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(fail(8, "truncated header length".into()));
            }
            (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12)
        }
        v => return Err(fail(6, format!("unsupported NPY version {v}.{}", bytes[7]))),
    };
    let data_start = header_start + header_len;
    if data_start > bytes.len() {
        return Err(fail(header_start, format!("header of {header_len} bytes is truncated")));
    }
    let header = std::str::from_utf8(&bytes[header_start..data_start])
        .map_err(|_| fail(header_start, "header is not text".into()))?;

    let descr = header_value(header, "descr").ok_or_else(|| fail(header_start, "header lacks 'descr'".into()))?;
    let descr = descr
        .trim_start_matches(['\'', '"'])
        .split(['\'', '"'])
        .next()
        .unwrap_or("");
    let (big_endian, code) = match descr.chars().next() {
        Some('<') | Some('=') => (false, &descr[1..]),
        Some('>') => (true, &descr[1..]),
        Some('|') => (false, &descr[1..]),
        _ => (false, descr),
    };
    let dtype = match code {
        "f4" => Dtype::F32,
        "f8" => Dtype::F64,
        other => {
            return Err(fail(
                header_start,
                format!("dtype {other:?} unsupported; expected 32- or 64-bit float"),
            ))
        }
    };

    let fortran = header_value(header, "fortran_order")
        .ok_or_else(|| fail(header_start, "header lacks 'fortran_order'".into()))?;
    if fortran.starts_with("True") {
        return Err(fail(
            header_start,
            "array is in Fortran (column-major) order; C order required".into(),
        ));
    }
    let shape = header_value(header, "shape")
        .and_then(parse_shape)
        .ok_or_else(|| fail(header_start, "header has no readable 'shape'".into()))?;
    if shape.len() != 2 {
        return Err(fail(
            header_start,
            format!("array has rank {} (shape {shape:?}); rank 2 (T, D) required", shape.len()),
        ));
    }
    let (rows, cols) = (shape[0], shape[1]);
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    let need = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| fail(header_start, format!("shape {shape:?} overflows")))?;
    let have = bytes.len() - data_start;
    if have != need {
        return Err(fail(
            data_start,
            format!("payload is {have} bytes, shape {shape:?} needs {need}"),
        ));
    }
    let payload = &bytes[data_start..];
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|b| {
                let a = [b[0], b[1], b[2], b[3]];
                if big_endian {
                    f32::from_be_bytes(a)
                } else {
                    f32::from_le_bytes(a)
                }
            })
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|b| {
                let a = [b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]];
                let v = if big_endian {
                    f64::from_be_bytes(a)
                } else {
                    f64::from_le_bytes(a)
                };
                v as f32
            })
            .collect(),
    };
    Ok(NpyMatrix { rows, cols, data })
}

pub fn read_npy(path: &Path) -> Result<NpyMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_npy(&bytes, path)
}

/// Encodes a little-endian f32 or f64 NPY v1.0 image of shape `shape`.
pub fn encode_npy(shape: &[usize], values: &[f64], f64_dtype: bool, fortran: bool) -> Vec<u8> {
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let shape_txt = if dims.len() == 1 {
        format!("({},)", dims[0])
    } else {
        format!("({})", dims.join(", "))
    };
    let descr = if f64_dtype { "<f8" } else { "<f4" };
    let order = if fortran { "True" } else { "False" };
    let mut header = format!("{{'descr': '{descr}', 'fortran_order': {order}, 'shape': {shape_txt}, }}");
    while (10 + header.len() + 1) % 64 != 0 {
        header.push(' ');
    }
    header.push('\n');
    let mut out = Vec::with_capacity(10 + header.len() + values.len() * 8);
    out.extend_from_slice(NPY_MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(header.len() as u16).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for &v in values {
        if f64_dtype {
            out.extend_from_slice(&v.to_le_bytes());
        } else {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImportSummary {
    pub imported: usize,
    /// `(id, reason)` for each video that could not be imported.
    pub failures: Vec<(String, String)>,
    pub modalities: Vec<Modality>,
    pub unknown_genre_labels: usize,
    pub manifest: PathBuf,
}

/// Converts `<src>/<modality>/<id>.npy` arrays for every sample in
/// `source_manifest` into `<out>/<id>.mmf` plus `<out>/manifest.json`.
///
/// The modality set is the set of modality subdirectories present in
/// `src`. A video missing any of them, or with any malformed array, is
/// skipped and reported; the rest are imported.
pub fn import_npy(src: &Path, source_manifest: &Path, out: &Path) -> Result<ImportSummary> {
    let manifest = Manifest::load(source_manifest)?;
    let modalities: Vec<Modality> = Modality::ALL
        .into_iter()
        .filter(|m| src.join(m.name()).is_dir())
        .collect();
    if modalities.is_empty() {
        return Err(Error::Data(format!(
            "{}: no modality subdirectories (expected some of clip, ocr, asr, audiotag, musicnet)",
            src.display()
        )));
    }
    if manifest.samples.is_empty() {
        return Err(Error::Data(format!("{}: manifest lists no samples", source_manifest.display())));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let convert = |entry: &ManifestEntry| -> std::result::Result<ManifestEntry, String> {
        let mut features = FeatureMap::new();
        for &m in &modalities {
            let p = src.join(m.name()).join(format!("{}.npy", entry.id));
            let arr = read_npy(&p).map_err(|e| e.to_string())?;
            if arr.cols != m.feature_dim() {
                return Err(format!(
                    "{}: {m} arrays must have {} columns, found {}",
                    p.display(),
                    m.feature_dim(),
                    arr.cols
                ));
            }
            let seq = FeatureSequence::new(arr.rows, arr.cols, arr.data).map_err(|e| e.to_string())?;
            features.insert(m, seq);
        }
        let file = format!("{}.mmf", entry.id);
        write_mmf(&features, &out.join(&file)).map_err(|e| e.to_string())?;
        Ok(ManifestEntry {
            path: Some(file),
            ..entry.clone()
        })
    };
    let results: Vec<_> = manifest.samples.par_iter().map(convert).collect();

    let mut summary = ImportSummary {
        modalities,
        ..Default::default()
    };
    let mut samples = Vec::new();
    for (entry, res) in manifest.samples.iter().zip(results) {
        parse_genres(&entry.genres, &mut summary.unknown_genre_labels);
        match res {
            Ok(e) => samples.push(e),
            Err(reason) => {
                warn!("skipping {}: {reason}", entry.id);
                summary.failures.push((entry.id.clone(), reason));
            }
        }
    }
    summary.imported = samples.len();
    summary.manifest = out.join(MANIFEST_FILE);
    Manifest {
        genres: vocabulary(),
        samples,
    }
    .save(&summary.manifest)?;
    if summary.imported == 0 {
        return Err(Error::Data(format!(
            "none of {} videos could be imported; first failure: {}",
            summary.failures.len(),
            summary.failures.first().map(|f| f.1.as_str()).unwrap_or("")
        )));
    }
    Ok(summary)
}

/// Lists `<dir>/<modality>` subdirectories and the ids found in each.
pub fn scan_npy_dir(dir: &Path) -> Result<BTreeMap<Modality, Vec<String>>> {
    let mut out = BTreeMap::new();
    for m in Modality::ALL {
        let sub = dir.join(m.name());
        if !sub.is_dir() {
            continue;
        }
        let mut ids = Vec::new();
        for entry in fs::read_dir(&sub).map_err(|e| Error::io(&sub, e))? {
            let p = entry.map_err(|e| Error::io(&sub, e))?.path();
            if p.extension().is_some_and(|e| e == "npy") {
                if let Some(stem) = p.file_stem() {
                    ids.push(stem.to_string_lossy().into_owned());
                }
            }
        }
        ids.sort();
        out.insert(m, ids);
    }
    Ok(out)
}
