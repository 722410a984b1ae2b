//! MMF, the per-video feature container.
//!
//! Little-endian throughout:
//!
//! ```text
//! "MMF1"  u16 version  u16 modality_count
//! repeated modality_count times, sorted ascending by name:
//!     u8 name_len  name (UTF-8)  u32 T  u32 D  T*D f32, row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::record::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::config::Modality;

pub const MAGIC: &[u8; 4] = b"MMF1";
pub const VERSION: u16 = 1;

pub type FeatureMap = BTreeMap<Modality, FeatureSequence>;

pub fn encode_mmf(features: &FeatureMap) -> Result<Vec<u8>> {
    let mut entries: Vec<(&Modality, &FeatureSequence)> = features.iter().collect();
    entries.sort_by_key(|(m, _)| m.name());
    let payload: usize = entries.iter().map(|(_, s)| s.data().len() * 4 + 32).sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for (m, seq) in entries {
        if let Some(pos) = seq.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "{m} value {pos} is not finite; MMF stores finite values only"
            )));
        }
        let too_big = |what: &str, v: usize| Error::Data(format!("{m} {what} {v} exceeds u32"));
        let t = u32::try_from(seq.len()).map_err(|_| too_big("length", seq.len()))?;
        let d = u32::try_from(seq.dim()).map_err(|_| too_big("dim", seq.dim()))?;
        let name = m.name().as_bytes();
        out.push(name.len() as u8);
        out.extend_from_slice(name);
        out.extend_from_slice(&t.to_le_bytes());
        out.extend_from_slice(&d.to_le_bytes());
        for v in seq.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(self.fail(
                self.pos,
                format!("truncated: {what} needs {n} bytes, {remaining} left"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses an MMF image. `path` is used for diagnostics only.
pub fn decode_mmf(bytes: &[u8], path: &Path) -> Result<FeatureMap> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(r.fail(0, format!("bad magic {:?}, expected \"MMF1\"", String::from_utf8_lossy(magic))));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let count = r.u16("modality count")?;
    let mut out = FeatureMap::new();
    let mut previous: Option<&'static str> = None;
    for _ in 0..count {
        let at = r.pos;
        let len = r.u8("name length")? as usize;
        let raw = r.take(len, "modality name")?;
        let name = std::str::from_utf8(raw).map_err(|_| r.fail(at + 1, "modality name is not UTF-8"))?;
        let modality: Modality = name
            .parse()
            .map_err(|_| r.fail(at + 1, format!("unknown modality {name:?}")))?;
        if previous.is_some_and(|p| p >= modality.name()) {
            return Err(r.fail(at, format!("modality {name} out of order or repeated")));
        }
        previous = Some(modality.name());
        let dims_at = r.pos;
        let t = r.u32("sequence length")? as usize;
        let d = r.u32("feature dim")? as usize;
        let n_bytes = t
            .checked_mul(d)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.fail(dims_at, format!("{name}: {t}x{d} overflows")))?;
        if n_bytes > bytes.len() - r.pos {
            return Err(r.fail(
                dims_at,
                format!(
                    "{name}: {t}x{d} needs {n_bytes} bytes, only {} remain",
                    bytes.len() - r.pos
                ),
            ));
        }
        let data = r
            .take(n_bytes, "feature values")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.insert(modality, FeatureSequence::new(t, d, data)?);
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn write_mmf(features: &FeatureMap, path: &Path) -> Result<()> {
    let bytes = encode_mmf(features)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_mmf(path: &Path) -> Result<FeatureMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mmf(&bytes, path)
}
