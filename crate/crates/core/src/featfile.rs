//! Binary feature files.
//!
//! Little-endian layout:
//!
//! ```text
//! "BSPF"  u32 version=1  u32 sample_count  u32 F
//! per sample: u32 T  u32 U  T·F × f64 frames  U × u32 token ids
//! ```

use std::fs;
use std::path::Path;

use crate::data::{format_err, Dataset, Sample};
use crate::error::{FormatError, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"BSPF";
pub const FEATURE_VERSION: u32 = 1;

pub fn encode_features(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&(dataset.samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.feature_dim as u32).to_le_bytes());
    for s in &dataset.samples {
        out.extend_from_slice(&(s.frames() as u32).to_le_bytes());
        out.extend_from_slice(&(s.target.len() as u32).to_le_bytes());
        for v in s.features.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &t in &s.target {
            out.extend_from_slice(&(t as u32).to_le_bytes());
        }
    }
    out
}

/// Little-endian cursor that reports what it was reading when the input ran out.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &'static str) -> std::result::Result<&'a [u8], FormatError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or(FormatError::Truncated(what))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &'static str) -> std::result::Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self, what: &'static str) -> std::result::Result<f64, FormatError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn magic(&mut self, expected: [u8; 4]) -> std::result::Result<(), FormatError> {
        let found: [u8; 4] = self
            .take(4, "magic")
            .map_err(|_| FormatError::MalformedHeader("file shorter than the magic".into()))?
            .try_into()
            .unwrap();
        if found != expected {
            return Err(FormatError::BadMagic { found, expected });
        }
        Ok(())
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<Dataset, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(FEATURE_MAGIC)?;
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let count = r.u32("sample count")? as usize;
    let f = r.u32("feature dimension")? as usize;
    if f == 0 {
        return Err(FormatError::MalformedHeader("feature dimension is zero".into()));
    }
    let mut samples = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let t = r.u32("frame count")? as usize;
        let u = r.u32("token count")? as usize;
        if t == 0 {
            return Err(FormatError::DimensionMismatch(format!("sample {i} has zero frames")));
        }
        let n = t
            .checked_mul(f)
            .ok_or_else(|| FormatError::DimensionMismatch(format!("sample {i} is too large")))?;
        if n.saturating_mul(8) > r.remaining() {
            return Err(FormatError::Truncated("frames"));
        }
        let frames = (0..n).map(|_| r.f64("frames")).collect::<std::result::Result<Vec<_>, _>>()?;
        let target = (0..u)
            .map(|_| r.u32("token ids").map(|v| v as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let features = Tensor::matrix(t, f, frames)
            .map_err(|e| FormatError::DimensionMismatch(e.to_string()))?;
        samples.push(Sample { features, target });
    }
    if r.remaining() != 0 {
        return Err(FormatError::TrailingBytes);
    }
    Ok(Dataset {
        feature_dim: f,
        samples,
    })
}

pub fn write_features(path: &Path, dataset: &Dataset) -> Result<()> {
    fs::write(path, encode_features(dataset))?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    decode_features(&bytes).map_err(|kind| format_err(path, kind))
}
