//! Binary scenario cache.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SCCAMDS\0"
//! version  u32      currently 1
//! height   u32      H
//! width    u32      W
//! names    H x (u32 byte length, UTF-8 bytes)
//! train    u64 count, then per sample: label u32, series u32, start u64, H*W f64
//! test     same as train
//! checksum 8 bytes  leading bytes of SHA-256 over everything above
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DataError, Origin, Scenario, WindowedSample};

const MAGIC: &[u8; 8] = b"SCCAMDS\0";
pub const VERSION: u32 = 1;

pub fn encode(variables: &[String], scenario: &Scenario) -> Result<Vec<u8>, DataError> {
    let first = scenario.train.first().or(scenario.test.first()).ok_or(DataError::Cache("empty scenario".into()))?;
    let (h, w) = (first.height, first.width);
    if variables.len() != h {
        return Err(DataError::VariableMismatch { expected: h, found: variables.len() });
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for name in variables {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for set in [&scenario.train, &scenario.test] {
        out.extend_from_slice(&(set.len() as u64).to_le_bytes());
        for s in set.iter() {
            if s.height != h || s.width != w {
                return Err(DataError::Cache(format!("sample of shape {}x{} in a {h}x{w} cache", s.height, s.width)));
            }
            out.extend_from_slice(&(s.label as u32).to_le_bytes());
            out.extend_from_slice(&(s.origin.series as u32).to_le_bytes());
            out.extend_from_slice(&(s.origin.start as u64).to_le_bytes());
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest[..8]);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], DataError> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(DataError::Cache("truncated".into()))?;
        let slice = &self.bytes[self.at..end];
        self.at = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Vec<String>, Scenario), DataError> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..8] != MAGIC {
        return Err(DataError::Cache("not a dataset cache".into()));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { bytes: body, at: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(DataError::Cache(format!("unsupported version {version} (expected {VERSION})")));
    }
    if Sha256::digest(body)[..8] != *sum {
        return Err(DataError::Cache("checksum mismatch".into()));
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let mut variables = Vec::with_capacity(h);
    for _ in 0..h {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?).map_err(|_| DataError::Cache("variable name is not UTF-8".into()))?;
        variables.push(name.to_string());
    }
    let mut sets = [Vec::new(), Vec::new()];
    for set in &mut sets {
        let count = r.u64()? as usize;
        for _ in 0..count {
            let label = r.u32()? as usize;
            let series = r.u32()? as usize;
            let start = r.u64()? as usize;
            let data = r
                .take(h * w * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            set.push(WindowedSample { data, height: h, width: w, label, origin: Origin { series, start } });
        }
    }
    if r.at != body.len() {
        return Err(DataError::Cache("trailing bytes".into()));
    }
    let [train, test] = sets;
    Ok((variables, Scenario { train, test }))
}

pub fn write(path: &Path, variables: &[String], scenario: &Scenario) -> Result<(), DataError> {
    fs::write(path, encode(variables, scenario)?).map_err(|source| DataError::Io { path: path.to_path_buf(), source })
}

pub fn read(path: &Path) -> Result<(Vec<String>, Scenario), DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}
