//! Manifest + flat float blob persistence.
//!
//! A snapshot `stem` is two files: `stem.json`, a structured manifest, and
//! `stem.bin`, the payload as consecutive little-endian `f64`s in the order
//! the manifest describes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Envelope<M> {
    format: String,
    kind: String,
    float_count: usize,
    manifest: M,
}

pub const FORMAT: &str = "svil-snapshot/1";

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

pub fn encode_floats(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_floats(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Snapshot(format!(
            "blob length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn write<M: Serialize>(stem: &Path, kind: &str, manifest: &M, floats: &[f64]) -> Result<()> {
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let env = Envelope {
        format: FORMAT.to_string(),
        kind: kind.to_string(),
        float_count: floats.len(),
        manifest,
    };
    fs::write(manifest_path(stem), serde_json::to_string_pretty(&env)?)?;
    fs::write(blob_path(stem), encode_floats(floats))?;
    Ok(())
}

pub fn read<M: DeserializeOwned>(stem: &Path, kind: &str) -> Result<(M, Vec<f64>)> {
    let text = fs::read_to_string(manifest_path(stem))?;
    let env: Envelope<M> = serde_json::from_str(&text)?;
    if env.format != FORMAT {
        return Err(Error::Snapshot(format!("unknown format {}", env.format)));
    }
    if env.kind != kind {
        return Err(Error::Snapshot(format!(
            "expected a {kind} snapshot, found {}",
            env.kind
        )));
    }
    let floats = decode_floats(&fs::read(blob_path(stem))?)?;
    if floats.len() != env.float_count {
        return Err(Error::Snapshot(format!(
            "manifest declares {} floats, blob holds {}",
            env.float_count,
            floats.len()
        )));
    }
    Ok((env.manifest, floats))
}

/// Splits a flat payload into consecutive pieces of the given lengths.
pub(crate) struct FloatReader<'a> {
    data: &'a [f64],
    pos: usize,
}

impl<'a> FloatReader<'a> {
    pub fn new(data: &'a [f64]) -> Self {
        FloatReader { data, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<Vec<f64>> {
        if self.pos + n > self.data.len() {
            return Err(Error::Snapshot(format!(
                "blob exhausted: need {n} floats at offset {}, have {}",
                self.pos,
                self.data.len()
            )));
        }
        let out = self.data[self.pos..self.pos + n].to_vec();
        self.pos += n;
        Ok(out)
    }

    pub fn finish(self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Snapshot(format!(
                "{} trailing floats in blob",
                self.data.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_bit_exact() {
        let v = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -3.5];
        let back = decode_floats(&encode_floats(&v)).unwrap();
        let bits = |x: &[f64]| x.iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&v), bits(&back));
    }

    #[test]
    fn truncated_blob_rejected() {
        assert!(decode_floats(&[0u8; 7]).is_err());
    }
}
