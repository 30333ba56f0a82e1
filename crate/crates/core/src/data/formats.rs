//! On-disk token dataset and codebook containers (little-endian).
//!
//! Token dataset: `"STARTOK1"`, then `V`, `T`, `C`, `count` as `u32`, then
//! `count` records of `condition: u16` followed by `T × u16` tokens.
//!
//! Codebook: `"STARCB01"`, then `V`, `feature_dim` as `u32`, then
//! `V × feature_dim` `f32` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tokenizer::{Codebook, TokenSequence, FEATURE_DIM};
use crate::error::{Error, Result};

pub const TOKENS_MAGIC: &[u8; 8] = b"STARTOK1";
pub const CODEBOOK_MAGIC: &[u8; 8] = b"STARCB01";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenDataset {
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    pub records: Vec<TokenSequence>,
}

impl TokenDataset {
    pub fn validate(&self) -> Result<()> {
        for (r, seq) in self.records.iter().enumerate() {
            if seq.len() != self.seq_len {
                return Err(Error::shape("token dataset", format!("record {r} has {} tokens", seq.len())));
            }
            if seq.condition > self.classes {
                return Err(Error::InvalidCondition { condition: seq.condition, classes: self.classes });
            }
            if let Some((i, &t)) = seq.tokens.iter().enumerate().find(|(_, &t)| t >= self.vocab) {
                return Err(Error::VocabOverflow { token: t, position: i, vocab: self.vocab });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        if self.vocab > usize::from(u16::MAX) + 1 || self.classes >= usize::from(u16::MAX) {
            return Err(Error::invalid("vocab or class count does not fit u16 records"));
        }
        let mut out = Vec::with_capacity(24 + self.records.len() * 2 * (self.seq_len + 1));
        out.extend_from_slice(TOKENS_MAGIC);
        for v in [self.vocab, self.seq_len, self.classes, self.records.len()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for seq in &self.records {
            out.extend_from_slice(&(seq.condition as u16).to_le_bytes());
            for &t in &seq.tokens {
                out.extend_from_slice(&(t as u16).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format { path: path.to_path_buf(), detail: detail.to_string() };
        if bytes.len() < 24 || &bytes[..8] != TOKENS_MAGIC {
            return Err(bad("missing STARTOK1 header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (vocab, seq_len, classes, count) = (u32_at(8), u32_at(12), u32_at(16), u32_at(20));
        let rec = 2 * (seq_len + 1);
        if bytes.len() != 24 + count * rec {
            return Err(bad("payload length does not match header"));
        }
        let u16_at = |o: usize| usize::from(u16::from_le_bytes([bytes[o], bytes[o + 1]]));
        let records = (0..count)
            .map(|r| {
                let base = 24 + r * rec;
                let tokens = (0..seq_len).map(|i| u16_at(base + 2 + 2 * i)).collect();
                TokenSequence::new(tokens, u16_at(base))
            })
            .collect();
        let ds = TokenDataset { vocab, seq_len, classes, records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes + 1];
        for r in &self.records {
            counts[r.condition] += 1;
        }
        counts
    }
}

impl Codebook {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.len() * FEATURE_DIM * 4);
        out.extend_from_slice(CODEBOOK_MAGIC);
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
        for e in &self.entries {
            for v in e {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |detail: &str| Error::Format { path: path.to_path_buf(), detail: detail.to_string() };
        if bytes.len() < 16 || &bytes[..8] != CODEBOOK_MAGIC {
            return Err(bad("missing STARCB01 header"));
        }
        let v = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if dim != FEATURE_DIM {
            return Err(bad("unsupported feature dimension"));
        }
        if bytes.len() != 16 + v * dim * 4 {
            return Err(bad("payload length does not match header"));
        }
        let f = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let entries = (0..v).map(|k| std::array::from_fn(|d| f(16 + (k * dim + d) * 4))).collect();
        Ok(Codebook { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Parameters that regenerate the source images of a token dataset, stored
/// next to it as `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_side: usize,
    pub patch: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn seq_len(&self) -> usize {
        let g = self.image_side / self.patch;
        g * g
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
