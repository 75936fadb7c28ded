//! Bucketed embedding index and its on-disk snapshot.
//!
//! Snapshot layout: the magic `PRCCFIDX`, a little-endian `u32` version, a
//! little-endian `u64` header length, a JSON header (encoder fingerprint,
//! dimension, similarity mode, bucket table with entries), then for each
//! bucket in header order the candidate matrix followed by the persona
//! matrix, both row-major little-endian `f32`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::{DualEncoder, EmbeddingVector};
use super::{candidate_text, Similarity};
use crate::corpus::{RetrievalCorpus, RetrievalEntry};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"PRCCFIDX";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Bucket {
    pub entries: Vec<RetrievalEntry>,
    pub candidates: Vec<EmbeddingVector>,
    pub personas: Vec<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub fingerprint: String,
    pub dimension: usize,
    pub similarity: Similarity,
    pub buckets: BTreeMap<String, Bucket>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    fingerprint: String,
    dimension: usize,
    similarity: Similarity,
    buckets: Vec<BucketHeader>,
}

#[derive(Serialize, Deserialize)]
struct BucketHeader {
    problem_type: String,
    rows: usize,
    entries: Vec<RetrievalEntry>,
}

impl RetrievalIndex {
    pub fn build(
        corpus: &RetrievalCorpus,
        encoder: &dyn DualEncoder,
        similarity: Similarity,
    ) -> Result<Self> {
        let mut buckets = BTreeMap::new();
        for (problem, entries) in corpus {
            let mut candidates = Vec::with_capacity(entries.len());
            let mut personas = Vec::with_capacity(entries.len());
            for e in entries {
                candidates.push(encoder.encode_passage_text(&candidate_text(e))?);
                personas.push(encoder.encode_passage_text(&e.persona)?);
            }
            buckets.insert(
                problem.clone(),
                Bucket {
                    entries: entries.clone(),
                    candidates,
                    personas,
                },
            );
        }
        Ok(Self {
            fingerprint: encoder.fingerprint(),
            dimension: encoder.dimension(),
            similarity,
            buckets,
        })
    }

    pub fn len(&self) -> usize {
        self.buckets.values().map(|b| b.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_encoder(&self, encoder: &dyn DualEncoder) -> Result<()> {
        if encoder.fingerprint() != self.fingerprint {
            return Err(Error::Index(format!(
                "index built with `{}` but current encoder is `{}`",
                self.fingerprint,
                encoder.fingerprint()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            fingerprint: self.fingerprint.clone(),
            dimension: self.dimension,
            similarity: self.similarity,
            buckets: self
                .buckets
                .iter()
                .map(|(k, b)| BucketHeader {
                    problem_type: k.clone(),
                    rows: b.entries.len(),
                    entries: b.entries.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in self.buckets.values() {
            for v in b.candidates.iter().chain(&b.personas) {
                for x in v.values() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Loads a snapshot and checks it against `encoder`'s fingerprint.
    pub fn load(path: &Path, encoder: &dyn DualEncoder) -> Result<Self> {
        let index = Self::load_unchecked(path)?;
        index.check_encoder(encoder)?;
        Ok(index)
    }

    pub fn load_unchecked(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut raw = Vec::new();
        f.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
        let bad = |msg: &str| Error::Index(format!("{}: {msg}", path.display()));
        if raw.len() < 20 || &raw[..8] != MAGIC {
            return Err(bad("not an index snapshot"));
        }
        let version = u32::from_le_bytes(raw[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(raw[12..20].try_into().unwrap()) as usize;
        let body = raw.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(&format!("bad header: {e}")))?;
        let mut floats = raw[20 + hlen..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()));
        let dim = header.dimension;
        let mut read_matrix = |rows: usize| -> Result<Vec<EmbeddingVector>> {
            (0..rows)
                .map(|_| {
                    let v: Vec<f32> = floats.by_ref().take(dim).collect();
                    if v.len() != dim {
                        return Err(bad("truncated embedding data"));
                    }
                    Ok(EmbeddingVector::new(v))
                })
                .collect()
        };
        let mut buckets = BTreeMap::new();
        for bh in header.buckets {
            if bh.entries.len() != bh.rows {
                return Err(bad("bucket row count mismatch"));
            }
            let candidates = read_matrix(bh.rows)?;
            let personas = read_matrix(bh.rows)?;
            buckets.insert(
                bh.problem_type,
                Bucket {
                    entries: bh.entries,
                    candidates,
                    personas,
                },
            );
        }
        Ok(Self {
            fingerprint: header.fingerprint,
            dimension: dim,
            similarity: header.similarity,
            buckets,
        })
    }
}
