//! Pluggable backends for commonsense expansion, relevance filtering and
//! emotion-cause detection.
//!
//! Pretrained models are consumed through the files they emit (a knowledge
//! table, a cause-annotation cache); the keyword backends are deterministic
//! rules for tests and fixtures.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CommonsenseCandidate, Relation, Verdict};
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::text::tokenize;

pub trait KnowledgeAdapter: Send + Sync {
    /// Up to `k` ranked inferences of `relation` for `source`.
    fn infer(&self, source: &str, relation: Relation, k: usize) -> Result<Vec<String>>;
}

pub trait RelevanceFilter: Send + Sync {
    fn classify(&self, candidate: &CommonsenseCandidate, context: &str) -> Result<Verdict>;
}

/// Everything a cause detector may look at for one target turn.
#[derive(Debug, Clone, Copy)]
pub struct CauseQuery<'a> {
    pub dialogue_id: &'a str,
    pub turn_index: usize,
    pub context: &'a [Utterance],
    pub current_index: usize,
    pub emotion: &'a str,
}

pub trait CauseDetector: Send + Sync {
    /// One flag per context utterance.
    fn detect(&self, query: &CauseQuery<'_>) -> Result<Vec<bool>>;
}

/// One row of a knowledge table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRow {
    pub source_text: String,
    pub relation: Relation,
    pub rank: usize,
    pub inference: String,
}

/// Wildcard `source_text` used when a source has no rows of its own.
pub const ANY_SOURCE: &str = "*";

/// Canned inferences keyed by (source text, relation).
#[derive(Debug, Clone, Default)]
pub struct KnowledgeTable {
    rows: HashMap<(String, Relation), Vec<(usize, String)>>,
}

impl KnowledgeTable {
    pub fn from_rows(rows: impl IntoIterator<Item = KnowledgeRow>) -> Self {
        let mut map: HashMap<(String, Relation), Vec<(usize, String)>> = HashMap::new();
        for r in rows {
            map.entry((r.source_text.trim().to_string(), r.relation))
                .or_default()
                .push((r.rank, r.inference));
        }
        for v in map.values_mut() {
            v.sort();
        }
        Self { rows: map }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(line).map_err(|e| Error::Load {
                source_name: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(Self::from_rows(rows))
    }

    pub fn write(rows: &[KnowledgeRow], path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in rows {
            out.push_str(&serde_json::to_string(r).expect("row serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

impl KnowledgeAdapter for KnowledgeTable {
    fn infer(&self, source: &str, relation: Relation, k: usize) -> Result<Vec<String>> {
        let hit = self
            .rows
            .get(&(source.trim().to_string(), relation))
            .or_else(|| self.rows.get(&(ANY_SOURCE.to_string(), relation)));
        Ok(hit
            .map(|v| v.iter().take(k).map(|(_, s)| s.clone()).collect())
            .unwrap_or_default())
    }
}

fn contains_any(text: &str, keywords: &[String]) -> bool {
    let toks = tokenize(text);
    keywords
        .iter()
        .any(|k| toks.iter().any(|t| t == &k.to_lowercase()))
}

/// Marks an inference irrelevant iff it contains one of `markers`.
#[derive(Debug, Clone)]
pub struct KeywordFilter {
    pub markers: Vec<String>,
}

impl RelevanceFilter for KeywordFilter {
    fn classify(&self, candidate: &CommonsenseCandidate, _context: &str) -> Result<Verdict> {
        Ok(if contains_any(&candidate.text, &self.markers) {
            Verdict::Irrelevant
        } else {
            Verdict::Relevant
        })
    }
}

/// Marks an utterance causal iff it contains one of `keywords`.
#[derive(Debug, Clone)]
pub struct KeywordCauseDetector {
    pub keywords: Vec<String>,
}

impl CauseDetector for KeywordCauseDetector {
    fn detect(&self, query: &CauseQuery<'_>) -> Result<Vec<bool>> {
        Ok(query
            .context
            .iter()
            .map(|u| contains_any(&u.text, &self.keywords))
            .collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CauseCacheLine {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub causes: Vec<bool>,
}

/// Cause annotations precomputed offline, keyed by (dialogue id, target
/// turn). Misses go to `fallback` when one is set.
pub struct CachedCauseDetector {
    cache: HashMap<(String, usize), Vec<bool>>,
    fallback: Option<Box<dyn CauseDetector>>,
}

impl CachedCauseDetector {
    pub fn load(path: &Path, fallback: Option<Box<dyn CauseDetector>>) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cache = HashMap::new();
        for (i, line) in raw.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: CauseCacheLine = serde_json::from_str(line).map_err(|e| Error::Load {
                source_name: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            cache.insert((l.dialogue_id, l.turn_index), l.causes);
        }
        Ok(Self { cache, fallback })
    }

    pub fn write(lines: &[CauseCacheLine], path: &Path) -> Result<()> {
        let mut out = String::new();
        for l in lines {
            out.push_str(&serde_json::to_string(l).expect("line serializes"));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

impl CauseDetector for CachedCauseDetector {
    fn detect(&self, query: &CauseQuery<'_>) -> Result<Vec<bool>> {
        let key = (query.dialogue_id.to_string(), query.turn_index);
        match (self.cache.get(&key), &self.fallback) {
            (Some(v), _) => Ok(v.clone()),
            (None, Some(f)) => f.detect(query),
            (None, None) => Err(Error::CauseDetection(format!(
                "no cached annotation for {} turn {}",
                query.dialogue_id, query.turn_index
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_falls_back_to_wildcard_rows() {
        let t = KnowledgeTable::from_rows([
            KnowledgeRow {
                source_text: "*".into(),
                relation: Relation::XWant,
                rank: 0,
                inference: "to rest".into(),
            },
            KnowledgeRow {
                source_text: "hello".into(),
                relation: Relation::XWant,
                rank: 1,
                inference: "second".into(),
            },
            KnowledgeRow {
                source_text: "hello".into(),
                relation: Relation::XWant,
                rank: 0,
                inference: "first".into(),
            },
        ]);
        assert_eq!(t.infer("hello", Relation::XWant, 5).unwrap(), ["first", "second"]);
        assert_eq!(t.infer("other", Relation::XWant, 5).unwrap(), ["to rest"]);
        assert!(t.infer("other", Relation::XNeed, 5).unwrap().is_empty());
    }
}
