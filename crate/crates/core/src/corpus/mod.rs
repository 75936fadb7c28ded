//! Dialogue ingestion, dataset splits, persona attachment, the
//! problem-type-bucketed retrieval corpus and per-turn training samples.

mod formats;
pub mod strategy;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use formats::{read_canonical, write_canonical, write_personas};
pub use strategy::{StrategyLabel, StrategyRegistry};

/// Persona text used in retrieval entries whose dialogue has no persona.
pub const UNKNOWN_PERSONA: &str = "unknown";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Supporter,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub strategy: Option<StrategyLabel>,
    pub turn_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub dialogue_id: String,
    pub situation: String,
    pub emotion_label: String,
    pub problem_type: String,
    pub utterances: Vec<Utterance>,
    pub persona: Option<String>,
}

impl DialogueRecord {
    pub fn persona_text(&self) -> &str {
        self.persona.as_deref().unwrap_or("")
    }
}

/// One (u_i, s_i, r_i, p_i) unit of the retrieval corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalEntry {
    pub utterance: String,
    pub strategy: StrategyLabel,
    pub response: String,
    pub persona: String,
    pub problem_type: String,
    pub dialogue_id: String,
    pub source_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSample {
    pub dialogue_id: String,
    /// Turn index of the target supporter turn.
    pub turn_index: usize,
    pub context: Vec<Utterance>,
    pub target_response: String,
    pub target_strategy: StrategyLabel,
    pub persona: String,
    pub emotion_label: String,
    pub problem_type: String,
}

impl TrainingSample {
    /// Position in `context` of the current help-seeker utterance u_t: the
    /// last seeker turn, or the last turn when the context has none.
    pub fn current_index(&self) -> usize {
        self.context
            .iter()
            .rposition(|u| u.speaker == Speaker::Seeker)
            .unwrap_or(self.context.len().saturating_sub(1))
    }

    pub fn current_utterance(&self) -> &str {
        self.context
            .get(self.current_index())
            .map(|u| u.text.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    Canonical,
    EsconvRelease,
}

/// Result of [`load_corpus`]: the records plus every warning raised while
/// mapping strategy strings.
#[derive(Debug, Clone, Default)]
pub struct LoadedCorpus {
    pub records: Vec<DialogueRecord>,
    pub warnings: Vec<String>,
}

pub fn load_corpus(
    path: &Path,
    format: CorpusFormat,
    registry: &StrategyRegistry,
) -> Result<LoadedCorpus> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    if raw.trim().is_empty() {
        return Err(Error::Load {
            source_name: name,
            line: 0,
            message: "file is empty".into(),
        });
    }
    let loaded = match format {
        CorpusFormat::Canonical => formats::parse_canonical(&raw, &name, registry)?,
        CorpusFormat::EsconvRelease => formats::parse_esconv_release(&raw, &name, registry)?,
    };
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    Ok(loaded)
}

/// Dialogue-level split into (train, validation, test).
pub fn split_dataset(
    records: &[DialogueRecord],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<DialogueRecord>, Vec<DialogueRecord>, Vec<DialogueRecord>)> {
    let (r_train, r_val, r_test) = ratios;
    if [r_train, r_val, r_test].iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Split(format!("ratios out of range: {ratios:?}")));
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("ratios must sum to 1, got {ratios:?}")));
    }
    let n = records.len();
    if n < 3 {
        return Err(Error::Split(format!("need at least 3 dialogues, got {n}")));
    }
    let n_val = (n as f64 * r_val + 1e-9).floor() as usize;
    let n_test = (n as f64 * r_test + 1e-9).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val_idx, rest) = order.split_at(n_val);
    let (test_idx, train_idx) = rest.split_at(n_test);

    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| records[i].clone()).collect::<Vec<_>>()
    };
    Ok((pick(train_idx), pick(val_idx), pick(test_idx)))
}

#[derive(Debug, Deserialize)]
struct PersonaLine {
    dialogue_id: String,
    persona: String,
}

/// Attaches sidecar personas; returns the number of records left unmatched
/// (which receive an empty persona).
pub fn attach_personas(records: &mut [DialogueRecord], persona_file: &Path) -> Result<usize> {
    let raw = std::fs::read_to_string(persona_file).map_err(|e| Error::io(persona_file, e))?;
    let mut map = HashMap::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: PersonaLine = serde_json::from_str(line).map_err(|e| Error::Load {
            source_name: persona_file.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        map.insert(p.dialogue_id, p.persona);
    }
    let mut unmatched = 0;
    for rec in records.iter_mut() {
        match map.get(&rec.dialogue_id) {
            Some(p) => rec.persona = Some(p.clone()),
            None => {
                rec.persona = Some(String::new());
                unmatched += 1;
            }
        }
    }
    if unmatched > 0 {
        log::info!("{unmatched} dialogues have no persona in {}", persona_file.display());
    }
    Ok(unmatched)
}

/// A run of consecutive same-speaker turns joined by newlines.
struct Block<'a> {
    speaker: Speaker,
    text: String,
    first: &'a Utterance,
}

fn merge_blocks(utterances: &[Utterance]) -> Vec<Block<'_>> {
    let mut blocks: Vec<Block<'_>> = Vec::new();
    for u in utterances {
        match blocks.last_mut() {
            Some(b) if b.speaker == u.speaker => {
                b.text.push('\n');
                b.text.push_str(&u.text);
            }
            _ => blocks.push(Block {
                speaker: u.speaker,
                text: u.text.clone(),
                first: u,
            }),
        }
    }
    blocks
}

/// Bucketed retrieval corpus keyed by problem type.
pub type RetrievalCorpus = BTreeMap<String, Vec<RetrievalEntry>>;

/// One entry per (seeker block, following supporter block) adjacency of the
/// training dialogues. A merged supporter block keeps the strategy of its
/// first turn.
pub fn build_retrieval_corpus(train_records: &[DialogueRecord]) -> RetrievalCorpus {
    let mut corpus: RetrievalCorpus = BTreeMap::new();
    let mut next_index = 0;
    for rec in train_records {
        let persona = match rec.persona_text() {
            "" => UNKNOWN_PERSONA.to_string(),
            p => p.to_string(),
        };
        let blocks = merge_blocks(&rec.utterances);
        for pair in blocks.windows(2) {
            let (seek, sup) = (&pair[0], &pair[1]);
            if seek.speaker != Speaker::Seeker || sup.speaker != Speaker::Supporter {
                continue;
            }
            if seek.text.trim().is_empty() || sup.text.trim().is_empty() {
                continue;
            }
            let Some(strategy) = sup.first.strategy.clone() else {
                continue;
            };
            corpus
                .entry(rec.problem_type.clone())
                .or_default()
                .push(RetrievalEntry {
                    utterance: seek.text.clone(),
                    strategy,
                    response: sup.text.clone(),
                    persona: persona.clone(),
                    problem_type: rec.problem_type.clone(),
                    dialogue_id: rec.dialogue_id.clone(),
                    source_index: next_index,
                });
            next_index += 1;
        }
    }
    corpus
}

/// One sample per supporter turn with at least one preceding turn. The
/// context holds the most recent `max_context_turns` turns before it.
pub fn derive_samples(
    records: &[DialogueRecord],
    max_context_turns: usize,
) -> Result<Vec<TrainingSample>> {
    if max_context_turns == 0 {
        return Err(Error::contract("max_context_turns must be >= 1"));
    }
    let mut samples = Vec::new();
    for rec in records {
        for (i, u) in rec.utterances.iter().enumerate() {
            if u.speaker != Speaker::Supporter || i == 0 {
                continue;
            }
            let Some(strategy) = u.strategy.clone() else {
                continue;
            };
            let start = i.saturating_sub(max_context_turns);
            samples.push(TrainingSample {
                dialogue_id: rec.dialogue_id.clone(),
                turn_index: u.turn_index,
                context: rec.utterances[start..i].to_vec(),
                target_response: u.text.clone(),
                target_strategy: strategy,
                persona: rec.persona_text().to_string(),
                emotion_label: rec.emotion_label.clone(),
                problem_type: rec.problem_type.clone(),
            });
        }
    }
    Ok(samples)
}
