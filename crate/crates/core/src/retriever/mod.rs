//! Persona-guided dual-encoder retrieval of demonstrations.
//!
//! Queries are `p_t [SEP] u_t`, candidates `p_i [SEP] s_i [SEP] r_i`. Each
//! candidate is scored `alpha * sim(f_q(q), f_x(x_i)) + beta * sim(f_q(p_t),
//! f_x(p_i))` and the best `pairs` candidates of the query's problem-type
//! bucket are rendered into a bracketed demonstration prompt.

pub mod encoder;
pub mod index;

use serde::{Deserialize, Serialize};

use crate::corpus::RetrievalEntry;
use crate::error::{Error, Result};
use crate::text::{count_tokens, truncate_tokens};

pub use encoder::{DualEncoder, EmbeddingVector, HashEncoder, ENCODER_MAX_TOKENS};
pub use index::{Bucket, RetrievalIndex};

/// Joins demonstration blocks.
pub const BLOCK_SEPARATOR: &str = " [SEP] ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    Cosine,
}

impl Similarity {
    pub fn eval(self, a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
        if a.dimension() != b.dimension() {
            return Err(Error::contract(format!(
                "embedding dimension mismatch: {} vs {}",
                a.dimension(),
                b.dimension()
            )));
        }
        let dot: f64 = a
            .values()
            .iter()
            .zip(b.values())
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum();
        Ok(match self {
            Similarity::Dot => dot,
            Similarity::Cosine => {
                let denom = a.norm() as f64 * b.norm() as f64;
                if denom == 0.0 {
                    0.0
                } else {
                    dot / denom
                }
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrieverConfig {
    pub alpha: f64,
    pub beta: f64,
    pub pairs: usize,
    pub max_prompt_tokens: usize,
    pub similarity: Similarity,
}

impl Default for RetrieverConfig {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.3,
            pairs: 5,
            max_prompt_tokens: 512,
            similarity: Similarity::Cosine,
        }
    }
}

impl RetrieverConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.alpha.is_nan() || self.beta.is_nan() || self.alpha < 0.0 || self.beta < 0.0 {
            v.push(format!(
                "retriever.alpha and retriever.beta must be >= 0 (got {}, {})",
                self.alpha, self.beta
            ));
        } else if self.alpha + self.beta <= 0.0 {
            v.push("retriever.alpha + retriever.beta must be > 0".into());
        }
        if self.pairs == 0 {
            v.push("retriever.pairs must be positive".into());
        }
        if self.max_prompt_tokens == 0 || self.max_prompt_tokens > ENCODER_MAX_TOKENS {
            v.push(format!(
                "retriever.max_prompt_tokens must be in 1..={ENCODER_MAX_TOKENS} (got {})",
                self.max_prompt_tokens
            ));
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations() {
            v if v.is_empty() => Ok(()),
            v => Err(Error::Config(v)),
        }
    }

    /// `alpha * sim_ctx + beta * sim_per`.
    pub fn mix(&self, sim_ctx: f64, sim_per: f64) -> f64 {
        self.alpha * sim_ctx + self.beta * sim_per
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreParts {
    pub sim_ctx: f64,
    pub sim_per: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub entry: RetrievalEntry,
    pub sim_ctx: f64,
    pub sim_per: f64,
    pub score: f64,
}

pub fn query_text(persona: &str, utterance: &str) -> String {
    format!("{persona} [SEP] {utterance}")
}

pub fn candidate_text(entry: &RetrievalEntry) -> String {
    format!(
        "{} [SEP] {} [SEP] {}",
        entry.persona, entry.strategy.name, entry.response
    )
}

pub fn encode_query(
    encoder: &dyn DualEncoder,
    persona: &str,
    utterance: &str,
) -> Result<EmbeddingVector> {
    encoder.encode_query_text(&query_text(persona, utterance))
}

pub fn encode_candidate(encoder: &dyn DualEncoder, entry: &RetrievalEntry) -> Result<EmbeddingVector> {
    encoder.encode_passage_text(&candidate_text(entry))
}

pub fn combined_score(
    q: &EmbeddingVector,
    x: &EmbeddingVector,
    pq: &EmbeddingVector,
    px: &EmbeddingVector,
    cfg: &RetrieverConfig,
) -> Result<ScoreParts> {
    let sim_ctx = cfg.similarity.eval(q, x)?;
    let sim_per = cfg.similarity.eval(pq, px)?;
    Ok(ScoreParts {
        sim_ctx,
        sim_per,
        score: cfg.mix(sim_ctx, sim_per),
    })
}

#[derive(Debug, Clone, Default)]
pub struct RetrievalQuery {
    pub utterance: String,
    pub persona: String,
    pub problem_type: String,
    /// Entries from this dialogue are skipped (used while training so a
    /// sample never retrieves its own gold turn).
    pub exclude_dialogue: Option<String>,
}

/// Top `cfg.pairs` candidates by descending score, ties by ascending
/// `source_index`. Searches the query's bucket, or every bucket when that
/// bucket is absent or empty.
pub fn retrieve_topk(
    query: &RetrievalQuery,
    index: &RetrievalIndex,
    encoder: &dyn DualEncoder,
    cfg: &RetrieverConfig,
) -> Result<Vec<ScoredCandidate>> {
    index.check_encoder(encoder)?;
    let q = encode_query(encoder, &query.persona, &query.utterance)?;
    let pq = encoder.encode_query_text(&query.persona)?;
    let pools: Vec<&Bucket> = match index.buckets.get(&query.problem_type) {
        Some(b) if !b.entries.is_empty() => vec![b],
        _ => index.buckets.values().collect(),
    };
    let mut scored = Vec::new();
    for bucket in pools {
        for (i, entry) in bucket.entries.iter().enumerate() {
            if query.exclude_dialogue.as_deref() == Some(entry.dialogue_id.as_str()) {
                continue;
            }
            let parts = combined_score(&q, &bucket.candidates[i], &pq, &bucket.personas[i], cfg)?;
            scored.push(ScoredCandidate {
                entry: entry.clone(),
                sim_ctx: parts.sim_ctx,
                sim_per: parts.sim_per,
                score: parts.score,
            });
        }
    }
    if scored.is_empty() && index.is_empty() {
        return Err(Error::Retrieval(format!(
            "no candidates for problem type `{}` and the global pool is empty",
            query.problem_type
        )));
    }
    rank(&mut scored);
    scored.truncate(cfg.pairs);
    Ok(scored)
}

fn rank(scored: &mut [ScoredCandidate]) {
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.entry.source_index.cmp(&b.entry.source_index))
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemonstrationPrompt {
    pub text: String,
    pub token_count: usize,
    pub included_entries: Vec<usize>,
    /// Set when a single block exceeded the cap and was cut.
    pub truncated: bool,
}

pub fn demonstration_block(entry: &RetrievalEntry) -> String {
    format!(
        "[User: {}] [Persona: {}] [STRATEGY: {}] [SYSTEM: {}]",
        entry.utterance, entry.persona, entry.strategy.name, entry.response
    )
}

/// Renders `candidates` (best first) into the demonstration prompt,
/// dropping whole lowest-scored blocks until the prompt fits
/// `cfg.max_prompt_tokens`.
pub fn format_demonstrations(
    candidates: &[ScoredCandidate],
    cfg: &RetrieverConfig,
) -> Result<DemonstrationPrompt> {
    if candidates.is_empty() {
        return Err(Error::contract("format_demonstrations needs at least one candidate"));
    }
    let cap = cfg.max_prompt_tokens;
    let blocks: Vec<String> = candidates.iter().map(|c| demonstration_block(&c.entry)).collect();
    let mut keep = blocks.len();
    let mut text = blocks.join(BLOCK_SEPARATOR);
    while keep > 1 && count_tokens(&text) > cap {
        keep -= 1;
        text = blocks[..keep].join(BLOCK_SEPARATOR);
    }
    let mut truncated = false;
    if count_tokens(&text) > cap {
        text = truncate_tokens(&text, cap).to_string();
        truncated = true;
        log::warn!(
            "demonstration block for entry {} exceeds {cap} tokens; truncated",
            candidates[0].entry.source_index
        );
    }
    Ok(DemonstrationPrompt {
        token_count: count_tokens(&text),
        text,
        included_entries: candidates[..keep]
            .iter()
            .map(|c| c.entry.source_index)
            .collect(),
        truncated,
    })
}
