//! Cause-aware cognitive filtering: commonsense expansion, relevance
//! filtering, emotion-cause detection, the token-level causal mask and the
//! neural refinement stage.

pub mod adapters;
mod mask;
pub mod refine;

use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};

pub use adapters::{
    CachedCauseDetector, CauseCacheLine, CauseDetector, CauseQuery, KeywordCauseDetector, KeywordFilter, KnowledgeAdapter,
    KnowledgeRow, KnowledgeTable, RelevanceFilter,
};
pub use mask::{build_causal_mask, CausalMask};
pub use refine::{CognitiveRefiner, CognitiveState, CognitiveVars};

/// Slot text for a relation without relevant inferences.
pub const NONE_PLACEHOLDER: &str = "none";

/// Joins the surviving inferences of one relation.
pub const INFERENCE_SEPARATOR: &str = " [SEP] ";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "xWant")]
    XWant,
    #[serde(rename = "xNeed")]
    XNeed,
    #[serde(rename = "xIntent")]
    XIntent,
    #[serde(rename = "xEffect")]
    XEffect,
}

impl Relation {
    pub const ALL: [Relation; 4] = [
        Relation::XWant,
        Relation::XNeed,
        Relation::XIntent,
        Relation::XEffect,
    ];

    /// Order in which per-relation encodings are concatenated.
    pub const AGGREGATION_ORDER: [Relation; 4] = [
        Relation::XIntent,
        Relation::XWant,
        Relation::XNeed,
        Relation::XEffect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Relation::XWant => "xWant",
            Relation::XNeed => "xNeed",
            Relation::XIntent => "xIntent",
            Relation::XEffect => "xEffect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "RR")]
    Relevant,
    #[serde(rename = "IR")]
    Irrelevant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommonsenseCandidate {
    pub relation: Relation,
    pub text: String,
    pub verdict: Option<Verdict>,
    /// Placeholder added because the adapter returned fewer than `k`.
    pub padded: bool,
}

pub fn expand_commonsense(
    source_text: &str,
    relations: &[Relation],
    k: usize,
    adapter: &dyn KnowledgeAdapter,
) -> Result<Vec<CommonsenseCandidate>> {
    if k == 0 {
        return Err(Error::contract("k must be >= 1"));
    }
    let mut out = Vec::with_capacity(relations.len() * k);
    for &relation in relations {
        let mut got = adapter
            .infer(source_text, relation, k)
            .map_err(|e| Error::Knowledge {
                relation: relation.name().into(),
                message: e.to_string(),
            })?;
        got.truncate(k);
        let found = got.len();
        out.extend(got.into_iter().map(|text| CommonsenseCandidate {
            relation,
            text,
            verdict: None,
            padded: false,
        }));
        out.extend((found..k).map(|_| CommonsenseCandidate {
            relation,
            text: String::new(),
            verdict: None,
            padded: true,
        }));
    }
    Ok(out)
}

/// Sets and returns the candidate's verdict. Padded or blank candidates are
/// always irrelevant.
pub fn classify_relevance(
    candidate: &mut CommonsenseCandidate,
    context_text: &str,
    filter: &dyn RelevanceFilter,
) -> Result<Verdict> {
    let verdict = if candidate.padded || candidate.text.trim().is_empty() {
        Verdict::Irrelevant
    } else {
        filter
            .classify(candidate, context_text)
            .map_err(|e| Error::Filter(e.to_string()))?
    };
    candidate.verdict = Some(verdict);
    Ok(verdict)
}

/// Marks every non-blank candidate relevant (filtering disabled).
pub fn accept_all(candidates: &mut [CommonsenseCandidate]) {
    for c in candidates {
        c.verdict = Some(if c.padded || c.text.trim().is_empty() {
            Verdict::Irrelevant
        } else {
            Verdict::Relevant
        });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommonsenseBundle {
    pub candidates: Vec<CommonsenseCandidate>,
    /// Surviving inference texts per relation, in candidate order, indexed
    /// like [`Relation::AGGREGATION_ORDER`].
    pub survivors: [Vec<String>; 4],
}

impl CommonsenseBundle {
    /// COM_filter for `relation`: survivors joined, or the placeholder.
    pub fn filtered(&self, relation: Relation) -> String {
        let slot = Relation::AGGREGATION_ORDER
            .iter()
            .position(|&r| r == relation)
            .expect("relation in aggregation order");
        match self.survivors[slot].as_slice() {
            [] => NONE_PLACEHOLDER.to_string(),
            s => s.join(INFERENCE_SEPARATOR),
        }
    }

    /// Per-relation filtered sequences in aggregation order.
    pub fn sequences(&self) -> Vec<(Relation, String)> {
        Relation::AGGREGATION_ORDER
            .iter()
            .map(|&r| (r, self.filtered(r)))
            .collect()
    }
}

pub fn filter_bundle(candidates: Vec<CommonsenseCandidate>) -> Result<CommonsenseBundle> {
    let mut survivors: [Vec<String>; 4] = Default::default();
    for c in &candidates {
        match c.verdict {
            None => {
                return Err(Error::contract(format!(
                    "candidate `{}` ({}) has no verdict",
                    c.text,
                    c.relation.name()
                )))
            }
            Some(Verdict::Relevant) => {
                let slot = Relation::AGGREGATION_ORDER
                    .iter()
                    .position(|&r| r == c.relation)
                    .expect("relation in aggregation order");
                survivors[slot].push(c.text.clone());
            }
            Some(Verdict::Irrelevant) => {}
        }
    }
    Ok(CommonsenseBundle {
        candidates,
        survivors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CauseAnnotation {
    pub utterance_index: usize,
    pub is_cause: bool,
}

/// One annotation per utterance of `query.context`; when the detector
/// flags none, the current utterance alone is marked causal.
pub fn detect_emotion_causes(
    query: &CauseQuery<'_>,
    detector: &dyn CauseDetector,
) -> Result<Vec<CauseAnnotation>> {
    let n = query.context.len();
    if n == 0 || query.current_index >= n {
        return Err(Error::contract(
            "cause detection needs a non-empty context containing the current utterance",
        ));
    }
    let mut flags = detector
        .detect(query)
        .map_err(|e| Error::CauseDetection(e.to_string()))?;
    if flags.len() != n {
        return Err(Error::CauseDetection(format!(
            "detector returned {} flags for {n} utterances",
            flags.len()
        )));
    }
    if !flags.iter().any(|&f| f) {
        flags[query.current_index] = true;
    }
    Ok(flags
        .into_iter()
        .enumerate()
        .map(|(utterance_index, is_cause)| CauseAnnotation {
            utterance_index,
            is_cause,
        })
        .collect())
}

/// Concatenated context text handed to the relevance filter.
pub fn context_text(context: &[Utterance]) -> String {
    context
        .iter()
        .map(|u| u.text.as_str())
        .collect::<Vec<_>>()
        .join(" ")
}
