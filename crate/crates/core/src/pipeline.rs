//! Glue from a training sample to model inputs: retrieval, knowledge
//! expansion and filtering, cause detection, with ablations applied.

use serde::{Deserialize, Serialize};

use crate::cognition::{
    accept_all, classify_relevance, context_text, detect_emotion_causes, expand_commonsense,
    filter_bundle, CauseAnnotation, CauseDetector, CauseQuery, CommonsenseBundle,
    KnowledgeAdapter, Relation, RelevanceFilter,
};
use crate::corpus::TrainingSample;
use crate::error::{Error, Result};
use crate::fusion::{AblationFlags, PreparedSample};
use crate::retriever::{
    format_demonstrations, retrieve_topk, DemonstrationPrompt, DualEncoder, RetrievalIndex,
    RetrievalQuery, RetrieverConfig, ScoredCandidate,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub retriever: RetrieverConfig,
    pub flags: AblationFlags,
    /// Inferences per relation.
    pub k: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            retriever: RetrieverConfig::default(),
            flags: AblationFlags::full(),
            k: 5,
        }
    }
}

/// Settings with `flags` in force: without persona similarity the persona
/// weight drops to zero.
pub fn apply_ablation(flags: AblationFlags, settings: PipelineSettings) -> Result<PipelineSettings> {
    flags.validate()?;
    let mut out = settings;
    out.flags = flags;
    if !flags.use_persona_sim {
        out.retriever.beta = 0.0;
    }
    Ok(out)
}

/// Pluggable backends used while preparing samples.
pub struct Resources<'a> {
    pub index: Option<&'a RetrievalIndex>,
    pub encoder: &'a dyn DualEncoder,
    pub knowledge: &'a dyn KnowledgeAdapter,
    pub filter: &'a dyn RelevanceFilter,
    pub causes: &'a dyn CauseDetector,
}

/// Intermediate products of preparing one sample, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub retrieved: Vec<ScoredCandidate>,
    pub prompt: Option<DemonstrationPrompt>,
    pub bundle: Option<CommonsenseBundle>,
    pub causes: Option<Vec<CauseAnnotation>>,
}

pub struct Pipeline<'a> {
    pub settings: PipelineSettings,
    pub resources: Resources<'a>,
}

impl<'a> Pipeline<'a> {
    pub fn new(settings: PipelineSettings, resources: Resources<'a>) -> Result<Self> {
        settings.flags.validate()?;
        settings.retriever.validate()?;
        if settings.flags.use_pr && resources.index.is_none() {
            return Err(Error::contract("retrieval is enabled but no index was supplied"));
        }
        Ok(Self { settings, resources })
    }

    /// `exclude_own` keeps a training sample from retrieving its own
    /// dialogue.
    pub fn prepare(&self, sample: &TrainingSample, exclude_own: bool) -> Result<(PreparedSample, Trace)> {
        if sample.context.is_empty() {
            return Err(Error::contract(format!(
                "sample {} turn {} has an empty context",
                sample.dialogue_id, sample.turn_index
            )));
        }
        let flags = self.settings.flags;
        let current_index = sample.current_index();
        let u_t = sample.current_utterance();

        let (retrieved, prompt) = if flags.use_pr {
            let index = self.resources.index.expect("checked in new");
            let query = RetrievalQuery {
                utterance: u_t.to_string(),
                persona: sample.persona.clone(),
                problem_type: sample.problem_type.clone(),
                exclude_dialogue: exclude_own.then(|| sample.dialogue_id.clone()),
            };
            let hits = retrieve_topk(&query, index, self.resources.encoder, &self.settings.retriever)?;
            let prompt = if hits.is_empty() {
                None
            } else {
                Some(format_demonstrations(&hits, &self.settings.retriever)?)
            };
            (hits, prompt)
        } else {
            (Vec::new(), None)
        };

        let (bundle, causes) = if flags.use_ccf {
            let mut cands =
                expand_commonsense(u_t, &Relation::ALL, self.settings.k, self.resources.knowledge)?;
            if flags.use_filter {
                let ctx = context_text(&sample.context);
                for c in &mut cands {
                    classify_relevance(c, &ctx, self.resources.filter)?;
                }
            } else {
                accept_all(&mut cands);
            }
            let bundle = filter_bundle(cands)?;
            let causes = if flags.use_causal {
                let q = CauseQuery {
                    dialogue_id: &sample.dialogue_id,
                    turn_index: sample.turn_index,
                    context: &sample.context,
                    current_index,
                    emotion: &sample.emotion_label,
                };
                Some(detect_emotion_causes(&q, self.resources.causes)?)
            } else {
                None
            };
            (Some(bundle), causes)
        } else {
            (None, None)
        };

        let prepared = PreparedSample {
            dialogue_id: sample.dialogue_id.clone(),
            turn_index: sample.turn_index,
            context: sample.context.clone(),
            current_index,
            prompt: prompt.as_ref().map(|p| p.text.clone()),
            knowledge: bundle.as_ref().map(CommonsenseBundle::sequences),
            causes: causes.clone(),
            target_strategy: sample.target_strategy.id,
            target_response: sample.target_response.clone(),
        };
        Ok((
            prepared,
            Trace {
                retrieved,
                prompt,
                bundle,
                causes,
            },
        ))
    }

    pub fn prepare_all(&self, samples: &[TrainingSample], exclude_own: bool) -> Result<Vec<PreparedSample>> {
        samples
            .iter()
            .map(|s| self.prepare(s, exclude_own).map(|(p, _)| p))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_sim_ablation_zeroes_beta_only() {
        let base = PipelineSettings::default();
        let out = apply_ablation(AblationFlags::table3()[1].1, base).unwrap();
        assert_eq!(out.retriever.beta, 0.0);
        assert_eq!(out.retriever.alpha, base.retriever.alpha);
        assert_eq!(out.retriever.pairs, base.retriever.pairs);
        assert_eq!(out.k, base.k);
    }

    #[test]
    fn inconsistent_flags_rejected() {
        let bad = AblationFlags {
            use_pr: false,
            ..AblationFlags::full()
        };
        assert!(apply_ablation(bad, PipelineSettings::default()).is_err());
    }
}
