//! Canonical line-delimited corpus format and the ESConv release adapter.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DialogueRecord, LoadedCorpus, Speaker, StrategyRegistry, Utterance};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalTurn {
    speaker: Speaker,
    #[serde(default)]
    strategy: Option<String>,
    text: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CanonicalRecord {
    dialogue_id: String,
    #[serde(default)]
    situation: String,
    emotion_type: String,
    problem_type: String,
    #[serde(default)]
    persona: Option<String>,
    dialog: Vec<CanonicalTurn>,
}

#[derive(Debug, Deserialize)]
struct ReleaseAnnotation {
    #[serde(default)]
    strategy: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ReleaseTurn {
    speaker: String,
    #[serde(default)]
    annotation: Option<ReleaseAnnotation>,
    content: String,
}

#[derive(Debug, Deserialize)]
struct ReleaseRecord {
    #[serde(default)]
    situation: String,
    emotion_type: String,
    problem_type: String,
    dialog: Vec<ReleaseTurn>,
}

struct Builder<'a> {
    registry: &'a StrategyRegistry,
    source_name: &'a str,
    warnings: Vec<String>,
}

impl Builder<'_> {
    fn turns(
        &mut self,
        line: usize,
        dialogue_id: &str,
        turns: impl IntoIterator<Item = (Speaker, Option<String>, String)>,
    ) -> Result<Vec<Utterance>> {
        let mut out = Vec::new();
        for (speaker, strategy, text) in turns {
            let turn_index = out.len();
            let strategy = match speaker {
                Speaker::Seeker => None,
                Speaker::Supporter => Some(match strategy.as_deref() {
                    Some(name) => match self.registry.lookup(name) {
                        Some(label) => label,
                        None => {
                            self.warnings.push(format!(
                                "{dialogue_id} turn {turn_index}: unknown strategy `{name}` mapped to `{}`",
                                self.registry.catch_all().name
                            ));
                            self.registry.catch_all()
                        }
                    },
                    None => {
                        self.warnings.push(format!(
                            "{dialogue_id} turn {turn_index}: supporter turn without strategy mapped to `{}`",
                            self.registry.catch_all().name
                        ));
                        self.registry.catch_all()
                    }
                }),
            };
            out.push(Utterance {
                speaker,
                text,
                strategy,
                turn_index,
            });
        }
        if out.is_empty() {
            return Err(Error::Load {
                source_name: self.source_name.to_string(),
                line,
                message: format!("dialogue {dialogue_id} has no turns"),
            });
        }
        Ok(out)
    }
}

pub(super) fn parse_canonical(
    raw: &str,
    source_name: &str,
    registry: &StrategyRegistry,
) -> Result<LoadedCorpus> {
    let mut b = Builder {
        registry,
        source_name,
        warnings: Vec::new(),
    };
    let mut records = Vec::new();
    for (i, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: CanonicalRecord = serde_json::from_str(line).map_err(|e| Error::Load {
            source_name: source_name.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        let utterances = b.turns(
            i + 1,
            &rec.dialogue_id,
            rec.dialog.into_iter().map(|t| (t.speaker, t.strategy, t.text)),
        )?;
        records.push(DialogueRecord {
            dialogue_id: rec.dialogue_id,
            situation: rec.situation,
            emotion_label: rec.emotion_type,
            problem_type: rec.problem_type,
            utterances,
            persona: rec.persona,
        });
    }
    Ok(LoadedCorpus {
        records,
        warnings: b.warnings,
    })
}

/// The published release is a single JSON array without dialogue ids;
/// records are named `esconv-<position>`.
pub(super) fn parse_esconv_release(
    raw: &str,
    source_name: &str,
    registry: &StrategyRegistry,
) -> Result<LoadedCorpus> {
    let parsed: Vec<ReleaseRecord> = serde_json::from_str(raw).map_err(|e| Error::Load {
        source_name: source_name.to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let mut b = Builder {
        registry,
        source_name,
        warnings: Vec::new(),
    };
    let mut records = Vec::with_capacity(parsed.len());
    for (i, rec) in parsed.into_iter().enumerate() {
        let dialogue_id = format!("esconv-{i}");
        let mut turns = Vec::with_capacity(rec.dialog.len());
        for t in rec.dialog {
            let speaker = match t.speaker.as_str() {
                "seeker" | "usr" => Speaker::Seeker,
                "supporter" | "sys" => Speaker::Supporter,
                other => {
                    return Err(Error::Load {
                        source_name: source_name.to_string(),
                        line: i,
                        message: format!("unknown speaker `{other}` in {dialogue_id}"),
                    })
                }
            };
            let strategy = t.annotation.and_then(|a| a.strategy);
            turns.push((speaker, strategy, t.content.trim().to_string()));
        }
        let utterances = b.turns(i, &dialogue_id, turns)?;
        records.push(DialogueRecord {
            dialogue_id,
            situation: rec.situation,
            emotion_label: rec.emotion_type,
            problem_type: rec.problem_type,
            utterances,
            persona: None,
        });
    }
    Ok(LoadedCorpus {
        records,
        warnings: b.warnings,
    })
}

pub fn write_canonical(records: &[DialogueRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for rec in records {
        let line = CanonicalRecord {
            dialogue_id: rec.dialogue_id.clone(),
            situation: rec.situation.clone(),
            emotion_type: rec.emotion_label.clone(),
            problem_type: rec.problem_type.clone(),
            persona: rec.persona.clone(),
            dialog: rec
                .utterances
                .iter()
                .map(|u| CanonicalTurn {
                    speaker: u.speaker,
                    strategy: u.strategy.as_ref().map(|s| s.name.clone()),
                    text: u.text.clone(),
                })
                .collect(),
        };
        serde_json::to_writer(&mut out, &line).expect("record serializes");
        out.push(b'\n');
    }
    write_bytes(path, &out)
}

pub fn read_canonical(path: &Path, registry: &StrategyRegistry) -> Result<Vec<DialogueRecord>> {
    super::load_corpus(path, super::CorpusFormat::Canonical, registry).map(|l| l.records)
}

pub fn write_personas(records: &[DialogueRecord], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    for rec in records {
        if let Some(p) = &rec.persona {
            serde_json::to_writer(
                &mut out,
                &serde_json::json!({ "dialogue_id": rec.dialogue_id, "persona": p }),
            )
            .expect("persona serializes");
            out.push(b'\n');
        }
    }
    write_bytes(path, &out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn release_format_maps_speakers_and_strategies() {
        let raw = r#"[{"experience_type":"x","emotion_type":"anxiety","problem_type":"job crisis",
            "situation":"s","dialog":[
              {"speaker":"seeker","annotation":{},"content":"hi "},
              {"speaker":"supporter","annotation":{"strategy":"Question"},"content":"how?"},
              {"speaker":"supporter","annotation":{"strategy":"Made Up"},"content":"ok"}]}]"#;
        let reg = StrategyRegistry::builtin();
        let loaded = parse_esconv_release(raw, "mem", &reg).unwrap();
        assert_eq!(loaded.records.len(), 1);
        let r = &loaded.records[0];
        assert_eq!(r.dialogue_id, "esconv-0");
        assert_eq!(r.utterances[0].text, "hi");
        assert_eq!(r.utterances[1].strategy.as_ref().unwrap().name, "Question");
        assert_eq!(r.utterances[2].strategy.as_ref().unwrap().name, "Others");
        assert_eq!(loaded.warnings.len(), 1);
    }

    #[test]
    fn canonical_parse_error_names_line() {
        let reg = StrategyRegistry::builtin();
        let raw = "{\"dialogue_id\":\"a\",\"emotion_type\":\"e\",\"problem_type\":\"p\",\"dialog\":[{\"speaker\":\"seeker\",\"text\":\"x\"}]}\n{broken";
        match parse_canonical(raw, "mem", &reg) {
            Err(Error::Load { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected load error, got {other:?}"),
        }
    }
}
