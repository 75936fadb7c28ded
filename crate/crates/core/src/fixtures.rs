//! Deterministic synthetic corpus and adapter tables for tests, demos and
//! smoke runs.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cognition::adapters::ANY_SOURCE;
use crate::cognition::{KnowledgeRow, KnowledgeTable, Relation};
use crate::corpus::{write_canonical, write_personas, DialogueRecord, Speaker, StrategyRegistry, Utterance};
use crate::error::Result;

pub const FILTER_MARKERS: [&str; 2] = ["unrelated", "random"];
pub const CAUSE_KEYWORDS: [&str; 1] = ["because"];

const PROBLEMS: [(&str, &str, &[&str]); 4] = [
    (
        "job crisis",
        "anxiety",
        &[
            "i lost my job last week",
            "my boss yelled at me because i was late",
            "i am worried about money because i have no work",
            "i cannot find a new job",
        ],
    ),
    (
        "breakup with partner",
        "sadness",
        &[
            "my partner left me",
            "i feel alone because we broke up",
            "i miss my partner every day",
            "i cannot sleep because i keep thinking about it",
        ],
    ),
    (
        "academic pressure",
        "fear",
        &[
            "my exams are next week",
            "i failed a test because i did not study",
            "my parents expect good grades",
            "i feel stressed about school",
        ],
    ),
    (
        "ongoing depression",
        "depression",
        &[
            "i feel down all the time",
            "nothing makes me happy anymore",
            "i stay in bed because i have no energy",
            "i do not want to see my friends",
        ],
    ),
];

const CLOSERS: [&str; 3] = [
    "thank you for listening",
    "that makes sense",
    "i will try that",
];

const RESPONSES: [&[&str]; 8] = [
    &["how long have you felt this way ?", "can you tell me more about it ?"],
    &["so you feel that things are hard right now", "it sounds like you are going through a lot"],
    &["you seem very sad and tired", "i can hear that you feel worried"],
    &["i once felt the same way", "i have been there too"],
    &["you are doing your best", "it is okay to feel this way"],
    &["maybe you could talk to a friend", "you could try a short walk each day"],
    &["many people find that sleep helps", "there are free groups that can help"],
    &["i am here for you", "take care of yourself"],
];

const JOBS: [&str; 4] = ["a teacher", "a student", "a nurse", "a driver"];
const HOBBIES: [&str; 4] = ["music", "games", "cooking", "running"];

/// Strategy for the `n`-th supporter turn: exploration, then comfort, then
/// action.
fn staged_strategy(n: usize, rng: &mut impl Rng) -> usize {
    let pool: &[usize] = match n {
        0 => &[0],
        1 => &[1, 2],
        2 => &[4, 3],
        _ => &[5, 6],
    };
    *pool.choose(rng).expect("non-empty pool")
}

/// `n` dialogues of 4 to 5 exchanges each.
pub fn synthetic_dialogues(n: usize, seed: u64) -> Vec<DialogueRecord> {
    let registry = StrategyRegistry::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let (problem, emotion, lines) = PROBLEMS[i % PROBLEMS.len()];
            let exchanges = rng.random_range(4..=5);
            let mut utterances = Vec::new();
            for e in 0..exchanges {
                let seeker = if e + 1 == exchanges {
                    CLOSERS.choose(&mut rng).expect("closers")
                } else {
                    lines.choose(&mut rng).expect("lines")
                };
                utterances.push(Utterance {
                    speaker: Speaker::Seeker,
                    text: seeker.to_string(),
                    strategy: None,
                    turn_index: utterances.len(),
                });
                let s = if e + 1 == exchanges { 7 } else { staged_strategy(e, &mut rng) };
                utterances.push(Utterance {
                    speaker: Speaker::Supporter,
                    text: RESPONSES[s].choose(&mut rng).expect("responses").to_string(),
                    strategy: Some(registry.label(s)),
                    turn_index: utterances.len(),
                });
            }
            DialogueRecord {
                dialogue_id: format!("syn-{i:03}"),
                situation: format!("seeker is dealing with {problem}"),
                emotion_label: emotion.into(),
                problem_type: problem.into(),
                utterances,
                persona: Some(format!(
                    "i am {} and i like {}",
                    JOBS[i % JOBS.len()],
                    HOBBIES[(i / JOBS.len()) % HOBBIES.len()]
                )),
            }
        })
        .collect()
}

/// Canned inferences: wildcard rows for every relation (some carrying a
/// filter marker) plus specific rows for a few seeker lines.
pub fn knowledge_rows() -> Vec<KnowledgeRow> {
    let generic: [(Relation, [&str; 5]); 4] = [
        (
            Relation::XIntent,
            ["to feel better", "to be heard", "random noise", "to get help", "to relax"],
        ),
        (
            Relation::XWant,
            ["to talk to someone", "unrelated fact", "to rest", "to be safe", "random thing"],
        ),
        (
            Relation::XNeed,
            ["support", "time", "a plan", "unrelated item", "sleep"],
        ),
        (
            Relation::XEffect,
            ["feels tired", "cries", "unrelated event", "worries", "feels alone"],
        ),
    ];
    let mut rows = Vec::new();
    for (relation, items) in generic {
        for (rank, text) in items.iter().enumerate() {
            rows.push(KnowledgeRow {
                source_text: ANY_SOURCE.into(),
                relation,
                rank,
                inference: text.to_string(),
            });
        }
    }
    for (_, _, lines) in PROBLEMS {
        let line = lines[0];
        for (rank, text) in ["to find a way out", "random guess", "to be understood"].iter().enumerate() {
            rows.push(KnowledgeRow {
                source_text: line.into(),
                relation: Relation::XWant,
                rank,
                inference: text.to_string(),
            });
        }
    }
    rows
}

pub fn knowledge_table() -> KnowledgeTable {
    KnowledgeTable::from_rows(knowledge_rows())
}

/// Files written by [`write_fixture_set`].
#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub corpus: PathBuf,
    pub personas: PathBuf,
    pub knowledge: PathBuf,
}

/// Writes the corpus (without inline personas), the persona sidecar and
/// the knowledge table into `dir`.
pub fn write_fixture_set(dir: &Path, dialogues: usize, seed: u64) -> Result<FixturePaths> {
    std::fs::create_dir_all(dir).map_err(|e| crate::Error::io(dir, e))?;
    let records = synthetic_dialogues(dialogues, seed);
    let paths = FixturePaths {
        corpus: dir.join("corpus.jsonl"),
        personas: dir.join("personas.jsonl"),
        knowledge: dir.join("knowledge.jsonl"),
    };
    let stripped: Vec<DialogueRecord> = records
        .iter()
        .map(|r| DialogueRecord {
            persona: None,
            ..r.clone()
        })
        .collect();
    write_canonical(&stripped, &paths.corpus)?;
    write_personas(&records, &paths.personas)?;
    KnowledgeTable::write(&knowledge_rows(), &paths.knowledge)?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_well_formed() {
        let a = synthetic_dialogues(20, 7);
        assert_eq!(a, synthetic_dialogues(20, 7));
        assert_eq!(a.len(), 20);
        for d in &a {
            assert!(d.utterances.len() >= 8);
            for (i, u) in d.utterances.iter().enumerate() {
                assert_eq!(u.turn_index, i);
                assert_eq!(u.strategy.is_some(), u.speaker == Speaker::Supporter);
            }
        }
    }
}
