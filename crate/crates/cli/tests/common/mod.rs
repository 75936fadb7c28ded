#![allow(dead_code)]

use std::path::{Path, PathBuf};

use prccf::config::RunConfig;
use prccf::fixtures::write_fixture_set;

pub const FIXTURE_DIALOGUES: usize = 20;
pub const FIXTURE_SEED: u64 = 42;

/// Config text for the synthetic fixture under `dir` with a short
/// training budget.
pub fn fixture_toml(dir: &Path, max_steps: u64) -> String {
    let data = dir.join("data");
    format!(
        r#"seed = {FIXTURE_SEED}

[paths]
artifact_root = "{root}"
corpus = "{corpus}"
personas = "{personas}"
knowledge = "{knowledge}"

[training]
lr = 1e-3
batch_size = 4
max_steps = {max_steps}
"#,
        root = dir.join("artifacts").display(),
        corpus = data.join("corpus.jsonl").display(),
        personas = data.join("personas.jsonl").display(),
        knowledge = data.join("knowledge.jsonl").display(),
    )
}

/// Writes the fixture data and config file; returns the config path.
pub fn fixture_workspace(dir: &Path, max_steps: u64) -> PathBuf {
    write_fixture_set(&dir.join("data"), FIXTURE_DIALOGUES, FIXTURE_SEED).expect("fixture data");
    let path = dir.join("run.toml");
    std::fs::write(&path, fixture_toml(dir, max_steps)).expect("config file");
    path
}

pub fn load_config(path: &Path, overrides: &[&str]) -> RunConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    RunConfig::load(Some(path), &overrides).expect("valid fixture config")
}

/// Scripted seeker turns for transcript tests.
pub const CHAT_SCRIPT: &str = "i feel so anxious because of my exams\n\
my friends do not call me anymore\n\
:reset\n\
i cannot sleep because i keep thinking about it\n\
:quit\n\
this line is never read\n";

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("golden")
}
