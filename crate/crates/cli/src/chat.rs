use std::io::{BufRead, Write};
use std::path::Path;

use prccf::cognition::Relation;
use prccf::config::RunConfig;
use prccf::corpus::{Speaker, TrainingSample, Utterance};
use prccf::fusion::{Checkpoint, GenerationConfig};
use prccf::Result;

use crate::{emit, generation_config, io_err, settings_for, Inputs, Layout};

/// Fixed attributes of the simulated help-seeker.
#[derive(Debug, Clone)]
pub struct ChatOptions {
    pub persona: String,
    pub problem_type: String,
    pub emotion: String,
}

impl Default for ChatOptions {
    fn default() -> Self {
        Self {
            persona: String::new(),
            problem_type: String::new(),
            emotion: "sadness".into(),
        }
    }
}

/// Reads seeker turns from `input` until EOF or `:quit` and writes the
/// full trace of each reply to `out`. `:reset` clears the history.
pub fn cmd_chat(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    opts: &ChatOptions,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<usize> {
    let dir = checkpoint.map_or_else(|| Layout::new(cfg).model_dir(), Path::to_path_buf);
    let (model, _) = Checkpoint::load(&dir)?;
    let inputs = Inputs::load(cfg, cfg.ablation.use_pr)?;
    let pipeline = inputs.pipeline(settings_for(cfg, cfg.ablation)?)?;
    let gen_base = generation_config(cfg);
    let mut history: Vec<Utterance> = Vec::new();
    let mut turns = 0;
    let mut line = String::new();
    loop {
        line.clear();
        let n = input
            .read_line(&mut line)
            .map_err(|e| io_err(Path::new("<stdin>"), e))?;
        if n == 0 {
            break;
        }
        let text = line.trim();
        match text {
            "" => continue,
            ":quit" => break,
            ":reset" => {
                history.clear();
                emit(out, "(history cleared)\n")?;
                continue;
            }
            _ => {}
        }
        history.push(Utterance {
            speaker: Speaker::Seeker,
            text: text.to_string(),
            strategy: None,
            turn_index: history.len(),
        });
        let sample = TrainingSample {
            dialogue_id: "chat".into(),
            turn_index: history.len(),
            context: history.clone(),
            target_response: String::new(),
            target_strategy: inputs.registry.catch_all(),
            persona: opts.persona.clone(),
            emotion_label: opts.emotion.clone(),
            problem_type: opts.problem_type.clone(),
        };
        let (prepared, trace) = pipeline.prepare(&sample, false)?;
        let gen_cfg = GenerationConfig {
            seed: gen_base.seed.wrapping_add(turns as u64),
            ..gen_base
        };
        let reply = model.generate(&prepared, &gen_cfg)?;

        let mut s = format!("seeker> {text}\n");
        if trace.retrieved.is_empty() {
            s.push_str("  demonstrations: (retrieval disabled)\n");
        } else {
            s.push_str("  demonstrations:\n");
            for (i, c) in trace.retrieved.iter().enumerate() {
                s.push_str(&format!(
                    "    {}. score {:.4} [{}] {} => {}\n",
                    i + 1,
                    c.score,
                    c.entry.strategy.name,
                    c.entry.utterance,
                    c.entry.response
                ));
            }
        }
        match &trace.bundle {
            Some(b) => {
                s.push_str("  knowledge:\n");
                for r in Relation::AGGREGATION_ORDER {
                    s.push_str(&format!("    {}: {}\n", r.name(), b.filtered(r)));
                }
            }
            None => s.push_str("  knowledge: (disabled)\n"),
        }
        match &trace.causes {
            Some(c) => {
                let idx: Vec<String> = c
                    .iter()
                    .filter(|a| a.is_cause)
                    .map(|a| a.utterance_index.to_string())
                    .collect();
                s.push_str(&format!("  causes: [{}]\n", idx.join(", ")));
            }
            None => s.push_str("  causes: (disabled)\n"),
        }
        let label = inputs.registry.label(reply.strategy);
        let p = reply.ranked.first().map_or(0.0, |r| r.1);
        s.push_str(&format!("  strategy: {} (p={p:.4})\n", label.name));
        s.push_str(&format!("supporter> {}\n", reply.text));
        emit(out, &s)?;

        history.push(Utterance {
            speaker: Speaker::Supporter,
            text: reply.text,
            strategy: Some(label),
            turn_index: history.len(),
        });
        turns += 1;
    }
    Ok(turns)
}
