//! Automatic metrics, strategy analyses and report rendering.

mod analysis;
mod metrics;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fusion::{GenerationConfig, PrccfModel, PreparedSample};
use crate::text::STRATEGY_TOKENS;

pub use analysis::{
    interval_of, stage_distribution, stage_update_series, sweep_report, update_dynamics,
    StageDistribution, StrategyTrack, SweepPoint, SweepReport, INTERVALS, SWEEP_COLUMNS,
};
pub use metrics::{
    bleu_n, distinct_n, eval_tokens, lcs_len, perplexity_from_nll, rouge_l, strategy_accuracy,
    token_f1,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub ppl: f64,
    pub bleu: [f64; 4],
    pub distinct: [f64; 2],
    pub rouge_l: f64,
    pub sample_count: usize,
}

/// Per-sample evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub gold_strategy: usize,
    pub ranked_strategies: Vec<usize>,
    /// Predicted strategy distribution indexed by strategy id.
    pub strategy_probs: Vec<f64>,
    /// Mean NLL of the gold response tokens.
    pub response_nll: f64,
    pub hypothesis: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Top-n strategy accuracy for n = 1..=8.
    pub top_n: [f64; STRATEGY_TOKENS],
    pub token_f1: f64,
    pub outputs: Vec<SampleOutput>,
}

/// Perplexity over the gold response tokens (end marker included,
/// strategy token excluded).
pub fn perplexity(model: &PrccfModel, samples: &[PreparedSample]) -> Result<f64> {
    let mut nll = Vec::new();
    for s in samples {
        nll.extend(model.token_nll(s)?.response);
    }
    perplexity_from_nll(&nll)
}

/// Generates a response for every sample (seed offset by sample position)
/// and scores the result.
pub fn evaluate(model: &PrccfModel, samples: &[PreparedSample], cfg: &GenerationConfig) -> Result<Evaluation> {
    let mut outputs = Vec::with_capacity(samples.len());
    let mut nll = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let t = model.token_nll(s)?;
        let response_nll = t.response.iter().sum::<f64>() / t.response.len().max(1) as f64;
        nll.extend(t.response);
        let gen_cfg = GenerationConfig {
            seed: cfg.seed.wrapping_add(i as u64),
            ..*cfg
        };
        let g = model.generate(s, &gen_cfg)?;
        outputs.push(SampleOutput {
            dialogue_id: s.dialogue_id.clone(),
            turn_index: s.turn_index,
            gold_strategy: s.target_strategy,
            ranked_strategies: g.ranked.iter().map(|(id, _)| *id).collect(),
            strategy_probs: t.strategy_probs.to_vec(),
            response_nll,
            hypothesis: g.text,
            reference: s.target_response.clone(),
        });
    }
    let hyps: Vec<String> = outputs.iter().map(|o| o.hypothesis.clone()).collect();
    let refs: Vec<String> = outputs.iter().map(|o| o.reference.clone()).collect();
    let ranked: Vec<Vec<usize>> = outputs.iter().map(|o| o.ranked_strategies.clone()).collect();
    let golds: Vec<usize> = outputs.iter().map(|o| o.gold_strategy).collect();
    let mut top_n = [0.0; STRATEGY_TOKENS];
    for (n, t) in top_n.iter_mut().enumerate() {
        *t = strategy_accuracy(&ranked, &golds, n + 1)?;
    }
    let report = MetricReport {
        acc: top_n[0],
        ppl: perplexity_from_nll(&nll)?,
        bleu: [
            bleu_n(&hyps, &refs, 1)?,
            bleu_n(&hyps, &refs, 2)?,
            bleu_n(&hyps, &refs, 3)?,
            bleu_n(&hyps, &refs, 4)?,
        ],
        distinct: [distinct_n(&hyps, 1)?, distinct_n(&hyps, 2)?],
        rouge_l: rouge_l(&hyps, &refs)?,
        sample_count: samples.len(),
    };
    Ok(Evaluation {
        report,
        top_n,
        token_f1: token_f1(&hyps, &refs)?,
        outputs,
    })
}

const METRIC_HEADER: [&str; 9] = ["ACC(%)", "PPL", "B-1", "B-2", "B-3", "B-4", "D-1", "D-2", "R-L"];
const ABLATION_HEADER: [&str; 6] = ["PPL", "B-1", "B-2", "B-3", "B-4", "R-L"];

fn table(label_header: &str, header: &[&str], rows: &[(String, Vec<f64>)]) -> String {
    let width = rows
        .iter()
        .map(|(l, _)| l.len())
        .chain([label_header.len()])
        .max()
        .unwrap_or(0);
    let mut out = format!("{label_header:<width$}");
    for h in header {
        let _ = write!(out, " {h:>8}");
    }
    out.push('\n');
    for (label, vals) in rows {
        let _ = write!(out, "{label:<width$}");
        for v in vals {
            let _ = write!(out, " {v:>8.2}");
        }
        out.push('\n');
    }
    out
}

/// Rows of named reports in the main results column order.
pub fn render_metric_table(rows: &[(String, MetricReport)]) -> String {
    let rows: Vec<(String, Vec<f64>)> = rows
        .iter()
        .map(|(n, r)| {
            let mut v = vec![r.acc, r.ppl];
            v.extend(r.bleu);
            v.extend(r.distinct);
            v.push(r.rouge_l);
            (n.clone(), v)
        })
        .collect();
    table("Model", &METRIC_HEADER, &rows)
}

/// Rows of named reports in the ablation-study column order.
pub fn render_ablation_table(rows: &[(String, MetricReport)]) -> String {
    let rows: Vec<(String, Vec<f64>)> = rows
        .iter()
        .map(|(n, r)| {
            let mut v = vec![r.ppl];
            v.extend(r.bleu);
            v.push(r.rouge_l);
            (n.clone(), v)
        })
        .collect();
    table("Model", &ABLATION_HEADER, &rows)
}

pub fn render_top_n(top_n: &[f64; STRATEGY_TOKENS]) -> String {
    let header: Vec<String> = (1..=STRATEGY_TOKENS).map(|n| format!("top-{n}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    table("", &header, &[("acc".into(), top_n.to_vec())])
}

pub fn render_sweep(report: &SweepReport) -> String {
    let mut header: Vec<String> = SWEEP_COLUMNS.iter().map(|c| c.to_string()).collect();
    header.extend(SWEEP_COLUMNS.iter().map(|c| format!("n{c}")));
    header.push("score".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<(String, Vec<f64>)> = report
        .points
        .iter()
        .zip(&report.normalized)
        .zip(&report.aggregate)
        .enumerate()
        .map(|(i, ((p, n), a))| {
            let mut v = vec![p.acc, p.ppl, p.bleu4, p.rouge_l, p.f1];
            v.extend(n);
            v.push(*a);
            let mark = if i == report.best { "*" } else { "" };
            (format!("pairs={}{mark}", p.pairs), v)
        })
        .collect();
    table("", &header, &rows)
}

pub fn render_stage_distribution(d: &StageDistribution, names: &[String]) -> String {
    let header: Vec<String> = (1..=INTERVALS).map(|i| format!("I{i}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<(String, Vec<f64>)> = names
        .iter()
        .enumerate()
        .map(|(s, n)| (n.clone(), d.frequencies.iter().map(|row| row[s]).collect()))
        .collect();
    table("Strategy", &header, &rows)
}
