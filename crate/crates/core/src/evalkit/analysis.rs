use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueRecord, Speaker};
use crate::error::{Error, Result};
use crate::text::STRATEGY_TOKENS;
use crate::training::LogRecord;

pub const INTERVALS: usize = 6;

/// Strategy-labelled positions of one dialogue.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StrategyTrack {
    pub turn_count: usize,
    /// `(turn position, strategy id)`.
    pub turns: Vec<(usize, usize)>,
}

impl StrategyTrack {
    pub fn from_record(record: &DialogueRecord) -> Self {
        Self {
            turn_count: record.utterances.len(),
            turns: record
                .utterances
                .iter()
                .enumerate()
                .filter(|(_, u)| u.speaker == Speaker::Supporter)
                .filter_map(|(i, u)| u.strategy.as_ref().map(|s| (i, s.id)))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDistribution {
    pub counts: [[usize; STRATEGY_TOKENS]; INTERVALS],
    /// Per-interval relative frequencies; all zero for an empty interval.
    pub frequencies: [[f64; STRATEGY_TOKENS]; INTERVALS],
}

pub fn interval_of(position: usize, turn_count: usize) -> usize {
    if turn_count == 0 {
        return 0;
    }
    (INTERVALS * position / turn_count).min(INTERVALS - 1)
}

pub fn stage_distribution(tracks: &[StrategyTrack]) -> StageDistribution {
    let mut counts = [[0usize; STRATEGY_TOKENS]; INTERVALS];
    for t in tracks {
        for &(pos, s) in &t.turns {
            if s < STRATEGY_TOKENS {
                counts[interval_of(pos, t.turn_count)][s] += 1;
            }
        }
    }
    let mut frequencies = [[0.0; STRATEGY_TOKENS]; INTERVALS];
    for (f, c) in frequencies.iter_mut().zip(&counts) {
        let total: usize = c.iter().sum();
        if total > 0 {
            for (fi, &ci) in f.iter_mut().zip(c) {
                *fi = ci as f64 / total as f64;
            }
        }
    }
    StageDistribution { counts, frequencies }
}

/// Raw sweep measurements for one `pairs` value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub pairs: usize,
    pub acc: f64,
    pub ppl: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub f1: f64,
}

pub const SWEEP_COLUMNS: [&str; 5] = ["ACC", "PPL", "B-4", "R-L", "F1"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// Min-max normalized columns in [`SWEEP_COLUMNS`] order, PPL inverted.
    pub normalized: Vec<[f64; 5]>,
    /// Mean of the normalized columns.
    pub aggregate: Vec<f64>,
    pub best: usize,
}

/// Min-max normalization per column; a constant column maps to 0.5.
/// Perplexity is inverted so that lower raw values score higher.
pub fn sweep_report(points: Vec<SweepPoint>) -> Result<SweepReport> {
    if points.len() < 2 {
        return Err(Error::contract("a pairs sweep needs at least two values"));
    }
    let raw: Vec<[f64; 5]> = points
        .iter()
        .map(|p| [p.acc, -p.ppl, p.bleu4, p.rouge_l, p.f1])
        .collect();
    let mut normalized = vec![[0.0; 5]; raw.len()];
    for c in 0..5 {
        let lo = raw.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
        let hi = raw.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
        for (n, r) in normalized.iter_mut().zip(&raw) {
            n[c] = if hi > lo { (r[c] - lo) / (hi - lo) } else { 0.5 };
        }
    }
    let aggregate: Vec<f64> = normalized.iter().map(|n| n.iter().sum::<f64>() / 5.0).collect();
    let best = aggregate
        .iter()
        .enumerate()
        .fold(0, |b, (i, &v)| if v > aggregate[b] { i } else { b });
    Ok(SweepReport {
        points,
        normalized,
        aggregate,
        best,
    })
}

/// Mean |Δparam| of one stage per epoch, from step records.
pub fn stage_update_series(log: &[LogRecord], stage: &str) -> Result<Vec<(usize, f64)>> {
    if log.is_empty() {
        return Err(Error::Report("training log is empty".into()));
    }
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in log {
        let d = r.stage_delta.get(stage).ok_or_else(|| {
            Error::Report(format!("step {} has no `{stage}` update record", r.step))
        })?;
        let e = acc.entry(r.epoch).or_default();
        e.0 += d;
        e.1 += 1;
    }
    Ok(acc.into_iter().map(|(e, (s, n))| (e, s / n as f64)).collect())
}

/// Per-epoch refinement-stage update magnitudes; fails when any epoch
/// shows no update.
pub fn update_dynamics(log: &[LogRecord]) -> Result<Vec<(usize, f64)>> {
    let series = stage_update_series(log, "refinement")?;
    if let Some((e, v)) = series.iter().find(|(_, v)| v.is_nan() || *v <= 0.0) {
        return Err(Error::Report(format!(
            "refinement stage did not update in epoch {e} (mean |dparam| = {v})"
        )));
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_turn_positions() {
        let t = StrategyTrack {
            turn_count: 6,
            turns: vec![(1, 0), (3, 0), (5, 0)],
        };
        let d = stage_distribution(&[t]);
        for (i, row) in d.counts.iter().enumerate() {
            assert_eq!(row[0], usize::from(i % 2 == 1));
        }
    }

    #[test]
    fn constant_columns_map_to_half() {
        let p = |pairs, ppl| SweepPoint {
            pairs,
            acc: 10.0,
            ppl,
            bleu4: 1.0,
            rouge_l: 2.0,
            f1: 3.0,
        };
        let r = sweep_report(vec![p(1, 20.0), p(5, 10.0)]).unwrap();
        assert_eq!(r.normalized[0][0], 0.5);
        assert_eq!((r.normalized[0][1], r.normalized[1][1]), (0.0, 1.0));
        assert_eq!(r.best, 1);
        assert!(sweep_report(vec![p(1, 1.0)]).is_err());
    }

    #[test]
    fn frozen_stage_is_reported() {
        let rec = |epoch, d| LogRecord {
            step: epoch as u64,
            epoch,
            loss: 1.0,
            ppl: 1.0f64.exp(),
            lr: 1e-3,
            stage_delta: [("refinement".to_string(), d)].into_iter().collect(),
        };
        assert!(update_dynamics(&[rec(1, 0.1), rec(2, 0.0)]).is_err());
        let s = update_dynamics(&[rec(1, 0.1), rec(1, 0.3), rec(2, 0.05)]).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s[0].1 - 0.2).abs() < 1e-12);
    }
}
