use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::text::STRATEGY_TOKENS;

/// Whitespace split after lowercasing.
pub fn eval_tokens(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_string).collect()
}

fn ngrams(tokens: &[String], n: usize) -> Vec<&[String]> {
    if tokens.len() < n {
        return Vec::new();
    }
    tokens.windows(n).collect()
}

fn counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    for g in ngrams(tokens, n) {
        *m.entry(g).or_insert(0) += 1;
    }
    m
}

fn aligned(hyps: &[String], refs: &[String]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(Error::contract(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

/// Corpus-level cumulative BLEU-n (uniform weights, clipped precisions,
/// brevity penalty), as a percentage.
pub fn bleu_n(hypotheses: &[String], references: &[String], n: usize) -> Result<f64> {
    aligned(hypotheses, references)?;
    if !(1..=4).contains(&n) {
        return Err(Error::contract(format!("BLEU order must be 1..=4 (got {n})")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (eval_tokens(h), eval_tokens(r));
        hyp_len += h.len();
        ref_len += r.len();
        for k in 1..=n {
            let rc = counts(&r, k);
            for (g, c) in counts(&h, k) {
                matched[k - 1] += c.min(rc.get(g).copied().unwrap_or(0));
                total[k - 1] += c;
            }
        }
    }
    if hyp_len == 0 || total.iter().zip(&matched).any(|(&t, &m)| t == 0 || m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / n as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * log_p.exp())
}

/// Unique n-grams over all n-grams of the corpus, as a percentage.
pub fn distinct_n(hypotheses: &[String], n: usize) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::contract("distinct-n of an empty corpus"));
    }
    if n == 0 {
        return Err(Error::contract("distinct-n order must be >= 1"));
    }
    let toks: Vec<Vec<String>> = hypotheses.iter().map(|h| eval_tokens(h)).collect();
    let mut unique = HashSet::new();
    let mut total = 0usize;
    for t in &toks {
        for g in ngrams(t, n) {
            unique.insert(g);
            total += 1;
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        100.0 * unique.len() as f64 / total as f64
    })
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Mean per-pair LCS F-measure (β = 1), as a percentage.
pub fn rouge_l(hypotheses: &[String], references: &[String]) -> Result<f64> {
    aligned(hypotheses, references)?;
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (eval_tokens(h), eval_tokens(r));
        sum += if h.is_empty() && r.is_empty() {
            1.0
        } else {
            let l = lcs_len(&h, &r);
            if l == 0 {
                0.0
            } else {
                let (p, rc) = (l as f64 / h.len() as f64, l as f64 / r.len() as f64);
                2.0 * p * rc / (p + rc)
            }
        };
    }
    Ok(100.0 * sum / hypotheses.len() as f64)
}

/// Mean per-pair token F1 with clipped overlap, as a percentage.
pub fn token_f1(hypotheses: &[String], references: &[String]) -> Result<f64> {
    aligned(hypotheses, references)?;
    if hypotheses.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (eval_tokens(h), eval_tokens(r));
        let rc = counts(&r, 1);
        let overlap: usize = counts(&h, 1)
            .into_iter()
            .map(|(g, c)| c.min(rc.get(g).copied().unwrap_or(0)))
            .sum();
        if overlap > 0 {
            let (p, rr) = (overlap as f64 / h.len() as f64, overlap as f64 / r.len() as f64);
            sum += 2.0 * p * rr / (p + rr);
        }
    }
    Ok(100.0 * sum / hypotheses.len() as f64)
}

/// `exp` of the mean token NLL.
pub fn perplexity_from_nll(token_nll: &[f64]) -> Result<f64> {
    if token_nll.is_empty() {
        return Err(Error::contract("perplexity over zero tokens"));
    }
    let ppl = (token_nll.iter().sum::<f64>() / token_nll.len() as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::numeric("perplexity", format!("non-finite perplexity {ppl}")));
    }
    Ok(ppl)
}

/// Share of samples whose gold strategy is among the first `n` ranked
/// predictions, as a percentage.
pub fn strategy_accuracy(predictions: &[Vec<usize>], golds: &[usize], n: usize) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            golds.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::contract("strategy accuracy over zero samples"));
    }
    let mut hits = 0usize;
    for (ranked, &gold) in predictions.iter().zip(golds) {
        let mut seen = [false; STRATEGY_TOKENS];
        let is_perm = ranked.len() == STRATEGY_TOKENS
            && ranked
                .iter()
                .all(|&s| s < STRATEGY_TOKENS && !std::mem::replace(&mut seen[s], true));
        if !is_perm {
            return Err(Error::contract(format!(
                "ranked strategies {ranked:?} are not a permutation of the registry"
            )));
        }
        if ranked.iter().take(n).any(|&s| s == gold) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn bleu_brevity_example() {
        let b = bleu_n(&s(&["the cat sat"]), &s(&["the cat sat down"]), 1).unwrap();
        assert!((b - 71.65).abs() < 0.01, "{b}");
    }

    #[test]
    fn bleu_rejects_misaligned() {
        assert!(bleu_n(&s(&["a"]), &s(&[]), 1).is_err());
    }

    #[test]
    fn rouge_example() {
        let r = rouge_l(&s(&["a b c d"]), &s(&["a c d"])).unwrap();
        assert!((r - 85.714).abs() < 0.01);
    }

    #[test]
    fn distinct_examples() {
        assert!((distinct_n(&s(&["a a a"]), 1).unwrap() - 33.333).abs() < 0.01);
        assert_eq!(distinct_n(&s(&["a b c"]), 1).unwrap(), 100.0);
        assert!(distinct_n(&[], 1).is_err());
    }

    #[test]
    fn accuracy_rank_two() {
        let preds = vec![vec![1, 0, 2, 3, 4, 5, 6, 7]; 3];
        let golds = [0, 0, 0];
        assert_eq!(strategy_accuracy(&preds, &golds, 1).unwrap(), 0.0);
        assert_eq!(strategy_accuracy(&preds, &golds, 2).unwrap(), 100.0);
        assert!(strategy_accuracy(&[vec![0, 0, 1, 2, 3, 4, 5, 6]], &[0], 1).is_err());
    }
}
