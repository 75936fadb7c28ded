use rand::Rng;

/// Penalizes every token in `history`: positive logits are divided by
/// `penalty`, negative ones multiplied.
pub fn apply_repetition_penalty(logits: &mut [f64], history: &[usize], penalty: f64) {
    let mut seen = vec![false; logits.len()];
    for &t in history {
        if t < seen.len() && !seen[t] {
            seen[t] = true;
            let l = &mut logits[t];
            *l = if *l > 0.0 { *l / penalty } else { *l * penalty };
        }
    }
}

/// Keeps the `k` largest logits (ties by lower id) and sets the rest to
/// negative infinity.
pub fn top_k_filter(logits: &mut [f64], k: usize) {
    if k >= logits.len() {
        return;
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    for &i in &order[k..] {
        logits[i] = f64::NEG_INFINITY;
    }
}

/// Softmax of `logits` restricted to the smallest prefix of the
/// probability-sorted tokens whose mass reaches `p`, renormalized.
pub fn top_p_filter(logits: &[f64], p: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|v| *v /= z);
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let mut mass = 0.0;
    let mut cut = order.len();
    for (rank, &i) in order.iter().enumerate() {
        mass += probs[i];
        if mass >= p {
            cut = rank + 1;
            break;
        }
    }
    let mut out = vec![0.0; probs.len()];
    let kept: f64 = order[..cut].iter().map(|&i| probs[i]).sum();
    for &i in &order[..cut] {
        out[i] = probs[i] / kept;
    }
    out
}

/// One sampling step: penalty, top-k, top-p, then a draw from `rng`.
pub fn sample_next(
    logits: &[f64],
    history: &[usize],
    top_k: usize,
    top_p: f64,
    penalty: f64,
    rng: &mut impl Rng,
) -> usize {
    let mut l = logits.to_vec();
    apply_repetition_penalty(&mut l, history, penalty);
    top_k_filter(&mut l, top_k);
    let probs = top_p_filter(&l, top_p);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn penalty_divides_positive_and_multiplies_negative() {
        let mut l = vec![2.06, -1.0, 0.5, 3.0, 0.0];
        apply_repetition_penalty(&mut l, &[0, 1, 1], 1.03);
        assert!((l[0] - 2.0).abs() < 1e-12);
        assert!((l[1] + 1.03).abs() < 1e-12);
        assert_eq!(&l[2..], &[0.5, 3.0, 0.0]);
    }

    #[test]
    fn top_one_is_greedy() {
        let logits = [0.1, 2.0, 1.9, -3.0];
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(sample_next(&logits, &[], 1, 1.0, 1.0, &mut rng), 1);
        }
    }

    #[test]
    fn nucleus_keeps_smallest_covering_prefix() {
        let l = [3.0f64.ln(), 2.0f64.ln(), 1.0f64.ln()];
        let p = top_p_filter(&l, 0.6);
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.4).abs() < 1e-12 && p[2] == 0.0);
    }
}
