use std::rc::Rc;

use super::CauseAnnotation;
use crate::error::{Error, Result};
use crate::nn::Mask;

/// Token-level T×T attention mask over the dialogue context.
///
/// `M[i][j] = 1` iff the utterance owning token `j` is causal, is the
/// current utterance, or `i == j`. Masking acts on keys (columns).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalMask {
    size: usize,
    data: Vec<bool>,
    /// Utterance index of each token position.
    pub token_layout: Vec<usize>,
    /// Whether each column is open to every query.
    open_columns: Vec<bool>,
}

impl CausalMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.size + j]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn is_all_ones(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    /// Mask that admits every pair (the "w/o Causal" ablation).
    pub fn all_ones(token_layout: Vec<usize>) -> Self {
        let size = token_layout.len();
        Self {
            size,
            data: vec![true; size * size],
            token_layout,
            open_columns: vec![true; size],
        }
    }

    /// Attention mask for a sequence of `prefix` knowledge-summary positions
    /// followed by this context: summary columns are open, context columns
    /// keep this mask's rule.
    pub fn with_open_prefix(&self, prefix: usize) -> Mask {
        let n = prefix + self.size;
        let mut out = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = j < prefix || i == j || self.open_columns[j - prefix];
            }
        }
        Rc::new(out)
    }

    pub fn to_mask(&self) -> Mask {
        Rc::new(self.data.clone())
    }
}

pub fn build_causal_mask(
    token_layout: &[usize],
    annotations: &[CauseAnnotation],
    current_index: usize,
) -> Result<CausalMask> {
    if current_index >= annotations.len() {
        return Err(Error::contract(format!(
            "current utterance {current_index} has no annotation ({} given)",
            annotations.len()
        )));
    }
    let mut causal = vec![false; annotations.len()];
    for a in annotations {
        let slot = causal.get_mut(a.utterance_index).ok_or_else(|| {
            Error::contract(format!("annotation for unknown utterance {}", a.utterance_index))
        })?;
        *slot = a.is_cause;
    }
    if let Some((pos, &u)) = token_layout
        .iter()
        .enumerate()
        .find(|(_, &u)| u >= annotations.len())
    {
        return Err(Error::contract(format!(
            "token layout gap: position {pos} maps to utterance {u} without annotation"
        )));
    }
    let open_columns: Vec<bool> = token_layout
        .iter()
        .map(|&u| causal[u] || u == current_index)
        .collect();
    let size = token_layout.len();
    let mut data = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            data[i * size + j] = open_columns[j] || i == j;
        }
    }
    Ok(CausalMask {
        size,
        data,
        token_layout: token_layout.to_vec(),
        open_columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(flags: &[bool]) -> Vec<CauseAnnotation> {
        flags
            .iter()
            .enumerate()
            .map(|(i, &c)| CauseAnnotation {
                utterance_index: i,
                is_cause: c,
            })
            .collect()
    }

    #[test]
    fn no_causes_leaves_current_columns_and_diagonal() {
        let layout = [0, 0, 1, 1, 2, 2];
        let m = build_causal_mask(&layout, &ann(&[false, false, false]), 2).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let expect = j >= 4 || i == j;
                assert_eq!(m.get(i, j), expect, "({i},{j})");
            }
        }
    }

    #[test]
    fn all_causal_saturates() {
        let m = build_causal_mask(&[0, 1, 1, 2], &ann(&[true, true, true]), 2).unwrap();
        assert!(m.is_all_ones());
    }

    #[test]
    fn layout_gap_is_rejected() {
        assert!(matches!(
            build_causal_mask(&[0, 3], &ann(&[true, false]), 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn open_prefix_extends_rule() {
        let m = build_causal_mask(&[0, 1], &ann(&[false, false]), 1).unwrap();
        let ext = m.with_open_prefix(2);
        let n = 4;
        // summary columns open; context column of utterance 0 only on diagonal.
        assert!(ext[1] && ext[3 * n]);
        assert!(!ext[2] && ext[2 * n + 2] && !ext[3 * n + 2]);
        assert!(ext[3]);
    }
}
