//! Cognitive knowledge refinement: encode the filtered knowledge, prepend
//! its summary to the context, re-encode under the causal mask and gate.

use rand::Rng;

use super::mask::CausalMask;
use crate::error::{Error, Result};
use crate::nn::layers::{Linear, Stack};
use crate::nn::{Graph, Matrix, ParamStore, Var};

/// Parameter-name prefix of this stage.
pub const STAGE_PREFIX: &str = "cognition.";

#[derive(Debug, Clone)]
pub struct CognitiveRefiner {
    pub enc_cog: Stack,
    pub enc_ref: Stack,
    pub select_in: Linear,
    pub select_out: Linear,
}

/// Graph handles of every intermediate of one refinement pass.
#[derive(Debug, Clone, Copy)]
pub struct CognitiveVars {
    pub h_com: Var,
    pub summary: Var,
    pub h_mix: Var,
    pub h_ref: Var,
    pub h_c: Var,
}

/// Materialized intermediates, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct CognitiveState {
    pub h_com: Matrix,
    pub summary: Matrix,
    pub h_mix: Matrix,
    pub h_ref: Matrix,
    pub h_c: Matrix,
}

impl CognitiveRefiner {
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        d_ff: usize,
        heads: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            enc_cog: Stack::new(store, "cognition.enc_cog", layers, d, d_ff, heads, false, rng),
            enc_ref: Stack::new(store, "cognition.enc_ref", layers, d, d_ff, heads, false, rng),
            select_in: Linear::new(store, "cognition.selector.in", d, d, rng),
            select_out: Linear::new(store, "cognition.selector.out", d, d, rng),
        }
    }

    /// `MLP(sigmoid(h_ref) * h_ref)`.
    pub fn select(&self, g: &mut Graph, h_ref: Var) -> Var {
        let gate = g.sigmoid(h_ref);
        let gated = g.mul(gate, h_ref);
        let h = self.select_in.forward(g, gated);
        let h = g.gelu(h);
        self.select_out.forward(g, h)
    }

    /// `mask` is the context mask; `None` means unrestricted attention.
    pub fn forward(
        &self,
        g: &mut Graph,
        knowledge: Var,
        h_ctx: Var,
        mask: Option<&CausalMask>,
    ) -> Result<CognitiveVars> {
        let t_ctx = g.shape(h_ctx).0;
        if let Some(m) = mask {
            if m.size() != t_ctx {
                return Err(Error::contract(format!(
                    "causal mask is {0}x{0} but the context has {t_ctx} positions",
                    m.size()
                )));
            }
        }
        let h_com = self.enc_cog.forward(g, knowledge, None, None);
        check(g, h_com, "enc_cog")?;
        let summary = g.slice_rows(h_com, 0, 1);
        let repeated = g.repeat_row(summary, t_ctx);
        let h_mix = g.concat_rows(&[repeated, h_ctx]);
        let mix_mask = mask.map(|m| m.with_open_prefix(t_ctx));
        let h_ref = self.enc_ref.forward(g, h_mix, mix_mask.as_ref(), None);
        check(g, h_ref, "enc_ref")?;
        let h_c = self.select(g, h_ref);
        check(g, h_c, "selector")?;
        Ok(CognitiveVars {
            h_com,
            summary,
            h_mix,
            h_ref,
            h_c,
        })
    }
}

impl CognitiveVars {
    pub fn materialize(&self, g: &Graph) -> CognitiveState {
        CognitiveState {
            h_com: g.value(self.h_com).clone(),
            summary: g.value(self.summary).clone(),
            h_mix: g.value(self.h_mix).clone(),
            h_ref: g.value(self.h_ref).clone(),
            h_c: g.value(self.h_c).clone(),
        }
    }
}

fn check(g: &Graph, v: Var, stage: &str) -> Result<()> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(stage, "non-finite activation"))
    }
}
