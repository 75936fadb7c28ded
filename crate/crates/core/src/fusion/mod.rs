//! Multi-source fusion of context, demonstrations and cognition, the
//! strategy-conditioned decoder, training and sampling.

mod checkpoint;
mod model;
mod sampling;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::Norm;
use crate::nn::{softmax_rows, Graph, Mask, Matrix, ParamId, ParamStore, Var};

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use model::{
    stage_of, ContextEncoding, Generation, ModelConfig, PrccfModel, PreparedSample, StepStats,
    TokenNll, STAGES,
};
pub use sampling::{apply_repetition_penalty, sample_next, top_k_filter, top_p_filter};

/// Number of fused terms.
pub const FUSION_TERMS: usize = 5;

/// Softmax weights over
/// `[H_CTX, tilde_P, tilde_C, hat_P, hat_C]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub w: [f64; FUSION_TERMS],
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            w: [0.0; FUSION_TERMS],
        }
    }
}

impl FusionWeights {
    /// λ under the term mask of `flags`; disabled terms get 0.
    pub fn lambda(&self, flags: &AblationFlags) -> [f64; FUSION_TERMS] {
        let m = Matrix::from_vec(1, FUSION_TERMS, self.w.to_vec());
        let keep = flags.term_mask();
        let p = softmax_rows(&m, Some(keep.as_slice()));
        let mut out = [0.0; FUSION_TERMS];
        out.copy_from_slice(&p.data);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub use_pr: bool,
    pub use_persona_sim: bool,
    pub use_ccf: bool,
    pub use_causal: bool,
    pub use_filter: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl AblationFlags {
    pub const fn full() -> Self {
        Self {
            use_pr: true,
            use_persona_sim: true,
            use_ccf: true,
            use_causal: true,
            use_filter: true,
        }
    }

    /// The five single-component ablations, labelled as in reports.
    pub fn table3() -> [(&'static str, AblationFlags); 5] {
        let f = Self::full();
        [
            (
                "w/o PR",
                Self {
                    use_pr: false,
                    use_persona_sim: false,
                    ..f
                },
            ),
            (
                "w/o Per_sim",
                Self {
                    use_persona_sim: false,
                    ..f
                },
            ),
            (
                "w/o CCF",
                Self {
                    use_ccf: false,
                    use_causal: false,
                    use_filter: false,
                    ..f
                },
            ),
            (
                "w/o Causal",
                Self {
                    use_causal: false,
                    ..f
                },
            ),
            (
                "w/o Filter",
                Self {
                    use_filter: false,
                    ..f
                },
            ),
        ]
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.use_persona_sim && !self.use_pr {
            v.push("ablation.use_persona_sim requires ablation.use_pr".into());
        }
        if (self.use_causal || self.use_filter) && !self.use_ccf {
            v.push("ablation.use_causal and ablation.use_filter require ablation.use_ccf".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations() {
            v if v.is_empty() => Ok(()),
            v => Err(Error::Config(v)),
        }
    }

    /// Which of the five fused terms are present.
    pub fn term_mask(&self) -> [bool; FUSION_TERMS] {
        [true, self.use_pr, self.use_ccf, self.use_pr, self.use_ccf]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            top_p: 0.9,
            repetition_penalty: 1.03,
            max_new_tokens: 50,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.top_k == 0 {
            v.push("generation.top_k must be >= 1".into());
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            v.push(format!("generation.top_p must be in (0, 1] (got {})", self.top_p));
        }
        if self.repetition_penalty.is_nan() || self.repetition_penalty < 1.0 {
            v.push(format!(
                "generation.repetition_penalty must be >= 1 (got {})",
                self.repetition_penalty
            ));
        }
        if self.max_new_tokens == 0 {
            v.push("generation.max_new_tokens must be >= 1".into());
        }
        v
    }
}

/// Learned parts of the fusion stage.
#[derive(Debug, Clone)]
pub struct FusionLayer {
    pub w: ParamId,
    pub tilde_p: Norm,
    pub tilde_c: Norm,
    pub hat_p: Norm,
    pub hat_c: Norm,
    pub fin: Norm,
}

impl FusionLayer {
    pub fn new(store: &mut ParamStore, d: usize) -> Self {
        Self {
            w: store.add("fusion.w", Matrix::zeros(1, FUSION_TERMS)),
            tilde_p: Norm::new(store, "fusion.tilde_p", d),
            tilde_c: Norm::new(store, "fusion.tilde_c", d),
            hat_p: Norm::new(store, "fusion.hat_p", d),
            hat_c: Norm::new(store, "fusion.hat_c", d),
            fin: Norm::new(store, "fusion.fin", d),
        }
    }

    pub fn weights(&self, store: &ParamStore) -> FusionWeights {
        let mut w = [0.0; FUSION_TERMS];
        w.copy_from_slice(&store.value(self.w).data);
        FusionWeights { w }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrossAttended {
    pub z: Var,
    pub tilde: Var,
    pub hat: Var,
}

/// `Z = softmax(H_CTX H_Xᵀ) H_X`, `tilde = LN(H_CTX + Z)`; `hat` attends
/// from X to the context and re-attends the result back onto context
/// positions before the same residual normalization.
pub fn cross_attend(
    g: &mut Graph,
    h_ctx: Var,
    h_x: Var,
    tilde_norm: &Norm,
    hat_norm: &Norm,
) -> Result<CrossAttended> {
    let (_, d_ctx) = g.shape(h_ctx);
    let (_, d_x) = g.shape(h_x);
    if d_ctx != d_x {
        return Err(Error::contract(format!(
            "cross attention hidden sizes differ: context {d_ctx}, source {d_x}"
        )));
    }
    let scores = g.matmul_t(h_ctx, h_x, false, true);
    let attn = g.softmax(scores, None);
    let z = g.matmul(attn, h_x);
    let res = g.add(h_ctx, z);
    let tilde = tilde_norm.forward(g, res);

    let back = g.matmul_t(h_x, h_ctx, false, true);
    let back = g.softmax(back, None);
    let aligned = g.matmul(back, h_ctx);
    let scores = g.matmul_t(h_ctx, aligned, false, true);
    let attn = g.softmax(scores, None);
    let projected = g.matmul(attn, aligned);
    let res = g.add(h_ctx, projected);
    let hat = hat_norm.forward(g, res);
    Ok(CrossAttended { z, tilde, hat })
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub p: Option<CrossAttended>,
    pub c: Option<CrossAttended>,
    pub lambda: Var,
    pub h_fin: Var,
    pub h_fin_norm: Var,
}

/// Materialized fusion intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub z_p: Option<Matrix>,
    pub z_c: Option<Matrix>,
    pub tilde_p: Option<Matrix>,
    pub tilde_c: Option<Matrix>,
    pub hat_p: Option<Matrix>,
    pub hat_c: Option<Matrix>,
    pub lambda: [f64; FUSION_TERMS],
    pub h_fin: Matrix,
    pub h_fin_norm: Matrix,
}

impl FusionVars {
    pub fn materialize(&self, g: &Graph) -> FusionState {
        let get = |v: Option<CrossAttended>, f: fn(&CrossAttended) -> Var| {
            v.map(|c| g.value(f(&c)).clone())
        };
        let mut lambda = [0.0; FUSION_TERMS];
        lambda.copy_from_slice(&g.value(self.lambda).data);
        FusionState {
            z_p: get(self.p, |c| c.z),
            z_c: get(self.c, |c| c.z),
            tilde_p: get(self.p, |c| c.tilde),
            tilde_c: get(self.c, |c| c.tilde),
            hat_p: get(self.p, |c| c.hat),
            hat_c: get(self.c, |c| c.hat),
            lambda,
            h_fin: g.value(self.h_fin).clone(),
            h_fin_norm: g.value(self.h_fin_norm).clone(),
        }
    }
}

/// `H_fin = Σ λ_i · term_i` over the terms whose source is present, with λ
/// the softmax of `w` restricted to those terms.
pub fn fuse(
    g: &mut Graph,
    layer: &FusionLayer,
    h_ctx: Var,
    h_p: Option<Var>,
    h_c: Option<Var>,
) -> Result<FusionVars> {
    let p = h_p
        .map(|h| cross_attend(g, h_ctx, h, &layer.tilde_p, &layer.hat_p))
        .transpose()?;
    let c = h_c
        .map(|h| cross_attend(g, h_ctx, h, &layer.tilde_c, &layer.hat_c))
        .transpose()?;
    let keep: Mask = Rc::new(vec![true, p.is_some(), c.is_some(), p.is_some(), c.is_some()]);
    let w = g.param(layer.w);
    let lambda = g.softmax(w, Some(&keep));
    let terms = [
        Some(h_ctx),
        p.map(|x| x.tilde),
        c.map(|x| x.tilde),
        p.map(|x| x.hat),
        c.map(|x| x.hat),
    ];
    let mut h_fin: Option<Var> = None;
    for (i, t) in terms.iter().enumerate() {
        if let Some(t) = *t {
            let s = g.scale_by_entry(t, lambda, i);
            h_fin = Some(match h_fin {
                Some(acc) => g.add(acc, s),
                None => s,
            });
        }
    }
    let h_fin = h_fin.expect("context term is always present");
    let h_fin_norm = layer.fin.forward(g, h_fin);
    if !g.value(h_fin_norm).is_finite() {
        return Err(Error::numeric("fusion", "non-finite fused representation"));
    }
    Ok(FusionVars {
        p,
        c,
        lambda,
        h_fin,
        h_fin_norm,
    })
}
