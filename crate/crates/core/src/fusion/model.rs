use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fuse, FusionLayer, FusionVars, GenerationConfig};
use crate::cognition::{
    build_causal_mask, CausalMask, CauseAnnotation, CognitiveRefiner, CognitiveVars, Relation,
};
use crate::corpus::{Speaker, Utterance};
use crate::error::{Error, Result};
use crate::nn::layers::{causal_lm_mask, Stack};
use crate::nn::{log_sum_exp, Adam, GradBuffer, Graph, Matrix, ParamId, ParamStore, Var};
use crate::text::{Vocab, STRATEGY_TOKENS};

/// Stage names used for per-stage update statistics.
pub const STAGES: [&str; 5] = ["embedding", "encoder", "refinement", "fusion", "decoder"];

/// Stage owning the parameter called `name`.
pub fn stage_of(name: &str) -> &'static str {
    match name.split('.').next().unwrap_or("") {
        "embed" | "pos" => "embedding",
        "encoder" => "encoder",
        "cognition" => "refinement",
        "fusion" => "fusion",
        _ => "decoder",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff: usize,
    pub cognition_layers: usize,
    /// Longest encoder input.
    pub max_positions: usize,
    /// Longest decoder target, strategy token included.
    pub max_target: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            layers: 2,
            heads: 4,
            ff: 128,
            cognition_layers: 1,
            max_positions: 512,
            max_target: 50,
        }
    }
}

/// Everything the model consumes for one target turn, with ablations
/// already applied upstream: a missing prompt or knowledge drops that
/// source, missing causes mean unrestricted attention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedSample {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub context: Vec<Utterance>,
    pub current_index: usize,
    pub prompt: Option<String>,
    /// Filtered knowledge sequences in aggregation order.
    pub knowledge: Option<Vec<(Relation, String)>>,
    pub causes: Option<Vec<CauseAnnotation>>,
    pub target_strategy: usize,
    pub target_response: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextEncoding {
    pub ids: Vec<usize>,
    /// Context utterance index of every position.
    pub token_layout: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenNll {
    pub strategy: f64,
    /// Response tokens followed by the end marker.
    pub response: Vec<f64>,
    /// Probability of each strategy at the first decoder position.
    pub strategy_probs: [f64; STRATEGY_TOKENS],
}

impl TokenNll {
    /// Strategy ids by descending probability, ties by id.
    pub fn ranked_strategies(&self) -> Vec<usize> {
        rank(&self.strategy_probs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub strategy: usize,
    /// `(strategy id, probability)` best first.
    pub ranked: Vec<(usize, f64)>,
    pub token_ids: Vec<usize>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// Pre-update batch loss.
    pub loss: f64,
    /// Mean |Δparam| per stage.
    pub stage_delta: BTreeMap<String, f64>,
    /// Mean |Δparam| per tensor, by name.
    pub tensor_delta: BTreeMap<String, f64>,
}

/// Miniature encoder-decoder with the retrieval, cognition and fusion
/// stages wired in.
#[derive(Debug, Clone)]
pub struct PrccfModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub embed: ParamId,
    pub pos: ParamId,
    pub out_bias: ParamId,
    pub encoder: Stack,
    pub cognition: CognitiveRefiner,
    pub fusion: FusionLayer,
    pub decoder: Stack,
}

/// Graph handles of one teacher-forced pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub context: ContextEncoding,
    pub h_ctx: Var,
    pub h_p: Option<Var>,
    pub cognition: Option<CognitiveVars>,
    pub fusion: FusionVars,
    pub logits: Var,
    pub targets: Vec<usize>,
}

impl PrccfModel {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let (d, v) = (config.hidden, vocab.len());
        let embed = store.normal("embed", v, d, 0.02, &mut rng);
        let pos = store.normal("pos", config.max_positions.max(config.max_target + 1), d, 0.02, &mut rng);
        let encoder = Stack::new(&mut store, "encoder", config.layers, d, config.ff, config.heads, false, &mut rng);
        let cognition = CognitiveRefiner::new(
            &mut store,
            d,
            config.ff,
            config.heads,
            config.cognition_layers,
            &mut rng,
        );
        let fusion = FusionLayer::new(&mut store, d);
        let decoder = Stack::new(&mut store, "decoder", config.layers, d, config.ff, config.heads, true, &mut rng);
        let out_bias = store.add("decoder.out_bias", Matrix::zeros(1, v));
        Self {
            config,
            vocab,
            store,
            embed,
            pos,
            out_bias,
            encoder,
            cognition,
            fusion,
            decoder,
        }
    }

    /// Speaker-marked token sequence of the context. Utterances are
    /// dropped whole from the oldest side until it fits; a lone oversize
    /// utterance is cut.
    pub fn encode_context(&self, context: &[Utterance]) -> Result<ContextEncoding> {
        if context.is_empty() {
            return Err(Error::contract("cannot encode an empty context"));
        }
        let pieces: Vec<Vec<usize>> = context.iter().map(|u| self.utterance_ids(u)).collect();
        let cap = self.config.max_positions;
        let mut start = pieces.len() - 1;
        let mut total = pieces[start].len();
        while start > 0 && total + pieces[start - 1].len() <= cap {
            start -= 1;
            total += pieces[start].len();
        }
        let mut ids = Vec::with_capacity(total.min(cap));
        let mut token_layout = Vec::with_capacity(total.min(cap));
        for (i, p) in pieces.iter().enumerate().skip(start) {
            ids.extend_from_slice(p);
            token_layout.extend(std::iter::repeat_n(i, p.len()));
        }
        ids.truncate(cap);
        token_layout.truncate(cap);
        Ok(ContextEncoding { ids, token_layout })
    }

    fn utterance_ids(&self, u: &Utterance) -> Vec<usize> {
        let mut ids = match u.speaker {
            Speaker::Seeker => vec![self.vocab.seeker()],
            Speaker::Supporter => vec![self.vocab.supporter()],
        };
        if let (Speaker::Supporter, Some(s)) = (u.speaker, &u.strategy) {
            ids.push(self.vocab.strategy(s.id));
        }
        ids.extend(self.vocab.encode(&u.text));
        ids
    }

    fn capped(&self, mut ids: Vec<usize>) -> Vec<usize> {
        if ids.is_empty() {
            ids.push(self.vocab.unk());
        }
        ids.truncate(self.config.max_positions);
        ids
    }

    pub fn prompt_ids(&self, prompt: &str) -> Vec<usize> {
        self.capped(self.vocab.encode(prompt))
    }

    pub fn knowledge_ids(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![self.vocab.cls()];
        ids.extend(self.vocab.encode(text));
        self.capped(ids)
    }

    /// `[BOS] [STRAT_s] response` as decoder input and
    /// `[STRAT_s] response [EOS]` as targets.
    pub fn target_ids(&self, strategy: usize, response: &str) -> (Vec<usize>, Vec<usize>) {
        let mut body = vec![self.vocab.strategy(strategy)];
        let mut words = self.vocab.encode(response);
        words.truncate(self.config.max_target.saturating_sub(2));
        body.extend(words);
        let mut inputs = vec![self.vocab.bos()];
        inputs.extend_from_slice(&body);
        let mut targets = body;
        targets.push(self.vocab.eos());
        (inputs, targets)
    }

    /// Bidirectional shared encoder over `ids`.
    pub fn encode_ids(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let x = self.embed_positions(g, ids);
        self.encoder.forward(g, x, None, None)
    }

    fn embed_positions(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let table = g.param(self.embed);
        let tok = g.gather(table, ids);
        let pos = g.param(self.pos);
        let positions: Vec<usize> = (0..ids.len()).collect();
        let p = g.gather(pos, &positions);
        g.add(tok, p)
    }

    pub fn context_states(&self, g: &mut Graph, sample: &PreparedSample) -> Result<(ContextEncoding, Var)> {
        let enc = self.encode_context(&sample.context)?;
        let h = self.encode_ids(g, &enc.ids);
        Ok((enc, h))
    }

    pub fn prompt_states(&self, g: &mut Graph, sample: &PreparedSample) -> Option<Var> {
        sample.prompt.as_ref().map(|p| {
            let ids = self.prompt_ids(p);
            self.encode_ids(g, &ids)
        })
    }

    /// Causal mask of the sample, or `None` for unrestricted attention.
    pub fn causal_mask(&self, sample: &PreparedSample, enc: &ContextEncoding) -> Result<Option<CausalMask>> {
        sample
            .causes
            .as_ref()
            .map(|c| build_causal_mask(&enc.token_layout, c, sample.current_index))
            .transpose()
    }

    pub fn cognition_states(
        &self,
        g: &mut Graph,
        sample: &PreparedSample,
        enc: &ContextEncoding,
        h_ctx: Var,
    ) -> Result<Option<CognitiveVars>> {
        let Some(knowledge) = &sample.knowledge else {
            return Ok(None);
        };
        let parts: Vec<Var> = knowledge
            .iter()
            .map(|(_, text)| {
                let ids = self.knowledge_ids(text);
                self.encode_ids(g, &ids)
            })
            .collect();
        let e_all = g.concat_rows(&parts);
        let mask = self.causal_mask(sample, enc)?;
        self.cognition.forward(g, e_all, h_ctx, mask.as_ref()).map(Some)
    }

    /// Decoder logits for `inputs` conditioned on `memory`.
    pub fn decode(&self, g: &mut Graph, memory: Var, inputs: &[usize]) -> Var {
        let x = self.embed_positions(g, inputs);
        let mask = causal_lm_mask(inputs.len());
        let h = self.decoder.forward(g, x, Some(&mask), Some(memory));
        let table = g.param(self.embed);
        let logits = g.matmul_t(h, table, false, true);
        let b = g.param(self.out_bias);
        g.add_row(logits, b)
    }

    /// Fusion and teacher-forced decoding from precomputed source states.
    pub fn fuse_and_decode(
        &self,
        g: &mut Graph,
        sample: &PreparedSample,
        h_ctx: Var,
        h_p: Option<Var>,
        h_c: Option<Var>,
    ) -> Result<(FusionVars, Var, Vec<usize>)> {
        let fusion = fuse(g, &self.fusion, h_ctx, h_p, h_c)?;
        let (inputs, targets) = self.target_ids(sample.target_strategy, &sample.target_response);
        let logits = self.decode(g, fusion.h_fin_norm, &inputs);
        if !g.value(logits).is_finite() {
            return Err(Error::numeric("decoder", "non-finite logits"));
        }
        Ok((fusion, logits, targets))
    }

    pub fn forward(&self, g: &mut Graph, sample: &PreparedSample) -> Result<Forward> {
        let (context, h_ctx) = self.context_states(g, sample)?;
        let h_p = self.prompt_states(g, sample);
        let cognition = self.cognition_states(g, sample, &context, h_ctx)?;
        let (fusion, logits, targets) =
            self.fuse_and_decode(g, sample, h_ctx, h_p, cognition.map(|c| c.h_c))?;
        Ok(Forward {
            context,
            h_ctx,
            h_p,
            cognition,
            fusion,
            logits,
            targets,
        })
    }

    /// Mean token NLL of one sample, as a 1×1 node.
    pub fn sample_loss(g: &mut Graph, logits: Var, targets: &[usize]) -> Var {
        let total = g.nll(logits, targets);
        g.scale(total, 1.0 / targets.len() as f64)
    }

    /// Batch loss and its gradient buffer (mean over samples).
    pub fn gradients(&self, batch: &[PreparedSample]) -> Result<(f64, GradBuffer)> {
        if batch.is_empty() {
            return Err(Error::contract("empty training batch"));
        }
        let mut buf = GradBuffer::zeros_like(&self.store);
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        for sample in batch {
            let mut g = Graph::new(&self.store);
            let f = self.forward(&mut g, sample)?;
            let l = Self::sample_loss(&mut g, f.logits, &f.targets);
            loss += g.scalar(l) * scale;
            let grads = g.backward(l);
            buf.accumulate(&grads.param_grads(), scale);
        }
        if !loss.is_finite() {
            return Err(Error::numeric("loss", format!("non-finite loss {loss}")));
        }
        if !buf.is_finite() {
            return Err(Error::numeric("backward", "non-finite gradient"));
        }
        Ok((loss, buf))
    }

    pub fn batch_loss(&self, batch: &[PreparedSample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let mut loss = 0.0;
        for sample in batch {
            let mut g = Graph::new(&self.store);
            let f = self.forward(&mut g, sample)?;
            let l = Self::sample_loss(&mut g, f.logits, &f.targets);
            loss += g.scalar(l);
        }
        Ok(loss / batch.len() as f64)
    }

    /// One optimizer step; returns the pre-update loss.
    pub fn train_step(&mut self, adam: &mut Adam, batch: &[PreparedSample]) -> Result<StepStats> {
        let (loss, grads) = self.gradients(batch)?;
        let deltas = adam.step(&mut self.store, &grads);
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        let mut tensor_delta = BTreeMap::new();
        for (id, d) in self.store.ids().zip(deltas) {
            let name = self.store.name(id);
            let e = sums.entry(stage_of(name).to_string()).or_default();
            e.0 += d;
            e.1 += 1;
            tensor_delta.insert(name.to_string(), d);
        }
        Ok(StepStats {
            loss,
            stage_delta: sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
            tensor_delta,
        })
    }

    /// Per-token NLLs of the gold target and the first-position strategy
    /// distribution.
    pub fn token_nll(&self, sample: &PreparedSample) -> Result<TokenNll> {
        let mut g = Graph::new(&self.store);
        let f = self.forward(&mut g, sample)?;
        let logits = g.value(f.logits);
        let nll: Vec<f64> = f
            .targets
            .iter()
            .enumerate()
            .map(|(r, &t)| log_sum_exp(logits.row(r)) - logits.get(r, t))
            .collect();
        Ok(TokenNll {
            strategy: nll[0],
            response: nll[1..].to_vec(),
            strategy_probs: self.strategy_probs(logits.row(0)),
        })
    }

    fn strategy_probs(&self, row: &[f64]) -> [f64; STRATEGY_TOKENS] {
        let ids: Vec<f64> = (0..STRATEGY_TOKENS).map(|s| row[self.vocab.strategy(s)]).collect();
        let z = log_sum_exp(&ids);
        let mut out = [0.0; STRATEGY_TOKENS];
        for (o, l) in out.iter_mut().zip(ids) {
            *o = (l - z).exp();
        }
        out
    }

    /// Fused memory for decoding, computed without a target.
    pub fn memory(&self, sample: &PreparedSample) -> Result<Matrix> {
        let mut g = Graph::new(&self.store);
        let (context, h_ctx) = self.context_states(&mut g, sample)?;
        let h_p = self.prompt_states(&mut g, sample);
        let cog = self.cognition_states(&mut g, sample, &context, h_ctx)?;
        let fusion = fuse(&mut g, &self.fusion, h_ctx, h_p, cog.map(|c| c.h_c))?;
        Ok(g.value(fusion.h_fin_norm).clone())
    }

    fn next_logits(&self, memory: &Matrix, inputs: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.store);
        let m = g.constant(memory.clone());
        let logits = self.decode(&mut g, m, inputs);
        let v = g.value(logits);
        if !v.is_finite() {
            return Err(Error::numeric("decoder", "non-finite logits"));
        }
        Ok(v.row(v.rows - 1).to_vec())
    }

    /// Picks the strategy greedily at the first position, then samples the
    /// response. The strategy token counts towards `max_new_tokens`.
    pub fn generate(&self, sample: &PreparedSample, cfg: &GenerationConfig) -> Result<Generation> {
        let memory = self.memory(sample)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut inputs = vec![self.vocab.bos()];
        let first = self.next_logits(&memory, &inputs)?;
        let probs = self.strategy_probs(&first);
        let order = rank(&probs);
        let strategy = order[0];
        let ranked: Vec<(usize, f64)> = order.iter().map(|&s| (s, probs[s])).collect();
        inputs.push(self.vocab.strategy(strategy));
        let limit = cfg.max_new_tokens.min(self.config.max_target);
        let mut emitted = vec![self.vocab.strategy(strategy)];
        let mut words = Vec::new();
        while emitted.len() < limit {
            let mut logits = self.next_logits(&memory, &inputs)?;
            for (id, l) in logits.iter_mut().enumerate() {
                if self.vocab.is_reserved(id) {
                    *l = f64::NEG_INFINITY;
                }
            }
            let next = super::sample_next(
                &logits,
                &emitted,
                cfg.top_k,
                cfg.top_p,
                cfg.repetition_penalty,
                &mut rng,
            );
            emitted.push(next);
            if next == self.vocab.eos() {
                break;
            }
            words.push(next);
            inputs.push(next);
        }
        Ok(Generation {
            strategy,
            ranked,
            text: self.vocab.decode(&words),
            token_ids: emitted,
        })
    }
}

fn rank(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
}
