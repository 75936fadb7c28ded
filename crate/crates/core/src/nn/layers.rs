//! Transformer building blocks on top of [`Graph`].

use rand::Rng;

use super::graph::{Graph, Mask, Var};
use super::matrix::Matrix;
use super::params::{ParamId, ParamStore};

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: store.normal(format!("{name}.weight"), d_in, d_out, INIT_STD, rng),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, d_out)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Debug, Clone)]
pub struct Norm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, d, 1.0)),
            shift: store.add(format!("{name}.shift"), Matrix::zeros(1, d)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(self.gain);
        let shift = g.param(self.shift);
        let y = g.mul_row(n, gain);
        g.add_row(y, shift)
    }

    /// Plain-f64 evaluation used by test oracles.
    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let (gain, shift) = (store.value(self.gain), store.value(self.shift));
        let mut out = x.clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + 1e-5).sqrt();
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * inv * gain.data[c] + shift.data[c];
            }
        }
        out
    }
}

/// Scaled dot-product multi-head attention.
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert_eq!(d % heads, 0, "hidden size must divide into heads");
        Self {
            query: Linear::new(store, &format!("{name}.query"), d, d, rng),
            key: Linear::new(store, &format!("{name}.key"), d, d, rng),
            value: Linear::new(store, &format!("{name}.value"), d, d, rng),
            output: Linear::new(store, &format!("{name}.output"), d, d, rng),
            heads,
        }
    }

    /// `mask` is `queries × keys`, row-major.
    pub fn forward(&self, g: &mut Graph, queries: Var, keys: Var, mask: Option<&Mask>) -> Var {
        let q = self.query.forward(g, queries);
        let k = self.key.forward(g, keys);
        let v = self.value.forward(g, keys);
        let d = g.shape(q).1;
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let scores = g.matmul_t(qh, kh, false, true);
            let scores = g.scale(scores, scale);
            let probs = g.softmax(scores, mask);
            outs.push(g.matmul(probs, vh));
        }
        let joined = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        self.output.forward(g, joined)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d, d_ff, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

/// Pre-norm transformer block; with `cross` set it is a decoder block.
#[derive(Debug, Clone)]
pub struct Block {
    pub self_norm: Norm,
    pub self_attn: Attention,
    pub cross: Option<(Norm, Attention)>,
    pub ff_norm: Norm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        d_ff: usize,
        heads: usize,
        with_cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            self_norm: Norm::new(store, &format!("{name}.self_norm"), d),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, heads, rng),
            cross: with_cross.then(|| {
                (
                    Norm::new(store, &format!("{name}.cross_norm"), d),
                    Attention::new(store, &format!("{name}.cross_attn"), d, heads, rng),
                )
            }),
            ff_norm: Norm::new(store, &format!("{name}.ff_norm"), d),
            ff: FeedForward::new(store, &format!("{name}.ff"), d, d_ff, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&Mask>, memory: Option<Var>) -> Var {
        let h = self.self_norm.forward(g, x);
        let a = self.self_attn.forward(g, h, h, mask);
        let mut x = g.add(x, a);
        if let (Some((norm, attn)), Some(mem)) = (&self.cross, memory) {
            let h = norm.forward(g, x);
            let a = attn.forward(g, h, mem, None);
            x = g.add(x, a);
        }
        let h = self.ff_norm.forward(g, x);
        let f = self.ff.forward(g, h);
        g.add(x, f)
    }
}

/// A stack of blocks followed by a final normalization.
#[derive(Debug, Clone)]
pub struct Stack {
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
}

impl Stack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layers: usize,
        d: usize,
        d_ff: usize,
        heads: usize,
        with_cross: bool,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            blocks: (0..layers)
                .map(|i| Block::new(store, &format!("{name}.{i}"), d, d_ff, heads, with_cross, rng))
                .collect(),
            final_norm: Norm::new(store, &format!("{name}.final_norm"), d),
        }
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var, mask: Option<&Mask>, memory: Option<Var>) -> Var {
        for b in &self.blocks {
            x = b.forward(g, x, mask, memory);
        }
        self.final_norm.forward(g, x)
    }
}

/// Lower-triangular mask for autoregressive self-attention.
pub fn causal_lm_mask(n: usize) -> Mask {
    std::rc::Rc::new((0..n * n).map(|i| i % n <= i / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_preserves_shape_and_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let stack = Stack::new(&mut store, "enc", 2, 8, 16, 2, true, &mut rng);
        let mut g = Graph::new(&store);
        let x = g.constant(Matrix::filled(5, 8, 0.3));
        let mem = g.constant(Matrix::filled(3, 8, -0.2));
        let mask = causal_lm_mask(5);
        let y = stack.forward(&mut g, x, Some(&mask), Some(mem));
        assert_eq!(g.shape(y), (5, 8));
        assert!(g.value(y).is_finite());
    }

    #[test]
    fn causal_mask_is_lower_triangular() {
        let m = causal_lm_mask(3);
        assert_eq!(
            m.as_slice(),
            &[true, false, false, true, true, false, true, true, true]
        );
    }
}
