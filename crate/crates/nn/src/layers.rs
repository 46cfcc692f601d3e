//! Transformer building blocks on top of [`Graph`].

use rand::Rng;

use crate::graph::{AttnSpec, Graph, Var};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, din: usize, dout: usize, init: &mut Init<R>) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), init.normal(din, dout), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(1, dout), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::from_vec(1, d, vec![1.0; d]), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, d), false),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Token table lookup.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, n: usize, d: usize, init: &mut Init<R>) -> Self {
        Embedding {
            table: store.add(format!("{name}.table"), init.normal(n, d), true),
        }
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Var {
        let t = g.param(self.table);
        g.gather_rows(t, ids)
    }

    pub fn rows(&self, store: &ParamStore) -> usize {
        store.get(self.table).rows()
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, init: &mut Init<R>) -> Self {
        MultiHeadAttention {
            q: Linear::new(store, &format!("{name}.q"), d, d, init),
            k: Linear::new(store, &format!("{name}.k"), d, d, init),
            v: Linear::new(store, &format!("{name}.v"), d, d, init),
            o: Linear::new(store, &format!("{name}.o"), d, d, init),
            heads,
        }
    }

    /// Returns the projected output and the raw attention node.
    pub fn forward(&self, g: &mut Graph, x: Var, ctx: Var, spec: AttnSpec) -> (Var, Var) {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, ctx);
        let v = self.v.forward(g, ctx);
        let a = g.attention(q, k, v, spec);
        (self.o.forward(g, a), a)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, hidden: usize, init: &mut Init<R>) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), d, hidden, init),
            down: Linear::new(store, &format!("{name}.down"), hidden, d, init),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.gelu(h);
        self.down.forward(g, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    /// Adds a cross-attention sublayer to every block.
    pub cross: bool,
}

#[derive(Debug, Clone)]
struct Block {
    ln_self: LayerNorm,
    self_attn: MultiHeadAttention,
    cross: Option<(LayerNorm, MultiHeadAttention)>,
    ln_ff: LayerNorm,
    ff: FeedForward,
}

/// Batched input of `batch` sequences padded to `len` rows each.
#[derive(Debug, Clone, Copy)]
pub struct SeqBatch<'a> {
    pub x: Var,
    pub batch: usize,
    pub len: usize,
    pub lens: &'a [usize],
}

/// Output of an [`Encoder`] call.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub hidden: Var,
    /// Attention node of the last cross-attention sublayer, if any.
    pub last_cross: Option<Var>,
}

/// Pre-LN transformer stack. With `cross` set each block attends to a
/// context sequence after self-attention.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    blocks: Vec<Block>,
    final_ln: Option<LayerNorm>,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, config: EncoderConfig, init: &mut Init<R>) -> Self {
        let d = config.d_model;
        let blocks = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.{l}");
                Block {
                    ln_self: LayerNorm::new(store, &format!("{p}.ln_self"), d),
                    self_attn: MultiHeadAttention::new(store, &format!("{p}.self"), d, config.heads, init),
                    cross: config.cross.then(|| {
                        (
                            LayerNorm::new(store, &format!("{p}.ln_cross"), d),
                            MultiHeadAttention::new(store, &format!("{p}.cross"), d, config.heads, init),
                        )
                    }),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), d),
                    ff: FeedForward::new(store, &format!("{p}.ff"), d, config.d_ff, init),
                }
            })
            .collect();
        let final_ln = (config.layers > 0).then(|| LayerNorm::new(store, &format!("{name}.ln_final"), d));
        Encoder {
            config,
            blocks,
            final_ln,
        }
    }

    pub fn forward(&self, g: &mut Graph, input: SeqBatch, causal: bool, ctx: Option<SeqBatch>) -> EncoderOutput {
        assert!(
            ctx.is_some() || !self.config.cross,
            "cross-attention encoder needs a context"
        );
        let self_spec = AttnSpec {
            batch: input.batch,
            q_len: input.len,
            k_len: input.len,
            heads: self.config.heads,
            key_lens: input.lens.to_vec(),
            causal,
        };
        let mut h = input.x;
        let mut last_cross = None;
        for block in &self.blocks {
            let n = block.ln_self.forward(g, h);
            let (a, _) = block.self_attn.forward(g, n, n, self_spec.clone());
            h = g.add(h, a);
            if let (Some((ln, attn)), Some(c)) = (&block.cross, ctx) {
                assert_eq!(c.batch, input.batch, "context batch size");
                let spec = AttnSpec {
                    batch: input.batch,
                    q_len: input.len,
                    k_len: c.len,
                    heads: self.config.heads,
                    key_lens: c.lens.to_vec(),
                    causal: false,
                };
                let n = ln.forward(g, h);
                let (a, raw) = attn.forward(g, n, c.x, spec);
                last_cross = Some(raw);
                h = g.add(h, a);
            }
            let n = block.ln_ff.forward(g, h);
            let f = block.ff.forward(g, n);
            h = g.add(h, f);
        }
        if let Some(ln) = &self.final_ln {
            h = ln.forward(g, h);
        }
        EncoderOutput { hidden: h, last_cross }
    }
}
