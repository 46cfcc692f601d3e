//! The multimodal model: SMILES and property-vector encoders, a shared
//! fusion encoder and the pre-training heads.
//!
//! [`Spmm`] only holds parameter ids, so one instance drives both the student
//! and the momentum-teacher stores.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spmm_chem::PropertyVector;
use spmm_nn::{Embedding, Encoder, EncoderConfig, Graph, Init, Linear, ParamId, ParamStore, PvCell, SeqBatch, Tensor, Var};

use crate::config::RunConfig;
use crate::error::SpmmError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub vocab: usize,
    pub props: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl ModelDims {
    pub fn from_config(cfg: &RunConfig, vocab: usize, props: usize) -> ModelDims {
        ModelDims {
            vocab,
            props,
            d_model: cfg.model.d_model,
            layers: cfg.model.layers,
            heads: cfg.model.heads,
            d_ff: cfg.model.d_ff,
            max_len: cfg.model.max_len,
        }
    }

    fn encoder(&self, cross: bool) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            heads: self.heads,
            layers: self.layers,
            d_ff: self.d_ff,
            cross,
        }
    }
}

/// A padded batch of encoded sequences.
#[derive(Debug, Clone)]
pub struct Seq {
    pub x: Var,
    pub batch: usize,
    pub len: usize,
    pub lens: Vec<usize>,
}

impl Seq {
    pub fn as_batch(&self) -> SeqBatch<'_> {
        SeqBatch {
            x: self.x,
            batch: self.batch,
            len: self.len,
            lens: &self.lens,
        }
    }

    fn with(&self, x: Var) -> Seq {
        Seq { x, ..self.clone() }
    }

    /// Rows at `(item, position)` pairs.
    pub fn rows(&self, g: &mut Graph, at: impl IntoIterator<Item = (usize, usize)>) -> Var {
        let idx: Vec<usize> = at.into_iter().map(|(b, p)| b * self.len + p).collect();
        g.gather_rows(self.x, &idx)
    }

    /// First-position rows of every item.
    pub fn cls(&self, g: &mut Graph) -> Var {
        self.rows(g, (0..self.batch).map(|b| (b, 0)))
    }

    /// The same sequences with items picked (and repeated) by index.
    pub fn select(&self, g: &mut Graph, items: &[usize]) -> Seq {
        let idx: Vec<usize> = items
            .iter()
            .flat_map(|&b| (0..self.len).map(move |p| (b, p)))
            .map(|(b, p)| b * self.len + p)
            .collect();
        Seq {
            x: g.gather_rows(self.x, &idx),
            batch: items.len(),
            len: self.len,
            lens: items.iter().map(|&b| self.lens[b]).collect(),
        }
    }
}

/// Property-vector cells: `[CLS]_P` followed by one cell per property.
pub fn pv_cells(pv: &PropertyVector) -> Vec<PvCell> {
    std::iter::once(PvCell::Cls)
        .chain((0..pv.len()).map(|i| {
            if pv.known[i] {
                PvCell::Value(pv.normalized[i])
            } else {
                PvCell::Unknown
            }
        }))
        .collect()
}

#[derive(Debug, Clone)]
pub struct Spmm {
    pub dims: ModelDims,
    tokens: Embedding,
    smiles_pos: Embedding,
    pv_cls: ParamId,
    pv_unk: ParamId,
    pv_w: ParamId,
    pv_b: ParamId,
    pv_pos: Embedding,
    smiles_enc: Encoder,
    pv_enc: Encoder,
    fusion: Encoder,
    proj_s: Linear,
    proj_p: Linear,
    pub temp: ParamId,
    token_head: Linear,
    prop_head: Linear,
    spm_head: Linear,
}

impl Spmm {
    /// Registers every parameter in `store`. Registration order and names
    /// depend only on `dims`, so a store built with any seed can receive
    /// checkpointed values.
    pub fn build(store: &mut ParamStore, dims: ModelDims, init_std: f64, temperature: f64, seed: u64) -> Spmm {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng, std: init_std };
        let d = dims.d_model;
        let tokens = Embedding::new(store, "smiles.tok", dims.vocab, d, &mut init);
        let smiles_pos = Embedding::new(store, "smiles.pos", dims.max_len, d, &mut init);
        let pv_cls = store.add("pv.cls", init.normal(1, d), true);
        let pv_unk = store.add("pv.unk", init.normal(1, d), true);
        let pv_w = store.add("pv.value.w", init.normal(1, d), true);
        let pv_b = store.add("pv.value.b", Tensor::zeros(1, d), false);
        let pv_pos = Embedding::new(store, "pv.pos", dims.props + 1, d, &mut init);
        let smiles_enc = Encoder::new(store, "smiles.enc", dims.encoder(false), &mut init);
        let pv_enc = Encoder::new(store, "pv.enc", dims.encoder(false), &mut init);
        let fusion = Encoder::new(store, "fusion", dims.encoder(true), &mut init);
        let proj_s = Linear::new(store, "proj.smiles", d, d, &mut init);
        let proj_p = Linear::new(store, "proj.pv", d, d, &mut init);
        let temp = store.add("temp", Tensor::scalar(temperature), false);
        let token_head = Linear::new(store, "head.token", d, dims.vocab, &mut init);
        let prop_head = Linear::new(store, "head.prop", d, 1, &mut init);
        let spm_head = Linear::new(store, "head.spm", 2 * d, 2, &mut init);
        Spmm {
            dims,
            tokens,
            smiles_pos,
            pv_cls,
            pv_unk,
            pv_w,
            pv_b,
            pv_pos,
            smiles_enc,
            pv_enc,
            fusion,
            proj_s,
            proj_p,
            temp,
            token_head,
            prop_head,
            spm_head,
        }
    }

    /// Token plus learned position embeddings, padded with [PAD] to the
    /// longest sequence.
    pub fn embed_smiles(&self, g: &mut Graph, seqs: &[&[u32]]) -> Result<Seq, SpmmError> {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if len > self.dims.max_len {
            return Err(SpmmError::SequenceTooLong {
                len,
                max: self.dims.max_len,
            });
        }
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for p in 0..len {
                let id = s.get(p).copied().unwrap_or(spmm_chem::tokenizer::PAD_ID) as usize;
                if id >= self.dims.vocab {
                    return Err(SpmmError::IdOutOfRange(id));
                }
                ids.push(id);
            }
        }
        let positions: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
        let tok = self.tokens.forward(g, &ids);
        let pos = self.smiles_pos.forward(g, &positions);
        Ok(Seq {
            x: g.add(tok, pos),
            batch: seqs.len(),
            len,
            lens: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    /// Value encodings (or [UNK]) plus property-index embeddings.
    pub fn embed_pv(&self, g: &mut Graph, pvs: &[Vec<PvCell>]) -> Seq {
        let len = self.dims.props + 1;
        let mut cells = Vec::with_capacity(pvs.len() * len);
        let mut positions = Vec::with_capacity(pvs.len() * len);
        let mut lens = Vec::with_capacity(pvs.len());
        for pv in pvs {
            assert!(pv.len() <= len && !pv.is_empty(), "property vector has {} cells", pv.len());
            cells.extend_from_slice(pv);
            cells.extend(std::iter::repeat_n(PvCell::Unknown, len - pv.len()));
            positions.extend(0..len);
            lens.push(pv.len());
        }
        let (c, u, w, b) = (g.param(self.pv_cls), g.param(self.pv_unk), g.param(self.pv_w), g.param(self.pv_b));
        let values = g.pv_embed(&cells, c, u, w, b);
        let pos = self.pv_pos.forward(g, &positions);
        Seq {
            x: g.add(values, pos),
            batch: pvs.len(),
            len,
            lens,
        }
    }

    pub fn encode_smiles(&self, g: &mut Graph, emb: &Seq, causal: bool) -> Seq {
        let out = self.smiles_enc.forward(g, emb.as_batch(), causal, None);
        emb.with(out.hidden)
    }

    pub fn encode_pv(&self, g: &mut Graph, emb: &Seq, causal: bool) -> Seq {
        let out = self.pv_enc.forward(g, emb.as_batch(), causal, None);
        emb.with(out.hidden)
    }

    /// Fusion pass with `query` attending to `ctx`. Also returns the last
    /// cross-attention node.
    pub fn fuse(&self, g: &mut Graph, query: &Seq, ctx: &Seq, causal: bool) -> (Seq, Var) {
        let out = self.fusion.forward(g, query.as_batch(), causal, Some(ctx.as_batch()));
        let attn = out.last_cross.expect("fusion encoder has at least one layer");
        (query.with(out.hidden), attn)
    }

    pub fn project_smiles(&self, g: &mut Graph, cls: Var) -> Var {
        let h = self.proj_s.forward(g, cls);
        g.l2_normalize(h)
    }

    pub fn project_pv(&self, g: &mut Graph, cls: Var) -> Var {
        let h = self.proj_p.forward(g, cls);
        g.l2_normalize(h)
    }

    pub fn token_logits(&self, g: &mut Graph, h: Var) -> Var {
        self.token_head.forward(g, h)
    }

    pub fn property_pred(&self, g: &mut Graph, h: Var) -> Var {
        self.prop_head.forward(g, h)
    }

    pub fn spm_logits(&self, g: &mut Graph, joint: Var) -> Var {
        self.spm_head.forward(g, joint)
    }
}

/// One-hidden-layer MLP on the SMILES `[CLS]` feature.
#[derive(Debug, Clone)]
pub struct TaskHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl TaskHead {
    pub fn build(store: &mut ParamStore, d: usize, hidden: usize, arity: usize, init_std: f64, seed: u64) -> TaskHead {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { rng: &mut rng, std: init_std };
        TaskHead {
            hidden: Linear::new(store, "task.hidden", d, hidden, &mut init),
            out: Linear::new(store, "task.out", hidden, arity, &mut init),
        }
    }

    pub fn forward(&self, g: &mut Graph, cls: Var) -> Var {
        let h = self.hidden.forward(g, cls);
        let h = g.gelu(h);
        self.out.forward(g, h)
    }
}
