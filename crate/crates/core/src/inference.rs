//! Autoregressive generation in both directions, generation metrics and
//! attention extraction.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::Rng;
use serde::Serialize;
use spmm_chem::molgraph::canonicalize;
use spmm_chem::propcalc::{compute_builtin, PropertySource, BUILTIN};
use spmm_chem::tokenizer::{CLS_ID, PAD_ID, SEP_ID};
use spmm_chem::{parse_smiles, Normalizer, PropertySpec, PropertyVector, Vocab};
use spmm_nn::{Graph, ParamStore, PvCell, Tensor};

use crate::error::SpmmError;
use crate::model::{pv_cells, Seq, Spmm};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Stochastic { temperature: f64 },
}

impl DecodeMode {
    pub fn parse(mode: &str, temperature: f64) -> Result<DecodeMode, SpmmError> {
        match mode {
            "greedy" => Ok(DecodeMode::Greedy),
            "stochastic" if temperature > 0.0 => Ok(DecodeMode::Stochastic { temperature }),
            "stochastic" => Err(SpmmError::Data("temperature must be positive".into())),
            other => Err(SpmmError::Data(format!("unknown decode mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Model-ready ids, starting with [CLS] and ending with [SEP] unless
    /// `overflow` is set.
    pub ids: Vec<u32>,
    pub smiles: String,
    pub overflow: bool,
}

/// Model and parameters used for inference.
#[derive(Clone, Copy)]
pub struct Runner<'a> {
    pub model: &'a Spmm,
    pub params: &'a ParamStore,
    pub vocab: &'a Vocab,
}

/// Row-wise choice over `logits`; [PAD] and [CLS] are never produced.
pub(crate) fn pick_token<R: Rng + ?Sized>(logits: &[f64], mode: DecodeMode, rng: &mut R) -> u32 {
    let allowed = |j: usize| j != PAD_ID as usize && j != CLS_ID as usize;
    match mode {
        DecodeMode::Greedy => {
            let mut best = None;
            for (j, &v) in logits.iter().enumerate().filter(|&(j, _)| allowed(j)) {
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            best.expect("vocabulary has non-special tokens").0 as u32
        }
        DecodeMode::Stochastic { temperature } => {
            let max = logits
                .iter()
                .enumerate()
                .filter(|&(j, _)| allowed(j))
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits
                .iter()
                .enumerate()
                .map(|(j, &v)| if allowed(j) { ((v - max) / temperature).exp() } else { 0.0 })
                .collect();
            let total: f64 = w.iter().sum();
            let u: f64 = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut last = SEP_ID;
            for (j, &p) in w.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                last = j as u32;
                acc += p;
                if u < acc {
                    return j as u32;
                }
            }
            last
        }
    }
}

impl Runner<'_> {
    /// Causal decoding of SMILES tokens against fixed context features.
    /// `ctx` holds one `len x d` block per item.
    pub(crate) fn decode_against<R: Rng + ?Sized>(
        &self,
        ctx: &Tensor,
        ctx_len: usize,
        ctx_lens: &[usize],
        mode: DecodeMode,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Vec<Decoded>, SpmmError> {
        let n = ctx_lens.len();
        let max_len = max_len.min(self.model.dims.max_len);
        let mut seqs: Vec<Vec<u32>> = vec![vec![CLS_ID]; n];
        let mut done = vec![false; n];
        let d = ctx.cols();
        while seqs.iter().zip(&done).any(|(s, &f)| !f && s.len() < max_len) {
            let active: Vec<usize> = (0..n).filter(|&i| !done[i] && seqs[i].len() < max_len).collect();
            let logits = self.next_logits(ctx, ctx_len, ctx_lens, d, &seqs, &active)?;
            for (r, &i) in active.iter().enumerate() {
                let tok = pick_token(logits.row(r), mode, rng);
                seqs[i].push(tok);
                if tok == SEP_ID {
                    done[i] = true;
                }
            }
        }
        seqs.into_iter()
            .zip(done)
            .map(|(ids, finished)| {
                let smiles = self.vocab.decode(&ids)?;
                Ok(Decoded {
                    ids,
                    smiles,
                    overflow: !finished,
                })
            })
            .collect()
    }

    /// Next-token logits for the active prefixes, which share one length.
    pub(crate) fn next_logits(
        &self,
        ctx: &Tensor,
        ctx_len: usize,
        ctx_lens: &[usize],
        d: usize,
        seqs: &[Vec<u32>],
        active: &[usize],
    ) -> Result<Tensor, SpmmError> {
        let mut g = Graph::inference(self.params);
        let mut rows = Vec::with_capacity(active.len() * ctx_len * d);
        for &i in active {
            rows.extend_from_slice(&ctx.data()[i * ctx_len * d..(i + 1) * ctx_len * d]);
        }
        let c = Seq {
            x: g.input(Tensor::from_vec(active.len() * ctx_len, d, rows)),
            batch: active.len(),
            len: ctx_len,
            lens: active.iter().map(|&i| ctx_lens[i]).collect(),
        };
        let prefixes: Vec<&[u32]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let emb = self.model.embed_smiles(&mut g, &prefixes)?;
        let s = self.model.encode_smiles(&mut g, &emb, true);
        let (fused, _) = self.model.fuse(&mut g, &s, &c, true);
        let last = fused.rows(&mut g, active.iter().enumerate().map(|(r, &i)| (r, seqs[i].len() - 1)));
        let logits = self.model.token_logits(&mut g, last);
        Ok(g.value(logits).clone())
    }

    /// Bidirectional PV features for a batch of property vectors.
    pub fn encode_pvs(&self, pvs: &[PropertyVector]) -> (Tensor, usize) {
        let mut g = Graph::inference(self.params);
        let cells: Vec<Vec<PvCell>> = pvs.iter().map(pv_cells).collect();
        let emb = self.model.embed_pv(&mut g, &cells);
        let h = self.model.encode_pv(&mut g, &emb, false);
        (g.value(h.x).clone(), h.len)
    }

    /// Bidirectional SMILES features; returns padded length and lengths.
    pub fn encode_smiles(&self, sequences: &[Vec<u32>]) -> Result<(Tensor, usize, Vec<usize>), SpmmError> {
        let mut g = Graph::inference(self.params);
        let ids: Vec<&[u32]> = sequences.iter().map(Vec::as_slice).collect();
        let emb = self.model.embed_smiles(&mut g, &ids)?;
        let h = self.model.encode_smiles(&mut g, &emb, false);
        Ok((g.value(h.x).clone(), h.len, h.lens.clone()))
    }

    /// PV-to-SMILES generation, one output per conditioning vector.
    pub fn generate_smiles<R: Rng + ?Sized>(
        &self,
        pvs: &[PropertyVector],
        mode: DecodeMode,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Vec<Decoded>, SpmmError> {
        if pvs.is_empty() {
            return Ok(Vec::new());
        }
        let (ctx, len) = self.encode_pvs(pvs);
        self.decode_against(&ctx, len, &vec![len; pvs.len()], mode, max_len, rng)
    }

    /// SMILES-to-PV generation: normalized predictions for every property,
    /// decoded one slot at a time.
    pub fn generate_pv(&self, smiles: &[String]) -> Result<Vec<Vec<f64>>, SpmmError> {
        let ids = smiles
            .iter()
            .map(|s| {
                parse_smiles(s).map_err(|source| SpmmError::InvalidSmiles {
                    smiles: s.clone(),
                    source,
                })?;
                Ok(self.vocab.tokenize(s)?.ids)
            })
            .collect::<Result<Vec<_>, SpmmError>>()?;
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let (ctx, ctx_len, ctx_lens) = self.encode_smiles(&ids)?;
        let props = self.model.dims.props;
        let n = ids.len();
        let mut cells: Vec<Vec<PvCell>> = vec![vec![PvCell::Cls]; n];
        let mut out = vec![Vec::with_capacity(props); n];
        for slot in 0..props {
            let mut g = Graph::inference(self.params);
            let c = Seq {
                x: g.input(ctx.clone()),
                batch: n,
                len: ctx_len,
                lens: ctx_lens.clone(),
            };
            let emb = self.model.embed_pv(&mut g, &cells);
            let h = self.model.encode_pv(&mut g, &emb, true);
            let (fused, _) = self.model.fuse(&mut g, &h, &c, true);
            let rows = fused.rows(&mut g, (0..n).map(|b| (b, slot)));
            let pred = self.model.property_pred(&mut g, rows);
            let values = g.value(pred).data().to_vec();
            for b in 0..n {
                cells[b].push(PvCell::Value(values[b]));
                out[b].push(values[b]);
            }
        }
        Ok(out)
    }

    /// Head-averaged final-layer cross-attention with property features as
    /// queries. Rows follow the property spec (the `[CLS]_P` row is
    /// dropped); columns are the SMILES tokens including `[CLS]` and `[SEP]`
    /// unless `exclude_specials` is set, in which case rows are renormalized
    /// over the remaining tokens.
    pub fn dump_attention(
        &self,
        spec: &PropertySpec,
        smiles: &str,
        pv: &PropertyVector,
        exclude_specials: bool,
    ) -> Result<AttentionMap, SpmmError> {
        parse_smiles(smiles).map_err(|source| SpmmError::InvalidSmiles {
            smiles: smiles.to_string(),
            source,
        })?;
        let ids = self.vocab.tokenize(smiles)?.ids;
        let mut g = Graph::inference(self.params);
        let s_emb = self.model.embed_smiles(&mut g, &[&ids])?;
        let s = self.model.encode_smiles(&mut g, &s_emb, false);
        let p_emb = self.model.embed_pv(&mut g, &[pv_cells(pv)]);
        let p = self.model.encode_pv(&mut g, &p_emb, false);
        let (_, attn) = self.model.fuse(&mut g, &p, &s, false);
        let (aspec, probs) = g.attention_probs(attn).expect("attention node");
        let (tq, tk, heads) = (aspec.q_len, aspec.k_len, aspec.heads);
        let cols: Vec<usize> = if exclude_specials {
            (1..tk - 1).collect()
        } else {
            (0..tk).collect()
        };
        let mut scores = Vec::with_capacity(tq - 1);
        for q in 1..tq {
            let mut row: Vec<f64> = cols
                .iter()
                .map(|&k| (0..heads).map(|h| probs[(h * tq + q) * tk + k]).sum::<f64>() / heads as f64)
                .collect();
            if exclude_specials {
                let s: f64 = row.iter().sum();
                if s > 0.0 {
                    row.iter_mut().for_each(|v| *v /= s);
                }
            }
            scores.push(row);
        }
        let tokens = cols
            .iter()
            .map(|&k| self.vocab.token(ids[k]).unwrap_or("?").to_string())
            .collect();
        Ok(AttentionMap {
            properties: spec.names().to_vec(),
            tokens,
            scores,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionMap {
    pub properties: Vec<String>,
    pub tokens: Vec<String>,
    /// `properties.len() x tokens.len()`.
    pub scores: Vec<Vec<f64>>,
}

impl AttentionMap {
    /// Header row of tokens, then one row per property.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("property");
        for t in &self.tokens {
            out.push(',');
            out.push_str(&csv_field(t));
        }
        out.push('\n');
        for (name, row) in self.properties.iter().zip(&self.scores) {
            out.push_str(&csv_field(name));
            for v in row {
                out.push_str(&format!(",{v:?}"));
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One JSON-lines record per generated sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationRecord {
    pub smiles: String,
    pub valid: bool,
    pub canonical: Option<String>,
    pub properties: BTreeMap<String, f64>,
    pub overflow: bool,
}

impl GenerationRecord {
    pub fn new(smiles: &str, overflow: bool) -> GenerationRecord {
        match parse_smiles(smiles) {
            Ok(g) => {
                let values = compute_builtin(&g);
                GenerationRecord {
                    smiles: smiles.to_string(),
                    valid: true,
                    canonical: Some(canonicalize(&g)),
                    properties: BUILTIN.iter().zip(values).map(|((n, _), v)| (n.to_string(), v)).collect(),
                    overflow,
                }
            }
            Err(_) => GenerationRecord {
                smiles: smiles.to_string(),
                valid: false,
                canonical: None,
                properties: BTreeMap::new(),
                overflow,
            },
        }
    }
}

/// Conditioning used for property-error scoring: raw target values and
/// their known flags.
pub struct Conditioning<'a> {
    pub pv: &'a PropertyVector,
    pub spec: &'a PropertySpec,
    pub normalizer: &'a Normalizer,
}

/// Undefined fractions (empty denominators) serialize as `null`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerationReport {
    pub n: usize,
    pub n_valid: usize,
    pub n_unique: usize,
    pub n_novel: Option<usize>,
    pub validity: Option<f64>,
    pub uniqueness: Option<f64>,
    pub novelty: Option<f64>,
    /// Mean over controlled properties of the per-property RMSE in
    /// normalized units.
    pub rmse: Option<f64>,
    pub rmse_per_property: BTreeMap<String, f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Validity, uniqueness and novelty over canonical forms, plus property
/// error against `conditioning` for controlled builtin properties.
pub fn score_generation(
    outputs: &[String],
    conditioning: Option<&Conditioning>,
    corpus: Option<&BTreeSet<String>>,
) -> GenerationReport {
    let graphs: Vec<_> = outputs.iter().filter_map(|s| parse_smiles(s).ok()).collect();
    let canon: Vec<String> = graphs.iter().map(canonicalize).collect();
    let unique: HashSet<&str> = canon.iter().map(String::as_str).collect();
    let n_novel = corpus.map(|c| unique.iter().filter(|s| !c.contains(**s)).count());
    let mut rmse_per_property = BTreeMap::new();
    if let Some(cond) = conditioning {
        let builtin_index: Vec<Option<usize>> = cond
            .spec
            .names()
            .iter()
            .enumerate()
            .map(|(i, name)| {
                (cond.spec.source(i) == PropertySource::Builtin)
                    .then(|| BUILTIN.iter().position(|(n, alias)| n == name || alias == name))
                    .flatten()
            })
            .collect();
        let values: Vec<Vec<f64>> = graphs.iter().map(compute_builtin).collect();
        if !values.is_empty() {
            for (i, bi) in builtin_index.iter().enumerate() {
                let Some(bi) = *bi else { continue };
                if !cond.pv.known[i] {
                    continue;
                }
                let target = cond.normalizer.normalize(i, cond.pv.raw[i]);
                let mse = values
                    .iter()
                    .map(|v| (cond.normalizer.normalize(i, v[bi]) - target).powi(2))
                    .sum::<f64>()
                    / values.len() as f64;
                rmse_per_property.insert(cond.spec.names()[i].clone(), mse.sqrt());
            }
        }
    }
    let rmse = (!rmse_per_property.is_empty())
        .then(|| rmse_per_property.values().sum::<f64>() / rmse_per_property.len() as f64);
    GenerationReport {
        n: outputs.len(),
        n_valid: graphs.len(),
        n_unique: unique.len(),
        n_novel,
        validity: ratio(graphs.len(), outputs.len()),
        uniqueness: ratio(unique.len(), graphs.len()),
        novelty: n_novel.and_then(|k| ratio(k, unique.len())),
        rmse,
        rmse_per_property,
    }
}

/// Parses `name=value` pairs into a raw property vector. Unnamed slots are
/// unknown when `mask_others` is set and an error otherwise.
pub fn parse_pv_conditioning(
    text: &str,
    spec: &PropertySpec,
    normalizer: &Normalizer,
    mask_others: bool,
) -> Result<PropertyVector, SpmmError> {
    let mut raw: Vec<Option<f64>> = vec![None; spec.len()];
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| SpmmError::Data(format!("expected name=value, got `{part}`")))?;
        let i = spec
            .position(name.trim())
            .ok_or_else(|| SpmmError::Data(format!("unknown property `{}`", name.trim())))?;
        let v: f64 = value
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| SpmmError::Data(format!("bad value in `{part}`")))?;
        raw[i] = Some(v);
    }
    if !mask_others {
        if let Some(i) = raw.iter().position(Option::is_none) {
            return Err(SpmmError::Data(format!(
                "property `{}` not given; pass --mask-others to leave it unknown",
                spec.names()[i]
            )));
        }
    }
    Ok(normalizer.vector(&raw))
}
