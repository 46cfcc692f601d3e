//! Downstream adaptation: `[CLS]`-head regression and classification, and
//! sequence-to-sequence reaction prediction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use spmm_chem::molgraph::{canonicalize, randomize_smiles};
use spmm_chem::tokenizer::{CLS_ID, PAD_ID, SEP_ID};
use spmm_chem::{parse_smiles, Vocab};
use spmm_nn::{lr_schedule, AdamW, Checkpoint, Graph, ParamStore, Tensor};

use crate::error::SpmmError;
use crate::inference::{DecodeMode, Decoded, Runner};
use crate::model::{Spmm, TaskHead};
use crate::pretrain::losses::{nwp_loss, nwp_positions, nwp_targets};
use crate::pretrain::trainer::adam_config;
use crate::state::{Assets, Meta, KIND_FINETUNE, KIND_REACTION};
use crate::{stream_rng, TAG_FINETUNE, TAG_REACTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Regression,
    Classification,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<TaskKind, SpmmError> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "classification" => Ok(TaskKind::Classification),
            _ => Err(SpmmError::Data(format!("unknown task kind `{s}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::Classification => "classification",
        }
    }

    pub fn metric(self) -> &'static str {
        match self {
            TaskKind::Regression => "rmse",
            TaskKind::Classification => "auroc",
        }
    }
}

/// SMILES with one label per task; `None` marks a missing label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabeledSet {
    pub smiles: Vec<String>,
    pub labels: Vec<Vec<Option<f64>>>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.smiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.smiles.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> LabeledSet {
        LabeledSet {
            smiles: idx.iter().map(|&i| self.smiles[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }
}

/// Reads `smiles,label1[,label2...]`; empty cells are missing labels.
pub fn read_label_csv(text: &str) -> Result<(Vec<String>, LabeledSet), SpmmError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(SpmmError::EmptySplit("dataset"))?;
    let cols: Vec<String> = header.split(',').map(|c| c.trim().to_string()).collect();
    if cols.len() < 2 || cols[0] != "smiles" {
        return Err(SpmmError::LabelParse {
            line: 1,
            msg: "header must be `smiles,label1[,...]`".into(),
        });
    }
    let tasks = cols[1..].to_vec();
    let mut set = LabeledSet::default();
    for (n, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != cols.len() {
            return Err(SpmmError::LabelParse {
                line: n + 1,
                msg: format!("expected {} columns, found {}", cols.len(), cells.len()),
            });
        }
        let labels = cells[1..]
            .iter()
            .map(|c| {
                if c.is_empty() {
                    Ok(None)
                } else {
                    c.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some).ok_or_else(|| SpmmError::LabelParse {
                        line: n + 1,
                        msg: format!("bad label `{c}`"),
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        set.smiles.push(cells[0].to_string());
        set.labels.push(labels);
    }
    Ok((tasks, set))
}

/// Train/valid/test split whose test labels are reachable only through
/// [`SealedSplit::score_test`], after training has finished.
#[derive(Debug, Clone)]
pub struct SealedSplit {
    pub train: LabeledSet,
    pub valid: LabeledSet,
    test: LabeledSet,
}

impl SealedSplit {
    pub fn new(train: LabeledSet, valid: LabeledSet, test: LabeledSet) -> Result<SealedSplit, SpmmError> {
        for (name, s) in [("train", &train), ("valid", &valid), ("test", &test)] {
            if s.is_empty() {
                return Err(SpmmError::EmptySplit(name));
            }
        }
        Ok(SealedSplit { train, valid, test })
    }

    /// Seeded random 8:1:1 split.
    pub fn random(data: &LabeledSet, seed: u64) -> Result<SealedSplit, SpmmError> {
        let n = data.len();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream_rng(seed, TAG_FINETUNE, u64::MAX));
        let n_test = (n as f64 / 10.0).round() as usize;
        let n_valid = n_test;
        let n_train = n.saturating_sub(n_test + n_valid);
        SealedSplit::new(
            data.subset(&idx[..n_train]),
            data.subset(&idx[n_train..n_train + n_valid]),
            data.subset(&idx[n_train + n_valid..]),
        )
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }

    pub fn test_smiles(&self) -> &[String] {
        &self.test.smiles
    }

    /// Consumes the split: predictions for the test SMILES are scored
    /// against the sealed labels.
    pub fn score_test(
        self,
        kind: TaskKind,
        predict: impl FnOnce(&[String]) -> Result<Vec<Vec<f64>>, SpmmError>,
    ) -> Result<f64, SpmmError> {
        let preds = predict(&self.test.smiles)?;
        Ok(metric(kind, &preds, &self.test.labels))
    }
}

/// RMSE over all present labels, or AUROC macro-averaged over tasks with
/// both classes present (NaN if none).
pub fn metric(kind: TaskKind, preds: &[Vec<f64>], labels: &[Vec<Option<f64>>]) -> f64 {
    let tasks = labels.first().map_or(0, Vec::len);
    match kind {
        TaskKind::Regression => {
            let (mut se, mut n) = (0.0, 0usize);
            for (p, l) in preds.iter().zip(labels) {
                for t in 0..tasks {
                    if let Some(y) = l[t] {
                        se += (p[t] - y).powi(2);
                        n += 1;
                    }
                }
            }
            if n == 0 {
                f64::NAN
            } else {
                (se / n as f64).sqrt()
            }
        }
        TaskKind::Classification => {
            let aucs: Vec<f64> = (0..tasks)
                .filter_map(|t| {
                    let pairs: Vec<(f64, bool)> = preds
                        .iter()
                        .zip(labels)
                        .filter_map(|(p, l)| l[t].map(|y| (p[t], y > 0.5)))
                        .collect();
                    auroc(&pairs)
                })
                .collect();
            if aucs.is_empty() {
                f64::NAN
            } else {
                aucs.iter().sum::<f64>() / aucs.len() as f64
            }
        }
    }
}

/// Area under the ROC curve via average ranks (ties share their rank);
/// `None` when only one class is present.
pub fn auroc(scored: &[(f64, bool)]) -> Option<f64> {
    let pos = scored.iter().filter(|(_, y)| *y).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.total_cmp(&scored[b].0));
    let mut ranks = vec![0.0; scored.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = scored.iter().zip(&ranks).filter(|((_, y), _)| *y).map(|(_, r)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos * neg) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr_peak: f64,
    pub lr_min: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl TrainSettings {
    pub fn finetune(cfg: &crate::RunConfig) -> Self {
        let f = &cfg.finetune;
        TrainSettings {
            epochs: f.epochs,
            batch: f.batch,
            lr_peak: f.lr_peak,
            lr_min: f.lr_min,
            warmup: f.warmup,
            weight_decay: f.weight_decay,
            seed: cfg.run.seed,
        }
    }

    pub fn reaction(cfg: &crate::RunConfig) -> Self {
        let r = &cfg.reaction;
        TrainSettings {
            epochs: r.epochs,
            batch: r.batch,
            lr_peak: r.lr_peak,
            lr_min: r.lr_min,
            warmup: r.warmup,
            weight_decay: r.weight_decay,
            seed: cfg.run.seed,
        }
    }
}

/// Encoder plus task head with label scaling for regression.
#[derive(Debug, Clone)]
pub struct HeadModel {
    pub model: Spmm,
    pub head: TaskHead,
    pub params: ParamStore,
    pub kind: TaskKind,
    pub tasks: Vec<String>,
    /// Regression targets are standardized with these during training.
    pub label_mean: Vec<f64>,
    pub label_std: Vec<f64>,
}

impl HeadModel {
    /// Adds a freshly initialized head to a copy of `params`.
    pub fn new(model: &Spmm, params: &ParamStore, cfg: &crate::RunConfig, kind: TaskKind, tasks: Vec<String>) -> HeadModel {
        let mut params = params.clone();
        let head = TaskHead::build(
            &mut params,
            cfg.model.d_model,
            cfg.head_hidden(),
            tasks.len(),
            cfg.model.init_std,
            cfg.run.seed ^ 0x7a5c,
        );
        HeadModel {
            model: model.clone(),
            head,
            params,
            kind,
            label_mean: vec![0.0; tasks.len()],
            label_std: vec![1.0; tasks.len()],
            tasks,
        }
    }

    fn encode_ids(&self, vocab: &Vocab, smiles: &[String]) -> Result<Vec<Vec<u32>>, SpmmError> {
        smiles
            .iter()
            .map(|s| {
                parse_smiles(s).map_err(|source| SpmmError::InvalidSmiles {
                    smiles: s.clone(),
                    source,
                })?;
                Ok(vocab.tokenize(s)?.ids)
            })
            .collect()
    }

    fn forward(&self, g: &mut Graph, ids: &[Vec<u32>]) -> Result<spmm_nn::Var, SpmmError> {
        let slices: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
        let emb = self.model.embed_smiles(g, &slices)?;
        let h = self.model.encode_smiles(g, &emb, false);
        let cls = h.cls(g);
        Ok(self.head.forward(g, cls))
    }

    /// Loss on a labeled batch: MSE on standardized targets or binary
    /// cross-entropy, each averaged over present labels.
    fn loss(&self, g: &mut Graph, ids: &[Vec<u32>], labels: &[Vec<Option<f64>>]) -> Result<spmm_nn::Var, SpmmError> {
        let out = self.forward(g, ids)?;
        let t = self.tasks.len();
        let present = labels.iter().flatten().filter(|l| l.is_some()).count().max(1) as f64;
        let mut targets = Tensor::zeros(ids.len(), t);
        let mut weights = Tensor::zeros(ids.len(), t);
        for (r, l) in labels.iter().enumerate() {
            for j in 0..t {
                if let Some(y) = l[j] {
                    targets.row_mut(r)[j] = match self.kind {
                        TaskKind::Regression => (y - self.label_mean[j]) / self.label_std[j],
                        TaskKind::Classification => y,
                    };
                    weights.row_mut(r)[j] = 1.0 / present;
                }
            }
        }
        Ok(match self.kind {
            TaskKind::Regression => g.weighted_squared_error(out, targets.into_data(), weights.into_data()),
            TaskKind::Classification => g.bce_with_logits(out, targets, weights),
        })
    }

    /// Predictions in label units (probabilities for classification).
    pub fn predict(&self, vocab: &Vocab, smiles: &[String]) -> Result<Vec<Vec<f64>>, SpmmError> {
        let ids = self.encode_ids(vocab, smiles)?;
        let mut out = Vec::with_capacity(ids.len());
        for chunk in ids.chunks(64) {
            let mut g = Graph::inference(&self.params);
            let v = self.forward(&mut g, chunk)?;
            let y = g.value(v);
            for r in 0..y.rows() {
                out.push(
                    y.row(r)
                        .iter()
                        .enumerate()
                        .map(|(j, &v)| match self.kind {
                            TaskKind::Regression => v * self.label_std[j] + self.label_mean[j],
                            TaskKind::Classification => spmm_nn::graph::sigmoid(v),
                        })
                        .collect(),
                );
            }
        }
        Ok(out)
    }

    fn mean_loss(&self, vocab: &Vocab, set: &LabeledSet) -> Result<f64, SpmmError> {
        let ids = self.encode_ids(vocab, &set.smiles)?;
        let mut g = Graph::inference(&self.params);
        let l = self.loss(&mut g, &ids, &set.labels)?;
        Ok(g.value(l).item())
    }

    pub fn save(&self, assets: &Assets, path: &Path) -> Result<(), SpmmError> {
        let mut ck = Checkpoint::new();
        assets.write(&mut ck);
        let mut meta = Meta::default();
        meta.set("kind", KIND_FINETUNE);
        meta.set("task", self.kind.name());
        meta.set("task_arity", self.tasks.len());
        meta.set("task_names", self.tasks.join(","));
        meta.set("label_mean", join_f64(&self.label_mean));
        meta.set("label_std", join_f64(&self.label_std));
        meta.write(&mut ck);
        ck.put_params("student", &self.params);
        ck.save(path)?;
        Ok(())
    }

    pub fn from_loaded(loaded: &crate::LoadedModel) -> Result<HeadModel, SpmmError> {
        let head = loaded
            .head
            .clone()
            .ok_or_else(|| SpmmError::Data("checkpoint has no task head".into()))?;
        let m = &loaded.meta;
        Ok(HeadModel {
            model: loaded.model.clone(),
            head,
            params: loaded.params.clone(),
            kind: TaskKind::parse(m.require("task")?)?,
            tasks: m.require("task_names")?.split(',').map(str::to_string).collect(),
            label_mean: split_f64(m.require("label_mean")?)?,
            label_std: split_f64(m.require("label_std")?)?,
        })
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn split_f64(s: &str) -> Result<Vec<f64>, SpmmError> {
    s.split(',')
        .map(|x| x.parse().map_err(|_| SpmmError::Data(format!("bad number `{x}` in metadata"))))
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneReport {
    pub task: String,
    pub metric: String,
    pub test_metric: f64,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
}

/// Trains encoder and head, keeps the epoch with the lowest validation
/// loss and scores it on the sealed test split.
pub fn finetune_head(
    mut hm: HeadModel,
    vocab: &Vocab,
    split: SealedSplit,
    settings: &TrainSettings,
) -> Result<(HeadModel, FinetuneReport), SpmmError> {
    let (n_train, n_valid, n_test) = split.sizes();
    if hm.kind == TaskKind::Regression {
        for j in 0..hm.tasks.len() {
            let vals: Vec<f64> = split.train.labels.iter().filter_map(|l| l[j]).collect();
            if vals.is_empty() {
                continue;
            }
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = if vals.len() > 1 {
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64
            } else {
                0.0
            };
            hm.label_mean[j] = mean;
            hm.label_std[j] = var.sqrt().max(1e-8);
        }
    }
    let ids = hm.encode_ids(vocab, &split.train.smiles)?;
    let mut opt = AdamW::new(&hm.params, adam_config(settings.weight_decay));
    let per_epoch = n_train.div_ceil(settings.batch) as u64;
    let total = per_epoch * settings.epochs as u64;
    let mut best = (hm.params.clone(), f64::INFINITY, 0usize);
    let mut step = 0u64;
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut stream_rng(settings.seed, TAG_FINETUNE, epoch as u64));
        for chunk in order.chunks(settings.batch) {
            let b_ids: Vec<Vec<u32>> = chunk.iter().map(|&i| ids[i].clone()).collect();
            let b_labels: Vec<Vec<Option<f64>>> = chunk.iter().map(|&i| split.train.labels[i].clone()).collect();
            let grads = {
                let mut g = Graph::new(&hm.params);
                let l = hm.loss(&mut g, &b_ids, &b_labels)?;
                g.backward(l)
            };
            let lr = lr_schedule(step, total, settings.warmup, settings.lr_peak, settings.lr_min);
            opt.step(&mut hm.params, &grads, lr);
            step += 1;
        }
        let v = hm.mean_loss(vocab, &split.valid)?;
        if v < best.1 {
            best = (hm.params.clone(), v, epoch);
        }
    }
    if best.1.is_finite() {
        hm.params = best.0;
    }
    let kind = hm.kind;
    let test_metric = split.score_test(kind, |s| hm.predict(vocab, s))?;
    let report = FinetuneReport {
        task: kind.name().into(),
        metric: kind.metric().into(),
        test_metric,
        best_epoch: best.2,
        best_valid_loss: best.1,
        train_size: n_train,
        valid_size: n_valid,
        test_size: n_test,
    };
    Ok((hm, report))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReactionPair {
    pub source: String,
    pub target: String,
}

/// Reads `reactants,product` rows. Retro direction swaps the roles.
/// Rows whose SMILES do not parse are skipped and counted.
pub fn read_reaction_csv(text: &str, retro: bool) -> Result<(Vec<ReactionPair>, usize), SpmmError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or(SpmmError::EmptySplit("reaction dataset"))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols != ["reactants", "product"] {
        return Err(SpmmError::LabelParse {
            line: 1,
            msg: "header must be `reactants,product`".into(),
        });
    }
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for (n, line) in lines {
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 2 {
            return Err(SpmmError::LabelParse {
                line: n + 1,
                msg: format!("expected 2 columns, found {}", cells.len()),
            });
        }
        if parse_smiles(cells[0]).is_err() || parse_smiles(cells[1]).is_err() {
            skipped += 1;
            continue;
        }
        let (s, t) = if retro { (cells[1], cells[0]) } else { (cells[0], cells[1]) };
        pairs.push(ReactionPair {
            source: s.to_string(),
            target: t.to_string(),
        });
    }
    Ok((pairs, skipped))
}

/// Randomized rewrite with probability `p`, falling back to `smiles` when the
/// rewrite is not encodable.
fn augment<R: Rng + ?Sized>(smiles: &str, p: f64, vocab: &Vocab, rng: &mut R) -> Result<Vec<u32>, SpmmError> {
    let u: f64 = rng.random();
    let seed: u64 = rng.random();
    if u < p {
        if let Ok(g) = parse_smiles(smiles) {
            if let Ok(t) = vocab.tokenize(&randomize_smiles(&g, seed)) {
                return Ok(t.ids);
            }
        }
    }
    Ok(vocab.tokenize(smiles)?.ids)
}

/// Teacher-forced next-token loss of `target` given bidirectionally
/// encoded `source`.
pub fn reaction_loss(
    g: &mut Graph,
    model: &Spmm,
    sources: &[Vec<u32>],
    targets: &[Vec<u32>],
) -> Result<spmm_nn::Var, SpmmError> {
    let src: Vec<&[u32]> = sources.iter().map(Vec::as_slice).collect();
    let tgt: Vec<&[u32]> = targets.iter().map(Vec::as_slice).collect();
    let s_emb = model.embed_smiles(g, &src)?;
    let ctx = model.encode_smiles(g, &s_emb, false);
    let t_emb = model.embed_smiles(g, &tgt)?;
    let t = model.encode_smiles(g, &t_emb, true);
    let (fused, _) = model.fuse(g, &t, &ctx, true);
    let pos = nwp_positions(&tgt, t_emb.len);
    let rows: Vec<(usize, usize)> = pos.iter().map(|&(r, _)| (r / t_emb.len, r % t_emb.len)).collect();
    let h = fused.rows(g, rows);
    let logits = model.token_logits(g, h);
    let toks: Vec<u32> = pos.iter().map(|&(_, t)| t).collect();
    let targets = nwp_targets(&toks, model.dims.vocab, None, 0.0);
    Ok(nwp_loss(g, logits, targets, sources.len()))
}

/// Seq2seq training; returns the mean loss of every epoch.
pub fn train_reaction(
    model: &Spmm,
    params: &mut ParamStore,
    vocab: &Vocab,
    pairs: &[ReactionPair],
    augment_p: f64,
    settings: &TrainSettings,
) -> Result<Vec<f64>, SpmmError> {
    if pairs.is_empty() {
        return Err(SpmmError::EmptySplit("reaction training"));
    }
    let mut opt = AdamW::new(params, adam_config(settings.weight_decay));
    let per_epoch = pairs.len().div_ceil(settings.batch) as u64;
    let total = per_epoch * settings.epochs as u64;
    let mut step = 0u64;
    let mut history = Vec::with_capacity(settings.epochs);
    for epoch in 0..settings.epochs {
        let mut rng = stream_rng(settings.seed, TAG_REACTION, epoch as u64);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(settings.batch) {
            let mut src = Vec::with_capacity(chunk.len());
            let mut tgt = Vec::with_capacity(chunk.len());
            for &i in chunk {
                src.push(augment(&pairs[i].source, augment_p, vocab, &mut rng)?);
                tgt.push(augment(&pairs[i].target, augment_p, vocab, &mut rng)?);
            }
            let (grads, l) = {
                let mut g = Graph::new(params);
                let l = reaction_loss(&mut g, model, &src, &tgt)?;
                let v = g.value(l).item();
                (g.backward(l), v)
            };
            let lr = lr_schedule(step, total, settings.warmup, settings.lr_peak, settings.lr_min);
            opt.step(params, &grads, lr);
            step += 1;
            sum += l * chunk.len() as f64;
        }
        history.push(sum / pairs.len() as f64);
    }
    Ok(history)
}

pub fn save_reaction(assets: &Assets, params: &ParamStore, direction: &str, path: &Path) -> Result<(), SpmmError> {
    let mut ck = Checkpoint::new();
    assets.write(&mut ck);
    let mut meta = Meta::default();
    meta.set("kind", KIND_REACTION);
    meta.set("direction", direction);
    meta.write(&mut ck);
    ck.put_params("student", params);
    ck.save(path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub smiles: String,
    /// Total log-probability of the emitted tokens, [SEP] included.
    pub score: f64,
    pub overflow: bool,
}

fn log_softmax_allowed(logits: &[f64]) -> Vec<f64> {
    let allowed = |j: usize| j != PAD_ID as usize && j != CLS_ID as usize;
    let max = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| allowed(j))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| allowed(j))
            .map(|(_, &v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    logits
        .iter()
        .enumerate()
        .map(|(j, &v)| if allowed(j) { v - lse } else { f64::NEG_INFINITY })
        .collect()
}

impl Runner<'_> {
    /// Single-sequence decoding of a product (or reactant set) for `source`.
    pub fn translate<R: Rng + ?Sized>(
        &self,
        source: &str,
        mode: DecodeMode,
        max_len: usize,
        rng: &mut R,
    ) -> Result<Decoded, SpmmError> {
        parse_smiles(source).map_err(|e| SpmmError::InvalidSmiles {
            smiles: source.to_string(),
            source: e,
        })?;
        let ids = self.vocab.tokenize(source)?.ids;
        let (ctx, ctx_len, ctx_lens) = self.encode_smiles(&[ids])?;
        let mut out = self.decode_against(&ctx, ctx_len, &ctx_lens, mode, max_len, rng)?;
        Ok(out.remove(0))
    }

    /// Beam search of width `width` (at least `k`); returns up to `k`
    /// candidates by descending total log-probability.
    pub fn predict_reaction(&self, source: &str, k: usize, width: usize, max_len: usize) -> Result<Vec<Candidate>, SpmmError> {
        parse_smiles(source).map_err(|e| SpmmError::InvalidSmiles {
            smiles: source.to_string(),
            source: e,
        })?;
        let width = width.max(k).max(1);
        let max_len = max_len.min(self.model.dims.max_len);
        let ids = self.vocab.tokenize(source)?.ids;
        let (ctx, ctx_len, ctx_lens) = self.encode_smiles(&[ids])?;
        let d = ctx.cols();
        let mut beams: Vec<(Vec<u32>, f64)> = vec![(vec![CLS_ID], 0.0)];
        let mut finished: Vec<(Vec<u32>, f64, bool)> = Vec::new();
        while !beams.is_empty() {
            if beams[0].0.len() >= max_len {
                finished.extend(beams.drain(..).map(|(s, sc)| (s, sc, true)));
                break;
            }
            let n = beams.len();
            let rep = Tensor::from_vec(n * ctx_len, d, ctx.data().repeat(n));
            let seqs: Vec<Vec<u32>> = beams.iter().map(|(s, _)| s.clone()).collect();
            let active: Vec<usize> = (0..n).collect();
            let logits = self.next_logits(&rep, ctx_len, &vec![ctx_lens[0]; n], d, &seqs, &active)?;
            let mut cands: Vec<(f64, usize, u32)> = Vec::new();
            for (b, (_, score)) in beams.iter().enumerate() {
                for (tok, lp) in log_softmax_allowed(logits.row(b)).into_iter().enumerate() {
                    if lp.is_finite() {
                        cands.push((score + lp, b, tok as u32));
                    }
                }
            }
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            cands.truncate(width);
            let mut next = Vec::new();
            for (score, b, tok) in cands {
                let mut s = beams[b].0.clone();
                s.push(tok);
                if tok == SEP_ID {
                    finished.push((s, score, false));
                } else {
                    next.push((s, score));
                }
            }
            beams = next;
        }
        finished.sort_by(|a, b| b.1.total_cmp(&a.1));
        finished.truncate(k);
        finished
            .into_iter()
            .map(|(ids, score, overflow)| {
                Ok(Candidate {
                    smiles: self.vocab.decode(&ids)?,
                    score,
                    overflow,
                })
            })
            .collect()
    }
}

/// Canonical-form exact match.
pub fn same_molecule(a: &str, b: &str) -> bool {
    match (parse_smiles(a), parse_smiles(b)) {
        (Ok(x), Ok(y)) => canonicalize(&x) == canonicalize(&y),
        _ => false,
    }
}
