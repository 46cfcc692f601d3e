use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use spmm_chem::{Normalizer, PropertySpec, PropertyVector, Vocab};
use spmm_nn::{checkpoint::write_atomic, ema_update, lr_schedule, AdamW, AdamWConfig, Checkpoint, Graph, ParamStore, Tensor, Var};

use super::losses::*;
use super::queue::FeatureQueue;
use crate::config::RunConfig;
use crate::data::{corpus_digest, Molecule};
use crate::error::SpmmError;
use crate::model::{pv_cells, Seq, Spmm};
use crate::state::{Assets, Meta, KIND_PRETRAIN};
use crate::{stream_rng, TAG_EPOCH, TAG_STEP};

/// Model-ready SMILES ids paired with (already masked) property vectors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub pvs: Vec<PropertyVector>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn id_slices(&self) -> Vec<&[u32]> {
        self.ids.iter().map(Vec::as_slice).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TeacherOutput {
    /// Projected, normalized `[CLS]` features.
    pub zs: Tensor,
    pub zp: Tensor,
    /// Next-token distributions at the rows given by [`nwp_positions`].
    pub nwp_probs: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub contrastive: f64,
    pub nwp: f64,
    pub npp: f64,
    pub spm: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &RunConfig) -> Self {
        LossWeights {
            contrastive: cfg.pretrain.w_contrastive,
            nwp: cfg.pretrain.w_nwp,
            npp: cfg.pretrain.w_npp,
            spm: cfg.pretrain.w_spm,
        }
    }

    pub fn only(which: usize) -> Self {
        let mut w = [0.0; 4];
        w[which] = 1.0;
        LossWeights {
            contrastive: w[0],
            nwp: w[1],
            npp: w[2],
            spm: w[3],
        }
    }
}

pub struct LossContext<'a> {
    pub queue_s: &'a Tensor,
    pub queue_p: &'a Tensor,
    pub teacher: &'a TeacherOutput,
    /// Temperature of the teacher similarities behind the soft labels.
    pub teacher_temp: f64,
    pub alpha: f64,
    pub weights: LossWeights,
}

/// Mined SPM negatives: a PV index for every SMILES and vice versa.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Negatives {
    pub pv_for_smiles: Vec<usize>,
    pub smiles_for_pv: Vec<usize>,
}

/// Weighted loss terms (`None` when the weight is zero) and their sum.
#[derive(Debug, Clone)]
pub struct StudentLosses {
    pub contrastive: Option<Var>,
    pub nwp: Option<Var>,
    pub npp: Option<Var>,
    pub spm: Option<Var>,
    pub total: Var,
    pub negatives: Option<Negatives>,
}

fn cells(batch: &Batch) -> Vec<Vec<spmm_nn::PvCell>> {
    batch.pvs.iter().map(pv_cells).collect()
}

/// Teacher features, computed without gradients.
pub fn teacher_forward(model: &Spmm, store: &ParamStore, batch: &Batch, need_nwp: bool) -> Result<TeacherOutput, SpmmError> {
    let mut g = Graph::inference(store);
    let ids = batch.id_slices();
    let s_emb = model.embed_smiles(&mut g, &ids)?;
    let p_emb = model.embed_pv(&mut g, &cells(batch));
    let s_bi = model.encode_smiles(&mut g, &s_emb, false);
    let p_bi = model.encode_pv(&mut g, &p_emb, false);
    let cs = s_bi.cls(&mut g);
    let cp = p_bi.cls(&mut g);
    let zs = model.project_smiles(&mut g, cs);
    let zp = model.project_pv(&mut g, cp);
    let nwp_probs = if need_nwp {
        let s_ca = model.encode_smiles(&mut g, &s_emb, true);
        let (fused, _) = model.fuse(&mut g, &s_ca, &p_bi, true);
        let rows: Vec<(usize, usize)> = nwp_positions(&ids, s_emb.len)
            .iter()
            .map(|&(r, _)| (r / s_emb.len, r % s_emb.len))
            .collect();
        let h = fused.rows(&mut g, rows);
        let logits = model.token_logits(&mut g, h);
        let mut p = g.value(logits).clone();
        softmax_rows(&mut p);
        Some(p)
    } else {
        None
    };
    Ok(TeacherOutput {
        zs: g.value(zs).clone(),
        zp: g.value(zp).clone(),
        nwp_probs,
    })
}

/// Builds all enabled student losses on `g`. When `negatives` is `None` they
/// are mined from the current student similarities with `rng`.
pub fn student_losses<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Spmm,
    batch: &Batch,
    ctx: &LossContext,
    negatives: Option<&Negatives>,
    rng: &mut R,
) -> Result<StudentLosses, SpmmError> {
    let b = batch.len();
    if b < 2 {
        return Err(SpmmError::BatchTooSmall(b));
    }
    let w = ctx.weights;
    let ids = batch.id_slices();
    let s_emb = model.embed_smiles(g, &ids)?;
    let p_emb = model.embed_pv(g, &cells(batch));
    let s_bi = model.encode_smiles(g, &s_emb, false);
    let p_bi = model.encode_pv(g, &p_emb, false);
    let mut terms = Vec::new();

    let mut contrastive = None;
    let mut sims = None;
    if w.contrastive > 0.0 || w.spm > 0.0 {
        let cs = s_bi.cls(g);
        let cp = p_bi.cls(g);
        let zs = model.project_smiles(g, cs);
        let zp = model.project_pv(g, cp);
        let temp = g.param(model.temp);
        let hard = ContrastiveTargets::one_hot(b, ctx.queue_s.rows());
        let targets = if ctx.alpha > 0.0 {
            let soft =
                ContrastiveTargets::from_teacher(&ctx.teacher.zs, &ctx.teacher.zp, ctx.queue_s, ctx.queue_p, ctx.teacher_temp);
            hard.mix(&soft, ctx.alpha)
        } else {
            hard
        };
        let out = contrastive_loss(g, zs, zp, temp, ctx.queue_s, ctx.queue_p, &targets)?;
        sims = Some((out.sim_s2p, out.sim_p2s));
        if w.contrastive > 0.0 {
            let l = g.scale(out.loss, w.contrastive);
            contrastive = Some(l);
            terms.push(l);
        }
    }

    let mut nwp = None;
    if w.nwp > 0.0 {
        let s_ca = model.encode_smiles(g, &s_emb, true);
        let (fused, _) = model.fuse(g, &s_ca, &p_bi, true);
        let pos = nwp_positions(&ids, s_emb.len);
        let rows: Vec<(usize, usize)> = pos.iter().map(|&(r, _)| (r / s_emb.len, r % s_emb.len)).collect();
        let h = fused.rows(g, rows);
        let logits = model.token_logits(g, h);
        let toks: Vec<u32> = pos.iter().map(|&(_, t)| t).collect();
        let targets = nwp_targets(&toks, model.dims.vocab, ctx.teacher.nwp_probs.as_ref(), ctx.alpha);
        let l = nwp_loss(g, logits, targets, b);
        let l = g.scale(l, w.nwp);
        nwp = Some(l);
        terms.push(l);
    }

    let mut npp = None;
    if w.npp > 0.0 {
        let p_ca = model.encode_pv(g, &p_emb, true);
        let (fused, _) = model.fuse(g, &p_ca, &s_bi, true);
        let preds = model.property_pred(g, fused.x);
        let known: Vec<Vec<bool>> = batch.pvs.iter().map(|p| p.known.clone()).collect();
        let values: Vec<Vec<f64>> = batch.pvs.iter().map(|p| p.normalized.clone()).collect();
        let l = npp_loss(g, preds, &npp_targets(&known, &values));
        let l = g.scale(l, w.npp);
        npp = Some(l);
        terms.push(l);
    }

    let mut spm = None;
    let mut used = None;
    if w.spm > 0.0 {
        let (s2p, p2s) = sims.expect("similarities computed above");
        let negs = match negatives {
            Some(n) => n.clone(),
            None => Negatives {
                pv_for_smiles: mine_hard_negatives(g.value(s2p), rng)?,
                smiles_for_pv: mine_hard_negatives(g.value(p2s), rng)?,
            },
        };
        let l = spm_term(g, model, &s_bi, &p_bi, &negs);
        let l = g.scale(l, w.spm);
        spm = Some(l);
        terms.push(l);
        used = Some(negs);
    }

    if terms.is_empty() {
        return Err(SpmmError::Runtime("every pre-training objective is disabled".into()));
    }
    let total = g.sum(&terms);
    Ok(StudentLosses {
        contrastive,
        nwp,
        npp,
        spm,
        total,
        negatives: used,
    })
}

fn spm_term(g: &mut Graph, model: &Spmm, s_bi: &Seq, p_bi: &Seq, negs: &Negatives) -> Var {
    let b = s_bi.batch;
    let smiles_items: Vec<usize> = (0..b).chain(0..b).chain(negs.smiles_for_pv.iter().copied()).collect();
    let pv_items: Vec<usize> = (0..b).chain(negs.pv_for_smiles.iter().copied()).chain(0..b).collect();
    let s3 = s_bi.select(g, &smiles_items);
    let p3 = p_bi.select(g, &pv_items);
    let (fs, _) = model.fuse(g, &s3, &p3, false);
    let (fp, _) = model.fuse(g, &p3, &s3, false);
    let cs = fs.cls(g);
    let cp = fp.cls(g);
    let joint = g.concat_cols(&[cs, cp]);
    let logits = model.spm_logits(g, joint);
    let labels: Vec<usize> = (0..3 * b).map(|i| usize::from(i < b)).collect();
    spm_loss(g, logits, &labels)
}

/// One line of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub alpha: f64,
    pub l_con: f64,
    pub l_nwp: f64,
    pub l_npp: f64,
    pub l_spm: f64,
    pub total: f64,
}

impl StepReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

const TEMP_RANGE: (f64, f64) = (0.001, 0.5);

/// Student, momentum teacher, optimizer and queues over a fixed corpus.
pub struct Pretrainer {
    pub assets: Assets,
    pub model: Spmm,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub opt: AdamW,
    pub queue_s: FeatureQueue,
    pub queue_p: FeatureQueue,
    pub step: u64,
    pub molecules: Vec<Molecule>,
}

impl Pretrainer {
    pub fn new(assets: Assets, molecules: Vec<Molecule>) -> Result<Pretrainer, SpmmError> {
        assets.config.validate()?;
        let b = assets.config.pretrain.batch;
        if molecules.len() < b {
            return Err(SpmmError::Data(format!(
                "corpus has {} usable molecules, fewer than the batch size {b}",
                molecules.len()
            )));
        }
        let mut student = ParamStore::new();
        let model = assets.build_model(&mut student);
        let teacher = student.clone();
        let opt = AdamW::new(&student, adam_config(assets.config.pretrain.weight_decay));
        let d = assets.config.model.d_model;
        let k = assets.config.pretrain.queue;
        Ok(Pretrainer {
            model,
            teacher,
            opt,
            queue_s: FeatureQueue::new(k, d),
            queue_p: FeatureQueue::new(k, d),
            step: 0,
            student,
            molecules,
            assets,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.assets.config
    }

    pub fn steps_per_epoch(&self) -> u64 {
        (self.molecules.len() / self.config().pretrain.batch).max(1) as u64
    }

    /// Linear ramp from 0 to the configured alpha.
    pub fn alpha_at(&self, step: u64) -> f64 {
        let p = &self.config().pretrain;
        let ramp = if p.alpha_ramp == 0 { self.steps_per_epoch() } else { p.alpha_ramp };
        p.alpha * (step as f64 / ramp as f64).min(1.0)
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let p = &self.config().pretrain;
        lr_schedule(step, p.steps, p.warmup, p.lr_peak, p.lr_min)
    }

    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let mut perm: Vec<usize> = (0..self.molecules.len()).collect();
        perm.shuffle(&mut stream_rng(self.config().run.seed, TAG_EPOCH, epoch));
        let b = self.config().pretrain.batch;
        perm[pos * b..(pos + 1) * b].to_vec()
    }

    /// Batch for `step` with freshly masked property vectors, and the rng
    /// left for mining.
    pub fn batch_at(&self, step: u64) -> (Batch, rand_chacha::ChaCha8Rng) {
        let mut rng = stream_rng(self.config().run.seed, TAG_STEP, step);
        let rate = self.config().properties.mask_rate;
        let idx = self.batch_indices(step);
        let batch = Batch {
            ids: idx.iter().map(|&i| self.molecules[i].ids.clone()).collect(),
            pvs: idx.iter().map(|&i| self.molecules[i].pv.mask(rate, &mut rng)).collect(),
        };
        (batch, rng)
    }

    pub fn train_step(&mut self) -> Result<StepReport, SpmmError> {
        let step = self.step;
        let (batch, mut rng) = self.batch_at(step);
        let alpha = self.alpha_at(step);
        let weights = LossWeights::from_config(self.config());
        let teacher = teacher_forward(&self.model, &self.teacher, &batch, alpha > 0.0 && weights.nwp > 0.0)?;
        let queue_s = self.queue_s.features();
        let queue_p = self.queue_p.features();
        let ctx = LossContext {
            queue_s: &queue_s,
            queue_p: &queue_p,
            teacher: &teacher,
            teacher_temp: self.teacher.get(self.model.temp).item(),
            alpha,
            weights,
        };
        let (grads, report) = {
            let mut g = Graph::new(&self.student);
            let losses = student_losses(&mut g, &self.model, &batch, &ctx, None, &mut rng)?;
            let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
            let report = StepReport {
                step,
                lr: self.lr_at(step),
                alpha,
                l_con: val(losses.contrastive),
                l_nwp: val(losses.nwp),
                l_npp: val(losses.npp),
                l_spm: val(losses.spm),
                total: g.value(losses.total).item(),
            };
            if !report.total.is_finite() {
                return Err(SpmmError::Runtime(format!("non-finite loss at step {step}")));
            }
            (g.backward(losses.total), report)
        };
        self.opt.step(&mut self.student, &grads, report.lr);
        let t = self.student.get_mut(self.model.temp);
        t.data_mut()[0] = t.item().clamp(TEMP_RANGE.0, TEMP_RANGE.1);
        let lambda = self.config().pretrain.ema;
        ema_update(&mut self.teacher, &self.student, lambda);
        self.queue_s.push(&teacher.zs);
        self.queue_p.push(&teacher.zp);
        self.step += 1;
        Ok(report)
    }

    /// Runs until `self.step == until`, writing one JSON line per step.
    pub fn run_until(&mut self, until: u64, mut log: Option<&mut dyn Write>) -> Result<Vec<StepReport>, SpmmError> {
        let mut reports = Vec::new();
        while self.step < until {
            let r = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", r.to_json()).map_err(|e| SpmmError::io("metrics log", e))?;
            }
            reports.push(r);
        }
        Ok(reports)
    }

    pub fn digest(&self) -> (String, String) {
        corpus_digest(self.molecules.iter().map(|m| m.canonical.as_str()))
    }

    /// Writes the checkpoint and its corpus digest sidecar.
    pub fn save(&self, path: &Path) -> Result<(), SpmmError> {
        let mut ck = Checkpoint::new();
        self.assets.write(&mut ck);
        let file_name = path
            .file_name()
            .ok_or_else(|| SpmmError::Data(format!("bad checkpoint path {}", path.display())))?
            .to_string_lossy()
            .into_owned();
        let digest_name = format!("{file_name}.corpus");
        let (digest, sha) = self.digest();
        let mut meta = Meta::default();
        meta.set("kind", KIND_PRETRAIN);
        meta.set("step", self.step);
        meta.set("corpus_digest", &digest_name);
        meta.set("corpus_sha256", &sha);
        meta.set("adam_t", self.opt.t.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
        for (name, q) in [("queue_s", &self.queue_s), ("queue_p", &self.queue_p)] {
            let (parts, buf) = q.to_parts();
            meta.set(name, parts.map(|v| v.to_string()).join(","));
            ck.put_tensor(name, buf);
        }
        meta.write(&mut ck);
        ck.put_params("student", &self.student);
        ck.put_params("teacher", &self.teacher);
        for (prefix, moments) in [("adam_m", &self.opt.m), ("adam_v", &self.opt.v)] {
            for (id, name, _) in self.student.iter() {
                ck.put_tensor(format!("{prefix}/{name}"), moments[id.index()].clone());
            }
        }
        let digest_path = path.with_file_name(&digest_name);
        write_atomic(&digest_path, digest.as_bytes()).map_err(|e| SpmmError::io(&digest_path, e))?;
        ck.save(path)?;
        Ok(())
    }

    /// Restores a saved run; `molecules` must be the corpus it was trained on.
    pub fn resume(path: &Path, molecules: Vec<Molecule>) -> Result<Pretrainer, SpmmError> {
        let ck = Checkpoint::load(path)?;
        let assets = Assets::read(&ck)?;
        let meta = Meta::read(&ck)?;
        let mut p = Pretrainer::new(assets, molecules)?;
        let (_, sha) = p.digest();
        if meta.get("corpus_sha256") != Some(sha.as_str()) {
            return Err(SpmmError::Data("corpus differs from the one the checkpoint was trained on".into()));
        }
        ck.load_params("student", &mut p.student)?;
        ck.load_params("teacher", &mut p.teacher)?;
        let mut moments = p.student.clone();
        for (prefix, dst) in [("adam_m", 0), ("adam_v", 1)] {
            ck.load_params(prefix, &mut moments)?;
            let target = if dst == 0 { &mut p.opt.m } else { &mut p.opt.v };
            for (id, _, t) in moments.iter() {
                target[id.index()] = t.clone();
            }
        }
        let t: Vec<u64> = meta
            .require("adam_t")?
            .split(',')
            .map(|s| s.parse().map_err(|_| SpmmError::Data("bad adam_t".into())))
            .collect::<Result<_, _>>()?;
        if t.len() != p.opt.t.len() {
            return Err(SpmmError::Data("optimizer state does not match the model".into()));
        }
        p.opt.t = t;
        for name in ["queue_s", "queue_p"] {
            let parts: Vec<usize> = meta
                .require(name)?
                .split(',')
                .map(|s| s.parse().map_err(|_| SpmmError::Data(format!("bad {name} metadata"))))
                .collect::<Result<_, _>>()?;
            let parts: [usize; 4] = parts
                .try_into()
                .map_err(|_| SpmmError::Data(format!("bad {name} metadata")))?;
            let q = FeatureQueue::from_parts(parts, ck.tensor(name)?.clone())
                .ok_or_else(|| SpmmError::Data(format!("inconsistent {name}")))?;
            if name == "queue_s" {
                p.queue_s = q;
            } else {
                p.queue_p = q;
            }
        }
        p.step = meta.parse_num("step")?;
        Ok(p)
    }
}

pub(crate) fn adam_config(weight_decay: f64) -> AdamWConfig {
    AdamWConfig {
        weight_decay,
        ..AdamWConfig::default()
    }
}

/// Convenience: fit everything for a corpus of SMILES strings.
pub fn prepare_assets(
    config: &RunConfig,
    smiles: &[String],
    vocab: Vocab,
    spec: PropertySpec,
    ingested: Option<&spmm_chem::propcalc::IngestedTable>,
) -> Result<(Assets, Vec<Molecule>, Vec<(usize, String)>), SpmmError> {
    let (rows, _) = crate::data::raw_properties(smiles, &spec, ingested);
    let raw: Vec<Vec<Option<f64>>> = rows.into_iter().map(|(_, _, r)| r).collect();
    let normalizer = Normalizer::fit(&raw)?;
    let corpus = crate::data::build_corpus(smiles, &spec, ingested, &vocab, &normalizer, config.model.max_len);
    Ok((
        Assets {
            config: config.clone(),
            vocab,
            spec,
            normalizer,
        },
        corpus.molecules,
        corpus.skipped,
    ))
}
