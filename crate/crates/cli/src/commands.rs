use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use serde_json::{json, Value};
use spmm_chem::molgraph::canonicalize;
use spmm_chem::propcalc::{ingest_properties, IngestedTable};
use spmm_chem::{parse_smiles, PropertySpec, PropertyVector, Vocab};
use spmm_core::data::{build_corpus, read_digest, read_smiles_lines};
use spmm_core::finetune::{
    read_label_csv, read_reaction_csv, same_molecule, save_reaction, finetune_head, train_reaction, HeadModel,
    LabeledSet, ReactionPair, SealedSplit, TaskKind, TrainSettings,
};
use spmm_core::inference::{
    parse_pv_conditioning, score_generation, Conditioning, DecodeMode, GenerationRecord, Runner,
};
use spmm_core::pretrain::{prepare_assets, Pretrainer};
use spmm_core::state::{KIND_FINETUNE, KIND_PRETRAIN, KIND_REACTION};
use spmm_core::{load_model, stream_rng, Assets, LoadedModel, RunConfig, TAG_GENERATE};
use spmm_nn::{Checkpoint, ParamStore};

use crate::{emit, plotdata, read_text, CliError, CliResult, Common};

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// `--flag` value, else the configured path, else a config error.
fn pick_path(flag: &Option<PathBuf>, configured: &str, what: &str) -> CliResult<PathBuf> {
    match flag {
        Some(p) => Ok(p.clone()),
        None if !configured.is_empty() => Ok(PathBuf::from(configured)),
        None => Err(CliError::config(format!("no {what} given (flag or [paths] entry)"), None)),
    }
}

fn spec_from_config(cfg: &RunConfig) -> CliResult<PropertySpec> {
    let names = cfg.properties.names.trim();
    if names == "builtin" {
        return Ok(PropertySpec::builtin());
    }
    let list: Vec<&str> = names.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    PropertySpec::from_names(&list).map_err(|e| CliError::config(e.to_string(), Some(names)))
}

fn load(path: &Path) -> CliResult<LoadedModel> {
    load_model(path).map_err(|e| CliError::from(e).at(display(path)))
}

/// The checkpoint's configuration with user overrides; model shape and
/// property set are fixed by the checkpoint.
fn downstream_config(common: &Common, loaded: &LoadedModel) -> CliResult<RunConfig> {
    let base = loaded.assets.config.clone();
    let cfg = common.resolve(base.clone())?;
    if cfg.model != base.model || cfg.properties.names != base.properties.names {
        return Err(CliError::config(
            "model dimensions and property names are fixed by the checkpoint",
            Some(&display(&loaded.path)),
        ));
    }
    Ok(cfg)
}

fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("record serializes"));
        out.push('\n');
    }
    out
}

fn smiles_inputs(inline: &[String], file: &Option<PathBuf>) -> CliResult<Vec<String>> {
    let mut all = inline.to_vec();
    if let Some(path) = file {
        all.extend(read_smiles_lines(&read_text(path)?));
    }
    if all.is_empty() {
        return Err(CliError::config("no input SMILES (use --smiles or --in)", None));
    }
    Ok(all)
}

// ------------------------------------------------------------ tokenizer

#[derive(Debug, Args)]
pub struct TrainTokenizer {
    #[command(flatten)]
    common: Common,
    /// SMILES file, one molecule per line.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Vocabulary size, specials included.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl TrainTokenizer {
    pub fn run(self) -> CliResult<()> {
        let mut cfg = self.common.resolve(RunConfig::default())?;
        if let Some(b) = self.budget {
            cfg.tokenizer.budget = b;
        }
        let path = pick_path(&self.corpus, &cfg.paths.corpus, "corpus")?;
        let lines = read_smiles_lines(&read_text(&path)?);
        let valid: Vec<&String> = lines.iter().filter(|s| parse_smiles(s).is_ok()).collect();
        let vocab =
            Vocab::train(&valid, cfg.tokenizer.budget).map_err(|e| CliError::data(e.to_string(), Some(&display(&path))))?;
        let summary = json!({
            "vocab_size": vocab.len(),
            "merges": vocab.merges().len(),
            "molecules": valid.len(),
            "skipped": lines.len() - valid.len(),
        });
        emit(self.out.as_deref(), &vocab.to_file_string(), Some(summary))
    }
}

// ------------------------------------------------------------ pretrain

#[derive(Debug, Args)]
pub struct Pretrain {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// CSV of extra property columns keyed by SMILES.
    #[arg(long)]
    properties: Option<PathBuf>,
    /// Vocabulary file; trained on the corpus when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Length of the learning-rate schedule.
    #[arg(long)]
    steps: Option<u64>,
    /// Stop after this step without changing the schedule.
    #[arg(long)]
    until: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// JSON-lines loss log; stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Continue a saved run on the same corpus.
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl Pretrain {
    pub fn run(self) -> CliResult<()> {
        let mut cfg = self.common.resolve(RunConfig::default())?;
        if let Some(s) = self.steps {
            cfg.pretrain.steps = s;
        }
        if let Some(b) = self.batch {
            cfg.pretrain.batch = b;
        }
        cfg.validate().map_err(|e| CliError::config(e.to_string(), None))?;
        let corpus_path = pick_path(&self.corpus, &cfg.paths.corpus, "corpus")?;
        let smiles = read_smiles_lines(&read_text(&corpus_path)?);
        let prop_path = self
            .properties
            .clone()
            .or_else(|| (!cfg.paths.properties.is_empty()).then(|| PathBuf::from(&cfg.paths.properties)));

        let mut trainer = match &self.resume {
            Some(ck_path) => {
                let ck = Checkpoint::load(ck_path).map_err(|e| CliError::from(spmm_core::SpmmError::from(e)).at(display(ck_path)))?;
                let assets = Assets::read(&ck)?;
                let ingested = read_ingested(prop_path.as_deref(), &assets.spec)?;
                let corpus = build_corpus(
                    &smiles,
                    &assets.spec,
                    ingested.as_ref(),
                    &assets.vocab,
                    &assets.normalizer,
                    assets.config.model.max_len,
                );
                let mut p = Pretrainer::resume(ck_path, corpus.molecules).map_err(|e| CliError::from(e).at(display(ck_path)))?;
                if let Some(s) = self.steps {
                    p.assets.config.pretrain.steps = s;
                }
                p
            }
            None => {
                let spec = spec_from_config(&cfg)?;
                let ingested = read_ingested(prop_path.as_deref(), &spec)?;
                let vocab = match self
                    .vocab
                    .clone()
                    .or_else(|| (!cfg.paths.vocab.is_empty()).then(|| PathBuf::from(&cfg.paths.vocab)))
                {
                    Some(p) => Vocab::from_file_string(&read_text(&p)?)
                        .map_err(|e| CliError::data(e.to_string(), Some(&display(&p))))?,
                    None => {
                        let valid: Vec<&String> = smiles.iter().filter(|s| parse_smiles(s).is_ok()).collect();
                        Vocab::train(&valid, cfg.tokenizer.budget)
                            .map_err(|e| CliError::data(e.to_string(), Some(&display(&corpus_path))))?
                    }
                };
                let (assets, mols, _) = prepare_assets(&cfg, &smiles, vocab, spec, ingested.as_ref())
                    .map_err(|e| CliError::from(e).at(display(&corpus_path)))?;
                Pretrainer::new(assets, mols).map_err(|e| CliError::from(e).at(display(&corpus_path)))?
            }
        };

        let total = trainer.config().pretrain.steps.min(self.until.unwrap_or(u64::MAX));
        let every = trainer.config().pretrain.checkpoint_every;
        let start = trainer.step;
        let mut log = String::new();
        while trainer.step < total {
            let r = trainer.train_step()?;
            let line = r.to_json();
            if self.log.is_none() {
                println!("{line}");
            }
            log.push_str(&line);
            log.push('\n');
            if every > 0 && trainer.step % every == 0 && trainer.step < total {
                trainer.save(&self.out)?;
                if let Some(p) = &self.log {
                    crate::write_out(p, &log)?;
                }
            }
        }
        trainer.save(&self.out)?;
        if let Some(p) = &self.log {
            crate::write_out(p, &log)?;
            println!(
                "{}",
                json!({
                    "steps": trainer.step - start,
                    "step": trainer.step,
                    "molecules": trainer.molecules.len(),
                    "checkpoint": display(&self.out),
                })
            );
        }
        Ok(())
    }
}

fn read_ingested(path: Option<&Path>, spec: &PropertySpec) -> CliResult<Option<IngestedTable>> {
    let needs = (0..spec.len()).any(|i| spec.source(i) != spmm_chem::propcalc::PropertySource::Builtin);
    match path {
        Some(p) => {
            let table = ingest_properties(&read_text(p)?, Some(spec))
                .map_err(|e| CliError::data(e.to_string(), Some(&display(p))))?;
            Ok(Some(table))
        }
        None if needs => Err(CliError::config("non-builtin properties need a --properties CSV", None)),
        None => Ok(None),
    }
}

// ------------------------------------------------------------ generate

#[derive(Debug, Args)]
pub struct Generate {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    /// Conditioning, e.g. `MW=78,#atom=12`; all properties unknown when absent.
    #[arg(long)]
    pv: Option<String>,
    /// Leave properties not named in --pv unknown.
    #[arg(long)]
    mask_others: bool,
    #[arg(long)]
    n: Option<usize>,
    /// `greedy` or `stochastic`.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct GenerationLine {
    index: usize,
    #[serde(flatten)]
    record: GenerationRecord,
    conditioning: BTreeMap<String, Option<f64>>,
}

fn conditioning_map(spec: &PropertySpec, pv: &PropertyVector) -> BTreeMap<String, Option<f64>> {
    spec.names()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), pv.known[i].then_some(pv.raw[i])))
        .collect()
}

impl Generate {
    pub fn run(self) -> CliResult<()> {
        let loaded = load(&self.model)?;
        let mut cfg = downstream_config(&self.common, &loaded)?;
        let g = &mut cfg.generate;
        if let Some(n) = self.n {
            g.n = n;
        }
        if let Some(m) = &self.mode {
            g.mode = m.clone();
        }
        if let Some(t) = self.temperature {
            g.temperature = t;
        }
        if let Some(l) = self.max_len {
            g.max_len = l;
        }
        cfg.validate().map_err(|e| CliError::config(e.to_string(), None))?;
        let mode = DecodeMode::parse(&cfg.generate.mode, cfg.generate.temperature)
            .map_err(|e| CliError::config(e.to_string(), Some(&cfg.generate.mode)))?;
        let a = &loaded.assets;
        let pv = match &self.pv {
            Some(text) => parse_pv_conditioning(text, &a.spec, &a.normalizer, self.mask_others)
                .map_err(|e| CliError::from(e).at(text))?,
            None => PropertyVector::unknown(a.spec.len()),
        };
        let runner = Runner {
            model: &loaded.model,
            params: &loaded.params,
            vocab: &a.vocab,
        };
        let mut rng = stream_rng(cfg.run.seed, TAG_GENERATE, 0);
        let cond = conditioning_map(&a.spec, &pv);
        let mut lines = Vec::with_capacity(cfg.generate.n);
        let mut remaining = cfg.generate.n;
        while remaining > 0 {
            let chunk = remaining.min(64);
            let out = runner.generate_smiles(&vec![pv.clone(); chunk], mode, cfg.generate.max_len, &mut rng)?;
            for d in out {
                lines.push(GenerationLine {
                    index: lines.len(),
                    record: GenerationRecord::new(&d.smiles, d.overflow),
                    conditioning: cond.clone(),
                });
            }
            remaining -= chunk;
        }
        let valid = lines.iter().filter(|l| l.record.valid).count();
        let overflow = lines.iter().filter(|l| l.record.overflow).count();
        let summary = json!({"n": lines.len(), "valid": valid, "overflow": overflow});
        emit(self.out.as_deref(), &jsonl(&lines), Some(summary))
    }
}

// ------------------------------------------------------------ predict-pv

#[derive(Debug, Args)]
pub struct PredictPv {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    /// SMILES to annotate; repeatable.
    #[arg(long)]
    smiles: Vec<String>,
    /// SMILES file, one molecule per line.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct PredictionLine {
    smiles: String,
    predicted: BTreeMap<String, f64>,
    actual: BTreeMap<String, Option<f64>>,
}

impl PredictPv {
    pub fn run(self) -> CliResult<()> {
        let loaded = load(&self.model)?;
        downstream_config(&self.common, &loaded)?;
        let smiles = smiles_inputs(&self.smiles, &self.input)?;
        let a = &loaded.assets;
        let runner = Runner {
            model: &loaded.model,
            params: &loaded.params,
            vocab: &a.vocab,
        };
        let mut lines = Vec::with_capacity(smiles.len());
        for chunk in smiles.chunks(64) {
            let preds = runner.generate_pv(chunk)?;
            for (s, z) in chunk.iter().zip(preds) {
                let graph = parse_smiles(s).map_err(|source| spmm_core::SpmmError::InvalidSmiles {
                    smiles: s.clone(),
                    source,
                })?;
                let actual = a.spec.raw_values(&graph, None);
                lines.push(PredictionLine {
                    smiles: s.clone(),
                    predicted: a
                        .spec
                        .names()
                        .iter()
                        .enumerate()
                        .map(|(i, n)| (n.clone(), a.normalizer.denormalize(i, z[i])))
                        .collect(),
                    actual: a.spec.names().iter().cloned().zip(actual).collect(),
                });
            }
        }
        let summary = json!({"n": lines.len()});
        emit(self.out.as_deref(), &jsonl(&lines), Some(summary))
    }
}

// ------------------------------------------------------------ finetune

#[derive(Debug, Args)]
pub struct Finetune {
    #[command(flatten)]
    common: Common,
    /// Pre-trained checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// CSV `smiles,label1[,label2...]`.
    #[arg(long)]
    data: PathBuf,
    /// `regression` or `classification`.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    /// Fine-tuned checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    /// Where to write the JSON report (also printed to stdout).
    #[arg(long)]
    report: Option<PathBuf>,
}

/// Drops rows whose SMILES do not parse or do not fit the vocabulary and
/// checks classification labels.
fn usable_rows(set: LabeledSet, vocab: &Vocab, max_len: usize, kind: TaskKind) -> CliResult<(LabeledSet, usize)> {
    let mut kept = LabeledSet::default();
    let mut skipped = 0;
    for (i, (s, l)) in set.smiles.into_iter().zip(set.labels).enumerate() {
        if kind == TaskKind::Classification {
            if let Some(bad) = l.iter().flatten().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(CliError::data(
                    format!("classification labels must be 0 or 1, found {bad}"),
                    Some(&format!("row {}", i + 2)),
                ));
            }
        }
        let ok = parse_smiles(&s).is_ok() && vocab.tokenize(&s).is_ok_and(|t| t.len() <= max_len);
        if ok {
            kept.smiles.push(s);
            kept.labels.push(l);
        } else {
            skipped += 1;
        }
    }
    Ok((kept, skipped))
}

impl Finetune {
    pub fn run(self) -> CliResult<()> {
        let loaded = load(&self.model)?;
        if loaded.kind() != KIND_PRETRAIN {
            return Err(CliError::data(
                format!("expected a pre-trained checkpoint, found kind `{}`", loaded.kind()),
                Some(&display(&self.model)),
            ));
        }
        let mut cfg = downstream_config(&self.common, &loaded)?;
        if let Some(t) = &self.task {
            cfg.finetune.task = t.clone();
        }
        if let Some(e) = self.epochs {
            cfg.finetune.epochs = e;
        }
        if let Some(b) = self.batch {
            cfg.finetune.batch = b;
        }
        cfg.validate().map_err(|e| CliError::config(e.to_string(), None))?;
        let kind = TaskKind::parse(&cfg.finetune.task)?;
        let (tasks, set) =
            read_label_csv(&read_text(&self.data)?).map_err(|e| CliError::from(e).at(display(&self.data)))?;
        let (set, skipped) = usable_rows(set, &loaded.assets.vocab, cfg.model.max_len, kind)?;
        let split = SealedSplit::random(&set, cfg.run.seed).map_err(|e| CliError::from(e).at(display(&self.data)))?;
        let head = HeadModel::new(&loaded.model, &loaded.params, &cfg, kind, tasks);
        let (trained, report) = finetune_head(head, &loaded.assets.vocab, split, &TrainSettings::finetune(&cfg))?;
        let mut assets = loaded.assets.clone();
        assets.config = cfg;
        trained.save(&assets, &self.out)?;
        let mut value = serde_json::to_value(&report).expect("report serializes");
        value["skipped"] = json!(skipped);
        value["checkpoint"] = json!(display(&self.out));
        if let Some(p) = &self.report {
            crate::write_out(p, &format!("{value}\n"))?;
        }
        println!("{value}");
        Ok(())
    }
}

// ------------------------------------------------------------ reactions

#[derive(Debug, Args)]
pub struct ReactTrain {
    #[command(flatten)]
    common: Common,
    /// CSV `reactants,product`.
    #[arg(long)]
    data: PathBuf,
    /// Pre-trained checkpoint to start from; a fresh model otherwise.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Vocabulary for a fresh model; trained on the reactions when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// `forward` or `retro`.
    #[arg(long)]
    direction: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

impl ReactTrain {
    pub fn run(self) -> CliResult<()> {
        let (mut cfg, base) = match &self.model {
            Some(p) => {
                let loaded = load(p)?;
                if loaded.kind() != KIND_PRETRAIN {
                    return Err(CliError::data(
                        format!("expected a pre-trained checkpoint, found kind `{}`", loaded.kind()),
                        Some(&display(p)),
                    ));
                }
                (downstream_config(&self.common, &loaded)?, Some(loaded))
            }
            None => (self.common.resolve(RunConfig::default())?, None),
        };
        if let Some(d) = &self.direction {
            cfg.reaction.direction = d.clone();
        }
        if let Some(e) = self.epochs {
            cfg.reaction.epochs = e;
        }
        cfg.validate().map_err(|e| CliError::config(e.to_string(), None))?;
        let retro = cfg.reaction.direction == "retro";
        let (pairs, mut skipped) =
            read_reaction_csv(&read_text(&self.data)?, retro).map_err(|e| CliError::from(e).at(display(&self.data)))?;
        let (assets, mut params) = match base {
            Some(loaded) => {
                let mut assets = loaded.assets;
                assets.config = cfg.clone();
                (assets, loaded.params)
            }
            None => {
                let all: Vec<String> = pairs.iter().flat_map(|p| [p.source.clone(), p.target.clone()]).collect();
                let vocab = match &self.vocab {
                    Some(p) => Vocab::from_file_string(&read_text(p)?)
                        .map_err(|e| CliError::data(e.to_string(), Some(&display(p))))?,
                    None => Vocab::train(&all, cfg.tokenizer.budget)
                        .map_err(|e| CliError::data(e.to_string(), Some(&display(&self.data))))?,
                };
                if cfg.properties.names.trim() != "builtin" {
                    return Err(CliError::config("a fresh reaction model uses builtin properties only", None));
                }
                let (assets, _, _) = prepare_assets(&cfg, &all, vocab, PropertySpec::builtin(), None)
                    .map_err(|e| CliError::from(e).at(display(&self.data)))?;
                let mut params = ParamStore::new();
                assets.build_model(&mut params);
                (assets, params)
            }
        };
        let model = {
            let mut scratch = ParamStore::new();
            assets.build_model(&mut scratch)
        };
        let fits = |s: &str| assets.vocab.tokenize(s).is_ok_and(|t| t.len() <= cfg.model.max_len);
        let usable: Vec<ReactionPair> = pairs
            .into_iter()
            .filter(|p| {
                let ok = fits(&p.source) && fits(&p.target);
                if !ok {
                    skipped += 1;
                }
                ok
            })
            .collect();
        let history = train_reaction(
            &model,
            &mut params,
            &assets.vocab,
            &usable,
            cfg.reaction.augment,
            &TrainSettings::reaction(&cfg),
        )?;
        save_reaction(&assets, &params, &cfg.reaction.direction, &self.out)?;
        println!(
            "{}",
            json!({
                "pairs": usable.len(),
                "skipped": skipped,
                "direction": cfg.reaction.direction,
                "epoch_losses": history,
                "checkpoint": display(&self.out),
            })
        );
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct ReactPredict {
    #[command(flatten)]
    common: Common,
    /// Reaction checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Source SMILES; repeatable.
    #[arg(long)]
    source: Vec<String>,
    /// CSV `reactants,product` to predict and score.
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Candidates per source.
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// Beam width; the configured width when absent, at least k.
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
struct ReactionLine {
    source: String,
    reference: Option<String>,
    candidates: Vec<spmm_core::finetune::Candidate>,
    /// 1-based rank of the reference among the candidates.
    rank: Option<usize>,
}

impl ReactPredict {
    pub fn run(self) -> CliResult<()> {
        let loaded = load(&self.model)?;
        if loaded.kind() != KIND_REACTION {
            return Err(CliError::data(
                format!("expected a reaction checkpoint, found kind `{}`", loaded.kind()),
                Some(&display(&self.model)),
            ));
        }
        let cfg = downstream_config(&self.common, &loaded)?;
        if self.k == 0 {
            return Err(CliError::config("--k must be positive", None));
        }
        let retro = loaded.meta.get("direction") == Some("retro");
        let mut jobs: Vec<(String, Option<String>)> = self.source.iter().map(|s| (s.clone(), None)).collect();
        if let Some(p) = &self.input {
            let (pairs, _) = read_reaction_csv(&read_text(p)?, retro).map_err(|e| CliError::from(e).at(display(p)))?;
            jobs.extend(pairs.into_iter().map(|p| (p.source, Some(p.target))));
        }
        if jobs.is_empty() {
            return Err(CliError::config("no sources (use --source or --in)", None));
        }
        let width = self.beam.unwrap_or(cfg.reaction.beam).max(self.k);
        let max_len = self.max_len.unwrap_or(cfg.model.max_len);
        let runner = Runner {
            model: &loaded.model,
            params: &loaded.params,
            vocab: &loaded.assets.vocab,
        };
        let mut lines = Vec::with_capacity(jobs.len());
        for (source, reference) in jobs {
            let candidates = runner
                .predict_reaction(&source, self.k, width, max_len)
                .map_err(|e| CliError::from(e).at(&source))?;
            let rank = reference
                .as_ref()
                .and_then(|r| candidates.iter().position(|c| same_molecule(&c.smiles, r)).map(|i| i + 1));
            lines.push(ReactionLine {
                source,
                reference,
                candidates,
                rank,
            });
        }
        let scored: Vec<&ReactionLine> = lines.iter().filter(|l| l.reference.is_some()).collect();
        let frac = |k: usize| {
            (!scored.is_empty())
                .then(|| scored.iter().filter(|l| l.rank.is_some_and(|r| r <= k)).count() as f64 / scored.len() as f64)
        };
        let summary = json!({
            "n": lines.len(),
            "scored": scored.len(),
            "top1": frac(1),
            "topk": frac(self.k),
            "k": self.k,
        });
        emit(self.out.as_deref(), &jsonl(&lines), Some(summary))
    }
}

// ------------------------------------------------------------ score

#[derive(Debug, Args)]
pub struct Score {
    #[command(flatten)]
    common: Common,
    /// Generation JSON lines (or plain SMILES lines).
    #[arg(long = "in")]
    input: PathBuf,
    /// Reference SMILES for novelty.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Corpus digest file for novelty.
    #[arg(long)]
    digest: Option<PathBuf>,
    /// Checkpoint for property error and, without --corpus/--digest, its
    /// corpus digest.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

struct ScoreInput {
    smiles: Vec<String>,
    conditioning: Option<BTreeMap<String, Option<f64>>>,
}

fn read_generation_lines(text: &str) -> CliResult<ScoreInput> {
    let mut smiles = Vec::new();
    let mut conditioning: Option<BTreeMap<String, Option<f64>>> = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !line.starts_with('{') {
            smiles.push(line.split_whitespace().next().unwrap_or("").to_string());
            continue;
        }
        let at = format!("line {}", i + 1);
        let v: Value = serde_json::from_str(line).map_err(|e| CliError::data(format!("schema error: {e}"), Some(&at)))?;
        let s = v
            .get("smiles")
            .and_then(Value::as_str)
            .ok_or_else(|| CliError::data("schema error: `smiles` must be a string", Some(&at)))?;
        smiles.push(s.to_string());
        if let Some(c) = v.get("conditioning") {
            let map: BTreeMap<String, Option<f64>> = serde_json::from_value(c.clone())
                .map_err(|e| CliError::data(format!("schema error: {e}"), Some(&at)))?;
            match &conditioning {
                Some(prev) if *prev != map => {
                    return Err(CliError::data("records carry different conditioning; score them separately", Some(&at)))
                }
                _ => conditioning = Some(map),
            }
        }
    }
    Ok(ScoreInput { smiles, conditioning })
}

impl Score {
    pub fn run(self) -> CliResult<()> {
        self.common.resolve(RunConfig::default())?;
        let input = read_generation_lines(&read_text(&self.input)?).map_err(|e| e.at(display(&self.input)))?;
        let loaded = self.model.as_deref().map(load).transpose()?;
        let corpus: Option<BTreeSet<String>> = if let Some(p) = &self.corpus {
            Some(
                read_smiles_lines(&read_text(p)?)
                    .iter()
                    .filter_map(|s| parse_smiles(s).ok().map(|g| canonicalize(&g)))
                    .collect(),
            )
        } else if let Some(p) = &self.digest {
            Some(read_digest(&read_text(p)?, None)?)
        } else if let Some(m) = &loaded {
            match m.digest_path() {
                Some(p) => Some(
                    read_digest(&read_text(&p)?, m.meta.get("corpus_sha256"))
                        .map_err(|e| CliError::from(e).at(display(&p)))?,
                ),
                None => None,
            }
        } else {
            None
        };
        let pv = match (&loaded, &input.conditioning) {
            (Some(m), Some(c)) => {
                let spec = &m.assets.spec;
                let raw: Vec<Option<f64>> = spec.names().iter().map(|n| c.get(n).copied().flatten()).collect();
                Some(m.assets.normalizer.vector(&raw))
            }
            _ => None,
        };
        let cond = match (&loaded, &pv) {
            (Some(m), Some(pv)) => Some(Conditioning {
                pv,
                spec: &m.assets.spec,
                normalizer: &m.assets.normalizer,
            }),
            _ => None,
        };
        let report = score_generation(&input.smiles, cond.as_ref(), corpus.as_ref());
        let text = format!("{}\n", serde_json::to_string(&report).expect("report serializes"));
        emit(self.out.as_deref(), &text, None)?;
        if self.out.is_some() {
            print!("{text}");
        }
        Ok(())
    }
}

// ------------------------------------------------------------ attention

#[derive(Debug, Args)]
pub struct Attention {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    smiles: String,
    /// Property values; the molecule's own computed values when absent.
    #[arg(long)]
    pv: Option<String>,
    #[arg(long)]
    mask_others: bool,
    /// Drop the [CLS] and [SEP] columns and renormalize.
    #[arg(long)]
    exclude_specials: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Attention {
    pub fn run(self) -> CliResult<()> {
        let loaded = load(&self.model)?;
        downstream_config(&self.common, &loaded)?;
        let a = &loaded.assets;
        let pv = match &self.pv {
            Some(text) => parse_pv_conditioning(text, &a.spec, &a.normalizer, self.mask_others)
                .map_err(|e| CliError::from(e).at(text))?,
            None => {
                let g = parse_smiles(&self.smiles).map_err(|source| spmm_core::SpmmError::InvalidSmiles {
                    smiles: self.smiles.clone(),
                    source,
                })?;
                a.normalizer.vector(&a.spec.raw_values(&g, None))
            }
        };
        let runner = Runner {
            model: &loaded.model,
            params: &loaded.params,
            vocab: &a.vocab,
        };
        let map = runner
            .dump_attention(&a.spec, &self.smiles, &pv, self.exclude_specials)
            .map_err(|e| CliError::from(e).at(&self.smiles))?;
        let summary = json!({"properties": map.properties.len(), "tokens": map.tokens.len()});
        emit(self.out.as_deref(), &map.to_csv(), Some(summary))
    }
}

// ------------------------------------------------------------ plot data

#[derive(Debug, Args)]
pub struct ExportPlotdata {
    #[command(flatten)]
    common: Common,
    /// Output of `generate` or `predict-pv`.
    #[arg(long = "in")]
    input: PathBuf,
    /// Checkpoint whose corpus means are added as reference rows.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ExportPlotdata {
    pub fn run(self) -> CliResult<()> {
        self.common.resolve(RunConfig::default())?;
        let records = plotdata::parse_records(&read_text(&self.input)?).map_err(|e| e.at(display(&self.input)))?;
        let means: Vec<(String, f64)> = match &self.model {
            Some(p) => {
                let m = load(p)?;
                let a = &m.assets;
                a.spec
                    .names()
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (n.clone(), a.normalizer.denormalize(i, 0.0)))
                    .collect()
            }
            None => Vec::new(),
        };
        let summary = plotdata::summarize(&records);
        let info = json!({
            "records": records.len(),
            "summary": summary
                .iter()
                .map(|s| json!({"property": s.property, "n": s.n, "r2": s.r2, "rmse": s.rmse}))
                .collect::<Vec<_>>(),
        });
        emit(self.out.as_deref(), &plotdata::to_csv(&records, &means), Some(info))
    }
}

#[allow(dead_code)]
const KINDS: [&str; 3] = [KIND_PRETRAIN, KIND_FINETUNE, KIND_REACTION];
