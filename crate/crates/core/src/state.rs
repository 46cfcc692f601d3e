//! What every checkpoint carries besides parameters: configuration,
//! vocabulary, property spec, normalizer and free-form metadata.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use spmm_chem::{Normalizer, PropertySpec, Vocab};
use spmm_nn::{Checkpoint, ParamStore};

use crate::config::RunConfig;
use crate::error::SpmmError;
use crate::model::{ModelDims, Spmm, TaskHead};

#[derive(Debug, Clone)]
pub struct Assets {
    pub config: RunConfig,
    pub vocab: Vocab,
    pub spec: PropertySpec,
    pub normalizer: Normalizer,
}

impl Assets {
    pub fn dims(&self) -> ModelDims {
        ModelDims::from_config(&self.config, self.vocab.len(), self.spec.len())
    }

    pub fn build_model(&self, store: &mut ParamStore) -> Spmm {
        Spmm::build(
            store,
            self.dims(),
            self.config.model.init_std,
            self.config.pretrain.temperature,
            self.config.run.seed,
        )
    }

    pub fn write(&self, ck: &mut Checkpoint) {
        ck.put_text("config", &self.config.to_string());
        ck.put_text("vocab", &self.vocab.to_file_string());
        ck.put_text("propspec", &self.spec.to_file_string());
        ck.put_text("normalizer", &self.normalizer.to_file_string(&self.spec));
    }

    pub fn read(ck: &Checkpoint) -> Result<Assets, SpmmError> {
        let config = RunConfig::parse(ck.text("config")?)?;
        let vocab = Vocab::from_file_string(ck.text("vocab")?)?;
        let spec = PropertySpec::from_file_string(ck.text("propspec")?)?;
        let (norm_spec, normalizer) = Normalizer::from_file_string(ck.text("normalizer")?)?;
        if norm_spec.names() != spec.names() {
            return Err(SpmmError::Data("normalizer and property spec disagree".into()));
        }
        Ok(Assets {
            config,
            vocab,
            spec,
            normalizer,
        })
    }
}

/// Ordered `key=value` metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Meta(pub BTreeMap<String, String>);

impl Meta {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn require(&self, key: &str) -> Result<&str, SpmmError> {
        self.get(key)
            .ok_or_else(|| SpmmError::Data(format!("checkpoint metadata lacks `{key}`")))
    }

    pub fn parse_num<T: std::str::FromStr>(&self, key: &str) -> Result<T, SpmmError> {
        self.require(key)?
            .parse()
            .map_err(|_| SpmmError::Data(format!("checkpoint metadata `{key}` is malformed")))
    }

    pub fn write(&self, ck: &mut Checkpoint) {
        let text: String = self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        ck.put_text("meta", &text);
    }

    pub fn read(ck: &Checkpoint) -> Result<Meta, SpmmError> {
        let mut m = Meta::default();
        for line in ck.text("meta")?.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| SpmmError::Data(format!("bad metadata line `{line}`")))?;
            m.set(k, v);
        }
        Ok(m)
    }
}

pub const KIND_PRETRAIN: &str = "pretrain";
pub const KIND_FINETUNE: &str = "finetune";
pub const KIND_REACTION: &str = "reaction";

/// A model restored for inference or further training.
#[derive(Debug, Clone)]
pub struct LoadedModel {
    pub assets: Assets,
    pub meta: Meta,
    pub model: Spmm,
    pub params: ParamStore,
    pub head: Option<TaskHead>,
    pub path: PathBuf,
}

impl LoadedModel {
    pub fn kind(&self) -> &str {
        self.meta.get("kind").unwrap_or(KIND_PRETRAIN)
    }

    /// Path of the corpus digest sidecar named in the metadata.
    pub fn digest_path(&self) -> Option<PathBuf> {
        let name = self.meta.get("corpus_digest")?;
        Some(self.path.parent().unwrap_or(Path::new(".")).join(name))
    }
}

pub fn load_model(path: &Path) -> Result<LoadedModel, SpmmError> {
    if !path.exists() {
        return Err(SpmmError::Data(format!("checkpoint {} not found", path.display())));
    }
    let ck = Checkpoint::load(path)?;
    let assets = Assets::read(&ck)?;
    let meta = Meta::read(&ck)?;
    let mut params = ParamStore::new();
    let model = assets.build_model(&mut params);
    let head = match meta.get("task_arity") {
        Some(_) => {
            let arity = meta.parse_num("task_arity")?;
            let d = assets.config.model.d_model;
            Some(TaskHead::build(&mut params, d, assets.config.head_hidden(), arity, assets.config.model.init_std, 0))
        }
        None => None,
    };
    ck.load_params("student", &mut params)?;
    Ok(LoadedModel {
        assets,
        meta,
        model,
        params,
        head,
        path: path.to_path_buf(),
    })
}
