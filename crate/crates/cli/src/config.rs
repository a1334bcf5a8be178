//! Flat key-value experiment config, read from TOML.
//!
//! Every key is optional and defaults to the desk-scale setup; see
//! `configs/desk.toml` for the documented list. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use satlearn::data::GeneratorConfig;
use satlearn::model::ModelConfig;
use satlearn::train::{Selection, TrainConfig};

use crate::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Supervised,
    PretrainFinetune,
    FewShot,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Method::Supervised,
        Method::PretrainFinetune,
        Method::FewShot,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::PretrainFinetune => "pretrain_finetune",
            Method::FewShot => "few_shot",
        }
    }

    /// Whether the method starts from the contrastively pretrained body.
    pub fn needs_pretraining(self) -> bool {
        self != Method::Supervised
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = Method::ALL.iter().map(|m| m.as_str()).collect();
                CliError::Usage(format!(
                    "unknown method `{s}`; valid methods: {}",
                    valid.join(", ")
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,

    pub data_seed: u64,
    pub num_labeled: usize,
    pub num_unlabeled: usize,
    pub num_skills_major: usize,
    pub num_skills_minor: usize,
    pub minor_traffic_share: f64,
    pub sat_ratio: f64,
    pub label_noise: f64,
    pub vocab_size: usize,
    pub max_episodes_before: usize,
    pub max_episodes_after: usize,
    pub skill_coherence: f64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub ood_skill_fraction: f64,

    pub embed_dim: usize,
    pub gru_hidden: usize,
    pub gru_layers: usize,
    pub bidirectional: bool,
    pub head_hidden: usize,
    pub context_t: usize,

    pub batch_size: usize,
    pub epochs: usize,
    pub lr_encoder: f64,
    pub lr_other: f64,
    pub lr_decay: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub body_lr_scale_finetune: f64,
    pub patience: usize,
    pub min_steps: usize,
    pub min_val_interval: usize,
    pub few_shot_epochs: usize,
    pub joint_steps: usize,
    pub selection: Selection,
    pub augment_unsup: bool,

    pub methods: Vec<Method>,
    pub n_labeled: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            out_dir: PathBuf::from("runs/desk"),
            data_seed: g.seed,
            num_labeled: g.num_labeled,
            num_unlabeled: g.num_unlabeled,
            num_skills_major: g.num_skills_major,
            num_skills_minor: g.num_skills_minor,
            minor_traffic_share: g.minor_traffic_share,
            sat_ratio: g.sat_ratio,
            label_noise: g.label_noise,
            vocab_size: g.vocab_size,
            max_episodes_before: g.max_episodes_before,
            max_episodes_after: g.max_episodes_after,
            skill_coherence: g.skill_coherence,
            train_fraction: 0.5,
            validation_fraction: 0.15,
            ood_skill_fraction: 0.2,
            embed_dim: m.embed_dim,
            gru_hidden: m.gru_hidden,
            gru_layers: m.gru_layers,
            bidirectional: m.bidirectional,
            head_hidden: m.head_hidden,
            context_t: m.context_t,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr_encoder: t.lr_encoder,
            lr_other: t.lr_other,
            lr_decay: t.lr_decay,
            alpha: t.alpha,
            lambda: t.lambda,
            body_lr_scale_finetune: t.body_lr_scale_finetune,
            patience: t.patience,
            min_steps: t.min_steps,
            min_val_interval: t.min_val_interval,
            few_shot_epochs: t.few_shot_epochs,
            joint_steps: t.joint_steps,
            selection: t.selection,
            augment_unsup: t.augment_unsup,
            methods: Method::ALL.to_vec(),
            n_labeled: vec![64, 256, 1024],
            seeds: vec![0, 1, 2, 3],
        }
    }
}

/// Keys that decide the corpus and its split.
const DATA_KEYS: &[&str] = &[
    "data_seed",
    "num_labeled",
    "num_unlabeled",
    "num_skills_major",
    "num_skills_minor",
    "minor_traffic_share",
    "sat_ratio",
    "label_noise",
    "vocab_size",
    "max_episodes_before",
    "max_episodes_after",
    "skill_coherence",
    "train_fraction",
    "validation_fraction",
    "ood_skill_fraction",
];

/// Keys that only say where to write or which cells to run.
const NON_RESULT_KEYS: &[&str] = &["out_dir", "methods", "n_labeled", "seeds"];

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Usage(m));
        if self.num_labeled == 0 || self.num_unlabeled == 0 {
            return bad("num_labeled and num_unlabeled must be positive".into());
        }
        if self.methods.is_empty() || self.n_labeled.is_empty() || self.seeds.is_empty() {
            return bad("methods, n_labeled and seeds must be nonempty".into());
        }
        if self.n_labeled.contains(&0) {
            return bad("every n_labeled entry must be positive".into());
        }
        let distinct = |n: usize, mut v: Vec<String>| {
            v.sort();
            v.dedup();
            v.len() == n
        };
        if !distinct(
            self.seeds.len(),
            self.seeds.iter().map(u64::to_string).collect(),
        ) {
            return bad("seeds must be distinct".into());
        }
        if !distinct(
            self.methods.len(),
            self.methods.iter().map(Method::to_string).collect(),
        ) || !distinct(
            self.n_labeled.len(),
            self.n_labeled.iter().map(usize::to_string).collect(),
        ) {
            return bad("methods and n_labeled must not repeat".into());
        }
        self.generator().validate()?;
        self.train(0).validate()?;
        ModelConfig {
            vocab_size: self.vocab_size,
            ..self.model(self.vocab_size, 0)
        }
        .validate()?;
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            num_skills_major: self.num_skills_major,
            num_skills_minor: self.num_skills_minor,
            minor_traffic_share: self.minor_traffic_share,
            sat_ratio: self.sat_ratio,
            label_noise: self.label_noise,
            vocab_size: self.vocab_size,
            num_labeled: self.num_labeled,
            num_unlabeled: self.num_unlabeled,
            max_episodes_before: self.max_episodes_before,
            max_episodes_after: self.max_episodes_after,
            skill_coherence: self.skill_coherence,
            seed: self.data_seed,
        }
    }

    /// Model sized to the corpus vocabulary, initialised from `seed`.
    pub fn model(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            gru_hidden: self.gru_hidden,
            gru_layers: self.gru_layers,
            bidirectional: self.bidirectional,
            head_hidden: self.head_hidden,
            context_t: self.context_t,
            seed,
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            epochs: self.epochs,
            lr_encoder: self.lr_encoder,
            lr_other: self.lr_other,
            lr_decay: self.lr_decay,
            alpha: self.alpha,
            lambda: self.lambda,
            body_lr_scale_finetune: self.body_lr_scale_finetune,
            patience: self.patience,
            seed,
            min_steps: self.min_steps,
            min_val_interval: self.min_val_interval,
            few_shot_epochs: self.few_shot_epochs,
            joint_steps: self.joint_steps,
            selection: self.selection,
            augment_unsup: self.augment_unsup,
            ..TrainConfig::default()
        }
    }

    fn hash_of(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        let map = value.as_object_mut().expect("config is an object");
        map.retain(|k, _| keep(k));
        // serde_json maps are sorted by key, so this is canonical.
        sha256_hex(value.to_string().as_bytes())
    }

    /// Identifies everything that affects a result row: data, model and
    /// training keys. Output location and the sweep grid are excluded so a
    /// grid can be extended without invalidating finished rows.
    pub fn config_hash(&self) -> String {
        self.hash_of(|k| !NON_RESULT_KEYS.contains(&k))
    }

    /// Identifies the corpus and split only.
    pub fn data_hash(&self) -> String {
        self.hash_of(|k| DATA_KEYS.contains(&k))
    }
}
