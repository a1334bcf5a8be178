//! On-disk corpus, labeled-set subsampling, trainer dispatch and
//! evaluation of one (method, n_labeled, seed) cell.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! data/vocab.txt data/labeled.jsonl data/unlabeled.jsonl data/splits.json
//! pretrain/s{seed}.{manifest,bin,json}
//! runs/{method}/n{n}_s{seed}.{manifest,bin,json}
//! results.csv summary.csv plots/*.svg
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use satlearn::data::{
    generate_corpus, read_sessions, write_sessions, DatasetSplits, Label, Session, SplitManifest,
    Vocab,
};
use satlearn::metrics::{auc_pr, auc_roc, dsat_labels, score, Split};
use satlearn::model::{HeadId, Model};
use satlearn::train::{
    contrastive_pretrain, few_shot_train, finetune, rng_stream, supervised_train, TrainReport,
};
use satlearn::ParamSet;

use crate::config::{ExperimentConfig, Method};
use crate::results::ResultRow;
use crate::{hash_line, strip_hash_line, CliError, Result};

const SUBSAMPLE_STREAM: u64 = 16;

pub fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    data_hash: String,
    manifest: SplitManifest,
}

/// Generates the corpus and split for `cfg` and writes them under
/// `out/data`. Rerunning with the same config rewrites identical files.
pub fn write_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let dir = data_dir(out);
    ensure_dir(&dir)?;
    let corpus = generate_corpus(&cfg.generator())?;
    let manifest = SplitManifest::build(
        &corpus.labeled,
        &corpus.unlabeled,
        (cfg.train_fraction, cfg.validation_fraction),
        cfg.ood_skill_fraction,
        cfg.data_seed,
    )?;
    manifest.materialize(&corpus.labeled, &corpus.unlabeled)?;

    let hash = cfg.data_hash();
    let header = hash_line("data", &hash);
    write_file(
        &dir.join("vocab.txt"),
        format!("{header}{}", corpus.vocab.to_text()).as_bytes(),
    )?;
    for (name, set) in [
        ("labeled", &corpus.labeled),
        ("unlabeled", &corpus.unlabeled),
    ] {
        let mut buf = header.clone().into_bytes();
        write_sessions(&mut buf, set)?;
        write_file(&dir.join(format!("{name}.jsonl")), &buf)?;
    }
    let split = SplitFile {
        data_hash: hash,
        manifest,
    };
    let json = serde_json::to_string_pretty(&split).map_err(satlearn::Error::from)?;
    write_file(&dir.join("splits.json"), json.as_bytes())?;
    Ok(dir)
}

fn check_hash(path: &Path, found: Option<&str>, want: &str) -> Result<()> {
    if found == Some(want) {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "{} was not generated from this config; run gen-data first",
            path.display()
        )))
    }
}

fn missing_corpus(path: &Path) -> CliError {
    CliError::Usage(format!("{} not found; run gen-data first", path.display()))
}

/// Loads the corpus written by [`write_corpus`], checking it matches `cfg`.
pub fn read_corpus(cfg: &ExperimentConfig, out: &Path) -> Result<(Vocab, DatasetSplits)> {
    let dir = data_dir(out);
    let want = cfg.data_hash();
    let vocab_path = dir.join("vocab.txt");
    if !vocab_path.exists() {
        return Err(missing_corpus(&vocab_path));
    }
    let text = read_text(&vocab_path)?;
    let (found, body) = strip_hash_line(&text, "data");
    check_hash(&vocab_path, found, &want)?;
    let vocab = Vocab::from_text(body)?;

    let mut sets = Vec::new();
    for name in ["labeled", "unlabeled"] {
        let path = dir.join(format!("{name}.jsonl"));
        let text = read_text(&path)?;
        let (found, body) = strip_hash_line(&text, "data");
        check_hash(&path, found, &want)?;
        sets.push(read_sessions(body.as_bytes(), &vocab)?);
    }
    let path = dir.join("splits.json");
    let split: SplitFile = serde_json::from_str(&read_text(&path)?)
        .map_err(|e| satlearn::Error::Format(format!("{}: {e}", path.display())))?;
    check_hash(&path, Some(&split.data_hash), &want)?;
    let splits = split.manifest.materialize(&sets[0], &sets[1])?;
    Ok((vocab, splits))
}

/// Draws `n` training sessions, keeping the label proportions of `train`
/// and at least one session of each class when both exist and `n ≥ 2`.
pub fn subsample(train: &[Session], n: usize, seed: u64) -> Result<Vec<Session>> {
    if n == 0 || n > train.len() {
        return Err(satlearn::Error::Config(format!(
            "n_labeled {n} must be between 1 and the {} available training sessions",
            train.len()
        ))
        .into());
    }
    let mut rng = rng_stream(seed, SUBSAMPLE_STREAM);
    let (mut dsat, mut sat): (Vec<usize>, Vec<usize>) =
        (0..train.len()).partition(|&i| train[i].label == Some(Label::Dsat));
    dsat.shuffle(&mut rng);
    sat.shuffle(&mut rng);
    let share = dsat.len() as f64 / train.len() as f64;
    let mut k_dsat = (share * n as f64).round() as usize;
    if n >= 2 && !dsat.is_empty() && !sat.is_empty() {
        k_dsat = k_dsat.clamp(1, n - 1);
    }
    k_dsat = k_dsat.min(dsat.len()).max(n.saturating_sub(sat.len()));
    let mut picked: Vec<usize> = dsat[..k_dsat]
        .iter()
        .chain(&sat[..n - k_dsat])
        .copied()
        .collect();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| train[i].clone()).collect())
}

/// Writes a checkpoint whose manifest records the config hash.
pub fn save_checkpoint(params: &ParamSet, stem: &Path, hash: &str) -> Result<()> {
    params.save(stem)?;
    let manifest = stem.with_extension("manifest");
    let text = read_text(&manifest)?;
    write_file(&manifest, format!("{text}# config {hash}\n").as_bytes())
}

fn checkpoint_hash(stem: &Path) -> Option<String> {
    let text = fs::read_to_string(stem.with_extension("manifest")).ok()?;
    text.lines()
        .find_map(|l| l.strip_prefix("# config "))
        .map(|h| h.trim().to_string())
}

fn write_report(path: &Path, report: &TrainReport, hash: &str) -> Result<()> {
    let mut value = serde_json::to_value(report).map_err(satlearn::Error::from)?;
    value["config_hash"] = serde_json::Value::String(hash.to_string());
    let text = serde_json::to_string_pretty(&value).map_err(satlearn::Error::from)?;
    write_file(path, text.as_bytes())
}

pub fn read_report(path: &Path) -> Result<TrainReport> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| satlearn::Error::Format(format!("{}: {e}", path.display())).into())
}

/// A loaded corpus plus the config it belongs to.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub out: PathBuf,
    pub hash: String,
    pub vocab: Vocab,
    pub splits: DatasetSplits,
}

impl Experiment {
    pub fn open(config: &ExperimentConfig, out: &Path) -> Result<Self> {
        let (vocab, splits) = read_corpus(config, out)?;
        Ok(Self {
            config: config.clone(),
            out: out.to_path_buf(),
            hash: config.config_hash(),
            vocab,
            splits,
        })
    }

    pub fn model(&self, seed: u64) -> Result<Model> {
        Ok(Model::new(self.config.model(self.vocab.len(), seed))?)
    }

    pub fn pretrain_stem(&self, seed: u64) -> PathBuf {
        self.out.join("pretrain").join(format!("s{seed}"))
    }

    pub fn run_stem(&self, method: Method, n: usize, seed: u64) -> PathBuf {
        self.out
            .join("runs")
            .join(method.as_str())
            .join(format!("n{n}_s{seed}"))
    }

    /// Contrastive pretraining for `seed`, cached on disk per seed and
    /// config hash.
    pub fn pretrained(&self, seed: u64) -> Result<ParamSet> {
        let model = self.model(seed)?;
        let template = model.init_params();
        let stem = self.pretrain_stem(seed);
        if checkpoint_hash(&stem).as_deref() == Some(self.hash.as_str()) {
            if let Ok(p) = ParamSet::load_matching(&stem, &template) {
                return Ok(p);
            }
        }
        info!("pretraining seed {seed}");
        let cfg = self.config.train(seed);
        let (params, mut report) = contrastive_pretrain(
            &model,
            &template,
            &self.splits.unsup_train,
            &self.splits.unsup_validation,
            &cfg,
        )?;
        ensure_dir(stem.parent().expect("stem has a parent"))?;
        report.checkpoint = Some(stem.display().to_string());
        write_report(&stem.with_extension("json"), &report, &self.hash)?;
        save_checkpoint(&params, &stem, &self.hash)?;
        Ok(params)
    }

    /// Trains one cell from scratch (reusing the cached pretrained body).
    pub fn train(&self, method: Method, n: usize, seed: u64) -> Result<(ParamSet, TrainReport)> {
        let train = subsample(&self.splits.train, n, seed)?;
        let val = &self.splits.validation;
        let model = self.model(seed)?;
        let cfg = self.config.train(seed);
        let (params, mut report) = match method {
            Method::Supervised => {
                supervised_train(&model, &model.init_params(), &train, val, &cfg)?
            }
            Method::PretrainFinetune => {
                finetune(&model, &self.pretrained(seed)?, &train, val, &cfg)?
            }
            Method::FewShot => {
                let body = self.pretrained(seed)?;
                few_shot_train(&model, &body, &self.splits.unsup_train, &train, val, &cfg)?
            }
        };
        report.method = method.as_str().into();
        report.n_train = train.len();
        Ok((params, report))
    }

    /// Trains a cell and writes its checkpoint and report.
    pub fn train_and_save(
        &self,
        method: Method,
        n: usize,
        seed: u64,
    ) -> Result<(ParamSet, TrainReport, PathBuf)> {
        let (params, mut report) = self.train(method, n, seed)?;
        let stem = self.run_stem(method, n, seed);
        ensure_dir(stem.parent().expect("stem has a parent"))?;
        report.checkpoint = Some(stem.display().to_string());
        save_checkpoint(&params, &stem, &self.hash)?;
        write_report(&stem.with_extension("json"), &report, &self.hash)?;
        Ok((params, report, stem))
    }

    pub fn load_run(&self, method: Method, n: usize, seed: u64) -> Result<ParamSet> {
        let stem = self.run_stem(method, n, seed);
        if checkpoint_hash(&stem).as_deref() != Some(self.hash.as_str()) {
            return Err(CliError::Usage(format!(
                "no checkpoint for {method} n={n} seed={seed} under this config; run train first"
            )));
        }
        let template = self.model(seed)?.init_params();
        Ok(ParamSet::load_matching(&stem, &template)?)
    }

    /// One row per test split; a split whose metric is undefined gets an
    /// error entry instead of failing the cell.
    pub fn evaluate(
        &self,
        params: &ParamSet,
        method: Method,
        n: usize,
        seed: u64,
    ) -> Vec<ResultRow> {
        let model = match self.model(seed) {
            Ok(m) => m,
            Err(e) => return ResultRow::failed_cell(method, n, seed, &e.to_string()),
        };
        [
            (Split::InDomain, &self.splits.test_in_domain),
            (Split::OutOfDomain, &self.splits.test_out_of_domain),
        ]
        .into_iter()
        .map(|(split, sessions)| {
            let mut row = ResultRow::new(method, n, seed, split);
            let scored = dsat_labels(sessions).and_then(|labels| {
                score(&model, params, sessions, HeadId::Satisfaction).map(|s| (s, labels))
            });
            match scored {
                Ok((s, labels)) => {
                    let mut errors = Vec::new();
                    match auc_pr(&s, &labels) {
                        Ok(v) => row.auc_pr = Some(v),
                        Err(e) => errors.push(e.to_string()),
                    }
                    match auc_roc(&s, &labels) {
                        Ok(v) => row.auc_roc = Some(v),
                        Err(e) => errors.push(e.to_string()),
                    }
                    if !errors.is_empty() {
                        row.error = Some(errors.join("; "));
                    }
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect()
    }

    /// Trains, saves and evaluates one cell. Training failures become
    /// error rows.
    pub fn run_cell(&self, method: Method, n: usize, seed: u64) -> Vec<ResultRow> {
        match self.train_and_save(method, n, seed) {
            Ok((params, _, _)) => self.evaluate(&params, method, n, seed),
            Err(e) => ResultRow::failed_cell(method, n, seed, &e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use satlearn::data::Turn;

    fn labeled(n_dsat: usize, n_sat: usize) -> Vec<Session> {
        (0..n_dsat + n_sat)
            .map(|i| {
                let t = Turn {
                    utterance: vec![0],
                    response: vec![],
                    raw_utterance: format!("u{i}"),
                    raw_response: String::new(),
                };
                let (score, label) = if i < n_dsat {
                    (1, Label::Dsat)
                } else {
                    (5, Label::Sat)
                };
                Session::new(vec![t], 0, "s", Some(score), Some(label)).unwrap()
            })
            .collect()
    }

    fn dsat_count(s: &[Session]) -> usize {
        s.iter().filter(|s| s.label == Some(Label::Dsat)).count()
    }

    #[test]
    fn subsample_is_stratified_and_seeded() {
        let train = labeled(250, 750);
        let a = subsample(&train, 64, 3).unwrap();
        assert_eq!(a.len(), 64);
        assert_eq!(dsat_count(&a), 16);
        assert_eq!(a, subsample(&train, 64, 3).unwrap());
        assert_ne!(a, subsample(&train, 64, 4).unwrap());
        let ids: std::collections::HashSet<_> =
            a.iter().map(|s| &s.turns[0].raw_utterance).collect();
        assert_eq!(ids.len(), 64);
    }

    #[test]
    fn subsample_keeps_both_classes() {
        let train = labeled(3, 997);
        assert_eq!(dsat_count(&subsample(&train, 4, 0).unwrap()), 1);
        let train = labeled(997, 3);
        assert_eq!(dsat_count(&subsample(&train, 4, 0).unwrap()), 3);
        let train = labeled(0, 10);
        assert_eq!(dsat_count(&subsample(&train, 4, 0).unwrap()), 0);
        let train = labeled(2, 2);
        assert_eq!(subsample(&train, 4, 0).unwrap().len(), 4);
    }

    #[test]
    fn subsample_bounds() {
        let train = labeled(5, 5);
        for n in [0, 11] {
            let e = subsample(&train, n, 0).unwrap_err();
            assert_eq!(e.exit_code(), 2);
        }
    }
}
