//! Optimizer, schedule and the four training regimes.
//!
//! * [`supervised_train`]: satisfaction head on labeled data only.
//! * [`contrastive_pretrain`]: real-vs-shuffled discrimination on unlabeled
//!   sessions.
//! * [`finetune`]: fresh satisfaction head on a pretrained body, body
//!   learning rates scaled down.
//! * [`few_shot_train`]: joint contrastive/satisfaction training where each
//!   body layer takes a contrastive step only when its contrastive and
//!   satisfaction gradients agree (or a coin with rate `alpha` fires),
//!   followed by a head reset and [`finetune`].
//!
//! All randomness comes from ChaCha streams derived from `TrainConfig::seed`,
//! one stream per purpose, so for example the RBCD coin sequence does not
//! depend on how many batches were drawn.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, LayerGrads};
use crate::data::{window, BatchIter, Session};
use crate::error::{Error, Result};
use crate::metrics::{auc_pr, dsat_labels};
use crate::model::{HeadId, Model, ModelConfig};
use crate::params::{Layer, LrTier, ParamSet, Role};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// How body layers are picked for an update in the joint phase.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Update iff alignment > 0 or the alpha coin fires.
    Threshold,
    /// Update with probability `max(alpha, sim⁺ / max sim⁺)`.
    Proportional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Turn-encoder layers (embedding and projection).
    pub lr_encoder: f64,
    pub lr_other: f64,
    /// Decay factor applied at 60% and again at 80% of a run.
    pub lr_decay: f64,
    pub alpha: f64,
    pub lambda: f64,
    pub alpha_grid: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub body_lr_scale_finetune: f64,
    pub patience: usize,
    pub seed: u64,
    /// Lower bound on optimizer steps for satisfaction-head training.
    pub min_steps: usize,
    /// Lower bound on steps between two validations.
    pub min_val_interval: usize,
    /// Passes over the unlabeled data in the joint phase of few-shot training.
    pub few_shot_epochs: usize,
    /// Overrides `few_shot_epochs` with an exact step count when nonzero.
    pub joint_steps: usize,
    pub selection: Selection,
    /// Redraw the targeted turn of unlabeled sessions every epoch.
    pub augment_unsup: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 10,
            lr_encoder: 3e-3,
            lr_other: 3e-3,
            lr_decay: 5.0,
            alpha: 0.01,
            lambda: 0.005,
            alpha_grid: vec![0.001, 0.005, 0.01, 0.05, 0.1],
            lambda_grid: vec![0.001, 0.002, 0.005, 0.01],
            body_lr_scale_finetune: 0.1,
            patience: 3,
            seed: 0,
            min_steps: 200,
            min_val_interval: 50,
            few_shot_epochs: 1,
            joint_steps: 0,
            selection: Selection::Threshold,
            augment_unsup: true,
        }
    }
}

fn in_unit_interval(x: f64) -> bool {
    x > 0.0 && x <= 1.0
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !in_unit_interval(self.alpha) || !in_unit_interval(self.lambda) {
            return Err(Error::Config("alpha and lambda must lie in (0, 1]".into()));
        }
        if self
            .alpha_grid
            .iter()
            .chain(&self.lambda_grid)
            .any(|&x| !in_unit_interval(x))
        {
            return Err(Error::Config(
                "alpha/lambda grids must lie in (0, 1]".into(),
            ));
        }
        if !(self.lr_encoder > 0.0 && self.lr_other > 0.0 && self.lr_decay >= 1.0) {
            return Err(Error::Config(
                "learning rates must be positive and decay ≥ 1".into(),
            ));
        }
        if !(self.body_lr_scale_finetune > 0.0) {
            return Err(Error::Config(
                "body_lr_scale_finetune must be positive".into(),
            ));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        Ok(())
    }
}

/// Piecewise-constant schedule: `base` before 60% of `total_steps`,
/// `base / 5` until 80%, `base / 25` afterwards.
pub fn lr_at(base: f64, step: usize, total_steps: usize) -> f64 {
    lr_at_with_decay(base, step, total_steps, 5.0)
}

pub fn lr_at_with_decay(base: f64, step: usize, total_steps: usize, decay: f64) -> f64 {
    let (s, t) = (step as u128 * 10, total_steps as u128);
    if s < 6 * t {
        base
    } else if s < 8 * t {
        base / decay
    } else {
        base / (decay * decay)
    }
}

/// Independent RNG stream `stream` of run `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_BATCHES: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_COINS: u64 = 3;
const STREAM_T_BATCHES: u64 = 4;
const STREAM_HEAD_INIT: u64 = 5;
const STREAM_VAL_NOISE: u64 = 6;

/// The coin sequence the RBCD trainer consumes: one uniform draw per body
/// and T-head layer per step, in layer order.
pub fn coin_stream(seed: u64) -> ChaCha8Rng {
    rng_stream(seed, STREAM_COINS)
}

/// Seed used to redraw the satisfaction head before finetuning.
pub fn head_init_seed(seed: u64) -> u64 {
    rng_stream(seed, STREAM_HEAD_INIT).gen()
}

/// Adam state with a step counter per layer. A layer that is not stepped
/// keeps its moments and counter untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub lr_encoder: f64,
    pub lr_other: f64,
    /// Multiplier on the base rate of body layers.
    pub body_scale: f64,
    m: Vec<Vec<Tensor>>,
    v: Vec<Vec<Tensor>>,
    steps: Vec<u64>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, lr_encoder: f64, lr_other: f64) -> Self {
        let zeros = LayerGrads::zeros_like(params).layers;
        Self {
            lr_encoder,
            lr_other,
            body_scale: 1.0,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.layers().len()],
        }
    }

    pub fn from_config(params: &ParamSet, cfg: &TrainConfig) -> Self {
        Self::new(params, cfg.lr_encoder, cfg.lr_other)
    }

    /// Unscheduled learning rate of a layer.
    pub fn base_lr(&self, layer: &Layer) -> f64 {
        let tier = match layer.tier {
            LrTier::Encoder => self.lr_encoder,
            LrTier::Other => self.lr_other,
        };
        if layer.role == Role::Body {
            tier * self.body_scale
        } else {
            tier
        }
    }

    pub fn steps(&self, layer: usize) -> u64 {
        self.steps[layer]
    }

    pub fn moments(&self, layer: usize) -> (&[Tensor], &[Tensor]) {
        (&self.m[layer], &self.v[layer])
    }

    /// One Adam step on `layer` with learning rate `base_lr(layer) * schedule`.
    pub fn step_layer(
        &mut self,
        params: &mut ParamSet,
        layer: usize,
        grads: &[Tensor],
        schedule: f64,
    ) -> Result<()> {
        let lr = self.base_lr(&params.layers()[layer]) * schedule;
        let target = &mut params.layers_mut()[layer];
        if grads.len() != target.tensors.len() {
            return Err(Error::Contract(format!(
                "layer {} has {} tensors, got {} gradients",
                target.name,
                target.tensors.len(),
                grads.len()
            )));
        }
        self.steps[layer] += 1;
        let t = self.steps[layer] as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for (i, (p, g)) in target.tensors.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let m = self.m[layer][i].data_mut();
            let v = self.v[layer][i].data_mut();
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mj = ADAM_BETA1 * *mj + (1.0 - ADAM_BETA1) * gj;
                *vj = ADAM_BETA2 * *vj + (1.0 - ADAM_BETA2) * gj * gj;
                *w -= lr * (*mj / c1) / ((*vj / c2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseField {
    Utterance,
    Response,
}

/// Real sessions (label 1) followed by their shuffled clones (label 0).
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBatch {
    pub sessions: Vec<Session>,
    pub labels: Vec<f64>,
    pub field: NoiseField,
    /// Clone `i` took the field from original `permutation[i]`.
    pub permutation: Vec<usize>,
}

fn field_tokens(s: &Session, field: NoiseField) -> &[usize] {
    let t = s.targeted();
    match field {
        NoiseField::Utterance => &t.utterance,
        NoiseField::Response => &t.response,
    }
}

const DERANGEMENT_TRIES: usize = 64;

/// Seeded derangement of `0..n` that also avoids pairing equal contents
/// when some try manages to.
fn derangement<R: Rng>(n: usize, same: impl Fn(usize, usize) -> bool, rng: &mut R) -> Vec<usize> {
    let mut fallback = None;
    let mut perm: Vec<usize> = (0..n).collect();
    for _ in 0..DERANGEMENT_TRIES {
        perm.shuffle(rng);
        if perm.iter().enumerate().any(|(i, &p)| i == p) {
            continue;
        }
        if perm.iter().enumerate().all(|(i, &p)| !same(i, p)) {
            return perm;
        }
        fallback.get_or_insert_with(|| perm.clone());
    }
    if let Some(p) = fallback {
        return p;
    }
    // Rotation is always a derangement for n ≥ 2.
    (0..n).map(|i| (i + 1) % n).collect()
}

/// Builds the contrastive batch: the originals, then clones in which either
/// the targeted utterances or the targeted responses (one coin per batch)
/// are permuted across the batch with no session keeping its own.
pub fn make_noise_batch<R: Rng>(batch: &[Session], rng: &mut R) -> Result<NoiseBatch> {
    if batch.len() < 2 {
        return Err(Error::Contract(
            "a noise batch needs at least two sessions".into(),
        ));
    }
    let field = if rng.gen_bool(0.5) {
        NoiseField::Utterance
    } else {
        NoiseField::Response
    };
    let perm = derangement(
        batch.len(),
        |i, j| field_tokens(&batch[i], field) == field_tokens(&batch[j], field),
        rng,
    );
    let mut sessions = batch.to_vec();
    for (i, &j) in perm.iter().enumerate() {
        let mut clone = batch[i].clone();
        let src = batch[j].targeted();
        let dst = clone.targeted_mut();
        match field {
            NoiseField::Utterance => {
                dst.utterance = src.utterance.clone();
                dst.raw_utterance = src.raw_utterance.clone();
            }
            NoiseField::Response => {
                dst.response = src.response.clone();
                dst.raw_response = src.raw_response.clone();
            }
        }
        sessions.push(clone);
    }
    let mut labels = vec![1.0; batch.len()];
    labels.extend(std::iter::repeat_n(0.0, batch.len()));
    Ok(NoiseBatch {
        sessions,
        labels,
        field,
        permutation: perm,
    })
}

/// Mean BCE of `head` over `sessions` with the given 0/1 targets.
fn batch_gradients(
    model: &Model,
    params: &ParamSet,
    sessions: &[Session],
    targets: Vec<f64>,
    head: HeadId,
) -> Result<(f64, LayerGrads)> {
    let mut g = Graph::new();
    let p = g.bind(params);
    let logits = model.logits(&mut g, &p, sessions, head)?;
    let loss = g.bce_with_logits(logits, &Tensor::vector(targets))?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, grads.layered(params)))
}

fn bce(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// Mean satisfaction BCE (DSAT = 1) and AUC-PR on labeled sessions.
pub fn satisfaction_validation(
    model: &Model,
    params: &ParamSet,
    sessions: &[Session],
) -> Result<(f64, Option<f64>)> {
    let labels = dsat_labels(sessions)?;
    let logits = model.predict(params, sessions, HeadId::Satisfaction)?;
    let loss = logits
        .iter()
        .zip(&labels)
        .map(|(&x, &y)| bce(x, if y { 1.0 } else { 0.0 }))
        .sum::<f64>()
        / sessions.len() as f64;
    Ok((loss, auc_pr(&logits, &labels).ok()))
}

/// Contrastive BCE and real-vs-noise accuracy over `sessions`, split into
/// noise batches of `batch_size` with a fixed seed.
pub fn contrastive_validation(
    model: &Model,
    params: &ParamSet,
    sessions: &[Session],
    batch_size: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = rng_stream(seed, STREAM_VAL_NOISE);
    let windowed: Vec<Session> = sessions
        .iter()
        .map(|s| window(s, model.config().context_t))
        .collect();
    let (mut loss, mut correct, mut n) = (0.0, 0usize, 0usize);
    for chunk in windowed.chunks(batch_size.max(2)) {
        if chunk.len() < 2 {
            continue;
        }
        let nb = make_noise_batch(chunk, &mut rng)?;
        let logits = model.predict(params, &nb.sessions, HeadId::Contrastive)?;
        for (&x, &y) in logits.iter().zip(&nb.labels) {
            loss += bce(x, y);
            if (x > 0.0) == (y > 0.5) {
                correct += 1;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Config(
            "contrastive validation needs two sessions".into(),
        ));
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// One validation point of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Contrastive accuracy or satisfaction AUC-PR on validation.
    pub val_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub method: String,
    pub n_train: usize,
    pub steps: usize,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    /// Step at which the T head was first early-stopped in the joint phase.
    pub early_stop_step: Option<usize>,
    /// Fraction of joint steps in which each layer was updated.
    pub layer_acceptance: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
    pub checkpoint: Option<String>,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub finetune: Option<Box<TrainReport>>,
}

impl TrainReport {
    fn new(method: &str, n_train: usize, model: &Model, cfg: &TrainConfig) -> Self {
        Self {
            method: method.into(),
            n_train,
            steps: 0,
            epochs: Vec::new(),
            best_epoch: None,
            early_stop_step: None,
            layer_acceptance: BTreeMap::new(),
            warnings: Vec::new(),
            checkpoint: None,
            train_config: cfg.clone(),
            model_config: model.config().clone(),
            finetune: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn step_roles(
    params: &mut ParamSet,
    opt: &mut OptimizerState,
    grads: &LayerGrads,
    roles: &[Role],
    schedule: f64,
) -> Result<()> {
    for i in 0..params.layers().len() {
        if roles.contains(&params.layers()[i].role) {
            opt.step_layer(params, i, &grads.layers[i], schedule)?;
        }
    }
    Ok(())
}

/// Contrastive pretraining on unlabeled sessions. Keeps the checkpoint with
/// the lowest validation loss.
pub fn contrastive_pretrain(
    model: &Model,
    params: &ParamSet,
    train: &[Session],
    validation: &[Session],
    cfg: &TrainConfig,
) -> Result<(ParamSet, TrainReport)> {
    cfg.validate()?;
    model.check(params)?;
    if train.len() < 2 || validation.len() < 2 {
        return Err(Error::Config(
            "contrastive training needs at least two train and two validation sessions".into(),
        ));
    }
    let mut report = TrainReport::new("contrastive_pretrain", train.len(), model, cfg);
    let mut params = params.clone();
    let mut opt = OptimizerState::from_config(&params, cfg);
    let batch_size = cfg.batch_size.min(train.len());
    let mut batches = BatchIter::new(
        train,
        batch_size,
        model.config().context_t,
        rng_stream(cfg.seed, STREAM_BATCHES).gen(),
        cfg.augment_unsup,
    );
    let mut noise_rng = rng_stream(cfg.seed, STREAM_NOISE);
    let total = cfg.epochs * batches.batches_per_epoch();
    let mut best: Option<(f64, ParamSet)> = None;
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut train_loss = 0.0;
        let epoch_batches = batches.epoch();
        for batch in &epoch_batches {
            let nb = make_noise_batch(batch, &mut noise_rng)?;
            let (loss, grads) =
                batch_gradients(model, &params, &nb.sessions, nb.labels, HeadId::Contrastive)?;
            let schedule = lr_at_with_decay(1.0, step, total, cfg.lr_decay);
            step_roles(
                &mut params,
                &mut opt,
                &grads,
                &[Role::Body, Role::HeadS],
                schedule,
            )?;
            train_loss += loss;
            step += 1;
        }
        let (val_loss, acc) =
            contrastive_validation(model, &params, validation, cfg.batch_size, cfg.seed)?;
        report.epochs.push(EpochLog {
            epoch,
            step,
            train_loss: train_loss / epoch_batches.len().max(1) as f64,
            val_loss,
            val_metric: Some(acc),
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, params.clone()));
            report.best_epoch = Some(epoch);
        }
    }
    report.steps = step;
    Ok((best.map_or(params, |(_, p)| p), report))
}

/// Shared loop of [`supervised_train`] and [`finetune`].
fn fit_satisfaction(
    model: &Model,
    params: ParamSet,
    train: &[Session],
    validation: &[Session],
    cfg: &TrainConfig,
    body_scale: f64,
    method: &str,
) -> Result<(ParamSet, TrainReport)> {
    cfg.validate()?;
    model.check(&params)?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    if validation.is_empty() {
        return Err(Error::Config("empty validation set".into()));
    }
    let labels = dsat_labels(train)?;
    let mut report = TrainReport::new(method, train.len(), model, cfg);
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        let msg = format!("{method}: training set has a single class");
        warn!("{msg}");
        report.warnings.push(msg);
    }
    if cfg.epochs == 0 {
        return Ok((params, report));
    }

    // A single session is paired with itself so batches keep two rows.
    let doubled;
    let data: &[Session] = if train.len() == 1 {
        doubled = vec![train[0].clone(), train[0].clone()];
        &doubled
    } else {
        train
    };
    let batch_size = cfg.batch_size.min(data.len());
    let mut batches = BatchIter::new(
        data,
        batch_size,
        model.config().context_t,
        rng_stream(cfg.seed, STREAM_BATCHES).gen(),
        false,
    );
    let per_epoch = batches.batches_per_epoch();
    let epochs = cfg.epochs.max(cfg.min_steps.div_ceil(per_epoch));
    let total = epochs * per_epoch;
    let val_every = per_epoch.max(cfg.min_val_interval).min(total);

    let mut params = params;
    let mut opt = OptimizerState::from_config(&params, cfg);
    opt.body_scale = body_scale;
    let (mut best_score, mut best_params) = (f64::NEG_INFINITY, params.clone());
    let (mut step, mut running, mut running_n) = (0usize, 0.0, 0usize);
    for epoch in 0..epochs {
        for batch in batches.epoch() {
            let targets = batch
                .iter()
                .map(|s| s.label.map_or(0.0, |l| l.target()))
                .collect();
            let (loss, grads) =
                batch_gradients(model, &params, &batch, targets, HeadId::Satisfaction)?;
            let schedule = lr_at_with_decay(1.0, step, total, cfg.lr_decay);
            step_roles(
                &mut params,
                &mut opt,
                &grads,
                &[Role::Body, Role::HeadT],
                schedule,
            )?;
            running += loss;
            running_n += 1;
            step += 1;
            if step % val_every == 0 || step == total {
                let (val_loss, val_pr) = satisfaction_validation(model, &params, validation)?;
                // Validation AUC-PR when defined, otherwise lower loss wins.
                let score = val_pr.unwrap_or(-val_loss);
                report.epochs.push(EpochLog {
                    epoch,
                    step,
                    train_loss: running / running_n as f64,
                    val_loss,
                    val_metric: val_pr,
                });
                running = 0.0;
                running_n = 0;
                if score > best_score {
                    best_score = score;
                    best_params = params.clone();
                    report.best_epoch = Some(epoch);
                }
            }
        }
    }
    report.steps = step;
    Ok((best_params, report))
}

/// Trains body and satisfaction head on labeled data.
pub fn supervised_train(
    model: &Model,
    params: &ParamSet,
    train: &[Session],
    validation: &[Session],
    cfg: &TrainConfig,
) -> Result<(ParamSet, TrainReport)> {
    fit_satisfaction(
        model,
        params.clone(),
        train,
        validation,
        cfg,
        1.0,
        "supervised",
    )
}

/// Attaches a fresh satisfaction head to `pretrained` and trains on labeled
/// data with body rates scaled by `body_lr_scale_finetune`.
pub fn finetune(
    model: &Model,
    pretrained: &ParamSet,
    train: &[Session],
    validation: &[Session],
    cfg: &TrainConfig,
) -> Result<(ParamSet, TrainReport)> {
    let fresh = model.reinit_head(pretrained, Role::HeadT, head_init_seed(cfg.seed))?;
    fit_satisfaction(
        model,
        fresh,
        train,
        validation,
        cfg,
        cfg.body_lr_scale_finetune,
        "finetune",
    )
}

/// Inner product of the two tasks' gradients over every tensor of `layer`.
pub fn layer_alignment(grads_s: &LayerGrads, grads_t: &LayerGrads, layer: usize) -> Result<f64> {
    let (a, b) = match (grads_s.layer(layer), grads_t.layer(layer)) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(Error::Contract(format!("no gradients for layer {layer}"))),
    };
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.shape() != y.shape()) {
        return Err(Error::Contract(format!(
            "gradient shapes differ in layer {layer}"
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x.dot(y)).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub layer: usize,
    pub role: Role,
    /// Gradient alignment, for body layers.
    pub sim: Option<f64>,
    /// The uniform draw consumed for this layer, for body and T-head layers.
    pub coin: Option<f64>,
    pub updated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub decisions: Vec<LayerDecision>,
}

/// One layer-wise RBCD update.
///
/// The contrastive head always steps on `grads_s`. A body layer steps on
/// `grads_s` iff its alignment is strictly positive or its coin is below
/// `alpha` (under [`Selection::Threshold`]). The satisfaction head steps on
/// `grads_t` while not early-stopped, afterwards only when its coin is
/// below `lambda`. Coins are drawn for every body and T-head layer whether
/// or not they are needed.
#[allow(clippy::too_many_arguments)]
pub fn rbcd_step<R: Rng>(
    params: &mut ParamSet,
    grads_s: &LayerGrads,
    grads_t: &LayerGrads,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    coins: &mut R,
    t_head_early_stopped: bool,
    schedule: f64,
) -> Result<StepRecord> {
    let n = params.layers().len();
    let mut sims = vec![None; n];
    for (i, layer) in params.layers().iter().enumerate() {
        if layer.role == Role::Body {
            sims[i] = Some(layer_alignment(grads_s, grads_t, i)?);
        }
    }
    let max_pos = sims.iter().flatten().fold(0.0f64, |m, &s| m.max(s));

    let mut decisions = Vec::with_capacity(n);
    for i in 0..n {
        let role = params.layers()[i].role;
        let (coin, updated) = match role {
            Role::HeadS => (None, true),
            Role::Body => {
                let c: f64 = coins.gen();
                let sim = sims[i].expect("body alignment");
                let accept = match cfg.selection {
                    Selection::Threshold => sim > 0.0 || c < cfg.alpha,
                    Selection::Proportional => {
                        let p = if max_pos > 0.0 {
                            sim.max(0.0) / max_pos
                        } else {
                            0.0
                        };
                        c < p.max(cfg.alpha)
                    }
                };
                (Some(c), accept)
            }
            Role::HeadT => {
                let c: f64 = coins.gen();
                (Some(c), !t_head_early_stopped || c < cfg.lambda)
            }
        };
        if updated {
            let g = if role == Role::HeadT {
                grads_t
            } else {
                grads_s
            };
            opt.step_layer(params, i, &g.layers[i], schedule)?;
        }
        decisions.push(LayerDecision {
            layer: i,
            role,
            sim: sims[i],
            coin,
            updated,
        });
    }
    Ok(StepRecord { decisions })
}

/// Unconstrained joint step: body and contrastive head on `grads_s`,
/// satisfaction head on `grads_t`.
pub fn joint_step(
    params: &mut ParamSet,
    grads_s: &LayerGrads,
    grads_t: &LayerGrads,
    opt: &mut OptimizerState,
    schedule: f64,
) -> Result<StepRecord> {
    let mut decisions = Vec::with_capacity(params.layers().len());
    for i in 0..params.layers().len() {
        let role = params.layers()[i].role;
        let g = if role == Role::HeadT {
            grads_t
        } else {
            grads_s
        };
        opt.step_layer(params, i, &g.layers[i], schedule)?;
        decisions.push(LayerDecision {
            layer: i,
            role,
            sim: None,
            coin: None,
            updated: true,
        });
    }
    Ok(StepRecord { decisions })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointMode {
    Rbcd,
    Unconstrained,
}

/// Everything an auditor needs to re-derive one joint step.
pub struct StepAudit<'a> {
    pub step: usize,
    pub before: &'a ParamSet,
    pub after: &'a ParamSet,
    pub opt_before: &'a OptimizerState,
    pub opt_after: &'a OptimizerState,
    pub grads_s: &'a LayerGrads,
    pub grads_t: &'a LayerGrads,
    pub record: &'a StepRecord,
    pub t_head_early_stopped: bool,
}

pub type StepObserver<'o> = &'o mut dyn FnMut(&StepAudit<'_>);

fn sample_t_batch<R: Rng>(
    d_t: &[Session],
    batch_size: usize,
    context: usize,
    rng: &mut R,
) -> Vec<Session> {
    let idx: Vec<usize> = if d_t.len() >= batch_size {
        rand::seq::index::sample(rng, d_t.len(), batch_size).into_vec()
    } else {
        (0..batch_size)
            .map(|_| rng.gen_range(0..d_t.len()))
            .collect()
    };
    idx.into_iter().map(|i| window(&d_t[i], context)).collect()
}

/// Joint phase of few-shot training. Returns the final parameters; the
/// satisfaction head is validated every `max(|d_t| / batch, min_val_interval)`
/// steps and early-stopped after `patience` validations without improvement.
#[allow(clippy::too_many_arguments)]
pub fn joint_train(
    model: &Model,
    params: &ParamSet,
    d_s: &[Session],
    d_t: &[Session],
    val_t: &[Session],
    cfg: &TrainConfig,
    mode: JointMode,
    mut observer: Option<StepObserver<'_>>,
) -> Result<(ParamSet, TrainReport)> {
    cfg.validate()?;
    model.check(params)?;
    if val_t.is_empty() {
        return Err(Error::Config(
            "few-shot training needs a satisfaction validation set".into(),
        ));
    }
    if d_t.is_empty() || d_s.len() < 2 {
        return Err(Error::Config(
            "few-shot training needs labeled sessions and two unlabeled sessions".into(),
        ));
    }
    let method = match mode {
        JointMode::Rbcd => "few_shot_joint",
        JointMode::Unconstrained => "joint",
    };
    let mut report = TrainReport::new(method, d_t.len(), model, cfg);
    let context = model.config().context_t;
    let s_batch = cfg.batch_size.min(d_s.len());
    let mut s_batches = BatchIter::new(
        d_s,
        s_batch,
        context,
        rng_stream(cfg.seed, STREAM_BATCHES).gen(),
        cfg.augment_unsup,
    );
    let total = if cfg.joint_steps > 0 {
        cfg.joint_steps
    } else {
        cfg.few_shot_epochs * s_batches.batches_per_epoch()
    };
    let val_every = d_t
        .len()
        .div_ceil(cfg.batch_size)
        .max(cfg.min_val_interval)
        .max(1);

    let mut noise_rng = rng_stream(cfg.seed, STREAM_NOISE);
    let mut t_rng = rng_stream(cfg.seed, STREAM_T_BATCHES);
    let mut coins = coin_stream(cfg.seed);
    let mut params = params.clone();
    let mut opt = OptimizerState::from_config(&params, cfg);
    let mut accepted = vec![0usize; params.layers().len()];

    let mut pending: Vec<Vec<Session>> = Vec::new();
    let (mut best_val, mut bad) = (f64::INFINITY, 0usize);
    let mut stopped = false;
    let (mut running, mut running_n) = (0.0, 0usize);
    for step in 0..total {
        if pending.is_empty() {
            pending = s_batches.epoch();
            pending.reverse();
        }
        let s = pending.pop().expect("non-empty epoch");
        let nb = make_noise_batch(&s, &mut noise_rng)?;
        let t = sample_t_batch(d_t, cfg.batch_size, context, &mut t_rng);
        let t_targets = t
            .iter()
            .map(|x| x.label.map_or(0.0, |l| l.target()))
            .collect();

        let (_loss_s, grads_s) =
            batch_gradients(model, &params, &nb.sessions, nb.labels, HeadId::Contrastive)?;
        let (loss_t, grads_t) =
            batch_gradients(model, &params, &t, t_targets, HeadId::Satisfaction)?;
        let schedule = lr_at_with_decay(1.0, step, total, cfg.lr_decay);

        let snapshot = observer.as_ref().map(|_| (params.clone(), opt.clone()));
        let record = match mode {
            JointMode::Rbcd => rbcd_step(
                &mut params,
                &grads_s,
                &grads_t,
                &mut opt,
                cfg,
                &mut coins,
                stopped,
                schedule,
            )?,
            JointMode::Unconstrained => {
                joint_step(&mut params, &grads_s, &grads_t, &mut opt, schedule)?
            }
        };
        for d in &record.decisions {
            accepted[d.layer] += usize::from(d.updated);
        }
        if let (Some(obs), Some((before, opt_before))) = (observer.as_mut(), snapshot.as_ref()) {
            obs(&StepAudit {
                step,
                before,
                after: &params,
                opt_before,
                opt_after: &opt,
                grads_s: &grads_s,
                grads_t: &grads_t,
                record: &record,
                t_head_early_stopped: stopped,
            });
        }
        running += loss_t;
        running_n += 1;

        if (step + 1) % val_every == 0 || step + 1 == total {
            let (val_loss, val_pr) = satisfaction_validation(model, &params, val_t)?;
            report.epochs.push(EpochLog {
                epoch: (step + 1) / val_every,
                step: step + 1,
                train_loss: running / running_n as f64,
                val_loss,
                val_metric: val_pr,
            });
            running = 0.0;
            running_n = 0;
            if val_loss < best_val {
                best_val = val_loss;
                bad = 0;
            } else {
                bad += 1;
            }
            stopped = bad >= cfg.patience;
            if stopped && report.early_stop_step.is_none() {
                report.early_stop_step = Some(step + 1);
            }
        }
    }
    report.steps = total;
    for (i, layer) in params.layers().iter().enumerate() {
        let rate = if total == 0 {
            0.0
        } else {
            accepted[i] as f64 / total as f64
        };
        report.layer_acceptance.insert(layer.name.clone(), rate);
    }
    Ok((params, report))
}

/// Few-shot training: the RBCD joint phase, then a fresh satisfaction head
/// finetuned on `d_t`.
pub fn few_shot_train(
    model: &Model,
    params: &ParamSet,
    d_s: &[Session],
    d_t: &[Session],
    val_t: &[Session],
    cfg: &TrainConfig,
) -> Result<(ParamSet, TrainReport)> {
    let (joint, mut report) =
        joint_train(model, params, d_s, d_t, val_t, cfg, JointMode::Rbcd, None)?;
    let (tuned, ft) = finetune(model, &joint, d_t, val_t, cfg)?;
    report.method = "few_shot".into();
    report.warnings.extend(ft.warnings.iter().cloned());
    report.finetune = Some(Box::new(ft));
    Ok((tuned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, GeneratorConfig, Label, Turn};
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_assert_ne, proptest};

    fn turn(u: &[usize], r: &[usize], ru: &str, rr: &str) -> Turn {
        Turn {
            utterance: u.to_vec(),
            response: r.to_vec(),
            raw_utterance: ru.into(),
            raw_response: rr.into(),
        }
    }

    fn corpus() -> crate::data::Corpus {
        generate_corpus(&GeneratorConfig {
            num_labeled: 120,
            num_unlabeled: 200,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_model(vocab: usize) -> Model {
        Model::new(ModelConfig {
            vocab_size: vocab,
            embed_dim: 8,
            gru_hidden: 6,
            gru_layers: 1,
            head_hidden: 6,
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn quick_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            epochs: 1,
            min_steps: 6,
            min_val_interval: 3,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_boundaries() {
        assert_eq!(lr_at(1e-3, 59, 100), 1e-3);
        assert_eq!(lr_at(1e-3, 60, 100), 1e-3 / 5.0);
        assert_eq!(lr_at(1e-3, 79, 100), 1e-3 / 5.0);
        assert_eq!(lr_at(1e-3, 80, 100), 1e-3 / 25.0);
        assert_eq!(lr_at(1e-3, 85, 100), 1e-3 / 25.0);
        assert!((lr_at(1e-3, 60, 100) - 2e-4).abs() < 1e-18);
        assert!((lr_at(1e-3, 85, 100) - 4e-5).abs() < 1e-18);
    }

    proptest! {
        #[test]
        fn schedule_is_non_increasing(total in 1usize..5000, a in 0usize..5000, b in 0usize..5000) {
            let (lo, hi) = (a.min(b) % total, a.max(b) % total);
            let (lo, hi) = (lo.min(hi), lo.max(hi));
            prop_assert!(lr_at(1.0, lo, total) >= lr_at(1.0, hi, total));
        }
    }

    #[test]
    fn noise_batch_reproduces_two_sample_example() {
        // play / what do you want me to play ; what time is it / the time is 12:55 pm
        let a = Session::new(
            vec![turn(&[0], &[1, 2], "play", "what do you want me to play")],
            0,
            "music",
            None,
            None,
        )
        .unwrap();
        let b = Session::new(
            vec![turn(
                &[3, 4],
                &[5, 6],
                "what time is it",
                "the time is 12:55 pm",
            )],
            0,
            "time",
            None,
            None,
        )
        .unwrap();
        let batch = vec![a, b];
        let mut found = false;
        for seed in 0..16 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nb = make_noise_batch(&batch, &mut rng).unwrap();
            if nb.field != NoiseField::Response {
                continue;
            }
            found = true;
            assert_eq!(nb.labels, vec![1.0, 1.0, 0.0, 0.0]);
            assert_eq!(nb.sessions[0], batch[0]);
            assert_eq!(nb.sessions[1], batch[1]);
            let third = nb.sessions[2].targeted();
            let fourth = nb.sessions[3].targeted();
            assert_eq!(
                (third.raw_utterance.as_str(), third.raw_response.as_str()),
                ("play", "the time is 12:55 pm")
            );
            assert_eq!(
                (fourth.raw_utterance.as_str(), fourth.raw_response.as_str()),
                ("what time is it", "what do you want me to play")
            );
            assert_eq!(third.response, vec![5, 6]);
        }
        assert!(found);
    }

    #[test]
    fn noise_batch_rejects_single_session() {
        let c = corpus();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            make_noise_batch(&c.unlabeled[..1], &mut rng),
            Err(Error::Contract(_))
        ));
    }

    proptest! {
        #[test]
        fn noise_batch_properties(seed in 0u64..500, n in 2usize..20) {
            let c = corpus();
            let batch: Vec<Session> = c.unlabeled[..n].iter().map(|s| window(s, 2)).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let nb = make_noise_batch(&batch, &mut rng).unwrap();
            prop_assert_eq!(nb.sessions.len(), 2 * n);
            prop_assert_eq!(&nb.sessions[..n], &batch[..]);
            for (i, &p) in nb.permutation.iter().enumerate() {
                prop_assert_ne!(i, p);
            }
            let mut orig_u: Vec<_> = batch.iter().map(|s| s.targeted().utterance.clone()).collect();
            let mut orig_r: Vec<_> = batch.iter().map(|s| s.targeted().response.clone()).collect();
            let mut new_u: Vec<_> = nb.sessions[n..].iter().map(|s| s.targeted().utterance.clone()).collect();
            let mut new_r: Vec<_> = nb.sessions[n..].iter().map(|s| s.targeted().response.clone()).collect();
            let u_kept = orig_u == new_u;
            let r_kept = orig_r == new_r;
            orig_u.sort(); orig_r.sort(); new_u.sort(); new_r.sort();
            prop_assert_eq!(orig_u, new_u);
            prop_assert_eq!(orig_r, new_r);
            match nb.field {
                NoiseField::Utterance => prop_assert!(r_kept),
                NoiseField::Response => prop_assert!(u_kept),
            }
            for (clone, orig) in nb.sessions[n..].iter().zip(&batch) {
                for (i, (a, b)) in clone.turns.iter().zip(&orig.turns).enumerate() {
                    if i != orig.targeted_index {
                        prop_assert_eq!(a, b);
                    }
                }
            }
            let mut again = ChaCha8Rng::seed_from_u64(seed);
            prop_assert_eq!(make_noise_batch(&batch, &mut again).unwrap(), nb);
        }
    }

    #[test]
    fn alignment_hand_cases_and_loop_oracle() {
        let g = |v: Vec<f64>| LayerGrads {
            layers: vec![vec![Tensor::vector(v)]],
        };
        assert_eq!(
            layer_alignment(&g(vec![1.0, 2.0]), &g(vec![3.0, -1.0]), 0).unwrap(),
            1.0
        );
        assert_eq!(
            layer_alignment(&g(vec![1.0, 2.0]), &g(vec![0.0, 0.0]), 0).unwrap(),
            0.0
        );
        assert!(matches!(
            layer_alignment(&g(vec![1.0]), &g(vec![1.0]), 1),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            layer_alignment(&g(vec![1.0]), &g(vec![1.0, 2.0]), 0),
            Err(Error::Contract(_))
        ));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let a = LayerGrads {
            layers: vec![vec![rand_t(&[7, 5]), rand_t(&[5])]],
        };
        let b = LayerGrads {
            layers: vec![vec![rand_t(&[7, 5]), rand_t(&[5])]],
        };
        let mut oracle = 0.0;
        for t in 0..2 {
            for i in 0..a.layers[0][t].len() {
                oracle += a.layers[0][t].data()[i] * b.layers[0][t].data()[i];
            }
        }
        assert!((layer_alignment(&a, &b, 0).unwrap() - oracle).abs() < 1e-12);
    }

    fn toy_params() -> ParamSet {
        let layer = |name: &str, role, v: f64| Layer {
            name: name.into(),
            role,
            tier: LrTier::Other,
            tensors: vec![Tensor::filled(&[2], v)],
        };
        ParamSet::new(vec![
            layer("body_a", Role::Body, 1.0),
            layer("body_b", Role::Body, 2.0),
            layer("head_s", Role::HeadS, 3.0),
            layer("head_t", Role::HeadT, 4.0),
        ])
        .unwrap()
    }

    #[test]
    fn rbcd_step_rules() {
        let params = toy_params();
        let gs = LayerGrads {
            layers: vec![vec![Tensor::vector(vec![1.0, 0.0])]; 4],
        };
        let mut gt = gs.clone();
        gt.layers[0] = vec![Tensor::vector(vec![1.0, 0.0])]; // aligned
        gt.layers[1] = vec![Tensor::vector(vec![0.0, 1.0])]; // sim exactly 0
        let cfg = TrainConfig {
            alpha: 0.001,
            lambda: 0.001,
            ..TrainConfig::default()
        };

        let mut p = params.clone();
        let mut opt = OptimizerState::new(&p, 1e-3, 1e-3);
        let mut coins = ChaCha8Rng::seed_from_u64(3);
        let rec = rbcd_step(&mut p, &gs, &gt, &mut opt, &cfg, &mut coins, true, 1.0).unwrap();
        let d = &rec.decisions;
        assert!(d[0].updated && d[0].sim == Some(1.0));
        assert_eq!(d[1].sim, Some(0.0));
        assert_eq!(d[1].updated, d[1].coin.unwrap() < cfg.alpha);
        assert!(d[2].updated && d[2].coin.is_none());
        assert_eq!(d[3].updated, d[3].coin.unwrap() < cfg.lambda);
        if !d[1].updated {
            assert_eq!(p.layers()[1], params.layers()[1]);
            assert_eq!(opt.steps(1), 0);
            assert!(opt
                .moments(1)
                .0
                .iter()
                .all(|m| m.data().iter().all(|&x| x == 0.0)));
        }
        assert_eq!(opt.steps(0), 1);

        // Same seed, same decisions.
        let mut p2 = params.clone();
        let mut opt2 = OptimizerState::new(&p2, 1e-3, 1e-3);
        let mut coins2 = ChaCha8Rng::seed_from_u64(3);
        let rec2 = rbcd_step(&mut p2, &gs, &gt, &mut opt2, &cfg, &mut coins2, true, 1.0).unwrap();
        assert_eq!(rec, rec2);

        // alpha = 1 updates every body layer.
        let all = TrainConfig {
            alpha: 1.0,
            ..cfg.clone()
        };
        let mut p3 = params.clone();
        let mut opt3 = OptimizerState::new(&p3, 1e-3, 1e-3);
        let rec3 = rbcd_step(&mut p3, &gs, &gt, &mut opt3, &all, &mut coins2, false, 1.0).unwrap();
        assert!(rec3.decisions.iter().all(|d| d.updated));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = toy_params();
        let mut opt = OptimizerState::new(&p, 1e-3, 0.5);
        let g = vec![Tensor::vector(vec![3.0, -0.2])];
        opt.step_layer(&mut p, 2, &g, 1.0).unwrap();
        // Bias-corrected first Adam step is lr·sign(g) up to eps.
        assert!((p.layers()[2].tensors[0].data()[0] - 2.5).abs() < 1e-6);
        assert!((p.layers()[2].tensors[0].data()[1] - 3.5).abs() < 1e-6);
        opt.body_scale = 0.1;
        assert!((opt.base_lr(&p.layers()[0]) - 0.05).abs() < 1e-15);
        assert_eq!(opt.base_lr(&p.layers()[3]), 0.5);
    }

    #[test]
    fn separate_backprops_do_not_contaminate() {
        let c = corpus();
        let m = tiny_model(c.vocab.len());
        let p = m.init_params();
        let s: Vec<Session> = c.unlabeled[..6].iter().map(|s| window(s, 2)).collect();
        let t: Vec<Session> = c.labeled[..6].iter().map(|s| window(s, 2)).collect();
        let nb = make_noise_batch(&s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (_, alone) =
            batch_gradients(&m, &p, &nb.sessions, nb.labels.clone(), HeadId::Contrastive).unwrap();
        let (_, first) =
            batch_gradients(&m, &p, &nb.sessions, nb.labels.clone(), HeadId::Contrastive).unwrap();
        let targets = t.iter().map(|x| x.label.unwrap().target()).collect();
        let (_, gt) = batch_gradients(&m, &p, &t, targets, HeadId::Satisfaction).unwrap();
        assert_eq!(alone, first);
        let hs = p.layer_index("contrastive_head.out").unwrap();
        assert!(gt.layers[hs]
            .iter()
            .all(|x| x.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn contrastive_loss_starts_near_ln2_and_is_deterministic() {
        let c = corpus();
        let m = tiny_model(c.vocab.len());
        let p = m.init_params();
        let (loss, _) = contrastive_validation(&m, &p, &c.unlabeled, 16, 0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 0.05, "{loss}");

        let cfg = quick_cfg();
        let (a, ra) =
            contrastive_pretrain(&m, &p, &c.unlabeled[..120], &c.unlabeled[120..], &cfg).unwrap();
        let (b, rb) =
            contrastive_pretrain(&m, &p, &c.unlabeled[..120], &c.unlabeled[120..], &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert_eq!(ra.epochs.len(), 1);
        let hi = p.layer_index("satisfaction_head.hidden").unwrap();
        assert_eq!(a.layers()[hi], p.layers()[hi]);
    }

    #[test]
    fn supervised_runs_and_warns_on_one_class() {
        let c = corpus();
        let m = tiny_model(c.vocab.len());
        let p = m.init_params();
        let cfg = quick_cfg();
        let (a, r) = supervised_train(&m, &p, &c.labeled[..40], &c.labeled[40..80], &cfg).unwrap();
        let (b, _) = supervised_train(&m, &p, &c.labeled[..40], &c.labeled[40..80], &cfg).unwrap();
        assert_eq!(a, b);
        assert!(r.steps >= cfg.min_steps);
        assert_eq!(r.n_train, 40);
        assert!(r.warnings.is_empty());

        let sat: Vec<Session> = c
            .labeled
            .iter()
            .filter(|s| s.label == Some(Label::Sat))
            .take(10)
            .cloned()
            .collect();
        let (_, r) = supervised_train(&m, &p, &sat, &c.labeled[40..80], &cfg).unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert!(matches!(
            supervised_train(&m, &p, &[], &c.labeled[40..80], &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn finetune_scales_body_only_and_zero_epochs_is_fresh_head() {
        let c = corpus();
        let m = tiny_model(c.vocab.len());
        let p = m.init_params();
        let cfg = TrainConfig {
            epochs: 0,
            ..quick_cfg()
        };
        let (out, _) = finetune(&m, &p, &c.labeled[..20], &c.labeled[20..40], &cfg).unwrap();
        assert_eq!(
            out,
            m.reinit_head(&p, Role::HeadT, head_init_seed(cfg.seed))
                .unwrap()
        );

        let mut opt = OptimizerState::from_config(&p, &cfg);
        opt.body_scale = cfg.body_lr_scale_finetune;
        for l in p.layers() {
            let tier = if l.tier == LrTier::Encoder {
                cfg.lr_encoder
            } else {
                cfg.lr_other
            };
            let expect = if l.role == Role::Body {
                0.1 * tier
            } else {
                tier
            };
            assert!((opt.base_lr(l) - expect).abs() < 1e-18);
        }
    }

    #[test]
    fn joint_with_unit_rates_matches_unconstrained() {
        let c = corpus();
        let m = tiny_model(c.vocab.len());
        let p = m.init_params();
        let cfg = TrainConfig {
            alpha: 1.0,
            lambda: 1.0,
            joint_steps: 8,
            ..quick_cfg()
        };
        let mut a_traj = Vec::new();
        let mut obs_a = |a: &StepAudit<'_>| a_traj.push(a.after.clone());
        let (pa, ra) = joint_train(
            &m,
            &p,
            &c.unlabeled[..100],
            &c.labeled[..10],
            &c.labeled[10..30],
            &cfg,
            JointMode::Rbcd,
            Some(&mut obs_a),
        )
        .unwrap();
        let mut b_traj = Vec::new();
        let mut obs_b = |a: &StepAudit<'_>| b_traj.push(a.after.clone());
        let (pb, _) = joint_train(
            &m,
            &p,
            &c.unlabeled[..100],
            &c.labeled[..10],
            &c.labeled[10..30],
            &cfg,
            JointMode::Unconstrained,
            Some(&mut obs_b),
        )
        .unwrap();
        assert_eq!(a_traj, b_traj);
        assert_eq!(pa, pb);
        assert!(ra.layer_acceptance.values().all(|&r| r == 1.0));
    }

    #[test]
    fn few_shot_runs_deterministically() {
        let c = corpus();
        let m = tiny_model(c.vocab.len());
        let p = m.init_params();
        let cfg = TrainConfig {
            joint_steps: 10,
            ..quick_cfg()
        };
        let (a, ra) = few_shot_train(
            &m,
            &p,
            &c.unlabeled[..100],
            &c.labeled[..20],
            &c.labeled[20..40],
            &cfg,
        )
        .unwrap();
        let (b, rb) = few_shot_train(
            &m,
            &p,
            &c.unlabeled[..100],
            &c.labeled[..20],
            &c.labeled[20..40],
            &cfg,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(ra.finetune.is_some());
        assert!(ra
            .layer_acceptance
            .values()
            .all(|r| (0.0..=1.0).contains(r)));
        assert!(matches!(
            few_shot_train(&m, &p, &c.unlabeled[..100], &c.labeled[..20], &[], &cfg),
            Err(Error::Config(_))
        ));
        let json = ra.to_json().unwrap();
        assert!(json.contains("\"alpha\""));
    }
}
