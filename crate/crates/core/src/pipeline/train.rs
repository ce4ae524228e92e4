//! Fold training: cross-entropy baseline and two-stage contrastive training.

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cv::{CvPlan, FoldSplit, DEFAULT_FOLDS, DEFAULT_VAL_FRACTION};
use crate::contrastive::{cross_entropy, supcon_loss, EmptyPositives, DEFAULT_TEMPERATURE};
use crate::error::{Error, Result};
use crate::models::{build_encoder, Arch, ModelConfig, Network};
use crate::nn::{softmax_rows, Adam, AdamConfig, Mode, Tensor};
use crate::signal::{FeatureKind, TrialSet, NUM_CLASSES, STD_CHANNELS, TRIAL_SAMPLES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Ce,
    Scl,
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Ce => "CE",
            LossMode::Scl => "SCL",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub feature_kind: FeatureKind,
    pub arch: Arch,
    pub batch_size: usize,
    pub patience: usize,
    /// Per stage.
    pub max_epochs: usize,
    pub tau: f64,
    pub lr: f64,
    pub seed: u64,
    pub folds: usize,
    pub val_fraction: f64,
    pub num_classes: usize,
    pub empty_positives: EmptyPositives,
}

impl TrainConfig {
    pub fn new(arch: Arch, loss_mode: LossMode, feature_kind: FeatureKind) -> Self {
        TrainConfig {
            loss_mode,
            feature_kind,
            arch,
            batch_size: 32,
            patience: 20,
            max_epochs: 200,
            tau: DEFAULT_TEMPERATURE,
            lr: 1e-3,
            seed: 0,
            folds: DEFAULT_FOLDS,
            val_fraction: DEFAULT_VAL_FRACTION,
            num_classes: NUM_CLASSES,
            empty_positives: EmptyPositives::Skip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || (self.loss_mode == LossMode::Scl && self.batch_size < 2) {
            return Err(Error::invalid(format!(
                "batch size {} too small for {} (contrastive batches need at least 2)",
                self.batch_size, self.loss_mode
            )));
        }
        if self.patience < 1 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        if self.max_epochs < 1 {
            return Err(Error::invalid("max_epochs must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.folds < 2 {
            return Err(Error::invalid("need at least 2 folds"));
        }
        if self.feature_kind == FeatureKind::Raw {
            return Err(Error::invalid("training needs preprocessed_eeg or ica_components features"));
        }
        Ok(())
    }

    fn model_config(&self, channels: usize, samples: usize, seed: u64) -> ModelConfig {
        let mut m = ModelConfig::new(self.arch).with_classes(self.num_classes).with_seed(seed);
        if (channels, samples) != (STD_CHANNELS, TRIAL_SAMPLES) {
            m = m.with_input(channels, samples);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1 for CE and contrastive pretraining, 2 for the frozen-encoder classifier.
    pub stage: u8,
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy, or in stage 1 of SCL the validation contrastive loss (the
    /// training loss when the validation split has no same-class pairs).
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub subject: String,
    pub fold: usize,
    pub test_accuracy: f64,
    /// Validation accuracy of the returned network.
    pub best_val_accuracy: f64,
    pub history: Vec<EpochLog>,
    /// Same-class minus different-class mean cosine on the test fold:
    /// projection embeddings for SCL, encoder features for CE.
    pub embedding_margin: Option<f64>,
    /// SCL only: digest of the encoder bytes when stage 2 started.
    pub frozen_encoder_digest: Option<u64>,
    pub network: Network,
}

/// Per-epoch early stopping on a scalar metric. A step counts as progress
/// only if it is strictly better than the best so far.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    higher_is_better: bool,
    best: Option<f64>,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, higher_is_better: bool) -> Self {
        EarlyStopping {
            patience,
            higher_is_better,
            best: None,
            since_best: 0,
        }
    }

    /// Returns (improved, stop).
    pub fn observe(&mut self, metric: f64) -> (bool, bool) {
        let improved = match self.best {
            None => true,
            Some(b) => {
                if self.higher_is_better {
                    metric > b
                } else {
                    metric < b
                }
            }
        };
        if improved {
            self.best = Some(metric);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        (improved, self.since_best >= self.patience)
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// FNV-1a digest of the encoder's exact parameter and buffer bytes.
pub fn encoder_digest(net: &Network) -> u64 {
    fnv1a(&net.encoder_bytes())
}

/// Seed for one (subject, fold, purpose) unit, independent of execution order.
pub fn unit_seed(seed: u64, subject: &str, fold: usize, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(subject.as_bytes()));
    rng.set_stream((fold as u64) << 8 | purpose);
    rng.gen()
}

/// Stacks trials into an (n, 1, channels, samples) tensor.
pub fn trials_tensor(ts: &TrialSet, idx: &[usize]) -> Result<Tensor> {
    let first = ts
        .trials
        .get(*idx.first().ok_or_else(|| Error::invalid("no trials selected"))?)
        .ok_or_else(|| Error::invalid("trial index out of range"))?;
    let (c, t) = first.data.dim();
    let mut data = Vec::with_capacity(idx.len() * c * t);
    for &i in idx {
        let trial = ts.trials.get(i).ok_or_else(|| Error::invalid("trial index out of range"))?;
        if trial.data.dim() != (c, t) {
            return Err(Error::invalid(format!("trial {i} has shape {:?}, expected {:?}", trial.data.dim(), (c, t))));
        }
        data.extend(trial.data.as_standard_layout().iter().map(|&v| f64::from(v)));
    }
    Tensor::from_vec(&[idx.len(), 1, c, t], data)
}

fn labels_of(ts: &TrialSet, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| usize::from(ts.trials[i].label)).collect()
}

/// Applies `f` to eval-mode chunks of the selected trials and stacks the rows.
fn map_trials(
    net: &mut Network,
    ts: &TrialSet,
    idx: &[usize],
    batch: usize,
    mut f: impl FnMut(&mut Network, &Tensor) -> Result<Tensor>,
) -> Result<Tensor> {
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in idx.chunks(batch.max(1)) {
        let x = trials_tensor(ts, chunk)?;
        let y = f(net, &x)?;
        width = y.item_len();
        rows.extend_from_slice(y.data());
    }
    net.clear_cache();
    Tensor::from_vec(&[idx.len(), width], rows)
}

fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let pred = probs.argmax_rows();
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    correct as f64 / labels.len() as f64
}

/// Fraction of trials whose argmax prediction matches the label.
pub fn evaluate(net: &mut Network, ts: &TrialSet, idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty trial list"));
    }
    let probs = map_trials(net, ts, idx, 64, |n, x| n.forward(x, Mode::Eval))?;
    Ok(accuracy(&probs, &labels_of(ts, idx)))
}

/// Mean cosine similarity of same-class pairs minus that of different-class
/// pairs. `None` if either kind of pair is missing.
pub fn cosine_margin(emb: &Tensor, labels: &[usize]) -> Option<f64> {
    let (n, _) = emb.dims2("embeddings").ok()?;
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = emb.item(i);
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|v| v / norm).collect()
        })
        .collect();
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in 0..i {
            let c: f64 = unit[i].iter().zip(&unit[j]).map(|(a, b)| a * b).sum();
            if labels[i] == labels[j] {
                same += c;
                ns += 1;
            } else {
                diff += c;
                nd += 1;
            }
        }
    }
    (ns > 0 && nd > 0).then(|| same / ns as f64 - diff / nd as f64)
}

fn check_inputs(ts: &TrialSet, plan: &CvPlan, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if ts.feature_kind != cfg.feature_kind {
        return Err(Error::invalid(format!(
            "trial set holds {:?} features, config asks for {:?}",
            ts.feature_kind, cfg.feature_kind
        )));
    }
    if ts.len() != plan.fold_assignments.len() {
        return Err(Error::invalid(format!(
            "plan covers {} trials, trial set has {}",
            plan.fold_assignments.len(),
            ts.len()
        )));
    }
    if let Some(t) = ts.trials.iter().find(|t| usize::from(t.label) >= cfg.num_classes) {
        return Err(Error::invalid(format!("label {} exceeds {} classes", t.label, cfg.num_classes)));
    }
    Ok(())
}

fn shuffled(idx: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut v = idx.to_vec();
    for i in (1..v.len()).rev() {
        v.swap(i, rng.gen_range(0..=i));
    }
    v
}

/// Consecutive batches of `size`, the last one possibly short. With
/// `min_last`, a short tail below that size is merged into the previous batch.
fn batches(order: &[usize], size: usize, min_last: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < min_last) {
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

struct FoldContext<'a> {
    ts: &'a TrialSet,
    split: FoldSplit,
    subject: String,
    fold: usize,
    cfg: &'a TrainConfig,
}

impl<'a> FoldContext<'a> {
    fn new(ts: &'a TrialSet, plan: &CvPlan, fold: usize, cfg: &'a TrainConfig) -> Result<Self> {
        check_inputs(ts, plan, cfg)?;
        let labels = ts.labels();
        let split = plan.split(fold, &labels)?;
        if split.train.is_empty() || split.val.is_empty() {
            return Err(Error::invalid(format!("fold {fold} has an empty training or validation split")));
        }
        split.assert_disjoint()?;
        Ok(FoldContext {
            ts,
            split,
            subject: plan.subject.clone(),
            fold,
            cfg,
        })
    }

    fn fresh_network(&self) -> Result<Network> {
        let (c, t) = self.ts.trials[0].data.dim();
        let seed = unit_seed(self.cfg.seed, &self.subject, self.fold, 1);
        build_encoder(&self.cfg.model_config(c, t, seed))
    }

    fn log(&self, e: &EpochLog, tag: &str) {
        info!(
            "{} fold {} {tag} epoch {}: train_loss {:.4} val {:.4}",
            self.subject, self.fold, e.epoch, e.train_loss, e.val_metric
        );
    }

    fn adam(&self) -> Adam {
        Adam::new(AdamConfig {
            lr: self.cfg.lr,
            ..AdamConfig::default()
        })
    }
}

/// Trains encoder and classifier jointly with cross-entropy.
pub fn train_ce(ts: &TrialSet, plan: &CvPlan, fold: usize, cfg: &TrainConfig) -> Result<FoldOutcome> {
    train_ce_with(ts, plan, fold, cfg, &mut |_| {})
}

pub fn train_ce_with(
    ts: &TrialSet,
    plan: &CvPlan,
    fold: usize,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FoldOutcome> {
    if cfg.loss_mode != LossMode::Ce {
        return Err(Error::invalid("train_ce needs loss_mode = ce"));
    }
    let ctx = FoldContext::new(ts, plan, fold, cfg)?;
    let mut net = ctx.fresh_network()?;
    net.attach_classifier_head(false);
    let mut adam = ctx.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(unit_seed(cfg.seed, &ctx.subject, fold, 2));
    let mut stopper = EarlyStopping::new(cfg.patience, true);
    let mut best: Option<Network> = None;
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let order = shuffled(&ctx.split.train, &mut rng);
        let mut loss_sum = 0.0;
        for batch in batches(&order, cfg.batch_size, 1) {
            let x = trials_tensor(ts, batch)?;
            let logits = net.forward_train(&x)?;
            let out = cross_entropy(&softmax_rows(&logits), &labels_of(ts, batch))?;
            net.zero_grad();
            net.backward(&out.grad)?;
            adam.step(net.trainable_params_mut())?;
            net.step += 1;
            loss_sum += out.value * batch.len() as f64;
        }
        net.clear_cache();
        let mut snap = net.snapshot()?;
        let val = evaluate(&mut snap, ts, &ctx.split.val)?;
        let log = EpochLog {
            stage: 1,
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_metric: val,
        };
        ctx.log(&log, "ce");
        on_epoch(&log);
        history.push(log);
        let (improved, stop) = stopper.observe(val);
        if improved {
            best = Some(snap);
        }
        if stop {
            break;
        }
    }

    let mut net = best.expect("at least one epoch ran");
    let best_val = stopper.best().expect("at least one epoch ran");
    let test_accuracy = evaluate(&mut net, ts, &ctx.split.test)?;
    let feats = map_trials(&mut net, ts, &ctx.split.test, 64, |n, x| n.encode(x, Mode::Eval))?;
    let embedding_margin = cosine_margin(&feats, &labels_of(ts, &ctx.split.test));
    Ok(FoldOutcome {
        subject: ctx.subject,
        fold,
        test_accuracy,
        best_val_accuracy: best_val,
        history,
        embedding_margin,
        frozen_encoder_digest: None,
        network: net,
    })
}

/// Contrastive pretraining of encoder and projection head, then a classifier
/// on the frozen encoder.
pub fn train_scl(ts: &TrialSet, plan: &CvPlan, fold: usize, cfg: &TrainConfig) -> Result<FoldOutcome> {
    train_scl_with(ts, plan, fold, cfg, &mut |_| {})
}

pub fn train_scl_with(
    ts: &TrialSet,
    plan: &CvPlan,
    fold: usize,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FoldOutcome> {
    if cfg.loss_mode != LossMode::Scl {
        return Err(Error::invalid("train_scl needs loss_mode = scl"));
    }
    let ctx = FoldContext::new(ts, plan, fold, cfg)?;
    if ctx.split.val.is_empty() {
        return Err(Error::invalid("validation split is empty"));
    }
    let mut history = Vec::new();

    // Stage 1: encoder + projection head under the contrastive loss.
    let mut net = ctx.fresh_network()?;
    net.attach_projection_head();
    let mut adam = ctx.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(unit_seed(cfg.seed, &ctx.subject, fold, 2));
    let mut stopper = EarlyStopping::new(cfg.patience, false);
    let mut best: Option<Network> = None;
    let val_labels = labels_of(ts, &ctx.split.val);
    for epoch in 1..=cfg.max_epochs {
        let order = shuffled(&ctx.split.train, &mut rng);
        let mut loss_sum = 0.0;
        let mut n_batches = 0;
        for batch in batches(&order, cfg.batch_size, 2) {
            let x = trials_tensor(ts, batch)?;
            let z = net.forward_train(&x)?;
            let out = supcon_loss(&z, &labels_of(ts, batch), cfg.tau, cfg.empty_positives)?;
            net.zero_grad();
            net.backward(&out.grad)?;
            adam.step(net.trainable_params_mut())?;
            net.step += 1;
            loss_sum += out.value;
            n_batches += 1;
        }
        net.clear_cache();
        let mut snap = net.snapshot()?;
        let z = map_trials(&mut snap, ts, &ctx.split.val, 64, |n, x| n.forward(x, Mode::Eval))?;
        let train_loss = loss_sum / n_batches as f64;
        // One trial per class leaves no validation pairs; fall back to the
        // training loss so stopping still has a signal.
        let val_loss = if z.batch() >= 2 {
            Some(supcon_loss(&z, &val_labels, cfg.tau, EmptyPositives::Skip)?)
        } else {
            None
        };
        let val = if let Some(v) = val_loss.filter(|v| v.anchors_used > 0) {
            v.value
        } else {
            if epoch == 1 {
                log::warn!("{} fold {fold}: validation split has no same-class pairs, stage 1 monitors training loss", ctx.subject);
            }
            train_loss
        };
        let log = EpochLog {
            stage: 1,
            epoch,
            train_loss,
            val_metric: val,
        };
        ctx.log(&log, "scl-pretrain");
        on_epoch(&log);
        history.push(log);
        let (improved, stop) = stopper.observe(val);
        if improved {
            best = Some(snap);
        }
        if stop {
            break;
        }
    }
    let mut net = best.expect("at least one epoch ran");
    let test_labels = labels_of(ts, &ctx.split.test);
    let z_test = map_trials(&mut net, ts, &ctx.split.test, 64, |n, x| n.forward(x, Mode::Eval))?;
    let embedding_margin = cosine_margin(&z_test, &test_labels);

    // Stage 2: linear classifier on frozen encoder features.
    net.attach_classifier_head(true);
    net.step = 0;
    let frozen_digest = encoder_digest(&net);
    let encode = |net: &mut Network, idx: &[usize]| map_trials(net, ts, idx, 64, |n, x| n.encode(x, Mode::Eval));
    let r_train = encode(&mut net, &ctx.split.train)?;
    let r_val = encode(&mut net, &ctx.split.val)?;
    let r_test = encode(&mut net, &ctx.split.test)?;
    let train_labels = labels_of(ts, &ctx.split.train);
    let positions: Vec<usize> = (0..ctx.split.train.len()).collect();
    let mut adam = ctx.adam();
    let mut stopper = EarlyStopping::new(cfg.patience, true);
    let mut best: Option<Network> = None;
    for epoch in 1..=cfg.max_epochs {
        let order = shuffled(&positions, &mut rng);
        let mut loss_sum = 0.0;
        for batch in batches(&order, cfg.batch_size, 1) {
            let r = r_train.select_rows(batch)?;
            let y: Vec<usize> = batch.iter().map(|&i| train_labels[i]).collect();
            let logits = net.head_forward(&r, Mode::Train, true)?;
            let out = cross_entropy(&softmax_rows(&logits), &y)?;
            net.head.zero_grad();
            net.head_backward(&out.grad)?;
            adam.step(net.head.params_mut())?;
            net.step += 1;
            loss_sum += out.value * batch.len() as f64;
        }
        net.clear_cache();
        let mut snap = net.snapshot()?;
        let probs = snap.head_forward(&r_val, Mode::Eval, false)?;
        let val = accuracy(&probs, &val_labels);
        let log = EpochLog {
            stage: 2,
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_metric: val,
        };
        ctx.log(&log, "scl-classifier");
        on_epoch(&log);
        history.push(log);
        let (improved, stop) = stopper.observe(val);
        if improved {
            best = Some(snap);
        }
        if stop {
            break;
        }
    }
    let mut net = best.expect("at least one epoch ran");
    if encoder_digest(&net) != frozen_digest {
        return Err(Error::invalid(format!("{} fold {fold}: frozen encoder changed during stage 2", ctx.subject)));
    }
    net.clear_cache();
    let probs = net.head_forward(&r_test, Mode::Eval, false)?;
    net.clear_cache();
    Ok(FoldOutcome {
        subject: ctx.subject,
        fold,
        test_accuracy: accuracy(&probs, &test_labels),
        best_val_accuracy: stopper.best().expect("at least one epoch ran"),
        history,
        embedding_margin,
        frozen_encoder_digest: Some(frozen_digest),
        network: net,
    })
}

/// Runs one fold with the trainer selected by `cfg.loss_mode`.
pub fn train_fold(
    ts: &TrialSet,
    plan: &CvPlan,
    fold: usize,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FoldOutcome> {
    match cfg.loss_mode {
        LossMode::Ce => train_ce_with(ts, plan, fold, cfg, on_epoch),
        LossMode::Scl => train_scl_with(ts, plan, fold, cfg, on_epoch),
    }
}
