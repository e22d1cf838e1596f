//! Optimization, training regimes, metrics and checkpoints.
//!
//! Three regimes share one loop shape: micro-batches of `batch_size` whose
//! losses are scaled by the group size and accumulated, then one Adam step
//! per group of `accumulation` micro-batches.

mod checkpoint;
mod metrics;
mod optim;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbones::{Backbone, BackboneConfig, BACKBONE_PREFIX};
use crate::data::{batches, AugmentationPolicy, DatasetSource, Labels};
use crate::error::{Error, Result};
use crate::nn::{Ctx, Init, Linear, Mode};
use crate::simsiam::{representation_std, symmetric_loss, SiameseModel};
use crate::tensor::{seeded_rng, Graph, ParamStore, Scalar, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, ModelKind, TensorEntry, CHECKPOINT_MAGIC};
pub use metrics::{accuracy, argmax_rows, auc, macro_micro_metrics, MetricRow, MetricsLog, MultiLabelMetrics, METRICS_HEADER};
pub use optim::{adam_step, cosine_lr, pretrain_lr, AdamConfig, CosineSchedule, OptimizerState};

pub const HEAD_PREFIX: &str = "head.";
const EVAL_BATCH: usize = 256;
/// Seed offset for the classifier head, so it differs from the backbone draw.
const HEAD_SEED_OFFSET: u64 = 0x5eed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Pretrain,
    Finetune,
    Probe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CosineSymmetric,
    CrossEntropy,
    BinaryCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub loss: LossKind,
    pub batch_size: usize,
    pub accumulation: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Fraction of the labeled training set held out for model selection.
    pub val_fraction: f64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            regime: Regime::Pretrain,
            loss: LossKind::CosineSymmetric,
            batch_size: 64,
            accumulation: 8,
            epochs: 100,
            base_lr: 1e-3,
            adam: AdamConfig::default(),
            seed: 0,
            val_fraction: 0.1,
        }
    }

    pub fn finetune(loss: LossKind) -> Self {
        TrainConfig {
            regime: Regime::Finetune,
            loss,
            ..Self::pretrain()
        }
    }

    pub fn probe(loss: LossKind) -> Self {
        TrainConfig {
            regime: Regime::Probe,
            loss,
            ..Self::pretrain()
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.batch_size * self.accumulation
    }

    /// Peak learning rate: batch-scaled for pretraining, flat otherwise.
    pub fn peak_lr(&self) -> f64 {
        match self.regime {
            Regime::Pretrain => pretrain_lr(self.base_lr, self.effective_batch()),
            Regime::Finetune | Regime::Probe => self.base_lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let loss_ok = match self.regime {
            Regime::Pretrain => self.loss == LossKind::CosineSymmetric,
            Regime::Finetune | Regime::Probe => self.loss != LossKind::CosineSymmetric,
        };
        if !loss_ok {
            return Err(Error::Config(format!("loss {:?} does not fit regime {:?}", self.loss, self.regime)));
        }
        if self.batch_size == 0 || self.accumulation == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size, accumulation and epochs must be positive".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is not a finite non-negative value", self.base_lr)));
        }
        Ok(())
    }
}

/// Mean cross-entropy of `[N, k]` logits against class indices.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Mean binary cross-entropy of `[N, m]` logits against 0/1 targets.
pub fn binary_cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, targets: &[u8]) -> Result<Var> {
    if targets.iter().any(|&t| t > 1) {
        return Err(Error::Label("binary targets must be 0 or 1".into()));
    }
    let t: Vec<T> = targets.iter().map(|&v| T::lit(f64::from(v))).collect();
    g.bce_with_logits(logits, &t)
}

/// Runs `micro` loss closures, each scaled by `1 / micro` and accumulated into
/// the store, then applies one Adam step. Returns the mean unscaled loss.
pub fn accumulated_step<T, F>(
    store: &mut ParamStore<T>,
    state: &mut OptimizerState,
    lr: f64,
    micro: usize,
    mut loss_fn: F,
) -> Result<f64>
where
    T: Scalar,
    F: FnMut(usize, &mut Graph<T>, &mut ParamStore<T>) -> Result<Var>,
{
    store.zero_grad();
    let mut total = 0.0;
    for i in 0..micro {
        let mut g = Graph::new();
        let loss = loss_fn(i, &mut g, store)?;
        total += g.value(loss)[0].as_f64();
        let scaled = g.scale(loss, 1.0 / micro as f64);
        g.backward_into(scaled, store)?;
    }
    adam_step(store, state, lr)?;
    store.zero_grad();
    Ok(total / micro as f64)
}

fn groups(micro_batches: usize, accumulation: usize) -> usize {
    micro_batches.div_ceil(accumulation)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub epoch_std: Vec<f64>,
    pub steps: usize,
    pub peak_lr: f64,
    pub best_epoch: usize,
}

impl PretrainReport {
    pub fn final_std(&self) -> f64 {
        self.epoch_std.last().copied().unwrap_or(0.0)
    }
}

fn siamese_meta(model: &SiameseModel, data: &DatasetSource) -> CheckpointMeta {
    CheckpointMeta {
        backbone: model.backbone.config().clone(),
        model: ModelKind::Siamese {
            siamese: model.config.clone(),
        },
        normalization: Some(data.normalization().clone()),
        extra: Default::default(),
    }
}

/// Self-supervised training with the symmetric stop-gradient loss.
///
/// Logs `loss` and `representation_std` per applied step and `epoch_loss`
/// per epoch. With `out`, writes `final.ckpt` and `best.ckpt` (lowest epoch loss).
pub fn train_pretrain<T: Scalar>(
    model: &SiameseModel,
    store: &mut ParamStore<T>,
    data: &DatasetSource,
    policy: &AugmentationPolicy,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    out: Option<&Path>,
) -> Result<PretrainReport> {
    if cfg.regime != Regime::Pretrain {
        return Err(Error::Config(format!("train_pretrain called with regime {:?}", cfg.regime)));
    }
    cfg.validate()?;
    policy.validate()?;
    if policy.input_shape != data.item_shape() {
        return Err(Error::Config(format!(
            "policy shape {:?} does not match images {:?}",
            policy.input_shape,
            data.item_shape()
        )));
    }
    let micro_per_epoch = data.len() / cfg.batch_size;
    if micro_per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} items cannot fill one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let steps_per_epoch = groups(micro_per_epoch, cfg.accumulation);
    let peak_lr = cfg.peak_lr();
    let schedule = CosineSchedule {
        base_lr: peak_lr,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    log::info!(
        "pretrain lr = {} x {}/256 = {peak_lr} (batch {} x accumulation {}), cosine over {} steps",
        cfg.base_lr,
        cfg.effective_batch(),
        cfg.batch_size,
        cfg.accumulation,
        schedule.total_steps
    );
    let mut state = OptimizerState::new(cfg.adam);
    let d = model.config.projection_dim;
    let mut report = PretrainReport {
        epoch_losses: Vec::new(),
        epoch_std: Vec::new(),
        steps: 0,
        peak_lr,
        best_epoch: 0,
    };
    let mut best = f64::INFINITY;

    for epoch in 1..=cfg.epochs {
        let order = data.shuffled_order(cfg.seed, epoch as u64);
        let micro: Vec<&[usize]> = batches(&order, cfg.batch_size, true).collect();
        let (mut losses, mut stds) = (Vec::new(), Vec::new());
        for group in micro.chunks(cfg.accumulation) {
            let step = report.steps + 1;
            let lr = schedule.lr(report.steps)?;
            let mut group_std = Vec::with_capacity(group.len());
            let loss = accumulated_step(store, &mut state, lr, group.len(), |i, g, store| {
                let (x1, x2) = data.view_batch::<T>(group[i], policy)?;
                let mut ctx = Ctx::new(g, store, Mode::Train);
                let a = ctx.graph.input(&x1);
                let b = ctx.graph.input(&x2);
                let o = model.forward(&mut ctx, a, b)?;
                group_std.push(representation_std(g.value(o.z1), group[i].len(), d)?);
                symmetric_loss(g, o.p1, o.p2, o.z1, o.z2)
            })
            .map_err(|e| match e {
                Error::DegenerateVector { .. } | Error::DegenerateBatch(_) => Error::Collapse {
                    epoch,
                    step,
                    source: Box::new(e),
                },
                other => other,
            })?;
            report.steps = step;
            let std = mean(&group_std);
            log.push(MetricRow::new(epoch, step, "train", "loss", loss, lr));
            log.push(MetricRow::new(epoch, step, "train", "representation_std", std, lr));
            losses.push(loss);
            stds.push(std);
        }
        let epoch_loss = mean(&losses);
        let lr_now = schedule.lr(report.steps)?;
        log.push(MetricRow::new(epoch, report.steps, "train", "epoch_loss", epoch_loss, lr_now));
        log.flush()?;
        log::info!("epoch {epoch}: loss {epoch_loss:.5}, representation_std {:.5}", mean(&stds));
        report.epoch_losses.push(epoch_loss);
        report.epoch_std.push(*stds.last().expect("at least one step per epoch"));
        if epoch_loss < best {
            best = epoch_loss;
            report.best_epoch = epoch;
            if let Some(dir) = out {
                save_checkpoint(&dir.join("best.ckpt"), &siamese_meta(model, data), store)?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join("final.ckpt"), &siamese_meta(model, data), store)?;
    }
    Ok(report)
}

/// Backbone plus a linear head on its pooled features.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub backbone: Backbone,
    pub head: Linear,
    pub multi_label: bool,
}

impl Classifier {
    pub fn build<T: Scalar>(config: &BackboneConfig, outputs: usize, multi_label: bool, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let backbone = Backbone::build(config, &mut store, &mut rng)?;
        let mut head_rng = seeded_rng(seed.wrapping_add(HEAD_SEED_OFFSET));
        let d = backbone.output_dim();
        let head = Linear::new(&mut store, "head.fc", d, outputs, true, Init::KaimingUniform { fan_in: d }, &mut head_rng)?;
        Ok((
            Classifier {
                backbone,
                head,
                multi_label,
            },
            store,
        ))
    }

    pub fn outputs(&self) -> usize {
        self.head.d_out
    }

    pub fn logits<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, images: Var) -> Result<Var> {
        let f = self.backbone.forward(ctx, images)?;
        self.head.forward(ctx, f)
    }

    pub fn meta(&self, normalization: Option<crate::data::Normalization>) -> CheckpointMeta {
        CheckpointMeta {
            backbone: self.backbone.config().clone(),
            model: ModelKind::Classifier {
                outputs: self.outputs(),
                multi_label: self.multi_label,
            },
            normalization,
            extra: Default::default(),
        }
    }

    /// Loads backbone weights from a checkpoint after a family check.
    pub fn init_backbone<T: Scalar>(&self, ck: &Checkpoint, store: &mut ParamStore<T>) -> Result<usize> {
        ck.check_backbone(self.backbone.config())?;
        ck.restore_into(store, BACKBONE_PREFIX)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum EvalMetrics {
    Single { accuracy: f64 },
    Multi(MultiLabelMetrics),
}

impl EvalMetrics {
    /// Accuracy for single-label tasks, micro AUC for multi-label ones.
    pub fn primary(&self) -> f64 {
        match self {
            EvalMetrics::Single { accuracy } => *accuracy,
            EvalMetrics::Multi(m) => m.micro_auc,
        }
    }

    pub fn primary_name(&self) -> &'static str {
        match self {
            EvalMetrics::Single { .. } => "accuracy",
            EvalMetrics::Multi(_) => "micro_auc",
        }
    }

    /// `(metric name, value)` pairs in table order.
    pub fn table(&self) -> Vec<(&'static str, f64)> {
        match self {
            EvalMetrics::Single { accuracy } => vec![("accuracy", *accuracy)],
            EvalMetrics::Multi(m) => vec![
                ("macro_acc", m.macro_acc),
                ("micro_acc", m.micro_acc),
                ("macro_auc", m.macro_auc),
                ("micro_auc", m.micro_auc),
            ],
        }
    }
}

fn check_task(labels: &Labels, clf: &Classifier, loss: Option<LossKind>) -> Result<()> {
    let ok = match labels {
        Labels::Single { classes, .. } => {
            !clf.multi_label && *classes == clf.outputs() && loss.map_or(true, |l| l == LossKind::CrossEntropy)
        }
        Labels::Multi { attributes, .. } => {
            clf.multi_label && *attributes == clf.outputs() && loss.map_or(true, |l| l == LossKind::BinaryCrossEntropy)
        }
        Labels::Unlabeled => return Err(Error::UnlabeledSplit),
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Label(format!(
            "labels {labels_kind} do not fit a head of {} outputs (multi-label {}) with loss {loss:?}",
            clf.outputs(),
            clf.multi_label,
            labels_kind = match labels {
                Labels::Single { classes, .. } => format!("with {classes} classes"),
                Labels::Multi { attributes, .. } => format!("with {attributes} attributes"),
                Labels::Unlabeled => "absent".into(),
            }
        )))
    }
}

fn loss_for<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &Labels, idx: &[usize]) -> Result<Var> {
    match labels {
        Labels::Single { values, .. } => {
            let y: Vec<usize> = idx.iter().map(|&i| values[i]).collect();
            cross_entropy(g, logits, &y)
        }
        Labels::Multi { attributes, values } => {
            let y: Vec<u8> = idx
                .iter()
                .flat_map(|&i| values[i * attributes..(i + 1) * attributes].iter().copied())
                .collect();
            binary_cross_entropy(g, logits, &y)
        }
        Labels::Unlabeled => Err(Error::UnlabeledSplit),
    }
}

fn metrics_from_logits(logits: &[f64], labels: &Labels) -> Result<EvalMetrics> {
    match labels {
        Labels::Single { classes, values } => Ok(EvalMetrics::Single {
            accuracy: accuracy(&argmax_rows(logits, *classes), values)?,
        }),
        Labels::Multi { attributes, values } => {
            let scores: Vec<f64> = logits.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect();
            Ok(EvalMetrics::Multi(macro_micro_metrics(&scores, values, *attributes, 0.5)?))
        }
        Labels::Unlabeled => Err(Error::UnlabeledSplit),
    }
}

/// Backbone features in eval mode, batched, without augmentation.
pub fn extract_features<T: Scalar>(backbone: &Backbone, store: &mut ParamStore<T>, data: &DatasetSource) -> Result<Tensor<T>> {
    let order: Vec<usize> = (0..data.len()).collect();
    let mut feats = Vec::with_capacity(data.len() * backbone.output_dim());
    for idx in order.chunks(EVAL_BATCH) {
        let x = data.batch::<T>(idx)?;
        feats.extend_from_slice(crate::backbones::embed(backbone, store, &x, Mode::Eval)?.data());
    }
    Tensor::new(&[data.len(), backbone.output_dim()], feats)
}

fn head_logits<T: Scalar>(head: &Linear, store: &mut ParamStore<T>, feats: &Tensor<T>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, store, Mode::Eval);
    let x = ctx.graph.input(feats);
    let y = head.forward(&mut ctx, x)?;
    Ok(g.value(y).iter().map(|v| v.as_f64()).collect())
}

/// Eval-mode metrics of a classifier on a labeled dataset.
pub fn evaluate<T: Scalar>(clf: &Classifier, store: &mut ParamStore<T>, data: &DatasetSource) -> Result<EvalMetrics> {
    let labels = data.labels()?;
    check_task(labels, clf, None)?;
    let feats = extract_features(&clf.backbone, store, data)?;
    metrics_from_logits(&head_logits(&clf.head, store, &feats)?, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedReport {
    pub best_epoch: usize,
    pub best_val: f64,
    pub val_history: Vec<f64>,
    pub train_losses: Vec<f64>,
    pub steps: usize,
}

fn snapshot<T: Scalar>(store: &ParamStore<T>) -> Vec<Vec<T>> {
    store.ids().map(|id| store.get(id).data().to_vec()).collect()
}

fn restore<T: Scalar>(store: &mut ParamStore<T>, snap: &[Vec<T>]) {
    let ids: Vec<_> = store.ids().collect();
    for (id, data) in ids.into_iter().zip(snap) {
        store.get_mut(id).data_mut().copy_from_slice(data);
    }
}

/// Supervised training: fine-tune every weight, or probe a frozen eval-mode
/// backbone through cached features. A seeded `val_fraction` of `data` is held
/// out; the store ends holding the best-by-validation weights.
pub fn train_supervised<T: Scalar>(
    clf: &Classifier,
    store: &mut ParamStore<T>,
    data: &DatasetSource,
    policy: Option<&AugmentationPolicy>,
    cfg: &TrainConfig,
    log: &mut MetricsLog,
    out: Option<&Path>,
) -> Result<SupervisedReport> {
    if cfg.regime == Regime::Pretrain {
        return Err(Error::Config("train_supervised needs the finetune or probe regime".into()));
    }
    cfg.validate()?;
    check_task(data.labels()?, clf, Some(cfg.loss))?;
    let (train, val) = data.split(cfg.val_fraction, cfg.seed)?;
    log::info!(
        "holding out {} of {} items for validation (fraction {}, seed {})",
        val.len(),
        data.len(),
        cfg.val_fraction,
        cfg.seed
    );
    let probe = cfg.regime == Regime::Probe;
    store.set_requires_grad_prefix(BACKBONE_PREFIX, !probe);
    let train_labels = train.labels()?.clone();
    let val_labels = val.labels()?.clone();

    let cached = if probe {
        Some((extract_features(&clf.backbone, store, &train)?, extract_features(&clf.backbone, store, &val)?))
    } else {
        None
    };
    let drop_last = !probe && train.len() >= cfg.batch_size;
    let lr = cfg.peak_lr();
    let mut state = OptimizerState::new(cfg.adam);
    let mut report = SupervisedReport {
        best_epoch: 0,
        best_val: f64::NEG_INFINITY,
        val_history: Vec::new(),
        train_losses: Vec::new(),
        steps: 0,
    };
    let mut best = snapshot(store);

    for epoch in 1..=cfg.epochs {
        let order = train.shuffled_order(cfg.seed, epoch as u64);
        let micro: Vec<&[usize]> = batches(&order, cfg.batch_size, drop_last).collect();
        let mut losses = Vec::new();
        for group in micro.chunks(cfg.accumulation) {
            let loss = accumulated_step(store, &mut state, lr, group.len(), |i, g, store| {
                let idx = group[i];
                let logits = match &cached {
                    Some((feats, _)) => {
                        let d = feats.shape()[1];
                        let rows: Vec<T> = idx
                            .iter()
                            .flat_map(|&r| feats.data()[r * d..(r + 1) * d].iter().copied())
                            .collect();
                        let mut ctx = Ctx::new(g, store, Mode::Eval);
                        let x = ctx.graph.input(&Tensor::new(&[idx.len(), d], rows)?);
                        clf.head.forward(&mut ctx, x)?
                    }
                    None => {
                        let x = match policy {
                            Some(p) => train.augmented_batch::<T>(idx, p)?,
                            None => train.batch::<T>(idx)?,
                        };
                        let mut ctx = Ctx::new(g, store, Mode::Train);
                        let xv = ctx.graph.input(&x);
                        clf.logits(&mut ctx, xv)?
                    }
                };
                loss_for(g, logits, &train_labels, idx)
            })?;
            report.steps += 1;
            losses.push(loss);
            log.push(MetricRow::new(epoch, report.steps, "train", "loss", loss, lr));
        }
        let val_metrics = match &cached {
            Some((_, vf)) => metrics_from_logits(&head_logits(&clf.head, store, vf)?, &val_labels)?,
            None => evaluate(clf, store, &val)?,
        };
        let v = val_metrics.primary();
        log.push(MetricRow::new(epoch, report.steps, "val", val_metrics.primary_name(), v, lr));
        log.flush()?;
        log::info!("epoch {epoch}: train loss {:.5}, val {} {v:.4}", mean(&losses), val_metrics.primary_name());
        report.train_losses.push(mean(&losses));
        report.val_history.push(v);
        if v > report.best_val {
            report.best_val = v;
            report.best_epoch = epoch;
            best = snapshot(store);
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join("final.ckpt"), &clf.meta(Some(data.normalization().clone())), store)?;
    }
    restore(store, &best);
    store.set_requires_grad_prefix(BACKBONE_PREFIX, true);
    if let Some(dir) = out {
        save_checkpoint(&dir.join("best.ckpt"), &clf.meta(Some(data.normalization().clone())), store)?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_shapes, ShapeLabels};
    use crate::simsiam::SiameseConfig;
    use proptest::prelude::*;

    #[test]
    fn loss_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::zeros(&[3, 10]).unwrap());
        let l = cross_entropy(&mut g, x, &[0, 4, 9]).unwrap();
        assert!((g.value(l)[0] - 10f64.ln()).abs() < 1e-12);
        assert!(matches!(cross_entropy(&mut g, x, &[10, 0, 0]), Err(Error::Label(_))));

        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::new(&[1, 2], vec![0.0, 50.0]).unwrap());
        let l = binary_cross_entropy(&mut g, x, &[0, 1]).unwrap();
        assert!((g.value(l)[0] - 0.5 * 2f64.ln()).abs() < 1e-12);
        assert!(matches!(binary_cross_entropy(&mut g, x, &[0, 2]), Err(Error::Label(_))));

        let pair = |x: f64, y: u8| {
            let mut g = Graph::<f64>::new();
            let v = g.input(&Tensor::new(&[1, 1], vec![x]).unwrap());
            let l = binary_cross_entropy(&mut g, v, &[y]).unwrap();
            g.value(l)[0]
        };
        assert_eq!(pair(1.7, 1), pair(-1.7, 0));
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.input(&Tensor::zeros(&[2, 4]).unwrap().with_requires_grad(true));
        let l = cross_entropy(&mut g, x, &[1, 3]).unwrap();
        g.backward(l).unwrap();
        let grad = g.grad(x).unwrap();
        for r in 0..2 {
            for c in 0..4 {
                let onehot = if c == [1, 3][r] { 1.0 } else { 0.0 };
                assert!((grad[r * 4 + c] - (0.25 - onehot) / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn config_validation() {
        assert_eq!(TrainConfig::pretrain().peak_lr(), 2e-3);
        assert_eq!(TrainConfig::finetune(LossKind::CrossEntropy).peak_lr(), 1e-3);
        assert!(TrainConfig::finetune(LossKind::CosineSymmetric).validate().is_err());
        let cfg = TrainConfig {
            loss: LossKind::CrossEntropy,
            ..TrainConfig::pretrain()
        };
        assert!(cfg.validate().is_err());
    }

    fn mlp(seed: u64) -> (Linear, Linear, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = seeded_rng(seed);
        let a = Linear::new(&mut store, "a", 5, 7, true, Init::KaimingUniform { fan_in: 5 }, &mut rng).unwrap();
        let b = Linear::new(&mut store, "b", 7, 3, true, Init::KaimingUniform { fan_in: 7 }, &mut rng).unwrap();
        (a, b, store)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn accumulation_matches_full_batch(seed in any::<u64>()) {
            let x = Tensor::<f64>::gaussian(&[64, 5], 0.0, 1.0, seed).unwrap();
            let y: Vec<usize> = (0..64).map(|i| (i * 7 + seed as usize) % 3).collect();
            let forward = |a: &Linear, b: &Linear, g: &mut Graph<f64>, store: &mut ParamStore<f64>, rows: std::ops::Range<usize>| {
                let t = Tensor::new(&[rows.len(), 5], x.data()[rows.start * 5..rows.end * 5].to_vec())?;
                let mut ctx = Ctx::new(g, store, Mode::Train);
                let xv = ctx.graph.input(&t);
                let h = a.forward(&mut ctx, xv)?;
                let h = ctx.graph.relu(h);
                let o = b.forward(&mut ctx, h)?;
                cross_entropy(g, o, &y[rows])
            };

            let (a, b, mut full) = mlp(seed ^ 1);
            let mut st = OptimizerState::new(AdamConfig::default());
            accumulated_step(&mut full, &mut st, 1e-2, 1, |_, g, s| forward(&a, &b, g, s, 0..64)).unwrap();

            let (a, b, mut acc) = mlp(seed ^ 1);
            let mut st = OptimizerState::new(AdamConfig::default());
            accumulated_step(&mut acc, &mut st, 1e-2, 8, |i, g, s| forward(&a, &b, g, s, i * 8..(i + 1) * 8)).unwrap();

            for id in full.ids() {
                for (p, q) in full.get(id).data().iter().zip(acc.get(id).data()) {
                    prop_assert!((p - q).abs() <= 1e-6 * p.abs().max(q.abs()).max(1e-12), "{} vs {}", p, q);
                }
            }
        }
    }

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            embed_dim: 8,
            depth: 1,
            stages: 2,
            ..BackboneConfig::resnet_small([3, 16, 16])
        }
    }

    #[test]
    fn pretrain_smoke_logs_and_checkpoints() {
        let data = synth_shapes(64, [3, 16, 16], ShapeLabels::Classes(4), 1).unwrap();
        let scfg = SiameseConfig {
            projection_dim: 16,
            ..SiameseConfig::default()
        };
        let (model, mut store) = SiameseModel::build::<f32>(&tiny_backbone(), &scfg, 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            accumulation: 2,
            epochs: 2,
            ..TrainConfig::pretrain()
        };
        let dir = tempfile::tempdir().unwrap();
        let mut log = MetricsLog::create(&dir.path().join("m.csv")).unwrap();
        let policy = AugmentationPolicy::default_for([3, 16, 16], 3);
        let report = train_pretrain(&model, &mut store, &data, &policy, &cfg, &mut log, Some(dir.path())).unwrap();
        assert_eq!(report.steps, 4);
        assert_eq!(report.peak_lr, 1e-3 * 32.0 / 256.0);
        let losses = log.values("train", "loss");
        assert_eq!(losses.len(), 4);
        assert!(losses.iter().all(|(_, l)| (-1.0..=1.0).contains(l)));
        assert!(dir.path().join("final.ckpt").exists());
        assert!(dir.path().join("best.ckpt").exists());
        let ck = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
        assert_eq!(ck.entries.len(), store.len());

        let bad = TrainConfig {
            batch_size: 128,
            ..cfg
        };
        assert!(matches!(
            train_pretrain(&model, &mut store, &data, &policy, &bad, &mut MetricsLog::in_memory(), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_lr_finetune_leaves_weights_unchanged() {
        let data = synth_shapes(40, [3, 16, 16], ShapeLabels::Classes(2), 4).unwrap();
        let (clf, mut store) = Classifier::build::<f32>(&tiny_backbone(), 2, false, 5).unwrap();
        let before: Vec<Vec<u32>> = store
            .trainable_ids()
            .map(|id| store.get(id).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        let cfg = TrainConfig {
            base_lr: 0.0,
            batch_size: 8,
            accumulation: 1,
            epochs: 2,
            ..TrainConfig::finetune(LossKind::CrossEntropy)
        };
        let mut log = MetricsLog::in_memory();
        let report = train_supervised(&clf, &mut store, &data, None, &cfg, &mut log, None).unwrap();
        let after: Vec<Vec<u32>> = store
            .trainable_ids()
            .map(|id| store.get(id).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
        assert_eq!(report.val_history.len(), 2);
    }

    #[test]
    fn probe_beats_chance_on_two_classes() {
        let data = synth_shapes(200, [3, 16, 16], ShapeLabels::Classes(2), 6).unwrap();
        let (clf, mut store) = Classifier::build::<f32>(&tiny_backbone(), 2, false, 7).unwrap();
        let frozen: Vec<f32> = store.get(store.id("backbone.stem.conv.weight").unwrap_or_else(|| store.ids().next().unwrap())).data().to_vec();
        let cfg = TrainConfig {
            batch_size: 32,
            accumulation: 1,
            epochs: 10,
            base_lr: 1e-2,
            ..TrainConfig::probe(LossKind::CrossEntropy)
        };
        let mut log = MetricsLog::in_memory();
        let report = train_supervised(&clf, &mut store, &data, None, &cfg, &mut log, None).unwrap();
        assert!(report.best_val > 0.5, "{report:?}");
        let first = store.ids().next().unwrap();
        assert_eq!(store.get(first).data(), frozen.as_slice());
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let data = synth_shapes(40, [3, 16, 16], ShapeLabels::Attributes(3), 4).unwrap();
        let (clf, mut store) = Classifier::build::<f32>(&tiny_backbone(), 3, false, 5).unwrap();
        let cfg = TrainConfig::finetune(LossKind::CrossEntropy);
        assert!(matches!(
            train_supervised(&clf, &mut store, &data, None, &cfg, &mut MetricsLog::in_memory(), None),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn multi_label_evaluation_reports_four_metrics() {
        let data = synth_shapes(60, [3, 16, 16], ShapeLabels::Attributes(3), 8).unwrap();
        let (clf, mut store) = Classifier::build::<f32>(&tiny_backbone(), 3, true, 9).unwrap();
        let m = evaluate(&clf, &mut store, &data).unwrap();
        let table = m.table();
        assert_eq!(table.len(), 4);
        assert!(table.iter().all(|(_, v)| (0.0..=1.0).contains(v)));
        assert_eq!(evaluate(&clf, &mut store, &data).unwrap(), m);
    }
}
