//! Training loops for the three phases, plus evaluation and prediction.
//!
//! Every phase follows the same skeleton: shuffle, minibatch forward and
//! backward, optimizer step, batch-norm commit, then a full validation
//! pass whose loss history drives the learning-rate schedule and whose
//! metric decides checkpointing. The returned network always carries the
//! best-epoch weights, not the last ones.

use super::checkpoint::{save_backbone, save_fusion, CheckpointMeta};
use super::config::PipelineConfig;
use super::PipelineError;
use crate::data::{augment, class_weights, AugmentPolicy, Dataset, NUM_CLASSES};
use crate::metrics::{self, ConfusionMatrix, MetricsReport};
use crate::nn::{
    build_fusion_mlp, FusionNet, HeadKind, LossKind, Mode, Network, ParamKind, Pass, PROB_CLAMP,
};
use crate::optim::{AdamState, LrSchedule, Optimizer, SgdState};
use crate::parallel;
use crate::rng::{self, stream};
use crate::tensor::{Tape, Tensor};
use rand::seq::SliceRandom;
use std::path::Path;

/// Which phase a [`TrainPhase`] belongs to; also tags its shuffle stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseName {
    Classification,
    Regression,
    Fusion,
}

impl PhaseName {
    fn tag(self) -> u64 {
        match self {
            PhaseName::Classification => 1,
            PhaseName::Regression => 2,
            PhaseName::Fusion => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PhaseName::Classification => "classification",
            PhaseName::Regression => "regression",
            PhaseName::Fusion => "fusion",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Everything one training phase needs besides the data and the network.
#[derive(Debug, Clone)]
pub struct TrainPhase {
    pub name: PhaseName,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub loss: LossKind,
    /// Weight the loss by inverse class frequency of the training split.
    pub class_weighted: bool,
    /// L2 strength, applied to kernels only.
    pub l2: f64,
    /// Augmentation applied to training batches (never to validation).
    pub augment: Option<AugmentPolicy>,
}

/// One line of training history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub lr: f64,
    pub momentum: Option<f64>,
    pub train_loss: f64,
    /// Unweighted validation loss; this is what the schedule sees.
    pub val_loss: f64,
    /// Validation accuracy, or MSE for the regression phase.
    pub val_metric: f64,
    /// Whether this epoch became the new best (and was checkpointed).
    pub improved: bool,
}

/// Full record of one phase. `best_epoch` is 1-based.
#[derive(Debug, Clone)]
pub struct History {
    pub phase: PhaseName,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
}

impl History {
    pub fn val_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_loss).collect()
    }
}

/// Progress callback, invoked once per finished epoch. Pass
/// `&mut |_, _| {}` to ignore it.
pub type Progress<'a> = &'a mut dyn FnMut(PhaseName, &EpochRecord);

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn non_finite_node(tape: &Tape<f32>) -> String {
    match tape.first_non_finite() {
        Some((i, Some(label))) => format!("`{label}` (node {i})"),
        Some((i, None)) => format!("node {i}"),
        None => "the loss reduction".to_string(),
    }
}

/// Every sample must match the network's input geometry.
fn check_shapes(input: (usize, usize, usize), data: &Dataset) -> Result<(), PipelineError> {
    let expected = vec![input.2, input.0, input.1];
    for s in &data.samples {
        if s.image.shape() != expected.as_slice() {
            return Err(PipelineError::SampleShape {
                id: s.id.clone(),
                expected,
                got: s.image.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Stack the chosen samples into one `[n, c, h, w]` batch, augmenting
/// each with its own derived stream so sample identity, not batch
/// position, decides the transform.
fn batch_images(
    data: &Dataset,
    idxs: &[usize],
    augment_with: Option<(&AugmentPolicy, usize)>,
) -> (Tensor<f32>, Vec<usize>) {
    let shape = data.samples[idxs[0]].image.shape().to_vec();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let images: Vec<Tensor<f32>> = parallel::map_indexed(idxs.len(), |j| {
        let sample = &data.samples[idxs[j]];
        match augment_with {
            Some((policy, epoch)) => {
                let mut rng = rng::derive(
                    policy.seed,
                    &[stream::AUGMENT, idxs[j] as u64, epoch as u64],
                );
                augment(sample, policy, &mut rng).image
            }
            None => sample.image.clone(),
        }
    });
    let mut buf = Vec::with_capacity(idxs.len() * c * h * w);
    for img in &images {
        buf.extend_from_slice(img.data());
    }
    let stages = idxs.iter().map(|&i| data.samples[i].stage).collect();
    (
        Tensor::new(vec![idxs.len(), c, h, w], buf).expect("buffer sized to shape"),
        stages,
    )
}

/// Per-class loss weights if the phase asks for them. Weights embedded in
/// the loss itself take precedence over recomputing from the split.
fn resolve_weights(phase: &TrainPhase, train: &Dataset) -> Result<Option<Vec<f32>>, PipelineError> {
    match &phase.loss {
        LossKind::CrossEntropy {
            class_weights: Some(w),
        } => Ok(Some(w.iter().map(|&v| v as f32).collect())),
        LossKind::CrossEntropy {
            class_weights: None,
        } if phase.class_weighted => Ok(Some(class_weights(&train.counts())?.as_vec::<f32>())),
        _ => Ok(None),
    }
}

fn sample_weights(stages: &[usize], weights: Option<&[f32]>) -> Option<Vec<f32>> {
    weights.map(|w| stages.iter().map(|&s| w[s]).collect())
}

fn make_optimizer(phase: &TrainPhase, sizes: &[usize]) -> Optimizer<f32> {
    let base = phase.schedule.at(1, &[]);
    match phase.optimizer {
        OptimizerKind::Sgd => Optimizer::Sgd(SgdState::new(
            base.lr as f32,
            base.momentum.unwrap_or(0.0) as f32,
            sizes,
        )),
        OptimizerKind::Adam => Optimizer::Adam(AdamState::new(base.lr as f32, 0.9, 0.999, sizes)),
    }
}

/// Apply one optimizer step from the gradients bound in `pass`.
fn apply_grads(
    pass: &Pass<f32>,
    store: &mut crate::nn::ParamStore<f32>,
    opt: &mut Optimizer<f32>,
    l2: f64,
) {
    opt.begin_step();
    for &(slot, var) in pass.bound() {
        let g = pass.tape().grad(var).expect("trainable leaf has a gradient");
        let decay = if store.params[slot].kind == ParamKind::Kernel {
            l2 as f32
        } else {
            0.0
        };
        opt.step(slot, store.params[slot].value.data_mut(), g, decay);
    }
}

/// Track the best validation metric and the weights that produced it.
struct Best {
    metric: f64,
    epoch: usize,
    store: Option<crate::nn::ParamStore<f32>>,
    higher_is_better: bool,
}

impl Best {
    fn new(higher_is_better: bool) -> Self {
        Self {
            metric: if higher_is_better {
                f64::NEG_INFINITY
            } else {
                f64::INFINITY
            },
            epoch: 0,
            store: None,
            higher_is_better,
        }
    }

    fn offer(&mut self, metric: f64, epoch: usize, store: &crate::nn::ParamStore<f32>) -> bool {
        let improved = if self.higher_is_better {
            metric > self.metric
        } else {
            metric < self.metric
        };
        if improved {
            self.metric = metric;
            self.epoch = epoch;
            self.store = Some(store.clone());
        }
        improved
    }
}

/// Validation loss and metric for a backbone. Loss is unweighted cross
/// entropy (classification) or MSE (regression); the metric is accuracy
/// or, for regression, the loss itself.
fn validate_backbone(
    net: &Network<f32>,
    val: &Dataset,
    batch_size: usize,
) -> Result<(f64, f64), PipelineError> {
    let idxs: Vec<usize> = (0..val.len()).collect();
    let mut loss_sum = 0.0;
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for chunk in idxs.chunks(batch_size) {
        let (x, stages) = batch_images(val, chunk, None);
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape, Mode::Eval, false);
        let xv = pass.input(x);
        let out = net.forward(&mut pass, xv)?;
        let loss = match net.spec.head {
            HeadKind::Classification => {
                let probs = pass.tape().value(out.output);
                for (j, &stage) in stages.iter().enumerate() {
                    let row = &probs.data()[j * NUM_CLASSES..(j + 1) * NUM_CLASSES];
                    cm.accumulate(stage, argmax(row))?;
                }
                pass.tape_mut()
                    .cross_entropy(out.output, &stages, None, PROB_CLAMP as f32)?
            }
            HeadKind::Regression => {
                let targets: Vec<f32> = stages
                    .iter()
                    .map(|&s| crate::data::regression_target(s))
                    .collect();
                pass.tape_mut().mse(out.output, &targets, None)?
            }
        };
        loss_sum += pass.tape().value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    let loss = loss_sum / val.len() as f64;
    let metric = match net.spec.head {
        HeadKind::Classification => metrics::accuracy(&cm)?,
        HeadKind::Regression => loss,
    };
    Ok((loss, metric))
}

/// Train one backbone phase. On each validation improvement the current
/// weights (and optimizer state) go to `checkpoint`, if given; when the
/// loop ends the best weights are restored into `net`.
pub fn train_phase(
    net: &mut Network<f32>,
    train: &Dataset,
    val: &Dataset,
    phase: &TrainPhase,
    seed: u64,
    checkpoint: Option<&Path>,
    progress: Progress,
) -> Result<History, PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::EmptySplit { what: "training" });
    }
    if val.is_empty() {
        return Err(PipelineError::EmptySplit { what: "validation" });
    }
    if phase.batch_size == 0 {
        return Err(PipelineError::Config("batch_size must be positive".into()));
    }
    check_shapes(net.spec.input, train)?;
    check_shapes(net.spec.input, val)?;
    if let Some(policy) = &phase.augment {
        policy.validate()?;
    }
    let weights = resolve_weights(phase, train)?;
    let mut opt = make_optimizer(phase, &net.store.sizes());
    let mut best = Best::new(net.spec.head == HeadKind::Classification);
    let mut history = History {
        phase: phase.name,
        records: Vec::with_capacity(phase.epochs),
        best_epoch: 0,
        best_metric: f64::NAN,
    };

    for epoch in 1..=phase.epochs {
        let rates = phase.schedule.at(epoch, &history.val_losses());
        opt.set_rates(rates.lr, rates.momentum);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::derive(
            seed,
            &[stream::SHUFFLE, phase.name.tag(), epoch as u64],
        ));
        let augment_with = phase
            .augment
            .as_ref()
            .filter(|p| !p.is_identity())
            .map(|p| (p, epoch));

        let mut train_loss_sum = 0.0;
        for (step, chunk) in order.chunks(phase.batch_size).enumerate() {
            let (x, stages) = batch_images(train, chunk, augment_with);
            let mut tape = Tape::new();
            let mut pass = Pass::new(&mut tape, Mode::Train, true);
            let xv = pass.input(x);
            let out = net.forward(&mut pass, xv)?;
            let loss = match net.spec.head {
                HeadKind::Classification => {
                    let sw = sample_weights(&stages, weights.as_deref());
                    pass.tape_mut().cross_entropy(
                        out.output,
                        &stages,
                        sw.as_deref(),
                        PROB_CLAMP as f32,
                    )?
                }
                HeadKind::Regression => {
                    let targets: Vec<f32> = stages
                        .iter()
                        .map(|&s| crate::data::regression_target(s))
                        .collect();
                    pass.tape_mut().mse(out.output, &targets, None)?
                }
            };
            let lval = pass.tape().value(loss).data()[0] as f64;
            if !lval.is_finite() {
                return Err(PipelineError::NonFinite {
                    epoch,
                    step,
                    node: non_finite_node(pass.tape()),
                });
            }
            pass.tape_mut().backward(loss)?;
            apply_grads(&pass, &mut net.store, &mut opt, phase.l2);
            pass.commit_bn(&mut net.store);
            train_loss_sum += lval * chunk.len() as f64;
        }

        let (val_loss, val_metric) = validate_backbone(net, val, phase.batch_size)?;
        let improved = best.offer(val_metric, epoch, &net.store);
        if improved {
            if let Some(path) = checkpoint {
                let meta = CheckpointMeta {
                    best_metric: val_metric,
                    epoch,
                    seed,
                };
                save_backbone(path, net, Some(&opt), &meta)?;
            }
        }
        let record = EpochRecord {
            epoch,
            lr: rates.lr,
            momentum: rates.momentum,
            train_loss: train_loss_sum / train.len() as f64,
            val_loss,
            val_metric,
            improved,
        };
        progress(phase.name, &record);
        history.records.push(record);
    }

    if let Some(store) = best.store.take() {
        net.store = store;
        history.best_epoch = best.epoch;
        history.best_metric = best.metric;
    }
    Ok(history)
}

/// Pooled features of both frozen backbones, concatenated
/// (classification first), for one image batch.
fn frozen_features(
    cls: &Network<f32>,
    reg: &Network<f32>,
    images: Tensor<f32>,
) -> Result<Tensor<f32>, PipelineError> {
    let mut tape = Tape::new();
    let mut pass = Pass::new(&mut tape, Mode::Eval, false);
    let x = pass.input(images);
    let a = cls.forward(&mut pass, x)?.features;
    let b = reg.forward(&mut pass, x)?.features;
    let cat = pass.tape_mut().concat_channels(a, b)?;
    Ok(pass.tape().value(cat).clone())
}

/// Features for a whole split, batched to bound memory: `[n, in_dim]`.
fn extract_features(
    cls: &Network<f32>,
    reg: &Network<f32>,
    data: &Dataset,
    batch_size: usize,
) -> Result<Tensor<f32>, PipelineError> {
    let idxs: Vec<usize> = (0..data.len()).collect();
    let dim = cls.spec.feature_dim() + reg.spec.feature_dim();
    let mut buf = Vec::with_capacity(data.len() * dim);
    for chunk in idxs.chunks(batch_size) {
        let (x, _) = batch_images(data, chunk, None);
        let f = frozen_features(cls, reg, x)?;
        buf.extend_from_slice(f.data());
    }
    Ok(Tensor::new(vec![data.len(), dim], buf).expect("buffer sized to shape"))
}

fn feature_rows(features: &Tensor<f32>, idxs: &[usize]) -> Tensor<f32> {
    let dim = features.shape()[1];
    let mut buf = Vec::with_capacity(idxs.len() * dim);
    for &i in idxs {
        buf.extend_from_slice(&features.data()[i * dim..(i + 1) * dim]);
    }
    Tensor::new(vec![idxs.len(), dim], buf).expect("buffer sized to shape")
}

fn validate_fusion(
    fusion: &FusionNet<f32>,
    features: &Tensor<f32>,
    stages: &[usize],
    batch_size: usize,
) -> Result<(f64, f64), PipelineError> {
    let idxs: Vec<usize> = (0..stages.len()).collect();
    let mut loss_sum = 0.0;
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for chunk in idxs.chunks(batch_size) {
        let f = feature_rows(features, chunk);
        let targets: Vec<usize> = chunk.iter().map(|&i| stages[i]).collect();
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape, Mode::Eval, false);
        let fv = pass.input(f);
        let probs = fusion.forward(&mut pass, fv)?;
        let pv = pass.tape().value(probs);
        for (j, &stage) in targets.iter().enumerate() {
            let row = &pv.data()[j * NUM_CLASSES..(j + 1) * NUM_CLASSES];
            cm.accumulate(stage, argmax(row))?;
        }
        let loss = pass
            .tape_mut()
            .cross_entropy(probs, &targets, None, PROB_CLAMP as f32)?;
        loss_sum += pass.tape().value(loss).data()[0] as f64 * chunk.len() as f64;
    }
    Ok((loss_sum / stages.len() as f64, metrics::accuracy(&cm)?))
}

/// Train the fusion MLP over frozen backbones. The backbones are taken
/// immutably, so this phase cannot touch their weights or statistics.
/// Without augmentation their features are extracted once up front;
/// with it, each batch is re-augmented and pushed through the frozen
/// backbones fresh.
pub fn train_fusion_phase(
    fusion: &mut FusionNet<f32>,
    cls: &Network<f32>,
    reg: &Network<f32>,
    train: &Dataset,
    val: &Dataset,
    phase: &TrainPhase,
    seed: u64,
    checkpoint: Option<&Path>,
    progress: Progress,
) -> Result<History, PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::EmptySplit { what: "training" });
    }
    if val.is_empty() {
        return Err(PipelineError::EmptySplit { what: "validation" });
    }
    if phase.batch_size == 0 {
        return Err(PipelineError::Config("batch_size must be positive".into()));
    }
    if cls.spec.input != reg.spec.input {
        return Err(PipelineError::FusionInputMismatch {
            cls: cls.spec.input,
            reg: reg.spec.input,
        });
    }
    let dim = cls.spec.feature_dim() + reg.spec.feature_dim();
    if fusion.in_dim != dim {
        return Err(PipelineError::Config(format!(
            "fusion network expects {} features but the backbones produce {dim}",
            fusion.in_dim
        )));
    }
    check_shapes(cls.spec.input, train)?;
    check_shapes(cls.spec.input, val)?;
    if let Some(policy) = &phase.augment {
        policy.validate()?;
    }
    let weights = resolve_weights(phase, train)?;
    let mut opt = make_optimizer(phase, &fusion.store.sizes());
    let mut best = Best::new(true);
    let mut history = History {
        phase: phase.name,
        records: Vec::with_capacity(phase.epochs),
        best_epoch: 0,
        best_metric: f64::NAN,
    };

    let augment_policy = phase.augment.as_ref().filter(|p| !p.is_identity());
    let train_features = match augment_policy {
        None => Some(extract_features(cls, reg, train, phase.batch_size)?),
        Some(_) => None,
    };
    let val_features = extract_features(cls, reg, val, phase.batch_size)?;
    let val_stages: Vec<usize> = val.samples.iter().map(|s| s.stage).collect();

    for epoch in 1..=phase.epochs {
        let rates = phase.schedule.at(epoch, &history.val_losses());
        opt.set_rates(rates.lr, rates.momentum);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::derive(
            seed,
            &[stream::SHUFFLE, phase.name.tag(), epoch as u64],
        ));

        let mut train_loss_sum = 0.0;
        for (step, chunk) in order.chunks(phase.batch_size).enumerate() {
            let (f, stages) = match (&train_features, augment_policy) {
                (Some(features), _) => (
                    feature_rows(features, chunk),
                    chunk.iter().map(|&i| train.samples[i].stage).collect(),
                ),
                (None, Some(policy)) => {
                    let (x, stages) = batch_images(train, chunk, Some((policy, epoch)));
                    (frozen_features(cls, reg, x)?, stages)
                }
                (None, None) => unreachable!("features precomputed when augmentation is off"),
            };
            let sw = sample_weights(&stages, weights.as_deref());
            let mut tape = Tape::new();
            let mut pass = Pass::new(&mut tape, Mode::Train, true);
            let fv = pass.input(f);
            let probs = fusion.forward(&mut pass, fv)?;
            let loss =
                pass.tape_mut()
                    .cross_entropy(probs, &stages, sw.as_deref(), PROB_CLAMP as f32)?;
            let lval = pass.tape().value(loss).data()[0] as f64;
            if !lval.is_finite() {
                return Err(PipelineError::NonFinite {
                    epoch,
                    step,
                    node: non_finite_node(pass.tape()),
                });
            }
            pass.tape_mut().backward(loss)?;
            apply_grads(&pass, &mut fusion.store, &mut opt, phase.l2);
            pass.commit_bn(&mut fusion.store);
            train_loss_sum += lval * chunk.len() as f64;
        }

        let (val_loss, val_metric) =
            validate_fusion(fusion, &val_features, &val_stages, phase.batch_size)?;
        let improved = best.offer(val_metric, epoch, &fusion.store);
        if improved {
            if let Some(path) = checkpoint {
                let meta = CheckpointMeta {
                    best_metric: val_metric,
                    epoch,
                    seed,
                };
                save_fusion(path, fusion, Some(&opt), &meta)?;
            }
        }
        let record = EpochRecord {
            epoch,
            lr: rates.lr,
            momentum: rates.momentum,
            train_loss: train_loss_sum / train.len() as f64,
            val_loss,
            val_metric,
            improved,
        };
        progress(phase.name, &record);
        history.records.push(record);
    }

    if let Some(store) = best.store.take() {
        fusion.store = store;
        history.best_epoch = best.epoch;
        history.best_metric = best.metric;
    }
    Ok(history)
}

/// The full three-network model.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cls: Network<f32>,
    pub reg: Network<f32>,
    pub fusion: FusionNet<f32>,
}

impl FusionModel {
    /// Check that the three parts actually fit together.
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.cls.spec.input != self.reg.spec.input {
            return Err(PipelineError::FusionInputMismatch {
                cls: self.cls.spec.input,
                reg: self.reg.spec.input,
            });
        }
        let dim = self.cls.spec.feature_dim() + self.reg.spec.feature_dim();
        if self.fusion.in_dim != dim {
            return Err(PipelineError::Config(format!(
                "fusion network expects {} features but the backbones produce {dim}",
                self.fusion.in_dim
            )));
        }
        Ok(())
    }
}

/// One prediction: the fused distribution, its argmax, and the raw
/// regression severity.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f32>,
    pub stage: usize,
    pub severity: f32,
}

/// Predict a single canonical `[c, h, w]` image.
pub fn predict(model: &FusionModel, image: &Tensor<f32>) -> Result<Prediction, PipelineError> {
    model.validate()?;
    let (h, w, c) = model.cls.spec.input;
    if image.shape() != [c, h, w] {
        return Err(PipelineError::SampleShape {
            id: "input".into(),
            expected: vec![c, h, w],
            got: image.shape().to_vec(),
        });
    }
    let batch = Tensor::new(vec![1, c, h, w], image.data().to_vec()).expect("same buffer");
    let mut tape = Tape::new();
    let mut pass = Pass::new(&mut tape, Mode::Eval, false);
    let x = pass.input(batch);
    let cls_out = model.cls.forward(&mut pass, x)?;
    let reg_out = model.reg.forward(&mut pass, x)?;
    let cat = pass
        .tape_mut()
        .concat_channels(cls_out.features, reg_out.features)?;
    let probs_var = model.fusion.forward(&mut pass, cat)?;
    let probs = pass.tape().value(probs_var).data().to_vec();
    let severity = pass.tape().value(reg_out.output).data()[0];
    Ok(Prediction {
        stage: argmax(&probs),
        probs,
        severity,
    })
}

/// Confusion matrix and metrics of the fused model over a split. Never
/// augments; errors on an empty split.
pub fn evaluate(
    model: &FusionModel,
    data: &Dataset,
    batch_size: usize,
) -> Result<(ConfusionMatrix, MetricsReport), PipelineError> {
    model.validate()?;
    if data.is_empty() {
        return Err(PipelineError::EmptySplit { what: "evaluation" });
    }
    if batch_size == 0 {
        return Err(PipelineError::Config("batch_size must be positive".into()));
    }
    check_shapes(model.cls.spec.input, data)?;
    let features = extract_features(&model.cls, &model.reg, data, batch_size)?;
    let stages: Vec<usize> = data.samples.iter().map(|s| s.stage).collect();
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    let idxs: Vec<usize> = (0..data.len()).collect();
    for chunk in idxs.chunks(batch_size) {
        let f = feature_rows(&features, chunk);
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape, Mode::Eval, false);
        let fv = pass.input(f);
        let probs = model.fusion.forward(&mut pass, fv)?;
        let pv = pass.tape().value(probs);
        for (j, &i) in chunk.iter().enumerate() {
            let row = &pv.data()[j * NUM_CLASSES..(j + 1) * NUM_CLASSES];
            cm.accumulate(stages[i], argmax(row))?;
        }
    }
    let report = metrics::report(&cm)?;
    Ok((cm, report))
}

/// Same as [`evaluate`] but for a lone classification backbone.
pub fn evaluate_classifier(
    net: &Network<f32>,
    data: &Dataset,
    batch_size: usize,
) -> Result<(ConfusionMatrix, MetricsReport), PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::EmptySplit { what: "evaluation" });
    }
    if batch_size == 0 {
        return Err(PipelineError::Config("batch_size must be positive".into()));
    }
    check_shapes(net.spec.input, data)?;
    let idxs: Vec<usize> = (0..data.len()).collect();
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for chunk in idxs.chunks(batch_size) {
        let (x, stages) = batch_images(data, chunk, None);
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape, Mode::Eval, false);
        let xv = pass.input(x);
        let out = net.forward(&mut pass, xv)?;
        let pv = pass.tape().value(out.output);
        for (j, &stage) in stages.iter().enumerate() {
            let row = &pv.data()[j * NUM_CLASSES..(j + 1) * NUM_CLASSES];
            cm.accumulate(stage, argmax(row))?;
        }
    }
    let report = metrics::report(&cm)?;
    Ok((cm, report))
}

/// Mean regression output per true stage; `NaN` for stages absent from
/// the split. A well-ordered regressor yields a strictly increasing row.
pub fn severity_by_stage(
    reg: &Network<f32>,
    data: &Dataset,
    batch_size: usize,
) -> Result<[f64; NUM_CLASSES], PipelineError> {
    if data.is_empty() {
        return Err(PipelineError::EmptySplit { what: "evaluation" });
    }
    if batch_size == 0 {
        return Err(PipelineError::Config("batch_size must be positive".into()));
    }
    check_shapes(reg.spec.input, data)?;
    let mut sums = [0.0f64; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    let idxs: Vec<usize> = (0..data.len()).collect();
    for chunk in idxs.chunks(batch_size) {
        let (x, stages) = batch_images(data, chunk, None);
        let mut tape = Tape::new();
        let mut pass = Pass::new(&mut tape, Mode::Eval, false);
        let xv = pass.input(x);
        let out = reg.forward(&mut pass, xv)?;
        let pv = pass.tape().value(out.output);
        for (j, &stage) in stages.iter().enumerate() {
            sums[stage] += pv.data()[j] as f64;
            counts[stage] += 1;
        }
    }
    let mut means = [f64::NAN; NUM_CLASSES];
    for s in 0..NUM_CLASSES {
        if counts[s] > 0 {
            means[s] = sums[s] / counts[s] as f64;
        }
    }
    Ok(means)
}

/// Everything [`train_multitask`] produces.
pub struct MultitaskOutcome {
    pub model: FusionModel,
    pub cls: History,
    pub reg: History,
    pub fusion: History,
    /// Final fused-model evaluation on the validation split.
    pub confusion: ConfusionMatrix,
    pub report: MetricsReport,
}

/// Run all three phases: classification backbone, regression backbone,
/// then the fusion MLP over both frozen. Initialization draws come from
/// `seed`, `seed + 1`, and `seed + 2` respectively. With `out_dir` set,
/// best checkpoints land in `cls.ckpt`, `reg.ckpt`, and `fusion.ckpt`.
pub fn train_multitask(
    cfg: &PipelineConfig,
    train: &Dataset,
    val: &Dataset,
    seed: u64,
    out_dir: Option<&Path>,
    progress: Progress,
) -> Result<MultitaskOutcome, PipelineError> {
    cfg.validate()?;
    let ckpt = |name: &str| out_dir.map(|d| d.join(name));
    let mut cls = crate::nn::build_sedensenet::<f32>(&cfg.spec(HeadKind::Classification), seed)?;
    let cls_history = train_phase(
        &mut cls,
        train,
        val,
        &cfg.phase(PhaseName::Classification, seed),
        seed,
        ckpt("cls.ckpt").as_deref(),
        &mut *progress,
    )?;
    let mut reg = crate::nn::build_sedensenet::<f32>(
        &cfg.spec(HeadKind::Regression),
        seed.wrapping_add(1),
    )?;
    let reg_history = train_phase(
        &mut reg,
        train,
        val,
        &cfg.phase(PhaseName::Regression, seed),
        seed,
        ckpt("reg.ckpt").as_deref(),
        &mut *progress,
    )?;
    let mut fusion = build_fusion_mlp::<f32>(
        cls.spec.feature_dim(),
        reg.spec.feature_dim(),
        cfg.num_classes,
        seed.wrapping_add(2),
    );
    let fusion_history = train_fusion_phase(
        &mut fusion,
        &cls,
        &reg,
        train,
        val,
        &cfg.phase(PhaseName::Fusion, seed),
        seed,
        ckpt("fusion.ckpt").as_deref(),
        &mut *progress,
    )?;
    let model = FusionModel { cls, reg, fusion };
    let (confusion, report) = evaluate(&model, val, cfg.batch_size)?;
    Ok(MultitaskOutcome {
        model,
        cls: cls_history,
        reg: reg_history,
        fusion: fusion_history,
        confusion,
        report,
    })
}
