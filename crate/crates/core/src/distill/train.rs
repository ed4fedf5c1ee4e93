//! Block training on local activations, in-context evaluation, student
//! reassembly, fine-tuning, and plain supervised training of the teacher.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::{debug, info};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::model::{Block, BlockCache, ModelSpec, Network, Trainable};
use crate::replacement::{build_candidate, CandidateKind, ReplacementBlock};
use crate::tensor::{ops, Mode, Sgd, Tensor};

pub const DEFAULT_BLOCK_EPOCHS: usize = 30;
pub const DEFAULT_EVAL_EVERY: usize = 2;
pub const DEFAULT_FINETUNE_EPOCHS: usize = 20;
pub const DEFAULT_BATCH: usize = 32;
pub const DEFAULT_BLOCK_LR: f64 = 0.05;
pub const DEFAULT_FINETUNE_LR: f64 = 0.005;
pub const DEFAULT_MOMENTUM: f64 = 0.9;
pub const DEFAULT_LAMBDA_LOCAL: f64 = 1.0;
const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Minimise the local MSE only.
    #[default]
    LocalOnly,
    /// `λ·L_local + L_cls`, with `L_cls` through the frozen teacher remainder.
    Combined,
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::LocalOnly => "local_only",
            LossMode::Combined => "combined",
        })
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "local_only" | "local" => Ok(LossMode::LocalOnly),
            "combined" => Ok(LossMode::Combined),
            _ => Err(Error::invalid(format!("unknown loss mode `{s}`"))),
        }
    }
}

/// One unit of parallel work: train a replacement for one teacher block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillTask {
    pub block_index: usize,
    pub epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
    pub threshold: f64,
    pub loss_mode: LossMode,
    pub lambda_local: f64,
    pub candidate: CandidateKind,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub max_steps: Option<usize>,
}

impl DistillTask {
    pub fn new(block_index: usize, seed: u64) -> Self {
        Self {
            block_index,
            epochs: DEFAULT_BLOCK_EPOCHS,
            eval_every: DEFAULT_EVAL_EVERY,
            seed,
            threshold: 0.0,
            loss_mode: LossMode::LocalOnly,
            lambda_local: DEFAULT_LAMBDA_LOCAL,
            candidate: CandidateKind::TwoLayer,
            batch_size: DEFAULT_BATCH,
            lr: DEFAULT_BLOCK_LR,
            momentum: DEFAULT_MOMENTUM,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be at least 1"));
        }
        if self.eval_every == 0 || self.eval_every > self.epochs {
            return Err(Error::invalid(format!(
                "eval_every {} must be in 1..={}",
                self.eval_every, self.epochs
            )));
        }
        if !(self.threshold.is_finite() && self.threshold >= 0.0) {
            return Err(Error::invalid(format!("threshold {} must be non-negative", self.threshold)));
        }
        if !(self.lambda_local >= 0.0 && self.lambda_local.is_finite()) {
            return Err(Error::invalid(format!("lambda_local {} must be non-negative", self.lambda_local)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::invalid("max_steps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedBlockResult {
    pub block_index: usize,
    /// Best-evaluated weights.
    pub block: ReplacementBlock,
    /// `(epoch, top-1)` at every multiple of `eval_every`.
    pub eval_history: Vec<(usize, f64)>,
    /// Mean local loss per epoch; entry 0 is measured before any update.
    pub loss_history: Vec<f64>,
    pub final_local_loss: f64,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub steps: usize,
    pub wall_time: f64,
}

/// The serializable part of a [`TrainedBlockResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block_index: usize,
    pub candidate: CandidateKind,
    pub eval_history: Vec<(usize, f64)>,
    pub loss_history: Vec<f64>,
    pub final_local_loss: f64,
    pub best_accuracy: f64,
    pub best_epoch: usize,
    pub steps: usize,
    pub wall_time: f64,
}

impl TrainedBlockResult {
    pub fn summary(&self) -> BlockSummary {
        BlockSummary {
            block_index: self.block_index,
            candidate: self.block.kind,
            eval_history: self.eval_history.clone(),
            loss_history: self.loss_history.clone(),
            final_local_loss: self.final_local_loss,
            best_accuracy: self.best_accuracy,
            best_epoch: self.best_epoch,
            steps: self.steps,
            wall_time: self.wall_time,
        }
    }
}

/// Top-1 accuracy of a full network.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let mut correct = 0usize;
    for idx in data.batches(EVAL_BATCH, None) {
        let (x, labels) = data.batch(&idx);
        let pred = ops::argmax_rows(&net.logits(&x)?);
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Accuracy of the teacher with block `k` swapped for `student`.
pub fn evaluate_with_student_block(
    teacher: &Network,
    k: usize,
    student: &ReplacementBlock,
    eval: &Dataset,
) -> Result<f64> {
    if eval.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let shapes = teacher.block_shapes(1)?;
    let out = student.output_shape(shapes[k])?;
    if out != shapes[k + 1] {
        return Err(Error::shape(format!("student block emits {out}, teacher block {k} emits {}", shapes[k + 1])));
    }
    let mut correct = 0usize;
    for idx in eval.batches(EVAL_BATCH, None) {
        let (x, labels) = eval.batch(&idx);
        let h = teacher.forward_blocks(&x, 0..k)?;
        let h = student.infer(&h)?;
        let h = teacher.forward_blocks(&h, k + 1..teacher.blocks.len())?;
        let pred = ops::argmax_rows(&teacher.classify(&h)?);
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / eval.len() as f64)
}

/// Loss components of one batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub local: f64,
    pub cls: f64,
}

/// Loss and its gradient with respect to the student block output.
/// `Combined` adds cross-entropy through the frozen remainder of the teacher
/// (inference-mode batch norm).
pub fn block_loss(
    teacher: &Network,
    k: usize,
    student_out: &Tensor,
    teacher_out: &Tensor,
    labels: &[usize],
    mode: LossMode,
    lambda_local: f64,
) -> Result<(LossTerms, Tensor)> {
    let (local, g_local) = ops::mse_local_loss(student_out, teacher_out)?;
    let local = f64::from(local);
    match mode {
        LossMode::LocalOnly => Ok((LossTerms { total: local, local, cls: 0.0 }, g_local)),
        LossMode::Combined => {
            let (cls, g_cls) = remainder_cross_entropy(teacher, k, student_out, labels)?;
            let lambda = lambda_local as f32;
            let mut g = g_cls;
            for (a, &b) in g.data_mut().iter_mut().zip(g_local.data()) {
                *a += lambda * b;
            }
            Ok((
                LossTerms {
                    total: lambda_local * local + cls,
                    local,
                    cls,
                },
                g,
            ))
        }
    }
}

/// Cross-entropy of the frozen teacher blocks after `k` plus classifier,
/// and its gradient with respect to their input.
pub fn remainder_cross_entropy(teacher: &Network, k: usize, input: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let rest = &teacher.blocks[k + 1..];
    let mut caches: Vec<BlockCache<f32>> = Vec::with_capacity(rest.len());
    let mut h = input.clone();
    for b in rest {
        let (y, c) = b.forward(&h, Mode::Infer)?;
        caches.push(c);
        h = y;
    }
    let (logits, cls_cache) = crate::model::network::seq_forward(&teacher.classifier, &h, Mode::Infer)?;
    let (loss, g) = ops::softmax_cross_entropy(&logits, labels)?;
    let (mut g, _) = crate::model::network::seq_backward(&teacher.classifier, &cls_cache, &g)?;
    for (b, c) in rest.iter().zip(&caches).rev() {
        g = b.backward(c, &g)?.0;
    }
    Ok((f64::from(loss), g))
}

fn diverged(what: &str, loss: f64) -> Error {
    Error::Diverged(format!("{what}: loss became {loss}"))
}

/// Build the task's candidate and train it.
pub fn train_block(teacher: &Network, task: &DistillTask, train: &Dataset, eval: &Dataset) -> Result<TrainedBlockResult> {
    let geometry = teacher.replaced_conv(task.block_index)?;
    let init = build_candidate(task.candidate, geometry, task.block_index, derive_seed(task.seed, 0))?;
    train_block_from(teacher, task, init, train, eval)
}

/// Train `init` to mimic teacher block `task.block_index` on local
/// activations. The teacher is only read.
pub fn train_block_from(
    teacher: &Network,
    task: &DistillTask,
    init: ReplacementBlock,
    train: &Dataset,
    eval: &Dataset,
) -> Result<TrainedBlockResult> {
    task.validate()?;
    let k = task.block_index;
    teacher.replaced_conv(k)?;
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if eval.is_empty() {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    let start = Instant::now();
    let steps_per_epoch = train.len().div_ceil(task.batch_size);
    let epochs = match task.max_steps {
        Some(m) => task.epochs.min(m.div_ceil(steps_per_epoch)),
        None => task.epochs,
    };
    if task.eval_every > epochs {
        return Err(Error::invalid(format!(
            "max_steps leaves {epochs} epochs, fewer than eval_every {}",
            task.eval_every
        )));
    }
    let max_steps = task.max_steps.unwrap_or(usize::MAX);
    let what = format!("block {k}");
    let teacher_block = &teacher.blocks[k];
    let local_pair = |x: &Tensor| -> Result<(Tensor, Tensor)> {
        let prev = teacher.forward_blocks(x, 0..k)?;
        let target = teacher_block.infer(&prev)?;
        Ok((prev, target))
    };

    let mut block = init;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(task.seed, 1));
    let mut opt = Sgd::new(task.lr, task.momentum)?;

    let mut initial = 0.0;
    let batches = train.batches(task.batch_size, None);
    for idx in &batches {
        let (x, _) = train.batch(idx);
        let (prev, target) = local_pair(&x)?;
        let (out, _) = block.forward(&prev, Mode::Train)?;
        initial += f64::from(ops::mse_local_loss(&out, &target)?.0);
    }
    let mut loss_history = vec![initial / batches.len() as f64];

    let mut eval_history = Vec::new();
    let mut best: Option<(f64, usize, ReplacementBlock)> = None;
    let mut steps = 0usize;
    for epoch in 1..=epochs {
        let mut sum = 0.0;
        let mut count = 0usize;
        for idx in train.batches(task.batch_size, Some(&mut rng)) {
            if steps >= max_steps {
                break;
            }
            let (x, labels) = train.batch(&idx);
            let (prev, target) = local_pair(&x)?;
            let (out, cache) = block.forward(&prev, Mode::Train)?;
            let (terms, g) = block_loss(teacher, k, &out, &target, &labels, task.loss_mode, task.lambda_local)?;
            if !terms.total.is_finite() {
                return Err(diverged(&format!("{what} epoch {epoch}"), terms.total));
            }
            let (_, grads) = block.backward(&cache, &g)?;
            block.update_moving_stats(&cache);
            opt.step(block.trainable_mut(), &grads)?;
            sum += terms.local;
            count += 1;
            steps += 1;
        }
        let mean = sum / count.max(1) as f64;
        if !mean.is_finite() {
            return Err(diverged(&format!("{what} epoch {epoch}"), mean));
        }
        // ReLU maps NaN to zero, so a poisoned block can still report a finite loss
        if let Some((name, _)) = block.named_weights(&what).into_iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged(format!("{what} epoch {epoch}: non-finite weights in {name}")));
        }
        loss_history.push(mean);
        if epoch % task.eval_every == 0 {
            let acc = evaluate_with_student_block(teacher, k, &block, eval)?;
            debug!("{what} epoch {epoch}: local loss {mean:.5}, top-1 {acc:.4}");
            eval_history.push((epoch, acc));
            if best.as_ref().is_none_or(|(b, _, _)| acc >= *b) {
                best = Some((acc, epoch, block.clone()));
            }
        }
    }
    let (best_accuracy, best_epoch, best_block) = best.expect("eval_every <= epochs");
    Ok(TrainedBlockResult {
        block_index: k,
        block: best_block,
        eval_history,
        final_local_loss: *loss_history.last().expect("non-empty"),
        loss_history,
        best_accuracy,
        best_epoch,
        steps,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Outcome of one task as seen by reassembly.
#[derive(Clone, Debug, PartialEq)]
pub enum BlockOutcome {
    Trained(TrainedBlockResult),
    Failed { block_index: usize, reason: String },
}

impl BlockOutcome {
    pub fn block_index(&self) -> usize {
        match self {
            BlockOutcome::Trained(r) => r.block_index,
            BlockOutcome::Failed { block_index, .. } => *block_index,
        }
    }
}

/// One line of the replacement log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplacementDecision {
    pub block_index: usize,
    pub block_name: String,
    pub best_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
    pub threshold: f64,
    pub replaced: bool,
    pub note: String,
}

/// Replace every block whose best accuracy is strictly above `threshold`.
pub fn reassemble(teacher: &Network, outcomes: &[BlockOutcome], threshold: f64) -> Result<(Network, Vec<ReplacementDecision>)> {
    let mut sorted: Vec<&BlockOutcome> = outcomes.iter().collect();
    sorted.sort_by_key(|o| o.block_index());
    if let Some(w) = sorted.windows(2).find(|w| w[0].block_index() == w[1].block_index()) {
        return Err(Error::invalid(format!("two results for block {}", w[0].block_index())));
    }
    let mut student = teacher.clone();
    let mut log = Vec::with_capacity(sorted.len());
    for o in sorted {
        let k = o.block_index();
        let name = teacher
            .spec
            .blocks
            .get(k)
            .ok_or_else(|| Error::invalid(format!("result for unknown block {k}")))?
            .name
            .clone();
        let decision = match o {
            BlockOutcome::Failed { reason, .. } => ReplacementDecision {
                block_index: k,
                block_name: name,
                best_accuracy: None,
                best_epoch: None,
                threshold,
                replaced: false,
                note: format!("task failed: {reason}"),
            },
            BlockOutcome::Trained(r) => {
                let replaced = r.best_accuracy > threshold;
                if replaced {
                    student = student.with_replacement(k, r.block.clone())?;
                }
                ReplacementDecision {
                    block_index: k,
                    block_name: name,
                    best_accuracy: Some(r.best_accuracy),
                    best_epoch: Some(r.best_epoch),
                    threshold,
                    replaced,
                    note: if replaced {
                        "accuracy above threshold".into()
                    } else {
                        "accuracy not above threshold".into()
                    },
                }
            }
        };
        info!(
            "block {k} `{}`: {}",
            decision.block_name,
            if decision.replaced { "replaced" } else { "kept" }
        );
        log.push(decision);
    }
    Ok((student, log))
}

/// Supervised training settings for the teacher and for fine-tuning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub max_steps: Option<usize>,
}

impl TrainParams {
    pub fn new(epochs: usize, lr: f64, seed: u64) -> Self {
        Self {
            epochs,
            batch_size: DEFAULT_BATCH,
            lr,
            momentum: DEFAULT_MOMENTUM,
            seed,
            max_steps: None,
        }
    }
}

/// Cross-entropy SGD on the trainable parts of `net`. Returns the mean loss
/// of every epoch.
pub fn train_network(net: &mut Network, trainable: &Trainable, data: &Dataset, params: &TrainParams) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    if params.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let mut history = Vec::with_capacity(params.epochs);
    if params.epochs == 0 || !trainable.any() {
        return Ok(history);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, 1));
    let mut opt = Sgd::new(params.lr, params.momentum)?;
    let max_steps = params.max_steps.unwrap_or(usize::MAX);
    let mut steps = 0usize;
    for epoch in 1..=params.epochs {
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in data.batches(params.batch_size, Some(&mut rng)) {
            if steps >= max_steps {
                break;
            }
            let (x, labels) = data.batch(&idx);
            let (logits, cache) = net.forward_train(&x, trainable)?;
            let (loss, g) = ops::softmax_cross_entropy(&logits, &labels)?;
            let loss = f64::from(loss);
            if !loss.is_finite() {
                return Err(diverged(&format!("{} epoch {epoch}", net.name()), loss));
            }
            let grads = net.backward(&cache, &g, trainable)?;
            let flat: Vec<Tensor> = grads
                .blocks
                .into_iter()
                .flatten()
                .flatten()
                .chain(grads.classifier.into_iter().flatten())
                .collect();
            net.update_moving_stats(&cache, trainable);
            opt.step(net.trainable_mut(trainable), &flat)?;
            sum += loss;
            count += 1;
            steps += 1;
        }
        if count == 0 {
            break;
        }
        let mean = sum / count as f64;
        if let Some((name, _)) = net.named_weights().into_iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged(format!("{} epoch {epoch}: non-finite weights in {name}", net.name())));
        }
        debug!("{} epoch {epoch}: loss {mean:.4}", net.name());
        history.push(mean);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherSummary {
    pub model: String,
    pub epochs: usize,
    pub loss_history: Vec<f64>,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

/// Train a teacher from seeded initial weights.
pub fn train_teacher(spec: &ModelSpec, train: &Dataset, eval: &Dataset, params: &TrainParams) -> Result<(Network, TeacherSummary)> {
    if train.image_shape() != spec.input_shape {
        return Err(Error::Dataset(format!(
            "images are {:?}, model `{}` expects {:?}",
            train.image_shape(),
            spec.name,
            spec.input_shape
        )));
    }
    let mut net = Network::from_spec(spec, derive_seed(params.seed, 0))?;
    let trainable = Trainable::all(net.blocks.len());
    let loss_history = train_network(&mut net, &trainable, train, params)?;
    let summary = TeacherSummary {
        model: spec.name.clone(),
        epochs: params.epochs,
        loss_history,
        train_accuracy: accuracy(&net, train)?,
        eval_accuracy: accuracy(&net, eval)?,
    };
    Ok((net, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneSummary {
    pub epochs: usize,
    pub freeze_non_replaced: bool,
    pub loss_history: Vec<f64>,
    pub train_accuracy_before: f64,
    pub train_accuracy_after: f64,
    pub eval_accuracy_before: f64,
    pub eval_accuracy_after: f64,
}

/// Cross-entropy fine-tuning of an assembled student. With
/// `freeze_non_replaced`, only replacement blocks are updated.
pub fn finetune(
    student: &Network,
    train: &Dataset,
    eval: &Dataset,
    params: &TrainParams,
    freeze_non_replaced: bool,
) -> Result<(Network, FinetuneSummary)> {
    let trainable = if freeze_non_replaced {
        Trainable {
            blocks: student.blocks.iter().map(Block::is_replacement).collect(),
            classifier: false,
        }
    } else {
        Trainable::all(student.blocks.len())
    };
    let train_before = accuracy(student, train)?;
    let eval_before = accuracy(student, eval)?;
    let mut net = student.clone();
    let loss_history = train_network(&mut net, &trainable, train, params)?;
    let summary = FinetuneSummary {
        epochs: params.epochs,
        freeze_non_replaced,
        loss_history,
        train_accuracy_before: train_before,
        train_accuracy_after: accuracy(&net, train)?,
        eval_accuracy_before: eval_before,
        eval_accuracy_after: accuracy(&net, eval)?,
    };
    Ok((net, summary))
}
