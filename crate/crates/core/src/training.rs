//! Continual training of the backbone: fine-tuning, LwF distillation and
//! incremental joint training.
//!
//! Fine-tuning and LwF apply cross-entropy to the logits of the current
//! task's classes only; LwF adds `λ · distill_ce` between the frozen previous
//! model's logits and the current logits of previously seen classes. Joint
//! training applies cross-entropy over every class seen so far.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::extractor::{snapshot, FeatureExtractor, FeatureMap, FrozenExtractor};
use crate::loss::{cross_entropy, distill_ce};
use crate::nn::{Gradients, Linear, Parameterized};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::rng::{Rng, SeedTree};
use crate::tensor::Matrix;

/// Linear classifier over features; one output column per seen class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    feature_dim: usize,
    /// Global class id of each output column.
    classes: Vec<usize>,
    linear: Option<Linear>,
}

impl ClassifierHead {
    pub fn new(feature_dim: usize) -> Self {
        ClassifierHead {
            feature_dim,
            classes: Vec::new(),
            linear: None,
        }
    }

    pub fn width(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn column_of(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Append output columns for classes not yet present. Existing rows are
    /// left bit-for-bit unchanged; new rows use the fan-in uniform init.
    pub fn add_classes(&mut self, classes: &[usize], rng: &mut Rng) {
        let fresh: Vec<usize> = classes.iter().copied().filter(|c| !self.classes.contains(c)).collect();
        if fresh.is_empty() {
            return;
        }
        match &mut self.linear {
            Some(l) => l.grow_outputs(fresh.len(), rng),
            None => self.linear = Some(Linear::init(self.feature_dim, fresh.len(), true, rng)),
        }
        self.classes.extend(fresh);
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        self.linear
            .as_ref()
            .ok_or_else(|| Error::state("classifier head has no classes"))?
            .forward(features)
    }
}

/// Hyperparameters of one training session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Epochs after which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Distillation strength.
    pub lambda: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 0.05,
            milestones: vec![45, 90],
            gamma: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda: 10.0,
            temperature: 2.0,
            batch_size: 128,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("epochs must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be ≥ 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::param(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::param(format!("lambda must be ≥ 0, got {}", self.lambda)));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::param(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    /// Mean training loss over the last epoch.
    pub final_loss: f64,
    pub steps: u64,
}

struct Joint<'a> {
    net: &'a mut FeatureExtractor,
    head: &'a mut Linear,
}

impl Parameterized for Joint<'_> {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.net.mlp().params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.net.mlp_mut().params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Precomputed previous-model logits for every training row.
struct Teacher {
    logits: Matrix,
    lambda: f64,
    temperature: f64,
}

fn run_session(
    extractor: &mut FeatureExtractor,
    head: &mut ClassifierHead,
    inputs: &Matrix,
    columns: &[usize],
    ce_start: usize,
    teacher: Option<&Teacher>,
    cfg: &TrainConfig,
) -> Result<TrainStats> {
    let n = inputs.rows();
    let width = head.width();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeedTree(cfg.seed).child("batches").rng();
    let mut opt = OptimizerState::new(OptimizerKind::sgd(cfg.momentum, cfg.weight_decay), cfg.lr);
    let linear = head.linear.as_mut().expect("head grown before training");
    let mut model = Joint { net: extractor, head: linear };
    let mut last_loss = 0.0;
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let x = inputs.select_rows(batch)?;
            let trace = model.net.mlp().forward_trace(&x)?;
            let feats = trace.output();
            let logits = model.head.forward(feats)?;

            let slice_width = width - ce_start;
            let mut sliced = Matrix::zeros(batch.len(), slice_width);
            for r in 0..batch.len() {
                sliced.row_mut(r).copy_from_slice(&logits.row(r)[ce_start..]);
            }
            let targets: Vec<usize> = batch.iter().map(|&i| columns[i] - ce_start).collect();
            let (mut loss, g_slice) = cross_entropy(&sliced, &targets)?;
            let mut g_logits = Matrix::zeros(batch.len(), width);
            for r in 0..batch.len() {
                g_logits.row_mut(r)[ce_start..].copy_from_slice(g_slice.row(r));
            }

            if let Some(t) = teacher {
                let old = t.logits.cols();
                let teach = t.logits.select_rows(batch)?;
                let mut student = Matrix::zeros(batch.len(), old);
                for r in 0..batch.len() {
                    student.row_mut(r).copy_from_slice(&logits.row(r)[..old]);
                }
                let (kd, g_kd) = distill_ce(&teach, &student, t.temperature)?;
                loss += t.lambda * kd;
                for r in 0..batch.len() {
                    for (g, k) in g_logits.row_mut(r)[..old].iter_mut().zip(g_kd.row(r)) {
                        *g += t.lambda * k;
                    }
                }
            }

            let (mut grads, g_feats): (Gradients, Matrix) = model.head.backward(feats, &g_logits)?;
            let (net_grads, _) = model.net.mlp().backward(&trace, &g_feats)?;
            let mut all = net_grads;
            all.append(&mut grads);
            opt.step(&mut model, &all)?;
            epoch_loss += loss * batch.len() as f64;
        }
        last_loss = epoch_loss / n as f64;
        if !last_loss.is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at epoch {epoch}")));
        }
    }
    Ok(TrainStats {
        final_loss: last_loss,
        steps: opt.steps(),
    })
}

fn labeled_rows(task: &Task) -> Result<(Matrix, Vec<usize>)> {
    let idx = task.labeled_indices();
    if idx.is_empty() {
        return Err(Error::param(format!("task {} has no labeled samples to train on", task.index)));
    }
    let x = task.inputs.select_rows(&idx)?;
    let y = idx.iter().map(|&i| task.labels[i]).collect();
    Ok((x, y))
}

fn columns_for(head: &ClassifierHead, labels: &[usize]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&c| head.column_of(c).ok_or(Error::Key(c)))
        .collect()
}

/// Cross-entropy on the current task's classes, nothing retained from earlier tasks.
pub fn train_finetune(
    extractor: &mut FeatureExtractor,
    head: &mut ClassifierHead,
    task: &Task,
    cfg: &TrainConfig,
) -> Result<TrainStats> {
    supervised_session(extractor, None, head, task, cfg)
}

/// Learning without Forgetting. `previous` is the frozen extractor and head
/// from the end of the previous session and is required for every task
/// after the first. With `lambda == 0` this is exactly [`train_finetune`].
pub fn train_lwf(
    extractor: &mut FeatureExtractor,
    previous: Option<(&FrozenExtractor, &ClassifierHead)>,
    head: &mut ClassifierHead,
    task: &Task,
    cfg: &TrainConfig,
) -> Result<TrainStats> {
    if previous.is_none() && task.index > 1 && head.width() > 0 {
        return Err(Error::state(format!(
            "LwF on task {} needs the previous model snapshot",
            task.index
        )));
    }
    supervised_session(extractor, previous, head, task, cfg)
}

fn supervised_session(
    extractor: &mut FeatureExtractor,
    previous: Option<(&FrozenExtractor, &ClassifierHead)>,
    head: &mut ClassifierHead,
    task: &Task,
    cfg: &TrainConfig,
) -> Result<TrainStats> {
    cfg.validate()?;
    let (x, y) = labeled_rows(task)?;
    let old_width = head.width();
    let mut rng = SeedTree(cfg.seed).child("head-init").rng();
    head.add_classes(&task.classes, &mut rng);
    let columns = columns_for(head, &y)?;

    let teacher = match previous {
        Some((prev, prev_head)) if cfg.lambda > 0.0 && prev_head.width() > 0 => {
            if prev.feature_dim() != extractor.feature_dim() {
                return Err(Error::state("previous extractor has a different feature dimension"));
            }
            if prev_head.classes() != &head.classes()[..prev_head.width()] {
                return Err(Error::state("previous head classes are not a prefix of the current head"));
            }
            Some(Teacher {
                logits: prev_head.logits(&prev.embed(&x)?)?,
                lambda: cfg.lambda,
                temperature: cfg.temperature,
            })
        }
        _ => None,
    };
    run_session(extractor, head, &x, &columns, old_width, teacher.as_ref(), cfg)
}

/// Supervised training on the union of all tasks so far (upper bound; not
/// exemplar-free).
pub fn train_joint(
    extractor: &mut FeatureExtractor,
    head: &mut ClassifierHead,
    tasks_so_far: &[&Task],
    cfg: &TrainConfig,
) -> Result<TrainStats> {
    cfg.validate()?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut rng = SeedTree(cfg.seed).child("head-init").rng();
    for t in tasks_so_far {
        let idx = t.labeled_indices();
        if idx.is_empty() {
            continue;
        }
        xs.push(t.inputs.select_rows(&idx)?);
        ys.extend(idx.iter().map(|&i| t.labels[i]));
        head.add_classes(&t.classes, &mut rng);
    }
    if ys.is_empty() {
        return Err(Error::param("joint training needs at least one labeled sample"));
    }
    let x = Matrix::vstack(&xs.iter().collect::<Vec<_>>())?;
    let columns = columns_for(head, &ys)?;
    run_session(extractor, head, &x, &columns, 0, None, cfg)
}

/// Which supervised strategy trains the backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainerKind {
    Finetune,
    Lwf,
    Joint,
}

/// Produces a frozen extractor at the end of each task.
///
/// This is the only contract drift compensation relies on: any learner,
/// including self-supervised ones, that hands out consecutive snapshots can
/// be paired with a compensator.
pub trait ContinualLearner {
    fn learn_task(&mut self, task: &Task) -> Result<FrozenExtractor>;
    fn current(&self) -> FrozenExtractor;
}

/// Per-task session configs: the first task and later tasks differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub first: TrainConfig,
    pub incremental: TrainConfig,
}

impl SessionPlan {
    pub fn for_task(&self, index: usize, seed: SeedTree) -> TrainConfig {
        let mut cfg = if index <= 1 { self.first.clone() } else { self.incremental.clone() };
        cfg.seed = seed.indexed("session", index).0;
        cfg
    }
}

/// Backbone plus head trained task by task with one of the supervised strategies.
pub struct SupervisedLearner {
    kind: TrainerKind,
    extractor: FeatureExtractor,
    head: ClassifierHead,
    previous: Option<(FrozenExtractor, ClassifierHead)>,
    history: Vec<Task>,
    plan: SessionPlan,
    seed: SeedTree,
}

impl SupervisedLearner {
    pub fn new(kind: TrainerKind, extractor: FeatureExtractor, plan: SessionPlan, seed: SeedTree) -> Self {
        let head = ClassifierHead::new(extractor.feature_dim());
        SupervisedLearner {
            kind,
            extractor,
            head,
            previous: None,
            history: Vec::new(),
            plan,
            seed,
        }
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn extractor(&self) -> &FeatureExtractor {
        &self.extractor
    }
}

impl ContinualLearner for SupervisedLearner {
    fn learn_task(&mut self, task: &Task) -> Result<FrozenExtractor> {
        let cfg = self.plan.for_task(task.index, self.seed);
        match self.kind {
            TrainerKind::Finetune => {
                train_finetune(&mut self.extractor, &mut self.head, task, &cfg)?;
            }
            TrainerKind::Lwf => {
                let prev = self.previous.as_ref().map(|(f, h)| (f, h));
                train_lwf(&mut self.extractor, prev, &mut self.head, task, &cfg)?;
            }
            TrainerKind::Joint => {
                self.history.push(task.clone());
                let refs: Vec<&Task> = self.history.iter().collect();
                train_joint(&mut self.extractor, &mut self.head, &refs, &cfg)?;
            }
        }
        let snap = snapshot(&self.extractor);
        self.previous = Some((snap.clone(), self.head.clone()));
        Ok(snap)
    }

    fn current(&self) -> FrozenExtractor {
        snapshot(&self.extractor)
    }
}
