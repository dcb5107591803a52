//! Class-incremental task streams.

mod blobs;
mod drift2d;
mod io;

pub use blobs::{generate_blob_benchmark, generate_blob_stream, BlobStreamSpec};
pub use drift2d::{generate_drift_scenario, Affine2, DriftScenario2D, DriftScenarioSpec, Gaussian2};
pub use io::{load_feature_dataset, parse_feature_dataset, render_feature_dataset, save_feature_dataset};

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::Matrix;

/// One training session: samples of a disjoint set of classes.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    /// 1-based position in the stream.
    pub index: usize,
    /// Global class ids introduced by this task, ascending.
    pub classes: Vec<usize>,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    /// Whether the label of each sample may be used.
    pub labeled: Vec<bool>,
}

impl Task {
    pub fn new(index: usize, inputs: Matrix, labels: Vec<usize>, labeled: Vec<bool>) -> Result<Task> {
        if labels.len() != inputs.rows() || labeled.len() != inputs.rows() {
            return Err(Error::dim(format!(
                "task {index}: {} rows, {} labels, {} mask entries",
                inputs.rows(),
                labels.len(),
                labeled.len()
            )));
        }
        let classes: BTreeSet<usize> = labels.iter().copied().collect();
        Ok(Task {
            index,
            classes: classes.into_iter().collect(),
            inputs,
            labels,
            labeled,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row indices of a class, optionally restricted to labeled rows.
    pub fn class_indices(&self, class: usize, labeled_only: bool) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|&(i, &y)| y == class && (!labeled_only || self.labeled[i]))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labeled[i]).collect()
    }

    pub fn labeled_count(&self, class: usize) -> usize {
        self.labels
            .iter()
            .zip(&self.labeled)
            .filter(|&(&y, &l)| y == class && l)
            .count()
    }
}

/// Provenance of a stream; not persisted in the feature-file format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamMeta {
    pub seed: Option<u64>,
    pub generator: String,
}

#[derive(Debug, Clone)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub meta: StreamMeta,
}

/// Streams compare by content; provenance metadata is ignored.
impl PartialEq for TaskStream {
    fn eq(&self, other: &Self) -> bool {
        self.tasks == other.tasks && self.input_dim == other.input_dim && self.num_classes == other.num_classes
    }
}

impl TaskStream {
    pub fn new(tasks: Vec<Task>, input_dim: usize, num_classes: usize, meta: StreamMeta) -> Result<TaskStream> {
        let s = TaskStream {
            tasks,
            input_dim,
            num_classes,
            meta,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Check every structural invariant of a stream.
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::data("stream must contain ≥ 1 task"));
        }
        let mut seen = BTreeSet::new();
        for (pos, task) in self.tasks.iter().enumerate() {
            if task.index != pos + 1 {
                return Err(Error::data(format!(
                    "task at position {pos} has index {}, expected {}",
                    task.index,
                    pos + 1
                )));
            }
            if task.is_empty() {
                return Err(Error::data(format!("task {} has no samples", task.index)));
            }
            if task.inputs.cols() != self.input_dim {
                return Err(Error::dim(format!(
                    "task {} has input dim {}, stream dim {}",
                    task.index,
                    task.inputs.cols(),
                    self.input_dim
                )));
            }
            for &c in &task.classes {
                if c >= self.num_classes {
                    return Err(Error::data(format!("task {}: class {c} ≥ class count {}", task.index, self.num_classes)));
                }
                if !seen.insert(c) {
                    return Err(Error::data(format!("class {c} appears in more than one task")));
                }
                if task.labeled_count(c) == 0 {
                    return Err(Error::data(format!("task {}: class {c} has no labeled sample", task.index)));
                }
            }
        }
        if seen.len() != self.num_classes {
            return Err(Error::data(format!(
                "tasks cover {} classes, stream declares {}",
                seen.len(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Classes introduced by tasks `1..=t`.
    pub fn seen_classes(&self, t: usize) -> BTreeSet<usize> {
        self.tasks.iter().take(t).flat_map(|k| k.classes.iter().copied()).collect()
    }

    /// Which task introduced each class.
    pub fn class_to_task(&self) -> BTreeMap<usize, usize> {
        self.tasks
            .iter()
            .flat_map(|t| t.classes.iter().map(move |&c| (c, t.index)))
            .collect()
    }
}

/// Stratified per-class label mask: each class keeps
/// `max(1, round(fraction · n_c))` labeled samples chosen uniformly at random.
pub fn apply_label_fraction(stream: &TaskStream, fraction: f64, seed: u64) -> Result<TaskStream> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::param(format!("label fraction must lie in (0, 1], got {fraction}")));
    }
    let root = SeedTree(seed).child("label-fraction");
    let mut out = stream.clone();
    for task in &mut out.tasks {
        let mut mask = vec![false; task.len()];
        for &c in &task.classes {
            let mut idx = task.class_indices(c, false);
            let keep = labeled_quota(idx.len(), fraction);
            let mut rng = root.indexed("class", c).rng();
            idx.shuffle(&mut rng);
            for &i in &idx[..keep] {
                mask[i] = true;
            }
        }
        task.labeled = mask;
    }
    Ok(out)
}

/// Labeled samples kept for a class of `n` samples.
pub fn labeled_quota(n: usize, fraction: f64) -> usize {
    ((fraction * n as f64).round() as usize).clamp(1, n.max(1))
}
