use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{StreamMeta, Task, TaskStream};
use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::Matrix;

/// Isotropic unit-variance Gaussian blobs whose means sit on a sphere of
/// radius `class_separation`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobStreamSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub class_separation: f64,
    pub seed: u64,
}

impl BlobStreamSpec {
    fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(Error::param(format!("input_dim must be ≥ 2, got {}", self.input_dim)));
        }
        if self.num_tasks == 0 || self.classes_per_task == 0 || self.samples_per_class == 0 {
            return Err(Error::param("task, class and sample counts must all be ≥ 1"));
        }
        if !(self.class_separation > 0.0) || !self.class_separation.is_finite() {
            return Err(Error::param(format!(
                "class_separation must be positive, got {}",
                self.class_separation
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }

    fn class_means(&self) -> Vec<Vec<f64>> {
        let mut rng = SeedTree(self.seed).child("blob-means").rng();
        (0..self.num_classes())
            .map(|_| {
                let mut v: Vec<f64> = (0..self.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = crate::tensor::norm(&v).max(f64::MIN_POSITIVE);
                v.iter_mut().for_each(|x| *x *= self.class_separation / n);
                v
            })
            .collect()
    }

    fn sample(&self, means: &[Vec<f64>], split: &str, per_class: usize) -> Result<TaskStream> {
        let root = SeedTree(self.seed).child(split);
        let mut tasks = Vec::with_capacity(self.num_tasks);
        for t in 0..self.num_tasks {
            let n = self.classes_per_task * per_class;
            let mut data = Vec::with_capacity(n * self.input_dim);
            let mut labels = Vec::with_capacity(n);
            let first = t * self.classes_per_task;
            for (c, mean) in means.iter().enumerate().skip(first).take(self.classes_per_task) {
                let mut rng = root.indexed("class", c).rng();
                for _ in 0..per_class {
                    for &m in mean {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        data.push(m + z);
                    }
                    labels.push(c);
                }
            }
            let inputs = Matrix::from_vec(n, self.input_dim, data)?;
            tasks.push(Task::new(t + 1, inputs, labels, vec![true; n])?);
        }
        TaskStream::new(
            tasks,
            self.input_dim,
            self.num_classes(),
            StreamMeta {
                seed: Some(self.seed),
                generator: format!("blobs/{split}"),
            },
        )
    }
}

/// Training stream of Gaussian blobs; classes are assigned to tasks in id order.
pub fn generate_blob_stream(spec: &BlobStreamSpec) -> Result<TaskStream> {
    spec.validate()?;
    spec.sample(&spec.class_means(), "train", spec.samples_per_class)
}

/// Training stream plus a held-out stream drawn from the same class blobs.
pub fn generate_blob_benchmark(spec: &BlobStreamSpec, test_per_class: usize) -> Result<(TaskStream, TaskStream)> {
    spec.validate()?;
    if test_per_class == 0 {
        return Err(Error::param("test_per_class must be ≥ 1"));
    }
    let means = spec.class_means();
    Ok((
        spec.sample(&means, "train", spec.samples_per_class)?,
        spec.sample(&means, "test", test_per_class)?,
    ))
}
