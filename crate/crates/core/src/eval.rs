//! Nearest-class-mean classification, accuracy bookkeeping and the cosine
//! comparison of corrected against oracle prototypes.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TaskStream;
use crate::error::{Error, Result};
use crate::extractor::FeatureMap;
use crate::prototypes::{ClassVectors, PrototypePool};
use crate::tensor::{dot, norm, sq_dist, Matrix};

/// Index of the closest prototype to `feature`; ties go to the smaller class id.
pub fn nearest_prototype(pool: &PrototypePool, feature: &[f64]) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::state("cannot classify against an empty prototype pool"));
    }
    if feature.len() != pool.dim() {
        return Err(Error::dim(format!(
            "feature dim {} does not match pool dim {}",
            feature.len(),
            pool.dim()
        )));
    }
    let mut best = (usize::MAX, f64::INFINITY);
    // BTreeMap iterates ascending, so a strict comparison keeps the smallest id.
    for (c, e) in pool.iter() {
        let d = sq_dist(feature, &e.vector);
        if d < best.1 || best.0 == usize::MAX {
            best = (c, d);
        }
    }
    Ok(best.0)
}

pub fn ncm_classify(extractor: &dyn FeatureMap, pool: &PrototypePool, x: &[f64]) -> Result<usize> {
    let f = extractor.embed(&Matrix::row_vector(x)?)?;
    nearest_prototype(pool, f.row(0))
}

fn l2_normalized(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Batch NCM. With `normalize`, features and prototypes are L2-normalised first.
pub fn ncm_predict(
    extractor: &dyn FeatureMap,
    pool: &PrototypePool,
    inputs: &Matrix,
    normalize: bool,
) -> Result<Vec<usize>> {
    let feats = extractor.embed(inputs)?;
    let normalized;
    let pool = if normalize {
        let mut p = PrototypePool::new(pool.dim());
        for (c, e) in pool.iter() {
            p.insert(c, l2_normalized(&e.vector), e.origin_task)?;
        }
        normalized = p;
        &normalized
    } else {
        pool
    };
    (0..feats.rows())
        .into_par_iter()
        .map(|r| {
            if normalize {
                nearest_prototype(pool, &l2_normalized(feats.row(r)))
            } else {
                nearest_prototype(pool, feats.row(r))
            }
        })
        .collect()
}

/// Fraction of `inputs` whose NCM prediction equals the label.
pub fn accuracy_over_seen(
    extractor: &dyn FeatureMap,
    pool: &PrototypePool,
    inputs: &Matrix,
    labels: &[usize],
    normalize: bool,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::data("evaluation set is empty"));
    }
    if labels.len() != inputs.rows() {
        return Err(Error::dim(format!("{} labels for {} samples", labels.len(), inputs.rows())));
    }
    if let Some(&c) = labels.iter().find(|&&c| !pool.contains(c)) {
        return Err(Error::data(format!("evaluation sample of class {c}, which has not been seen")));
    }
    let pred = ncm_predict(extractor, pool, inputs, normalize)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Samples and labels of tasks `1..=t` of a (test) stream.
pub fn eval_set(stream: &TaskStream, t: usize) -> Result<(Matrix, Vec<usize>)> {
    if t == 0 || t > stream.num_tasks() {
        return Err(Error::param(format!("task prefix {t} outside 1..={}", stream.num_tasks())));
    }
    let parts: Vec<&Matrix> = stream.tasks[..t].iter().map(|k| &k.inputs).collect();
    let labels = stream.tasks[..t].iter().flat_map(|k| k.labels.iter().copied()).collect();
    Ok((Matrix::vstack(&parts)?, labels))
}

/// `1 − cos(a, b)`, in `[0, 2]`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((1.0 - dot(a, b) / (na * nb)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    /// Equal-width bins over `[lo, hi]`; values outside are clamped into the
    /// end bins.
    pub fn build(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Histogram> {
        if bins == 0 || hi <= lo || !hi.is_finite() || !lo.is_finite() {
            return Err(Error::param(format!("histogram needs bins ≥ 1 and hi > lo, got {bins} bins over [{lo}, {hi}]")));
        }
        let mut counts = vec![0; bins];
        let w = (hi - lo) / bins as f64;
        for &v in values {
            let k = (((v - lo) / w).floor().max(0.0) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Ok(Histogram { lo, hi, counts })
    }

    pub fn edges(&self, k: usize) -> (f64, f64) {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + w * k as f64, self.lo + w * (k + 1) as f64)
    }

    /// `bin_left,bin_right,count` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,count\n");
        for (k, c) in self.counts.iter().enumerate() {
            let (l, r) = self.edges(k);
            out.push_str(&format!("{l:.6},{r:.6},{c}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineDistribution {
    pub per_class: BTreeMap<usize, f64>,
    pub mean: f64,
    pub std: f64,
    pub histogram: Histogram,
}

pub const DEFAULT_HIST_BINS: usize = 40;

/// Per-class `1 − cos` between corrected and oracle prototypes, over `[0, 2]`.
pub fn cosine_drift_distribution(corrected: &ClassVectors, oracle: &ClassVectors, bins: usize) -> Result<CosineDistribution> {
    let a: BTreeSet<_> = corrected.keys().collect();
    let b: BTreeSet<_> = oracle.keys().collect();
    if a != b {
        return Err(Error::state("corrected and oracle prototypes cover different classes"));
    }
    if a.is_empty() {
        return Err(Error::data("no classes to compare"));
    }
    let mut per_class = BTreeMap::new();
    for (&c, p) in corrected {
        let d = cosine_distance(p, &oracle[&c])
            .ok_or_else(|| Error::Numeric(format!("prototype of class {c} has zero norm")))?;
        per_class.insert(c, d);
    }
    let values: Vec<f64> = per_class.values().copied().collect();
    let (mean, std) = mean_std(&values);
    Ok(CosineDistribution {
        histogram: Histogram::build(&values, 0.0, 2.0, bins)?,
        per_class,
        mean,
        std,
    })
}

/// Mean and population standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `A_inc` after each task: running mean of the `A_last` values.
pub fn running_mean(values: &[f64]) -> Vec<f64> {
    let mut sum = 0.0;
    values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            sum += v;
            sum / (i + 1) as f64
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub a_last: f64,
    pub a_inc: f64,
    /// Per old class `1 − cos` to the oracle prototype, when computed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine_to_oracle: Option<BTreeMap<usize, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cosine_mean: Option<f64>,
    /// Classes left out of the cosine comparison for a zero-norm prototype.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cosine_skipped: Vec<usize>,
    /// Classes where the SDC kernel weights underflowed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sdc_fallback: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projector_loss: Option<f64>,
    /// Free-form sweep coordinate (ablation point), empty for plain runs.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub variant: String,
    pub wall_clock_ms: u64,
}

/// Per-task rows of one or more (method, seed, variant) sequences.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub rows: Vec<TaskRecord>,
    #[serde(skip)]
    running: BTreeMap<(String, String, u64), (f64, usize)>,
}

impl ExperimentReport {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a row, filling `a_inc` from the rows already pushed for the
    /// same sequence.
    pub fn push(&mut self, mut row: TaskRecord) -> Result<()> {
        if !(0.0..=1.0).contains(&row.a_last) {
            return Err(Error::Numeric(format!("accuracy {} outside [0, 1]", row.a_last)));
        }
        let key = (row.method.clone(), row.variant.clone(), row.seed);
        let (sum, n) = self.running.entry(key).or_insert((0.0, 0));
        if row.task != *n + 1 {
            return Err(Error::state(format!(
                "row for task {} of {} arrived after {} tasks",
                row.task, row.method, n
            )));
        }
        *sum += row.a_last;
        *n += 1;
        row.a_inc = *sum / *n as f64;
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, other: ExperimentReport) -> Result<()> {
        for r in other.rows {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<ExperimentReport> {
        let mut rep = ExperimentReport::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let row: TaskRecord = serde_json::from_str(line).map_err(|e| Error::Format {
                line: i + 1,
                offset: text.lines().take(i).map(|l| l.len() + 1).sum(),
                message: e.to_string(),
            })?;
            rep.push(row)?;
        }
        Ok(rep)
    }

    /// Last row of each sequence.
    pub fn finals(&self) -> Vec<&TaskRecord> {
        let mut last: BTreeMap<(&str, &str, u64), &TaskRecord> = BTreeMap::new();
        for r in &self.rows {
            last.insert((&r.method, &r.variant, r.seed), r);
        }
        last.into_values().collect()
    }
}
