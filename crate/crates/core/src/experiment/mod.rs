//! Configured multi-seed runs, ablation sweeps and their output files.

pub mod checkpoint;
pub mod config;
pub mod runner;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, Method, StreamConfig, TrainerLabels};
pub use runner::{run_experiment, run_seed, ExperimentOutcome, SeedOutcome};

use crate::drift::ProjectorVariant;
use crate::error::{Error, Result};
use crate::eval::{mean_std, ExperimentReport, Histogram, TaskRecord};

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Final-task rows per (method, variant, seed) plus `mean` and `std` rows per
/// (method, variant). Fixed precision, stable order.
pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut groups: BTreeMap<(String, String), Vec<&TaskRecord>> = BTreeMap::new();
    let mut order: Vec<(String, String)> = Vec::new();
    for r in report.finals() {
        let key = (r.method.clone(), r.variant.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    // keep first-appearance order of methods in the report
    let first_seen: BTreeMap<(String, String), usize> = report
        .rows
        .iter()
        .enumerate()
        .rev()
        .map(|(i, r)| ((r.method.clone(), r.variant.clone()), i))
        .collect();
    order.sort_by_key(|k| first_seen[k]);

    let mut out = String::from("method,variant,seed,tasks,a_last,a_inc,cosine_mean\n");
    for key in order {
        let rows = &groups[&key];
        for r in rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{}",
                r.method,
                r.variant,
                r.seed,
                r.task,
                r.a_last,
                r.a_inc,
                fmt_opt(r.cosine_mean)
            );
        }
        let last: Vec<f64> = rows.iter().map(|r| r.a_last).collect();
        let inc: Vec<f64> = rows.iter().map(|r| r.a_inc).collect();
        let cos: Vec<f64> = rows.iter().filter_map(|r| r.cosine_mean).collect();
        let (lm, ls) = mean_std(&last);
        let (im, is) = mean_std(&inc);
        let (cm, cs) = mean_std(&cos);
        let has_cos = !cos.is_empty();
        let tasks = rows[0].task;
        let _ = writeln!(
            out,
            "{},{},mean,{tasks},{lm:.6},{im:.6},{}",
            key.0,
            key.1,
            fmt_opt(has_cos.then_some(cm))
        );
        let _ = writeln!(
            out,
            "{},{},std,{tasks},{ls:.6},{is:.6},{}",
            key.0,
            key.1,
            fmt_opt(has_cos.then_some(cs))
        );
    }
    out
}

/// Mean final `A_last` per (method, variant), in report order.
pub fn final_means(report: &ExperimentReport) -> Vec<(String, String, f64)> {
    let mut acc: Vec<((String, String), Vec<f64>)> = Vec::new();
    for r in report.finals() {
        let key = (r.method.clone(), r.variant.clone());
        match acc.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.a_last),
            None => acc.push((key, vec![r.a_last])),
        }
    }
    acc.into_iter()
        .map(|((m, v), xs)| (m, v, mean_std(&xs).0))
        .collect()
}

pub fn chain_csv(rows: &[(u64, crate::drift::ChainRow)]) -> String {
    let mut out = String::from("seed,task,method,prefix,accuracy\n");
    for (s, r) in rows {
        let _ = writeln!(out, "{s},{},{},{},{:.6}", r.task, r.strategy, r.prefix, r.accuracy);
    }
    out
}

/// Write `report.jsonl`, `summary.csv`, `chain.csv`, the resolved config and
/// any checkpoints into `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, out: &ExperimentOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.jsonl"), out.report.to_jsonl()?)?;
    std::fs::write(dir.join("summary.csv"), summary_csv(&out.report))?;
    if !out.chain.is_empty() {
        std::fs::write(dir.join("chain.csv"), chain_csv(&out.chain))?;
    }
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    for c in &out.checkpoints {
        c.save(dir.join(format!("checkpoint-seed{}.json", c.seed)))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    ProjectorArch,
    NmeMemory,
    FeatureBank,
    LabelFraction,
}

impl std::str::FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projector-arch" => Ok(AblationKind::ProjectorArch),
            "nme-memory" => Ok(AblationKind::NmeMemory),
            "feature-bank" => Ok(AblationKind::FeatureBank),
            "label-fraction" => Ok(AblationKind::LabelFraction),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected projector-arch, nme-memory, feature-bank or label-fraction)"
            ))),
        }
    }
}

pub const MEMORY_SWEEP: [usize; 3] = [5, 10, 20];
pub const LABEL_FRACTION_SWEEP: [f64; 3] = [0.008, 0.05, 0.25];

/// `(variant tag, config)` for every point of the sweep.
pub fn ablation_points(kind: AblationKind, base: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    match kind {
        AblationKind::ProjectorArch => ProjectorVariant::ALL
            .iter()
            .map(|&v| {
                let mut c = base.clone();
                c.methods = vec![Method::Ldc];
                c.ldc.variant = v;
                (v.name().to_string(), c)
            })
            .collect(),
        AblationKind::NmeMemory => MEMORY_SWEEP
            .iter()
            .map(|&n| {
                let mut c = base.clone();
                c.methods = vec![Method::Nme];
                c.memory.nme = n;
                (format!("n={n}"), c)
            })
            .collect(),
        AblationKind::FeatureBank => MEMORY_SWEEP
            .iter()
            .map(|&n| {
                let mut c = base.clone();
                c.methods = vec![Method::FeatureBank];
                c.memory.feature_bank = n;
                (format!("n={n}"), c)
            })
            .collect(),
        AblationKind::LabelFraction => LABEL_FRACTION_SWEEP
            .iter()
            .map(|&f| {
                let mut c = base.clone();
                c.label_fraction = f;
                (format!("fraction={f}"), c)
            })
            .collect(),
    }
}

pub fn run_ablation(kind: AblationKind, base: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    let mut all = ExperimentOutcome::default();
    for (tag, cfg) in ablation_points(kind, base) {
        let o = run_experiment(&cfg, dir, &tag)?;
        all.report.extend(o.report)?;
        all.chain.extend(o.chain);
        all.checkpoints.extend(o.checkpoints);
    }
    Ok(all)
}

/// Groups of variants sharing the same mean final accuracy, best first. A
/// group with more than one entry is a tie.
pub fn ranking(report: &ExperimentReport) -> Vec<Vec<String>> {
    let mut means: Vec<(String, f64)> = final_means(report)
        .into_iter()
        .map(|(m, v, a)| (if v.is_empty() { m } else { format!("{m}/{v}") }, a))
        .collect();
    means.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut groups: Vec<(f64, Vec<String>)> = Vec::new();
    for (name, a) in means {
        match groups.last_mut() {
            Some((g, names)) if (*g - a).abs() < 1e-12 => names.push(name),
            _ => groups.push((a, vec![name])),
        }
    }
    groups.into_iter().map(|(_, n)| n).collect()
}

pub fn ranking_text(report: &ExperimentReport) -> String {
    let mut out = String::new();
    for (i, g) in ranking(report).iter().enumerate() {
        let tie = if g.len() > 1 { " (tie)" } else { "" };
        let _ = writeln!(out, "{}. {}{tie}", i + 1, g.join(" = "));
    }
    out
}

/// Pooled final-task cosine distances per (method, variant), one histogram
/// each over `[0, hi]`. Returns `(file stem, histogram)` pairs.
pub fn cosine_histograms(report: &ExperimentReport, bins: usize, hi: f64) -> Result<Vec<(String, Histogram)>> {
    let mut pooled: Vec<(String, Vec<f64>)> = Vec::new();
    for r in report.finals() {
        let Some(d) = &r.cosine_to_oracle else { continue };
        let stem = if r.variant.is_empty() {
            r.method.clone()
        } else {
            format!("{}_{}", r.method, r.variant.replace(['=', '/'], "-"))
        };
        match pooled.iter_mut().find(|(s, _)| *s == stem) {
            Some((_, v)) => v.extend(d.values()),
            None => pooled.push((stem, d.values().copied().collect())),
        }
    }
    pooled
        .into_iter()
        .map(|(s, v)| Ok((s, Histogram::build(&v, 0.0, hi, bins)?)))
        .collect()
}
