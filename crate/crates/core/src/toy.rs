//! Two-dimensional drift toy: estimate where a withheld class mean moves under
//! a similarity transform, from the paired samples of the other classes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Affine2, DriftScenario2D};
use crate::drift::{fit_projector, sdc_drift, LrSchedule, ProjectorConfig, ProjectorFit, ProjectorVariant};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Projector settings for the toy. Full-batch Adam with cosine decay; the
/// inputs sit around radius 5, so the bias needs many small steps to settle.
pub fn toy_projector_config() -> ProjectorConfig {
    ProjectorConfig {
        variant: ProjectorVariant::LinearBias,
        epochs: 3000,
        lr: 0.05,
        batch_size: 1024,
        schedule: LrSchedule::Cosine,
        seed: 0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyResult {
    pub transform: Affine2,
    pub target: usize,
    pub reference: Vec<usize>,
    pub old_mean: [f64; 2],
    /// Empirical mean of the target's samples after drift.
    pub true_mean: [f64; 2],
    /// `s·R(θ)·μ + u` for the generating mean.
    pub population_mean: [f64; 2],
    pub sdc_estimate: [f64; 2],
    pub ldc_estimate: [f64; 2],
    pub sdc_error: f64,
    pub ldc_error: f64,
    pub sdc_fallback: bool,
    pub ldc_fit: ProjectorFit,
    /// Fitted `[[w11, w12, b1], [w21, w22, b2]]`.
    pub ldc_params: [[f64; 3]; 2],
}

fn pair(v: &[f64]) -> [f64; 2] {
    [v[0], v[1]]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// The target's own drifted samples are never looked at by either estimator.
pub fn run_toy(
    scenario: &DriftScenario2D,
    reference: &[usize],
    target: usize,
    sdc_sigma: f64,
    ldc_cfg: &ProjectorConfig,
) -> Result<ToyResult> {
    let k = scenario.num_classes();
    if target >= k {
        return Err(Error::param(format!("target class {target} outside 0..{k}")));
    }
    if reference.is_empty() {
        return Err(Error::param("no reference classes given"));
    }
    if let Some(r) = reference.iter().find(|&&r| r >= k || r == target) {
        return Err(Error::param(format!("reference class {r} is invalid for target {target}")));
    }
    let before: Vec<&Matrix> = reference.iter().map(|&r| &scenario.before[r]).collect();
    let after: Vec<&Matrix> = reference.iter().map(|&r| &scenario.after[r]).collect();
    let x = Matrix::vstack(&before)?;
    let y = Matrix::vstack(&after)?;

    let old_mean = scenario.empirical_mean_before(target);
    let true_mean = scenario.empirical_mean_after(target);

    let sdc = sdc_drift(&x, &y.sub(&x)?, &old_mean, sdc_sigma)?;
    let sdc_estimate = [old_mean[0] + sdc.drift[0], old_mean[1] + sdc.drift[1]];

    let cfg = ProjectorConfig {
        variant: ProjectorVariant::LinearBias,
        ..ldc_cfg.clone()
    };
    let (p, fit) = fit_projector(&x, &y, &cfg)?;
    let ldc_estimate = pair(&p.apply(&old_mean)?);
    let w = p.linear_weight().expect("affine projector");
    let b = p.linear_bias().expect("affine projector");

    Ok(ToyResult {
        transform: scenario.spec.transform,
        target,
        reference: reference.to_vec(),
        old_mean,
        true_mean,
        population_mean: scenario.true_drifted_means[target],
        sdc_error: dist(sdc_estimate, true_mean),
        ldc_error: dist(ldc_estimate, true_mean),
        sdc_estimate,
        ldc_estimate,
        sdc_fallback: sdc.fallback,
        ldc_fit: fit,
        ldc_params: [[w.get(0, 0), w.get(0, 1), b[0]], [w.get(1, 0), w.get(1, 1), b[1]]],
    })
}

/// `class,epoch,x,y` for every sample; epoch is `before` or `after`.
pub fn samples_csv(scenario: &DriftScenario2D) -> String {
    let mut out = String::from("class,epoch,x,y\n");
    for (label, set) in [("before", &scenario.before), ("after", &scenario.after)] {
        for (c, m) in set.iter().enumerate() {
            for r in m.row_iter() {
                let _ = writeln!(out, "{c},{label},{},{}", r[0], r[1]);
            }
        }
    }
    out
}

/// `quantity,x,y,error` for the old, true and estimated means.
pub fn estimates_csv(r: &ToyResult) -> String {
    let mut out = String::from("quantity,x,y,error\n");
    let rows = [
        ("old_mean", r.old_mean, None),
        ("true_mean", r.true_mean, Some(0.0)),
        ("population_mean", r.population_mean, Some(dist(r.population_mean, r.true_mean))),
        ("sdc", r.sdc_estimate, Some(r.sdc_error)),
        ("ldc", r.ldc_estimate, Some(r.ldc_error)),
    ];
    for (name, p, e) in rows {
        let e = e.map(|v| format!("{v:e}")).unwrap_or_default();
        let _ = writeln!(out, "{name},{},{},{e}", p[0], p[1]);
    }
    out
}
