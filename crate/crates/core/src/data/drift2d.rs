//! Two-dimensional Gaussians moved by a similarity transform between two epochs.

use std::f64::consts::PI;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
    pub samples: usize,
}

impl Gaussian2 {
    /// Lower-triangular `L` with `L·Lᵀ = cov`, tolerating singular covariances.
    fn cholesky(&self) -> Result<[[f64; 2]; 2]> {
        let [[a, b], [b2, c]] = self.cov;
        let tol = 1e-12 * (a.abs() + c.abs()).max(1.0);
        if (b - b2).abs() > tol {
            return Err(Error::param(format!("covariance {:?} is not symmetric", self.cov)));
        }
        if a < -tol || c < -tol || a * c - b * b < -tol {
            return Err(Error::param(format!("covariance {:?} is not positive semi-definite", self.cov)));
        }
        let l11 = a.max(0.0).sqrt();
        let l21 = if l11 > 0.0 { b / l11 } else { 0.0 };
        let l22 = (c - l21 * l21).max(0.0).sqrt();
        Ok([[l11, 0.0], [l21, l22]])
    }
}

/// `x ↦ s·R(θ)·x + u`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub theta: f64,
    pub scale: f64,
    pub translation: [f64; 2],
}

impl Affine2 {
    pub fn identity() -> Self {
        Affine2 {
            theta: 0.0,
            scale: 1.0,
            translation: [0.0, 0.0],
        }
    }

    /// The linear part `s·R(θ)`.
    pub fn linear(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.theta.sin_cos();
        [[self.scale * c, -self.scale * s], [self.scale * s, self.scale * c]]
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = self.linear();
        [
            m[0][0] * p[0] + m[0][1] * p[1] + self.translation[0],
            m[1][0] * p[0] + m[1][1] * p[1] + self.translation[1],
        ]
    }

    pub fn apply_rows(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for r in 0..x.rows() {
            let q = self.apply([x.get(r, 0), x.get(r, 1)]);
            out.set(r, 0, q[0]);
            out.set(r, 1, q[1]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftScenarioSpec {
    pub classes: Vec<Gaussian2>,
    pub transform: Affine2,
    pub seed: u64,
    /// Draw the second epoch independently instead of moving the same points.
    #[serde(default)]
    pub resample: bool,
}

impl DriftScenarioSpec {
    /// Three unit-covariance Gaussians of 200 samples, means evenly spaced on a
    /// radius-5 circle starting on the positive x axis.
    pub fn default_classes() -> Vec<Gaussian2> {
        (0..3)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / 3.0;
                Gaussian2 {
                    mean: [5.0 * a.cos(), 5.0 * a.sin()],
                    cov: [[1.0, 0.0], [0.0, 1.0]],
                    samples: 200,
                }
            })
            .collect()
    }

    pub fn with_transform(transform: Affine2, seed: u64) -> Self {
        DriftScenarioSpec {
            classes: Self::default_classes(),
            transform,
            seed,
            resample: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftScenario2D {
    pub spec: DriftScenarioSpec,
    /// Samples at the first epoch, one `n × 2` matrix per class.
    pub before: Vec<Matrix>,
    /// Samples at the second epoch. Row `i` is the image of `before` row `i`
    /// unless the scenario was resampled.
    pub after: Vec<Matrix>,
    /// Population means after drift, `s·R(θ)·μ + u`.
    pub true_drifted_means: Vec<[f64; 2]>,
}

impl DriftScenario2D {
    pub fn num_classes(&self) -> usize {
        self.before.len()
    }

    pub fn empirical_mean_before(&self, class: usize) -> [f64; 2] {
        let m = self.before[class].column_means();
        [m[0], m[1]]
    }

    pub fn empirical_mean_after(&self, class: usize) -> [f64; 2] {
        let m = self.after[class].column_means();
        [m[0], m[1]]
    }
}

fn draw(g: &Gaussian2, tree: SeedTree) -> Result<Matrix> {
    let l = g.cholesky()?;
    let mut rng = tree.rng();
    let mut data = Vec::with_capacity(2 * g.samples);
    for _ in 0..g.samples {
        let z0: f64 = StandardNormal.sample(&mut rng);
        let z1: f64 = StandardNormal.sample(&mut rng);
        data.push(g.mean[0] + l[0][0] * z0);
        data.push(g.mean[1] + l[1][0] * z0 + l[1][1] * z1);
    }
    Matrix::from_vec(g.samples, 2, data)
}

pub fn generate_drift_scenario(spec: &DriftScenarioSpec) -> Result<DriftScenario2D> {
    let t = spec.transform;
    if t.scale == 0.0 || !t.scale.is_finite() {
        return Err(Error::param(format!("drift scale must be non-zero, got {}", t.scale)));
    }
    if !t.theta.is_finite() || !t.translation.iter().all(|v| v.is_finite()) {
        return Err(Error::param("drift transform has non-finite components"));
    }
    if spec.classes.is_empty() {
        return Err(Error::param("scenario needs at least one class"));
    }
    if spec.classes.iter().any(|g| g.samples == 0) {
        return Err(Error::param("every class needs at least one sample"));
    }
    let root = SeedTree(spec.seed).child("drift2d");
    let mut before = Vec::new();
    let mut after = Vec::new();
    for (k, g) in spec.classes.iter().enumerate() {
        let x = draw(g, root.indexed("before", k))?;
        let y = if spec.resample {
            t.apply_rows(&draw(g, root.indexed("after", k))?)
        } else {
            t.apply_rows(&x)
        };
        before.push(x);
        after.push(y);
    }
    Ok(DriftScenario2D {
        spec: spec.clone(),
        before,
        after,
        true_drifted_means: spec.classes.iter().map(|g| t.apply(g.mean)).collect(),
    })
}
