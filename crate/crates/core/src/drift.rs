//! Prototype drift compensation between consecutive extractors.
//!
//! LDC fits a projector from old-extractor features to new-extractor features
//! on current data and pushes the stored prototypes through it. SDC moves each
//! prototype by a kernel-weighted average of per-sample feature drift.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Task, TaskStream};
use crate::error::{Error, Result};
use crate::eval::{accuracy_over_seen, eval_set};
use crate::extractor::FeatureMap;
use crate::loss::mse_loss;
use crate::nn::{relu, relu_backward, Gradients, Linear, Parameterized};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::prototypes::{compute_prototypes, ClassVectors, PrototypePool};
use crate::rng::SeedTree;
use crate::tensor::{sq_dist, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectorVariant {
    /// `y = W·x`
    Linear,
    /// `y = W·x + b`
    LinearBias,
    /// `y = relu(W·x)`
    LinearRelu,
    /// `y = x + W₂·relu(W₁·x + b₁) + b₂`
    Mlp,
}

impl ProjectorVariant {
    pub const ALL: [ProjectorVariant; 4] = [
        ProjectorVariant::Linear,
        ProjectorVariant::LinearBias,
        ProjectorVariant::LinearRelu,
        ProjectorVariant::Mlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProjectorVariant::Linear => "linear",
            ProjectorVariant::LinearBias => "linear-bias",
            ProjectorVariant::LinearRelu => "linear-relu",
            ProjectorVariant::Mlp => "mlp",
        }
    }
}

/// A `d → d` map, initialised at (or as close as the variant allows to) the
/// identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    variant: ProjectorVariant,
    first: Linear,
    /// Output layer of the MLP variant.
    second: Option<Linear>,
}

struct ProjectorTrace {
    input: Matrix,
    pre: Matrix,
    hidden: Option<Matrix>,
}

impl Projector {
    /// Identity start: `W = I`, biases zero. The MLP's random first layer is
    /// masked by a zero output layer, so its initial map is exactly `x`.
    pub fn new(variant: ProjectorVariant, dim: usize, seed: SeedTree) -> Result<Projector> {
        if dim == 0 {
            return Err(Error::param("projector dim must be ≥ 1"));
        }
        Ok(match variant {
            ProjectorVariant::Linear | ProjectorVariant::LinearRelu => Projector {
                variant,
                first: Linear::identity(dim, false),
                second: None,
            },
            ProjectorVariant::LinearBias => Projector {
                variant,
                first: Linear::identity(dim, true),
                second: None,
            },
            ProjectorVariant::Mlp => Projector {
                variant,
                first: Linear::init(dim, dim, true, &mut seed.child("projector-mlp").rng()),
                second: Some(Linear::zeros(dim, dim, true)),
            },
        })
    }

    pub fn variant(&self) -> ProjectorVariant {
        self.variant
    }

    pub fn dim(&self) -> usize {
        self.first.in_dim()
    }

    /// Weight of the single affine layer (`None` for the MLP).
    pub fn linear_weight(&self) -> Option<&Matrix> {
        (self.variant != ProjectorVariant::Mlp).then_some(&self.first.weight)
    }

    pub fn linear_bias(&self) -> Option<&[f64]> {
        if self.variant == ProjectorVariant::Mlp {
            None
        } else {
            self.first.bias.as_deref()
        }
    }

    fn trace(&self, x: &Matrix) -> Result<(ProjectorTrace, Matrix)> {
        let pre = self.first.forward(x)?;
        let (hidden, out) = match self.variant {
            ProjectorVariant::Linear | ProjectorVariant::LinearBias => (None, pre.clone()),
            ProjectorVariant::LinearRelu => (None, relu(&pre)),
            ProjectorVariant::Mlp => {
                let h = relu(&pre);
                let mut y = self.second.as_ref().expect("mlp output layer").forward(&h)?;
                for (o, i) in y.as_mut_slice().iter_mut().zip(x.as_slice()) {
                    *o += i;
                }
                (Some(h), y)
            }
        };
        Ok((
            ProjectorTrace {
                input: x.clone(),
                pre,
                hidden,
            },
            out,
        ))
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.trace(x)?.1)
    }

    /// Parameter gradients for `∂L/∂y = grad_out`.
    fn backward(&self, t: &ProjectorTrace, grad_out: &Matrix) -> Result<Gradients> {
        match self.variant {
            ProjectorVariant::Linear | ProjectorVariant::LinearBias => Ok(self.first.backward(&t.input, grad_out)?.0),
            ProjectorVariant::LinearRelu => {
                let g = relu_backward(&t.pre, grad_out);
                Ok(self.first.backward(&t.input, &g)?.0)
            }
            ProjectorVariant::Mlp => {
                let second = self.second.as_ref().expect("mlp output layer");
                let h = t.hidden.as_ref().expect("mlp trace");
                let (g2, gh) = second.backward(h, grad_out)?;
                let (mut g1, _) = self.first.backward(&t.input, &relu_backward(&t.pre, &gh))?;
                g1.extend(g2);
                Ok(g1)
            }
        }
    }

    /// Loss `(1/N)Σ‖p(x) − y‖²` and its parameter gradients.
    pub fn loss_and_grad(&self, x: &Matrix, y: &Matrix) -> Result<(f64, Gradients)> {
        let (t, out) = self.trace(x)?;
        let (loss, g) = mse_loss(&out, y)?;
        Ok((loss, self.backward(&t, &g)?))
    }

    pub fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Matrix::row_vector(v)?)?.into_vec())
    }
}

impl Parameterized for Projector {
    fn params(&self) -> Vec<&[f64]> {
        let mut p = self.first.params();
        if let Some(s) = &self.second {
            p.extend(s.params());
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.first.params_mut();
        if let Some(s) = &mut self.second {
            p.extend(s.params_mut());
        }
        p
    }
}

impl FeatureMap for Projector {
    fn input_dim(&self) -> usize {
        self.dim()
    }

    fn feature_dim(&self) -> usize {
        self.dim()
    }

    fn embed(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine decay from `lr` to zero over all steps.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectorConfig {
    pub variant: ProjectorVariant,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig::supervised()
    }
}

impl ProjectorConfig {
    /// Adam, lr 1e-3, 20 epochs.
    pub fn supervised() -> Self {
        ProjectorConfig {
            variant: ProjectorVariant::Linear,
            epochs: 20,
            lr: 1e-3,
            batch_size: 128,
            schedule: LrSchedule::Constant,
            seed: 0,
        }
    }

    /// Adam, lr 5e-3, 100 epochs.
    pub fn semi_supervised() -> Self {
        ProjectorConfig {
            epochs: 100,
            lr: 5e-3,
            ..Self::supervised()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::param("projector epochs must be ≥ 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param(format!("projector lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::param("projector batch size must be ≥ 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectorFit {
    /// Full-data loss before the first step (identity map).
    pub initial_loss: f64,
    /// Full-data loss after the last step.
    pub final_loss: f64,
    pub steps: u64,
}

/// Fit a projector sending rows of `source` to the matching rows of `target`.
pub fn fit_projector(source: &Matrix, target: &Matrix, cfg: &ProjectorConfig) -> Result<(Projector, ProjectorFit)> {
    cfg.validate()?;
    source.check_same_shape(target, "projector source and target")?;
    let root = SeedTree(cfg.seed).child("projector");
    let mut p = Projector::new(cfg.variant, source.cols(), root)?;
    let initial_loss = mse_loss(&p.forward(source)?, target)?.0;
    let n = source.rows();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as f64;
    let mut opt = OptimizerState::new(OptimizerKind::adam(), cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for e in 0..cfg.epochs {
        order.shuffle(&mut root.indexed("epoch", e).rng());
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.schedule == LrSchedule::Cosine {
                opt.lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            }
            let (_, g) = p.loss_and_grad(&source.select_rows(chunk)?, &target.select_rows(chunk)?)?;
            opt.step(&mut p, &g)?;
            step += 1;
        }
    }
    let final_loss = mse_loss(&p.forward(source)?, target)?.0;
    if !final_loss.is_finite() {
        return Err(Error::Numeric("projector training diverged".into()));
    }
    Ok((
        p,
        ProjectorFit {
            initial_loss,
            final_loss,
            steps: opt.steps(),
        },
    ))
}

/// Train `p` to map `prev(x)` to `curr(x)` over the rows of `data`. Labels are
/// not part of the interface.
pub fn train_projector(
    prev: &dyn FeatureMap,
    curr: &dyn FeatureMap,
    data: &Matrix,
    cfg: &ProjectorConfig,
) -> Result<(Projector, ProjectorFit)> {
    cfg.validate()?;
    if prev.feature_dim() != curr.feature_dim() || prev.input_dim() != curr.input_dim() {
        return Err(Error::state(format!(
            "extractors disagree: {}→{} vs {}→{}",
            prev.input_dim(),
            prev.feature_dim(),
            curr.input_dim(),
            curr.feature_dim()
        )));
    }
    fit_projector(&prev.embed(data)?, &curr.embed(data)?, cfg)
}

/// Classes of `pool` introduced before `task`.
pub fn old_classes(pool: &PrototypePool, task: usize) -> Vec<usize> {
    pool.iter().filter(|(_, e)| e.origin_task < task).map(|(c, _)| c).collect()
}

/// Replace every prototype from an earlier task by its projection.
pub fn ldc_correct(pool: &mut PrototypePool, projector: &Projector, task: usize) -> Result<()> {
    if projector.dim() != pool.dim() {
        return Err(Error::state(format!(
            "projector dim {} does not match prototype dim {}",
            projector.dim(),
            pool.dim()
        )));
    }
    let updates = old_classes(pool, task)
        .into_iter()
        .map(|c| Ok((c, projector.apply(pool.get(c).expect("listed class"))?)))
        .collect::<Result<ClassVectors>>()?;
    pool.update(&updates, task)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdcEstimate {
    pub drift: Vec<f64>,
    /// Normalised weights over the samples (sum to one).
    pub weights: Vec<f64>,
    /// Kernel weights all underflowed; `drift` is the plain mean.
    pub fallback: bool,
}

/// Gaussian-kernel weighted mean of the rows of `delta`, weighted by the
/// distance of the matching `prev_feats` row to `center`.
pub fn sdc_drift(prev_feats: &Matrix, delta: &Matrix, center: &[f64], sigma: f64) -> Result<SdcEstimate> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("SDC kernel width must be positive, got {sigma}")));
    }
    prev_feats.check_same_shape(delta, "SDC features and drift")?;
    if center.len() != prev_feats.cols() {
        return Err(Error::dim(format!(
            "prototype dim {} vs feature dim {}",
            center.len(),
            prev_feats.cols()
        )));
    }
    let denom = 2.0 * sigma * sigma;
    let mut w: Vec<f64> = prev_feats.row_iter().map(|r| (-sq_dist(r, center) / denom).exp()).collect();
    let total: f64 = w.iter().sum();
    let fallback = total <= 0.0;
    if fallback {
        w.fill(1.0);
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    let mut drift = vec![0.0; delta.cols()];
    for (wi, r) in w.iter().zip(delta.row_iter()) {
        for (d, v) in drift.iter_mut().zip(r) {
            *d += wi * v;
        }
    }
    Ok(SdcEstimate {
        drift,
        weights: w,
        fallback,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SdcReport {
    /// Classes whose kernel weights underflowed.
    pub fallback_classes: Vec<usize>,
}

/// Move each earlier-task prototype by its kernel-weighted drift.
pub fn sdc_correct(
    pool: &mut PrototypePool,
    prev: &dyn FeatureMap,
    curr: &dyn FeatureMap,
    data: &Matrix,
    sigma: f64,
    task: usize,
) -> Result<SdcReport> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::param(format!("SDC kernel width must be positive, got {sigma}")));
    }
    if prev.feature_dim() != curr.feature_dim() || prev.feature_dim() != pool.dim() {
        return Err(Error::state("SDC extractors and pool disagree on feature dim"));
    }
    let before = prev.embed(data)?;
    let delta = curr.embed(data)?.sub(&before)?;
    let mut report = SdcReport::default();
    let mut updates = ClassVectors::new();
    for c in old_classes(pool, task) {
        let p = pool.get(c).expect("listed class");
        let est = sdc_drift(&before, &delta, p, sigma)?;
        if est.fallback {
            report.fallback_classes.push(c);
        }
        updates.insert(c, p.iter().zip(&est.drift).map(|(a, b)| a + b).collect());
    }
    pool.update(&updates, task)?;
    Ok(report)
}

/// Oracle prototypes: every earlier-task class recomputed under `curr` from
/// all of its original samples.
pub fn oracle_prototypes(pool: &PrototypePool, curr: &dyn FeatureMap, old_tasks: &[&Task], task: usize) -> Result<ClassVectors> {
    let wanted: BTreeSet<usize> = old_classes(pool, task).into_iter().collect();
    let mut out = ClassVectors::new();
    for t in old_tasks {
        if t.classes.iter().any(|c| wanted.contains(c)) {
            for (c, v) in compute_prototypes(curr, t, false)? {
                if wanted.contains(&c) {
                    out.insert(c, v);
                }
            }
        }
    }
    if let Some(c) = wanted.iter().find(|c| !out.contains_key(c)) {
        return Err(Error::data(format!("no stored samples for class {c}")));
    }
    Ok(out)
}

pub fn oracle_correct(pool: &mut PrototypePool, curr: &dyn FeatureMap, old_tasks: &[&Task], task: usize) -> Result<()> {
    let updates = oracle_prototypes(pool, curr, old_tasks, task)?;
    pool.update(&updates, task)
}

/// One prototype strategy as evaluated at a task boundary.
pub struct StrategyState<'a> {
    pub name: &'a str,
    pub extractor: &'a dyn FeatureMap,
    pub pool: &'a PrototypePool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRow {
    pub task: usize,
    pub strategy: String,
    /// Accuracy is measured over the test samples of tasks `1..=prefix`.
    pub prefix: usize,
    pub accuracy: f64,
}

/// NCM accuracy of each strategy over each requested task prefix.
pub fn chain_report(task: usize, strategies: &[StrategyState], test: &TaskStream, prefixes: &[usize]) -> Result<Vec<ChainRow>> {
    let Some(first) = strategies.first() else {
        return Err(Error::state("no strategies to compare"));
    };
    let classes = first.pool.classes();
    for s in strategies {
        if s.pool.classes() != classes {
            return Err(Error::state(format!(
                "strategy `{}` holds classes {:?}, `{}` holds {:?}",
                s.name,
                s.pool.classes(),
                first.name,
                classes
            )));
        }
    }
    let mut rows = Vec::new();
    for &k in prefixes {
        if k > task {
            return Err(Error::param(format!("prefix {k} extends past task {task}")));
        }
        let (x, y) = eval_set(test, k)?;
        for s in strategies {
            rows.push(ChainRow {
                task,
                strategy: s.name.to_string(),
                prefix: k,
                accuracy: accuracy_over_seen(s.extractor, s.pool, &x, &y, false)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extractor::{AffineAfter, IdentityMap};
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    /// Normal-equations solution `W = (YᵀX)(XᵀX)⁻¹`, `d_out × d_in`.
    fn ls_oracle(x: &Matrix, y: &Matrix) -> Matrix {
        let xm = nalgebra::DMatrix::from_row_slice(x.rows(), x.cols(), x.as_slice());
        let ym = nalgebra::DMatrix::from_row_slice(y.rows(), y.cols(), y.as_slice());
        let w = (ym.transpose() * &xm) * (xm.transpose() * &xm).try_inverse().unwrap();
        let rows: Vec<Vec<f64>> = (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect();
        Matrix::from_rows(&rows).unwrap()
    }

    fn gaussian(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = SeedTree(seed).rng();
        Matrix::from_vec(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
    }

    /// Random matrix with singular values spread over roughly [0.5, 1.5].
    fn well_conditioned(d: usize, seed: u64) -> Matrix {
        let mut rng = SeedTree(seed).rng();
        let mut m = Matrix::identity(d);
        for v in m.as_mut_slice() {
            *v += rng.gen_range(-0.5..0.5) / (d as f64).sqrt();
        }
        m
    }

    #[test]
    fn every_variant_starts_at_identity() {
        let x = gaussian(10, 4, 1).map(f64::abs);
        for v in ProjectorVariant::ALL {
            let p = Projector::new(v, 4, SeedTree(0)).unwrap();
            assert_eq!(p.forward(&x).unwrap(), x, "{v:?}");
        }
    }

    #[test]
    fn no_drift_converges_to_identity() {
        let x = gaussian(256, 6, 2);
        let (p, fit) = train_projector(&IdentityMap(6), &IdentityMap(6), &x, &ProjectorConfig::supervised()).unwrap();
        assert!(fit.final_loss < 1e-3);
        for r in x.row_iter().take(5) {
            let y = p.apply(r).unwrap();
            assert!(sq_dist(&y, r).sqrt() < 1e-3);
        }
    }

    #[test]
    fn validation_errors() {
        let x = gaussian(8, 3, 0);
        let mut cfg = ProjectorConfig::supervised();
        cfg.epochs = 0;
        assert!(matches!(
            train_projector(&IdentityMap(3), &IdentityMap(3), &x, &cfg),
            Err(Error::Parameter(_))
        ));
        let cfg = ProjectorConfig::supervised();
        assert!(matches!(
            train_projector(&IdentityMap(3), &IdentityMap(4), &x, &cfg),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn linear_drift_matches_normal_equations() {
        let d = 8;
        let a = well_conditioned(d, 9);
        let x = gaussian(512, d, 4);
        let curr = AffineAfter {
            inner: IdentityMap(d),
            matrix: a.clone(),
            offset: None,
        };
        let cfg = ProjectorConfig {
            epochs: 300,
            lr: 1e-2,
            schedule: LrSchedule::Cosine,
            ..ProjectorConfig::supervised()
        };
        let (p, _) = train_projector(&IdentityMap(d), &curr, &x, &cfg).unwrap();
        let w_star = ls_oracle(&x, &curr.embed(&x).unwrap());
        let err = p.linear_weight().unwrap().sub(&w_star).unwrap().frobenius_norm() / w_star.frobenius_norm();
        assert!(err < 1e-2, "relative error {err}");
        // exact linear drift: normal equations recover A itself
        assert!(w_star.sub(&a).unwrap().frobenius_norm() < 1e-9);
    }

    #[test]
    fn ldc_touches_only_old_classes() {
        let mut pool = PrototypePool::new(2);
        pool.insert(0, vec![1.0, 2.0], 1).unwrap();
        pool.insert(1, vec![3.0, 4.0], 2).unwrap();
        let mut p = Projector::new(ProjectorVariant::Linear, 2, SeedTree(0)).unwrap();
        p.params_mut()[0].copy_from_slice(&[2.0, 0.0, 0.0, 2.0]);
        ldc_correct(&mut pool, &p, 2).unwrap();
        assert_eq!(pool.get(0).unwrap(), &[2.0, 4.0]);
        assert_eq!(pool.get(1).unwrap(), &[3.0, 4.0]);
        let id = Projector::new(ProjectorVariant::Linear, 2, SeedTree(0)).unwrap();
        let before = pool.clone();
        ldc_correct(&mut pool, &id, 3).unwrap();
        assert_eq!(pool.get(0), before.get(0));
        let wrong = Projector::new(ProjectorVariant::Linear, 3, SeedTree(0)).unwrap();
        assert!(matches!(ldc_correct(&mut pool, &wrong, 3), Err(Error::State(_))));
    }

    #[test]
    fn exact_map_gives_oracle_prototype() {
        let d = 3;
        let a = well_conditioned(d, 2);
        let x = gaussian(40, d, 3);
        let old = Task::new(1, x.clone(), vec![0; 40], vec![true; 40]).unwrap();
        let curr = AffineAfter {
            inner: IdentityMap(d),
            matrix: a.clone(),
            offset: None,
        };
        let mut pool = PrototypePool::new(d);
        pool.insert_all(compute_prototypes(&IdentityMap(d), &old, false).unwrap(), 1).unwrap();
        let mut p = Projector::new(ProjectorVariant::Linear, d, SeedTree(0)).unwrap();
        p.params_mut()[0].copy_from_slice(a.as_slice());
        ldc_correct(&mut pool, &p, 2).unwrap();
        let oracle = oracle_prototypes(&pool, &curr, &[&old], 2).unwrap();
        for (u, v) in pool.get(0).unwrap().iter().zip(&oracle[&0]) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn sdc_underflow_falls_back() {
        let x = gaussian(20, 2, 5);
        let mut delta = x.clone();
        for (i, v) in delta.as_mut_slice().iter_mut().enumerate() {
            *v = i as f64;
        }
        let est = sdc_drift(&x, &delta, &[1e4, 1e4], 1e-3).unwrap();
        assert!(est.fallback);
        let mean = delta.column_means();
        for (a, b) in est.drift.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(matches!(sdc_drift(&x, &delta, &[0.0, 0.0], 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn sdc_flags_class_in_report() {
        let x = gaussian(20, 2, 5);
        let mut pool = PrototypePool::new(2);
        pool.insert(3, vec![1e4, 1e4], 1).unwrap();
        pool.insert(4, vec![0.0, 0.0], 1).unwrap();
        let shift = AffineAfter {
            inner: IdentityMap(2),
            matrix: Matrix::identity(2),
            offset: Some(vec![1.0, 1.0]),
        };
        let rep = sdc_correct(&mut pool, &IdentityMap(2), &shift, &x, 0.01, 2).unwrap();
        assert_eq!(rep.fallback_classes, vec![3]);
    }

    #[test]
    fn oracle_cases() {
        let x = gaussian(10, 2, 1);
        let t1 = Task::new(1, x.clone(), vec![0; 10], vec![true; 10]).unwrap();
        let mut pool = PrototypePool::new(2);
        // first task: nothing is old
        assert!(oracle_prototypes(&pool, &IdentityMap(2), &[], 1).unwrap().is_empty());
        pool.insert_all(compute_prototypes(&IdentityMap(2), &t1, true).unwrap(), 1).unwrap();
        let naive = pool.clone();
        oracle_correct(&mut pool, &IdentityMap(2), &[&t1], 2).unwrap();
        assert_eq!(pool.get(0), naive.get(0));
        assert!(matches!(oracle_correct(&mut pool, &IdentityMap(2), &[], 3), Err(Error::Data(_))));
    }

    #[test]
    fn mlp_gradient_matches_finite_difference() {
        let x = gaussian(6, 3, 8);
        let y = gaussian(6, 3, 9);
        for v in ProjectorVariant::ALL {
            let mut p = Projector::new(v, 3, SeedTree(1)).unwrap();
            // move off the identity so every path carries gradient
            for (i, q) in p.params_mut().into_iter().enumerate() {
                for (j, w) in q.iter_mut().enumerate() {
                    *w += 0.1 * (((i * 7 + j * 13) % 11) as f64 - 5.0) / 5.0;
                }
            }
            let (_, g) = p.loss_and_grad(&x, &y).unwrap();
            let h = 1e-5;
            for (k, gk) in g.iter().enumerate() {
                for (j, &an) in gk.iter().enumerate() {
                    let mut a = p.clone();
                    a.params_mut()[k][j] += h;
                    let mut b = p.clone();
                    b.params_mut()[k][j] -= h;
                    let num = (a.loss_and_grad(&x, &y).unwrap().0 - b.loss_and_grad(&x, &y).unwrap().0) / (2.0 * h);
                    assert!((num - an).abs() <= 1e-6 + 1e-4 * an.abs().max(num.abs()), "{v:?} {k} {j}: {num} vs {an}");
                }
            }
        }
    }

    #[test]
    fn two_updates_equal_composition() {
        let mut pool = PrototypePool::new(2);
        pool.insert(0, vec![0.5, -1.5], 1).unwrap();
        let mut p1 = Projector::new(ProjectorVariant::Linear, 2, SeedTree(0)).unwrap();
        p1.params_mut()[0].copy_from_slice(&[1.1, 0.2, -0.3, 0.9]);
        let mut p2 = Projector::new(ProjectorVariant::LinearBias, 2, SeedTree(0)).unwrap();
        p2.params_mut()[0].copy_from_slice(&[0.7, -0.1, 0.4, 1.2]);
        p2.params_mut()[1].copy_from_slice(&[0.3, -0.2]);
        let composed = p2.apply(&p1.apply(&[0.5, -1.5]).unwrap()).unwrap();
        ldc_correct(&mut pool, &p1, 2).unwrap();
        ldc_correct(&mut pool, &p2, 3).unwrap();
        assert_eq!(pool.get(0).unwrap(), composed.as_slice());
        assert_eq!(pool.entry(0).unwrap().updated_task, 3);
    }

    proptest! {
        #[test]
        fn sdc_translation_exact(
            seed in 0u64..10_000,
            sigma in 0.05f64..5.0,
            u in proptest::collection::vec(-10.0f64..10.0, 3),
            proto in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let x = gaussian(30, 3, seed);
            let shift = AffineAfter { inner: IdentityMap(3), matrix: Matrix::identity(3), offset: Some(u.clone()) };
            let mut pool = PrototypePool::new(3);
            pool.insert(0, proto.clone(), 1).unwrap();
            sdc_correct(&mut pool, &IdentityMap(3), &shift, &x, sigma, 2).unwrap();
            for ((p, q), s) in pool.get(0).unwrap().iter().zip(&proto).zip(&u) {
                prop_assert!((p - (q + s)).abs() < 1e-10);
            }
        }

        #[test]
        fn sdc_is_convex_combination(seed in 0u64..10_000, sigma in 0.1f64..3.0) {
            let x = gaussian(15, 2, seed);
            let delta = gaussian(15, 2, seed + 1);
            let est = sdc_drift(&x, &delta, &[0.3, -0.2], sigma).unwrap();
            prop_assert!((est.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(est.weights.iter().all(|w| *w >= 0.0));
            for j in 0..2 {
                let lo = delta.row_iter().map(|r| r[j]).fold(f64::INFINITY, f64::min);
                let hi = delta.row_iter().map(|r| r[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(est.drift[j] >= lo - 1e-12 && est.drift[j] <= hi + 1e-12);
            }
        }
    }
}
