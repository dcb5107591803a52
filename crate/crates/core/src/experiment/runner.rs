//! The per-task loop: train the backbone, fit the projector on the new data,
//! update the stored prototypes, add the new classes, evaluate.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;

use super::checkpoint::Checkpoint;
use super::config::{ExperimentConfig, Method, TrainerLabels};
use crate::data::{apply_label_fraction, Task, TaskStream};
use crate::drift::{
    chain_report, ldc_correct, old_classes, oracle_prototypes, sdc_correct, train_projector, ChainRow, Projector,
    ProjectorConfig, StrategyState,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy_over_seen, cosine_drift_distribution, eval_set, ExperimentReport, TaskRecord};
use crate::extractor::{FeatureExtractor, FeatureMap, FrozenExtractor};
use crate::prototypes::{compute_prototypes, BankMode, ClassVectors, FeatureBank, PrototypePool};
use crate::rng::SeedTree;
use crate::tensor::norm;
use crate::training::{ContinualLearner, SupervisedLearner, TrainerKind};

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub records: Vec<TaskRecord>,
    pub chain: Vec<ChainRow>,
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    /// `(seed, row)` pairs in seed order.
    pub chain: Vec<(u64, ChainRow)>,
    pub checkpoints: Vec<Checkpoint>,
}

struct MethodState {
    method: Method,
    pool: PrototypePool,
    bank: Option<FeatureBank>,
}

fn invariant(msg: impl Into<String>) -> Error {
    Error::State(msg.into())
}

/// Run every seed of `cfg`. Seeds run in parallel; results are returned in
/// config order and do not depend on the thread count.
pub fn run_experiment(cfg: &ExperimentConfig, base: &Path, variant: &str) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let outcomes: Vec<SeedOutcome> = cfg
        .seeds
        .par_iter()
        .map(|&s| run_seed(cfg, s, base, variant))
        .collect::<Result<_>>()?;
    let mut out = ExperimentOutcome::default();
    for o in outcomes {
        for r in o.records {
            out.report.push(r)?;
        }
        out.chain.extend(o.chain.into_iter().map(|r| (o.seed, r)));
        out.checkpoints.extend(o.checkpoint);
    }
    Ok(out)
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64, base: &Path, variant: &str) -> Result<SeedOutcome> {
    let root = SeedTree(seed);
    let hash = cfg.hash();
    let (train, test) = cfg.stream.build(root, base)?;
    let masked = if cfg.label_fraction < 1.0 {
        apply_label_fraction(&train, cfg.label_fraction, root.child("labels").0)?
    } else {
        train.clone()
    };
    let trainer_stream: &TaskStream = match cfg.trainer_labels {
        TrainerLabels::All => &train,
        TrainerLabels::Labeled => &masked,
    };

    let init = FeatureExtractor::new(cfg.extractor.spec(train.input_dim), &mut root.child("extractor").rng())?;
    let plan = cfg.training.plan();
    let mut learner = SupervisedLearner::new(cfg.trainer, init.clone(), plan.clone(), root.child("trainer"));
    let mut joint = (cfg.methods.contains(&Method::Joint) && cfg.trainer != TrainerKind::Joint)
        .then(|| SupervisedLearner::new(TrainerKind::Joint, init, plan, root.child("joint")));

    let dim = cfg.extractor.feature_dim;
    let mut states = cfg
        .methods
        .iter()
        .map(|&m| {
            let bank = match m {
                Method::Nme => Some(FeatureBank::new(BankMode::Samples, cfg.memory.nme)?),
                Method::FeatureBank => Some(FeatureBank::new(BankMode::Features, cfg.memory.feature_bank)?),
                _ => None,
            };
            Ok(MethodState {
                method: m,
                pool: PrototypePool::new(dim),
                bank,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let needs_projector = cfg.methods.iter().any(|m| matches!(m, Method::Ldc | Method::FeatureBank));

    let mut prev: Option<FrozenExtractor> = None;
    let mut last_projector: Option<Projector> = None;
    let mut records = Vec::new();
    let mut chain = Vec::new();
    let mut a_sums: BTreeMap<Method, f64> = BTreeMap::new();

    for (i, task) in masked.tasks.iter().enumerate() {
        let started = Instant::now();
        let t = task.index;
        // Phase 1: backbone.
        let curr = learner.learn_task(&trainer_stream.tasks[i])?;
        let joint_curr = match joint.as_mut() {
            Some(j) => Some(j.learn_task(&trainer_stream.tasks[i])?),
            None => None,
        };

        // Phase 2: projector on all current samples, labels unused.
        let projector = match (&prev, needs_projector) {
            (Some(p), true) => {
                let pc = ProjectorConfig {
                    seed: root.indexed("ldc", t).0,
                    ..cfg.ldc.clone()
                };
                Some(train_projector(p, &curr, &task.inputs, &pc)?)
            }
            _ => None,
        };

        let old_tasks: Vec<&Task> = train.tasks[..i].iter().collect();
        let new_protos = compute_prototypes(&curr, task, true)?;
        let mut oracle_old: Option<ClassVectors> = None;

        let mut extras: BTreeMap<Method, (Vec<usize>, Option<f64>)> = BTreeMap::new();
        for st in states.iter_mut() {
            // Phase 3: correct old prototypes, then add the new classes.
            let mut fallback = Vec::new();
            let mut proj_loss = None;
            match st.method {
                Method::Naive => {}
                Method::Ldc => {
                    if let Some((p, fit)) = &projector {
                        ldc_correct(&mut st.pool, p, t)?;
                        proj_loss = Some(fit.final_loss);
                    }
                }
                Method::Sdc => {
                    if let Some(p) = &prev {
                        fallback = sdc_correct(&mut st.pool, p, &curr, &task.inputs, cfg.sdc.sigma, t)?.fallback_classes;
                    }
                }
                Method::Oracle => {
                    let o = oracle_prototypes(&st.pool, &curr, &old_tasks, t)?;
                    st.pool.update(&o, t)?;
                }
                Method::Nme => {
                    let bank = st.bank.as_ref().expect("nme bank");
                    let old = old_classes(&st.pool, t);
                    if !old.is_empty() {
                        let means = bank.recompute_means(&curr, &old)?;
                        st.pool.update(&means, t)?;
                    }
                }
                Method::FeatureBank => {
                    let bank = st.bank.as_mut().expect("feature bank");
                    let old = old_classes(&st.pool, t);
                    if let Some((p, fit)) = &projector {
                        bank.project(p, &old)?;
                        proj_loss = Some(fit.final_loss);
                    }
                    if !old.is_empty() {
                        let means = bank.feature_means(&old)?;
                        st.pool.update(&means, t)?;
                    }
                }
                Method::Joint => {}
            }
            match st.method {
                Method::Joint => {
                    let jf: &dyn FeatureMap = joint_curr.as_ref().map_or(&curr as &dyn FeatureMap, |j| j);
                    let mut pool = PrototypePool::new(dim);
                    for k in &masked.tasks[..=i] {
                        pool.insert_all(compute_prototypes(jf, k, true)?, k.index)?;
                    }
                    st.pool = pool;
                }
                _ => st.pool.insert_all(new_protos.clone(), t)?,
            }
            if let Some(bank) = st.bank.as_mut() {
                bank.insert_task(task, &curr, true, root.indexed("bank", t))?;
            }
            extras.insert(st.method, (fallback, proj_loss));
        }

        let seen: Vec<usize> = train.seen_classes(t).into_iter().collect();
        for st in &states {
            if st.pool.classes() != seen {
                return Err(invariant(format!(
                    "{} pool holds {:?} after task {t}, expected {:?}",
                    st.method.name(),
                    st.pool.classes(),
                    seen
                )));
            }
        }

        // Evaluation.
        let (x, y) = eval_set(&test, t)?;
        let extractor_of = |m: Method| -> &dyn FeatureMap {
            match (m, &joint_curr) {
                (Method::Joint, Some(j)) => j,
                _ => &curr,
            }
        };
        let elapsed = started.elapsed().as_millis() as u64;
        for st in &states {
            let a_last = accuracy_over_seen(extractor_of(st.method), &st.pool, &x, &y, cfg.analysis.normalize_features)?;
            let mut cosine = None;
            let mut skipped = Vec::new();
            if t > 1 && st.method != Method::Joint {
                let oracle = match &oracle_old {
                    Some(o) => o,
                    None => oracle_old.insert(oracle_prototypes(&st.pool, &curr, &old_tasks, t)?),
                };
                // 1 − cos is undefined for an all-zero prototype (possible
                // with a final ReLU); such classes are listed, not compared.
                let mut corrected = ClassVectors::new();
                let mut reference = ClassVectors::new();
                for (&c, o) in oracle {
                    let p = st.pool.get(c).expect("seen class");
                    if norm(p) > 0.0 && norm(o) > 0.0 {
                        corrected.insert(c, p.to_vec());
                        reference.insert(c, o.clone());
                    } else {
                        skipped.push(c);
                    }
                }
                if !corrected.is_empty() {
                    cosine = Some(cosine_drift_distribution(&corrected, &reference, cfg.analysis.hist_bins)?);
                }
            }
            let sum = a_sums.entry(st.method).or_insert(0.0);
            *sum += a_last;
            let (fallback, proj_loss) = extras.remove(&st.method).unwrap_or_default();
            records.push(TaskRecord {
                task: t,
                method: st.method.name().to_string(),
                seed,
                config_hash: hash.clone(),
                a_last,
                a_inc: *sum / t as f64,
                cosine_mean: cosine.as_ref().map(|c| c.mean),
                cosine_to_oracle: cosine.map(|c| c.per_class),
                cosine_skipped: skipped,
                sdc_fallback: fallback,
                projector_loss: proj_loss,
                variant: variant.to_string(),
                wall_clock_ms: elapsed,
            });
        }

        if cfg.analysis.prefix_report {
            let strategies: Vec<StrategyState> = states
                .iter()
                .map(|st| StrategyState {
                    name: st.method.name(),
                    extractor: extractor_of(st.method),
                    pool: &st.pool,
                })
                .collect();
            let prefixes: Vec<usize> = (1..=t).collect();
            chain.extend(chain_report(t, &strategies, &test, &prefixes)?);
        }

        last_projector = projector.map(|(p, _)| p).or(last_projector);
        prev = Some(curr);
    }

    let checkpoint = if cfg.checkpoint {
        Some(Checkpoint::new(
            seed,
            masked.num_tasks(),
            learner.extractor().mlp().clone(),
            learner.head().clone(),
            last_projector,
            states.iter().map(|s| (s.method.name().to_string(), s.pool.clone())).collect(),
        ))
    } else {
        None
    };
    Ok(SeedOutcome {
        seed,
        records,
        chain,
        checkpoint,
    })
}
