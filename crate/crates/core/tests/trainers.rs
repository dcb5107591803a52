use std::path::Path;

use driftlab::data::{apply_label_fraction, generate_blob_stream, BlobStreamSpec, Task};
use driftlab::drift::ChainRow;
use driftlab::eval::{accuracy_over_seen, eval_set};
use driftlab::experiment::{final_means, run_experiment, ExperimentConfig, Method};
use driftlab::extractor::{snapshot, FeatureExtractor, FeatureMap};
use driftlab::nn::MlpSpec;
use driftlab::prototypes::{compute_prototypes, PrototypePool};
use driftlab::rng::SeedTree;
use driftlab::tensor::sq_dist;
use driftlab::training::{train_finetune, train_joint, ClassifierHead, TrainConfig, TrainerKind};

fn blobs(num_tasks: usize, sep: f64, samples: usize, seed: u64) -> driftlab::data::TaskStream {
    generate_blob_stream(&BlobStreamSpec {
        num_tasks,
        classes_per_task: 4,
        input_dim: 16,
        samples_per_class: samples,
        class_separation: sep,
        seed,
    })
    .unwrap()
}

fn head_accuracy(f: &FeatureExtractor, head: &ClassifierHead, tasks: &[&Task]) -> f64 {
    let (mut correct, mut total) = (0, 0);
    for t in tasks {
        let logits = head.logits(&f.embed(&t.inputs).unwrap()).unwrap();
        for (r, &y) in t.labels.iter().enumerate() {
            let row = logits.row(r);
            let best = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            correct += usize::from(head.classes()[best] == y);
            total += 1;
        }
    }
    correct as f64 / total as f64
}

#[test]
fn joint_linear_classifier_separates_wide_blobs() {
    let s = blobs(5, 10.0, 50, 1);
    // no hidden layer: the whole model is linear
    let spec = MlpSpec {
        input_dim: 16,
        hidden: vec![],
        output_dim: 16,
        final_relu: false,
    };
    let mut f = FeatureExtractor::new(spec, &mut SeedTree(2).rng()).unwrap();
    let mut head = ClassifierHead::new(16);
    let tasks: Vec<&Task> = s.tasks.iter().collect();
    let cfg = TrainConfig {
        epochs: 30,
        milestones: vec![],
        ..TrainConfig::default()
    };
    train_joint(&mut f, &mut head, &tasks, &cfg).unwrap();
    let acc = head_accuracy(&f, &head, &tasks);
    assert!(acc > 0.95, "accuracy {acc}");
}

#[test]
fn finetuning_degrades_old_ncm_accuracy() {
    let s = blobs(2, 4.0, 100, 3);
    let spec = MlpSpec {
        input_dim: 16,
        hidden: vec![64],
        output_dim: 16,
        final_relu: false,
    };
    let mut f = FeatureExtractor::new(spec, &mut SeedTree(4).rng()).unwrap();
    let mut head = ClassifierHead::new(16);
    let cfg = TrainConfig {
        epochs: 40,
        milestones: vec![],
        ..TrainConfig::default()
    };
    train_finetune(&mut f, &mut head, &s.tasks[0], &cfg).unwrap();
    let mut pool = PrototypePool::new(16);
    pool.insert_all(compute_prototypes(&f, &s.tasks[0], true).unwrap(), 1).unwrap();
    let (x, y) = eval_set(&s, 1).unwrap();
    let before = accuracy_over_seen(&f, &pool, &x, &y, false).unwrap();

    let frozen = snapshot(&f);
    train_finetune(&mut f, &mut head, &s.tasks[1], &cfg).unwrap();
    pool.insert_all(compute_prototypes(&f, &s.tasks[1], true).unwrap(), 2).unwrap();
    let after = accuracy_over_seen(&f, &pool, &x, &y, false).unwrap();
    assert!(after < before, "task-1 accuracy {before} -> {after}");
    // the frozen copy still reproduces the first score
    let mut old_pool = PrototypePool::new(16);
    old_pool.insert_all(compute_prototypes(&frozen, &s.tasks[0], true).unwrap(), 1).unwrap();
    assert_eq!(accuracy_over_seen(&frozen, &old_pool, &x, &y, false).unwrap(), before);
}

/// Mean over earlier prefixes of accuracy right after learning them minus
/// accuracy at the final task.
fn forgetting(chain: &[(u64, ChainRow)], method: &str) -> f64 {
    let last = chain.iter().map(|(_, r)| r.task).max().unwrap();
    let mut drops = Vec::new();
    for (seed, r) in chain.iter().filter(|(_, r)| r.strategy == method && r.task == last && r.prefix < last) {
        let first = chain
            .iter()
            .find(|(s, q)| s == seed && q.strategy == method && q.task == r.prefix && q.prefix == r.prefix)
            .unwrap();
        drops.push(first.1.accuracy - r.accuracy);
    }
    drops.iter().sum::<f64>() / drops.len() as f64
}

fn scaled(trainer: TrainerKind, methods: Vec<Method>) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new((0..5).collect(), methods);
    cfg.trainer = trainer;
    cfg.training.epoch_scale = 0.25;
    cfg
}

#[test]
fn lwf_forgets_less_than_finetuning_and_trails_joint() {
    let ft = run_experiment(&scaled(TrainerKind::Finetune, vec![Method::Naive]), Path::new("."), "").unwrap();
    let lwf = run_experiment(
        &scaled(TrainerKind::Lwf, vec![Method::Naive, Method::Joint]),
        Path::new("."),
        "",
    )
    .unwrap();
    let (f_ft, f_lwf) = (forgetting(&ft.chain, "naive"), forgetting(&lwf.chain, "naive"));
    println!("forgetting: finetune {f_ft:.4}, lwf {f_lwf:.4}");
    assert!(f_lwf < f_ft);

    let means = final_means(&lwf.report);
    let get = |m: &str| means.iter().find(|(n, _, _)| n == m).unwrap().2;
    assert!(get("joint") >= get("naive"), "joint {} vs lwf {}", get("joint"), get("naive"));
}

#[test]
fn few_labels_give_a_nearby_prototype() {
    // report only: distance of the 5% prototype to the full one, in units of
    // the per-dimension feature spread
    let s = blobs(1, 4.0, 500, 9);
    let masked = apply_label_fraction(&s, 0.05, 10).unwrap();
    let spec = MlpSpec {
        input_dim: 16,
        hidden: vec![32],
        output_dim: 16,
        final_relu: false,
    };
    let f = FeatureExtractor::new(spec, &mut SeedTree(11).rng()).unwrap();
    let full = compute_prototypes(&f, &s.tasks[0], true).unwrap();
    let few = compute_prototypes(&f, &masked.tasks[0], true).unwrap();
    assert_eq!(masked.tasks[0].labeled_count(0), 25);
    let feats = f.embed(&s.tasks[0].inputs).unwrap();
    for (c, mu) in &full {
        let idx = s.tasks[0].class_indices(*c, false);
        let var = idx.iter().map(|&i| sq_dist(feats.row(i), mu)).sum::<f64>() / idx.len() as f64;
        let ratio = sq_dist(&few[c], mu).sqrt() / var.sqrt();
        println!("class {c}: |few - full| / spread = {ratio:.3}");
        assert!(ratio.is_finite());
    }
}
