//! Acceptance suite. Runs every criterion, prints one line each and exits
//! non-zero if any hard criterion fails. Criterion 8 is report-only.

use std::f64::consts::FRAC_PI_4;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use driftlab::data::{generate_drift_scenario, Affine2, DriftScenarioSpec, Task};
use driftlab::drift::{
    ldc_correct, oracle_prototypes, train_projector, LrSchedule, Projector, ProjectorConfig, ProjectorVariant,
};
use driftlab::eval::ncm_classify;
use driftlab::experiment::{
    chain_csv, final_means, run_experiment, summary_csv, ExperimentConfig, ExperimentOutcome,
    Method, StreamConfig,
};
use driftlab::extractor::{AffineAfter, FeatureExtractor, FeatureMap, IdentityMap};
use driftlab::loss::{cross_entropy, distill_ce, mse_loss};
use driftlab::nn::{relu, relu_backward, Linear, Mlp, MlpSpec, Parameterized};
use driftlab::prototypes::{compute_prototypes, PrototypePool};
use driftlab::rng::SeedTree;
use driftlab::tensor::{sq_dist, Matrix};
use driftlab::toy::{run_toy, toy_projector_config};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

struct Verdict {
    id: usize,
    title: &'static str,
    /// `None` marks a report-only criterion.
    pass: Option<bool>,
    detail: String,
    elapsed: Duration,
}

fn timed(id: usize, title: &'static str, f: impl FnOnce() -> (Option<bool>, String)) -> Verdict {
    let start = Instant::now();
    let (pass, detail) = f();
    Verdict {
        id,
        title,
        pass,
        detail,
        elapsed: start.elapsed(),
    }
}

fn gaussian(n: usize, d: usize, seed: u64) -> Matrix {
    let mut rng = SeedTree(seed).rng();
    Matrix::from_vec(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
}

// 1
fn toy_translation() -> (Option<bool>, String) {
    let spec = DriftScenarioSpec::with_transform(
        Affine2 {
            theta: 0.0,
            scale: 1.0,
            translation: [3.0, -2.0],
        },
        0,
    );
    let s = generate_drift_scenario(&spec).unwrap();
    let r = run_toy(&s, &[1, 2], 0, 0.3, &toy_projector_config()).unwrap();
    let ok = r.sdc_error < 1e-6 && r.ldc_error < 1e-3;
    (Some(ok), format!("sdc error {:.2e}, ldc error {:.2e}", r.sdc_error, r.ldc_error))
}

// 2
fn toy_rotation_scale() -> (Option<bool>, String) {
    let spec = DriftScenarioSpec::with_transform(
        Affine2 {
            theta: FRAC_PI_4,
            scale: 1.5,
            translation: [0.0, 0.0],
        },
        0,
    );
    let s = generate_drift_scenario(&spec).unwrap();
    let samples = spec.classes.iter().all(|c| c.samples == 200);
    let r = run_toy(&s, &[1, 2], 0, 0.3, &toy_projector_config()).unwrap();
    let ok = samples && r.ldc_error < 1e-2 && r.sdc_error >= 10.0 * r.ldc_error;
    (Some(ok), format!("ldc error {:.2e}, sdc error {:.3}", r.ldc_error, r.sdc_error))
}

// 3
fn ls_oracle(x: &Matrix, y: &Matrix) -> nalgebra::DMatrix<f64> {
    let xm = nalgebra::DMatrix::from_row_slice(x.rows(), x.cols(), x.as_slice());
    let ym = nalgebra::DMatrix::from_row_slice(y.rows(), y.cols(), y.as_slice());
    (ym.transpose() * &xm) * (xm.transpose() * &xm).try_inverse().unwrap()
}

fn linear_drift_recovery() -> (Option<bool>, String) {
    let (d, n) = (8, 512);
    let mut rng = SeedTree(31).rng();
    let mut a = Matrix::identity(d);
    for v in a.as_mut_slice() {
        *v += rng.gen_range(-0.5..0.5) / (d as f64).sqrt();
    }
    let curr = AffineAfter {
        inner: IdentityMap(d),
        matrix: a,
        offset: None,
    };
    let x = gaussian(n, d, 32);
    let cfg = ProjectorConfig {
        variant: ProjectorVariant::Linear,
        epochs: 300,
        lr: 1e-2,
        schedule: LrSchedule::Cosine,
        ..ProjectorConfig::supervised()
    };
    let (p, _) = train_projector(&IdentityMap(d), &curr, &x, &cfg).unwrap();
    let y = curr.embed(&x).unwrap();
    let w_star = ls_oracle(&x, &y);
    let w = p.linear_weight().unwrap();
    let w = nalgebra::DMatrix::from_row_slice(d, d, w.as_slice());
    let w_err = (&w - &w_star).norm() / w_star.norm();

    // old classes: shifted Gaussians seen only by the previous extractor
    let mut pool = PrototypePool::new(d);
    let mut old = Vec::new();
    for c in 0..4 {
        let mut xc = gaussian(64, d, 40 + c as u64);
        for r in 0..64 {
            xc.row_mut(r)[c] += 3.0;
        }
        old.push(Task::new(1, xc, vec![c; 64], vec![true; 64]).unwrap());
    }
    for t in &old {
        pool.insert_all(compute_prototypes(&IdentityMap(d), t, true).unwrap(), 1).unwrap();
    }
    ldc_correct(&mut pool, &p, 2).unwrap();
    let refs: Vec<&Task> = old.iter().collect();
    let oracle = oracle_prototypes(&pool, &curr, &refs, 2).unwrap();
    let p_err = oracle
        .iter()
        .map(|(&c, o)| sq_dist(pool.get(c).unwrap(), o).sqrt() / o.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let ok = w_err < 1e-2 && p_err < 1e-2;
    (Some(ok), format!("weight rel. error {w_err:.2e}, prototype rel. error {p_err:.2e}"))
}

// 4
fn flat<P: Parameterized>(m: &P) -> Vec<f64> {
    m.params().into_iter().flatten().copied().collect()
}

fn set_flat<P: Parameterized>(m: &mut P, v: &[f64]) {
    let mut k = 0;
    for p in m.params_mut() {
        p.copy_from_slice(&v[k..k + p.len()]);
        k += p.len();
    }
}

/// `‖g − ĝ‖ / max(‖g‖, ‖ĝ‖)` against a central difference with `h = 1e-5`.
fn fd_error(f: impl Fn(&[f64]) -> f64, at: &[f64], analytic: &[f64]) -> f64 {
    let h = 1e-5;
    let mut x = at.to_vec();
    let mut num = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        x[i] = at[i] + h;
        let up = f(&x);
        x[i] = at[i] - h;
        let down = f(&x);
        x[i] = at[i];
        num.push((up - down) / (2.0 * h));
    }
    let diff = num.iter().zip(analytic).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = num.iter().map(|v| v * v).sum::<f64>().sqrt().max(analytic.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn weighted_sum(m: &Matrix, r: &Matrix) -> f64 {
    m.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
}

fn gradient_audit() -> (Option<bool>, String) {
    let mut checks: Vec<(String, f64)> = Vec::new();
    let mut seed = 100;
    let mut next = || {
        seed += 1;
        seed
    };

    for (i, o, bias) in [(3, 4, true), (5, 2, true), (4, 4, true), (6, 3, false)] {
        let lin = Linear::init(i, o, bias, &mut SeedTree(next()).rng());
        let x = gaussian(5, i, next());
        let r = gaussian(5, o, next());
        let (g, gx) = lin.backward(&x, &r).unwrap();
        let gflat: Vec<f64> = g.concat();
        let e = fd_error(
            |p| {
                let mut l = lin.clone();
                set_flat(&mut l, p);
                weighted_sum(&l.forward(&x).unwrap(), &r)
            },
            &flat(&lin),
            &gflat,
        );
        let ex = fd_error(
            |v| weighted_sum(&lin.forward(&Matrix::from_vec(5, i, v.to_vec()).unwrap()).unwrap(), &r),
            x.as_slice(),
            gx.as_slice(),
        );
        checks.push((format!("linear {i}x{o} bias={bias}"), e.max(ex)));
    }

    for (hidden, final_relu) in [(vec![6], false), (vec![5, 4], true), (vec![7, 3], false)] {
        let spec = MlpSpec {
            input_dim: 4,
            hidden: hidden.clone(),
            output_dim: 3,
            final_relu,
        };
        let net = Mlp::new(spec, &mut SeedTree(next()).rng()).unwrap();
        let x = gaussian(6, 4, next());
        let r = gaussian(6, 3, next());
        let trace = net.forward_trace(&x).unwrap();
        let (g, gx) = net.backward(&trace, &r).unwrap();
        let e = fd_error(
            |p| {
                let mut m = net.clone();
                set_flat(&mut m, p);
                weighted_sum(&m.forward(&x).unwrap(), &r)
            },
            &flat(&net),
            &g.concat(),
        );
        let ex = fd_error(
            |v| weighted_sum(&net.forward(&Matrix::from_vec(6, 4, v.to_vec()).unwrap()).unwrap(), &r),
            x.as_slice(),
            gx.as_slice(),
        );
        checks.push((format!("mlp {hidden:?} final_relu={final_relu}"), e.max(ex)));
    }

    for _ in 0..2 {
        let x = gaussian(4, 5, next());
        let r = gaussian(4, 5, next());
        let g = relu_backward(&x, &r);
        let e = fd_error(
            |v| weighted_sum(&relu(&Matrix::from_vec(4, 5, v.to_vec()).unwrap()), &r),
            x.as_slice(),
            g.as_slice(),
        );
        checks.push(("relu".into(), e));
    }

    for _ in 0..3 {
        let p = gaussian(5, 3, next());
        let t = gaussian(5, 3, next());
        let (_, g) = mse_loss(&p, &t).unwrap();
        let e = fd_error(|v| mse_loss(&Matrix::from_vec(5, 3, v.to_vec()).unwrap(), &t).unwrap().0, p.as_slice(), g.as_slice());
        checks.push(("mse".into(), e));
    }

    for k in 0..3 {
        let z = gaussian(6, 4, next());
        let labels: Vec<usize> = (0..6).map(|i| (i + k) % 4).collect();
        let (_, g) = cross_entropy(&z, &labels).unwrap();
        let e = fd_error(
            |v| cross_entropy(&Matrix::from_vec(6, 4, v.to_vec()).unwrap(), &labels).unwrap().0,
            z.as_slice(),
            g.as_slice(),
        );
        checks.push(("softmax cross-entropy".into(), e));
    }

    for temp in [1.0, 2.0, 4.0] {
        let teacher = gaussian(5, 4, next());
        let student = gaussian(5, 4, next());
        let (_, g) = distill_ce(&teacher, &student, temp).unwrap();
        let e = fd_error(
            |v| distill_ce(&teacher, &Matrix::from_vec(5, 4, v.to_vec()).unwrap(), temp).unwrap().0,
            student.as_slice(),
            g.as_slice(),
        );
        checks.push((format!("distillation T={temp}"), e));
    }

    for v in ProjectorVariant::ALL {
        let mut p = Projector::new(v, 3, SeedTree(next())).unwrap();
        let mut rng = SeedTree(next()).rng();
        for q in p.params_mut() {
            for w in q.iter_mut() {
                *w += rng.gen_range(-0.3..0.3);
            }
        }
        let x = gaussian(6, 3, next());
        let y = gaussian(6, 3, next());
        let (_, g) = p.loss_and_grad(&x, &y).unwrap();
        let e = fd_error(
            |w| {
                let mut q = p.clone();
                set_flat(&mut q, w);
                q.loss_and_grad(&x, &y).unwrap().0
            },
            &flat(&p),
            &g.concat(),
        );
        checks.push((format!("projector {}", v.name()), e));
    }

    let worst = checks.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let ok = checks.len() >= 20 && checks.iter().all(|(_, e)| *e < 1e-4);
    (
        Some(ok),
        format!("{} instances, worst {:.2e} ({})", checks.len(), worst.1, worst.0),
    )
}

// 5, 6, 8
fn benchmark_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(
        (0..5).collect(),
        vec![Method::Naive, Method::Sdc, Method::Ldc, Method::Oracle, Method::Joint, Method::Nme],
    );
    cfg.ldc.epochs = 200;
    cfg
}

fn mean_of(out: &ExperimentOutcome, method: &str) -> f64 {
    final_means(&out.report)
        .into_iter()
        .find(|(m, _, _)| m == method)
        .map(|(_, _, a)| a)
        .unwrap()
}

fn final_cosine(out: &ExperimentOutcome, method: &str) -> f64 {
    let v: Vec<f64> = out
        .report
        .finals()
        .iter()
        .filter(|r| r.method == method)
        .map(|r| r.cosine_mean.unwrap())
        .collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn ordering(out: &ExperimentOutcome) -> (Option<bool>, String) {
    let [joint, oracle, ldc, naive] = ["joint", "oracle", "ldc", "naive"].map(|m| mean_of(out, m));
    let gap = oracle - naive;
    let recovery = (ldc - naive) / gap;
    let ok = joint >= oracle && oracle >= ldc && ldc >= naive && gap >= 0.05 && recovery >= 0.5;
    (
        Some(ok),
        format!(
            "joint {joint:.4} oracle {oracle:.4} ldc {ldc:.4} naive {naive:.4}, gap {:.1} pts, recovery {:.0}%",
            100.0 * gap,
            100.0 * recovery
        ),
    )
}

fn ldc_beats_sdc(out: &ExperimentOutcome) -> (Option<bool>, String) {
    let (ldc, sdc) = (mean_of(out, "ldc"), mean_of(out, "sdc"));
    let (cl, cs) = (final_cosine(out, "ldc"), final_cosine(out, "sdc"));
    let ok = ldc >= sdc && cl < cs;
    (
        Some(ok),
        format!("accuracy ldc {ldc:.4} sdc {sdc:.4}, cosine to oracle ldc {cl:.4} sdc {cs:.4}"),
    )
}

fn nme_parity(out: &ExperimentOutcome) -> (Option<bool>, String) {
    let (ldc, nme) = (mean_of(out, "ldc"), mean_of(out, "nme"));
    let within = (ldc - nme).abs() <= 0.03;
    let flag = if within { "within band" } else { "outside band, flagged for review" };
    (None, format!("ldc {ldc:.4} nme(20) {nme:.4}, difference {:.1} pts, {flag}", 100.0 * (ldc - nme)))
}

// 7
fn ncm_equivalence() -> (Option<bool>, String) {
    let d = 6;
    let spec = MlpSpec {
        input_dim: 5,
        hidden: vec![8],
        output_dim: d,
        final_relu: false,
    };
    let net = FeatureExtractor::new(spec, &mut SeedTree(70).rng()).unwrap();
    let mut rng = SeedTree(71).rng();
    let mut pool = PrototypePool::new(d);
    let mut stored: Vec<(usize, Vec<f64>)> = Vec::new();
    for c in [9usize, 2, 14, 5, 0, 11, 7, 3] {
        // duplicates force exact ties
        let v = if c == 7 || c == 3 {
            stored[1].1.clone()
        } else {
            (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        pool.insert(c, v.clone(), 1).unwrap();
        stored.push((c, v));
    }
    let mut mismatches = 0;
    for i in 0..1000 {
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let f = net.embed(&Matrix::row_vector(&x).unwrap()).unwrap();
        // every 10th call lands exactly on a tied prototype
        let feature = if i % 10 == 0 { stored[1].1.clone() } else { f.row(0).to_vec() };
        let got = if i % 10 == 0 {
            driftlab::eval::nearest_prototype(&pool, &feature).unwrap()
        } else {
            ncm_classify(&net, &pool, &x).unwrap()
        };
        let mut best: Option<(f64, usize)> = None;
        for (c, v) in &stored {
            let dd: f64 = feature.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            best = match best {
                Some((bd, bc)) if bd < dd || (bd == dd && bc < *c) => Some((bd, bc)),
                _ => Some((dd, *c)),
            };
        }
        if got != best.unwrap().1 {
            mismatches += 1;
        }
    }
    (Some(mismatches == 0), format!("1000 calls, {mismatches} mismatches"))
}

// 9
fn determinism(first: &ExperimentOutcome, cfg: &ExperimentConfig) -> (Option<bool>, String) {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let again = pool.install(|| run_experiment(cfg, Path::new("."), "").unwrap());
    let same_summary = summary_csv(&first.report) == summary_csv(&again.report);
    let same_chain = chain_csv(&first.chain) == chain_csv(&again.chain);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    driftlab::experiment::write_outputs(&a, cfg, first).unwrap();
    driftlab::experiment::write_outputs(&b, cfg, &again).unwrap();
    let same_files = ["summary.csv", "chain.csv"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let ok = same_summary && same_chain && same_files;
    (Some(ok), format!("summary.csv and chain.csv identical on rerun: {ok}"))
}

// 10
fn label_fraction() -> (Option<bool>, String) {
    let mut full = ExperimentConfig::new(vec![0, 1, 2], vec![Method::Ldc]);
    full.ldc.epochs = 200;
    full.analysis.prefix_report = false;
    if let StreamConfig::Blobs(b) = &mut full.stream {
        b.samples_per_class = 1000;
    }
    let mut few = full.clone();
    few.label_fraction = 0.05;
    let a = mean_of(&run_experiment(&full, Path::new("."), "").unwrap(), "ldc");
    let b = mean_of(&run_experiment(&few, Path::new("."), "").unwrap(), "ldc");
    let ok = (a - b).abs() <= 0.02;
    (Some(ok), format!("ldc 100% labels {a:.4}, 5% labels {b:.4}, difference {:.1} pts", 100.0 * (a - b)))
}

fn main() -> ExitCode {
    let mut verdicts = vec![
        timed(1, "toy translation exactness", toy_translation),
        timed(2, "toy rotation and scale", toy_rotation_scale),
        timed(3, "linear drift recovery", linear_drift_recovery),
        timed(4, "gradient audit", gradient_audit),
    ];

    let cfg = benchmark_config();
    let start = Instant::now();
    let bench = run_experiment(&cfg, Path::new("."), "").unwrap();
    let bench_time = start.elapsed();
    let mut v5 = timed(5, "prototype ordering", || ordering(&bench));
    v5.elapsed += bench_time;
    let v6 = timed(6, "ldc beats sdc", || ldc_beats_sdc(&bench));
    let v8 = timed(8, "nme parity (report only)", || nme_parity(&bench));
    verdicts.push(v5);
    verdicts.push(v6);
    verdicts.push(timed(7, "ncm brute-force equivalence", ncm_equivalence));
    verdicts.push(v8);
    verdicts.push(timed(9, "determinism", || determinism(&bench, &cfg)));
    verdicts.push(timed(10, "label-fraction robustness", label_fraction));

    let limits = [(1, 5.0), (2, 10.0), (3, 30.0), (4, 30.0), (5, 300.0), (7, 5.0)];
    let mut failed = 0;
    for v in &mut verdicts {
        if let Some((_, limit)) = limits.iter().find(|(id, _)| *id == v.id) {
            let secs = v.elapsed.as_secs_f64();
            if secs >= *limit {
                v.pass = v.pass.map(|_| false);
                v.detail.push_str(&format!(", over the {limit}s budget"));
            }
        }
        let tag = match v.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "REPORT",
        };
        println!(
            "criterion {:>2} {tag:<6} {:<28} {} [{:.1}s]",
            v.id,
            v.title,
            v.detail,
            v.elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
