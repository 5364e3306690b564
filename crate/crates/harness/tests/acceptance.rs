//! End-to-end acceptance suite. Prints one PASS/FAIL/SKIP line per criterion
//! and exits nonzero if any criterion fails.
//!
//! The paper-scale run takes hours and only runs with `EEML_ACCEPT_PAPER=1`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use eeml_core::cluster::{kmeans_cosine, task_embedding, ClusterModel, EmbeddingSource, GradientEmbedding};
use eeml_core::diffnet::{grad, meta_grad, mse_loss, Activation, Batch, NetSpec, Order, ParamVector};
use eeml_core::ensemble::{
    alpha_coefficients, beta_weights, eeml_evaluate, ensemble_predict_flat, expert_errors, fine_tune_experts,
    init_experts, train_ensemble, Ensemble, EvalOptions, Provenance,
};
use eeml_core::maml::{adapt_and_eval, pretrain_with, InnerCfg};
use eeml_core::rng::namespace;
use eeml_core::tasks::{Episode, Family, TaskConfig, TaskSampler};
use eeml_harness::checkpoint::{decode, encode, CheckpointError, FORMAT_VERSION};
use eeml_harness::pipeline::{eval_tasks, run_baseline, run_eval, Pipeline};
use eeml_harness::report::Comparison;
use eeml_harness::{ExperimentConfig, Preset};

const PAPER_MAML_RANGE: (f64, f64) = (0.5, 1.2);
const PAPER_EEML_RANGE: (f64, f64) = (0.08, 0.30);
const DESK_RATIO: f64 = 0.8;
const DESK_BUDGET: Duration = Duration::from_secs(30 * 60);
const SHORT_BUDGET: Duration = Duration::from_secs(60);
const SPECIALIZATION_BUDGET: Duration = Duration::from_secs(10 * 60);
const SPECIALIZATION_STEPS: usize = 500;
const GRAD_TOL: f64 = 1e-4;
const META_GRAD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;
const SIMPLEX_TOL: f64 = 1e-9;
const PERMUTATION_TOL: f64 = 1e-12;
const DESK_MAML_CEILING: f64 = 3.0;
const TRACE_RISE: f64 = 1.10;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

use Verdict::{Fail, Pass, Skip};

fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

struct Suite {
    failures: usize,
    supplementary_failures: usize,
}

impl Suite {
    /// A numbered criterion; failure fails the suite.
    fn run(&mut self, label: &str, budget: Option<Duration>, f: impl FnOnce() -> Verdict) {
        if self.record(label, budget, f) {
            self.failures += 1;
        }
    }

    /// A supporting check; failures are reported but do not fail the suite.
    fn check(&mut self, label: &str, f: impl FnOnce() -> Verdict) {
        if self.record(&format!("  {label}"), None, f) {
            self.supplementary_failures += 1;
        }
    }

    fn record(&mut self, label: &str, budget: Option<Duration>, f: impl FnOnce() -> Verdict) -> bool {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Fail(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match (outcome, budget) {
            (Pass(d), Some(b)) if elapsed > b => Fail(format!("{d}; over the {}s budget", b.as_secs())),
            (o, _) => o,
        };
        let (tag, detail) = match &outcome {
            Pass(d) => ("PASS", d),
            Fail(d) => ("FAIL", d),
            Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {label}: {detail} ({:.1}s)", elapsed.as_secs_f64());
        matches!(outcome, Fail(_))
    }
}

fn main() {
    let mut suite = Suite { failures: 0, supplementary_failures: 0 };
    let scratch = tempfile::tempdir().expect("temporary directory");

    suite.run("1 paper-scale reproduction", None, || paper_scale(scratch.path()));

    let mut desk: Option<(Comparison, ExperimentConfig)> = None;
    suite.run("2 desk-scale paired comparison", Some(DESK_BUDGET), || {
        let (v, result) = desk_scale(scratch.path());
        desk = result;
        v
    });
    match &desk {
        Some((cmp, cfg)) => {
            suite.check("desk pretraining reaches MAML MSE < 3.0 on 200 tasks", || {
                let m = &cmp.maml.mses()[..200];
                let mean = m.iter().sum::<f64>() / 200.0;
                verdict(mean < DESK_MAML_CEILING, format!("MAML mean {mean:.4}"))
            });
            suite.check("smoothed pretraining loss stays flat over the second half", || pretrain_trace(&cfg.out_dir));
            suite.check("line and sinusoid embeddings separate at theta_clu", || embedding_separation(cfg));
            suite.check("desk checkpoints re-encode to identical bytes", || desk_checkpoints(&cfg.out_dir));
        }
        None => println!("[SKIP]   desk follow-up checks: desk run did not complete"),
    }

    suite.run("3 gradient correctness", Some(SHORT_BUDGET), gradients);
    suite.run("4 single-expert reduction", Some(SHORT_BUDGET), || dictator(scratch.path()));
    suite.run("5 clustering", Some(SHORT_BUDGET), clustering);
    suite.run("6 coefficient contracts", Some(SHORT_BUDGET), coefficients);
    let mut extra = None;
    suite.run("7 specialization", Some(SPECIALIZATION_BUDGET), || {
        let s = specialization();
        extra = Some((s.kmeans_alignment, s.voting));
        s.criterion
    });
    if let Some((alignment, voting)) = extra {
        suite.check("k-means separates the two families at theta_clu", || alignment);
        suite.check("weighted voting beats a uniform average over 500 two-family tasks", || voting);
    }
    suite.run("8 persistence", Some(SHORT_BUDGET), persistence);

    if suite.supplementary_failures > 0 {
        println!("{} supporting checks failed", suite.supplementary_failures);
    }
    if suite.failures > 0 {
        println!("{} acceptance criteria failed", suite.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

fn paper_scale(dir: &Path) -> Verdict {
    if std::env::var("EEML_ACCEPT_PAPER").as_deref() != Ok("1") {
        return Skip("hours of CPU; set EEML_ACCEPT_PAPER=1 to run".into());
    }
    let cfg = ExperimentConfig {
        out_dir: dir.join("paper"),
        ..ExperimentConfig::preset(Preset::Paper)
    };
    let cmp = Pipeline::new(cfg).unwrap().all().unwrap();
    let (m, e) = (cmp.maml.mean, cmp.eeml.mean);
    let ok = (PAPER_MAML_RANGE.0..=PAPER_MAML_RANGE.1).contains(&m)
        && (PAPER_EEML_RANGE.0..=PAPER_EEML_RANGE.1).contains(&e)
        && e < m;
    verdict(ok, format!("MAML {m:.4} ± {:.4}, EEML {e:.4} ± {:.4}", cmp.maml.ci_half_width, cmp.eeml.ci_half_width))
}

fn desk_scale(dir: &Path) -> (Verdict, Option<(Comparison, ExperimentConfig)>) {
    let cfg = ExperimentConfig {
        out_dir: dir.join("desk"),
        ..ExperimentConfig::preset(Preset::Desk)
    };
    let cmp = Pipeline::new(cfg.clone()).unwrap().all().unwrap();
    let v = verdict(
        cmp.ratio <= DESK_RATIO,
        format!(
            "EEML {:.4} ± {:.4} vs MAML {:.4} ± {:.4}, ratio {:.3} (need ≤ {DESK_RATIO}), EEML better on {}/{} tasks",
            cmp.eeml.mean, cmp.eeml.ci_half_width, cmp.maml.mean, cmp.maml.ci_half_width, cmp.ratio, cmp.eeml_wins, cmp.eeml.n_tasks
        ),
    );
    (v, Some((cmp, cfg)))
}

fn pretrain_trace(dir: &Path) -> Verdict {
    let text = std::fs::read_to_string(dir.join("pretrain_loss.csv")).unwrap();
    let losses: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let windows: Vec<f64> = losses.chunks_exact(100).map(|w| w.iter().sum::<f64>() / 100.0).collect();
    let half = &windows[windows.len() / 2..];
    let mut best = half[0];
    let mut worst_rise: f64 = 0.0;
    for &w in &half[1..] {
        worst_rise = worst_rise.max(w / best);
        best = best.min(w);
    }
    verdict(
        worst_rise <= TRACE_RISE,
        format!("window means {:.3} → {:.3}, worst rise over running minimum {:.1}%", half[0], half[half.len() - 1], (worst_rise - 1.0).max(0.0) * 100.0),
    )
}

fn embedding_separation(cfg: &ExperimentConfig) -> Verdict {
    let p = Pipeline::new(cfg.clone()).unwrap();
    let theta = p.load_theta().unwrap();
    let only = |f: Family| {
        let mut mix = [0.0; 4];
        mix[f.index()] = 1.0;
        TaskSampler::new(TaskConfig { mix, ..cfg.task_config() }, cfg.eval_seed, namespace::EVAL).unwrap()
    };
    let (lines, sines) = (only(Family::Line), only(Family::Sinusoids));
    let embed = |ep: &Episode| task_embedding(&theta, ep, &cfg.inner(), cfg.order, EmbeddingSource::QueryGrad).unwrap();
    let cos = |a: &GradientEmbedding, b: &GradientEmbedding| a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| x * y).sum::<f64>();
    let (mut same, mut cross) = (0.0, 0.0);
    for i in 0..50u64 {
        let a = embed(&lines.episode(2 * i).unwrap());
        let b = embed(&lines.episode(2 * i + 1).unwrap());
        let s = embed(&sines.episode(i).unwrap());
        same += cos(&a, &b) / 50.0;
        cross += cos(&a, &s) / 50.0;
    }
    verdict(cross < same, format!("mean cosine line/line {same:.3}, line/sinusoid {cross:.3}"))
}

fn desk_checkpoints(dir: &Path) -> Verdict {
    for f in ["theta_clu.ckpt", "cluster.ckpt", "ensemble.ckpt"] {
        let bytes = std::fs::read(dir.join(f)).unwrap();
        if encode(&decode(&bytes).unwrap()) != bytes {
            return Fail(format!("{f} changed on re-encoding"));
        }
    }
    Pass("theta_clu, cluster and ensemble".into())
}

// ---- gradients ----

fn random_batch(rng: &mut ChaCha8Rng, n: usize, spec: &NetSpec) -> Batch {
    let xs = (0..n).map(|_| (0..spec.input_dim()).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
    let ys = (0..n).map(|_| (0..spec.output_dim()).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
    Batch::new(xs, ys).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, spec: &NetSpec) -> ParamVector {
    let mut p = spec.init_params(rng);
    p.values_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    p
}

fn central(f: &impl Fn(&ParamVector) -> f64, at: &ParamVector, h: f64) -> Vec<f64> {
    (0..at.len())
        .map(|i| {
            let (mut a, mut b) = (at.clone(), at.clone());
            a.values_mut()[i] += h;
            b.values_mut()[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn net(i: usize) -> NetSpec {
    match i % 4 {
        0 => NetSpec::default_regressor(),
        1 => NetSpec::new(vec![1, 40, 40, 1], Activation::Tanh).unwrap(),
        2 => NetSpec::new(vec![2, 16, 3], Activation::Relu).unwrap(),
        _ => NetSpec::new(vec![3, 8, 8, 2], Activation::Tanh).unwrap(),
    }
}

fn gradients() -> Verdict {
    let mut worst_grad: f64 = 0.0;
    for i in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i as u64);
        let spec = net(i);
        let params = random_params(&mut rng, &spec);
        let batch = random_batch(&mut rng, 10, &spec);
        let g = grad(&params, &batch).unwrap();
        let fd = central(&|p: &ParamVector| mse_loss(p, &batch).unwrap(), &params, FD_STEP);
        for (a, n) in g.values().iter().zip(&fd) {
            if a.abs() > 1e-6 {
                worst_grad = worst_grad.max((a - n).abs() / a.abs().max(n.abs()));
            }
        }
    }

    // A stencil that straddles a relu kink of the inner gradient sees a jump
    // rather than a slope; it is recognised by disagreeing with the half-width
    // stencil and left out.
    let (mut worst_meta, mut skipped, mut checked): (f64, usize, usize) = (0.0, 0, 0);
    for steps in [1, 5] {
        for i in 0..4 {
            let mut rng = ChaCha8Rng::seed_from_u64(7_000 + 10 * steps as u64 + i as u64);
            let spec = net(i);
            let params = random_params(&mut rng, &spec);
            let support = random_batch(&mut rng, 10, &spec);
            let query = random_batch(&mut rng, 20, &spec);
            let lr = 0.01;
            let g = meta_grad(&params, &support, &query, steps, lr, Order::Second).unwrap();
            let f = |p: &ParamVector| {
                let mut t = p.clone();
                for _ in 0..steps {
                    let gs = grad(&t, &support).unwrap();
                    t.axpy(-lr, &gs);
                }
                mse_loss(&t, &query).unwrap()
            };
            let fd = central(&f, &params, FD_STEP);
            let fd_half = central(&f, &params, FD_STEP / 2.0);
            for (k, &a) in g.values().iter().enumerate() {
                if a.abs() <= 1e-6 {
                    continue;
                }
                if (fd[k] - fd_half[k]).abs() > 1e-4 * fd[k].abs().max(a.abs()) {
                    assert_eq!(spec.activation(), Activation::Relu, "tanh nets are smooth");
                    skipped += 1;
                    continue;
                }
                checked += 1;
                worst_meta = worst_meta.max((a - fd[k]).abs() / a.abs().max(fd[k].abs()));
            }
        }
    }
    verdict(
        worst_grad < GRAD_TOL && worst_meta < META_GRAD_TOL && skipped * 20 <= checked,
        format!(
            "grad worst relative error {worst_grad:.1e} (< {GRAD_TOL:.0e}); meta-grad {worst_meta:.1e} (< {META_GRAD_TOL:.0e}) over {checked} coordinates, {skipped} kink-straddling stencils excluded"
        ),
    )
}

// ---- single-expert reduction ----

fn dictator(dir: &Path) -> Verdict {
    let cfg = ExperimentConfig {
        k: 1,
        pretrain_epochs: 100,
        train_epochs: 50,
        cluster_tasks: 100,
        eval_tasks: 200,
        out_dir: dir.join("k1"),
        ..ExperimentConfig::preset(Preset::Desk)
    };
    let p = Pipeline::new(cfg.clone()).unwrap();
    let theta = p.pretrain().unwrap();
    p.cluster().unwrap();
    let ens = p.train().unwrap();
    let eeml = p.eval().unwrap();

    // MAML given the same budget and the same task stream.
    let stream = TaskSampler::new(cfg.task_config(), cfg.seed, namespace::ENSEMBLE_TRAIN).unwrap();
    let maml = pretrain_with(theta, &stream, &cfg.inner(), &cfg.outer(cfg.train_epochs), |_, _| {}).unwrap();
    let tasks = eval_tasks(&cfg, cfg.eval_tasks, cfg.k_shot).unwrap();
    let base = run_baseline(&maml.params, &tasks, &cfg.inner()).unwrap();
    let same_params = ens.experts()[0] == maml.params;
    let identical = eeml.per_task.len() == base.len()
        && eeml.per_task.iter().zip(&base).all(|(a, b)| a.mse.to_bits() == b.mse.to_bits());
    verdict(
        same_params && identical,
        format!("{} per-task MSEs bitwise equal: {identical}; expert equals MAML parameters: {same_params}", base.len()),
    )
}

// ---- clustering ----

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn noisy(rng: &mut ChaCha8Rng, c: &[f64], sd: f64) -> Vec<f64> {
    let v: Vec<f64> = c.iter().map(|x| x + sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len() && (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

fn clustering() -> Verdict {
    let mut monotone = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = rng.random_range(2..12);
        let n = rng.random_range(8..80);
        let k = rng.random_range(1..=6);
        let pts: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, dim)).collect();
        let fit = kmeans_cosine(&pts, k, seed, 100).unwrap();
        if fit.objective_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12) {
            monotone += 1;
        }
    }

    let mut recovered = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(10_000 + seed);
        let dirs = loop {
            let d: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 16)).collect();
            if (0..4).all(|i| (i + 1..4).all(|j| dot(&d[i], &d[j]) < 0.2)) {
                break d;
            }
        };
        let truth: Vec<usize> = (0..200).map(|i| i % 4).collect();
        let pts: Vec<Vec<f64>> = truth
            .iter()
            .map(|&l| loop {
                let p = noisy(&mut rng, &dirs[l], 0.06);
                if dot(&p, &dirs[l]) > 0.95 {
                    break p;
                }
            })
            .collect();
        if same_partition(&kmeans_cosine(&pts, 4, seed, 100).unwrap().assignments, &truth) {
            recovered += 1;
        }
    }

    let (mut agree, mut separated, mut below_optimum) = (0, 0, 0);
    for seed in 0..400u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let n = rng.random_range(3..=8);
        let (a, b) = (unit(&mut rng, 4), unit(&mut rng, 4));
        let pts: Vec<Vec<f64>> = (0..n).map(|i| noisy(&mut rng, if i % 2 == 0 { &a } else { &b }, 0.15)).collect();
        let mut best = (Vec::new(), f64::INFINITY);
        for mask in 1u32..(1 << (n - 1)) {
            let labels: Vec<usize> = (0..n).map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize }).collect();
            let mut cost = 0.0;
            for g in 0..2 {
                let members: Vec<&Vec<f64>> = pts.iter().zip(&labels).filter(|(_, &l)| l == g).map(|(p, _)| p).collect();
                let mean: Vec<f64> = (0..4).map(|d| members.iter().map(|p| p[d]).sum()).collect();
                let norm = dot(&mean, &mean).sqrt();
                cost += members.iter().map(|p| 1.0 - dot(p, &mean) / norm).sum::<f64>();
            }
            if cost < best.1 {
                best = (labels, cost);
            }
        }
        let fit = kmeans_cosine(&pts, 2, seed, 100).unwrap();
        if fit.model.inertia < best.1 - 1e-9 {
            below_optimum += 1;
        }
        if dot(&a, &b) < 0.5 {
            separated += 1;
            if same_partition(&fit.assignments, &best.0) {
                agree += 1;
            }
        }
    }
    verdict(
        monotone == 100 && recovered >= 95 && agree == separated && below_optimum == 0,
        format!(
            "monotone {monotone}/100; planted recovery {recovered}/100 (need ≥ 95); exhaustive K=2 agreement {agree}/{separated} separated instances, {below_optimum} below the optimum"
        ),
    )
}

// ---- coefficients ----

fn coefficients() -> Verdict {
    let simplex = |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL && v.iter().all(|&x| x > 0.0);
    let small = NetSpec::new(vec![1, 6, 1], Activation::Tanh).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut simplex_failures = 0;
    for _ in 0..10_000 {
        let k = rng.random_range(1..=6);
        let dim = rng.random_range(2..24);
        let model = ClusterModel::new((0..k).map(|_| unit(&mut rng, dim)).collect(), 0.0, 0, 1).unwrap();
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let alpha = alpha_coefficients(&GradientEmbedding::from_gradient(&g, EmbeddingSource::QueryGrad).unwrap(), &model).unwrap();
        let scale = 10f64.powf(rng.random_range(-2.0..1.5));
        let experts: Vec<ParamVector> = (0..k)
            .map(|_| {
                let mut p = small.init_params(&mut rng);
                p.values_mut().iter_mut().for_each(|v| *v *= rng.random_range(0.0..scale));
                p
            })
            .collect();
        let xs: Vec<f64> = (0..5).map(|_| rng.random_range(-5.0..5.0)).collect();
        let ys: Vec<f64> = (0..5).map(|_| rng.random_range(-10.0..10.0)).collect();
        let err = expert_errors(&experts, &Batch::from_scalars(&xs, &ys).unwrap()).unwrap();
        let sim: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let beta = beta_weights(&sim, &err).unwrap();
        if !(simplex(&alpha) && simplex(&err) && simplex(&beta)) {
            simplex_failures += 1;
        }
    }

    // End-to-end scale invariance: real meta-gradients, scaled before embedding.
    let spec = NetSpec::default_regressor();
    let theta = spec.init_params(&mut rng);
    let model = ClusterModel::new((0..4).map(|_| unit(&mut rng, theta.len())).collect(), 0.0, 0, 1).unwrap();
    let sampler = TaskSampler::new(TaskConfig::default(), 3, namespace::PRETRAIN).unwrap();
    let mut worst_scale: f64 = 0.0;
    for ep in sampler.episodes(0, 50).unwrap() {
        let g = meta_grad(&theta, &ep.support, &ep.query, 5, 0.001, Order::Second).unwrap();
        let base = alpha_coefficients(&GradientEmbedding::from_gradient(g.values(), EmbeddingSource::QueryGrad).unwrap(), &model).unwrap();
        for s in [1e-8, 0.37, 2.0, 3.3e7] {
            let scaled: Vec<f64> = g.values().iter().map(|v| v * s).collect();
            let a = alpha_coefficients(&GradientEmbedding::from_gradient(&scaled, EmbeddingSource::QueryGrad).unwrap(), &model).unwrap();
            worst_scale = a.iter().zip(&base).map(|(x, y)| (x - y).abs()).fold(worst_scale, f64::max);
        }
    }

    // Permutation equivariance of embedding → weights → prediction.
    let inner = InnerCfg { steps: 5, lr: 0.01 };
    let eval = TaskSampler::new(TaskConfig::default(), 5, namespace::EVAL).unwrap();
    let mut worst_perm: f64 = 0.0;
    for trial in 0..10 {
        let theta = spec.init_params(&mut rng);
        let experts: Vec<ParamVector> = (0..4)
            .map(|_| {
                let mut p = theta.clone();
                p.values_mut().iter_mut().for_each(|v| *v += 0.2 * rng.sample::<f64, _>(StandardNormal));
                p
            })
            .collect();
        let cluster = ClusterModel::new((0..4).map(|_| unit(&mut rng, theta.len())).collect(), 0.0, 0, 1).unwrap();
        let ens = Ensemble::new(experts, cluster, Provenance { pretrain_seed: 0, config_hash: String::new() }).unwrap();
        let ep = eval.episode(trial).unwrap();
        let base = eeml_evaluate(&ens, &theta, &ep, &inner, &EvalOptions::default()).unwrap();
        let adapted = fine_tune_experts(&ens, &ep.support, &inner).unwrap();
        let pred = ensemble_predict_flat(&adapted, &base.beta, ep.query.inputs()).unwrap();
        for perm in [[1, 0, 2, 3], [3, 2, 1, 0], [2, 0, 3, 1]] {
            let pe = ens.permuted(&perm).unwrap();
            let p = eeml_evaluate(&pe, &theta, &ep, &inner, &EvalOptions::default()).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                for (x, y) in [(&p.similarity, &base.similarity), (&p.errors, &base.errors), (&p.beta, &base.beta)] {
                    worst_perm = worst_perm.max((x[new] - y[old]).abs());
                }
            }
            let adapted_p = fine_tune_experts(&pe, &ep.support, &inner).unwrap();
            let pred_p = ensemble_predict_flat(&adapted_p, &p.beta, ep.query.inputs()).unwrap();
            worst_perm = pred.iter().zip(&pred_p).map(|(a, b)| (a - b).abs()).fold(worst_perm, f64::max);
        }
    }
    verdict(
        simplex_failures == 0 && worst_scale <= 1e-14 && worst_perm <= PERMUTATION_TOL,
        format!(
            "{simplex_failures}/10000 non-simplex vectors; alpha moved {worst_scale:.1e} under scaling; permutation deviation {worst_perm:.1e} (≤ {PERMUTATION_TOL:.0e})"
        ),
    )
}

// ---- specialization ----

fn family_only(cfg: &ExperimentConfig, f: Family) -> TaskSampler {
    let mut mix = [0.0; 4];
    mix[f.index()] = 1.0;
    TaskSampler::new(TaskConfig { mix, ..cfg.task_config() }, cfg.eval_seed, namespace::EVAL).unwrap()
}

struct Specialization {
    criterion: Verdict,
    kmeans_alignment: Verdict,
    voting: Verdict,
}

fn specialization() -> Specialization {
    let families = [Family::Sinusoids, Family::Line];
    let cfg = ExperimentConfig {
        mix: [1.0, 1.0, 0.0, 0.0],
        k: 2,
        train_epochs: SPECIALIZATION_STEPS,
        ..ExperimentConfig::preset(Preset::Desk)
    };
    let inner = cfg.inner();
    let init = cfg.net_spec().init_params(&mut eeml_core::rng::substream(cfg.seed, namespace::INIT, 0));
    let pre = TaskSampler::new(cfg.task_config(), cfg.seed, namespace::PRETRAIN).unwrap();
    let theta = pretrain_with(init, &pre, &inner, &cfg.outer(cfg.pretrain_epochs), |_, _| {}).unwrap().params;

    // Plant one center per family: the normalized mean embedding of that
    // family's buffer tasks. Expert 0 owns sinusoids, expert 1 lines.
    let buffer = TaskSampler::new(cfg.task_config(), cfg.seed, namespace::CLUSTER_BUFFER)
        .unwrap()
        .episodes(0, cfg.cluster_tasks)
        .unwrap();
    let embedded: Vec<(usize, GradientEmbedding)> = buffer
        .iter()
        .filter_map(|t| {
            let u = task_embedding(&theta, t, &inner, cfg.order, EmbeddingSource::QueryGrad).ok()?;
            Some((families.iter().position(|&f| f == t.family).unwrap(), u))
        })
        .collect();
    let centers: Vec<Vec<f64>> = (0..2)
        .map(|f| {
            let mut sum = vec![0.0; theta.len()];
            for (_, u) in embedded.iter().filter(|(g, _)| *g == f) {
                sum.iter_mut().zip(u.as_slice()).for_each(|(s, x)| *s += x);
            }
            let n = dot(&sum, &sum).sqrt();
            sum.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let inertia = embedded.iter().map(|(f, u)| 1.0 - dot(u.as_slice(), &centers[*f])).sum();
    let planted = ClusterModel::new(centers, inertia, cfg.seed, 0).unwrap();

    // Whether unsupervised clustering finds the same split.
    let points: Vec<GradientEmbedding> = embedded.iter().map(|(_, u)| u.clone()).collect();
    let fit = kmeans_cosine(&points, 2, cfg.seed, cfg.kmeans_max_iter).unwrap();
    let mut counts = [[0usize; 2]; 2];
    for ((f, _), &a) in embedded.iter().zip(&fit.assignments) {
        counts[*f][a] += 1;
    }
    let purity = (counts[0][0] + counts[1][1]).max(counts[0][1] + counts[1][0]) as f64 / embedded.len() as f64;
    let kmeans_alignment = verdict(
        purity >= 0.95,
        format!("family × cluster counts {counts:?}, purity {:.1}% (need ≥ 95%)", purity * 100.0),
    );

    let prov = Provenance { pretrain_seed: cfg.seed, config_hash: cfg.hash() };
    let ens = init_experts(&theta, planted, prov).unwrap();
    let source = TaskSampler::new(cfg.task_config(), cfg.seed, namespace::ENSEMBLE_TRAIN).unwrap();
    let ens = train_ensemble(ens, &theta, &source, &inner, &cfg.outer(cfg.train_epochs), |_, _| {}).unwrap().ensemble;

    let mut loss = [[0.0; 2]; 2]; // [expert][family]
    for (fi, &f) in families.iter().enumerate() {
        let tasks = family_only(&cfg, f).episodes(0, 200).unwrap();
        for (j, e) in ens.experts().iter().enumerate() {
            loss[j][fi] = tasks.iter().map(|t| adapt_and_eval(e, t, &inner).unwrap()).sum::<f64>() / 200.0;
        }
    }
    let criterion = verdict(
        loss[0][0] < loss[1][0] && loss[1][1] < loss[0][1],
        format!(
            "sinusoids: own expert {:.3} vs other {:.3}; lines: own expert {:.3} vs other {:.3}",
            loss[0][0], loss[1][0], loss[1][1], loss[0][1]
        ),
    );

    // Weighted voting against a plain average of the same fine-tuned experts.
    let tasks = eval_tasks(&cfg, 500, cfg.k_shot).unwrap();
    let weighted = run_eval(&ens, &theta, &tasks, &inner, &cfg.eval_options()).unwrap();
    let eeml = weighted.iter().map(|t| t.mse).sum::<f64>() / 500.0;
    let uniform = tasks
        .iter()
        .map(|t| {
            let adapted = fine_tune_experts(&ens, &t.support, &inner).unwrap();
            let pred = ensemble_predict_flat(&adapted, &[0.5, 0.5], t.query.inputs()).unwrap();
            eeml_core::diffnet::mse(&pred, t.query.targets())
        })
        .sum::<f64>()
        / 500.0;
    let voting = verdict(eeml < uniform, format!("EEML {eeml:.4} vs uniform average {uniform:.4}"));
    Specialization { criterion, kmeans_alignment, voting }
}

// ---- persistence ----

fn persistence() -> Verdict {
    use eeml_harness::checkpoint::{Checkpoint, Payload};
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let spec = NetSpec::default_regressor();
    let experts: Vec<ParamVector> = (0..4).map(|_| random_params(&mut rng, &spec)).collect();
    let cluster = ClusterModel::new((0..4).map(|_| unit(&mut rng, spec.param_count())).collect(), 12.5, 3, 7).unwrap();
    let ens = Ensemble::new(experts, cluster, Provenance { pretrain_seed: 3, config_hash: "f".repeat(64) }).unwrap();
    let ckpt = Checkpoint { config_hash: "f".repeat(64), seed: 3, payload: Payload::Ensemble(ens) };
    let bytes = encode(&ckpt);
    let back = decode(&bytes).unwrap();
    let exact = back == ckpt && encode(&back) == bytes;

    let mut typed = 0;
    let mut cases = 0;
    for cut in (0..bytes.len()).step_by(97) {
        cases += 1;
        if decode(&bytes[..cut]).is_err() {
            typed += 1;
        }
    }
    let mut v = bytes.clone();
    v[4..8].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
    cases += 1;
    if matches!(decode(&v), Err(CheckpointError::Version { .. })) {
        typed += 1;
    }
    let mut m = bytes.clone();
    m[1] ^= 0xff;
    cases += 1;
    if matches!(decode(&m), Err(CheckpointError::BadMagic)) {
        typed += 1;
    }
    verdict(exact && typed == cases, format!("round trip bit-exact: {exact}; {typed}/{cases} corrupted inputs rejected with typed errors"))
}
