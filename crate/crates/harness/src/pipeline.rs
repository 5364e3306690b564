//! Pipeline stages: pretrain → cluster → train → eval, plus the MAML baseline.
//!
//! Each stage reads the artifacts of the previous ones from the output
//! directory and writes its own, so stages can be run separately from the
//! command line.

use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;

use eeml_core::cluster::{kmeans_cosine, task_embedding, ClusterModel, EmbeddingSource, GradientEmbedding, KMeansFit};
use eeml_core::diffnet::ParamVector;
use eeml_core::ensemble::{eeml_evaluate, init_experts, train_ensemble, Ensemble, EvalOptions, Provenance};
use eeml_core::maml::{adapt_and_eval, pretrain_with, InnerCfg};
use eeml_core::rng::{namespace, substream};
use eeml_core::tasks::{Episode, TaskSampler};

use crate::checkpoint::{file_hash, load_checkpoint, save_checkpoint, Checkpoint, Payload};
use crate::config::ExperimentConfig;
use crate::error::HarnessError;
use crate::report::{loss_csv, write_file, Comparison, MetricsReport, TaskResult};

pub const THETA_FILE: &str = "theta_clu.ckpt";
pub const CLUSTER_FILE: &str = "cluster.ckpt";
pub const ENSEMBLE_FILE: &str = "ensemble.ckpt";

/// How often training stages log progress.
const LOG_EVERY: usize = 100;

/// The held-out evaluation episodes for a config and shot count.
pub fn eval_tasks(cfg: &ExperimentConfig, n_tasks: usize, shots: usize) -> Result<Vec<Episode>, HarnessError> {
    let sampler = TaskSampler::new(
        cfg.task_config().with_shots(shots, cfg.q_query),
        cfg.eval_seed,
        namespace::EVAL,
    )?;
    Ok(sampler.episodes(0, n_tasks)?)
}

/// Per-task EEML query MSE on `tasks`, in task order.
pub fn run_eval(
    ens: &Ensemble,
    theta_clu: &ParamVector,
    tasks: &[Episode],
    inner: &InnerCfg,
    opts: &EvalOptions,
) -> Result<Vec<TaskResult>, HarnessError> {
    let mses: Vec<f64> = tasks
        .par_iter()
        .map(|ep| eeml_evaluate(ens, theta_clu, ep, inner, opts).map(|e| e.query_mse))
        .collect::<Result<_, _>>()?;
    Ok(collect(tasks, mses))
}

/// Per-task MAML query MSE on `tasks`, in task order.
pub fn run_baseline(params: &ParamVector, tasks: &[Episode], inner: &InnerCfg) -> Result<Vec<TaskResult>, HarnessError> {
    let mses: Vec<f64> = tasks
        .par_iter()
        .map(|ep| adapt_and_eval(params, ep, inner))
        .collect::<Result<_, _>>()?;
    Ok(collect(tasks, mses))
}

fn collect(tasks: &[Episode], mses: Vec<f64>) -> Vec<TaskResult> {
    tasks
        .iter()
        .zip(mses)
        .enumerate()
        .map(|(index, (ep, mse))| TaskResult {
            index,
            family: ep.family.name(),
            mse,
        })
        .collect()
}

/// Embed `n` training tasks at `theta_clu` and fit the cluster centers.
pub fn fit_clusters(cfg: &ExperimentConfig, theta_clu: &ParamVector) -> Result<(KMeansFit, Vec<Episode>), HarnessError> {
    let sampler = TaskSampler::new(cfg.task_config(), cfg.seed, namespace::CLUSTER_BUFFER)?;
    let tasks = sampler.episodes(0, cfg.cluster_tasks)?;
    let inner = cfg.inner();
    let embeddings: Vec<Option<GradientEmbedding>> = tasks
        .par_iter()
        .map(|t| match task_embedding(theta_clu, t, &inner, cfg.order, EmbeddingSource::QueryGrad) {
            Ok(u) => Ok(Some(u)),
            Err(eeml_core::Error::DegenerateEmbedding) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_, _>>()?;
    let kept: Vec<GradientEmbedding> = embeddings.into_iter().flatten().collect();
    if kept.len() < tasks.len() {
        log::warn!("{} tasks had zero gradient and were left out of clustering", tasks.len() - kept.len());
    }
    let fit = kmeans_cosine(&kept, cfg.k, cfg.seed, cfg.kmeans_max_iter)?;
    Ok((fit, tasks))
}

/// File-backed pipeline rooted at `cfg.out_dir`.
pub struct Pipeline {
    cfg: ExperimentConfig,
    hash: String,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| HarnessError::io(&cfg.out_dir, e))?;
        let hash = cfg.hash();
        info!("config hash {hash}");
        log::debug!("resolved config:\n{}", cfg.to_pretty_json());
        write_file(&cfg.out_dir.join("config.resolved.json"), &(cfg.to_pretty_json() + "\n"))?;
        Ok(Pipeline { cfg, hash })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.cfg.out_dir.join(file)
    }

    fn checkpoint(&self, payload: Payload) -> Checkpoint {
        Checkpoint {
            config_hash: self.hash.clone(),
            seed: self.cfg.seed,
            payload,
        }
    }

    fn save(&self, file: &str, payload: Payload) -> Result<(), HarnessError> {
        let path = self.path(file);
        save_checkpoint(&path, &self.checkpoint(payload)).map_err(|source| HarnessError::Checkpoint { path, source })
    }

    fn load(&self, file: &str, stage: &'static str) -> Result<Checkpoint, HarnessError> {
        let path = self.path(file);
        if !path.exists() {
            return Err(HarnessError::Dependency { path, stage });
        }
        load_checkpoint(&path).map_err(|source| HarnessError::Checkpoint { path, source })
    }

    fn hash_of(&self, file: &str) -> Result<String, HarnessError> {
        let path = self.path(file);
        file_hash(&path).map_err(|e| HarnessError::io(path, e))
    }

    pub fn load_theta(&self) -> Result<ParamVector, HarnessError> {
        let path = self.path(THETA_FILE);
        let theta = self
            .load(THETA_FILE, "pretrain")?
            .into_params()
            .map_err(|source| HarnessError::Checkpoint { path: path.clone(), source })?;
        if theta.spec() != &self.cfg.net_spec() {
            return Err(HarnessError::Checkpoint {
                path,
                source: crate::checkpoint::CheckpointError::Shape("network does not match the config".into()),
            });
        }
        Ok(theta)
    }

    pub fn load_cluster(&self) -> Result<ClusterModel, HarnessError> {
        self.load(CLUSTER_FILE, "cluster")?
            .into_cluster()
            .map_err(|source| HarnessError::Checkpoint {
                path: self.path(CLUSTER_FILE),
                source,
            })
    }

    pub fn load_ensemble(&self) -> Result<Ensemble, HarnessError> {
        let path = self.path(ENSEMBLE_FILE);
        let ens = self
            .load(ENSEMBLE_FILE, "train")?
            .into_ensemble()
            .map_err(|source| HarnessError::Checkpoint { path: path.clone(), source })?;
        if ens.experts()[0].spec() != &self.cfg.net_spec() {
            return Err(HarnessError::Checkpoint {
                path,
                source: crate::checkpoint::CheckpointError::Shape("network does not match the config".into()),
            });
        }
        Ok(ens)
    }

    /// MAML pretraining of `theta_clu`.
    pub fn pretrain(&self) -> Result<ParamVector, HarnessError> {
        let cfg = &self.cfg;
        let init = cfg.net_spec().init_params(&mut substream(cfg.seed, namespace::INIT, 0));
        let source = TaskSampler::new(cfg.task_config(), cfg.seed, namespace::PRETRAIN)?;
        info!("pretraining for {} outer steps", cfg.pretrain_epochs);
        let mut window = 0.0;
        let out = pretrain_with(init, &source, &cfg.inner(), &cfg.outer(cfg.pretrain_epochs), |step, loss| {
            window += loss;
            if (step + 1) % LOG_EVERY == 0 {
                info!("pretrain step {}: mean query loss {:.4}", step + 1, window / LOG_EVERY as f64);
                window = 0.0;
            }
        })?;
        write_file(&self.path("pretrain_loss.csv"), &loss_csv(&out.loss_history))?;
        self.save(THETA_FILE, Payload::Params(out.params.clone()))?;
        Ok(out.params)
    }

    /// Cosine K-means over training-task gradient embeddings.
    pub fn cluster(&self) -> Result<ClusterModel, HarnessError> {
        let theta = self.load_theta()?;
        let (fit, tasks) = fit_clusters(&self.cfg, &theta)?;
        info!(
            "k-means: K={} inertia {:.4} after {} iterations",
            fit.model.k(),
            fit.model.inertia,
            fit.model.iters_run
        );
        let mut csv = String::from("task,family,cluster\n");
        // Assignments skip degenerate tasks, so only label when counts agree.
        if fit.assignments.len() == tasks.len() {
            for (i, (t, a)) in tasks.iter().zip(&fit.assignments).enumerate() {
                csv.push_str(&format!("{i},{},{a}\n", t.family.name()));
            }
        }
        write_file(&self.path("cluster_assignments.csv"), &csv)?;
        let mut trace = String::from("iteration,objective\n");
        for (i, o) in fit.objective_trace.iter().enumerate() {
            trace.push_str(&format!("{i},{o:?}\n"));
        }
        write_file(&self.path("kmeans_objective.csv"), &trace)?;
        self.save(CLUSTER_FILE, Payload::Cluster(fit.model.clone()))?;
        Ok(fit.model)
    }

    /// α-weighted expert training starting from copies of `theta_clu`.
    pub fn train(&self) -> Result<Ensemble, HarnessError> {
        let cfg = &self.cfg;
        let theta = self.load_theta()?;
        let cluster = self.load_cluster()?;
        if cluster.dim() != theta.len() {
            return Err(HarnessError::Checkpoint {
                path: self.path(CLUSTER_FILE),
                source: crate::checkpoint::CheckpointError::Shape("centers do not match theta_clu".into()),
            });
        }
        let provenance = Provenance {
            pretrain_seed: cfg.seed,
            config_hash: self.hash.clone(),
        };
        let ens = init_experts(&theta, cluster, provenance)?;
        let source = TaskSampler::new(cfg.task_config(), cfg.seed, namespace::ENSEMBLE_TRAIN)?;
        info!("training {} experts for {} steps", ens.k(), cfg.train_epochs);
        let mut window = 0.0;
        let out = train_ensemble(ens, &theta, &source, &cfg.inner(), &cfg.outer(cfg.train_epochs), |step, loss| {
            window += loss;
            if (step + 1) % LOG_EVERY == 0 {
                info!("train step {}: weighted query loss {:.4}", step + 1, window / LOG_EVERY as f64);
                window = 0.0;
            }
        })?;
        write_file(&self.path("train_loss.csv"), &loss_csv(&out.loss_history))?;
        self.save(ENSEMBLE_FILE, Payload::Ensemble(out.ensemble.clone()))?;
        Ok(out.ensemble)
    }

    /// EEML evaluation on the held-out stream.
    pub fn eval(&self) -> Result<MetricsReport, HarnessError> {
        let cfg = &self.cfg;
        let ens = self.load_ensemble()?;
        let theta = self.load_theta()?;
        let tasks = eval_tasks(cfg, cfg.eval_tasks, cfg.k_shot)?;
        info!("evaluating EEML on {} {}-shot tasks", tasks.len(), cfg.k_shot);
        let per_task = run_eval(&ens, &theta, &tasks, &cfg.inner(), &cfg.eval_options())?;
        let mut report = MetricsReport::from_tasks("eeml", cfg.k_shot, cfg.q_query, per_task, self.hash.clone())?;
        report.checkpoints.insert(ENSEMBLE_FILE.into(), self.hash_of(ENSEMBLE_FILE)?);
        report.checkpoints.insert(THETA_FILE.into(), self.hash_of(THETA_FILE)?);
        report.write(&cfg.out_dir, &format!("eval_eeml_{}shot", cfg.k_shot))?;
        info!("EEML mean MSE {:.4} ± {:.4}", report.mean, report.ci_half_width);
        Ok(report)
    }

    /// MAML evaluation of `theta_clu` on the same held-out stream.
    pub fn baseline(&self) -> Result<MetricsReport, HarnessError> {
        let cfg = &self.cfg;
        let theta = self.load_theta()?;
        let tasks = eval_tasks(cfg, cfg.eval_tasks, cfg.k_shot)?;
        info!("evaluating MAML on {} {}-shot tasks", tasks.len(), cfg.k_shot);
        let per_task = run_baseline(&theta, &tasks, &cfg.inner())?;
        let mut report = MetricsReport::from_tasks("maml", cfg.k_shot, cfg.q_query, per_task, self.hash.clone())?;
        report.checkpoints.insert(THETA_FILE.into(), self.hash_of(THETA_FILE)?);
        report.write(&cfg.out_dir, &format!("eval_maml_{}shot", cfg.k_shot))?;
        info!("MAML mean MSE {:.4} ± {:.4}", report.mean, report.ci_half_width);
        Ok(report)
    }

    /// Every stage, then a paired comparison.
    pub fn all(&self) -> Result<Comparison, HarnessError> {
        self.pretrain()?;
        self.cluster()?;
        self.train()?;
        let eeml = self.eval()?;
        let maml = self.baseline()?;
        let cmp = Comparison::new(eeml, maml);
        write_file(&self.path("comparison.json"), &cmp.to_json())?;
        info!(
            "EEML {:.4} vs MAML {:.4} (ratio {:.3}, EEML better on {}/{} tasks)",
            cmp.eeml.mean,
            cmp.maml.mean,
            cmp.ratio,
            cmp.eeml_wins,
            cmp.eeml.n_tasks
        );
        Ok(cmp)
    }
}

/// True when `dir` holds every artifact `eval` needs.
pub fn has_trained_ensemble(dir: &Path) -> bool {
    dir.join(ENSEMBLE_FILE).exists() && dir.join(THETA_FILE).exists()
}
