//! Expert ensemble: similarity-weighted meta-training and weighted voting.
//!
//! Training weights task `i`'s contribution to expert `j` by
//! `alpha[i][j] = softmax_j(sim(u_i, c_j))`, where `u_i` is the task's
//! meta-gradient at the frozen pretrained parameters and `c_j` the cluster
//! centers. At test time each expert is fine-tuned on the support set and
//! the prediction is a convex combination of the experts with weights
//! `beta = softmax(sim / err)`, `err = softmax(support losses)`.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{self, task_embedding, ClusterModel, EmbeddingSource, GradientEmbedding};
use crate::diffnet::{self, Batch, Order, ParamVector};
use crate::error::{Error, Result};
use crate::maml::{self, InnerCfg, OuterCfg};
use crate::tasks::{Episode, TaskSource};

/// Where an ensemble came from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub pretrain_seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    experts: Vec<ParamVector>,
    cluster: ClusterModel,
    pub provenance: Provenance,
}

impl Ensemble {
    pub fn new(experts: Vec<ParamVector>, cluster: ClusterModel, provenance: Provenance) -> Result<Self> {
        if experts.len() != cluster.k() {
            return Err(Error::invalid(format!(
                "{} experts for {} cluster centers",
                experts.len(),
                cluster.k()
            )));
        }
        let spec = experts[0].spec();
        if experts.iter().any(|e| e.spec() != spec) {
            return Err(Error::invalid("experts must share one network shape"));
        }
        if spec.param_count() != cluster.dim() {
            return Err(Error::invalid(format!(
                "centers have dimension {} but experts have {} parameters",
                cluster.dim(),
                spec.param_count()
            )));
        }
        Ok(Ensemble {
            experts,
            cluster,
            provenance,
        })
    }

    pub fn k(&self) -> usize {
        self.experts.len()
    }

    pub fn experts(&self) -> &[ParamVector] {
        &self.experts
    }

    pub fn expert_mut(&mut self, index: usize) -> &mut ParamVector {
        &mut self.experts[index]
    }

    pub fn cluster(&self) -> &ClusterModel {
        &self.cluster
    }

    /// Reorder experts and centers together: new slot `i` holds old slot `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let cluster = self.cluster.permuted(perm)?;
        Ok(Ensemble {
            experts: perm.iter().map(|&p| self.experts[p].clone()).collect(),
            cluster,
            provenance: self.provenance.clone(),
        })
    }
}

/// `K` independent copies of `theta_clu`, one per cluster.
pub fn init_experts(theta_clu: &ParamVector, cluster: ClusterModel, provenance: Provenance) -> Result<Ensemble> {
    Ensemble::new(vec![theta_clu.clone(); cluster.k()], cluster, provenance)
}

/// Row-stochastic task-by-expert weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefMatrix {
    k: usize,
    values: Vec<f64>,
}

impl CoefMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("coefficient rows must be nonempty and of equal length"));
        }
        Ok(CoefMatrix {
            k,
            values: rows.concat(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.len() / self.k
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn get(&self, task: usize, expert: usize) -> f64 {
        self.values[task * self.k + expert]
    }

    pub fn set(&mut self, task: usize, expert: usize, value: f64) {
        self.values[task * self.k + expert] = value;
    }
}

/// Numerically stable softmax at temperature 1.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `softmax(sim(u, c))` over the cluster centers.
pub fn alpha_coefficients(u: &GradientEmbedding, cluster: &ClusterModel) -> Result<Vec<f64>> {
    Ok(softmax(&cluster::similarity(u, cluster)?))
}

/// α rows for a batch, embedding each task by its meta-gradient at `theta_clu`.
///
/// A task whose gradient vanishes gets uniform weights.
pub fn alpha_matrix(
    theta_clu: &ParamVector,
    tasks: &[Episode],
    cluster: &ClusterModel,
    inner: &InnerCfg,
    order: Order,
) -> Result<CoefMatrix> {
    let rows: Vec<Vec<f64>> = tasks
        .par_iter()
        .map(|t| match task_embedding(theta_clu, t, inner, order, EmbeddingSource::QueryGrad) {
            Ok(u) => alpha_coefficients(&u, cluster),
            Err(Error::DegenerateEmbedding) => {
                warn!("zero task gradient at theta_clu; using uniform alpha");
                Ok(vec![1.0 / cluster.k() as f64; cluster.k()])
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    CoefMatrix::from_rows(rows)
}

/// Outcome of one ensemble update.
#[derive(Debug, Clone)]
pub struct TrainStep {
    pub ensemble: Ensemble,
    /// `Σ_i Σ_j alpha_ij · L_ij` averaged over tasks.
    pub weighted_loss: f64,
    pub alpha: CoefMatrix,
}

/// One training step on a task batch; α is recomputed from `theta_clu`.
pub fn ensemble_train_step(
    ens: &Ensemble,
    tasks: &[Episode],
    theta_clu: &ParamVector,
    inner: &InnerCfg,
    outer: &OuterCfg,
) -> Result<TrainStep> {
    if tasks.is_empty() {
        return Err(Error::invalid("training step needs at least one task"));
    }
    inner.validate()?;
    outer.validate()?;
    let alpha = alpha_matrix(theta_clu, tasks, &ens.cluster, inner, outer.order)?;
    let (ensemble, weighted_loss) = weighted_train_step(ens, tasks, &alpha, inner, outer)?;
    Ok(TrainStep {
        ensemble,
        weighted_loss,
        alpha,
    })
}

/// Update every expert from the same pre-step snapshot:
/// `e_j ← e_j − lr · Σ_i alpha_ij · meta_grad(e_j, task_i)`.
///
/// Pairs with zero weight are skipped.
pub fn weighted_train_step(
    ens: &Ensemble,
    tasks: &[Episode],
    alpha: &CoefMatrix,
    inner: &InnerCfg,
    outer: &OuterCfg,
) -> Result<(Ensemble, f64)> {
    if alpha.n_rows() != tasks.len() || alpha.k() != ens.k() {
        return Err(Error::invalid(format!(
            "alpha is {}x{} for {} tasks and {} experts",
            alpha.n_rows(),
            alpha.k(),
            tasks.len(),
            ens.k()
        )));
    }
    let pairs: Vec<(usize, usize)> = (0..ens.k())
        .flat_map(|j| (0..tasks.len()).map(move |i| (j, i)))
        .filter(|&(j, i)| alpha.get(i, j) != 0.0)
        .collect();
    let grads: Vec<diffnet::MetaGrad> = pairs
        .par_iter()
        .map(|&(j, i)| {
            let t = &tasks[i];
            diffnet::meta_loss_and_grad(&ens.experts[j], &t.support, &t.query, inner.steps, inner.lr, outer.order)
                .map_err(|e| e.for_expert(j))
        })
        .collect::<Result<_>>()?;

    let scale = outer.reduction_scale(tasks.len());
    let mut experts = ens.experts.clone();
    let mut directions: Vec<ParamVector> = ens.experts.iter().map(|e| ParamVector::zeros(e.spec())).collect();
    let mut loss = 0.0;
    for (&(j, i), m) in pairs.iter().zip(&grads) {
        let a = alpha.get(i, j);
        directions[j].axpy(a, &m.grad);
        loss += a * m.query_loss;
    }
    for (j, (expert, dir)) in experts.iter_mut().zip(&directions).enumerate() {
        expert.axpy(-outer.lr * scale, dir);
        if !expert.is_finite() {
            return Err(Error::NumericOverflow {
                stage: "ensemble update",
                step: 0,
            }
            .for_expert(j));
        }
    }
    Ok((
        Ensemble {
            experts,
            cluster: ens.cluster.clone(),
            provenance: ens.provenance.clone(),
        },
        loss / tasks.len() as f64,
    ))
}

/// Trained ensemble and its per-step weighted loss.
#[derive(Debug, Clone)]
pub struct Trained {
    pub ensemble: Ensemble,
    pub loss_history: Vec<f64>,
}

/// `outer.epochs` training steps, step `s` using `source.batch(s)`.
pub fn train_ensemble(
    ens: Ensemble,
    theta_clu: &ParamVector,
    source: &dyn TaskSource,
    inner: &InnerCfg,
    outer: &OuterCfg,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Trained> {
    let mut ensemble = ens;
    let mut loss_history = Vec::with_capacity(outer.epochs);
    for step in 0..outer.epochs {
        let tasks = source.batch(step as u64, outer.batch_size)?;
        let out = ensemble_train_step(&ensemble, &tasks, theta_clu, inner, outer).map_err(|e| match e {
            Error::Expert { index, source } if source.is_numeric() => Error::Expert {
                index,
                source: Box::new(Error::NumericOverflow {
                    stage: "ensemble training",
                    step,
                }),
            },
            other => other,
        })?;
        ensemble = out.ensemble;
        loss_history.push(out.weighted_loss);
        on_step(step, out.weighted_loss);
    }
    Ok(Trained {
        ensemble,
        loss_history,
    })
}

/// Adapt each expert on the support set independently.
pub fn fine_tune_experts(ens: &Ensemble, support: &Batch, inner: &InnerCfg) -> Result<Vec<ParamVector>> {
    inner.validate()?;
    ens.experts
        .par_iter()
        .enumerate()
        .map(|(j, e)| maml::inner_adapt(e, support, inner).map_err(|err| err.for_expert(j)))
        .collect()
}

/// `softmax` of each expert's support loss; higher loss gives a larger entry.
///
/// Entries that underflow are floored at the smallest normal double so the
/// vector can be divided by.
pub fn expert_errors(adapted: &[ParamVector], support: &Batch) -> Result<Vec<f64>> {
    if adapted.is_empty() {
        return Err(Error::invalid("no experts"));
    }
    let losses: Vec<f64> = adapted
        .iter()
        .enumerate()
        .map(|(j, p)| diffnet::mse_loss(p, support).map_err(|e| e.for_expert(j)))
        .collect::<Result<_>>()?;
    Ok(softmax(&losses).into_iter().map(|e| e.max(f64::MIN_POSITIVE)).collect())
}

/// Voting weights `softmax(sim / err)`.
///
/// Small errors make the ratios huge, so underflowed weights are floored like
/// the errors themselves; every expert keeps a (vanishing) positive vote.
pub fn beta_weights(sim: &[f64], err: &[f64]) -> Result<Vec<f64>> {
    if sim.is_empty() || sim.len() != err.len() {
        return Err(Error::invalid(format!("{} similarities for {} errors", sim.len(), err.len())));
    }
    if let Some(e) = err.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(Error::invalid(format!("error entries must be positive, got {e}")));
    }
    if sim.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("similarities must be finite"));
    }
    let ratio: Vec<f64> = sim.iter().zip(err).map(|(s, e)| s / e).collect();
    Ok(softmax(&ratio).into_iter().map(|b| b.max(f64::MIN_POSITIVE)).collect())
}

/// Convex combination of expert outputs on row-major `inputs`.
pub fn ensemble_predict_flat(adapted: &[ParamVector], beta: &[f64], inputs: &[f64]) -> Result<Vec<f64>> {
    let Some(first) = adapted.first() else {
        return Err(Error::invalid("no experts"));
    };
    if beta.len() != adapted.len() {
        return Err(Error::invalid(format!("{} weights for {} experts", beta.len(), adapted.len())));
    }
    let spec = first.spec();
    if adapted.iter().any(|p| p.spec() != spec) {
        return Err(Error::invalid("experts must share one network shape"));
    }
    if inputs.is_empty() || inputs.len() % spec.input_dim() != 0 {
        return Err(Error::invalid(format!(
            "{} input values do not form rows of width {}",
            inputs.len(),
            spec.input_dim()
        )));
    }
    let n = inputs.len() / spec.input_dim();
    let mut out = vec![0.0; n * spec.output_dim()];
    for (p, &b) in adapted.iter().zip(beta) {
        for (o, y) in out.iter_mut().zip(diffnet::forward_flat(p, inputs)) {
            *o += b * y;
        }
    }
    Ok(out)
}

/// [`ensemble_predict_flat`] over a list of input vectors.
pub fn ensemble_predict(adapted: &[ParamVector], beta: &[f64], inputs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let Some(first) = adapted.first() else {
        return Err(Error::invalid("no experts"));
    };
    let (din, dout) = (first.spec().input_dim(), first.spec().output_dim());
    if inputs.iter().any(|x| x.len() != din) {
        return Err(Error::invalid(format!("inputs must have dimension {din}")));
    }
    let flat = ensemble_predict_flat(adapted, beta, &inputs.concat())?;
    Ok(flat.chunks_exact(dout).map(<[f64]>::to_vec).collect())
}

/// Which expert parameters the error vector is measured on.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorBasis {
    #[default]
    Adapted,
    Initial,
}

/// Test-time knobs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// How the test task is embedded for the similarity term.
    pub embedding: EmbeddingSource,
    /// Order of the meta-gradient when `embedding` is a meta-gradient.
    pub order: Order,
    pub error_basis: ErrorBasis,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            embedding: EmbeddingSource::SupportMetaGrad,
            order: Order::Second,
            error_basis: ErrorBasis::Adapted,
        }
    }
}

/// Everything the test-time pipeline produced for one task.
#[derive(Debug, Clone)]
pub struct EnsembleEval {
    pub query_mse: f64,
    pub similarity: Vec<f64>,
    pub errors: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Embed, fine-tune, weight and predict; returns the query MSE.
pub fn eeml_adapt_and_eval(
    ens: &Ensemble,
    theta_clu: &ParamVector,
    episode: &Episode,
    inner: &InnerCfg,
) -> Result<f64> {
    eeml_evaluate(ens, theta_clu, episode, inner, &EvalOptions::default()).map(|e| e.query_mse)
}

pub fn eeml_evaluate(
    ens: &Ensemble,
    theta_clu: &ParamVector,
    episode: &Episode,
    inner: &InnerCfg,
    opts: &EvalOptions,
) -> Result<EnsembleEval> {
    inner.validate()?;
    if opts.embedding == EmbeddingSource::QueryGrad {
        return Err(Error::config("test-time embeddings cannot use query labels"));
    }
    let similarity = match task_embedding(theta_clu, episode, inner, opts.order, opts.embedding) {
        Ok(u) => cluster::similarity(&u, &ens.cluster)?,
        Err(Error::DegenerateEmbedding) => {
            warn!("zero support gradient at theta_clu; using uniform similarity");
            vec![0.0; ens.k()]
        }
        Err(e) => return Err(e),
    };
    let adapted = fine_tune_experts(ens, &episode.support, inner)?;
    let errors = match opts.error_basis {
        ErrorBasis::Adapted => expert_errors(&adapted, &episode.support)?,
        ErrorBasis::Initial => expert_errors(&ens.experts, &episode.support)?,
    };
    let beta = beta_weights(&similarity, &errors)?;
    let pred = ensemble_predict_flat(&adapted, &beta, episode.query.inputs())?;
    Ok(EnsembleEval {
        query_mse: diffnet::mse(&pred, episode.query.targets()),
        similarity,
        errors,
        beta,
    })
}
